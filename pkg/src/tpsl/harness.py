"""Experiment runner: configs, single points, sweeps, DP audits and coupling checks.

A sweep trains once per (mechanism, epsilon, repetition) point, runs the three
label-inference attacks on what the feature party received, and writes

* ``records.jsonl``: one :class:`MetricsRecord` per line,
* ``summary.csv``: medians per point,
* ``curve_<mech>_eps_test.csv`` / ``curve_<mech>_sda_test.csv`` with an SVG
  rendering of each.
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attacks import norm_attack, roc_auc, sda_score, spectral_scores
from .data import CsvSchema, Dataset, SyntheticSpec, gen_synthetic, load_csv, split_train_test, standardize
from .perturb import (
    MechanismError,
    PerturbMechanism,
    audit_epsilon,
    canonical_kind,
    epsilon_of,
    mech_for_epsilon,
    multi_discrete_frequencies,
)
from .protocol import (
    VARIANTS,
    Architecture,
    ProtocolConfig,
    coupling_test,
    predict_scores,
    run_protocol,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


class PointError(RuntimeError):
    """A sweep point failed; ``point`` names it and ``__cause__`` is the original error."""

    def __init__(self, point: str, cause: BaseException):
        super().__init__(f"{point}: {type(cause).__name__}: {cause}")
        self.point = point


# --- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a CSV path
    synthetic: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(separation=3.0))
    schema: CsvSchema = field(default_factory=CsvSchema)
    test_fraction: float = 0.2
    standardize: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    batches: int = 100
    lr: float = 0.05
    epochs: int = 1
    variant: str = "tpsl-last-hidden"
    arch: Architecture = field(default_factory=Architecture)
    mechanisms: tuple[str, ...] = ("none", "laplace")
    eps_grid: tuple[float, ...] = (0.1, 1.0, 10.0)
    gaussian_sigmas: tuple[float, ...] = ()
    reps: int = 5
    out_dir: str = "out"
    master_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        grid = tuple(float(e) for e in self.eps_grid)
        if any(not (e > 0 and math.isfinite(e)) for e in grid):
            raise ConfigError(f"epsilon grid must be strictly positive, got {list(grid)}")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError(f"epsilon grid must be strictly increasing, got {list(grid)}")
        if self.reps < 1:
            raise ConfigError("repetitions must be >= 1")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError(f"step size must be positive, got {self.lr}")
        if self.batches < 1 or self.epochs < 1:
            raise ConfigError("need at least one batch and one epoch")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.variant not in VARIANTS or self.variant == "vanilla":
            raise ConfigError(f"noisy points need a tpsl variant, got {self.variant!r}")
        if any(s <= 0 for s in self.gaussian_sigmas):
            raise ConfigError("Gaussian sigmas must be positive")
        try:
            kinds = tuple(canonical_kind(k) for k in self.mechanisms)
        except MechanismError as exc:
            raise ConfigError(str(exc)) from None
        object.__setattr__(self, "eps_grid", grid)
        object.__setattr__(self, "mechanisms", kinds)

    def protocol(self, mech: PerturbMechanism, seeds=(0, 1, 2)) -> ProtocolConfig:
        variant = "vanilla" if mech.kind == "none" else self.variant
        return ProtocolConfig(batches=self.batches, lr=self.lr, variant=variant, mechanism=mech,
                              epochs=self.epochs, init_seed=int(seeds[0]), order_seed=int(seeds[1]),
                              noise_seed=int(seeds[2]), arch=self.arch)


def _take(table: dict, allowed: set[str], where: str) -> dict:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    return table


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Build a config from the parsed TOML tables ``data``, ``protocol``, ``mechanisms``, ``sweep``."""
    _take(raw, {"data", "protocol", "mechanisms", "sweep"}, "top level")
    d = _take(dict(raw.get("data", {})), {"source", "n", "dim", "classes", "prior", "separation", "noise",
                                          "label_column", "feature_columns", "id_column",
                                          "test_fraction", "standardize"}, "data")
    p = _take(dict(raw.get("protocol", {})), {"batches", "lr", "epochs", "variant", "embed_dim",
                                              "bottom_hidden", "top_hidden"}, "protocol")
    m = _take(dict(raw.get("mechanisms", {})), {"kinds", "gaussian_sigmas"}, "mechanisms")
    s = _take(dict(raw.get("sweep", {})), {"eps", "reps", "out_dir", "master_seed", "workers"}, "sweep")
    try:
        source = str(d.pop("source", "synthetic"))
        if source != "synthetic" and base_dir is not None and not Path(source).is_absolute():
            source = str(base_dir / source)
        syn_keys = {"n", "dim", "classes", "prior", "separation", "noise"}
        synthetic = replace(SyntheticSpec(separation=3.0), **{k: d[k] for k in syn_keys if k in d})
        schema = CsvSchema(
            label_column=d.get("label_column", "label"),
            feature_columns=tuple(d["feature_columns"]) if "feature_columns" in d else None,
            classes=int(d.get("classes", 2)),
            id_column=d.get("id_column"),
        )
        data = DataConfig(source, synthetic, schema, float(d.get("test_fraction", 0.2)),
                          bool(d.get("standardize", True)))
        arch = Architecture(int(p.get("embed_dim", 16)), tuple(p.get("bottom_hidden", (32, 32))),
                            tuple(p.get("top_hidden", (32, 32))))
        out_dir = str(s.get("out_dir", "out"))
        if base_dir is not None and not Path(out_dir).is_absolute():
            out_dir = str(base_dir / out_dir)
        return ExperimentConfig(
            data=data,
            batches=int(p.get("batches", 100)),
            lr=float(p.get("lr", 0.05)),
            epochs=int(p.get("epochs", 1)),
            variant=str(p.get("variant", "tpsl-last-hidden")),
            arch=arch,
            mechanisms=tuple(m.get("kinds", ("none", "laplace"))),
            eps_grid=tuple(s.get("eps", (0.1, 1.0, 10.0))),
            gaussian_sigmas=tuple(float(x) for x in m.get("gaussian_sigmas", ())),
            reps=int(s.get("reps", 5)),
            out_dir=out_dir,
            master_seed=int(s.get("master_seed", 0)),
            workers=int(s.get("workers", 1)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such config file: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, base_dir=path.parent)


# --- data ----------------------------------------------------------------------


@dataclass(frozen=True)
class SplitData:
    train: Dataset
    test: Dataset


def _seed_ints(*key: int, n: int = 4) -> list[int]:
    return [int(v) for v in np.random.SeedSequence([int(k) for k in key]).generate_state(n)]


DATA_KEY = 2 ** 31 - 1  # keeps the data seed apart from the point seeds


def prepare_data(cfg: ExperimentConfig) -> SplitData:
    """Load or generate the data and split it; depends only on the master seed."""
    gen_seed, split_seed = _seed_ints(cfg.master_seed, DATA_KEY, n=2)
    if cfg.data.source == "synthetic":
        ds = gen_synthetic(cfg.data.synthetic, gen_seed)
    else:
        ds = load_csv(cfg.data.source, cfg.data.schema)
    if ds.classes != 2:
        raise ConfigError("the attack harness works on binary labels")
    train, test = split_train_test(ds, cfg.data.test_fraction, split_seed)
    if cfg.data.standardize:
        train, test = standardize(train, test)
    return SplitData(train, test)


# --- one point -------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRecord:
    mechanism: str
    eps: float | None
    sigma: float | None
    rep: int
    test_auc: float
    na_auc: float
    sa_auc: float
    sda_auc: float
    diverged_at: int | None
    wall_time: float

    def __post_init__(self):
        for name in ("test_auc", "na_auc", "sa_auc", "sda_auc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if (self.eps is None) != (self.mechanism in ("gaussian", "none")):
            raise ValueError("eps is recorded exactly for the mechanisms that have one")

    def to_json(self, with_time: bool = True) -> str:
        """One JSON object; floats carry 17 significant digits."""
        parts = []
        for f in fields(self):
            if f.name == "wall_time" and not with_time:
                continue
            v = getattr(self, f.name)
            if isinstance(v, float):
                text = f"{v:.17g}"
            else:
                text = json.dumps(v)
            parts.append(f"{json.dumps(f.name)}: {text}")
        return "{" + ", ".join(parts) + "}"

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


def _auc(scores, labels) -> float:
    """AUC that treats non-finite scores as uninformative ties.

    Scores overflow only on runs that diverged; NaN and infinities are mapped
    to the median of the finite scores so they neither help nor hurt.
    """
    s = np.asarray(scores, dtype=float)
    bad = ~np.isfinite(s)
    if bad.any():
        fill = float(np.median(s[~bad])) if (~bad).any() else 0.0
        s = np.where(bad, fill, s)
    return roc_auc(s, labels)


def point_mechanism(kind: str, eps: float | None = None, sigma: float | None = None) -> PerturbMechanism:
    kind = canonical_kind(kind)
    if kind == "none":
        return PerturbMechanism.none()
    if kind == "gaussian":
        if sigma is None:
            raise MechanismError("the Gaussian baseline needs a sigma")
        return PerturbMechanism.gaussian(sigma)
    if eps is None:
        raise MechanismError(f"{kind} needs an epsilon")
    if kind not in ("laplace", "discrete"):
        raise MechanismError(f"the harness trains on binary labels; {kind} is multi-class")
    return mech_for_epsilon(kind, eps)


def run_point(cfg: ExperimentConfig, mech: PerturbMechanism, rep: int, seed: int,
              data: SplitData | None = None, transcript_out=None) -> MetricsRecord:
    """Train once under ``mech`` and attack the resulting records.

    ``seed`` fixes model initialisation, batch order, noise and the spectral
    attack's start vectors; the data split depends only on the master seed.
    ``transcript_out``, if given, receives the binary transcript.
    """
    label = f"{mech.describe()} rep={rep}"
    try:
        start = time.perf_counter()
        data = data if data is not None else prepare_data(cfg)
        init_s, order_s, noise_s, attack_s = _seed_ints(seed, n=4)
        pcfg = cfg.protocol(mech, (init_s, order_s, noise_s))
        with warnings.catch_warnings(), np.errstate(all="ignore"):
            warnings.simplefilter("ignore", RuntimeWarning)
            result = run_protocol(data.train.features, data.train.labels, pcfg, ids=data.train.ids)
            if transcript_out is not None:
                Path(transcript_out).write_bytes(result.transcript.to_bytes())
            scores = predict_scores(result.theta_n, result.theta_l, data.test.features)
            rec = result.records
            na = norm_attack(rec.perturbed)
            sa = spectral_scores(rec.perturbed, rec.batch, np.random.default_rng(attack_s))
            sda = sda_score(rec.perturbed, rec.g0, rec.g1)
        eps = epsilon_of(mech)
        return MetricsRecord(
            mechanism=mech.kind,
            eps=eps,
            sigma=mech.scale if mech.kind == "gaussian" else None,
            rep=rep,
            test_auc=_auc(scores, data.test.labels),
            na_auc=_auc(na, rec.labels),
            sa_auc=_auc(sa, rec.labels),
            sda_auc=_auc(sda, rec.labels),
            diverged_at=result.diverged_at,
            wall_time=time.perf_counter() - start,
        )
    except (ConfigError, MechanismError):
        raise
    except Exception as exc:
        raise PointError(label, exc) from exc


# --- sweeps ----------------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    index: int
    kind: str
    eps: float | None
    sigma: float | None

    def mechanism(self) -> PerturbMechanism:
        return point_mechanism(self.kind, self.eps, self.sigma)


def sweep_points(cfg: ExperimentConfig) -> list[SweepPoint]:
    pts: list[SweepPoint] = []
    for kind in cfg.mechanisms:
        if kind == "none":
            pts.append(SweepPoint(len(pts), kind, None, None))
        elif kind == "gaussian":
            if not cfg.gaussian_sigmas:
                raise ConfigError("gaussian listed without gaussian_sigmas")
            for s in cfg.gaussian_sigmas:
                pts.append(SweepPoint(len(pts), kind, None, float(s)))
        else:
            point_mechanism(kind, cfg.eps_grid[0] if cfg.eps_grid else 1.0)  # validates the kind
            for e in cfg.eps_grid:
                pts.append(SweepPoint(len(pts), kind, float(e), None))
    return pts


def point_seed(master: int, index: int, rep: int) -> int:
    return _seed_ints(master, index, rep, n=1)[0]


def _run_task(args) -> MetricsRecord:
    cfg, point, rep, data = args
    return run_point(cfg, point.mechanism(), rep, point_seed(cfg.master_seed, point.index, rep), data)


@dataclass
class SweepResult:
    records: list[MetricsRecord]
    out_dir: Path
    files: list[Path]


def summarize(records: list[MetricsRecord]) -> list[dict]:
    """Median test and attack AUC per (mechanism, eps, sigma), in first-seen order."""
    groups: dict[tuple, list[MetricsRecord]] = {}
    for r in records:
        groups.setdefault((r.mechanism, r.eps, r.sigma), []).append(r)
    rows = []
    for (kind, eps, sigma), rs in groups.items():
        rows.append({
            "mechanism": kind, "eps": eps, "sigma": sigma, "reps": len(rs),
            "test_auc": float(np.median([r.test_auc for r in rs])),
            "na_auc": float(np.median([r.na_auc for r in rs])),
            "sa_auc": float(np.median([r.sa_auc for r in rs])),
            "sda_auc": float(np.median([r.sda_auc for r in rs])),
            "diverged": sum(r.diverged_at is not None for r in rs),
        })
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[list]):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _render_svg(path: Path, xs, ys, xlabel: str, ylabel: str, title: str, logx: bool = False):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "tpsl"
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, ys, marker="o")
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_outputs(records: list[MetricsRecord], out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    files = [out / "records.jsonl", out / "summary.csv"]
    with files[0].open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    summary = summarize(records)
    cols = ["mechanism", "eps", "sigma", "reps", "test_auc", "na_auc", "sa_auc", "sda_auc", "diverged"]
    _write_csv(files[1], cols, [[row[c] for c in cols] for row in summary])

    for kind in dict.fromkeys(row["mechanism"] for row in summary):
        rows = [row for row in summary if row["mechanism"] == kind]
        if kind in ("laplace", "discrete"):
            rows.sort(key=lambda r: r["eps"])
            csv_path = out / f"curve_{kind}_eps_test.csv"
            _write_csv(csv_path, ["eps", "test_auc"], [[r["eps"], r["test_auc"]] for r in rows])
            svg_path = csv_path.with_suffix(".svg")
            _render_svg(svg_path, [r["eps"] for r in rows], [r["test_auc"] for r in rows],
                        "epsilon", "test AUC", f"{kind}: utility vs epsilon", logx=True)
            files += [csv_path, svg_path]
        pairs = sorted((r["sda_auc"], r["test_auc"]) for r in rows)
        csv_path = out / f"curve_{kind}_sda_test.csv"
        _write_csv(csv_path, ["sda_auc", "test_auc"], [list(p) for p in pairs])
        svg_path = csv_path.with_suffix(".svg")
        _render_svg(svg_path, [p[0] for p in pairs], [p[1] for p in pairs],
                    "SDA AUC", "test AUC", f"{kind}: utility vs leakage")
        files += [csv_path, svg_path]
    return files


def sweep(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> SweepResult:
    """Run every (mechanism, eps, rep) point and write the artifacts.

    Records come out in point order whatever the worker count, and each point
    seeds itself from ``(master_seed, point index, rep)``.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    points = sweep_points(cfg)
    records: list[MetricsRecord] = []
    if points:
        data = prepare_data(cfg)
        tasks = [(cfg, p, rep, data) for p in points for rep in range(cfg.reps)]
        workers = cfg.workers if workers is None else workers
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(_run_task, tasks))
        else:
            records = [_run_task(t) for t in tasks]
    files = write_outputs(records, out)
    return SweepResult(records, out, files)


def strip_wall_time(jsonl_text: str) -> str:
    """``records.jsonl`` content with the wall-time fields removed."""
    return "\n".join(MetricsRecord.from_json(line).to_json(with_time=False)
                     for line in jsonl_text.splitlines() if line.strip())


def calibrate_gaussian_sigma(cfg: ExperimentConfig, target_sda: float, lo: float = 1e-4, hi: float = 10.0,
                             iters: int = 12, seed: int = 0, data: SplitData | None = None) -> float:
    """Bisect ``log sigma`` until the Gaussian baseline's SDA AUC is near ``target_sda``.

    SDA AUC falls as sigma grows, so the bracket ``[lo, hi]`` is narrowed
    towards the side that overshoots. Returns the geometric midpoint of the
    final bracket.
    """
    if not 0.5 <= target_sda <= 1.0:
        raise ConfigError("target SDA AUC must lie in [0.5, 1]")
    data = data if data is not None else prepare_data(cfg)
    a, b = math.log(lo), math.log(hi)
    for _ in range(iters):
        mid = 0.5 * (a + b)
        rec = run_point(cfg, PerturbMechanism.gaussian(math.exp(mid)), 0, seed, data)
        if rec.sda_auc > target_sda:
            a = mid
        else:
            b = mid
    return math.exp(0.5 * (a + b))


# --- DP audit ---------------------------------------------------------------------


@dataclass(frozen=True)
class DpRow:
    kind: str
    claimed_eps: float
    mechanism_eps: float
    eps_hat: float
    std_error: float
    passed: bool
    detail: str = ""


def dpcheck(kind: str, eps_list, trials: int = 1_000_000, seed: int = 0,
            mechanism_eps=None, classes: int = 2) -> list[DpRow]:
    """Audit a mechanism at each claimed epsilon.

    The mechanism is built for ``mechanism_eps`` (default: the claimed value),
    so a deliberately mis-configured mechanism can be audited against a
    smaller claim. A row passes iff ``eps_hat <= claimed + 3 SE``. For the
    multi-class discrete mechanism each output frequency must also be within
    3 sigma of its nominal probability.
    """
    kind = canonical_kind(kind)
    if kind in ("gaussian", "none"):
        raise MechanismError(f"dpcheck does not support the {kind} mechanism: it has no pure-DP epsilon")
    eps_list = [float(e) for e in eps_list]
    mech_eps = eps_list if mechanism_eps is None else [float(e) for e in mechanism_eps]
    if len(mech_eps) != len(eps_list):
        raise ValueError("one mechanism epsilon per claimed epsilon")
    if trials < 1:
        raise ValueError("need at least one trial")
    rows = []
    for i, (claim, actual) in enumerate(zip(eps_list, mech_eps)):
        mech = mech_for_epsilon(kind, actual, classes)
        rng = np.random.default_rng(_seed_ints(seed, i, n=1)[0])
        res = audit_epsilon(mech, trials, rng)
        ok = res.eps_hat <= claim + 3.0 * res.std_error
        detail = res.method
        if kind == "multi_discrete":
            freqs = multi_discrete_frequencies(mech, 0, trials, rng)
            nominal = np.full(classes, (1.0 - mech.stay_prob) / (classes - 1))
            nominal[0] = mech.stay_prob
            sigma = np.sqrt(nominal * (1.0 - nominal) / trials)
            worst = float(np.max(np.abs(freqs - nominal) / sigma))
            ok = ok and worst <= 3.0
            detail += f", max freq deviation {worst:.2f} sigma"
        rows.append(DpRow(kind, claim, actual, res.eps_hat, res.std_error, bool(ok), detail))
    return rows


def format_dp_table(rows: list[DpRow]) -> str:
    lines = [f"{'mechanism':15s} {'claimed':>9s} {'eps_hat':>12s} {'3*SE':>10s}  result"]
    for r in rows:
        lines.append(f"{r.kind:15s} {r.claimed_eps:9.4g} {r.eps_hat:12.6g} {3 * r.std_error:10.3g}  "
                     f"{'PASS' if r.passed else 'FAIL'}  ({r.detail})")
    return "\n".join(lines)


# --- coupling check ------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingReport:
    variant: str
    mechanism: str
    total: int
    passed: int
    expected_fail: bool
    failures: tuple[int, ...]

    @property
    def ok(self) -> bool:
        """Every index coupled, or (vanilla control) at least one did not."""
        if self.expected_fail:
            return self.passed < self.total
        return self.passed == self.total

    def describe(self) -> str:
        tag = " (expected-fail control)" if self.expected_fail else ""
        return f"{self.variant} / {self.mechanism}: {self.passed}/{self.total} coupled{tag}"


def couplingcheck(variant: str = "tpsl", mech: PerturbMechanism | None = None, n: int = 32,
                  batches: int = 4, seed: int = 0, flip_indices=None, dim: int = 6,
                  lr: float = 0.1, threaded: bool = False) -> CouplingReport:
    """Run the neighbouring-dataset coupling test at every flip index of a small dataset."""
    mech = mech if mech is not None else mech_for_epsilon("laplace", 1.0)
    if variant == "vanilla":
        mech = PerturbMechanism.none()
    data_seed, init_s, order_s, noise_s = _seed_ints(seed, n=4)
    ds = gen_synthetic(SyntheticSpec(n=n, dim=dim, prior=0.5, separation=2.0), data_seed)
    cfg = ProtocolConfig(batches=batches, lr=lr, variant=variant, mechanism=mech,
                         init_seed=init_s, order_seed=order_s, noise_seed=noise_s,
                         arch=Architecture(4, (8,), (8,)))
    indices = range(n) if flip_indices is None else list(flip_indices)
    failures = []
    for i in indices:
        if not 0 <= i < n:
            raise IndexError(f"flip index {i} outside 0..{n - 1}")
        if not coupling_test(ds.features, ds.labels, i, cfg, threaded=threaded):
            failures.append(i)
    total = len(indices)
    return CouplingReport(variant, mech.kind, total, total - len(failures), variant == "vanilla",
                          tuple(failures))
