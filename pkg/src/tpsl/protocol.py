"""Two-party split learning: vanilla SGD, TPSL and its last-hidden-layer variant.

The feature party holds features and the bottom network, the label party
holds labels and the top network. They only talk through :class:`Channel`,
which records every message into a :class:`Transcript`.

Variants:

``vanilla``
    the label party returns true gradients and updates with them.
``tpsl``
    the gradient sent back and the label party's own update are perturbed
    with two independent GradPerturb draws per sample.
``tpsl-last-hidden``
    one draw per sample perturbs the loss gradient at the logits; the sent
    gradient and the update are both derived from it.

Binary GradPerturb on a sigmoid/BCE head is evaluated as the true gradient
at a soft target (see :func:`tpsl.perturb.soft_target`), which equals
``g_y + u (g_{1-y} - g_y)`` algebraically.
"""

from __future__ import annotations

import io
import queue
import struct
import threading
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import roc_auc
from .data import FeatureView, LabelView, PartyViews
from .nn import MlpModel, backprop, forward, init_mlp, logit_residual
from .perturb import (
    MechanismError,
    NoiseCache,
    NoiseDraw,
    PerturbMechanism,
    draw_noise,
    flipped_partner,
    mixing_weights,
    quantize_draw,
    replay_or_draw,
    soft_target,
)

VARIANTS = ("vanilla", "tpsl", "tpsl-last-hidden")

TO_LABEL_PARTY = 0
TO_FEATURE_PARTY = 1
EMBEDDING = 0
GRADIENT = 1

# noise streams: GradPerturb on the sent gradient, on the label party's update,
# and the batch-level Gaussian parameter noise of the baseline
G_STREAM, U_STREAM, PARAM_STREAM = 0, 1, 2


class ProtocolError(ValueError):
    pass


class DivergenceError(ProtocolError):
    """A party's update or message became non-finite."""


def _finite_step(model: MlpModel, mean_grad: np.ndarray, lr: float, who: str) -> MlpModel:
    theta = model.flat() - lr * mean_grad
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(f"{who} parameters became non-finite")
    return model.with_flat(theta)


# --- wire format -------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    direction: int
    kind: int
    batch: int
    vectors: np.ndarray

    _HEAD = struct.Struct("<BBIII")

    def to_bytes(self) -> bytes:
        v = np.ascontiguousarray(self.vectors, dtype="<f8")
        count, d = v.shape
        body = self._HEAD.pack(self.direction, self.kind, self.batch, count, d) + v.tobytes()
        return struct.pack("<I", len(body)) + body

    @classmethod
    def read_from(cls, buf: io.BufferedIOBase) -> "Message | None":
        prefix = buf.read(4)
        if not prefix:
            return None
        if len(prefix) != 4:
            raise ProtocolError("truncated record length")
        (length,) = struct.unpack("<I", prefix)
        body = buf.read(length)
        if len(body) != length or length < cls._HEAD.size:
            raise ProtocolError("truncated transcript record")
        direction, kind, batch, count, d = cls._HEAD.unpack_from(body)
        payload = body[cls._HEAD.size:]
        if len(payload) != 8 * count * d:
            raise ProtocolError(f"record for batch {batch}: payload size does not match {count}x{d}")
        vectors = np.frombuffer(payload, dtype="<f8").reshape(count, d).astype(float)
        return cls(direction, kind, batch, vectors)


class Transcript:
    """Append-only record of every message that crossed the channel."""

    def __init__(self, messages=None):
        self._messages: list[Message] = list(messages or [])
        self._lock = threading.Lock()

    def append(self, msg: Message):
        with self._lock:
            self._messages.append(msg)

    def __len__(self) -> int:
        return len(self._messages)

    def __iter__(self):
        return iter(self._messages)

    def __getitem__(self, i):
        return self._messages[i]

    def to_bytes(self) -> bytes:
        return b"".join(m.to_bytes() for m in self._messages)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Transcript":
        buf = io.BytesIO(data)
        msgs = []
        while (m := Message.read_from(buf)) is not None:
            msgs.append(m)
        return cls(msgs)

    def __eq__(self, other) -> bool:
        return isinstance(other, Transcript) and self.to_bytes() == other.to_bytes()

    def describe(self) -> str:
        lines = []
        for i, m in enumerate(self._messages):
            arrow = "P_N -> P_L" if m.direction == TO_LABEL_PARTY else "P_L -> P_N"
            kind = "embeddings" if m.kind == EMBEDDING else "gradients"
            v = m.vectors
            lines.append(
                f"{i:5d}  batch {m.batch:4d}  {arrow}  {kind:10s}  {v.shape[0]}x{v.shape[1]}"
                f"  mean|v|={np.abs(v).mean():.6g}"
            )
        return "\n".join(lines)


def check_message_pattern(transcript: Transcript, n_batches: int) -> bool:
    """True iff every batch is one embedding message followed by one gradient message."""
    if len(transcript) != 2 * n_batches:
        return False
    for b in range(n_batches):
        e, g = transcript[2 * b], transcript[2 * b + 1]
        if (e.kind, e.direction, g.kind, g.direction) != (EMBEDDING, TO_LABEL_PARTY, GRADIENT, TO_FEATURE_PARTY):
            return False
        if e.batch != b or g.batch != b or e.vectors.shape[0] != g.vectors.shape[0]:
            return False
    return True


class Channel:
    """Ordered in-process link; records each message before delivering it."""

    def __init__(self, recorder: Transcript):
        self._q: queue.Queue = queue.Queue()
        self._recorder = recorder

    def send(self, msg: Message):
        self._recorder.append(msg)
        self._q.put(msg)

    def recv(self, timeout: float | None = 600.0) -> Message | None:
        """Next message, or ``None`` once the sender has stopped."""
        return self._q.get(timeout=timeout)

    def close(self):
        self._q.put(None)


@dataclass
class UpdateLog:
    feature_deltas: list = field(default_factory=list)
    label_deltas: list = field(default_factory=list)

    def to_bytes(self) -> bytes:
        parts = [np.asarray(d, dtype="<f8").tobytes() for pair in zip(self.feature_deltas, self.label_deltas)
                 for d in pair]
        return b"".join(parts)

    def __eq__(self, other) -> bool:
        return isinstance(other, UpdateLog) and self.to_bytes() == other.to_bytes()


# --- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    embed_dim: int = 16
    bottom_hidden: tuple[int, ...] = (32, 32)
    top_hidden: tuple[int, ...] = (32, 32)


@dataclass(frozen=True)
class ProtocolConfig:
    batches: int
    lr: float
    variant: str = "vanilla"
    mechanism: PerturbMechanism = field(default_factory=PerturbMechanism.none)
    epochs: int = 1
    init_seed: int = 0
    order_seed: int = 1
    noise_seed: int = 2
    arch: Architecture = field(default_factory=Architecture)
    shuffle: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ProtocolError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.batches < 1 or self.epochs < 1:
            raise ProtocolError("need at least one batch and one epoch")
        if not self.lr >= 0:
            raise ProtocolError(f"step size must be non-negative, got {self.lr}")


def init_models(n_features: int, classes: int, cfg: ProtocolConfig) -> tuple[MlpModel, MlpModel]:
    rng = np.random.default_rng(cfg.init_seed)
    a = cfg.arch
    bottom = init_mlp([n_features, *a.bottom_hidden, a.embed_dim], "identity", rng)
    if classes == 2:
        top = init_mlp([a.embed_dim, *a.top_hidden, 1], "sigmoid", rng)
    else:
        top = init_mlp([a.embed_dim, *a.top_hidden, classes], "softmax", rng)
    return bottom, top


def batch_schedule(n: int, batches: int, epochs: int, order_seed: int, shuffle: bool = True):
    """Public batch plan ``[(global_batch, epoch, rows)]`` shared by both parties."""
    size = n // batches
    if size == 0:
        raise ProtocolError(f"{n} samples cannot fill {batches} batches")
    rng = np.random.default_rng(order_seed)
    plan = []
    for ep in range(epochs):
        order = rng.permutation(n) if shuffle else np.arange(n)
        for b in range(batches):
            plan.append((ep * batches + b, ep, order[b * size:(b + 1) * size]))
    return plan


# --- parties ---------------------------------------------------------------------


class FeatureParty:
    """Holds features and the bottom model; never sees labels."""

    def __init__(self, view: FeatureView, model: MlpModel, lr: float):
        self.ids = view.ids
        self._features = view.features
        self.model = model
        self.lr = lr
        self._trace = None

    def embed(self, batch: int, rows) -> Message:
        self._trace = forward(self.model, self._features[rows])
        return Message(TO_LABEL_PARTY, EMBEDDING, batch, self._trace.output.copy())

    def apply_gradient(self, msg: Message) -> np.ndarray:
        if msg.kind != GRADIENT or self._trace is None:
            raise ProtocolError("gradient message without a pending forward pass")
        _, grad = backprop(self.model, self._trace, msg.vectors)
        mean = grad / msg.vectors.shape[0]
        self.model = _finite_step(self.model, mean, self.lr, "feature party")
        self._trace = None
        return -self.lr * mean


@dataclass
class BatchRecord:
    """Simulator-side per-sample artifacts of one batch (never sent to P_N)."""

    rows: np.ndarray
    embeddings: np.ndarray
    perturbed: np.ndarray
    candidates: np.ndarray


class LabelParty:
    """Holds labels and the top model; never sees raw features."""

    def __init__(self, view: LabelView, model: MlpModel, lr: float, variant: str,
                 mechanism: PerturbMechanism, noise_seed: int, cache: NoiseCache | None = None):
        self.ids = view.ids
        self._labels = view.labels
        self.classes = view.classes
        self.model = model
        self.lr = lr
        self.variant = variant
        self.mech = mechanism
        self.noise_seed = noise_seed
        self.cache = cache if cache is not None else NoiseCache()
        _check_mechanism(variant, mechanism, self.classes)

    def _draw(self, sample_id: int, stream: int, y: int, dim: int | None) -> NoiseDraw:
        def fresh():
            rng = np.random.default_rng([self.noise_seed, stream, sample_id])
            return draw_noise(self.mech, rng, y, dim)
        return replay_or_draw(self.cache, (sample_id, stream), fresh)

    def _perturbed_residual(self, out, resid, rows, stream) -> np.ndarray:
        """Loss gradient at the logits after GradPerturb, one row per sample."""
        mech = self.mech
        ys = self._labels[rows]
        sids = self.ids[rows]
        if mech.kind == "none":
            return resid
        if mech.kind == "gaussian":
            r = np.stack([self._draw(int(s), stream, int(y), out.shape[1]).value for s, y in zip(sids, ys)])
            return resid + r
        draws = [self._draw(int(s), stream, int(y), None) for s, y in zip(sids, ys)]
        if mech.is_binary:
            c = np.array([soft_target(int(y), d) for y, d in zip(ys, draws)])
            return out - c[:, None]
        a = np.stack([mixing_weights(int(y), d, self.classes) for y, d in zip(ys, draws)])
        return a.sum(axis=1)[:, None] * out - a

    def respond(self, msg: Message, rows):
        if msg.kind != EMBEDDING:
            raise ProtocolError("label party expected an embedding message")
        emb = msg.vectors
        trace = forward(self.model, emb)
        ys = self._labels[rows]
        resid = logit_residual(self.model, trace, ys)
        n_b = emb.shape[0]
        candidates = np.stack(
            [backprop(self.model, trace, logit_residual(self.model, trace, np.full(n_b, j)))[0]
             for j in range(self.classes)],
            axis=1,
        )
        if self.variant == "vanilla":
            g_tilde, grad_sum = backprop(self.model, trace, resid)
        elif self.mech.kind == "gaussian" and self.variant == "tpsl":
            g_true, grad_sum = backprop(self.model, trace, resid)
            noise = np.stack([self._draw(int(s), G_STREAM, int(y), emb.shape[1]).value
                              for s, y in zip(self.ids[rows], ys)])
            g_tilde = g_true + noise
            prng = np.random.default_rng([self.noise_seed, PARAM_STREAM, msg.batch])
            grad_sum = grad_sum + self.mech.scale * np.sqrt(n_b) * prng.standard_normal(grad_sum.shape)
        elif self.variant == "tpsl":
            v_g = self._perturbed_residual(trace.output, resid, rows, G_STREAM)
            v_u = self._perturbed_residual(trace.output, resid, rows, U_STREAM)
            g_tilde, _ = backprop(self.model, trace, v_g)
            _, grad_sum = backprop(self.model, trace, v_u)
        else:
            v = self._perturbed_residual(trace.output, resid, rows, G_STREAM)
            g_tilde, grad_sum = backprop(self.model, trace, v)
        if not np.all(np.isfinite(g_tilde)):
            raise DivergenceError("label party produced non-finite gradients")
        reply = Message(TO_FEATURE_PARTY, GRADIENT, msg.batch, g_tilde)
        mean = grad_sum / n_b
        self.model = _finite_step(self.model, mean, self.lr, "label party")
        record = BatchRecord(np.asarray(rows), emb, g_tilde, candidates)
        return reply, -self.lr * mean, record


def _check_mechanism(variant: str, mech: PerturbMechanism, classes: int):
    if variant == "vanilla":
        if mech.kind != "none":
            raise ProtocolError("the vanilla variant takes no mechanism")
        return
    if classes == 2 and mech.is_multi:
        raise MechanismError(f"{mech.kind} is a multi-class mechanism but the labels are binary")
    if classes > 2 and mech.is_binary:
        raise MechanismError(f"{mech.kind} is binary but the labels have {classes} classes")
    if mech.is_multi and mech.classes != classes:
        raise MechanismError(f"mechanism built for {mech.classes} classes, data has {classes}")


# --- runs ---------------------------------------------------------------------------


@dataclass
class SampleRecords:
    """Per-sample training artifacts in processing order.

    ``candidates[i, j]`` is the gradient the label party would have sent for
    label ``j``; ``perturbed`` is what it actually sent.
    """

    ids: np.ndarray
    labels: np.ndarray
    batch: np.ndarray
    epoch: np.ndarray
    embeddings: np.ndarray
    perturbed: np.ndarray
    candidates: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def g0(self) -> np.ndarray:
        return self.candidates[:, 0]

    @property
    def g1(self) -> np.ndarray:
        return self.candidates[:, 1]


@dataclass
class RunResult:
    theta_n: MlpModel
    theta_l: MlpModel
    transcript: Transcript
    updates: UpdateLog
    records: SampleRecords
    cache: NoiseCache
    init_n: MlpModel
    init_l: MlpModel
    n_batches: int
    diverged_at: int | None = None


def _prepare(features, labels, classes, cfg: ProtocolConfig):
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels).astype(int)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ProtocolError(f"{x.shape[0] if x.ndim else 0} feature rows for {y.shape[0]} labels")
    if classes is None:
        classes = max(2, int(y.max()) + 1) if y.size else 2
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ProtocolError(f"labels outside 0..{classes - 1}")
    n = x.shape[0]
    keep = (n // cfg.batches) * cfg.batches
    if keep == 0:
        raise ProtocolError(f"{n} samples cannot fill {cfg.batches} batches")
    if keep < n:
        warnings.warn(f"dropping the last {n - keep} samples so {cfg.batches} batches divide the data",
                      stacklevel=3)
    return x[:keep], y[:keep], classes


def run_protocol(features, labels, cfg: ProtocolConfig, *, classes: int | None = None,
                 ids=None, cache: NoiseCache | None = None, threaded: bool = False,
                 models: tuple[MlpModel, MlpModel] | None = None) -> RunResult:
    """Run any variant. ``cache`` may be pre-seeded with forced draws."""
    x, y, classes = _prepare(features, labels, classes, cfg)
    n = x.shape[0]
    ids = np.arange(n) if ids is None else np.asarray(ids)[:n].astype(int)
    views = PartyViews(FeatureView(ids, x), LabelView(ids, y, classes))
    bottom, top = models if models is not None else init_models(x.shape[1], classes, cfg)
    fp = FeatureParty(views.feature_party, bottom, cfg.lr)
    lp = LabelParty(views.label_party, top, cfg.lr, cfg.variant, cfg.mechanism, cfg.noise_seed, cache)
    plan = batch_schedule(n, cfg.batches, cfg.epochs, cfg.order_seed, cfg.shuffle)
    transcript = Transcript()
    to_label, to_feature = Channel(transcript), Channel(transcript)
    updates = UpdateLog()
    batch_records: list[BatchRecord] = []
    stopped: list[int] = []

    def feature_finish(b) -> bool:
        msg = to_feature.recv()
        if msg is None:
            return False
        try:
            updates.feature_deltas.append(fp.apply_gradient(msg))
        except DivergenceError:
            stopped.append(b)
            to_label.close()
            return False
        return True

    def label_step(b, rows) -> bool:
        msg = to_label.recv()
        if msg is None:
            return False
        try:
            reply, delta, rec = lp.respond(msg, rows)
        except DivergenceError:
            stopped.append(b)
            to_feature.close()
            return False
        to_feature.send(reply)
        updates.label_deltas.append(delta)
        batch_records.append(rec)
        return True

    if threaded:
        errors = []

        def feature_side():
            for b, _, rows in plan:
                to_label.send(fp.embed(b, rows))
                if not feature_finish(b):
                    break

        def label_side():
            for b, _, rows in plan:
                if not label_step(b, rows):
                    break

        def guarded(fn, peer):
            def inner():
                try:
                    fn()
                except BaseException as exc:  # re-raised after join
                    errors.append(exc)
                    peer.close()
            return inner

        threads = [threading.Thread(target=guarded(feature_side, to_label)),
                   threading.Thread(target=guarded(label_side, to_feature))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
    else:
        for b, _, rows in plan:
            to_label.send(fp.embed(b, rows))
            if not label_step(b, rows) or not feature_finish(b):
                break

    if not batch_records:
        raise DivergenceError("training diverged in the first batch")
    plan = plan[:len(batch_records)]
    rows_all = np.concatenate([r.rows for r in batch_records])
    records = SampleRecords(
        ids=ids[rows_all],
        labels=y[rows_all],
        batch=np.concatenate([np.full(r.rows.size, b) for (b, _, _), r in zip(plan, batch_records)]),
        epoch=np.concatenate([np.full(r.rows.size, ep) for (_, ep, _), r in zip(plan, batch_records)]),
        embeddings=np.concatenate([r.embeddings for r in batch_records]),
        perturbed=np.concatenate([r.perturbed for r in batch_records]),
        candidates=np.concatenate([r.candidates for r in batch_records]),
    )
    return RunResult(fp.model, lp.model, transcript, updates, records, lp.cache, bottom, top, len(plan),
                     min(stopped) if stopped else None)


def _run_variant(features, labels, cfg, variant, **kw) -> RunResult:
    if cfg.variant != variant:
        raise ProtocolError(f"config variant is {cfg.variant!r}, expected {variant!r}")
    return run_protocol(features, labels, cfg, **kw)


def run_vanilla(features, labels, cfg: ProtocolConfig, **kw) -> RunResult:
    return _run_variant(features, labels, cfg, "vanilla", **kw)


def run_tpsl(features, labels, cfg: ProtocolConfig, **kw) -> RunResult:
    return _run_variant(features, labels, cfg, "tpsl", **kw)


def run_tpsl_last_hidden(features, labels, cfg: ProtocolConfig, **kw) -> RunResult:
    return _run_variant(features, labels, cfg, "tpsl-last-hidden", **kw)


def predict_scores(theta_n: MlpModel, theta_l: MlpModel, features) -> np.ndarray:
    out = forward(theta_l, forward(theta_n, features).output).output
    return out[:, 0] if out.shape[1] == 1 else out


def predict_auc(theta_n: MlpModel, theta_l: MlpModel, features, labels) -> float:
    """Test ROC AUC; macro one-vs-rest for more than two classes."""
    x = np.asarray(features, dtype=float)
    if x.shape[0] == 0:
        raise ProtocolError("empty test set")
    scores = predict_scores(theta_n, theta_l, x)
    y = np.asarray(labels).astype(int)
    if scores.ndim == 1:
        return roc_auc(scores, y)
    return float(np.mean([roc_auc(scores[:, j], (y == j).astype(int)) for j in range(scores.shape[1])]))


# --- neighbouring-dataset coupling ----------------------------------------------


@dataclass(frozen=True)
class CouplingOutcome:
    identical: bool
    vacuous: bool
    flip_batch: int
    first_mismatch: int | None

    def __bool__(self) -> bool:
        return self.identical


def _first_mismatch(a: Transcript, b: Transcript) -> int | None:
    for i, (ma, mb) in enumerate(zip(a, b)):
        if ma.to_bytes() != mb.to_bytes():
            return i
    return None if len(a) == len(b) else min(len(a), len(b))


def coupling_test(features, labels, flip_index: int, cfg: ProtocolConfig, *,
                  classes: int | None = None, threaded: bool = False) -> CouplingOutcome:
    """Run ``D`` and ``D'`` (one label flipped) under coupled randomness.

    Every seed is shared. At the flipped sample the draws are forced so that
    GradPerturb returns the same vector in both runs: Laplace ``u`` against
    ``1 - u``, the other support point for Bernoulli, the same kept label for
    multi-class discrete. Laplace draws there are rounded to a dyadic grid so
    that ``1 - (1 - u) == u`` holds in floating point. The outcome is true iff
    transcripts and update logs agree byte for byte.
    """
    x, y, classes = _prepare(features, labels, classes, cfg)
    if not 0 <= flip_index < y.shape[0]:
        raise IndexError(f"flip index {flip_index} outside 0..{y.shape[0] - 1}")
    y_flip = y.copy()
    y_flip[flip_index] = 1 - y[flip_index] if classes == 2 else (y[flip_index] + 1) % classes
    plan = batch_schedule(y.shape[0], cfg.batches, cfg.epochs, cfg.order_seed, cfg.shuffle)
    flip_batch = next(b for b, _, rows in plan if flip_index in rows)

    cache_d, cache_f = NoiseCache(), NoiseCache()
    vacuous = False
    mech = cfg.mechanism
    if cfg.variant != "vanilla" and mech.kind != "none":
        if mech.kind == "gaussian":
            vacuous = True
        else:
            _check_mechanism(cfg.variant, mech, classes)
            streams = (G_STREAM, U_STREAM) if cfg.variant == "tpsl" else (G_STREAM,)
            yd, yf = int(y[flip_index]), int(y_flip[flip_index])
            for s in streams:
                base = draw_noise(mech, np.random.default_rng([cfg.noise_seed, s, flip_index]), yd)
                base = quantize_draw(base)
                cache_d.put((flip_index, s), base)
                cache_f.put((flip_index, s), flipped_partner(base, yd, yf))
    if vacuous:
        return CouplingOutcome(True, True, flip_batch, None)
    run_d = run_protocol(x, y, cfg, classes=classes, cache=cache_d, threaded=threaded)
    run_f = run_protocol(x, y_flip, cfg, classes=classes, cache=cache_f, threaded=threaded)
    same = run_d.transcript == run_f.transcript and run_d.updates == run_f.updates
    return CouplingOutcome(same, False, flip_batch, _first_mismatch(run_d.transcript, run_f.transcript))


def with_mechanism(cfg: ProtocolConfig, mech: PerturbMechanism, variant: str | None = None) -> ProtocolConfig:
    return replace(cfg, mechanism=mech, variant=variant or cfg.variant)
