"""Label-perturbation mechanisms for gradients sent by the label party.

The binary mechanisms return ``g_y + u * (g_{1-y} - g_y)`` for a scalar ``u``
drawn from Laplace or Bernoulli noise; the multi-class ones return
``g_y + sum_i u_i g_i``. Each mechanism knows its pure-DP epsilon.

Randomness always comes from an explicit ``numpy.random.Generator``.
Laplace and Bernoulli draws are inverse-CDF transforms of one uniform so a
stored draw replays exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Hashable

import numpy as np

BINARY_KINDS = ("laplace", "discrete")
MULTI_KINDS = ("multi_laplace", "multi_discrete")
KINDS = BINARY_KINDS + MULTI_KINDS + ("gaussian", "none")

_ALIASES = {
    "lap": "laplace",
    "bern": "discrete",
    "rr": "discrete",
    "multi-laplace": "multi_laplace",
    "multi-discrete": "multi_discrete",
    "gauss": "gaussian",
    "nonoise": "none",
    "no_noise": "none",
}


class MechanismError(ValueError):
    """Mechanism used outside the setting it is defined for."""


def canonical_kind(kind: str) -> str:
    kind = kind.strip().lower()
    kind = _ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise MechanismError(f"unknown mechanism kind {kind!r}; choose from {', '.join(KINDS)}")
    return kind


@dataclass(frozen=True)
class PerturbMechanism:
    """Noise distribution for GradPerturb.

    Only the fields relevant to ``kind`` are meaningful: ``scale`` is the
    Laplace scale ``b`` or Gaussian ``sigma``, ``p`` the Bernoulli flip
    probability and ``eps`` the budget of the multi-class mechanisms.
    """

    kind: str
    scale: float = 0.0
    p: float = 0.0
    eps: float = 0.0
    classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        k = self.kind
        if k in ("laplace", "gaussian") and not self.scale > 0:
            raise MechanismError(f"{k} needs a positive scale, got {self.scale}")
        if k == "discrete" and not 0 < self.p <= 0.5:
            raise MechanismError(f"flip probability must lie in (0, 1/2], got {self.p}")
        if k in MULTI_KINDS:
            if not self.eps > 0:
                raise MechanismError(f"{k} needs eps > 0, got {self.eps}")
            if self.classes < 2:
                raise MechanismError("need at least two classes")

    @classmethod
    def laplace(cls, b: float) -> "PerturbMechanism":
        return cls("laplace", scale=float(b))

    @classmethod
    def discrete(cls, p: float) -> "PerturbMechanism":
        return cls("discrete", p=float(p))

    @classmethod
    def multi_laplace(cls, eps: float, k: int) -> "PerturbMechanism":
        return cls("multi_laplace", eps=float(eps), classes=int(k))

    @classmethod
    def multi_discrete(cls, eps: float, k: int) -> "PerturbMechanism":
        return cls("multi_discrete", eps=float(eps), classes=int(k))

    @classmethod
    def gaussian(cls, sigma: float) -> "PerturbMechanism":
        return cls("gaussian", scale=float(sigma))

    @classmethod
    def none(cls) -> "PerturbMechanism":
        return cls("none")

    @property
    def is_binary(self) -> bool:
        return self.kind in BINARY_KINDS

    @property
    def is_multi(self) -> bool:
        return self.kind in MULTI_KINDS

    @property
    def laplace_scale(self) -> float:
        """Per-coordinate Laplace scale (``2/eps`` for the multi-class variant)."""
        if self.kind == "laplace":
            return self.scale
        if self.kind == "multi_laplace":
            return 2.0 / self.eps
        raise MechanismError(f"{self.kind} is not a Laplace mechanism")

    @property
    def stay_prob(self) -> float:
        """Probability that the discrete mechanisms keep the true label."""
        if self.kind == "discrete":
            return 1.0 - self.p
        if self.kind == "multi_discrete":
            e = math.exp(self.eps)
            return e / (e + self.classes - 1)
        raise MechanismError(f"{self.kind} is not a discrete mechanism")

    def describe(self) -> str:
        k = self.kind
        if k == "laplace":
            return f"laplace(b={self.scale:g})"
        if k == "discrete":
            return f"discrete(p={self.p:g})"
        if k in MULTI_KINDS:
            return f"{k}(eps={self.eps:g}, k={self.classes})"
        if k == "gaussian":
            return f"gaussian(sigma={self.scale:g})"
        return "none"


def mech_for_epsilon(kind: str, eps: float, k: int = 2) -> PerturbMechanism:
    """Least noisy mechanism of ``kind`` that is ``(eps, 0)``-DP in the label."""
    kind = canonical_kind(kind)
    if not eps > 0 or not math.isfinite(eps):
        raise MechanismError(f"eps must be a positive finite number, got {eps}")
    if kind == "laplace":
        return PerturbMechanism.laplace(1.0 / eps)
    if kind == "discrete":
        return PerturbMechanism.discrete(1.0 / (math.exp(eps) + 1.0))
    if kind == "multi_laplace":
        return PerturbMechanism.multi_laplace(eps, k)
    if kind == "multi_discrete":
        return PerturbMechanism.multi_discrete(eps, k)
    if kind == "gaussian":
        raise MechanismError("the Gaussian baseline is not pure DP; it has no epsilon")
    raise MechanismError("the 'none' mechanism has no finite epsilon")


def epsilon_of(mech: PerturbMechanism) -> float | None:
    if mech.kind == "laplace":
        return 1.0 / mech.scale
    if mech.kind == "discrete":
        return math.log((1.0 - mech.p) / mech.p)
    if mech.is_multi:
        return mech.eps
    return None


# --- draws -----------------------------------------------------------------


@dataclass(frozen=True)
class NoiseDraw:
    """One realised noise value.

    ``value`` is the scalar ``u`` for binary mechanisms, the length-k vector
    ``u`` for multi-class ones (``e_j - e_y`` for the discrete variant) and
    the noise vector ``r`` for the Gaussian baseline.
    """

    kind: str
    value: float | np.ndarray

    def same_as(self, other: "NoiseDraw") -> bool:
        return self.kind == other.kind and np.array_equal(self.value, other.value)


def _open_uniform(rng: np.random.Generator, size=None):
    u = rng.random(size)
    # keeps the inverse CDF finite
    return np.maximum(u, 2.0 ** -60)


def laplace_icdf(uniform, b: float):
    """Inverse CDF of ``Lap(0, b)``."""
    w = np.asarray(uniform, dtype=float)
    out = np.where(w < 0.5, b * np.log(2.0 * w), -b * np.log(2.0 * (1.0 - w)))
    return float(out) if out.ndim == 0 else out


def laplace_logpdf(x, b: float):
    return -np.abs(x) / b - math.log(2.0 * b)


def draw_noise(mech: PerturbMechanism, rng: np.random.Generator, y: int = 0,
               dim: int | None = None) -> NoiseDraw:
    """Sample one draw; ``y`` matters only for ``multi_discrete`` and ``dim`` only for ``gaussian``."""
    k = mech.kind
    if k == "laplace":
        return NoiseDraw(k, laplace_icdf(_open_uniform(rng), mech.scale))
    if k == "discrete":
        return NoiseDraw(k, 1.0 if rng.random() < mech.p else 0.0)
    if k == "multi_laplace":
        return NoiseDraw(k, laplace_icdf(_open_uniform(rng, mech.classes), mech.laplace_scale))
    if k == "multi_discrete":
        target = _sample_kept_label(mech, int(y), rng.random())
        u = np.zeros(mech.classes)
        u[target] += 1.0
        u[int(y)] -= 1.0
        return NoiseDraw(k, u)
    if k == "gaussian":
        if dim is None:
            raise MechanismError("gaussian draws need the vector dimension")
        return NoiseDraw(k, mech.scale * rng.standard_normal(dim))
    return NoiseDraw(k, 0.0)


def _sample_kept_label(mech: PerturbMechanism, y: int, w: float) -> int:
    k = mech.classes
    if not 0 <= y < k:
        raise MechanismError(f"label {y} outside 0..{k - 1}")
    stay = mech.stay_prob
    if w < stay:
        return y
    j = min(int((w - stay) / (1.0 - stay) * (k - 1)), k - 2)
    return j if j < y else j + 1


def zero_draw(mech: PerturbMechanism, dim: int | None = None) -> NoiseDraw:
    """The draw under which GradPerturb returns ``g_y`` unchanged."""
    if mech.is_multi:
        return NoiseDraw(mech.kind, np.zeros(mech.classes))
    if mech.kind == "gaussian":
        return NoiseDraw(mech.kind, np.zeros(dim or 0))
    return NoiseDraw(mech.kind, 0.0)


def kept_label(draw: NoiseDraw, y: int) -> int:
    """Label whose gradient a ``multi_discrete`` draw made for label ``y`` selects."""
    hit = np.flatnonzero(np.asarray(draw.value) > 0)
    return int(hit[0]) if hit.size else int(y)


# --- GradPerturb -------------------------------------------------------------


def _check_draw(mech: PerturbMechanism, draw: NoiseDraw):
    if draw.kind != mech.kind:
        raise MechanismError(f"draw of kind {draw.kind} used with a {mech.kind} mechanism")


def grad_perturb_binary(y: int, g0, g1, mech: PerturbMechanism, rng: np.random.Generator | None = None,
                        draw: NoiseDraw | None = None):
    """GradPerturb for binary labels. Returns ``(perturbed, draw)``.

    Pass ``draw`` to replay a stored noise value instead of sampling.
    """
    if mech.is_multi:
        raise MechanismError(f"{mech.kind} is a multi-class mechanism; use grad_perturb_multi")
    if y not in (0, 1):
        raise MechanismError(f"binary label expected, got {y!r}")
    g0 = np.asarray(g0, dtype=float)
    g1 = np.asarray(g1, dtype=float)
    if g0.shape != g1.shape:
        raise ValueError(f"candidate gradients differ in shape: {g0.shape} vs {g1.shape}")
    gy, gother = (g0, g1) if y == 0 else (g1, g0)
    if draw is None:
        if rng is None and mech.kind != "none":
            raise ValueError("need a generator or an explicit draw")
        draw = draw_noise(mech, rng, y, dim=gy.size)
    _check_draw(mech, draw)
    if mech.kind == "none":
        return gy.copy(), draw
    if mech.kind == "gaussian":
        return gy + np.reshape(draw.value, gy.shape), draw
    if mech.kind == "discrete":
        # pick the candidate itself so the output is exactly g_0 or g_1
        return (gother if draw.value else gy).copy(), draw
    return gy + draw.value * (gother - gy), draw


def grad_perturb_multi(y: int, grads, mech: PerturbMechanism, rng: np.random.Generator | None = None,
                       draw: NoiseDraw | None = None):
    """GradPerturb over k candidate gradients. Returns ``(perturbed, draw)``."""
    if not mech.is_multi:
        raise MechanismError(f"{mech.kind} is not a multi-class mechanism")
    grads = np.asarray(grads, dtype=float)
    if grads.shape[0] != mech.classes:
        raise ValueError(f"expected {mech.classes} candidate gradients, got {grads.shape[0]}")
    if not 0 <= y < mech.classes:
        raise MechanismError(f"label {y} outside 0..{mech.classes - 1}")
    if draw is None:
        draw = draw_noise(mech, rng, y)
    _check_draw(mech, draw)
    if mech.kind == "multi_discrete":
        return grads[kept_label(draw, y)].copy(), draw
    u = np.asarray(draw.value)
    return grads[y] + np.tensordot(u, grads, axes=1), draw


def coupled_perturb_last_hidden(y: int, v0, v1, jac_e, jac_theta, mech: PerturbMechanism,
                                rng: np.random.Generator | None = None, draw: NoiseDraw | None = None):
    """Perturb the logit gradient once and push it through both Jacobians.

    ``v0``/``v1`` are the loss gradients at the logits for labels 0 and 1,
    ``jac_e`` maps logits to the embedding (shape ``(k, d)``) and
    ``jac_theta`` maps them to the flat parameters (shape ``(k, P)``).
    Returns ``(g_tilde, u_tilde, draw)``.
    """
    v0 = np.atleast_1d(np.asarray(v0, dtype=float))
    v1 = np.atleast_1d(np.asarray(v1, dtype=float))
    jac_e = np.atleast_2d(np.asarray(jac_e, dtype=float))
    jac_theta = np.atleast_2d(np.asarray(jac_theta, dtype=float))
    if jac_e.shape[0] != v0.size or jac_theta.shape[0] != v0.size:
        raise ValueError(
            f"Jacobians with {jac_e.shape[0]}/{jac_theta.shape[0]} rows for a {v0.size}-dim logit gradient"
        )
    v_tilde, draw = grad_perturb_binary(y, v0, v1, mech, rng, draw)
    return v_tilde @ jac_e, v_tilde @ jac_theta, draw


# --- canonical coefficients used by the protocol -------------------------------


def soft_target(y: int, draw: NoiseDraw) -> float:
    """Soft label ``c`` with ``GradPerturb(y, g0, g1) == (1 - c) g0 + c g1``.

    For a sigmoid/BCE head the loss gradient is affine in the label, so the
    perturbed gradient equals the plain gradient at target ``c``. Computing
    it this way makes ``u`` on label ``y`` and ``1 - u`` on the flipped label
    produce bit-identical outputs whenever ``1 - u`` is exact.
    """
    if draw.kind in ("none",):
        return float(y)
    if draw.kind not in BINARY_KINDS:
        raise MechanismError(f"no soft target for {draw.kind} draws")
    u = float(draw.value)
    return u if y == 0 else 1.0 - u


def mixing_weights(y: int, draw: NoiseDraw, k: int) -> np.ndarray:
    """Weights ``a`` with ``GradPerturb(y, g_0..g_{k-1}) == sum_i a_i g_i``."""
    if draw.kind == "multi_discrete":
        a = np.zeros(k)
        a[kept_label(draw, y)] = 1.0
        return a
    if draw.kind == "multi_laplace":
        a = np.array(draw.value, dtype=float, copy=True)
        a[y] += 1.0
        return a
    if draw.kind == "none":
        a = np.zeros(k)
        a[y] = 1.0
        return a
    raise MechanismError(f"no mixing weights for {draw.kind} draws")


def flipped_partner(draw: NoiseDraw, y: int, y_new: int) -> NoiseDraw:
    """Draw for label ``y_new`` that reproduces the output of ``draw`` on label ``y``.

    Laplace: ``1 - u``; Bernoulli: the other support point; multi-class
    discrete: the same kept label; multi-class Laplace: ``u + e_y - e_new``.
    """
    if draw.kind in BINARY_KINDS:
        return NoiseDraw(draw.kind, 1.0 - float(draw.value)) if y != y_new else draw
    if draw.kind == "multi_discrete":
        j = kept_label(draw, y)
        u = np.zeros(len(draw.value))
        u[j] += 1.0
        u[y_new] -= 1.0
        return NoiseDraw(draw.kind, u)
    if draw.kind == "multi_laplace":
        u = np.array(draw.value, dtype=float, copy=True)
        u[y] += 1.0
        u[y_new] -= 1.0
        return NoiseDraw(draw.kind, u)
    raise MechanismError(f"{draw.kind} draws cannot be coupled across a label flip")


def quantize_draw(draw: NoiseDraw, bits: int = 32, bound: float = 2.0 ** 19) -> NoiseDraw:
    """Round a continuous draw onto the grid ``2**-bits`` (clipped to ``bound``).

    On that grid ``1 - u`` and ``1 - (1 - u)`` are exact, which the coupling
    check relies on.
    """
    q = 2.0 ** bits
    v = np.clip(np.round(np.asarray(draw.value, dtype=float) * q) / q, -bound, bound)
    return NoiseDraw(draw.kind, float(v) if v.ndim == 0 else v)


# --- multi-epoch replay --------------------------------------------------------


class NoiseCache:
    """First draw per key, replayed verbatim on later uses.

    Single writer: the label party that owns the run.
    """

    def __init__(self):
        self._draws: dict[Hashable, NoiseDraw] = {}

    def __contains__(self, key) -> bool:
        return key in self._draws

    def __len__(self) -> int:
        return len(self._draws)

    def get(self, key) -> NoiseDraw | None:
        return self._draws.get(key)

    def put(self, key, draw: NoiseDraw):
        if key in self._draws:
            raise KeyError(f"draw for {key!r} already recorded")
        self._draws[key] = draw

    def items(self):
        return self._draws.items()


def replay_or_draw(cache: NoiseCache, sample_id: Hashable, draw_fn: Callable[[], NoiseDraw]) -> NoiseDraw:
    found = cache.get(sample_id)
    if found is not None:
        return found
    draw = draw_fn()
    cache.put(sample_id, draw)
    return draw


# --- empirical audit -----------------------------------------------------------


@dataclass(frozen=True)
class AuditResult:
    eps_hat: float
    std_error: float
    trials: int
    method: str


def audit_epsilon(mech: PerturbMechanism, trials: int = 1_000_000,
                  rng: np.random.Generator | None = None) -> AuditResult:
    """Estimate the worst-case privacy loss of one GradPerturb call.

    Discrete mechanisms are audited by Monte Carlo on the frequency of keeping
    the true label. Laplace mechanisms are audited analytically on a grid of
    output positions ``t`` along the ``g_0 -> g_1`` segment; the loss at
    ``t`` is ``log p(t) - log p(1 - t)``. Without noise the two outputs are
    disjoint and the loss is infinite.
    """
    k = mech.kind
    if k == "gaussian":
        raise MechanismError("the Gaussian baseline has no pure-DP epsilon to audit")
    if k == "none":
        return AuditResult(math.inf, 0.0, 0, "disjoint-support")
    if k in ("laplace", "multi_laplace"):
        b = mech.laplace_scale
        t = np.concatenate([np.linspace(-5.0 * b - 1.0, 5.0 * b + 2.0, 20001), [0.0, 1.0]])
        # log p(t) - log p(t - 1) = (|t - 1| - |t|) / b, written piecewise so the
        # plateaus are exact
        shift = np.clip(1.0 - 2.0 * t, -1.0, 1.0) / b
        if k == "laplace":
            eps_hat = float(np.abs(shift).max())
        else:
            # a flip moves two coordinates of e_y + u, each contributing one shift term
            eps_hat = float(shift.max() - shift.min())
        return AuditResult(eps_hat, 0.0, 0, "analytic-grid")
    if rng is None:
        rng = np.random.default_rng(0)
    if trials < 1:
        raise ValueError("need at least one trial")
    if k == "discrete":
        switch = np.count_nonzero(rng.random(trials) < mech.p)
        f = switch / trials
        if f in (0.0, 1.0):
            return AuditResult(math.inf, math.inf, trials, "monte-carlo")
        eps_hat = math.log((1.0 - f) / f)
        se = 1.0 / math.sqrt(trials * f * (1.0 - f))
        return AuditResult(eps_hat, se, trials, "monte-carlo")
    # multi_discrete: compare P(keep y | y) to P(output y | other label)
    freqs = multi_discrete_frequencies(mech, 0, trials, rng)
    stay, other = freqs[0], freqs[1:].mean()
    if other == 0:
        return AuditResult(math.inf, math.inf, trials, "monte-carlo")
    n_other = trials * (mech.classes - 1)
    eps_hat = math.log(stay / other)
    se = math.sqrt((1 - stay) / (trials * stay) + (1 - other) / (n_other * other))
    return AuditResult(eps_hat, se, trials, "monte-carlo")


def multi_discrete_frequencies(mech: PerturbMechanism, y: int, trials: int,
                               rng: np.random.Generator) -> np.ndarray:
    """Empirical output-label frequencies of the multi-class discrete mechanism."""
    if mech.kind != "multi_discrete":
        raise MechanismError("frequencies are defined for multi_discrete only")
    w = rng.random(trials)
    stay = mech.stay_prob
    k = mech.classes
    j = np.minimum(((w - stay) / (1.0 - stay) * (k - 1)).astype(int), k - 2)
    labels = np.where(w < stay, y, np.where(j < y, j, j + 1))
    return np.bincount(labels, minlength=k) / trials
