"""Label-inference attacks on the gradients a feature party receives.

* norm attack: squared L2 norm of the received gradient (black box)
* spectral attack: projection on the top principal direction of the
  mini-batch gradients (black box)
* shortest-distance attack: which candidate gradient ``g_0``/``g_1`` is closer
  (white box, needs the label party's parameters)

All attacks emit real-valued scores; :func:`attack_auc` turns scores into the
area under the ROC curve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class AttackScores:
    name: str
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        y = np.asarray(self.labels)
        if s.shape != y.shape or s.ndim != 1:
            raise ValueError(f"{s.shape[0]} scores for {y.shape[0]} labels")
        if not np.all(np.isfinite(s)):
            raise ValueError(f"{self.name}: non-finite attack scores")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)


def roc_auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic; tied pairs count one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def attack_auc(scores: AttackScores) -> float:
    return roc_auc(scores.scores, scores.labels)


def norm_attack(g) -> float | np.ndarray:
    """Squared L2 norm, per row for a 2-D input."""
    g = np.asarray(g, dtype=float)
    out = np.einsum("...i,...i->...", g, g)
    return float(out) if out.ndim == 0 else out


# --- spectral ---------------------------------------------------------------


@dataclass(frozen=True)
class SpectralStats:
    mean: np.ndarray
    direction: np.ndarray
    degenerate: bool = False


def top_eigenvector(mat, max_iter: int = 5000, tol: float = 1e-12,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Dominant eigenvector of a symmetric PSD matrix by power iteration."""
    a = np.asarray(mat, dtype=float)
    if rng is None:
        rng = np.random.default_rng(0)
    x = rng.standard_normal(a.shape[0])
    x /= np.linalg.norm(x)
    for _ in range(max_iter):
        y = a @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            break
        y /= norm
        # sign-insensitive change
        delta = min(np.linalg.norm(y - x), np.linalg.norm(y + x))
        x = y
        if delta < tol:
            break
    return x


def spectral_stats(batch, rng: np.random.Generator | None = None,
                   max_iter: int = 5000, tol: float = 1e-12) -> SpectralStats:
    g = np.asarray(batch, dtype=float)
    if g.ndim != 2 or g.shape[0] < 2:
        raise ValueError("spectral statistics need a batch of at least two vectors")
    mean = g.mean(axis=0)
    centered = g - mean
    cov = centered.T @ centered / g.shape[0]
    if not np.any(cov):
        return SpectralStats(mean, np.zeros(g.shape[1]), degenerate=True)
    v = top_eigenvector(cov, max_iter=max_iter, tol=tol, rng=rng)
    return SpectralStats(mean, v / np.linalg.norm(v))


def spectral_attack(g, stats: SpectralStats) -> float | np.ndarray:
    g = np.asarray(g, dtype=float)
    if stats.degenerate:
        return 0.0 if g.ndim == 1 else np.zeros(g.shape[0])
    out = np.abs((g - stats.mean) @ stats.direction)
    return float(out) if out.ndim == 0 else out


def spectral_scores(grads, batch_ids, rng: np.random.Generator | None = None) -> np.ndarray:
    """Spectral scores computed batch by batch and returned in input order."""
    grads = np.asarray(grads, dtype=float)
    batch_ids = np.asarray(batch_ids)
    out = np.zeros(grads.shape[0])
    if rng is None:
        rng = np.random.default_rng(0)
    for b in np.unique(batch_ids):
        idx = np.flatnonzero(batch_ids == b)
        if idx.size < 2:
            continue
        out[idx] = spectral_attack(grads[idx], spectral_stats(grads[idx], rng=rng))
    return out


# --- shortest distance --------------------------------------------------------


def sda_score(g_tilde, g0, g1):
    """``||g~ - g0||^2 - ||g~ - g1||^2``; positive means ``g1`` is closer."""
    g_tilde, g0, g1 = (np.asarray(a, dtype=float) for a in (g_tilde, g0, g1))
    out = np.sum((g_tilde - g0) ** 2, axis=-1) - np.sum((g_tilde - g1) ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


def shortest_distance_attack(g_tilde, g0, g1):
    """Guess 0 iff ``g~`` is at least as close to ``g0`` as to ``g1``.

    Returns ``(guess, score)``; works row-wise on stacked inputs.
    """
    score = sda_score(g_tilde, g0, g1)
    guess = (np.asarray(score) > 0).astype(int)
    return (int(guess), score) if np.ndim(score) == 0 else (guess, score)
