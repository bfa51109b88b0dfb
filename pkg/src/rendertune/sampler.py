"""Differentiable sampling of rendering parameters from learnable bin
distributions.

A continuous rendering parameter (pose angle, zoom factor) is discretized
into k equal bins carrying a categorical distribution. Draws are
reparametrized so the sampled value is a differentiable function of the
distribution's logits:

    y        = softmax((G + log p) / tau),  G i.i.d. Gumbel(0,1)
    center   = sum_i y_i * bin_center_i
    interval = [center - width/2, center + width/2]
    value    = (1 - eps) * start + eps * end,  eps ~ U(0,1)

The same code path runs on plain numpy values (cheap forward sampling) or
on tape variables (gradient replay with the recorded noise); both produce
bit-identical values.

Lighting is not sampled: it is a simplex-constrained affine mixture of
known embeddings, optimized by projected gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Var

PROB_FLOOR = 1e-8  # floor applied to probabilities before the log

__all__ = [
    "BinDistribution",
    "BinGeometry",
    "SampleTrace",
    "LightingMixture",
    "softmax",
    "gumbel_noise",
    "gumbel_softmax",
    "draw_pose",
    "replay_pose",
    "sample_bin",
    "mix_lighting",
    "project_simplex",
    "score_function_grad",
    "tv_distance",
]


def softmax(logits):
    """Shift-stabilized softmax; works on arrays and tape variables."""
    m = ad.vmax(logits)
    e = ad.exp(logits - m)
    return e / ad.vsum(e)


@dataclass
class BinDistribution:
    """Learnable categorical distribution over k bins of a continuous range.

    Stored as unconstrained logits; probabilities are softmax(logits), so
    outer-loop SGD needs no projection on this path.
    """

    logits: np.ndarray
    range: tuple[float, float] = (0.0, 360.0)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 1 or self.k < 2:
            raise ValueError("need at least 2 bins")
        lo, hi = self.range
        if not hi > lo:
            raise ValueError(f"empty range {self.range}")

    @property
    def k(self) -> int:
        return self.logits.shape[0]

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    @classmethod
    def uniform(cls, k: int, range=(0.0, 360.0)) -> "BinDistribution":
        return cls(np.zeros(k), range)

    @classmethod
    def dominant(cls, k: int, bin_index: int, weight: float = 0.85, range=(0.0, 360.0)) -> "BinDistribution":
        """Distribution putting ``weight`` mass on one bin, rest uniform."""
        p = np.full(k, (1.0 - weight) / (k - 1))
        p[bin_index] = weight
        return cls.from_probs(p, range)

    @classmethod
    def from_probs(cls, probs, range=(0.0, 360.0)) -> "BinDistribution":
        p = np.asarray(probs, dtype=np.float64)
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be positive and sum to 1")
        return cls(np.log(p), range)

    def geometry(self) -> "BinGeometry":
        return BinGeometry.for_range(self.range[0], self.range[1], self.k)


@dataclass(frozen=True)
class BinGeometry:
    """Centers and common width of k equal bins spanning [lo, hi]."""

    centers: np.ndarray
    width: float

    @classmethod
    def for_range(cls, lo: float, hi: float, k: int) -> "BinGeometry":
        width = (hi - lo) / k
        centers = lo + (hi - lo) * (np.arange(1, k + 1) - 0.5) / k
        return cls(centers, width)

    def __post_init__(self):
        if np.any(np.diff(self.centers) <= 0):
            raise ValueError("bin centers must be strictly increasing")


@dataclass
class SampleTrace:
    """One reparametrized draw, with the noise needed to replay it."""

    gumbels: np.ndarray
    weights: np.ndarray
    approx_center: float
    bin_start: float
    bin_end: float
    eps: float
    value: float
    seed: int | None = None

    @property
    def hard_bin(self) -> int:
        """Index of the bin the draw falls in (Gumbel-max)."""
        return int(np.argmax(self.weights))


@dataclass
class LightingMixture:
    """Appearance embedding as a convex combination of known embeddings."""

    coeffs: np.ndarray
    embeddings: np.ndarray  # (n_embeddings, embed_dim)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.coeffs.shape[0] != self.embeddings.shape[0]:
            raise ValueError("one coefficient per embedding required")
        _check_simplex(self.coeffs)

    @classmethod
    def uniform(cls, embeddings) -> "LightingMixture":
        embeddings = np.asarray(embeddings, dtype=np.float64)
        n = embeddings.shape[0]
        return cls(np.full(n, 1.0 / n), embeddings)


def _check_simplex(v, tol=1e-9):
    if abs(float(np.sum(v)) - 1.0) > tol or np.min(v) < -tol:
        raise ValueError(f"coefficients are off the probability simplex: {v}")


def gumbel_noise(k: int, seed: int) -> tuple[np.ndarray, float]:
    """k Gumbel(0,1) draws plus one uniform, from one seeded stream."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=k + 1)
    return -np.log(-np.log(u[:k])), float(u[k])


def _relaxed_weights(logits, tau: float, gumbels: np.ndarray):
    """softmax((G + log p)/tau), the differentiable surrogate for a
    categorical draw; generic over numpy and tape values."""
    p = softmax(logits)
    logp = ad.log(ad.clampmin(p, PROB_FLOOR))
    return softmax((gumbels + logp) / tau)


def _pose_from_noise(logits, geom: BinGeometry, tau: float, gumbels: np.ndarray, eps: float):
    """The full draw recipe from fixed noise. Returns
    (weights, approx_center, bin_start, bin_end, value)."""
    y = _relaxed_weights(logits, tau, gumbels)
    center = ad.dot(y, geom.centers)
    start = center - geom.width / 2.0
    end = center + geom.width / 2.0
    value = (1.0 - eps) * start + eps * end
    return y, center, start, end, value


def gumbel_softmax(dist: BinDistribution, tau: float, rng_seed: int, gumbels=None) -> SampleTrace:
    """Relaxed categorical draw; only the weights part of a trace.

    ``gumbels`` overrides the noise (test hook / replay).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if gumbels is None:
        gumbels, _ = gumbel_noise(dist.k, rng_seed)
    gumbels = np.asarray(gumbels, dtype=np.float64)
    y = _relaxed_weights(dist.logits, tau, gumbels)
    return SampleTrace(gumbels, y, np.nan, np.nan, np.nan, np.nan, np.nan, seed=rng_seed)


def draw_pose(dist: BinDistribution, geom: BinGeometry, tau: float, rng_seed: int,
              gumbels=None, eps=None) -> SampleTrace:
    """Sample one continuous value through the four-step recipe."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if gumbels is None or eps is None:
        g, e = gumbel_noise(dist.k, rng_seed)
        gumbels = g if gumbels is None else np.asarray(gumbels, dtype=np.float64)
        eps = e if eps is None else float(eps)
    else:
        gumbels = np.asarray(gumbels, dtype=np.float64)
        eps = float(eps)
    y, center, start, end, value = _pose_from_noise(dist.logits, geom, tau, gumbels, eps)
    return SampleTrace(gumbels, y, center, start, end, eps, value, seed=rng_seed)


def replay_pose(logits: Var, geom: BinGeometry, tau: float, trace: SampleTrace):
    """Re-run a recorded draw with the logits on a tape.

    Returns (value, weights) as tape variables. Forward values are
    bit-identical to the original draw.
    """
    if trace.gumbels is None or not np.isfinite(trace.eps):
        raise ValueError("trace does not carry replayable noise")
    y, _center, _start, _end, value = _pose_from_noise(logits, geom, tau, trace.gumbels, trace.eps)
    return value, y


def sample_bin(dist: BinDistribution, rng_seed: int) -> int:
    """Hard categorical draw via the Gumbel-max trick (shared noise stream
    with the relaxed sampler)."""
    g, _ = gumbel_noise(dist.k, rng_seed)
    logp = np.log(np.maximum(softmax(dist.logits), PROB_FLOOR))
    return int(np.argmax(g + logp))


def mix_lighting(mix: LightingMixture):
    """Convex combination of the embeddings; d(out)/d(coeff_i) is embedding i."""
    _check_simplex(mix.coeffs)
    return _mix(mix.coeffs, mix.embeddings)


def _mix(coeffs, embeddings: np.ndarray):
    """Sequential weighted sum, generic over numpy and tape coefficients."""
    out = ad.index(coeffs, 0) * embeddings[0]
    for i in range(1, embeddings.shape[0]):
        out = out + ad.index(coeffs, i) * embeddings[i]
    return out


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w : sum w = 1, w >= 0} (sort-and-threshold)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, v.size + 1)
    cond = u + (1.0 - css) / j > 0
    rho = int(np.nonzero(cond)[0][-1]) + 1
    lam = (1.0 - css[rho - 1]) / rho
    return np.maximum(v + lam, 0.0)


def score_function_grad(dist: BinDistribution, per_bin_payoff, n_samples: int,
                        rng_seed: int, bins=None) -> np.ndarray:
    """REINFORCE estimate of d E[payoff(bin)] / d logits.

    (1/n) sum_j payoff[b_j] * (e_{b_j} - p) over hard categorical draws;
    unbiased, and the high-variance baseline the pathwise estimator is
    compared against. ``bins`` reuses pre-drawn bins (sample j otherwise
    uses seed ``rng_seed + j``).
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    payoff = np.asarray(per_bin_payoff, dtype=np.float64)
    if payoff.shape[0] != dist.k:
        raise ValueError("payoff must have one entry per bin")
    p = softmax(dist.logits)
    g = np.zeros(dist.k)
    if bins is None:
        bins = [sample_bin(dist, rng_seed + j) for j in range(n_samples)]
    elif len(bins) != n_samples:
        raise ValueError("bins length must equal n_samples")
    for b in bins:
        e = np.zeros(dist.k)
        e[b] = 1.0
        g += payoff[b] * (e - p)
    return g / n_samples


def tv_distance(p, q) -> float:
    """Total variation distance between two categorical distributions."""
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))
