"""Half-space geometry, the cycloidal and parabolic distances, and sampled norms.

State space is the closed half-space {x in R^d : x_d >= 0}; the last coordinate
is the degenerate direction.  The cycloidal distance

    s(P1, P2) = sum_i |x_i^1 - x_i^2|
                / (sqrt(x_d^1) + sqrt(x_d^2) + sqrt(sum_{i<d} |x_i^1 - x_i^2|))
              + sqrt(|t1 - t2|)

measures space-time separation in the scale natural to a sqrt(x_d) diffusion
degeneracy; the parabolic distance rho(P1, P2) = sum_i |x_i^1 - x_i^2| +
sqrt(|t1 - t2|) is the usual one.  The two are equivalent on slabs
x_d in [y0, y1] with 0 < y0 < y1 but not up to the boundary.

Hölder seminorms and weighted sup-norms over a region are uncomputable exactly,
so they are estimated by maxima over indexed quasi-random point pairs: pair i
is a pure function of (seed, i), which makes estimates deterministic, monotone
in the pair budget, and safe to evaluate concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng

# Sampling domains for this module (distinct from simulation noise domains).
_DOMAIN_PAIR_U = 101
_DOMAIN_PAIR_G = 102
_DOMAIN_SUP = 103

# Fraction of the x_d extent treated as the near-boundary stratum, and the
# share of the pair budget spent there.
_BOUNDARY_STRATUM = 0.1
_MIN_PAIR_SCALE = 1e-4

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]
"""Scalar field over space-time: (ts of shape (n,), xs of shape (n, d)) -> (n,)."""


@dataclass(frozen=True)
class SpaceTimePoint:
    """A point (t, x) with x in the closed half-space (x_d >= 0)."""

    t: float
    x: tuple[float, ...]

    def __post_init__(self) -> None:
        x = tuple(float(v) for v in self.x)
        object.__setattr__(self, "x", x)
        if len(x) < 1:
            raise ValueError("spatial dimension must be >= 1")
        if x[-1] < 0.0:
            raise ValueError(f"x_d = {x[-1]} lies below the half-space boundary")
        if self.t < 0.0:
            raise ValueError("time must be nonnegative")

    @property
    def d(self) -> int:
        return len(self.x)

    @property
    def xd(self) -> float:
        return self.x[-1]

    def as_arrays(self) -> tuple[float, np.ndarray]:
        return self.t, np.asarray(self.x, dtype=float)


@dataclass(frozen=True)
class Region:
    """Space-time box [t0, t1] x prod_i [lower_i, upper_i], lower_d >= 0."""

    t0: float
    t1: float
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        lower = tuple(float(v) for v in self.lower)
        upper = tuple(float(v) for v in self.upper)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if len(lower) != len(upper) or len(lower) < 1:
            raise ValueError("lower/upper bounds must share a dimension >= 1")
        if self.t0 > self.t1:
            raise ValueError("need t0 <= t1")
        if any(lo > hi for lo, hi in zip(lower, upper)):
            raise ValueError("need lower <= upper per coordinate")
        if lower[-1] < 0.0:
            raise ValueError("region must lie in the closed half-space (lower_d >= 0)")

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def xd_slab(self) -> tuple[float, float]:
        """The x_d extent [y0, y1] of the region."""
        return self.lower[-1], self.upper[-1]

    @property
    def touches_boundary(self) -> bool:
        return self.lower[-1] == 0.0


@dataclass(frozen=True)
class HolderEstimate:
    """Sampled Hölder seminorm and sup-norm over a region.

    Both numbers are maxima over sampled admissible pairs/points, hence lower
    bounds for the true suprema.  ``pairs`` counts the admissible pairs that
    were actually scored; zero means the admissible set was empty and the
    estimate is vacuous.
    """

    seminorm: float
    sup_norm: float
    pairs: int
    metric: str
    alpha: float

    @property
    def empty(self) -> bool:
        return self.pairs == 0

    def to_json(self) -> dict:
        return {
            "seminorm": self.seminorm,
            "sup_norm": self.sup_norm,
            "pairs": self.pairs,
            "metric": self.metric,
            "alpha": self.alpha,
        }


def _check_same_dim(p1: SpaceTimePoint, p2: SpaceTimePoint) -> None:
    if p1.d != p2.d:
        raise ValueError(f"dimension mismatch: {p1.d} vs {p2.d}")


def cycloidal_distance_arrays(
    t1: np.ndarray, x1: np.ndarray, t2: np.ndarray, x2: np.ndarray
) -> np.ndarray:
    """Vectorized cycloidal distance for batches of points (x arrays (n, d))."""
    if np.any(x1[..., -1] < 0.0) or np.any(x2[..., -1] < 0.0):
        raise ValueError("cycloidal distance requires x_d >= 0")
    diff = np.abs(x1 - x2)
    num = diff.sum(axis=-1)
    tangential = diff[..., :-1].sum(axis=-1) if x1.shape[-1] > 1 else np.zeros_like(num)
    den = np.sqrt(x1[..., -1]) + np.sqrt(x2[..., -1]) + np.sqrt(tangential)
    spatial = np.where(num > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
    return spatial + np.sqrt(np.abs(np.asarray(t1) - np.asarray(t2)))


def parabolic_distance_arrays(
    t1: np.ndarray, x1: np.ndarray, t2: np.ndarray, x2: np.ndarray
) -> np.ndarray:
    diff = np.abs(x1 - x2).sum(axis=-1)
    return diff + np.sqrt(np.abs(np.asarray(t1) - np.asarray(t2)))


def cycloidal_distance(p1: SpaceTimePoint, p2: SpaceTimePoint) -> float:
    """Cycloidal distance s(P1, P2); zero iff P1 = P2, symmetric."""
    _check_same_dim(p1, p2)
    t1, x1 = p1.as_arrays()
    t2, x2 = p2.as_arrays()
    return float(cycloidal_distance_arrays(t1, x1[None, :], t2, x2[None, :])[0])


def parabolic_distance(p1: SpaceTimePoint, p2: SpaceTimePoint) -> float:
    """Parabolic distance rho(P1, P2) = sum |x_i^1 - x_i^2| + sqrt(|t1 - t2|)."""
    _check_same_dim(p1, p2)
    t1, x1 = p1.as_arrays()
    t2, x2 = p2.as_arrays()
    return float(parabolic_distance_arrays(t1, x1[None, :], t2, x2[None, :])[0])


_METRICS = {
    "cycloidal": cycloidal_distance_arrays,
    "parabolic": parabolic_distance_arrays,
}


def _sample_pair_batch(
    region: Region, seed: int, index0: int, count: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pairs (P1, P2) for indices [index0, index0+count); pair i depends only on (seed, i).

    Even-indexed pairs are confined to the near-boundary stratum
    x_d < lower_d + 0.1 * slab height, where the degeneracy lives.  P2 is P1
    displaced by a log-uniform scale along a random direction (time displaced
    quadratically so sqrt(|dt|) matches the spatial scale), then clipped back
    into the region.
    """
    d = region.d
    idx = np.arange(index0, index0 + count, dtype=np.uint64)
    u = rng.uniforms(seed, _DOMAIN_PAIR_U, idx, 0, d + 2)
    g = rng.normals(seed, _DOMAIN_PAIR_G, idx, 0, d + 1)

    lower = np.asarray(region.lower)
    upper = np.asarray(region.upper)
    width = upper - lower

    x1 = lower + u[:, :d] * width
    near = (np.arange(index0, index0 + count) % 2) == 0
    xd_cap = lower[-1] + _BOUNDARY_STRATUM * width[-1]
    x1[near, -1] = lower[-1] + u[near, d - 1] * (xd_cap - lower[-1])
    t1 = region.t0 + u[:, d] * (region.t1 - region.t0)

    diam = max(float(width.max(initial=0.0)), region.t1 - region.t0, 1e-12)
    scale = diam * np.exp(np.log(_MIN_PAIR_SCALE) + u[:, d + 1] * np.log(1.0 / _MIN_PAIR_SCALE))
    unit = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
    x2 = x1 + scale[:, None] * unit[:, 1:]
    t2 = t1 + np.sign(unit[:, 0]) * (scale * unit[:, 0]) ** 2

    x2 = np.clip(x2, lower, upper)
    t2 = np.clip(t2, region.t0, region.t1)
    return t1, x1, t2, x2


def _holder_scan(
    field: Field,
    region: Region,
    alpha: float,
    metric: str,
    pair_budget: int,
    seed: int,
) -> tuple[HolderEstimate, dict | None]:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if pair_budget < 1:
        raise ValueError("pair_budget must be >= 1")
    if metric not in _METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    dist_fn = _METRICS[metric]

    seminorm = 0.0
    sup_norm = 0.0
    scored = 0
    witness: dict | None = None
    batch = 4096
    done = 0
    while done < pair_budget:
        count = min(batch, pair_budget - done)
        t1, x1, t2, x2 = _sample_pair_batch(region, seed, done, count)
        u1 = np.asarray(field(t1, x1), dtype=float)
        u2 = np.asarray(field(t2, x2), dtype=float)
        sup_norm = max(sup_norm, float(np.abs(u1).max()), float(np.abs(u2).max()))
        dist = dist_fn(t1, x1, t2, x2)
        ok = (dist > 0.0) & (dist <= 1.0)
        scored += int(ok.sum())
        if np.any(ok):
            ratios = np.abs(u1 - u2) / np.where(ok, dist, 1.0) ** alpha
            ratios[~ok] = -np.inf
            k = int(np.argmax(ratios))
            if ratios[k] > seminorm:
                seminorm = float(ratios[k])
                witness = {
                    "p1": {"t": float(t1[k]), "x": [float(v) for v in x1[k]]},
                    "p2": {"t": float(t2[k]), "x": [float(v) for v in x2[k]]},
                    "distance": float(dist[k]),
                }
        done += count
    est = HolderEstimate(
        seminorm=seminorm, sup_norm=sup_norm, pairs=scored, metric=metric, alpha=alpha
    )
    return est, witness


def holder_seminorm_estimate(
    field: Field,
    region: Region,
    alpha: float,
    metric: str,
    pair_budget: int,
    seed: int,
) -> HolderEstimate:
    """Sampled Hölder seminorm sup |u(P1)-u(P2)| / dist(P1,P2)^alpha over the region.

    Only pairs with dist <= 1 are scored, so the estimate targets the local
    Hölder condition rather than an unrestricted seminorm.  Deterministic given
    the seed; nondecreasing in ``pair_budget`` for a fixed seed.
    """
    est, _ = _holder_scan(field, region, alpha, metric, pair_budget, seed)
    return est


def weighted_sup_norm(
    field: Field,
    region: Region,
    q: float,
    n_samples: int = 4096,
    seed: int = 0,
) -> float:
    """Sampled sup of (1+|x|)^q |u(t,x)| over the region (q >= 0)."""
    if q < 0.0:
        raise ValueError("growth exponent q must be >= 0")
    d = region.d
    idx = np.arange(n_samples, dtype=np.uint64)
    u = rng.uniforms(seed, _DOMAIN_SUP, idx, 0, d + 1)
    lower = np.asarray(region.lower)
    upper = np.asarray(region.upper)
    xs = lower + u[:, :d] * (upper - lower)
    near = (np.arange(n_samples) % 2) == 0
    xd_cap = lower[-1] + _BOUNDARY_STRATUM * (upper[-1] - lower[-1])
    xs[near, -1] = lower[-1] + u[near, d - 1] * (xd_cap - lower[-1])
    ts = region.t0 + u[:, d] * (region.t1 - region.t0)
    vals = np.asarray(field(ts, xs), dtype=float)
    weight = (1.0 + np.linalg.norm(xs, axis=1)) ** q
    return float(np.max(weight * np.abs(vals)))
