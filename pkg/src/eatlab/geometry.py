"""Geometry of the union of l1/l-inf balls and of its convex hull.

Closed forms for the smallest lp-norm of a point outside

    U = B_1(eps1) u B_inf(epsinf)        and        C = conv(U),

together with a ray-casting oracle that checks them numerically in low
dimension.  All arithmetic is float64.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Raised for invalid geometry queries."""


class DomainError(GeometryError):
    """The radii do not satisfy epsinf < eps1 < d * epsinf."""


class InvalidDimension(GeometryError):
    pass


class RegionKind(enum.Enum):
    UNION = "union"
    CONVEX_HULL = "hull"


@dataclass(frozen=True)
class GeometryQuery:
    eps1: float
    epsinf: float
    d: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise InvalidDimension(f"dimension must be an integer >= 2, got {self.d}")
        if not (self.eps1 > 0 and self.epsinf > 0):
            raise GeometryError(f"radii must be positive, got eps1={self.eps1}, epsinf={self.epsinf}")

    @property
    def nontrivial(self) -> bool:
        return self.epsinf < self.eps1 < self.d * self.epsinf


@dataclass(frozen=True)
class HullRadiusParts:
    ratio: float
    alpha: float
    q: float
    radius: float


def _check_p(p: float) -> float:
    p = float(p)
    if not (p >= 1.0):
        raise GeometryError(f"p must lie in [1, inf], got {p}")
    return p


def _require_nontrivial(q: GeometryQuery) -> None:
    if not q.nontrivial:
        raise DomainError(
            f"need epsinf < eps1 < d*epsinf, got eps1={q.eps1}, epsinf={q.epsinf}, d={q.d}; "
            "one ball contains the other, use single-ball logic"
        )


def dual_exponent(p: float) -> float:
    """Hoelder conjugate q with 1/p + 1/q = 1."""
    p = _check_p(p)
    if p == 1.0:
        return math.inf
    if math.isinf(p):
        return 1.0
    return p / (p - 1.0)


def nontrivial_range(epsinf: float, d: int) -> tuple[float, float]:
    """Open interval of l1 radii for which neither ball contains the other."""
    if int(d) != d or d < 2:
        raise InvalidDimension(f"dimension must be an integer >= 2, got {d}")
    if not epsinf > 0:
        raise GeometryError(f"epsinf must be positive, got {epsinf}")
    return (float(epsinf), float(d * epsinf))


def min_lp_outside_union(q: GeometryQuery, p: float) -> float:
    """Smallest lp-norm of a point outside B_1(eps1) u B_inf(epsinf)."""
    _require_nontrivial(q)
    p = _check_p(p)
    if p == 1.0:
        return float(q.eps1)
    if math.isinf(p):
        return float(q.epsinf)
    # (a^p + b^p / (d-1)^(p-1))^(1/p), evaluated in log space so large p
    # does not overflow
    log_a = p * math.log(q.epsinf)
    log_b = p * math.log(q.eps1 - q.epsinf) - (p - 1.0) * math.log(q.d - 1)
    top = max(log_a, log_b)
    s = math.exp(log_a - top) + math.exp(log_b - top)
    return math.exp((top + math.log(s)) / p)


def l2_union_upper_bound(q: GeometryQuery) -> float:
    _require_nontrivial(q)
    return math.sqrt(q.epsinf**2 + q.eps1**2 / (q.d - 1))


def min_lp_outside_hull(q: GeometryQuery, p: float) -> HullRadiusParts:
    """Smallest lp-norm of a point outside conv(B_1(eps1) u B_inf(epsinf)).

    radius = eps1 / (r - alpha + alpha**q) ** (1/q), with r = eps1/epsinf,
    alpha the fractional part of r and q the dual exponent of p.
    """
    _require_nontrivial(q)
    p = _check_p(p)
    ratio = q.eps1 / q.epsinf
    alpha = ratio - math.floor(ratio)
    qq = dual_exponent(p)
    if math.isinf(qq):
        # (floor(r) + alpha^q)^(1/q) -> 1 as q -> inf
        radius = float(q.eps1)
    elif qq == 1.0:
        radius = float(q.epsinf)
    else:
        radius = q.eps1 / (ratio - alpha + alpha**qq) ** (1.0 / qq)
    return HullRadiusParts(ratio=ratio, alpha=alpha, q=qq, radius=radius)


# ---------------------------------------------------------------------------
# membership and oracle


def _hull_residual(abs_y: np.ndarray, lam: np.ndarray, eps1: float, epsinf: float) -> np.ndarray:
    """sum_i max(|y_i| - (1-lam) epsinf, 0) - lam eps1, for each lam (last axis of abs_y is d)."""
    caps = (1.0 - lam)[..., None] * epsinf
    return np.maximum(abs_y[..., None, :] - caps, 0.0).sum(axis=-1) - lam * eps1


def hull_membership(point, q: GeometryQuery, grid: int = 1024, atol: float = 1e-12) -> bool:
    """Whether ``point`` lies in conv(B_1(eps1) u B_inf(epsinf)).

    For a mixing weight lam the point splits into an l-inf part bounded by
    (1-lam) epsinf (clipping) and an l1 remainder that must fit into
    lam eps1.  The residual is convex piecewise linear in lam, so the grid
    plus its kinks and the endpoints decide membership exactly.
    """
    y = np.asarray(point, dtype=np.float64).ravel()
    if y.shape[0] != q.d:
        raise GeometryError(f"point has dimension {y.shape[0]}, query has d={q.d}")
    abs_y = np.abs(y)
    kinks = 1.0 - abs_y / q.epsinf
    lam = np.concatenate([np.linspace(0.0, 1.0, grid + 1), kinks[(kinks > 0) & (kinks < 1)]])
    res = _hull_residual(abs_y, lam, q.eps1, q.epsinf)
    return bool(res.min() <= atol * max(1.0, q.eps1))


def _hull_members(abs_y: np.ndarray, eps1: float, epsinf: float) -> np.ndarray:
    """Vectorised exact membership for rows of abs_y (kinks and endpoints only)."""
    kinks = np.clip(1.0 - abs_y / epsinf, 0.0, 1.0)
    n = abs_y.shape[0]
    lam = np.concatenate([np.zeros((n, 1)), np.ones((n, 1)), kinks], axis=1)
    caps = (1.0 - lam)[:, :, None] * epsinf
    res = np.maximum(abs_y[:, None, :] - caps, 0.0).sum(axis=-1) - lam * eps1
    return res.min(axis=1) <= 1e-12 * max(1.0, eps1)


def _exit_scale_union(v: np.ndarray, q: GeometryQuery) -> np.ndarray:
    # the union is star-shaped: the ray leaves it once it has left both balls
    a = np.abs(v)
    return np.maximum(q.eps1 / a.sum(axis=-1), q.epsinf / a.max(axis=-1))


def _exit_scale_hull(v: np.ndarray, q: GeometryQuery, iters: int = 48) -> np.ndarray:
    a = np.abs(np.atleast_2d(v))
    # t*v is inside C for t <= lo and outside for t > hi
    lo = np.maximum(q.eps1 / a.sum(axis=1), q.epsinf / a.max(axis=1))
    hi = q.eps1 / a.max(axis=1) + q.epsinf * a.shape[1] / a.sum(axis=1)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        inside = _hull_members(a * mid[:, None], q.eps1, q.epsinf)
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return lo


def _pnorm(v: np.ndarray, p: float) -> np.ndarray:
    a = np.abs(v)
    if math.isinf(p):
        return a.max(axis=-1)
    m = a.max(axis=-1, keepdims=True)
    m = np.where(m > 0, m, 1.0)
    return m[..., 0] * ((a / m) ** p).sum(axis=-1) ** (1.0 / p)


def _line_search(objective, base: np.ndarray, move: np.ndarray, width: float,
                 points: int = 33, zooms: int = 4) -> tuple[float, float]:
    """Zooming grid search for min_t objective(base + t*move) on [-width, width]."""
    center, best_t, best_f = 0.0, 0.0, math.inf
    for _ in range(zooms):
        ts = center + np.linspace(-width, width, points)
        vals = objective(base[None, :] + ts[:, None] * move[None, :])
        k = int(np.argmin(vals))
        if vals[k] < best_f:
            best_t, best_f = float(ts[k]), float(vals[k])
        center = best_t
        width *= 4.0 / (points - 1)
    return best_t, best_f


def oracle_min_norm(
    q: GeometryQuery,
    p: float,
    region: RegionKind,
    n_dirs: int = 10_000,
    refine_steps: int = 100,
    seed: int = 0,
) -> float:
    """Ray-casting estimate of the smallest lp-norm outside the region.

    Samples directions uniformly on the sphere, measures the exit scale of
    the region along each ray, and refines the best one with zooming
    grid line searches along coordinate axes and coordinate pairs.
    """
    if q.d > 6:
        raise GeometryError(f"oracle restricted to d <= 6, got d={q.d}")
    if n_dirs < 10_000:
        raise GeometryError(f"oracle needs n_dirs >= 10000, got {n_dirs}")
    _require_nontrivial(q)
    p = _check_p(p)
    region = RegionKind(region)
    exit_scale = _exit_scale_union if region is RegionKind.UNION else _exit_scale_hull

    def objective(v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(v)
        return exit_scale(v, q) * _pnorm(v, p)

    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_dirs, q.d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    vals = objective(dirs)
    k = int(np.argmin(vals))
    best, fbest = dirs[k].copy(), float(vals[k])

    # line-search directions: axes, then +-pairs of axes
    moves = [np.eye(q.d)[i] for i in range(q.d)]
    for i in range(q.d):
        for j in range(i + 1, q.d):
            for s in (1.0, -1.0):
                m = np.zeros(q.d)
                m[i], m[j] = 1.0, s
                moves.append(m / math.sqrt(2.0))

    width = 0.5
    for step in range(refine_steps):
        m = moves[step % len(moves)]
        t, ft = _line_search(objective, best, m, width)
        if ft < fbest:
            best = best + t * m
            best /= np.linalg.norm(best)
            fbest = ft
        if (step + 1) % len(moves) == 0:
            width *= 0.5
    return fbest
