"""lp-bounded attacks on the [0,1] image box.

Perturbations are handled row-wise: ``delta`` of shape (n, d) holds one
perturbation per example.  Every projection accepts a 1-D vector too.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .netcore import Network, forward, input_gradient, per_example_loss


class Norm(enum.Enum):
    LINF = "linf"
    L2 = "l2"
    L1 = "l1"

    @property
    def p(self) -> float:
        return {"linf": math.inf, "l2": 2.0, "l1": 1.0}[self.value]

    @classmethod
    def parse(cls, value) -> "Norm":
        if isinstance(value, Norm):
            return value
        aliases = {"inf": "linf", "linf": "linf", "l_inf": "linf", "2": "l2", "l2": "l2",
                   "1": "l1", "l1": "l1"}
        key = str(value).strip().lower()
        if key not in aliases:
            try:
                key = {math.inf: "linf", 2.0: "l2", 1.0: "l1"}[float(value)]
            except (KeyError, ValueError):
                raise ValueError(f"unknown norm {value!r}") from None
        return cls(aliases.get(key, key))


# fixed order used for every tie-break
NORM_ORDER = (Norm.LINF, Norm.L2, Norm.L1)

STEP_RULES = {"LinfQuarter": 0.25, "L2Third": 1.0 / 3.0, "L1Sparse": 0.5}
DEFAULT_RULE = {Norm.LINF: "LinfQuarter", Norm.L2: "L2Third", Norm.L1: "L1Sparse"}


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ThreatSpec:
    norm: Norm
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm.parse(self.norm))
        if not self.eps > 0:
            raise AttackConfigError(f"eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class ThreatUnion:
    specs: tuple[ThreatSpec, ...]

    def __post_init__(self):
        specs = tuple(self.specs)
        if not specs:
            raise AttackConfigError("threat union must be nonempty")
        norms = [s.norm for s in specs]
        if len(set(norms)) != len(norms):
            raise AttackConfigError("at most one threat per norm")
        # canonical order
        object.__setattr__(self, "specs", tuple(sorted(specs, key=lambda s: NORM_ORDER.index(s.norm))))

    @classmethod
    def of(cls, **radii) -> "ThreatUnion":
        """``ThreatUnion.of(linf=8/255, l1=12)``."""
        return cls(tuple(ThreatSpec(Norm.parse(k), v) for k, v in radii.items() if v is not None))

    @property
    def norms(self) -> tuple[Norm, ...]:
        return tuple(s.norm for s in self.specs)

    def eps(self, norm) -> float:
        norm = Norm.parse(norm)
        for s in self.specs:
            if s.norm is norm:
                return s.eps
        raise KeyError(norm)

    def __contains__(self, norm) -> bool:
        return Norm.parse(norm) in self.norms

    def get(self, norm) -> ThreatSpec:
        return ThreatSpec(Norm.parse(norm), self.eps(norm))


@dataclass(frozen=True)
class AttackConfig:
    n_steps: int = 10
    # float, a rule name from STEP_RULES, or None for the norm's default rule
    step_size: float | str | None = None
    n_restarts: int = 1
    k_fraction: float = 0.05
    k_fraction_final: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1 or self.n_restarts < 1:
            raise AttackConfigError("n_steps and n_restarts must be >= 1")
        if not (0 < self.k_fraction <= 1 and 0 < self.k_fraction_final <= 1):
            raise AttackConfigError("k_fraction must lie in (0, 1]")
        if isinstance(self.step_size, str) and self.step_size not in STEP_RULES:
            raise AttackConfigError(f"unknown step rule {self.step_size!r}")
        if isinstance(self.step_size, (int, float)) and not self.step_size > 0:
            raise AttackConfigError("step_size must be positive")
        if self.seed < 0:
            raise AttackConfigError("seed must be non-negative")

    def step_for(self, threat: ThreatSpec) -> float:
        rule = self.step_size
        if rule is None:
            rule = DEFAULT_RULE[threat.norm]
        if isinstance(rule, str):
            return STEP_RULES[rule] * threat.eps
        return float(rule)

    def k_at(self, step: int) -> float:
        if self.n_steps == 1:
            return self.k_fraction
        t = step / (self.n_steps - 1)
        return self.k_fraction + (self.k_fraction_final - self.k_fraction) * t


@dataclass
class AttackResult:
    adversarial_inputs: np.ndarray
    success: np.ndarray
    final_loss: np.ndarray
    # MSD only: per step, candidate losses (3, n) and chosen norm index (n,)
    trace: list = field(default_factory=list)
    choice_counts: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# projections


def _rows(delta):
    a = np.asarray(delta, dtype=np.float64)
    return (a[None, :], True) if a.ndim == 1 else (a, False)


def project_linf(delta, eps):
    return np.clip(np.asarray(delta, dtype=np.float64), -eps, eps)


def project_l2(delta, eps):
    a, flat = _rows(delta)
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    scale = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.0), 1.0)
    out = a * scale
    # rounding can leave the rescaled norm an ulp above eps; shrink until it
    # is not, so a second projection is the identity
    over = np.linalg.norm(out, axis=1) > eps
    while over.any():
        out[over] *= 1.0 - 2.0**-52
        over = np.linalg.norm(out, axis=1) > eps
    return out[0] if flat else out


def project_l1(delta, eps):
    """Euclidean projection onto the l1 ball (sort-based threshold)."""
    a, flat = _rows(delta)
    out = np.empty_like(a)
    _l1_rows(a, float(eps), out)
    return out[0] if flat else out


def project_l1_box(x_clean, delta, eps):
    """Projection onto {d : ||d||_1 <= eps, 0 <= x_clean + d <= 1}.

    The solution is clip(soft(delta, tau)) with the box bounds.  Its l1 mass
    is piecewise linear and non-increasing in tau, so tau is found exactly by
    locating eps between two adjacent kinks and interpolating.
    """
    a, flat = _rows(delta)
    x, _ = _rows(x_clean)
    x = np.ascontiguousarray(np.broadcast_to(x, a.shape), dtype=np.float64)
    out = np.empty_like(a)
    _l1_box_rows(a, x, float(eps), out)
    return out[0] if flat else out


@numba.njit(cache=True)
def _insertion_sort(v):
    # rows are short; numba's generic sort is several times slower here
    for i in range(1, v.shape[0]):
        key = v[i]
        j = i - 1
        while j >= 0 and v[j] > key:
            v[j + 1] = v[j]
            j -= 1
        v[j + 1] = key


@numba.njit(cache=True)
def _l1_rows(a, eps, out):
    n, d = a.shape
    u = np.empty(d)
    for r in range(n):
        total = 0.0
        for i in range(d):
            u[i] = abs(a[r, i])
            total += u[i]
        if total <= eps:
            out[r] = a[r]
            continue
        _insertion_sort(u)
        css = 0.0
        tau = 0.0
        # descending scan; the last index satisfying the condition fixes tau
        for j in range(d):
            v = u[d - 1 - j]
            css += v
            t = (css - eps) / (j + 1)
            if v > t:
                tau = t
        for i in range(d):
            m = abs(a[r, i]) - tau
            out[r, i] = np.sign(a[r, i]) * m if m > 0 else 0.0


@numba.njit(cache=True)
def _l1_box_mass(mag, cap, tau):
    s = 0.0
    for i in range(mag.shape[0]):
        m = mag[i] - tau
        if m > 0:
            s += m if m < cap[i] else cap[i]
    return s


@numba.njit(cache=True)
def _l1_box_rows(a, x, eps, out):
    n, d = a.shape
    mag = np.empty(d)
    cap = np.empty(d)
    kinks = np.empty(2 * d + 1)
    for r in range(n):
        for i in range(d):
            mag[i] = abs(a[r, i])
            # room in the direction of the coordinate's sign
            c = 1.0 - x[r, i] if a[r, i] >= 0 else x[r, i]
            cap[i] = c if c > 0 else 0.0
        tau = 0.0
        if _l1_box_mass(mag, cap, 0.0) > eps:
            # each coordinate contributes min(max(mag - tau, 0), cap):
            # kinks at mag - cap and mag
            kinks[0] = 0.0
            for i in range(d):
                k = mag[i] - cap[i]
                kinks[1 + i] = k if k > 0 else 0.0
                kinks[1 + d + i] = mag[i]
            _insertion_sort(kinks)
            lo, hi = 0, 2 * d
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if _l1_box_mass(mag, cap, kinks[mid]) > eps:
                    lo = mid
                else:
                    hi = mid
            m_lo = _l1_box_mass(mag, cap, kinks[lo])
            m_hi = _l1_box_mass(mag, cap, kinks[hi])
            tau = kinks[lo]
            if m_lo > m_hi:
                tau += (m_lo - eps) / (m_lo - m_hi) * (kinks[hi] - kinks[lo])
        for i in range(d):
            m = mag[i] - tau
            v = m if m > 0 else 0.0
            if a[r, i] < 0:
                v = -v
            lo_b = -x[r, i]
            hi_b = 1.0 - x[r, i]
            out[r, i] = lo_b if v < lo_b else (hi_b if v > hi_b else v)


def project(norm: Norm, x_clean, delta, eps):
    """Projection onto the ``norm`` ball followed by the image box.

    Exact for l-inf and l1; for l2 the ball projection is followed by a box
    clip, which keeps the point feasible.
    """
    if norm is Norm.L1:
        return project_l1_box(x_clean, delta, eps)
    if norm is Norm.LINF:
        d = project_linf(delta, eps)
    else:
        d = project_l2(delta, eps)
    return np.clip(d, -x_clean, 1.0 - x_clean)


# ---------------------------------------------------------------------------
# steps


def ascent_step(norm, grad, k_fraction: float = 0.05):
    """Steepest-ascent direction with unit budget in the given norm."""
    norm = Norm.parse(norm)
    g, flat = _rows(grad)
    if norm is Norm.LINF:
        out = np.sign(g)
    elif norm is Norm.L2:
        n = np.linalg.norm(g, axis=1, keepdims=True)
        out = g / np.where(n > 0, n, 1.0)
    else:
        d = g.shape[1]
        k = max(1, min(d, math.ceil(k_fraction * d - 1e-12)))
        out = np.zeros_like(g)
        if k == 1:
            rows = np.arange(g.shape[0])
            idx = np.argmax(np.abs(g), axis=1)
        else:
            rows = np.arange(g.shape[0])[:, None]
            idx = np.argsort(-np.abs(g), axis=1, kind="stable")[:, :k]
        out[rows, idx] = np.sign(g[rows, idx]) / k if k > 1 else np.sign(g[rows, idx])
    return out[0] if flat else out


def _l1_update(x, delta, grad, step, k_fraction, eps):
    """Box-masked sparse l1 ascent step followed by the l1-and-box projection.

    Same result as ``project_l1_box(x, delta + step * ascent_step(L1,
    _box_free(grad, x + delta), k), eps)``, fused into one pass per row.
    """
    d = x.shape[1]
    k = max(1, min(d, math.ceil(k_fraction * d - 1e-12)))
    moved = np.empty_like(delta)
    _l1_step_rows(x, delta, grad, float(step), k, moved)
    out = np.empty_like(delta)
    _l1_box_rows(moved, x, float(eps), out)
    return out


@numba.njit(cache=True)
def _l1_step_rows(x, delta, grad, step, k, out):
    n, d = x.shape
    mag = np.empty(d)
    for r in range(n):
        for i in range(d):
            g = grad[r, i]
            xi = x[r, i] + delta[r, i]
            # drop coordinates pushing against a saturated pixel
            if (g > 0 and xi >= 1.0) or (g < 0 and xi <= 0.0):
                g = 0.0
            mag[i] = abs(g)
            out[r, i] = delta[r, i]
        # k passes of first-occurrence argmax: stable top-k for small k
        for _ in range(k):
            best = -1
            for i in range(d):
                if mag[i] > 0 and (best < 0 or mag[i] > mag[best]):
                    best = i
            if best < 0:
                break
            mag[best] = -1.0
            if grad[r, best] > 0:
                out[r, best] += step / k
            else:
                out[r, best] -= step / k


def _random_start(norm: Norm, eps: float, x: np.ndarray, seed: int, indices, restart: int):
    n, d = x.shape
    out = np.empty((n, d))
    for row, idx in enumerate(indices):
        rng = np.random.default_rng((int(seed) ^ int(idx), restart))
        if norm is Norm.LINF:
            v = rng.uniform(-eps, eps, size=d)
        elif norm is Norm.L2:
            g = rng.standard_normal(d)
            v = g / np.linalg.norm(g) * eps * rng.uniform() ** (1.0 / d)
        else:
            v = rng.dirichlet(np.ones(d)) * rng.choice([-1.0, 1.0], size=d) * eps * rng.uniform()
        out[row] = v
    return np.clip(out, -x, 1.0 - x)


def _better(loss, mis, best_loss, best_mis):
    # a misclassified iterate beats a correct one; otherwise higher loss wins
    return (mis & ~best_mis) | ((mis == best_mis) & (loss > best_loss))


def _box_free(g: np.ndarray, xadv: np.ndarray) -> np.ndarray:
    """Zero gradient entries that would push a saturated pixel out of the box."""
    return g * np.where(g > 0, xadv < 1.0, xadv > 0.0)


def _check_batch(net: Network, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[1] != net.input_dim or y.shape != (x.shape[0],):
        raise ValueError(f"batch shapes {x.shape}/{y.shape} do not fit network input {net.input_dim}")
    return x, y


def pgd_attack(net: Network, x, y, threat: ThreatSpec, cfg: AttackConfig, indices=None) -> AttackResult:
    """Best-iterate PGD in ``threat`` intersected with the [0,1] box.

    Restart 0 starts at zero, later restarts uniformly in the ball.  Random
    starts are seeded per example by ``cfg.seed ^ index`` so results do not
    depend on how examples are batched.
    """
    x, y = _check_batch(net, x, y)
    n = x.shape[0]
    indices = np.arange(n) if indices is None else np.asarray(indices)
    norm, eps = threat.norm, threat.eps
    step = cfg.step_for(threat)

    best_delta = np.zeros_like(x)
    best_loss = np.full(n, -np.inf)
    best_mis = np.zeros(n, dtype=bool)

    def record(delta, loss, logits):
        nonlocal best_delta, best_loss, best_mis
        mis = logits.argmax(axis=1) != y
        upd = _better(loss, mis, best_loss, best_mis)
        best_delta = np.where(upd[:, None], delta, best_delta)
        best_loss = np.where(upd, loss, best_loss)
        best_mis = np.where(upd, mis, best_mis)

    for r in range(cfg.n_restarts):
        if r == 0:
            delta = np.zeros_like(x)
        else:
            delta = _random_start(norm, eps, x, cfg.seed, indices, r)
        for t in range(cfg.n_steps):
            xadv = x + delta
            loss, logits, g = input_gradient(net, xadv, y)
            record(delta, loss, logits)
            if norm is Norm.L1:
                delta = _l1_update(x, delta, g, step, cfg.k_at(t), eps)
            else:
                delta = project(norm, x, delta + step * ascent_step(norm, g), eps)
        logits = forward(net, x + delta)
        record(delta, per_example_loss(logits, y), logits)

    return AttackResult(adversarial_inputs=x + best_delta, success=best_mis.copy(), final_loss=best_loss)


def msd_attack(net: Network, x, y, union: ThreatUnion, cfg: AttackConfig, indices=None,
               keep_trace: bool = False) -> AttackResult:
    """Multi steepest descent: one gradient, three candidate steps, keep the
    one with the highest loss.  Ties go to the first norm in (linf, l2, l1).
    """
    missing = [nm.value for nm in NORM_ORDER if nm not in union]
    if missing:
        raise AttackConfigError(f"MSD needs all three norms, missing {missing}")
    x, y = _check_batch(net, x, y)
    n = x.shape[0]
    indices = np.arange(n) if indices is None else np.asarray(indices)
    threats = [union.get(nm) for nm in NORM_ORDER]
    steps = [cfg.step_for(t) for t in threats]

    best_delta = np.zeros_like(x)
    best_loss = np.full(n, -np.inf)
    best_mis = np.zeros(n, dtype=bool)
    counts = {nm: 0 for nm in NORM_ORDER}
    trace = []

    def record(delta, loss, mis):
        nonlocal best_delta, best_loss, best_mis
        upd = _better(loss, mis, best_loss, best_mis)
        best_delta = np.where(upd[:, None], delta, best_delta)
        best_loss = np.where(upd, loss, best_loss)
        best_mis = np.where(upd, mis, best_mis)

    for r in range(cfg.n_restarts):
        if r == 0:
            delta = np.zeros_like(x)
        else:
            start_norm = NORM_ORDER[np.random.default_rng((cfg.seed, r)).integers(3)]
            delta = _random_start(start_norm, union.eps(start_norm), x, cfg.seed, indices, r)
        loss, logits, g = input_gradient(net, x + delta, y)
        record(delta, loss, logits.argmax(axis=1) != y)
        for t in range(cfg.n_steps):
            cands, cand_loss, cand_mis = [], [], []
            for threat, eta in zip(threats, steps):
                gg = _box_free(g, x + delta) if threat.norm is Norm.L1 else g
                c = project(threat.norm, x, delta + eta * ascent_step(threat.norm, gg, cfg.k_at(t)), threat.eps)
                lg = forward(net, x + c)
                cands.append(c)
                cand_loss.append(per_example_loss(lg, y))
                cand_mis.append(lg.argmax(axis=1) != y)
            cand_loss = np.stack(cand_loss)
            choice = np.argmax(cand_loss, axis=0)
            rows = np.arange(n)
            delta = np.stack(cands)[choice, rows]
            loss = cand_loss[choice, rows]
            record(delta, loss, np.stack(cand_mis)[choice, rows])
            for i, nm in enumerate(NORM_ORDER):
                counts[nm] += int((choice == i).sum())
            if keep_trace:
                trace.append((cand_loss.copy(), choice.copy()))
            if t + 1 < cfg.n_steps:
                _, _, g = input_gradient(net, x + delta, y)

    return AttackResult(adversarial_inputs=x + best_delta, success=best_mis.copy(), final_loss=best_loss,
                        trace=trace, choice_counts=counts)


def robust_radius(net: Network, x, y, norm, eps_hi: float, tol: float, cfg: AttackConfig,
                  index: int = 0, trace: list | None = None) -> float:
    """Smallest budget (to ``tol``) at which the attack succeeds on one example.

    Returns ``eps_hi`` when the attack never succeeds and 0 for a
    misclassified input.  ``trace`` collects (eps, success) pairs.
    """
    if not eps_hi > tol > 0:
        raise AttackConfigError("need eps_hi > tol > 0")
    norm = Norm.parse(norm)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    y = np.asarray([int(y)])
    if forward(net, x).argmax(axis=1)[0] != y[0]:
        return 0.0
    cache: dict[float, bool] = {}

    def broken(eps: float) -> bool:
        if eps not in cache:
            res = pgd_attack(net, x, y, ThreatSpec(norm, eps), cfg, indices=[index])
            cache[eps] = bool(res.success[0])
            if trace is not None:
                trace.append((eps, cache[eps]))
        return cache[eps]

    if not broken(eps_hi):
        return float(eps_hi)
    lo, hi = 0.0, float(eps_hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if broken(mid):
            hi = mid
        else:
            lo = mid
    return hi
