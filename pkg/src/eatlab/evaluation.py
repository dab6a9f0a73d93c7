"""Robust-accuracy reports, robustness curves, radii sweeps and telemetry."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import NORM_ORDER, AttackConfig, Norm, ThreatSpec, ThreatUnion, pgd_attack
from .geometry import DomainError, GeometryQuery, min_lp_outside_hull
from .netcore import Network, predict

CHUNK = 256

REPORT_HEADER = ["model", "clean", "acc_linf", "acc_l2", "acc_l1", "average", "union", "n_points", "seed"]
CURVE_HEADER = ["p", "eps", "robust_acc"]
TELEMETRY_HEADER = ["epoch", "frac_linf", "frac_l2", "frac_l1"]


class ReportError(AssertionError):
    pass


@dataclass
class RobustnessReport:
    clean: float
    acc_per_norm: dict
    average: float
    union: float
    n_points: int
    matrix: np.ndarray
    norms: tuple
    correct: np.ndarray

    @classmethod
    def from_matrix(cls, correct, matrix, norms) -> "RobustnessReport":
        """Aggregate a per-point robustness matrix (rows: points, cols: norms)."""
        correct = np.asarray(correct, dtype=bool)
        matrix = np.asarray(matrix, dtype=bool).reshape(correct.shape[0], len(norms))
        norms = tuple(Norm.parse(n) for n in norms)
        n = correct.shape[0]
        if n == 0:
            raise ReportError("empty report")
        acc = {nm: float(matrix[:, j].mean()) for j, nm in enumerate(norms)}
        rep = cls(
            clean=float(correct.mean()),
            acc_per_norm=acc,
            average=float(np.mean(list(acc.values()))),
            union=float(matrix.all(axis=1).mean()),
            n_points=n,
            matrix=matrix,
            norms=norms,
            correct=correct,
        )
        rep.check()
        return rep

    def check(self):
        if np.any(self.matrix & ~self.correct[:, None]):
            raise ReportError("a misclassified point is marked robust")
        accs = list(self.acc_per_norm.values())
        tol = 1e-12
        if not (self.union <= min(accs) + tol and min(accs) <= self.average + tol
                and self.average <= max(accs) + tol and max(accs) <= self.clean + tol):
            raise ReportError(f"ordering union <= min <= average <= max <= clean violated: {self}")

    def row(self, model: str, seed: int) -> list[str]:
        def acc(nm):
            return f"{self.acc_per_norm[nm]:.4f}" if nm in self.acc_per_norm else ""
        return [model, f"{self.clean:.4f}", acc(Norm.LINF), acc(Norm.L2), acc(Norm.L1),
                f"{self.average:.4f}", f"{self.union:.4f}", str(self.n_points), str(seed)]

    def summary_lines(self) -> list[str]:
        lines = [f"clean  {self.clean:.4f}"]
        lines += [f"{nm.value:<6} {a:.4f}" for nm, a in self.acc_per_norm.items()]
        lines.append(f"union  {self.union:.4f}")
        return lines


def _chunks(n: int):
    return [np.arange(s, min(n, s + CHUNK)) for s in range(0, n, CHUNK)]


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def evaluate(net: Network, x, y, union: ThreatUnion, attack_cfg: AttackConfig, threads: int = 1) -> RobustnessReport:
    """Clean, per-norm, average and union robust accuracy.

    Each norm is attacked independently on the correctly classified points;
    a point is union-robust when no attack breaks it.  Work is split into
    fixed chunks, so results do not depend on ``threads``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ReportError("empty dataset")
    correct = predict(net, x) == y
    norms = union.norms
    matrix = np.zeros((x.shape[0], len(norms)), dtype=bool)
    tasks = [(j, c) for j in range(len(norms)) for c in _chunks(x.shape[0])]

    def run(task):
        j, rows = task
        rows = rows[correct[rows]]
        if rows.size == 0:
            return j, rows, np.zeros(0, dtype=bool)
        res = pgd_attack(net, x[rows], y[rows], union.specs[j], attack_cfg, indices=rows)
        return j, rows, ~res.success

    for j, rows, robust in _map(run, tasks, threads):
        matrix[rows, j] = robust
    return RobustnessReport.from_matrix(correct, matrix, norms)


@dataclass(frozen=True)
class CurvePoint:
    eps: float
    robust_accuracy: float


def robustness_curve(net: Network, x, y, norm, eps_grid, attack_cfg: AttackConfig,
                     threads: int = 1) -> list[CurvePoint]:
    """Robust accuracy over an increasing grid of budgets.

    A point broken at some budget stays broken at every larger one, which
    makes the curve exactly non-increasing.
    """
    norm = Norm.parse(norm)
    eps_grid = [float(e) for e in eps_grid]
    if not eps_grid:
        raise ValueError("empty eps grid")
    if any(b <= a for a, b in zip(eps_grid, eps_grid[1:])) or eps_grid[0] < 0:
        raise ValueError("eps grid must be non-negative and strictly increasing")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    alive = predict(net, x) == y
    out = []
    for eps in eps_grid:
        if eps > 0:
            def run(rows, eps=eps):
                rows = rows[alive[rows]]
                if rows.size == 0:
                    return rows, np.zeros(0, dtype=bool)
                res = pgd_attack(net, x[rows], y[rows], ThreatSpec(norm, eps), attack_cfg, indices=rows)
                return rows, res.success

            for rows, success in _map(run, _chunks(x.shape[0]), threads):
                alive[rows[success]] = False
        out.append(CurvePoint(eps, float(alive.mean())))
    return out


def eps_grid(eps_max: float, n_points: int) -> list[float]:
    return [float(e) for e in np.linspace(0.0, eps_max, n_points)]


@dataclass
class SweepResult:
    epsinf: float
    eps1: float
    predicted_l2: float
    curve: list
    history: list = field(default_factory=list)


def radii_sweep(net: Network, x_train, y_train, x_test, y_test, pairs, finetune_cfg,
                curve_grid, attack_cfg: AttackConfig, threads: int = 1) -> list[SweepResult]:
    """E-AT fine-tune one copy per (epsinf, eps1) pair and measure its l2 curve.

    Each result carries the convex-hull l2 radius predicted for the pair.
    """
    from .training import Scheme, SchemeKind, finetune

    d = net.input_dim
    queries = []
    for epsinf, eps1 in pairs:
        q = GeometryQuery(float(eps1), float(epsinf), d)
        if not q.nontrivial:
            raise DomainError(f"pair (epsinf={epsinf}, eps1={eps1}) is not in the nontrivial range for d={d}")
        queries.append(q)
    results = []
    for q in queries:
        union = ThreatUnion.of(linf=q.epsinf, l1=q.eps1)
        cfg = replace(finetune_cfg, scheme=Scheme(SchemeKind.EAT), union=union)
        tuned = finetune(net, x_train, y_train, cfg)
        curve = robustness_curve(tuned.net, x_test, y_test, Norm.L2, curve_grid, attack_cfg, threads)
        results.append(SweepResult(q.epsinf, q.eps1, min_lp_outside_hull(q, 2).radius, curve, tuned.history))
    return results


def telemetry_summary(telemetry) -> tuple[list, list]:
    """Per-epoch selection fractions in (linf, l2, l1) order.

    Returns (rows, omitted) where rows are (epoch, f_linf, f_l2, f_l1) and
    omitted lists epochs whose counts were all zero.
    """
    rows, omitted = [], []
    for epoch, counts in enumerate(telemetry):
        c = [float(counts.get(nm, 0)) for nm in NORM_ORDER]
        if any(v < 0 for v in c):
            raise ValueError(f"negative count in epoch {epoch}")
        total = sum(c)
        if total == 0:
            omitted.append(epoch)
            continue
        rows.append((epoch, *(v / total for v in c)))
    return rows, omitted


# ---------------------------------------------------------------------------
# CSV


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def report_csv(entries) -> str:
    """``entries``: iterable of (model, report, seed)."""
    return _csv_text(REPORT_HEADER, [rep.row(model, seed) for model, rep, seed in entries])


def curve_csv(curves) -> str:
    """``curves``: iterable of (norm, [CurvePoint])."""
    rows = []
    for norm, points in curves:
        for pt in points:
            rows.append([Norm.parse(norm).value, f"{pt.eps:.4f}", f"{pt.robust_accuracy:.4f}"])
    return _csv_text(CURVE_HEADER, rows)


def telemetry_csv(rows) -> str:
    return _csv_text(TELEMETRY_HEADER, [[str(e)] + [f"{v:.4f}" for v in fr] for e, *fr in rows])


def write_text(path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
