"""Acceptance suite: one PASS/FAIL line per criterion, then the assertion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are printed even without ``-s``.
"""

import math
import statistics
import time

import numpy as np
import pytest

from eatlab import cli
from eatlab.attacks import (
    NORM_ORDER,
    AttackConfig,
    Norm,
    ThreatUnion,
    ascent_step,
    msd_attack,
    pgd_attack,
    project,
    project_l1,
    project_l1_box,
    robust_radius,
)
from eatlab.data_io import DatasetSpec, Rings, generate
from eatlab.evaluation import evaluate, robustness_curve
from eatlab.geometry import (
    GeometryQuery,
    RegionKind,
    l2_union_upper_bound,
    min_lp_outside_hull,
    min_lp_outside_union,
    nontrivial_range,
    oracle_min_norm,
)
from eatlab.netcore import Dense, Network, forward, grad_check, init_network, input_gradient, per_example_loss
from eatlab.training import (
    Piecewise,
    RunningRobustError,
    Scheme,
    TrainConfig,
    finetune,
    finetune_config,
    generate_batch_perturbation,
    sample_norm,
    train,
)
from oracles import grid_project, l1_box_feasible, l1_feasible


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"
    return emit


# ---------------------------------------------------------------------------
# 1-6: formulas and exact properties


def test_criterion_1_geometry_constants(report):
    cifar = GeometryQuery(12.0, 8 / 255, 3072)
    checks = [
        ("bound(12, 8/255, 3072)", l2_union_upper_bound(cifar), 0.2188, 5e-4),
        ("hull(0.3, 10)", min_lp_outside_hull(GeometryQuery(10, 0.3, 784), 2).radius, 1.738, 0.01),
        ("hull(0.33, 14)", min_lp_outside_hull(GeometryQuery(14, 0.33, 784), 2).radius, 2.156, 0.01),
        ("hull(4/255, 255)", min_lp_outside_hull(GeometryQuery(255, 4 / 255, 3 * 224 * 224), 2).radius,
         2.000, 0.001),
        ("hull(8/255, 12)", min_lp_outside_hull(cifar, 2).radius, 0.6178, 0.01 * 0.6178),
        ("range upper(8/255, 3072)", nontrivial_range(8 / 255, 3072)[1], 96.38, 0.01),
    ]
    bad = [f"{name}={v:.5f} (want {want}±{tol:.4g})" for name, v, want, tol in checks if abs(v - want) > tol]
    shown = ", ".join(f"{name}={v:.4f}" for name, v, *_ in checks)
    report(1, not bad, "; ".join(bad) if bad else shown)


def test_criterion_2_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    ps = [1.0, 1.5, 2.0, 4.0, math.inf]
    worst = 0.0
    for i in range(200):
        d = int(rng.integers(2, 5))
        epsinf = rng.uniform(0.1, 1.0)
        q = GeometryQuery(epsinf * rng.uniform(1.02, d - 0.02), epsinf, d)
        p = ps[i % len(ps)]
        for kind, closed in ((RegionKind.UNION, min_lp_outside_union(q, p)),
                             (RegionKind.CONVEX_HULL, min_lp_outside_hull(q, p).radius)):
            est = oracle_min_norm(q, p, kind, seed=i)
            worst = max(worst, abs(closed - est) / closed)
    report(2, worst <= 1e-3, f"max relative gap {worst:.2e} over 200 queries x 2 regions (limit 1e-3)")


def test_criterion_3_projection_optimality(report):
    rng = np.random.default_rng(33)
    gap = 0.0
    idem = 0.0
    for _ in range(500):
        d = int(rng.integers(2, 5))
        eps = rng.uniform(0.1, 2.0)
        delta = rng.normal(0, 1, d)
        z = project_l1(delta, eps)
        _, ref = grid_project(delta, l1_feasible(eps), eps)
        gap = max(gap, np.sum((z - delta) ** 2) - ref, np.abs(z).sum() - eps)
        idem = max(idem, np.max(np.abs(project_l1(z, eps) - z)))

        x = rng.choice([0.0, 0.02, 0.3, 0.5, 0.98, 1.0], d)
        delta = rng.normal(0, 0.6, d)
        eps = rng.uniform(0.1, 1.5)
        z = project_l1_box(x, delta, eps)
        _, ref = grid_project(delta, l1_box_feasible(x, eps), eps)
        gap = max(gap, np.sum((z - delta) ** 2) - ref)
        idem = max(idem, np.max(np.abs(project_l1_box(x, z, eps) - z)))
    ok = gap <= 1e-3 and idem <= 1e-10
    report(3, ok, f"worst objective gap {gap:.2e} (limit 1e-3), idempotence {idem:.1e} (limit 1e-10)")


def test_criterion_4_gradient_correctness(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for s in range(20):
        depth = int(rng.integers(1, 4))
        dims = [int(rng.integers(2, 8))] + [int(rng.integers(2, 10)) for _ in range(depth)] + [int(rng.integers(2, 5))]
        net = init_network(dims, "softplus", seed=s)
        x = rng.uniform(0, 1, (6, dims[0]))
        y = rng.integers(0, dims[-1], 6)
        worst = max(worst, grad_check(net, x, y, seed=s, include_inputs=True))
    report(4, worst < 1e-4, f"max relative error {worst:.2e} over 20 softplus nets (limit 1e-4)")


def test_criterion_5_selection_invariants(report):
    rng = np.random.default_rng(5)
    union = ThreatUnion.of(linf=0.05, l2=0.3, l1=0.8)
    net = init_network([6, 12, 3], "softplus", seed=5)
    x = rng.uniform(0, 1, (40, 6))
    y = rng.integers(0, 3, 40)
    cfg = AttackConfig(n_steps=6, k_fraction=0.34, k_fraction_final=0.17)

    # MAX: kept copy has the largest loss among the three recomputed copies
    max_ok = True
    for b in range(3):
        idx = np.arange(40)
        pb = generate_batch_perturbation(Scheme.parse("max"), net, x, y, union, cfg, np.random.default_rng(b),
                                         indices=idx)
        copies = [pgd_attack(net, x, y, union.get(nm), cfg, indices=idx).adversarial_inputs for nm in NORM_ORDER]
        losses = np.stack([per_example_loss(forward(net, c), y) for c in copies])
        choice = np.argmax(losses, axis=0)
        expect = np.stack(copies)[choice, np.arange(40)]
        max_ok &= bool(np.array_equal(pb.x, expect))

    # MSD: replay every step and compare candidate losses and choices
    res = msd_attack(net, x, y, union, cfg, keep_trace=True)
    delta = np.zeros_like(x)
    msd_ok = len(res.trace) == cfg.n_steps
    for t, (cand_loss, choice) in enumerate(res.trace):
        _, _, g = input_gradient(net, x + delta, y)
        cands, losses = [], []
        for nm in NORM_ORDER:
            spec = union.get(nm)
            gg = g * np.where(g > 0, x + delta < 1.0, x + delta > 0.0) if nm is Norm.L1 else g
            c = project(nm, x, delta + cfg.step_for(spec) * ascent_step(nm, gg, cfg.k_at(t)), spec.eps)
            cands.append(c)
            losses.append(per_example_loss(forward(net, x + c), y))
        losses = np.stack(losses)
        msd_ok &= bool(np.allclose(losses, cand_loss, rtol=0, atol=1e-12))
        msd_ok &= bool(np.array_equal(choice, np.argmax(losses, axis=0)))
        delta = np.stack(cands)[choice, np.arange(40)]
    report(5, max_ok and msd_ok, f"MAX argmax copy kept: {max_ok}; MSD argmax step at every iteration: {msd_ok}")


def test_criterion_6_eat_sampling(report):
    r = RunningRobustError()
    r.update(Norm.L1, 0.8)
    r.update(Norm.LINF, 0.2)
    rng = np.random.default_rng(6)
    draws = [sample_norm(Scheme.parse("eat"), rng, r) for _ in range(100_000)]
    f1 = float(np.mean([d is Norm.L1 for d in draws]))
    finf = 1 - f1
    ok = abs(f1 - 0.8) <= 0.006 and abs(finf - 0.2) <= 0.006
    report(6, ok, f"l1 {f1:.4f} (0.8), linf {finf:.4f} (0.2), limit +-0.006")


# ---------------------------------------------------------------------------
# 7-9: the Rings workload

SEEDS = (0, 1, 2)
EPS_LINF, EPS_L1 = 0.02, 0.1
D = 20


@pytest.fixture(scope="module")
def workload():
    ds = generate(DatasetSpec(Rings(n_per_class=5000, d=D), seed=0))
    hull = min_lp_outside_hull(GeometryQuery(EPS_L1, EPS_LINF, D), 2).radius
    union = ThreatUnion.of(linf=EPS_LINF, l2=round(0.9 * hull, 4), l1=EPS_L1)
    eval_cfg = AttackConfig(n_steps=20, n_restarts=2)
    runs = {}
    for seed in SEEDS:
        for scheme in ("linf", "eat", "max"):
            net = init_network([D, 64, 64, 2], "relu", seed=seed)
            cfg = TrainConfig(Scheme.parse(scheme), union, epochs=30, batch_size=128,
                              lr_schedule=Piecewise(0.05, 24, 10), attack=AttackConfig(n_steps=10), seed=seed)
            res = train(net, ds.x_train, ds.y_train, cfg)
            rep = evaluate(res.net, ds.x_test, ds.y_test, union, eval_cfg)
            epoch_time = statistics.median(row["time"] for row in res.history)
            runs[seed, scheme] = (res.net, rep, epoch_time)
    return ds, union, eval_cfg, hull, runs


@pytest.mark.slow
def test_criterion_7_multinorm_ordering(report, workload):
    ds, union, _, hull, runs = workload
    med = {s: statistics.median(runs[seed, s][1].union for seed in SEEDS) for s in ("linf", "eat", "max")}
    reports = [rep for _, rep, _ in runs.values()]
    a = med["eat"] >= med["linf"] + 0.10
    b = all(rep.union <= min(rep.acc_per_norm.values()) for rep in reports)
    c = abs(med["eat"] - med["max"]) <= 0.05
    detail = (f"median union linf {med['linf']:.3f}, eat {med['eat']:.3f}, max {med['max']:.3f} "
              f"(eps2 {union.eps(Norm.L2)} = 0.9 x hull {hull:.4f}); (a) {a} (b) {b} (c) {c}")
    report(7, a and b and c, detail)


@pytest.mark.slow
def test_criterion_8_cost_ordering(report, workload):
    *_, runs = workload
    eat = statistics.median(runs[s, "eat"][2] / runs[s, "linf"][2] for s in SEEDS)
    mx = statistics.median(runs[s, "max"][2] / runs[s, "linf"][2] for s in SEEDS)
    report(8, eat <= 1.3 and mx >= 2.5,
           f"median per-epoch time ratio vs single l-inf: eat {eat:.2f} (<= 1.3), max {mx:.2f} (>= 2.5)")


@pytest.mark.slow
def test_criterion_9_finetuning_transfer(report, workload):
    ds, union, eval_cfg, _, runs = workload
    d_union, d_linf, d_l1 = [], [], []
    for seed in SEEDS:
        base_net, base, _ = runs[seed, "linf"]
        out = {}
        for scheme in ("eat", "l1"):
            cfg = finetune_config(Scheme.parse(scheme), union, epochs=3, batch_size=32,
                                  attack=AttackConfig(n_steps=10), seed=seed)
            tuned = finetune(base_net.copy(), ds.x_train, ds.y_train, cfg)
            out[scheme] = evaluate(tuned.net, ds.x_test, ds.y_test, union, eval_cfg)
        d_union.append(out["eat"].union - base.union)
        d_linf.append(base.acc_per_norm[Norm.LINF] - out["eat"].acc_per_norm[Norm.LINF])
        d_l1.append(out["l1"].acc_per_norm[Norm.L1] - base.acc_per_norm[Norm.L1])
    mu, ml, m1 = (statistics.median(v) for v in (d_union, d_linf, d_l1))
    ok = mu >= 0.15 and ml <= 0.15 and m1 >= 0.20
    report(9, ok, f"median over seeds: E-AT union gain {mu:+.3f} (>= +0.15), linf drop {ml:+.3f} (<= 0.15), "
                  f"single-l1 l1 gain {m1:+.3f} (>= +0.20)")


# ---------------------------------------------------------------------------
# 10-11


def test_criterion_10_curve_and_radius(report):
    rng = np.random.default_rng(10)
    net = init_network([6, 16, 2], "relu", seed=10)
    x = rng.uniform(0, 1, (300, 6))
    y = (forward(net, x).argmax(axis=1) + (rng.uniform(size=300) < 0.1)) % 2
    curve_ok = True
    for norm in Norm:
        pts = robustness_curve(net, x, y, norm, np.linspace(0, 0.3, 13), AttackConfig(n_steps=10))
        accs = [p.robust_accuracy for p in pts]
        curve_ok &= all(b <= a for a, b in zip(accs, accs[1:]))

    w = np.array([0.8, -0.5, 0.3, 0.1])
    lin = Network([Dense(np.stack([w, np.zeros(4)], axis=1), np.array([-0.02, 0.0]), "identity")])
    xc = np.full(4, 0.5)
    margin = float(w @ xc - 0.02)
    tol = 1e-4
    worst = 0.0
    for norm, q in ((Norm.LINF, 1), (Norm.L2, 2), (Norm.L1, np.inf)):
        r = robust_radius(lin, xc, 0, norm, 0.5, tol, AttackConfig(n_steps=20))
        worst = max(worst, abs(r - margin / np.linalg.norm(w, ord=q)))
    ok = curve_ok and worst <= 2 * tol
    report(10, ok, f"curves non-increasing: {curve_ok}; worst radius error {worst:.1e} (limit {2 * tol:.0e})")


def test_criterion_11_reproducibility(report, tmp_path):
    args = ["train", "--data.n_per_class", "400", "--train.scheme", "eat", "--train.epochs", "3",
            "--attack.n_steps", "5", "--eval.n_steps", "10", "--train.seed", "11"]
    csvs = []
    for i, threads in enumerate((1, 4, 1)):
        out = tmp_path / f"run{i}"
        assert cli.main(args + ["--threads", str(threads), "--output-dir", str(out)]) == 0
        csvs.append((out / "report.csv").read_bytes())
    same = all(c == csvs[0] for c in csvs)
    report(11, same, f"report.csv identical across two runs and threads 1/4: {same}")
