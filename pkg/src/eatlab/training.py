"""Adversarial training for single and multiple lp threat models.

Schemes: single-norm AT, SAT (random norm per batch), AVG (mean loss over
the three attacks), MAX (per-example worst of the three), MSD and E-AT
(l1 or l-inf per batch, sampled proportionally to the running robust
training errors), plus the uniform E-AT ablation.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import (NORM_ORDER, AttackConfig, Norm, ThreatUnion, msd_attack,
                      pgd_attack)
from .netcore import Network, accuracy, backward, predict

EAT_NORMS = (Norm.L1, Norm.LINF)


class SchemeKind(enum.Enum):
    SINGLE = "single"
    SAT = "sat"
    AVG = "avg"
    MAX = "max"
    MSD = "msd"
    EAT = "eat"
    EAT_UNIFORM = "eat_uniform"


class SchemeError(ValueError):
    pass


@dataclass(frozen=True)
class Scheme:
    kind: SchemeKind
    norm: Norm | None = None

    def __post_init__(self):
        if (self.kind is SchemeKind.SINGLE) != (self.norm is not None):
            raise SchemeError("Single carries exactly one norm; other schemes none")

    @classmethod
    def parse(cls, text: str) -> "Scheme":
        """'linf', 'l2', 'l1' for single-norm AT, else a SchemeKind value."""
        text = str(text).strip().lower()
        if text.startswith("single:"):
            text = text.split(":", 1)[1]
        try:
            return cls(SchemeKind.SINGLE, Norm.parse(text))
        except ValueError:
            pass
        try:
            return cls(SchemeKind(text))
        except ValueError:
            raise SchemeError(f"unknown scheme {text!r}") from None

    def required_norms(self) -> tuple[Norm, ...]:
        if self.kind is SchemeKind.SINGLE:
            return (self.norm,)
        if self.kind in (SchemeKind.EAT, SchemeKind.EAT_UNIFORM):
            return EAT_NORMS
        return NORM_ORDER

    def __str__(self):
        return self.norm.value if self.kind is SchemeKind.SINGLE else self.kind.value


# ---------------------------------------------------------------------------
# learning-rate schedules


@dataclass(frozen=True)
class Piecewise:
    initial: float = 0.05
    drop_epoch: int = 70
    factor: float = 10.0


@dataclass(frozen=True)
class Cyclic:
    max_lr: float = 0.1


@dataclass(frozen=True)
class ThirdsDrop:
    initial: float = 0.01


def lr_at(schedule, epoch: int, step_in_epoch: int = 0, steps_per_epoch: int = 1, epochs: int = 1) -> float:
    if isinstance(schedule, Piecewise):
        return schedule.initial if epoch < schedule.drop_epoch else schedule.initial / schedule.factor
    total = epochs * steps_per_epoch
    step = epoch * steps_per_epoch + step_in_epoch
    if isinstance(schedule, Cyclic):
        t = step / total
        return schedule.max_lr * (2 * t if t <= 0.5 else 2 * (1 - t))
    if isinstance(schedule, ThirdsDrop):
        # integer comparisons keep the thirds boundaries exact
        if 3 * step < total:
            return schedule.initial
        if 3 * step < 2 * total:
            return schedule.initial / 10
        return schedule.initial / 100
    raise TypeError(f"unknown schedule {schedule!r}")


# ---------------------------------------------------------------------------
# config and running state


@dataclass(frozen=True)
class TrainConfig:
    scheme: Scheme
    union: ThreatUnion
    epochs: int = 10
    batch_size: int = 128
    lr_schedule: object = field(default_factory=Piecewise)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0
    checkpoint_selection: str = "final"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.checkpoint_selection not in ("best", "final"):
            raise ValueError("checkpoint_selection must be 'best' or 'final'")
        missing = [n.value for n in self.scheme.required_norms() if n not in self.union]
        if missing:
            raise SchemeError(f"scheme {self.scheme} needs norms {missing} in the threat union")


@dataclass
class RunningRobustError:
    sums: dict = field(default_factory=lambda: {n: 0.0 for n in EAT_NORMS})
    counts: dict = field(default_factory=lambda: {n: 0 for n in EAT_NORMS})

    def reset(self):
        for n in EAT_NORMS:
            self.sums[n] = 0.0
            self.counts[n] = 0

    def rerr(self, norm: Norm) -> float:
        # undefined until the norm has been sampled: behave as fully broken
        return self.sums[norm] / self.counts[norm] if self.counts[norm] > 0 else 1.0

    def update(self, norm: Norm, batch_error: float):
        if norm in self.sums:
            self.sums[norm] += batch_error
            self.counts[norm] += 1


def eat_sampling_probability(rerr) -> tuple[float, float]:
    """(P(l1), P(linf)) proportional to the running robust errors.

    Accepts a RunningRobustError or a pair (rerr_1, rerr_inf).
    """
    if isinstance(rerr, RunningRobustError):
        r1, rinf = rerr.rerr(Norm.L1), rerr.rerr(Norm.LINF)
    else:
        r1, rinf = (float(v) for v in rerr)
    if r1 + rinf <= 0:
        return 0.5, 0.5
    p1 = r1 / (r1 + rinf)
    return p1, 1.0 - p1


def sample_norm(scheme: Scheme, rng: np.random.Generator, rerr: RunningRobustError | None = None) -> Norm:
    """The norm attacked on the next batch for SAT, E-AT and uniform E-AT."""
    kind = scheme.kind
    if kind is SchemeKind.SAT:
        return NORM_ORDER[int(rng.integers(3))]
    if kind is SchemeKind.EAT:
        p1, _ = eat_sampling_probability(rerr if rerr is not None else RunningRobustError())
    elif kind is SchemeKind.EAT_UNIFORM:
        p1 = 0.5
    else:
        raise SchemeError(f"scheme {scheme} does not sample a norm per batch")
    return Norm.L1 if rng.random() < p1 else Norm.LINF


@dataclass
class PerturbedBatch:
    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    # norm -> number of examples (MAX) or steps (MSD) realising the max
    selection: dict
    # norm -> fraction of attacked points misclassified
    robust_error: dict
    sampled: Norm | None = None


def _attack_seed(cfg: AttackConfig, salt: int) -> AttackConfig:
    return replace(cfg, seed=(cfg.seed + salt) & 0x7FFFFFFFFFFFFFFF)


def generate_batch_perturbation(scheme: Scheme, net: Network, x, y, union: ThreatUnion,
                                attack_cfg: AttackConfig, rng: np.random.Generator,
                                rerr: RunningRobustError | None = None, indices=None) -> PerturbedBatch:
    """Adversarial inputs for one training batch under ``scheme``.

    For E-AT the running error of the sampled norm is updated in place
    with this batch's robust error (before any parameter update).
    """
    missing = [nm.value for nm in scheme.required_norms() if nm not in union]
    if missing:
        raise SchemeError(f"scheme {scheme} needs norms {missing} in the threat union")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    uniform = np.full(n, 1.0 / n)
    kind = scheme.kind

    def one(norm: Norm) -> PerturbedBatch:
        res = pgd_attack(net, x, y, union.get(norm), attack_cfg, indices)
        return PerturbedBatch(res.adversarial_inputs, y, uniform, {},
                              {norm: float(res.success.mean())}, sampled=norm)

    if kind is SchemeKind.SINGLE:
        return one(scheme.norm)
    if kind is SchemeKind.SAT:
        return one(sample_norm(scheme, rng))
    if kind in (SchemeKind.EAT, SchemeKind.EAT_UNIFORM):
        norm = sample_norm(scheme, rng, rerr)
        out = one(norm)
        if rerr is not None:
            rerr.update(norm, out.robust_error[norm])
        return out
    if kind is SchemeKind.MSD:
        res = msd_attack(net, x, y, union, attack_cfg, indices)
        return PerturbedBatch(res.adversarial_inputs, y, uniform, dict(res.choice_counts),
                              {"msd": float(res.success.mean())})

    results = [pgd_attack(net, x, y, union.get(nm), attack_cfg, indices) for nm in NORM_ORDER]
    errors = {nm: float(r.success.mean()) for nm, r in zip(NORM_ORDER, results)}
    if kind is SchemeKind.AVG:
        xs = np.concatenate([r.adversarial_inputs for r in results])
        return PerturbedBatch(xs, np.concatenate([y, y, y]), np.full(3 * n, 1.0 / (3 * n)),
                              {}, errors)
    # MAX: per example the copy with the highest loss, ties to the first norm
    losses = np.stack([r.final_loss for r in results])
    choice = np.argmax(losses, axis=0)
    xs = np.stack([r.adversarial_inputs for r in results])[choice, np.arange(n)]
    selection = {nm: int((choice == i).sum()) for i, nm in enumerate(NORM_ORDER)}
    return PerturbedBatch(xs, y, uniform, selection, errors)


def sgd_step(params, grads, velocity, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
    """In-place SGD with momentum and L2 weight decay: v <- m v + g + wd theta; theta <- theta - lr v."""
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


@dataclass
class TrainResult:
    net: Network
    history: list
    telemetry: list
    best_epoch: int | None = None


def _union_accuracy(net, x, y, union, attack_cfg) -> float:
    ok = predict(net, x) == y
    for spec in union.specs:
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            break
        res = pgd_attack(net, x[idx], y[idx], spec, attack_cfg, indices=idx)
        ok[idx[res.success]] = False
    return float(ok.mean())


def train(net: Network, x, y, cfg: TrainConfig, log=None) -> TrainResult:
    """Adversarial training; ``net`` is updated in place and returned.

    With ``checkpoint_selection='best'`` the last 10% of a seeded shuffle is
    held out and the epoch-end snapshot with the highest union robust
    accuracy on it is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if x.shape[1] != net.input_dim:
        raise ValueError(f"data dim {x.shape[1]} does not match network input {net.input_dim}")
    rng = np.random.default_rng(cfg.seed)
    idx_all = np.arange(x.shape[0])
    val_idx = None
    if cfg.checkpoint_selection == "best":
        perm = rng.permutation(x.shape[0])
        n_val = max(1, x.shape[0] // 10)
        val_idx, idx_all = perm[-n_val:], np.sort(perm[:-n_val])
    val_attack = replace(cfg.attack, n_restarts=1)

    params = net.params()
    velocity = [np.zeros_like(p) for p in params]
    rerr = RunningRobustError()
    n_train = idx_all.size
    steps_per_epoch = -(-n_train // cfg.batch_size)
    history, telemetry = [], []
    best = (-1.0, None, None)

    for epoch in range(cfg.epochs):
        rerr.reset()
        rerr_start = {nm.value: (rerr.sums[nm], rerr.counts[nm]) for nm in EAT_NORMS}
        order = idx_all[rng.permutation(n_train)]
        err_sum: dict = {}
        err_cnt: dict = {}
        selection = {nm: 0 for nm in NORM_ORDER}
        loss_sum = 0.0
        t0 = time.perf_counter()
        for b in range(steps_per_epoch):
            bidx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = lr_at(cfg.lr_schedule, epoch, b, steps_per_epoch, cfg.epochs)
            pert = generate_batch_perturbation(
                cfg.scheme, net, x[bidx], y[bidx], cfg.union,
                _attack_seed(cfg.attack, epoch * steps_per_epoch + b), rng, rerr, indices=bidx)
            loss, grads, _ = backward(net, pert.x, pert.y, pert.weights)
            sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            loss_sum += loss
            for k, v in pert.robust_error.items():
                err_sum[k] = err_sum.get(k, 0.0) + v
                err_cnt[k] = err_cnt.get(k, 0) + 1
            for k, v in pert.selection.items():
                selection[k] += v
        elapsed = time.perf_counter() - t0

        row = {
            "epoch": epoch,
            "lr": lr_at(cfg.lr_schedule, epoch, 0, steps_per_epoch, cfg.epochs),
            "loss": loss_sum / steps_per_epoch,
            "clean_acc": accuracy(net, x[idx_all], y[idx_all]),
            "robust_err": {(k.value if isinstance(k, Norm) else k): err_sum[k] / err_cnt[k] for k in err_sum},
            "rerr_start": rerr_start,
            "rerr_end": {nm.value: (rerr.sums[nm], rerr.counts[nm]) for nm in EAT_NORMS},
            "time": elapsed,
        }
        if cfg.scheme.kind in (SchemeKind.MAX, SchemeKind.MSD):
            telemetry.append(selection)
        if val_idx is not None:
            u = _union_accuracy(net, x[val_idx], y[val_idx], cfg.union, val_attack)
            row["val_union"] = u
            if u > best[0]:
                best = (u, epoch, [p.copy() for p in params])
        history.append(row)
        if log is not None:
            log(row)

    best_epoch = None
    if val_idx is not None and best[2] is not None:
        best_epoch = best[1]
        for p, saved in zip(params, best[2]):
            p[...] = saved
    return TrainResult(net=net, history=history, telemetry=telemetry, best_epoch=best_epoch)


def finetune_config(scheme: Scheme, union: ThreatUnion, lr: float = 0.01, epochs: int = 3, **kw) -> TrainConfig:
    """Fine-tuning defaults: 3 epochs, lr dropped by 10x every third of training."""
    kw.setdefault("lr_schedule", ThirdsDrop(lr))
    return TrainConfig(scheme=scheme, union=union, epochs=epochs, **kw)


def finetune(checkpoint: Network, x, y, cfg: TrainConfig, log=None) -> TrainResult:
    """Continue training a copy of ``checkpoint`` with fresh optimizer state."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[1] != checkpoint.input_dim:
        raise ValueError(f"checkpoint expects inputs of dim {checkpoint.input_dim}, data has {x.shape[1:]}")
    if y.size and y.max() >= checkpoint.num_classes:
        raise ValueError(f"checkpoint has {checkpoint.num_classes} classes, labels reach {y.max()}")
    return train(checkpoint.copy(), x, y, cfg, log=log)
