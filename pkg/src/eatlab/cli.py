"""Command-line entry point: ``eatlab <subcommand> [--config FILE] [--ns.key value ...]``.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 failed
``--check``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import data_io, evaluation, geometry, training
from .attacks import AttackConfig, Norm, ThreatUnion
from .netcore import init_network

SUBCOMMANDS = ("train", "finetune", "eval", "curve", "geometry", "sweep")
SEED_ENV = "EAT_LAB_SEED"


class CliError(Exception):
    code = 2


class ConfigFailure(CliError):
    code = 1


class CheckFailure(CliError):
    code = 3


# ---------------------------------------------------------------------------
# configuration keys


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _opt_float(v):
    return None if str(v).lower() in ("", "none", "off") else float(v)


def _choice(*options):
    def conv(v):
        v = str(v).strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return conv


def _scheme(v):
    training.Scheme.parse(v)
    return str(v).strip().lower()


def _norm(v):
    return Norm.parse(v).value


def _ints(v):
    out = [int(s) for s in str(v).split(",") if s.strip()]
    if not out or min(out) < 1:
        raise ValueError("expected comma-separated positive integers")
    return ",".join(map(str, out))


def _pairs(v):
    # "epsinf:eps1;epsinf:eps1"
    out = []
    for part in str(v).split(";"):
        if part.strip():
            a, b = part.split(":")
            out.append(f"{float(a)}:{float(b)}")
    if not out:
        raise ValueError("expected 'epsinf:eps1;...'")
    return ";".join(out)


def _step(v):
    v = str(v).strip()
    if v.lower() in ("", "auto", "none"):
        return "auto"
    AttackConfig(step_size=v if not _is_number(v) else float(v))
    return v


def _is_number(v) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


# key -> (converter, default); a default of None means "derived" (see _resolve)
KEYS = {
    "data.kind": (_choice("rings", "gaussians", "idx"), "rings"),
    "data.d": (_int, 20),
    "data.n_per_class": (_int, 1000),
    "data.n_classes": (_int, 2),
    "data.separation": (_float, 4.0),
    "data.scale": (_float, 0.4),
    "data.images": (str, ""),
    "data.labels": (str, ""),
    "data.subset": (_int, 0),
    "data.seed": (_int, None),
    "train.scheme": (_scheme, "eat"),
    "train.hidden": (_ints, "64,64"),
    "train.activation": (_choice("relu", "softplus"), "relu"),
    "train.epochs": (_int, None),
    "train.batch_size": (_int, 128),
    "train.lr_schedule": (_choice("piecewise", "cyclic", "thirds"), None),
    "train.lr": (_float, None),
    "train.drop_epoch": (_int, None),
    "train.drop_factor": (_float, 10.0),
    "train.momentum": (_float, 0.9),
    "train.weight_decay": (_float, 5e-4),
    "train.checkpoint_selection": (_choice("best", "final"), "final"),
    "train.seed": (_int, None),
    "attack.eps_linf": (_opt_float, 0.02),
    "attack.eps_l2": (_opt_float, 0.04),
    "attack.eps_l1": (_opt_float, 0.1),
    "attack.n_steps": (_int, 10),
    "attack.step_size": (_step, "auto"),
    "attack.n_restarts": (_int, 1),
    "attack.k_fraction": (_float, 0.05),
    "attack.k_fraction_final": (_float, 0.01),
    "attack.seed": (_int, None),
    "eval.n_steps": (_int, 20),
    "eval.n_restarts": (_int, 2),
    "eval.norm": (_norm, "l2"),
    "eval.eps_max": (_float, 0.2),
    "eval.n_points": (_int, 11),
    "eval.pairs": (_pairs, "0.02:0.1"),
    "eval.min_clean": (_opt_float, None),
    "eval.min_union": (_opt_float, None),
}


def _fmt(v) -> str:
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _resolve(subcommand: str, raw: dict) -> dict:
    """Validate raw string values and fill defaults; returns typed values."""
    cfg = {}
    for key, value in raw.items():
        if key not in KEYS:
            raise ConfigFailure(f"unknown configuration key {key!r}")
        conv = KEYS[key][0]
        try:
            cfg[key] = conv(value)
        except (ValueError, TypeError) as exc:
            raise ConfigFailure(f"invalid value {value!r} for key {key!r}: {exc}") from None
    for key, (_, default) in KEYS.items():
        if key not in cfg and default is not None:
            cfg[key] = default

    seed = None
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigFailure(f"environment variable {SEED_ENV}={env!r} is not an integer") from None
    for key in ("data.seed", "train.seed", "attack.seed"):
        if key not in cfg:
            cfg[key] = seed if seed is not None else 0
        if cfg[key] < 0:
            raise ConfigFailure(f"key {key!r} must be non-negative")

    tuning = subcommand in ("finetune", "sweep")
    cfg.setdefault("train.epochs", 3 if tuning else 10)
    cfg.setdefault("train.lr_schedule", "thirds" if tuning else "piecewise")
    cfg.setdefault("train.lr", 0.01 if tuning else 0.05)
    cfg.setdefault("train.drop_epoch", max(1, int(0.8 * cfg["train.epochs"])))

    for key in ("train.epochs", "train.batch_size", "data.n_per_class", "attack.n_steps",
                "attack.n_restarts", "eval.n_steps", "eval.n_restarts", "eval.n_points", "data.d"):
        if cfg[key] < 1:
            raise ConfigFailure(f"key {key!r} must be >= 1")
    if cfg["data.kind"] == "idx" and not (cfg["data.images"] and cfg["data.labels"]):
        raise ConfigFailure("data.kind = idx needs keys 'data.images' and 'data.labels'")

    # build the typed objects once so every semantic error surfaces here
    try:
        _union(cfg)
        _attack(cfg, "attack")
        _attack(cfg, "eval")
        if subcommand in ("train", "finetune"):
            _train_config(cfg)
    except (ValueError, KeyError) as exc:
        raise ConfigFailure(f"invalid configuration: {exc}") from None
    return cfg


def _union(cfg) -> ThreatUnion:
    return ThreatUnion.of(linf=cfg["attack.eps_linf"], l2=cfg["attack.eps_l2"], l1=cfg["attack.eps_l1"])


def _attack(cfg, ns: str) -> AttackConfig:
    step = cfg["attack.step_size"]
    step = None if step == "auto" else (float(step) if _is_number(step) else step)
    return AttackConfig(
        n_steps=cfg[f"{ns}.n_steps"],
        n_restarts=cfg[f"{ns}.n_restarts"],
        step_size=step,
        k_fraction=cfg["attack.k_fraction"],
        k_fraction_final=cfg["attack.k_fraction_final"],
        seed=cfg["attack.seed"],
    )


def _schedule(cfg):
    kind = cfg["train.lr_schedule"]
    if kind == "piecewise":
        return training.Piecewise(cfg["train.lr"], cfg["train.drop_epoch"], cfg["train.drop_factor"])
    if kind == "cyclic":
        return training.Cyclic(cfg["train.lr"])
    return training.ThirdsDrop(cfg["train.lr"])


def _train_config(cfg) -> training.TrainConfig:
    return training.TrainConfig(
        scheme=training.Scheme.parse(cfg["train.scheme"]),
        union=_union(cfg),
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr_schedule=_schedule(cfg),
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        attack=_attack(cfg, "attack"),
        seed=cfg["train.seed"],
        checkpoint_selection=cfg["train.checkpoint_selection"],
    )


def _dataset(cfg) -> data_io.Dataset:
    kind = cfg["data.kind"]
    if kind == "rings":
        spec = data_io.Rings(n_per_class=cfg["data.n_per_class"], d=cfg["data.d"], scale=cfg["data.scale"])
    elif kind == "gaussians":
        spec = data_io.Gaussians(n_classes=cfg["data.n_classes"], d=cfg["data.d"],
                                 separation=cfg["data.separation"], n_per_class=cfg["data.n_per_class"])
    else:
        spec = data_io.IdxFiles(cfg["data.images"], cfg["data.labels"], cfg["data.subset"] or None)
    return data_io.generate(data_io.DatasetSpec(spec, seed=cfg["data.seed"]))


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigFailure(message)


@dataclass
class Invocation:
    subcommand: str
    config_path: str | None
    overrides: dict
    output_dir: Path
    threads: int
    checkpoint: str | None
    check: bool
    geometry: argparse.Namespace | None = None


def _build_parser() -> _Parser:
    p = _Parser(prog="eatlab", description="Multi-norm adversarial robustness laboratory.")
    sub = p.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", parser_class=_Parser)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        if name == "geometry":
            s.add_argument("--eps1", type=float, required=True)
            s.add_argument("--epsinf", type=float, required=True)
            s.add_argument("--d", type=int, required=True)
            s.add_argument("--p", type=float, default=2.0, help="lp exponent; 'inf' allowed")
            s.add_argument("--oracle", action="store_true", help="also run the ray-cast oracle (d <= 6)")
            s.add_argument("--output-dir", default=None)
            continue
        s.add_argument("--config", default=None)
        s.add_argument("--output-dir", default="out")
        s.add_argument("--threads", type=int, default=None)
        s.add_argument("--checkpoint", default=None)
        s.add_argument("--check", action="store_true", help="exit 3 when report checks fail")
    return p


def parse_args(argv) -> Invocation:
    parser = _build_parser()
    args, rest = parser.parse_known_args(argv)
    if args.subcommand is None:
        raise ConfigFailure("missing subcommand (one of " + ", ".join(SUBCOMMANDS) + ")")
    if args.subcommand == "geometry":
        if rest:
            raise ConfigFailure(f"unrecognized arguments: {' '.join(rest)}")
        out = Path(args.output_dir) if args.output_dir else None
        return Invocation("geometry", None, {}, out, 1, None, False, geometry=args)

    overrides = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigFailure(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(rest):
                raise ConfigFailure(f"missing value for key {key!r}")
            i += 1
            value = rest[i]
        overrides[key] = value
        i += 1
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        raise ConfigFailure("--threads must be >= 1")
    return Invocation(args.subcommand, args.config, overrides, Path(args.output_dir),
                      threads, args.checkpoint, args.check)


# ---------------------------------------------------------------------------
# subcommands


def _print_report(rep: evaluation.RobustnessReport, out):
    for line in rep.summary_lines():
        print(line, file=out)


def _check_report(cfg, rep) -> list[str]:
    problems = []
    try:
        rep.check()
    except evaluation.ReportError as exc:
        problems.append(str(exc))
    if cfg.get("eval.min_clean") is not None and rep.clean < cfg["eval.min_clean"]:
        problems.append(f"clean {rep.clean:.4f} < eval.min_clean {cfg['eval.min_clean']}")
    if cfg.get("eval.min_union") is not None and rep.union < cfg["eval.min_union"]:
        problems.append(f"union {rep.union:.4f} < eval.min_union {cfg['eval.min_union']}")
    return problems


def _load_net(path):
    return data_io.load_checkpoint(path).to_network()


def _run_geometry(args, out) -> int:
    p = float(args.p)
    try:
        q = geometry.GeometryQuery(args.eps1, args.epsinf, args.d)
        union = geometry.min_lp_outside_union(q, p)
        hull = geometry.min_lp_outside_hull(q, p).radius
        bound = geometry.l2_union_upper_bound(q)
    except geometry.GeometryError as exc:
        raise ConfigFailure(f"--eps1/--epsinf/--d: {exc}") from None
    lines = [
        f"eps1    {args.eps1:.6g}",
        f"epsinf  {args.epsinf:.6g}",
        f"d       {args.d}",
        f"p       {p:g}",
        f"union   {union:.4f}",
        f"bound   {bound:.4f}",
        f"hull    {hull:.4f}",
    ]
    if args.oracle:
        if args.d > 6:
            raise ConfigFailure(f"--oracle needs --d <= 6, got {args.d}")
        for kind in geometry.RegionKind:
            val = geometry.oracle_min_norm(q, p, kind)
            lines.append(f"oracle_{kind.value:<6} {val:.4f}")
    text = "\n".join(lines) + "\n"
    if args.output_dir:
        Path(args.output_dir).mkdir(parents=True, exist_ok=True)
        evaluation.write_text(Path(args.output_dir) / "geometry.txt", text)
    out.write(text)
    return 0


def run(inv: Invocation, out=None) -> int:
    """Execute one invocation; raises CliError subclasses on failure."""
    out = out or sys.stdout
    if inv.subcommand == "geometry":
        return _run_geometry(inv.geometry, out)

    raw = data_io.load_config(inv.config_path) if inv.config_path else {}
    try:
        data_io.parse_config("".join(f"{k} = {v}\n" for k, v in inv.overrides.items()), "<flags>")
    except data_io.ConfigError as exc:
        raise ConfigFailure(str(exc)) from None
    raw.update(inv.overrides)
    cfg = _resolve(inv.subcommand, raw)
    if inv.subcommand in ("finetune", "eval", "curve", "sweep") and not inv.checkpoint:
        raise ConfigFailure(f"{inv.subcommand} needs key 'checkpoint' (--checkpoint PATH)")

    # every configuration error has been raised by now; artifacts may follow
    outdir = inv.output_dir
    outdir.mkdir(parents=True, exist_ok=True)
    snapshot = {k: _fmt(v) for k, v in cfg.items()}
    evaluation.write_text(outdir / "run.cfg", data_io.dump_config(snapshot))

    ds = _dataset(cfg)
    eval_attack = _attack(cfg, "eval")
    union = _union(cfg)
    problems = []

    if inv.subcommand in ("train", "finetune"):
        tcfg = _train_config(cfg)
        if inv.subcommand == "train":
            dims = [ds.dim, *map(int, cfg["train.hidden"].split(",")), ds.num_classes]
            net = init_network(dims, cfg["train.activation"], seed=cfg["train.seed"])
            result = training.train(net, ds.x_train, ds.y_train, tcfg)
        else:
            result = training.finetune(_load_net(inv.checkpoint), ds.x_train, ds.y_train, tcfg)
        data_io.save_checkpoint(result.net, {"scheme": cfg["train.scheme"], "seed": cfg["train.seed"]},
                                outdir / "checkpoint.bin")
        if result.telemetry:
            rows, _ = evaluation.telemetry_summary(result.telemetry)
            evaluation.write_text(outdir / "telemetry.csv", evaluation.telemetry_csv(rows))
        rep = evaluation.evaluate(result.net, ds.x_test, ds.y_test, union, eval_attack, inv.threads)
        evaluation.write_text(outdir / "report.csv",
                              evaluation.report_csv([(cfg["train.scheme"], rep, cfg["train.seed"])]))
        _print_report(rep, out)
        problems = _check_report(cfg, rep)

    elif inv.subcommand == "eval":
        net = _load_net(inv.checkpoint)
        rep = evaluation.evaluate(net, ds.x_test, ds.y_test, union, eval_attack, inv.threads)
        evaluation.write_text(outdir / "report.csv",
                              evaluation.report_csv([(Path(inv.checkpoint).stem, rep, cfg["attack.seed"])]))
        _print_report(rep, out)
        problems = _check_report(cfg, rep)

    elif inv.subcommand == "curve":
        net = _load_net(inv.checkpoint)
        grid = evaluation.eps_grid(cfg["eval.eps_max"], cfg["eval.n_points"])
        pts = evaluation.robustness_curve(net, ds.x_test, ds.y_test, cfg["eval.norm"], grid, eval_attack,
                                          inv.threads)
        evaluation.write_text(outdir / "curve.csv", evaluation.curve_csv([(cfg["eval.norm"], pts)]))
        for pt in pts:
            print(f"{cfg['eval.norm']} eps {pt.eps:.4f}  robust {pt.robust_accuracy:.4f}", file=out)
        if any(b.robust_accuracy > a.robust_accuracy for a, b in zip(pts, pts[1:])):
            problems.append("curve is not non-increasing")

    elif inv.subcommand == "sweep":
        net = _load_net(inv.checkpoint)
        pairs = [tuple(map(float, p.split(":"))) for p in cfg["eval.pairs"].split(";")]
        grid = evaluation.eps_grid(cfg["eval.eps_max"], cfg["eval.n_points"])
        ft = training.finetune_config(training.Scheme(training.SchemeKind.EAT),
                                      ThreatUnion.of(linf=pairs[0][0], l1=pairs[0][1]),
                                      lr=cfg["train.lr"], epochs=cfg["train.epochs"],
                                      batch_size=cfg["train.batch_size"], attack=_attack(cfg, "attack"),
                                      seed=cfg["train.seed"], momentum=cfg["train.momentum"],
                                      weight_decay=cfg["train.weight_decay"])
        try:
            results = evaluation.radii_sweep(net, ds.x_train, ds.y_train, ds.x_test, ds.y_test, pairs, ft,
                                             grid, eval_attack, inv.threads)
        except geometry.DomainError as exc:
            raise ConfigFailure(f"eval.pairs: {exc}") from None
        rows = []
        for r in results:
            for pt in r.curve:
                rows.append([f"{r.epsinf:.6g}", f"{r.eps1:.6g}", f"{r.predicted_l2:.4f}",
                             f"{pt.eps:.4f}", f"{pt.robust_accuracy:.4f}"])
            print(f"epsinf {r.epsinf:.6g} eps1 {r.eps1:.6g}  predicted l2 {r.predicted_l2:.4f}", file=out)
        evaluation.write_text(outdir / "sweep.csv", evaluation._csv_text(
            ["epsinf", "eps1", "predicted_l2", "eps", "robust_acc"], rows))

    if inv.check and problems:
        raise CheckFailure("; ".join(problems))
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        inv = parse_args(argv)
        return run(inv)
    except CliError as exc:
        print(f"eatlab: error: {exc}", file=sys.stderr)
        return exc.code
    except data_io.ConfigError as exc:
        print(f"eatlab: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, ArithmeticError) as exc:
        print(f"eatlab: runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
