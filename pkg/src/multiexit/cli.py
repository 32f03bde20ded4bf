"""Command-line front end: every subcommand wraps one engine operation."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from typing import Dict, List, Optional, Sequence


from . import formats
from .cost import flops_report
from .data import SPLITS, generate_synthetic
from .exits import (ExitPolicy, InfeasibleObjective, Objective, calibrate, confidence_histogram,
                    export_trace, simulate)
from .model import DEFAULT_INPUT, build_model, describe
from .probe import FitConfig, substitute_eval, write_probe_csv
from .training import TrainConfig, evaluate, train


def read_config_file(path: str) -> Dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return type(like)(value)


def build_train_config(file_values: Dict[str, str], overrides: Dict[str, object]) -> TrainConfig:
    """File values first, then any CLI override that was actually given."""
    defaults = TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for key, value in file_values.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}; valid keys: {sorted(known)}")
        kwargs[key] = _coerce(value, getattr(defaults, key))
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kwargs)


def _model_args(p: argparse.ArgumentParser, pattern_default: Optional[str] = None) -> None:
    p.add_argument("--backbone", default="toynet", help="resnet18, vgg16 or toynet")
    p.add_argument("--pattern", default=pattern_default,
                   help='branch levels like "2+1" ("n" = naive branch, "" = no branches)')
    p.add_argument("--classes", type=int, default=None, help="number of classes")
    p.add_argument("--input", type=int, default=None, help="input image side")


def _arch(args, seed=None):
    classes = args.classes
    if classes is None:
        classes = 1000 if args.backbone in ("resnet18", "vgg16") else 10
    size = args.input or DEFAULT_INPUT.get(args.backbone)
    return build_model(args.backbone, args.pattern or "", classes, size, seed=seed)


def _fmt_g(v: float) -> str:
    return f"{v / 1e9:.4f}G"


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    ds = generate_synthetic(args.classes, args.per_class, args.size, args.seed, args.difficulty, args.split)
    formats.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.num_classes} classes, {args.split}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {f.name: getattr(args, f.name, None) for f in dataclasses.fields(TrainConfig)}
    config = build_train_config(file_values, overrides)
    train_ds = formats.load_dataset(args.data)
    val_ds = formats.load_dataset(args.val) if args.val else None
    if args.classes is None:
        args.classes = train_ds.num_classes
    if args.input is None:
        args.input = train_ds.image_shape[1]
    model = _arch(args, seed=config.seed)
    baseline = None
    if config.teacher == "dk":
        if not config.teacher_checkpoint:
            raise ValueError("teacher dk needs --teacher-checkpoint")
        baseline, _ = formats.load_model(config.teacher_checkpoint)
    result = train(model, train_ds, config, eval_ds=val_ds, baseline=baseline, metrics_path=args.metrics)
    formats.save_model(model, args.out, epoch=len(result.history), config=dataclasses.asdict(config))
    last = result.history[-1]
    print(f"trained {model.backbone.name} [{model.pattern}] for {last['epoch']} epochs; "
          f"final loss {last['loss']:.4f}; checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, _ = formats.load_model(args.checkpoint)
    ds = formats.load_dataset(args.data)
    accs = evaluate(model, ds)
    rows = [{"exit": m, "accuracy": a} for m, a in enumerate(accs, start=1)]
    for row in rows:
        print(f"exit {row['exit']}: {row['accuracy']:.4f}")
    if args.csv:
        formats.write_csv(rows, args.csv)
    return 0


def cmd_flops(args) -> int:
    model = _arch(args)
    rep = flops_report(model, elementwise=args.elementwise)
    paths = rep.path_costs()
    rows = []
    for m in range(1, rep.M + 1):
        level = "head" if m == rep.M else str(model.pattern.levels[m - 1])
        rows.append({"exit": m, "stage": model.exit_stage(m), "level": level,
                     "branch_flops": rep.branch_only_flops[m - 1],
                     "classifier_flops": rep.classifier_flops[m - 1], "path_flops": paths[m - 1]})
    print(f"{model.backbone.name} [{str(model.pattern) or 'no branches'}] input {model.backbone.input_shape}")
    print(f"{'exit':>4} {'stage':>5} {'level':>5} {'branch':>10} {'classifier':>11} {'path':>10}")
    for r in rows:
        print(f"{r['exit']:>4} {r['stage']:>5} {r['level']:>5} {_fmt_g(r['branch_flops']):>10} "
              f"{_fmt_g(r['classifier_flops']):>11} {_fmt_g(r['path_flops']):>10}")
    print(f"backbone total {_fmt_g(rep.backbone_total)} ({rep.backbone_total})")
    print(f"branch total   {_fmt_g(rep.branch_total)} ({rep.branch_total})")
    print(f"total          {_fmt_g(rep.total)} ({rep.total})")
    if args.csv:
        formats.write_csv(rows, args.csv)
    return 0


def cmd_export_trace(args) -> int:
    model, _ = formats.load_model(args.checkpoint)
    ds = formats.load_dataset(args.data)
    trace = export_trace(model, ds)
    formats.save_trace(trace, args.out)
    print(f"wrote trace N={trace.N} M={trace.M} K={trace.K} to {args.out}")
    return 0


def _report_for(args, M: int):
    if args.pattern is None:
        return None
    rep = flops_report(_arch(args))
    if rep.M != M:
        raise ValueError(f"architecture has {rep.M} exits but the trace has {M}")
    return rep


def cmd_simulate(args) -> int:
    trace = formats.load_trace(args.trace)
    policy = ExitPolicy.parse(args.gammas)
    res = simulate(trace, policy, _report_for(args, trace.M))
    print(f"policy         ({policy})")
    print(f"accuracy       {res.adaptive_accuracy:.4f}")
    print("exit rates     (" + ", ".join(f"{r:g}" for r in res.exit_rates) + ")")
    if res.af is not None:
        print(f"adaptive FLOPs {_fmt_g(res.af)}")
    if args.csv:
        formats.write_csv([res.as_row()], args.csv)
    return 0


def cmd_calibrate(args) -> int:
    trace = formats.load_trace(args.trace)
    rep = _report_for(args, trace.M)
    if rep is None:
        raise ValueError("calibrate needs the architecture (--backbone/--pattern) for costs")
    if (args.target_accuracy is None) == (args.max_flops is None):
        raise ValueError("give exactly one of --target-accuracy or --max-flops")
    objective = (Objective.min_flops(args.target_accuracy) if args.target_accuracy is not None
                 else Objective.max_accuracy(args.max_flops))
    try:
        policy = calibrate(trace, rep, objective, step=args.step)
    except InfeasibleObjective as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 3
    res = simulate(trace, policy, rep)
    print(f"gammas {policy}")
    print(f"accuracy {res.adaptive_accuracy:.4f}  AF {_fmt_g(res.af)}  "
          f"rates ({', '.join(f'{r:.3f}' for r in res.exit_rates)})")
    if args.test_trace:
        test = formats.load_trace(args.test_trace)
        tres = simulate(test, policy, rep)
        print(f"test accuracy {tres.adaptive_accuracy:.4f}  AF {_fmt_g(tres.af)}")
    return 0


def cmd_histogram(args) -> int:
    trace = formats.load_trace(args.trace)
    hist = confidence_histogram(trace, args.exit, args.bins)
    rows = hist.rows()
    if args.csv:
        formats.write_csv(rows, args.csv)
    for r in rows:
        print(f"[{r['bin_low']:.3f}, {r['bin_high']:.3f}) correct {r['correct']:>6} "
              f"incorrect {r['incorrect']:>6}")
    return 0


def cmd_probe(args) -> int:
    baseline, _ = formats.load_model(args.baseline)
    branched, _ = formats.load_model(args.branched)
    fit_ds = formats.load_dataset(args.data)
    eval_ds = formats.load_dataset(args.eval_data)
    config = FitConfig(epochs=args.epochs, lr=args.lr)
    results = []
    for stage in _int_list(args.stages):
        for n in _int_list(args.fuzziness):
            res = substitute_eval(baseline, branched, stage, n, fit_ds, eval_ds, args.repeats, config,
                                  args.seed)
            results.append(res)
            print(f"stage {stage} N={n}: accuracy {res.accuracy_mean:.4f} +- {res.accuracy_std:.4f}, "
                  f"mse {res.mse_mean:.3e}")
    if args.csv:
        write_probe_csv(results, args.csv)
    return 0


def cmd_describe(args) -> int:
    model = formats.load_model(args.checkpoint)[0] if args.checkpoint else _arch(args)
    print(describe(model))
    return 0


def _int_list(text: str) -> List[int]:
    return [int(t) for t in text.split(",") if t.strip()]


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiexit", description="Multi-exit CNN toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", type=float, default=0.5)
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a multi-exit model")
    _model_args(p, "2+1")
    p.add_argument("--data", required=True, help="training dataset (.mxds)")
    p.add_argument("--val", help="held-out dataset evaluated every epoch")
    p.add_argument("--config", help="key = value file of training options")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="per-epoch CSV path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="lr_initial", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--lam", type=float, help="weight of the cross-entropy term")
    p.add_argument("--tau", type=float, help="distillation temperature")
    p.add_argument("--strategy", choices=["coop", "branches_only", "stage_wise"])
    p.add_argument("--teacher", choices=["none", "dk", "ofa", "med", "wed"])
    p.add_argument("--teacher-checkpoint", dest="teacher_checkpoint")
    p.add_argument("--kl-direction", dest="kl_direction", choices=["teacher_student", "student_teacher"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-exit accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="static cost table")
    _model_args(p, "")
    p.add_argument("--elementwise", action="store_true", help="also charge BN, ReLU, pooling, adds")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("export-trace", help="dump per-exit logits of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_trace)

    p = sub.add_parser("simulate", help="replay a threshold policy on a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--gammas", required=True, help="comma-separated thresholds for exits 1..M-1")
    _model_args(p)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="grid-search thresholds on a trace")
    p.add_argument("--trace", required=True, help="validation trace")
    p.add_argument("--test-trace", help="report the chosen policy on this trace too")
    _model_args(p)
    p.add_argument("--target-accuracy", type=float)
    p.add_argument("--max-flops", type=float)
    p.add_argument("--step", type=float, default=0.05)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("histogram", help="max-softmax histogram at one exit")
    p.add_argument("--trace", required=True)
    p.add_argument("--exit", type=int, required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("probe-consistency", help="feature-reconstruction substitution probe")
    p.add_argument("--baseline", required=True, help="checkpoint without branches")
    p.add_argument("--branched", required=True, help="checkpoint with branches")
    p.add_argument("--data", required=True, help="samples used to fit reconstructors")
    p.add_argument("--eval-data", required=True)
    p.add_argument("--stages", default="1,2")
    p.add_argument("--fuzziness", "-N", default="0,1", help="comma-separated N values")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("describe", help="layer table of an architecture")
    _model_args(p, "")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_describe)
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
