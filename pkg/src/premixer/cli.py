"""Command-line entry point.

Subcommands: synth | pretrain | train | eval | transfer | gradcheck.
Exit codes: 0 ok, 2 config/usage error, 3 data error, 4 numeric failure.
Set PREMIXER_NUM_THREADS to cap BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from premixer.config import RunConfig
from premixer.errors import PremixerError

log = logging.getLogger("premixer")


def _positive(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "data": getattr(args, "data", None),
        "seed": getattr(args, "seed", None),
    }
    for flag in ("no_pretrain", "no_cl", "no_context", "no_stpe"):
        if getattr(args, flag, False):
            overrides[f"ablation.{flag}"] = True
    if getattr(args, "spatial_mode", None):
        overrides["spatial_mode"] = args.spatial_mode
    if getattr(args, "aggregation", None):
        overrides["aggregation"] = args.aggregation
    if getattr(args, "epochs", None) is not None:
        key = "pretrain.epochs" if args.command == "pretrain" else "optim.epochs"
        overrides[key] = args.epochs
    return cfg.replace(**overrides)


def cmd_synth(args):
    from premixer.datapipe import generate_synthetic, save_series, write_csv

    raw = generate_synthetic(args.nodes, args.days, args.seed, args.steps_per_day, args.noise)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    crc = save_series(raw, out, {"seed": args.seed, "days": args.days, "noise": args.noise})
    if args.csv:
        write_csv(raw, out.with_suffix(".csv"))
    print(f"wrote {out} shape={raw.values.shape} crc32={crc:08x}")


def cmd_pretrain(args):
    from premixer.workflows import run_pretrain

    cfg = _load_config(args)
    res = run_pretrain(cfg, args.out, resume=args.resume, plots=not args.no_plots)
    print(f"PIEncoder checkpoint: {res['checkpoint']}")
    print(f"final epoch {res['log'][-1][0]}: recon {res['log'][-1][1]:.4f} "
          f"cl {res['log'][-1][2]:.4f}; recon MSE {res['recon_mse']:.4f} "
          f"(mean-predictor variance {res['baseline_var']:.4f})")


def _print_report(report, title):
    print(title)
    print(report.to_csv(), end="")


def cmd_train(args):
    from premixer.workflows import run_train

    cfg = _load_config(args)
    res = run_train(cfg, args.out, pretrained=args.pretrained, plots=not args.no_plots)
    c = res["counts"]
    print(f"parameters: total {c['total']}, trainable {c['trainable']}")
    print(f"forecaster checkpoint: {res['checkpoint']} (best epoch {res['best_epoch']})")
    _print_report(res["val_report"], "validation report:")


def cmd_eval(args):
    from premixer.workflows import run_eval

    report = run_eval(args.checkpoint, args.out, data_path=args.data, split=args.split,
                      plots=not args.no_plots)
    _print_report(report, f"{args.split} report:")


def cmd_transfer(args):
    from premixer.workflows import run_transfer

    cfg = _load_config(args)
    res = run_transfer(args.source, cfg, args.out, plots=not args.no_plots)
    c = res["counts"]
    print(f"parameters: total {c['total']}, trainable {c['trainable']}")
    _print_report(res["test_report"], "target test report:")


def cmd_gradcheck(args):
    from premixer.gradcheck import format_table, run_suite

    rows, seconds = run_suite(seeds=args.seeds, tol=args.tol)
    print(format_table(rows))
    print(f"elapsed {seconds:.1f}s")
    if args.json:
        Path(args.json).write_text(json.dumps(
            [{"name": r.name, "seeds": r.seeds, "max_rel_err": r.max_rel_err, "passed": r.passed}
             for r in rows], indent=2) + "\n")
    return 0 if all(r.passed for r in rows) else 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="premixer", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic traffic dataset")
    s.add_argument("--nodes", type=_positive, required=True)
    s.add_argument("--days", type=_positive, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=5.0)
    s.add_argument("--steps-per-day", type=_positive, default=96)
    s.add_argument("--out", default="synthetic.pmxt")
    s.add_argument("--csv", action="store_true", help="also write the long-format CSV")
    s.set_defaults(func=cmd_synth)

    def common(sp, out_default):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--data", help="dataset path (overrides config)")
        sp.add_argument("--out", default=out_default)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--no-plots", action="store_true")

    def ablations(sp):
        sp.add_argument("--no-pretrain", action="store_true")
        sp.add_argument("--no-context", action="store_true")
        sp.add_argument("--no-stpe", action="store_true")
        sp.add_argument("--spatial-mode", choices=("structured", "basic"))
        sp.add_argument("--aggregation", choices=("mean", "sum"))

    s = sub.add_parser("pretrain", help="pre-train the PIEncoder")
    common(s, "runs/pretrain")
    s.add_argument("--no-cl", action="store_true", help="drop the contrastive term")
    s.add_argument("--resume", help="PIEncoder checkpoint to continue from")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="train the forecaster")
    common(s, "runs/train")
    s.add_argument("--pretrained", help="PIEncoder checkpoint directory")
    ablations(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a forecaster checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="dataset path (defaults to the one used in training)")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--out", default="runs/eval")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("transfer", help="train on a target dataset with a source PIEncoder")
    common(s, "runs/transfer")
    s.add_argument("--source", required=True, help="source PIEncoder checkpoint directory")
    ablations(s)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    s.add_argument("--seeds", type=_positive, default=10)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--json", help="also write the table as JSON")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except PremixerError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
