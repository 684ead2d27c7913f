"""Command-line entry point: run, sweep, gradcheck, synth."""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ContractError
from .runner import (config_from_dict, grad_check_suite, run_ablation_sweep,
                     run_experiment)
from .sessions import make_synthetic, save_dataset


def _load_config(path: str, seed: int | None, out_dir: str | None):
    with open(path) as fh:
        raw = json.load(fh)
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = out_dir
    return config_from_dict(raw)


def _cmd_run(args) -> int:
    config = _load_config(args.config, args.seed, args.out)
    report = run_experiment(config)
    print(json.dumps({"method": report.method, "setup": report.setup_label,
                      "average_recalls": {str(k): v for k, v in report.average_recalls.items()},
                      "wall_time_s": round(report.wall_time_s, 3)}, indent=2))
    return 0


def _cmd_sweep(args) -> int:
    config = _load_config(args.config, args.seed, args.out)
    reports = run_ablation_sweep(config)
    print(json.dumps({variant: {str(k): v for k, v in rep.average_recalls.items()}
                      for variant, rep in reports.items()}, indent=2))
    return 0


def _cmd_gradcheck(args) -> int:
    report = grad_check_suite(seed=args.seed, instances=args.instances)
    print(json.dumps({"passed": report.passed,
                      "instances": report.instances,
                      "tolerance": report.tolerance,
                      "max_rel_err": report.max_rel_err,
                      "elapsed_s": round(report.elapsed_s, 3)}, indent=2))
    return 0 if report.passed else 1


def _cmd_synth(args) -> int:
    ds = make_synthetic(args.classes, args.dim, args.per_class,
                        args.spread, args.drift, args.seed)
    save_dataset(ds, args.out)
    print(json.dumps({"path": args.out, "classes": ds.num_classes, "dim": ds.dim,
                      "train_items": len(ds.train_items), "test_items": len(ds.test_items)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="continual-retrieval",
        description="Continual embedding training with a backward-consistent gallery.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(fn=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run the loss-term ablation matrix")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--instances", type=int, default=25)
    p_grad.set_defaults(fn=_cmd_gradcheck)

    p_synth = sub.add_parser("synth", help="emit a synthetic dataset file")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--classes", type=int, default=20)
    p_synth.add_argument("--dim", type=int, default=32)
    p_synth.add_argument("--per-class", type=int, dest="per_class", default=30)
    p_synth.add_argument("--spread", type=float, default=0.3)
    p_synth.add_argument("--drift", type=float, default=0.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(fn=_cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ContractError as exc:
        json.dump({"error": {"type": type(exc).__name__, "message": str(exc)}}, sys.stderr)
        sys.stderr.write("\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
