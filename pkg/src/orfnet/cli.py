"""Command-line entry point: gen-data, train, eval, ablate, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, OrfError

EXIT_OK = 0
EXIT_GRADCHECK = 5

log = logging.getLogger("orfnet")


def _config(args):
    from .training import ExperimentConfig, load_config

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    if getattr(args, "dataset_dir", None):
        cfg.dataset_dir = args.dataset_dir
    return cfg


def cmd_gen_data(args) -> int:
    from .annotations import write_dataset
    from .synthetic import generate

    cfg = _config(args)
    root = write_dataset(cfg.dataset_dir, generate(cfg.generator))
    print(f"wrote dataset to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import run_training

    cfg = _config(args)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    art = run_training(cfg, evaluate_split=not args.no_eval)
    print(f"run directory: {art.output_dir}")
    if art.report is not None:
        print(art.report.table())
    return EXIT_OK


def cmd_eval(args) -> int:
    from .annotations import read_dataset
    from .model import load_checkpoint
    from .training import evaluate

    cfg = _config(args)
    if args.split:
        cfg.eval_split = args.split
    splits = read_dataset(cfg.dataset_dir)
    samples = splits.get(cfg.eval_split)
    if not samples:
        raise DataError(f"dataset {cfg.dataset_dir} has no '{cfg.eval_split}' split")
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint {args.checkpoint} not found")
    state = load_checkpoint(args.checkpoint, cfg.model)
    report, dets = evaluate(state.model, samples, cfg)
    print(json.dumps(report.as_record(), sort_keys=True))
    print(report.table())
    if args.dump:
        with open(args.dump, "w") as fh:
            for s, d in zip(samples, dets):
                fh.write(json.dumps({"id": s.sample_id,
                                     "detections": [[*x.box.as_tuple(), x.score] for x in d]}) + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import cell_names, format_table, run_ablation

    if args.list_cells:
        print("\n".join(cell_names()))
        return EXIT_OK
    cfg = _config(args)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    cells = args.cells.split(",") if args.cells else None
    results = run_ablation(cfg, args.seeds, cells, log=print)
    print(format_table(results))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import corrupted_check, run_gradcheck

    results = run_gradcheck(seed=args.seed, configs=args.configs)
    if args.corrupt:
        results.append(corrupted_check(args.seed))
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}")
        return EXIT_GRADCHECK
    print("all gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orfnet", description=__doc__.splitlines()[0])
    p.add_argument("--deterministic", action="store_true",
                   help="single thread and deterministic kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config (defaults when omitted)")
        sp.add_argument("--dataset-dir")
        return sp

    sp = common(sub.add_parser("gen-data", help="generate the synthetic dataset"))
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train", help="train one model"))
    sp.add_argument("--output-dir")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--no-eval", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split")
    sp.add_argument("--dump", help="write per-image detections as JSON lines")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("ablate", help="run the assignment/regime ablation grid"))
    sp.add_argument("--output-dir")
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--cells", help="comma-separated subset of cells (see --list-cells)")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--list-cells", action="store_true")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--configs", type=int, default=100)
    sp.add_argument("--corrupt", action="store_true",
                    help="append the deliberately corrupted negative control")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .training import apply_thread_env

    apply_thread_env(args.deterministic)
    try:
        return args.func(args)
    except OrfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # constructor validation outside our own error types
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
