#!/usr/bin/env python3
"""
AdaFilter command-line interface.

    adafilter_cli.py data gen|verify|import ...
    adafilter_cli.py pretrain  [--config FILE] [--seed N] [--out PATH]
    adafilter_cli.py finetune  [--config FILE] [--strategy NAME] [--seed N] [--bn-mode MODE] [--dump-policies]
    adafilter_cli.py compare   [--config FILE] [--strategies a,b] [--seeds 0,1] [--bn-modes m,n] [--out DIR]
    adafilter_cli.py report policies RUN_DIR | curves COMPARE_DIR | run RUN_DIR
    adafilter_cli.py params    [--config FILE] [--bn-mode MODE]

Exit codes: 0 success, 2 invalid configuration, 1 any other failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional

from adafilter_config import apply_thread_limit, configure_logging, load_experiment_config
from adafilter_errors import ConfigError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


def _name_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=None,
                        help="DEBUG, INFO (default, or $ADAFILTER_LOG_LEVEL), WARNING or ERROR")
    common.add_argument("--json", action="store_true", help="Print results as JSON")

    configured = argparse.ArgumentParser(add_help=False, parents=[common])
    configured.add_argument("--config", default=None,
                            help="Experiment YAML (default: $ADAFILTER_CONFIG, then ./adafilter.yaml)")

    parser = argparse.ArgumentParser(
        description="AdaFilter: adaptive per-example filter fine-tuning experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Write a starter config, materialize the task pair and pre-train
  python bin/make_config.py --output adafilter.yaml
  python src/adafilter_cli.py data gen
  python src/adafilter_cli.py pretrain

  # Fine-tune with the gated strategy and keep the raw policies
  python src/adafilter_cli.py finetune --strategy adafilter --dump-policies

  # Compare against the baselines over three seeds
  python src/adafilter_cli.py compare --strategies standard_finetune,l2sp,adafilter --seeds 0,1,2 --out runs/cmp
  python src/adafilter_cli.py report curves runs/cmp

  # Gated BN against standard BN in one comparison
  python src/adafilter_cli.py compare --strategies adafilter --bn-modes gated,standard --out runs/bn
        """,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    data = commands.add_parser("data", help="Generate, verify or import datasets")
    data_commands = data.add_subparsers(dest="data_command", required=True)
    gen = data_commands.add_parser("gen", parents=[configured], help="Materialize the configured task pair")
    gen.add_argument("--seed", type=int, default=None, help="Override task.seed")
    gen.add_argument("--force", action="store_true", help="Regenerate even if the pair exists")
    verify = data_commands.add_parser("verify", parents=[common], help="Check a dataset directory")
    verify.add_argument("dataset_dir")
    verify.add_argument("--no-regenerate", action="store_true", help="Skip the bit-exact regeneration check")
    ingest = data_commands.add_parser("import", parents=[common], help="Import an .npz with images and labels")
    ingest.add_argument("archive")
    ingest.add_argument("--out", required=True, help="Dataset directory to create")
    ingest.add_argument("--name", default=None)
    ingest.add_argument("--eval-fraction", type=float, default=0.2)
    ingest.add_argument("--seed", type=int, default=0)

    pretrain = commands.add_parser("pretrain", parents=[configured], help="Pre-train on the source task")
    pretrain.add_argument("--seed", type=int, default=None, help="Override task.seed (seeds pre-training)")
    pretrain.add_argument("--out", default=None, help="Checkpoint path (default: the task pair cache)")

    finetune = commands.add_parser("finetune", parents=[configured], help="Fine-tune on the target task")
    finetune.add_argument("--strategy", default=None,
                          help="adafilter, standard_finetune, finetune_half, random_policy or l2sp")
    finetune.add_argument("--seed", type=int, default=None)
    finetune.add_argument("--bn-mode", choices=["gated", "standard"], default=None)
    finetune.add_argument("--dump-policies", action="store_true", default=None,
                          help="Write policy_dump.csv with the final-epoch eval policies")
    finetune.add_argument("--out", default=None, help="Run directory (default: <output_dir>/<name>-<strategy>-seed<N>)")

    compare = commands.add_parser("compare", parents=[configured], help="Run several strategies over several seeds")
    compare.add_argument("--strategies", type=_name_list, default=None, help="Comma-separated strategy names")
    compare.add_argument("--seeds", type=_int_list, default=None, help="Comma-separated seeds")
    compare.add_argument("--bn-mode", choices=["gated", "standard"], default=None)
    compare.add_argument("--bn-modes", type=_name_list, default=None,
                         help="Comma-separated BN modes; gated strategies run once per mode (gated,standard)")
    compare.add_argument("--dump-policies", action="store_true", default=None)
    compare.add_argument("--out", default=None, help="Output directory (default: <output_dir>/<name>-compare)")

    report = commands.add_parser("report", help="Reports over finished runs")
    report_commands = report.add_subparsers(dest="report_command", required=True)
    policies = report_commands.add_parser("policies", parents=[common], help="Per-layer fine-tune fractions")
    policies.add_argument("run_dir")
    policies.add_argument("--out", default=None)
    curves = report_commands.add_parser("curves", parents=[common], help="Eval accuracy per epoch per strategy")
    curves.add_argument("compare_dir")
    curves.add_argument("--out", default=None)
    run = report_commands.add_parser("run", parents=[common], help="Status and final metrics of a run")
    run.add_argument("run_dir")

    params = commands.add_parser("params", parents=[configured], help="Parameter accounting")
    params.add_argument("--bn-mode", choices=["gated", "standard"], default=None)
    return parser


def _emit(payload: Any, text: str, as_json: bool) -> None:
    print(json.dumps(payload, indent=2, default=str) if as_json else text)


def _task_seed_override(config, seed: Optional[int]):
    if seed is None:
        return config
    return config.model_copy(update={"task": config.task.model_copy(update={"seed": seed})})


def dispatch(args: argparse.Namespace) -> None:
    # numpy-backed modules load only after apply_thread_limit() has run
    import adafilter_tools as tools
    from adafilter_data import ingest_npz, verify_dataset
    from adafilter_report import describe_run, export_accuracy_curves, export_policy_histogram, read_csv_rows

    if args.command == "data":
        if args.data_command == "gen":
            config = _task_seed_override(tools.load_config(args.config), args.seed)
            pair = tools.generate_task_pair(config, force=args.force)
            _emit(pair.model_dump(mode="json"), f"Task pair ready at {pair.path or 'ingested paths'}", args.json)
        elif args.data_command == "verify":
            report = verify_dataset(args.dataset_dir, regenerate=not args.no_regenerate)
            _emit(report.model_dump(), report.format(), args.json)
            if not report.ok:
                raise SystemExit(EXIT_FAILURE)
        else:
            manifest = ingest_npz(args.archive, args.out, args.name, args.eval_fraction, args.seed)
            _emit(manifest.model_dump(mode="json"),
                  f"Imported '{manifest.name}' into {args.out}: "
                  + ", ".join(f"{s} {i.count}" for s, i in manifest.splits.items()), args.json)
    elif args.command == "pretrain":
        config = _task_seed_override(tools.load_config(args.config), args.seed)
        checkpoint, path = tools.ensure_pretrained(config, out=Path(args.out) if args.out else None)
        _emit({"checkpoint": str(path), "metadata": checkpoint.metadata},
              f"Pre-trained checkpoint: {path} (source eval accuracy {checkpoint.metadata.get('eval_accuracy')})",
              args.json)
    elif args.command == "finetune":
        config = tools.load_config(args.config, seed=args.seed, strategy=args.strategy, bn_mode=args.bn_mode,
                                   dump_policies=args.dump_policies)
        summary = tools.execute_run(config, Path(args.out) if args.out else None)
        _emit(summary.to_dict(), summary.format(), args.json)
    elif args.command == "compare":
        overrides = tools.build_overrides(bn_mode=args.bn_mode, dump_policies=args.dump_policies)
        if args.strategies:
            overrides["compare.strategies"] = args.strategies
        if args.seeds:
            overrides["compare.seeds"] = args.seeds
        if args.bn_modes:
            overrides["compare.bn_modes"] = args.bn_modes
        config = load_experiment_config(args.config, overrides)
        result = tools.execute_compare(config, Path(args.out) if args.out else None)
        _emit(result, f"Comparison written to {result['compare_dir']}", args.json)
    elif args.command == "report":
        if args.report_command == "policies":
            path = export_policy_histogram(args.run_dir, args.out)
            rows = read_csv_rows(path)
            _emit({"path": str(path), "fractions": [float(f) for _, f in rows]},
                  "\n".join([f"Policy histogram: {path}"] + [f"  layer {l}: {float(f):.3f}" for l, f in rows]),
                  args.json)
        elif args.report_command == "curves":
            path = export_accuracy_curves(args.compare_dir, args.out)
            _emit({"path": str(path)}, f"Accuracy curves: {path}", args.json)
        else:
            info = describe_run(args.run_dir)
            _emit(info, json.dumps(info, indent=2, default=str), args.json)
    elif args.command == "params":
        report = tools.execute_parameter_report(tools.load_config(args.config, bn_mode=args.bn_mode))
        _emit(report.to_dict(), report.format(), args.json)


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.log_level)
        apply_thread_limit()
        dispatch(args)
    except SystemExit as e:
        return int(e.code or 0)
    except KeyboardInterrupt:
        print("\n\nOperation cancelled by user.", file=sys.stderr)
        return EXIT_FAILURE
    except ConfigError as e:
        from adafilter_tools import format_error_message

        print(format_error_message(e), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        from adafilter_tools import format_error_message

        print(format_error_message(e, f"running '{args.command}'"), file=sys.stderr)
        logger.debug("Traceback:", exc_info=True)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
