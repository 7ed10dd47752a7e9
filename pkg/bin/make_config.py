#!/usr/bin/env python3
"""Generate a starter adafilter.yaml with every default filled in."""
from __future__ import annotations

import argparse
import datetime as _dt
import sys
from pathlib import Path

import yaml

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from adafilter_config import ExperimentConfig, config_to_dict, parse_experiment_config  # noqa: E402
from adafilter_errors import ConfigError  # noqa: E402

DEFAULT_CONFIG = "adafilter.yaml"

# Few epochs and small splits: a full run finishes in minutes on a laptop.
QUICK_PRESET = {
    "task": {"source_train_per_class": 30, "target_train_per_class": 10, "target_eval_per_class": 10},
    "pretrain": {"epochs": 4, "decay_epochs": [3]},
    "optimizer": {"epochs": 6, "decay_epochs": [4]},
}


def prompt(prompt_text: str, default: str) -> str:
    if not sys.stdin.isatty():
        return default
    try:
        response = input(f"{prompt_text} [{default}]: ").strip()
    except EOFError:
        return default
    return response or default


def build_config(name: str, strategy: str, quick: bool) -> ExperimentConfig:
    raw: dict = {"name": name, "strategy": strategy}
    if quick:
        raw.update(QUICK_PRESET)
    return parse_experiment_config(raw)


def write_config(path: Path, config: ExperimentConfig) -> None:
    timestamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    body = yaml.dump(config_to_dict(config), default_flow_style=False, sort_keys=False)
    path.write_text(f"# Generated by make_config.py on {timestamp}\n{body}", encoding="utf-8")


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Create a starter AdaFilter experiment config")
    parser.add_argument("--output", default=DEFAULT_CONFIG, help="Destination file (default: adafilter.yaml)")
    parser.add_argument("--force", action="store_true", help="Overwrite the file if it already exists")
    parser.add_argument("--name", default=None, help="Experiment name. Skips the interactive prompt if provided.")
    parser.add_argument("--strategy", default=None, help="Default strategy (adafilter, l2sp, ...)")
    parser.add_argument("--quick", action="store_true", help="Small epochs and splits for smoke runs")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    config_path = Path(args.output)
    if config_path.exists() and not args.force:
        raise SystemExit(f"error: {config_path} already exists. Use --force to overwrite.")

    name = args.name or prompt("Experiment name", "adafilter-desk")
    strategy = args.strategy or prompt("Strategy", "adafilter")
    try:
        config = build_config(name, strategy, args.quick)
    except ConfigError as e:
        raise SystemExit(f"error: {e}")

    write_config(config_path, config)

    print("Wrote", config_path)
    print(f"  name={config.name}")
    print(f"  strategy={config.strategy.name}")
    print(f"  epochs={config.optimizer.epochs} (pretrain {config.pretrain.epochs})")


if __name__ == "__main__":
    main()
