"""
Shared operation implementations for AdaFilter.

This module holds the run orchestration used by both front ends:
- Command-line interface (adafilter_cli.py)
- MCP tool server (adafilter_mcp_server.py)

The synchronous execute_* functions raise AdaFilterError subclasses; the
async tool functions wrap them, run the numerical work in a worker thread
and always return a string (text or JSON), turning failures into
actionable messages with format_error_message().
"""

import asyncio
import json
import logging
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np

from adafilter_checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from adafilter_config import ExperimentConfig, dump_resolved_config, load_experiment_config, stable_hash
from adafilter_data import (TransferTaskPair, load_dataset, pair_directory, resolve_task_pair,
                            synth_task_generate, verify_dataset)
from adafilter_errors import (AdaFilterError, CheckpointError, ConfigError, DatasetError, GraphError,
                              NonFiniteLossError, ReportError, ShapeError, StrategyError)
from adafilter_gate import policy_dump_rows
from adafilter_gated import init_from_pretrained, parameter_report
from adafilter_layers import build_backbone
from adafilter_report import (CHECKPOINT_FILE, CONFIG_FILE, DONE_MARKER, ERROR_MARKER, METRICS_FILE,
                              POLICIES_FILE, POLICY_DUMP_FILE, describe_run, export_accuracy_curves,
                              export_policy_histogram, read_csv_rows, write_metrics, write_policies,
                              write_policy_dump)
from adafilter_training import KNOWN_STRATEGIES, evaluate, pretrain_run, train_run

logger = logging.getLogger(__name__)

# ============================================================================
# Constants
# ============================================================================

CHARACTER_LIMIT = 25000
BANNER = "=" * 70

OutputFormat = Literal["text", "json"]


# ============================================================================
# Utility Functions
# ============================================================================

def truncate_response(content: str, max_length: int = CHARACTER_LIMIT) -> str:
    """Truncate response content to stay within character limits."""
    if len(content) <= max_length:
        return content
    truncated = content[:max_length - 100]
    return f"{truncated}\n\n... (truncated, {len(content) - max_length} characters omitted)"


def format_error_message(error: Exception, context: str = "") -> str:
    """Format error messages in an actionable way, with a suggestion per error class."""
    where = f" while {context}" if context else ""
    suggestion = ""
    detail = str(error)
    if isinstance(error, ConfigError):
        label = "Configuration Error"
        if error.fields:
            detail = "\n".join(f"  - {line}" for line in error.fields)
            detail = f"{str(error).splitlines()[0]}\n{detail}"
        suggestion = ("Fix the listed fields in the experiment YAML. "
                      "bin/make_config.py writes a starter file with every default filled in.")
    elif isinstance(error, DatasetError):
        label = "Dataset Error"
        suggestion = "Regenerate the task pair with 'data gen', or inspect the directory with 'data verify'."
    elif isinstance(error, CheckpointError):
        label = "Checkpoint Error"
        suggestion = ("Delete the cached checkpoint and run 'pretrain' again, or check that backbone "
                      "descriptors match the ones the checkpoint was trained with.")
    elif isinstance(error, NonFiniteLossError):
        label = "Training Diverged"
        suggestion = (f"The first non-finite value came from '{error.op_name}'. Lower optimizer.lr or "
                      "optimizer.gate_lr, or set precision: float64.")
    elif isinstance(error, StrategyError):
        label = "Strategy Error"
        suggestion = f"Use one of: {', '.join(KNOWN_STRATEGIES)}."
    elif isinstance(error, ReportError):
        label = "Report Error"
        suggestion = ("Policy reports need a gated strategy run with dump_policies enabled; "
                      "curves need a 'compare' output directory.")
    elif isinstance(error, ShapeError):
        label = "Shape Error"
        suggestion = "Check that the backbone descriptors agree with task.image_size and task.channels."
    elif isinstance(error, GraphError):
        label = "Computation Error"
        suggestion = "A trainable parameter was cut off from the loss; check which units are frozen or gated."
    elif isinstance(error, AdaFilterError):
        label = "AdaFilter Error"
    else:
        return f"Error{' ' + context if context else ''}: {error}"

    result = f"{label}{where}: {detail}"
    if suggestion:
        result += f"\n\nSuggestion: {suggestion}"
    return result


def build_overrides(seed: Optional[int] = None, output_dir: Optional[str] = None, strategy: Optional[str] = None,
                    bn_mode: Optional[str] = None, dump_policies: Optional[bool] = None) -> dict[str, Any]:
    """Dotted config overrides shared by the CLI flags and tool arguments (None means keep)."""
    overrides = {
        "seed": seed,
        "output_dir": output_dir,
        "strategy.name": strategy,
        "bn_mode": bn_mode,
        "dump_policies": dump_policies,
    }
    return {key: value for key, value in overrides.items() if value is not None}


def load_config(config_path: Optional[str] = None, **overrides: Any) -> ExperimentConfig:
    return load_experiment_config(config_path, build_overrides(**overrides))


# ============================================================================
# Run orchestration
# ============================================================================

@dataclass
class RunSummary:
    run_dir: str
    strategy: str
    seed: int
    epochs: int
    final_train_accuracy: Optional[float] = None
    final_eval_accuracy: Optional[float] = None
    first_eval_accuracy: Optional[float] = None
    fractions: list[float] = field(default_factory=list)
    checkpoint: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        lines = [f"Run '{self.strategy}' (seed {self.seed}) finished: {self.run_dir}",
                 f"  epochs: {self.epochs}"]
        if self.final_eval_accuracy is not None:
            lines.append(f"  eval accuracy: first epoch {self.first_eval_accuracy:.4f}, "
                         f"final {self.final_eval_accuracy:.4f}")
        if self.final_train_accuracy is not None:
            lines.append(f"  final train accuracy: {self.final_train_accuracy:.4f}")
        if self.fractions:
            lines.append("  finetune fraction per layer: " + " ".join(f"{f:.3f}" for f in self.fractions))
        lines.append(f"  checkpoint: {self.checkpoint}")
        return "\n".join(lines)


def run_directory(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / f"{config.name}-{config.strategy.name}-seed{config.seed}"


def _dtype(config: ExperimentConfig):
    return np.dtype(config.precision).type


def generate_task_pair(config: ExperimentConfig, force: bool = False) -> TransferTaskPair:
    """Materialize (or reuse) the configured task pair."""
    if force and not (config.task.source_path or config.task.target_path):
        return synth_task_generate(config.task.seed, config.task, pair_directory(config.task))
    return resolve_task_pair(config.task)


def pretrained_cache_path(config: ExperimentConfig, pair: TransferTaskPair) -> Path:
    base = Path(pair.path) if pair.path else Path(config.task.data_dir)
    key = stable_hash(config.backbone, config.pretrain.model_dump(mode="json", exclude={"checkpoint"}),
                      config.precision, pair.source.splits["train"].sha256)
    return base / f"pretrained-{key}.bin"


def ensure_pretrained(config: ExperimentConfig, pair: Optional[TransferTaskPair] = None,
                      out: Optional[Path] = None) -> tuple[Checkpoint, Path]:
    """
    The source-task checkpoint: config.pretrain.checkpoint when set, else the
    cached pre-training result for this backbone/task, training it if missing.
    """
    if config.pretrain.checkpoint and out is None:
        path = Path(config.pretrain.checkpoint)
        return load_checkpoint(path), path
    pair = pair or resolve_task_pair(config.task)
    path = out or pretrained_cache_path(config, pair)
    if path.is_file() and out is None:
        logger.info(f"Using cached pre-trained checkpoint: {path}")
        return load_checkpoint(path), path

    dtype = _dtype(config)
    settings = config.pretrain
    train = load_dataset(pair.source, "train", settings.batch_size, seed=config.task.seed,
                         flip=config.augment.flip, crop_padding=config.augment.crop_padding,
                         prefetch=config.prefetch, dtype=dtype)
    evaluation = load_dataset(pair.source, "eval", settings.batch_size, seed=config.task.seed, dtype=dtype)
    result = pretrain_run(config, train, evaluation)
    final = result.final_eval.accuracy if result.final_eval else None
    save_checkpoint(path, result.model.state_dict(), {
        "kind": "pretrained",
        "source": pair.source.name,
        "num_classes": pair.source.num_classes,
        "epochs": settings.epochs,
        "eval_accuracy": final,
    })
    logger.info(f"Saved pre-trained checkpoint to {path} (source eval accuracy {final})")
    return load_checkpoint(path), path


def execute_run(config: ExperimentConfig, run_dir: Optional[Path] = None) -> RunSummary:
    """
    Pretrain if missing, fine-tune with config.strategy and write the run directory.

    On failure the partial artifacts stay and an ERROR marker records the
    message and traceback; the exception is re-raised.
    """
    config.require_strategy()
    run_dir = Path(run_dir) if run_dir else run_directory(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    for marker in (DONE_MARKER, ERROR_MARKER):
        (run_dir / marker).unlink(missing_ok=True)
    dump_resolved_config(config, run_dir / CONFIG_FILE)

    logger.info(BANNER)
    logger.info(f"Run '{config.name}': strategy {config.strategy.name}, seed {config.seed}")
    logger.info(f"Run directory: {run_dir}")
    logger.info(BANNER)
    try:
        pair = resolve_task_pair(config.task)
        pretrained, _ = ensure_pretrained(config, pair)
        dtype = _dtype(config)
        batch = config.optimizer.batch_size
        train = load_dataset(pair.target, "train", batch, seed=config.seed, flip=config.augment.flip,
                             crop_padding=config.augment.crop_padding, prefetch=config.prefetch, dtype=dtype)
        evaluation = load_dataset(pair.target, "eval", batch, seed=config.seed, dtype=dtype)
        result = train_run(config, pretrained, train, evaluation)

        write_metrics(run_dir / METRICS_FILE, result.metrics)
        write_policies(run_dir / POLICIES_FILE, result.policies)
        final_eval = result.final_eval
        if config.dump_policies and config.strategy.gated:
            if final_eval is None or final_eval.policy_bits is None:
                final_eval = evaluate(result.model, evaluation.epoch_fixed(), keep_policies=True, dtype=dtype)
            write_policy_dump(run_dir / POLICY_DUMP_FILE, policy_dump_rows(final_eval.policy_bits))
        checkpoint = save_checkpoint(run_dir / CHECKPOINT_FILE, result.model.state_dict(), {
            "kind": "finetuned",
            "strategy": config.strategy.name,
            "seed": config.seed,
            "epochs": config.optimizer.epochs,
            "config_hash": stable_hash(config),
        })
        evals = [row for row in result.metrics if row[1] == "eval"]
        trains = [row for row in result.metrics if row[1] == "train"]
        summary = RunSummary(
            run_dir=str(run_dir),
            strategy=config.strategy.name,
            seed=config.seed,
            epochs=config.optimizer.epochs,
            final_train_accuracy=trains[-1][3] if trains else None,
            final_eval_accuracy=evals[-1][3] if evals else None,
            first_eval_accuracy=evals[0][3] if evals else None,
            fractions=result.final_eval.fractions if result.final_eval else [],
            checkpoint=str(checkpoint),
        )
        (run_dir / DONE_MARKER).write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    except Exception as e:
        (run_dir / ERROR_MARKER).write_text(f"{type(e).__name__}: {e}\n\n{traceback.format_exc()}")
        logger.error(f"Run failed; partial artifacts kept in {run_dir}")
        raise
    logger.info(BANNER)
    logger.info(summary.format())
    logger.info(BANNER)
    return summary


def execute_compare(config: ExperimentConfig, out_dir: Optional[Path] = None) -> dict[str, Any]:
    """
    Run every compared arm over every seed, sequentially, into
    <out>/<label>/seed_<s>/, then write <out>/curves.csv.

    The label is the strategy name, or <strategy>-<bn_mode> when
    compare.bn_modes splits gated strategies by BN mode.
    """
    out_dir = Path(out_dir) if out_dir else Path(config.output_dir) / f"{config.name}-compare"
    out_dir.mkdir(parents=True, exist_ok=True)
    runs: dict[str, dict[int, dict]] = {}
    for label, strategy, bn_mode in config.compare.variants(config.bn_mode):
        for seed in config.compare.seeds:
            run_config = config.model_copy(update={"strategy": strategy, "seed": seed, "bn_mode": bn_mode})
            summary = execute_run(run_config, out_dir / label / f"seed_{seed}")
            runs.setdefault(label, {})[seed] = summary.to_dict()
    curves = export_accuracy_curves(out_dir)
    return {"compare_dir": str(out_dir), "curves": str(curves), "runs": runs}


def execute_parameter_report(config: ExperimentConfig):
    """Parameter accounting of the configured backbone against its gated counterpart."""
    dtype = _dtype(config)
    pretrained = build_backbone(config.backbone, config.seed, dtype)
    gated = init_from_pretrained(pretrained.state_dict(), config.backbone, config.gate, config.bn_mode,
                                 config.bn_statistics, config.seed, policy="gate", dtype=dtype)
    return parameter_report(pretrained, gated)


# ============================================================================
# Tool functions (always return strings)
# ============================================================================

def _render(payload: Any, text: str, format: OutputFormat) -> str:
    if format == "json":
        return json.dumps(payload, indent=2, default=str)
    return truncate_response(text)


async def generate_task_data(
    config_path: Optional[str] = None,
    seed: Optional[int] = None,
    force: bool = False,
    format: OutputFormat = "text",
) -> str:
    """
    Materialize the source/target task pair described by an experiment config.

    Synthetic pairs are cached under task.data_dir keyed by their shift
    descriptor, so calling this twice reuses the first result unless
    force=True regenerates it.

    Args:
        config_path: Experiment YAML. Defaults to $ADAFILTER_CONFIG, then ./adafilter.yaml.
        seed: Overrides task.seed (the generator seed).
        force: Regenerate even if the pair already exists.
        format: 'text' (default) or 'json'.

    Returns:
        Paths and split sizes of both datasets.

    Examples:
        - generate_task_data()
        - generate_task_data(config_path="exp/overlap06.yaml", seed=3, format="json")
    """
    try:
        config = load_config(config_path)
        if seed is not None:
            config = config.model_copy(update={"task": config.task.model_copy(update={"seed": seed})})
        pair = await asyncio.to_thread(generate_task_pair, config, force)
        payload = {
            "pair_dir": pair.path,
            "shift": pair.shift,
            "source": {k: v.count for k, v in pair.source.splits.items()},
            "target": {k: v.count for k, v in pair.target.splits.items()},
        }
        text = (f"Task pair ready at {pair.path}\n"
                f"  source: {payload['source']} ({pair.source.num_classes} classes)\n"
                f"  target: {payload['target']} ({pair.target.num_classes} classes)\n"
                f"  overlap: {pair.shift.get('overlap')}")
        return _render(payload, text, format)
    except Exception as e:
        return format_error_message(e, "generating task data")


async def verify_task_data(dataset_dir: str, regenerate: bool = True, format: OutputFormat = "text") -> str:
    """
    Check a dataset directory: checksums, sizes, per-class counts, train/eval
    disjointness and, for synthetic data, bit-exact regeneration from its seed.

    Args:
        dataset_dir: Directory containing manifest.json (e.g. data/pair-<hash>/target).
        regenerate: Also regenerate synthetic splits and compare content hashes.
        format: 'text' (default) or 'json'.
    """
    try:
        report = await asyncio.to_thread(verify_dataset, dataset_dir, regenerate)
        return _render(report.model_dump(), report.format(), format)
    except Exception as e:
        return format_error_message(e, f"verifying dataset {dataset_dir}")


async def pretrain_source_model(config_path: Optional[str] = None, output: Optional[str] = None,
                                format: OutputFormat = "text") -> str:
    """
    Pre-train the backbone on the source task and save the checkpoint.

    Without output the checkpoint goes to the task pair's cache, where
    run_experiment picks it up automatically.

    Args:
        config_path: Experiment YAML.
        output: Explicit checkpoint path (forces retraining).
        format: 'text' (default) or 'json'.
    """
    try:
        config = load_config(config_path)
        checkpoint, path = await asyncio.to_thread(ensure_pretrained, config, None, Path(output) if output else None)
        payload = {"checkpoint": str(path), "metadata": checkpoint.metadata, "entries": len(checkpoint.tensors)}
        text = (f"Pre-trained checkpoint: {path}\n"
                f"  entries: {len(checkpoint.tensors)}\n"
                f"  source eval accuracy: {checkpoint.metadata.get('eval_accuracy')}")
        return _render(payload, text, format)
    except Exception as e:
        return format_error_message(e, "pre-training the source model")


async def run_experiment(
    config_path: Optional[str] = None,
    strategy: Optional[str] = None,
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
    bn_mode: Optional[Literal["gated", "standard"]] = None,
    dump_policies: Optional[bool] = None,
    format: OutputFormat = "text",
) -> str:
    """
    Run one transfer experiment: pretrain if missing, fine-tune, write reports.

    The run directory holds config.resolved, metrics.csv, policies.csv,
    checkpoint.bin and a DONE (or ERROR) marker.

    Args:
        config_path: Experiment YAML.
        strategy: Overrides strategy.name (adafilter, standard_finetune, finetune_half, random_policy, l2sp).
        seed: Overrides the run seed.
        output_dir: Overrides output_dir.
        bn_mode: 'gated' (two BNs) or 'standard' (one BN) for gated strategies.
        dump_policies: Write policy_dump.csv with the final-epoch eval policies.
        format: 'text' (default) or 'json'.

    Error Handling:
        - Invalid configs return field-level diagnostics.
        - Mid-run failures leave partial artifacts and an ERROR marker.
    """
    try:
        config = load_config(config_path, seed=seed, output_dir=output_dir, strategy=strategy,
                             bn_mode=bn_mode, dump_policies=dump_policies)
        summary = await asyncio.to_thread(execute_run, config)
        return _render(summary.to_dict(), summary.format(), format)
    except Exception as e:
        return format_error_message(e, "running the experiment")


async def compare_strategies(
    config_path: Optional[str] = None,
    strategies: Optional[list[str]] = None,
    seeds: Optional[list[int]] = None,
    output_dir: Optional[str] = None,
    bn_modes: Optional[list[str]] = None,
    format: OutputFormat = "text",
) -> str:
    """
    Run several strategies over several seeds (sequentially) and write curves.csv.

    Args:
        config_path: Experiment YAML (compare.strategies / compare.seeds are the defaults).
        strategies: Strategy names to compare, e.g. ["standard_finetune", "adafilter"].
        seeds: Seeds to run for every strategy.
        output_dir: Directory for <label>/seed_<s>/ runs and curves.csv.
        bn_modes: e.g. ["gated", "standard"] to run each gated strategy under both
            BN modes; runs are labelled <strategy>-<bn_mode>.
        format: 'text' (default) or 'json'.
    """
    try:
        overrides: dict[str, Any] = {}
        if strategies:
            overrides["compare.strategies"] = strategies
        if seeds:
            overrides["compare.seeds"] = seeds
        if bn_modes:
            overrides["compare.bn_modes"] = bn_modes
        config = load_experiment_config(config_path, overrides)
        result = await asyncio.to_thread(execute_compare, config, Path(output_dir) if output_dir else None)
        lines = [f"Comparison written to {result['compare_dir']} (curves: {result['curves']})"]
        for name, per_seed in result["runs"].items():
            finals = [r["final_eval_accuracy"] for r in per_seed.values() if r["final_eval_accuracy"] is not None]
            mean = sum(finals) / len(finals) if finals else float("nan")
            lines.append(f"  {name}: mean final eval accuracy {mean:.4f} over {len(per_seed)} seed(s)")
        return _render(result, "\n".join(lines), format)
    except Exception as e:
        return format_error_message(e, "comparing strategies")


async def export_policy_histogram_tool(run_dir: str, format: OutputFormat = "text") -> str:
    """
    Write policy_histogram.csv (layer_index, finetune_fraction) for a gated run
    that was started with dump_policies enabled.

    Args:
        run_dir: Run directory of an adafilter or random_policy run.
        format: 'text' (default) or 'json'.
    """
    try:
        path = await asyncio.to_thread(export_policy_histogram, run_dir)
        rows = [(int(layer), float(fraction)) for layer, fraction in read_csv_rows(path)]
        text = f"Policy histogram: {path}\n" + "\n".join(f"  layer {l}: {f:.3f}" for l, f in rows)
        return _render({"path": str(path), "fractions": [f for _, f in rows]}, text, format)
    except Exception as e:
        return format_error_message(e, f"exporting the policy histogram of {run_dir}")


async def export_accuracy_curves_tool(compare_dir: str, format: OutputFormat = "text") -> str:
    """
    Write curves.csv (strategy, seed, epoch, eval_accuracy) for a compare directory.

    Args:
        compare_dir: Output directory of compare_strategies.
        format: 'text' (default) or 'json'.
    """
    try:
        path = await asyncio.to_thread(export_accuracy_curves, compare_dir)
        rows = read_csv_rows(path)
        strategies = sorted({strategy for strategy, *_ in rows})
        epochs = max((int(epoch) for _, _, epoch, _ in rows), default=0)
        payload = {"path": str(path), "points": len(rows), "strategies": strategies, "epochs": epochs}
        return _render(payload, f"Accuracy curves: {path} ({len(rows)} points, {epochs} epochs, "
                                f"strategies {', '.join(strategies)})", format)
    except Exception as e:
        return format_error_message(e, f"exporting accuracy curves of {compare_dir}")


async def describe_run_tool(run_dir: str, format: OutputFormat = "text") -> str:
    """
    Summarize a run directory: status (done/error/incomplete), strategy, final metrics, artifacts.

    Args:
        run_dir: Run directory.
        format: 'text' (default) or 'json'.
    """
    try:
        info = await asyncio.to_thread(describe_run, run_dir)
        lines = [f"Run {info['run_dir']}: {info['status']}"]
        if "strategy" in info:
            lines.append(f"  strategy: {info['strategy']}")
        for split, values in info.get("final", {}).items():
            lines.append(f"  final {split}: loss {values['loss']:.4f}, accuracy {values['accuracy']:.4f}")
        if info.get("error"):
            lines.append(f"  error: {info['error'][0]}")
        lines.append(f"  artifacts: {', '.join(info['artifacts'])}")
        return _render(info, "\n".join(lines), format)
    except Exception as e:
        return format_error_message(e, f"describing run {run_dir}")


async def parameter_report_tool(config_path: Optional[str] = None, bn_mode: Optional[str] = None,
                                format: OutputFormat = "text") -> str:
    """
    Closed-form parameter accounting: baseline conv+BN vs gated conv+BN (always
    2x in gated BN mode), gate network size and total ratio.

    Args:
        config_path: Experiment YAML (backbone, gate and bn_mode are used).
        bn_mode: Overrides bn_mode.
        format: 'text' (default) or 'json'.
    """
    try:
        config = load_config(config_path, bn_mode=bn_mode)
        report = await asyncio.to_thread(execute_parameter_report, config)
        return _render(report.to_dict(), report.format(), format)
    except Exception as e:
        return format_error_message(e, "computing the parameter report")
