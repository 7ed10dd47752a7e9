"""
CSV artifacts of a run directory and the reports built from them.

Every CSV starts with a schema line ("# schema: adafilter.<kind>/1") and is
rewritten in full; readers skip lines starting with '#'.

Run directory layout:

    config.resolved     fully resolved ExperimentConfig (YAML)
    metrics.csv         epoch, split, loss, accuracy
    policies.csv        epoch, layer, finetune_fraction       (gated strategies)
    policy_dump.csv     layer_index, example_id, channel_index, bit (--dump-policies)
    checkpoint.bin      final parameters and buffers
    DONE | ERROR        completion marker (ERROR holds the message and traceback)
"""

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from adafilter_config import load_resolved_config
from adafilter_errors import ReportError
from adafilter_gate import POLICY_DUMP_HEADER, policy_stats

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CONFIG_FILE = "config.resolved"
METRICS_FILE = "metrics.csv"
POLICIES_FILE = "policies.csv"
POLICY_DUMP_FILE = "policy_dump.csv"
CHECKPOINT_FILE = "checkpoint.bin"
HISTOGRAM_FILE = "policy_histogram.csv"
CURVES_FILE = "curves.csv"
DONE_MARKER = "DONE"
ERROR_MARKER = "ERROR"

METRICS_HEADER = ["epoch", "split", "loss", "accuracy"]
POLICIES_HEADER = ["epoch", "layer", "finetune_fraction"]
HISTOGRAM_HEADER = ["layer_index", "finetune_fraction"]
CURVES_HEADER = ["strategy", "seed", "epoch", "eval_accuracy"]


# ============================================================================
# CSV I/O
# ============================================================================

def _cell(value) -> str:
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def write_csv(path: Union[str, Path], kind: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Rewrite path with a schema line, the header and rows."""
    path = Path(path)
    buffer = io.StringIO()
    buffer.write(f"# schema: adafilter.{kind}/{SCHEMA_VERSION}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(buffer.getvalue())
    tmp.replace(path)
    return path


def read_schema(path: Union[str, Path]) -> Optional[str]:
    with open(path) as handle:
        first = handle.readline().strip()
    if first.startswith("# schema:"):
        return first.split(":", 1)[1].strip()
    return None


def read_csv_rows(path: Union[str, Path], expected_header: Optional[Sequence[str]] = None) -> list[list[str]]:
    """Data rows of a report CSV (comment lines and header removed)."""
    path = Path(path)
    if not path.is_file():
        raise ReportError(f"Report file not found: {path}")
    with open(path, newline="") as handle:
        lines = [line for line in handle if not line.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise ReportError(f"{path} has no header row")
    header, data = rows[0], rows[1:]
    if expected_header is not None and header != list(expected_header):
        raise ReportError(f"{path} has columns {header}, expected {list(expected_header)}")
    return data


def write_metrics(path: Union[str, Path], rows: Iterable[Sequence]) -> Path:
    return write_csv(path, "metrics", METRICS_HEADER, rows)


def write_policies(path: Union[str, Path], rows: Iterable[Sequence]) -> Path:
    return write_csv(path, "policies", POLICIES_HEADER, rows)


def write_policy_dump(path: Union[str, Path], rows: Iterable[Sequence]) -> Path:
    return write_csv(path, "policy_dump", POLICY_DUMP_HEADER, rows)


def read_metrics(path: Union[str, Path]) -> list[tuple[int, str, float, float]]:
    return [(int(e), s, float(l), float(a)) for e, s, l, a in read_csv_rows(path, METRICS_HEADER)]


def read_policy_dump(path: Union[str, Path]) -> dict[int, np.ndarray]:
    """Rebuild per-layer [N, C] bit arrays from a policy dump."""
    cells: dict[int, list[tuple[int, int, int]]] = {}
    for row in read_csv_rows(path, POLICY_DUMP_HEADER):
        layer, example, channel, bit = (int(v) for v in row)
        cells.setdefault(layer, []).append((example, channel, bit))
    arrays = {}
    for layer, entries in cells.items():
        n = max(e for e, _, _ in entries) + 1
        c = max(ch for _, ch, _ in entries) + 1
        bits = np.zeros((n, c))
        for example, channel, bit in entries:
            bits[example, channel] = bit
        arrays[layer] = bits
    return arrays


# ============================================================================
# Reports
# ============================================================================

@dataclass
class PolicyReport:
    """Per-layer fine-tune fractions and per-strategy eval accuracy series."""
    fractions: list[float] = field(default_factory=list)
    curves: dict[str, dict[int, list[float]]] = field(default_factory=dict)

    def epochs(self) -> Optional[int]:
        lengths = {len(series) for per_seed in self.curves.values() for series in per_seed.values()}
        return lengths.pop() if len(lengths) == 1 else None


def _run_strategy(run_dir: Path) -> tuple[str, bool]:
    config_path = run_dir / CONFIG_FILE
    if not config_path.is_file():
        raise ReportError(f"{run_dir} is not a run directory (no {CONFIG_FILE})")
    config = load_resolved_config(config_path)
    if config.strategy is None:
        raise ReportError(f"{config_path} names no strategy; it was not written by a run")
    return config.strategy.name, config.strategy.gated


def policy_histogram(run_dir: Union[str, Path]) -> list[float]:
    """Per-layer fine-tune fractions over the final-epoch eval set, recounted from the raw dump."""
    run_dir = Path(run_dir)
    strategy, gated = _run_strategy(run_dir)
    if not gated:
        raise ReportError(
            f"Run {run_dir} used strategy '{strategy}', which has no fine-tuning policies. "
            "Policy histograms need a gated strategy (adafilter or random_policy)."
        )
    dump = run_dir / POLICY_DUMP_FILE
    if not dump.is_file():
        raise ReportError(f"Run {run_dir} has no {POLICY_DUMP_FILE}; re-run with --dump-policies")
    layers = read_policy_dump(dump)
    return policy_stats([layers[i] for i in sorted(layers)])


def export_policy_histogram(run_dir: Union[str, Path], out: Optional[Union[str, Path]] = None) -> Path:
    """Write one (layer_index, finetune_fraction) row per gated layer."""
    run_dir = Path(run_dir)
    fractions = policy_histogram(run_dir)
    path = Path(out) if out else run_dir / HISTOGRAM_FILE
    write_csv(path, "policy_histogram", HISTOGRAM_HEADER, list(enumerate(fractions)))
    logger.info(f"Wrote policy histogram for {len(fractions)} gated layers to {path}")
    return path


def collect_curves(compare_dir: Union[str, Path]) -> dict[str, dict[int, list[float]]]:
    """Eval accuracy series from <compare_dir>/<label>/seed_<s>/metrics.csv, keyed by arm label."""
    compare_dir = Path(compare_dir)
    curves: dict[str, dict[int, list[float]]] = {}
    for metrics_path in sorted(compare_dir.glob(f"*/seed_*/{METRICS_FILE}")):
        strategy = metrics_path.parent.parent.name
        seed = int(metrics_path.parent.name.split("_", 1)[1])
        rows = [r for r in read_metrics(metrics_path) if r[1] == "eval"]
        curves.setdefault(strategy, {})[seed] = [accuracy for _, _, _, accuracy in sorted(rows)]
    if not curves:
        raise ReportError(f"No <strategy>/seed_<n>/{METRICS_FILE} files under {compare_dir}")
    return curves


def export_accuracy_curves(compare_dir: Union[str, Path], out: Optional[Union[str, Path]] = None) -> Path:
    """curves.csv with (strategy, seed, epoch, eval_accuracy); every series must share one epoch grid."""
    compare_dir = Path(compare_dir)
    report = PolicyReport(curves=collect_curves(compare_dir))
    if report.epochs() is None:
        lengths = {f"{s}/seed_{seed}": len(v) for s, per in report.curves.items() for seed, v in per.items()}
        raise ReportError(f"Accuracy series have unequal epoch grids: {lengths}")
    rows = [(strategy, seed, epoch + 1, accuracy)
            for strategy in sorted(report.curves)
            for seed in sorted(report.curves[strategy])
            for epoch, accuracy in enumerate(report.curves[strategy][seed])]
    path = Path(out) if out else compare_dir / CURVES_FILE
    write_csv(path, "curves", CURVES_HEADER, rows)
    logger.info(f"Wrote {len(rows)} curve points for {len(report.curves)} strategies to {path}")
    return path


def describe_run(run_dir: Union[str, Path]) -> dict:
    """Status (done/error/incomplete), strategy, final metrics and artifact list of a run directory."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"Run directory not found: {run_dir}")
    if (run_dir / DONE_MARKER).is_file():
        status = "done"
    elif (run_dir / ERROR_MARKER).is_file():
        status = "error"
    else:
        status = "incomplete"
    info: dict = {
        "run_dir": str(run_dir),
        "status": status,
        "artifacts": sorted(p.name for p in run_dir.iterdir() if p.is_file()),
    }
    if (run_dir / CONFIG_FILE).is_file():
        info["strategy"], info["gated"] = _run_strategy(run_dir)
    if (run_dir / METRICS_FILE).is_file():
        metrics = read_metrics(run_dir / METRICS_FILE)
        info["epochs"] = max((e for e, *_ in metrics), default=0)
        final = {split: (loss, acc) for _, split, loss, acc in metrics}
        info["final"] = {split: {"loss": loss, "accuracy": acc} for split, (loss, acc) in final.items()}
    if status == "error":
        info["error"] = (run_dir / ERROR_MARKER).read_text().splitlines()[0:1]
    return info
