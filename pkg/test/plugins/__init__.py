"""
AdaFilter Test Plugin System

Plugins are Python modules that test one operation family each.
Each plugin inherits from TestPlugin and implements the async test() method.

test() receives an MCP client session bound to the AdaFilter tool server
(in memory). Library-level plugins ignore it and call the modules directly.
"""

import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Tuple
import re

import yaml

SRC_DIR = Path(__file__).resolve().parent.parent.parent / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))


# Shared state for passing data between tests
shared_test_state = {
    "workdir": None,         # Scratch directory, set by the runner
    "tiny_config": None,     # Config written by TinyConfigTest
    "tiny_run_dir": None,    # Run directory produced by RunExperimentToolTest
}


@dataclass
class TestResult:
    """Result of a test plugin execution."""
    __test__ = False

    plugin_name: str
    operation: str
    passed: bool
    message: str
    error: Optional[str] = None
    duration_ms: Optional[float] = None


def slow_tests_enabled() -> bool:
    return os.getenv("ADAFILTER_SLOW_TESTS", "").lower() in ("1", "true", "yes")


def check_for_operational_error(response_text: str) -> Tuple[bool, Optional[str]]:
    """
    Check if a tool response contains an error.

    Tools never raise to the client; failures come back as text starting
    with an error label produced by format_error_message().

    Returns:
        Tuple of (is_error, error_message)
    """
    error_patterns = [
        r'^(?:Configuration|Dataset|Checkpoint|Strategy|Report|Shape|Computation|AdaFilter) Error',
        r'^Training Diverged',
        r'^Error ',
    ]
    for pattern in error_patterns:
        if re.search(pattern, response_text.strip()):
            return True, re.sub(r'\s+', ' ', response_text.strip())[:500]
    return False, None


def tool_text(result: Any) -> str:
    """Concatenate the text parts of a call_tool result."""
    contents = result if isinstance(result, list) else getattr(result, "content", None) or []
    text = ""
    for content in contents:
        if hasattr(content, "text"):
            text += content.text
    return text


# Two residual stages on 8x8 images: 5 gated units, seconds per epoch.
TINY_LAYERS = [
    {"kind": "conv", "out_channels": 6},
    {"kind": "bn"},
    {"kind": "relu"},
    {"kind": "residual_block", "out_channels": 6, "stride": 1},
    {"kind": "residual_block", "out_channels": 8, "stride": 2},
    {"kind": "global_avg_pool"},
    {"kind": "fc"},
]


def tiny_config_dict(workdir: Path, **overrides: Any) -> dict:
    """Experiment config small enough for the fast suite."""
    config = {
        "name": "tiny",
        "seed": 0,
        "output_dir": str(workdir / "runs"),
        "precision": "float64",
        "task": {
            "data_dir": str(workdir / "data"),
            "seed": 0,
            "num_classes": 3,
            "image_size": 8,
            "channels": 3,
            "overlap": 0.6,
            "source_train_per_class": 8,
            "source_eval_per_class": 4,
            "target_train_per_class": 6,
            "target_eval_per_class": 4,
        },
        "backbone": {"image_size": 8, "in_channels": 3, "num_classes": 3, "layers": TINY_LAYERS},
        "optimizer": {"epochs": 2, "batch_size": 8, "decay_epochs": [1], "lr": 0.01, "gate_lr": 0.05},
        "pretrain": {"epochs": 2, "batch_size": 8, "decay_epochs": [1]},
        "gate": {"embedding_size": 4, "hidden_size": 4},
        "strategy": "adafilter",
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key] = {**config[key], **value}
        else:
            config[key] = value
    return config


def write_config(path: Path, config: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config, sort_keys=False))
    return path


def workdir() -> Path:
    path = shared_test_state.get("workdir")
    if path is None:
        raise RuntimeError("shared_test_state['workdir'] is not set; run through run-tests.py or pytest")
    return Path(path)


class TestPlugin:
    """Base class for AdaFilter test plugins."""
    __test__ = False

    # Override these in your plugin
    operation: str = "unknown"
    description: str = "No description"
    depends_on: list = []  # Hard dependencies - test skipped if these fail
    run_after: list = []   # Soft dependencies - test runs after these, but not skipped if they fail
    slow: bool = False     # Desk-scale experiments; run only with --slow / ADAFILTER_SLOW_TESTS=1

    async def test(self, session) -> TestResult:
        """
        Run the test for this operation.

        Args:
            session: fastmcp Client connected to the AdaFilter server

        Returns:
            TestResult with pass/fail status and details
        """
        raise NotImplementedError("Plugin must implement test() method")

    def get_name(self) -> str:
        """Get the plugin name (defaults to class name)."""
        return self.__class__.__name__

    def result(self, passed: bool, message: str, start_time: float, error: Optional[str] = None) -> TestResult:
        return TestResult(
            plugin_name=self.get_name(),
            operation=self.operation,
            passed=passed,
            message=message,
            error=error,
            duration_ms=(time.time() - start_time) * 1000,
        )
