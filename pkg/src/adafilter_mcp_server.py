#!/usr/bin/env python3
"""
AdaFilter MCP Server

Exposes the AdaFilter experiment operations as MCP tools so an assistant can
generate task data, run fine-tuning experiments and read back reports.

The tools share their implementations with the CLI (adafilter_tools.py).
Training is CPU-bound and runs in worker threads, so a long experiment does
not block the health endpoints.

Transport Modes:
- stdio: Communication over stdin/stdout (default)
- http: Streamable HTTP at /mcp with /healthz and /readyz probes
"""

import argparse
import asyncio
import logging
import os
from typing import Literal, Optional

from adafilter_config import apply_thread_limit, configure_logging

# Thread caps must be in the environment before numpy loads.
apply_thread_limit()

import uvicorn  # noqa: E402
from fastmcp import FastMCP  # noqa: E402
from starlette.responses import JSONResponse  # noqa: E402

from adafilter_tools import (  # noqa: E402
    compare_strategies,
    describe_run_tool,
    export_accuracy_curves_tool,
    export_policy_histogram_tool,
    generate_task_data,
    parameter_report_tool,
    pretrain_source_model,
    run_experiment,
    verify_task_data,
)

configure_logging()
logger = logging.getLogger(__name__)

TOOL_COUNT = 9

# ============================================================================
# FastMCP Server Initialization
# ============================================================================

mcp = FastMCP("adafilter")

# ============================================================================
# Register Tools
# ============================================================================


@mcp.tool(name="generate_task_data")
async def generate_task_data_mcp(
    config_path: Optional[str] = None,
    seed: Optional[int] = None,
    force: bool = False,
    format: Literal["text", "json"] = "text",
):
    """Materialize the synthetic source/target task pair of an experiment config."""
    return await generate_task_data(config_path, seed, force, format)


@mcp.tool(name="verify_task_data")
async def verify_task_data_mcp(dataset_dir: str, regenerate: bool = True, format: Literal["text", "json"] = "text"):
    """Verify checksums, class counts and regeneration of a dataset directory."""
    return await verify_task_data(dataset_dir, regenerate, format)


@mcp.tool(name="pretrain_source_model")
async def pretrain_source_model_mcp(
    config_path: Optional[str] = None,
    output: Optional[str] = None,
    format: Literal["text", "json"] = "text",
):
    """Pre-train the backbone on the source task and save the checkpoint."""
    return await pretrain_source_model(config_path, output, format)


@mcp.tool(name="run_experiment")
async def run_experiment_mcp(
    config_path: Optional[str] = None,
    strategy: Optional[str] = None,
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
    bn_mode: Optional[Literal["gated", "standard"]] = None,
    dump_policies: Optional[bool] = None,
    format: Literal["text", "json"] = "text",
):
    """Fine-tune on the target task with one strategy and write a run directory."""
    return await run_experiment(config_path, strategy, seed, output_dir, bn_mode, dump_policies, format)


@mcp.tool(name="compare_strategies")
async def compare_strategies_mcp(
    config_path: Optional[str] = None,
    strategies: Optional[list[str]] = None,
    seeds: Optional[list[int]] = None,
    output_dir: Optional[str] = None,
    bn_modes: Optional[list[Literal["gated", "standard"]]] = None,
    format: Literal["text", "json"] = "text",
):
    """Run several strategies over several seeds (optionally under both BN modes) and write accuracy curves."""
    return await compare_strategies(config_path, strategies, seeds, output_dir, bn_modes, format)


@mcp.tool(name="export_policy_histogram")
async def export_policy_histogram_mcp(run_dir: str, format: Literal["text", "json"] = "text"):
    """Per-layer fine-tune fractions of a gated run."""
    return await export_policy_histogram_tool(run_dir, format)


@mcp.tool(name="export_accuracy_curves")
async def export_accuracy_curves_mcp(compare_dir: str, format: Literal["text", "json"] = "text"):
    """Eval accuracy per epoch for every strategy and seed of a comparison."""
    return await export_accuracy_curves_tool(compare_dir, format)


@mcp.tool(name="describe_run")
async def describe_run_mcp(run_dir: str, format: Literal["text", "json"] = "text"):
    """Status, final metrics and artifacts of a run directory."""
    return await describe_run_tool(run_dir, format)


@mcp.tool(name="parameter_report")
async def parameter_report_mcp(
    config_path: Optional[str] = None,
    bn_mode: Optional[Literal["gated", "standard"]] = None,
    format: Literal["text", "json"] = "text",
):
    """Parameter accounting of the baseline against the gated model."""
    return await parameter_report_tool(config_path, bn_mode, format)


logger.info(f"Registered {TOOL_COUNT} tools with the AdaFilter MCP server")

# ============================================================================
# Health Check Endpoints
# ============================================================================

async def liveness_check(request):
    """Liveness probe endpoint."""
    return JSONResponse({"status": "alive"})


async def readiness_check(request):
    """Readiness probe endpoint."""
    return JSONResponse({"status": "ready", "tools": TOOL_COUNT})


# ============================================================================
# Transport Implementations
# ============================================================================

async def run_stdio_transport():
    """Run server in stdio mode."""
    logger.info("=" * 70)
    logger.info("AdaFilter MCP Server (stdio mode)")
    logger.info("=" * 70)
    logger.info(f"Tools: {TOOL_COUNT} experiment tools")
    logger.info("=" * 70)

    await mcp.run_stdio_async()


def run_http_transport(host: str, port: int):
    """Run server in HTTP mode."""
    app = mcp.http_app(transport="http", path="/mcp")
    app.add_route("/healthz", liveness_check)
    app.add_route("/readyz", readiness_check)

    logger.info("=" * 70)
    logger.info("Server Configuration:")
    logger.info("=" * 70)
    logger.info(f"  Listening on: {host}:{port}")
    logger.info("  MCP Endpoint: /mcp")
    logger.info(f"  Tools: {TOOL_COUNT} experiment tools")
    logger.info("=" * 70)

    uvicorn.run(app, host=host, port=port, log_level="info")


# ============================================================================
# Main Entry Point
# ============================================================================

def main():
    """Main entry point with transport selection."""
    parser = argparse.ArgumentParser(description="AdaFilter MCP Server")
    parser.add_argument(
        "--transport",
        choices=["stdio", "http"],
        default="stdio",
        help="Transport mode: stdio (default) or http"
    )
    parser.add_argument(
        "--port",
        type=int,
        default=int(os.getenv("PORT", "3000")),
        help="Port for HTTP transport (default: 3000)"
    )
    parser.add_argument(
        "--host",
        default="127.0.0.1",
        help="Host for HTTP transport (default: 127.0.0.1)"
    )

    args = parser.parse_args()

    if args.transport == "stdio":
        asyncio.run(run_stdio_transport())
    else:
        run_http_transport(args.host, args.port)


if __name__ == "__main__":
    main()
