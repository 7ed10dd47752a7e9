#!/usr/bin/env python3
"""
AdaFilter Test Runner

Runs the plugin suite in test/plugins against an in-memory AdaFilter MCP
server. Library plugins call the modules directly; tool plugins go through
the MCP client session.

Slow desk-scale experiments are skipped unless --slow is given (or
ADAFILTER_SLOW_TESTS=1 is set).
"""

import argparse
import asyncio
import importlib
import inspect
import json
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

TEST_DIR = Path(__file__).resolve().parent
sys.path.insert(0, str(TEST_DIR))
sys.path.insert(0, str(TEST_DIR.parent / "src"))


# Colors for terminal output
class Colors:
    RED = '\033[0;31m'
    GREEN = '\033[0;32m'
    YELLOW = '\033[1;33m'
    BLUE = '\033[0;34m'
    NC = '\033[0m'  # No Color

    @staticmethod
    def red(text): return f"{Colors.RED}{text}{Colors.NC}"
    @staticmethod
    def green(text): return f"{Colors.GREEN}{text}{Colors.NC}"
    @staticmethod
    def yellow(text): return f"{Colors.YELLOW}{text}{Colors.NC}"
    @staticmethod
    def blue(text): return f"{Colors.BLUE}{text}{Colors.NC}"


def topological_sort_plugins(plugins: List) -> List:
    """
    Sort plugins so that 'depends_on' and 'run_after' targets come first.

    Discovery order is kept wherever dependencies allow it.
    """
    plugin_map = {p.get_name(): p for p in plugins}
    visited = set()
    result = []

    def visit(plugin):
        if plugin.get_name() in visited:
            return
        visited.add(plugin.get_name())
        for dep_name in sorted(set(plugin.depends_on + plugin.run_after)):
            if dep_name in plugin_map:
                visit(plugin_map[dep_name])
        result.append(plugin)

    for plugin in plugins:
        visit(plugin)
    return result


def discover_plugins(plugins_dir: Path, selected: Optional[List[str]] = None) -> List:
    """Discover TestPlugin subclasses in test/plugins/test_*.py."""
    from plugins import TestPlugin

    plugins = []
    if not plugins_dir.exists():
        return plugins

    for plugin_file in sorted(plugins_dir.glob("test_*.py")):
        module_name = f"plugins.{plugin_file.stem}"
        try:
            module = importlib.import_module(module_name)
        except Exception as e:
            print(Colors.yellow(f"⚠️  Failed to load plugin {plugin_file.name}: {e}"))
            continue

        members = [obj for _, obj in inspect.getmembers(module, inspect.isclass)
                   if issubclass(obj, TestPlugin) and obj is not TestPlugin and obj.__module__ == module_name]
        # Source order, so plugins in one file run the way they read.
        members.sort(key=lambda cls: inspect.getsourcelines(cls)[1])
        plugins.extend(cls() for cls in members)

    if selected:
        wanted = set(selected)
        plugins = [p for p in plugins if p.get_name() in wanted or p.operation in wanted]

    return topological_sort_plugins(plugins)


async def run_plugin_tests(session, plugins: List, include_slow: bool) -> tuple[int, List]:
    """
    Run all plugin tests and report results.

    Returns:
        Tuple of (exit_code, results_list)
    """
    from plugins import TestResult

    print("=" * 70)
    print("Running Tests")
    print("=" * 70)
    print()

    results = []
    passed = failed = skipped = 0
    failed_tests = set()

    for plugin in plugins:
        plugin_name = plugin.get_name()

        if plugin.slow and not include_slow:
            print(f"⏭️  {plugin_name}... " + Colors.yellow("SKIPPED (slow; use --slow)"))
            skipped += 1
            continue

        deps_failed = [dep for dep in plugin.depends_on if dep in failed_tests]
        if deps_failed:
            print(f"⏭️  {plugin_name}... ", end="")
            print(Colors.yellow(f"SKIPPED (dependency failed: {', '.join(deps_failed)})"))
            print()
            results.append(TestResult(
                plugin_name=plugin_name,
                operation=plugin.operation,
                passed=False,
                message=f"Skipped because dependency failed: {', '.join(deps_failed)}"
            ))
            failed += 1
            failed_tests.add(plugin_name)
            continue

        print(f"▶️  {plugin_name}...", end=" ", flush=True)

        try:
            result = await plugin.test(session)
            results.append(result)

            if result.passed:
                print(Colors.green("✅ PASS"))
                passed += 1
            else:
                print(Colors.red("❌ FAIL"))
                failed += 1
                failed_tests.add(plugin_name)

            if result.duration_ms:
                print(f"   Duration: {result.duration_ms:.1f}ms")
            print(f"   {result.message}")
            if result.error:
                print(Colors.red(f"   Error: {result.error}"))
            print()

        except Exception as e:
            print(Colors.red("❌ EXCEPTION"))
            print(Colors.red(f"   Unexpected error: {e}"))
            print()
            failed += 1
            failed_tests.add(plugin_name)
            results.append(TestResult(
                plugin_name=plugin_name,
                operation=plugin.operation,
                passed=False,
                message="Unexpected exception during test",
                error=str(e)
            ))

    print("=" * 70)
    print("Test Summary")
    print("=" * 70)
    print()
    print(f"Total:   {passed + failed} tests")
    print(Colors.green(f"Passed:  {passed}"))
    print(Colors.red(f"Failed:  {failed}"))
    if skipped:
        print(Colors.yellow(f"Skipped: {skipped} slow"))
    print()

    if failed == 0:
        print(Colors.green("🎉 All tests passed!"))
        exit_code = 0
    else:
        print(Colors.red(f"❌ {failed} test(s) failed"))
        exit_code = 1

    return exit_code, results


def save_test_results(results: List, output_file: str, format: str = "json", workdir: Optional[str] = None):
    """
    Save test results to a file.

    Args:
        results: List of TestResult objects
        output_file: Path to output file
        format: Output format ('json' or 'junit')
        workdir: Scratch directory the run used
    """
    timestamp = datetime.now(timezone.utc).isoformat().replace('+00:00', 'Z')

    if format == "json":
        output = {
            "timestamp": timestamp,
            "workdir": workdir,
            "summary": {
                "total": len(results),
                "passed": sum(1 for r in results if r.passed),
                "failed": sum(1 for r in results if not r.passed),
                "duration_ms": sum(r.duration_ms or 0 for r in results)
            },
            "tests": [
                {
                    "plugin_name": r.plugin_name,
                    "operation": r.operation,
                    "passed": r.passed,
                    "message": r.message,
                    "error": r.error,
                    "duration_ms": r.duration_ms
                }
                for r in results
            ]
        }

        with open(output_file, 'w') as f:
            json.dump(output, f, indent=2)

        print()
        print(Colors.green(f"✅ Test results saved to: {output_file}"))
        print("   Format: JSON")

    elif format == "junit":
        import xml.etree.ElementTree as ET

        duration_s = sum(r.duration_ms or 0 for r in results) / 1000.0
        testsuite = ET.Element("testsuite", {
            "name": "AdaFilter Tests",
            "tests": str(len(results)),
            "failures": str(sum(1 for r in results if not r.passed)),
            "errors": "0",
            "time": f"{duration_s:.3f}",
            "timestamp": timestamp
        })

        if workdir:
            properties = ET.SubElement(testsuite, "properties")
            ET.SubElement(properties, "property", {"name": "workdir", "value": workdir})

        for r in results:
            testcase = ET.SubElement(testsuite, "testcase", {
                "name": r.plugin_name,
                "classname": f"adafilter.{r.operation}",
                "time": f"{(r.duration_ms or 0) / 1000:.3f}"
            })
            if not r.passed:
                failure = ET.SubElement(testcase, "failure", {"message": r.message})
                if r.error:
                    failure.text = r.error

        tree = ET.ElementTree(testsuite)
        ET.indent(tree, space="  ")
        tree.write(output_file, encoding="utf-8", xml_declaration=True)

        print()
        print(Colors.green(f"✅ Test results saved to: {output_file}"))
        print("   Format: JUnit XML")


async def run_automated_tests(workdir: Path, include_slow: bool, selected: Optional[List[str]],
                              output_file: Optional[str], output_format: str) -> int:
    print("=" * 70)
    print(Colors.blue("AdaFilter - Automated Test Suite"))
    print("=" * 70)
    print()

    plugins = discover_plugins(TEST_DIR / "plugins", selected)
    if not plugins:
        print(Colors.yellow("⚠️  No test plugins found"))
        print(f"   Expected plugins in: {TEST_DIR / 'plugins'}")
        return 1

    print(f"📋 Discovered {len(plugins)} test plugin(s)")
    for plugin in plugins:
        marker = " (slow)" if plugin.slow else ""
        print(f"   • {plugin.operation}: {plugin.description}{marker}")
    print()
    print(f"Workdir: {workdir}")
    print()

    from plugins import shared_test_state
    shared_test_state["workdir"] = str(workdir)

    try:
        from fastmcp import Client
        from adafilter_mcp_server import mcp
    except ImportError as e:
        print(Colors.red(f"❌ Failed to import the MCP server: {e}"))
        print()
        print("Install with: pip install -r requirements.txt")
        return 1

    async with Client(mcp) as session:
        print(Colors.green("✅ Connected to in-memory server"))
        print()
        exit_code, results = await run_plugin_tests(session, plugins, include_slow)

    if output_file:
        save_test_results(results, output_file, output_format, str(workdir))
    return exit_code


def main():
    parser = argparse.ArgumentParser(
        description="AdaFilter Test Runner",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Run the fast suite
  ./test/run-tests.py

  # Include the desk-scale transfer experiments
  ./test/run-tests.py --slow

  # Run selected plugins (class names or operations)
  ./test/run-tests.py --only GateGradientFlowTest run_experiment

  # Save results to JUnit XML (for CI/CD)
  ./test/run-tests.py --output results.xml --format junit

Environment Variables:
  ADAFILTER_SLOW_TESTS   Same as --slow when set to 1
"""
    )
    parser.add_argument('--slow', action='store_true', help='Also run slow desk-scale experiments')
    parser.add_argument('--only', nargs='+', metavar='NAME', help='Run only these plugins or operations')
    parser.add_argument('--workdir', help='Scratch directory (default: a fresh temporary directory)')
    parser.add_argument('--keep', action='store_true', help='Keep the temporary workdir after the run')
    parser.add_argument('-o', '--output', dest='output_file', help='Save test results to file')
    parser.add_argument('-f', '--format', dest='output_format', choices=['json', 'junit'], default='json',
                        help='Output format for test results (default: json)')
    args = parser.parse_args()

    if args.slow:
        os.environ["ADAFILTER_SLOW_TESTS"] = "1"
    from plugins import slow_tests_enabled

    started = time.time()
    if args.workdir:
        workdir = Path(args.workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        exit_code = asyncio.run(run_automated_tests(workdir, slow_tests_enabled(), args.only,
                                                    args.output_file, args.output_format))
    elif args.keep:
        workdir = Path(tempfile.mkdtemp(prefix="adafilter-tests-"))
        exit_code = asyncio.run(run_automated_tests(workdir, slow_tests_enabled(), args.only,
                                                    args.output_file, args.output_format))
        print(f"Workdir kept at {workdir}")
    else:
        with tempfile.TemporaryDirectory(prefix="adafilter-tests-") as tmp:
            exit_code = asyncio.run(run_automated_tests(Path(tmp), slow_tests_enabled(), args.only,
                                                        args.output_file, args.output_format))
    print(f"Finished in {time.time() - started:.1f}s")
    sys.exit(exit_code)


if __name__ == "__main__":
    main()
