"""
slim-distill MCP server

Read-only inspection of pipeline artifacts (checkpoints, pruning plans and
complexity reports) written by the ``slim-distill`` CLI. No tool trains or
modifies anything on disk.
"""

import json
import logging
import os
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from mcp.server.fastmcp import FastMCP
from mcp.types import TextContent

from slim_distill.profiler import ComplexityReport, profile, render_table
from slim_distill.pruning import PruningPlan
from slim_distill.trainer import load_checkpoint
from slim_distill.utils import ConfigError, handle_input_file, make_error

load_dotenv()
logger = logging.getLogger("slim_distill.server")

DEFAULT_OUTPUT_DIR = os.getenv("SLIM_DISTILL_OUTPUT_DIR", str(Path.cwd() / "runs"))

mcp = FastMCP("SlimDistill")


@mcp.tool(
    description="""Count parameters, MACs, FLOPs and model size of a saved checkpoint.

    Args:
        path: Path to a checkpoint JSON written by the pipeline (its .bin weights must sit next to it)
        image_size: Square input side in pixels
        precision: Storage precision used for the size estimate (float16 or float32)
    """
)
def profile_graph(path: str, image_size: int = 32, precision: Literal["float32", "float16"] = "float16") -> TextContent:
    try:
        if image_size < 1:
            make_error("image_size must be positive", ConfigError)
        graph, _ = load_checkpoint(handle_input_file(path))
        report = profile(graph, (image_size, image_size), precision)
        return TextContent(type="text", text=report.model_dump_json(indent=2))
    except Exception as e:
        logger.error(f"Error profiling graph: {str(e)}")
        return TextContent(type="text", text=f"Error profiling graph: {str(e)}")


@mcp.tool(
    description="""Compare two ComplexityReport JSON files and show the reduction of every metric.

    Args:
        base_path: Report of the uncompressed model
        ours_path: Report of the compressed model
    """
)
def compare_reports(base_path: str, ours_path: str) -> TextContent:
    try:
        base = ComplexityReport.load(handle_input_file(base_path))
        ours = ComplexityReport.load(handle_input_file(ours_path))
        return TextContent(type="text", text=render_table(base, ours))
    except Exception as e:
        logger.error(f"Error comparing reports: {str(e)}")
        return TextContent(type="text", text=f"Error comparing reports: {str(e)}")


@mcp.tool(description="Summarise a pruning plan JSON: per-layer original and kept channel counts.")
def describe_plan(path: str) -> TextContent:
    try:
        plan = PruningPlan.load(handle_input_file(path))
        rows = plan.summary()
        before = sum(r["original"] for r in rows)
        after = sum(r["kept"] for r in rows)
        lines = [f"ratio={plan.ratio} floor={plan.floor} rounding={plan.rounding.value}"]
        lines += [f"{r['layer']}: {r['original']} -> {r['kept']}" for r in rows]
        lines.append(f"total: {before} -> {after} channels")
        return TextContent(type="text", text="\n".join(lines))
    except Exception as e:
        logger.error(f"Error describing plan: {str(e)}")
        return TextContent(type="text", text=f"Error describing plan: {str(e)}")


@mcp.tool(description="List the pipeline artifacts (JSON and PNG files) in an output directory.")
def list_artifacts(output_dir: str = DEFAULT_OUTPUT_DIR) -> TextContent:
    try:
        directory = Path(output_dir)
        if not directory.is_dir():
            return TextContent(type="text", text=f"Error: {directory} is not a directory")
        files = sorted(p.name for p in directory.iterdir() if p.suffix in {".json", ".png", ".bin"})
        if not files:
            return TextContent(type="text", text=f"No artifacts in {directory}")
        return TextContent(type="text", text=json.dumps(files, indent=2))
    except Exception as e:
        logger.error(f"Error listing artifacts: {str(e)}")
        return TextContent(type="text", text=f"Error listing artifacts: {str(e)}")


def main():
    """Run the MCP server"""
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    mcp.run()


if __name__ == "__main__":
    main()
