"""Closed-form complexity accounting for ModelGraph.

MACs count conv/head multiply-accumulates only; element-wise nodes are free.
FLOPs are always 2 * MACs.
"""

import logging
import time
from pathlib import Path
from typing import Literal, Optional, Sequence

import torch
from pydantic import BaseModel, ConfigDict, Field

from slim_distill.graph import INPUT_ID, ModelGraph, NodeKind
from slim_distill.utils import ReportError, ShapeError, make_error

logger = logging.getLogger("slim_distill.profiler")

Precision = Literal["float32", "float16"]
BYTES_PER_ELEMENT = {"float32": 4, "float16": 2}
REDUCTION_METRICS = ("params", "macs", "flops", "size_bytes", "fps")


class ComplexityReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    params: int
    macs: int
    flops: int
    size_bytes: int
    fps: Optional[float] = None
    reductions: dict[str, float] = Field(default_factory=dict)
    precision: Precision = "float16"
    input_shape: tuple[int, ...] = ()

    @property
    def size_mb(self) -> float:
        return self.size_bytes / 1e6

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2))
        return path

    @classmethod
    def load(cls, path: Path) -> "ComplexityReport":
        return cls.model_validate_json(Path(path).read_text())


def count_params(graph: ModelGraph) -> int:
    total = 0
    for nid in graph.order:
        kind = graph.kinds[nid]
        layer = graph.layers[nid]
        if kind in (NodeKind.CONV, NodeKind.HEAD):
            total += layer.weight.numel() + (layer.bias.numel() if layer.bias is not None else 0)
        elif kind == NodeKind.BN:
            total += 2 * layer.num_features
    return total


def _spatial(input_shape: Sequence[int], graph: ModelGraph) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in input_shape)
    if len(shape) == 2:
        return 1, shape[0], shape[1]
    if len(shape) == 3:
        batch, (c, h, w) = 1, shape
    elif len(shape) == 4:
        batch, c, h, w = shape
    else:
        make_error(f"Input shape must be (H, W), (C, H, W) or (N, C, H, W), got {shape}", ShapeError)
    if c != graph.input_channels:
        make_error(f"Input has {c} channels, graph expects {graph.input_channels}", ShapeError)
    return batch, h, w


def count_macs(graph: ModelGraph, input_shape: Sequence[int]) -> int:
    batch, h, w = _spatial(input_shape, graph)
    sizes = {INPUT_ID: (h, w)}
    macs = 0
    for nid in graph.order:
        kind = graph.kinds[nid]
        layer = graph.layers[nid]
        in_sizes = [sizes[src] for src in graph.inputs_of[nid]]
        if len(set(in_sizes)) > 1:
            make_error(f"Node '{nid}' merges feature maps of sizes {in_sizes}", ShapeError)
        h_in, w_in = in_sizes[0]
        if kind in (NodeKind.CONV, NodeKind.HEAD):
            k, s, p = layer.kernel_size[0], layer.stride[0], layer.padding[0]
            h_out = (h_in + 2 * p - k) // s + 1
            w_out = (w_in + 2 * p - k) // s + 1
            if h_out < 1 or w_out < 1:
                make_error(f"Node '{nid}' output underflows to {h_out}x{w_out}", ShapeError)
            macs += layer.in_channels * layer.out_channels * k * k * h_out * w_out
            sizes[nid] = (h_out, w_out)
        elif kind == NodeKind.UPSAMPLE:
            factor = int(layer.scale_factor)
            sizes[nid] = (h_in * factor, w_in * factor)
        else:
            sizes[nid] = (h_in, w_in)
    return batch * macs


def count_flops(graph: ModelGraph, input_shape: Sequence[int]) -> int:
    return 2 * count_macs(graph, input_shape)


def model_size(graph: ModelGraph, precision: Precision = "float16") -> int:
    return count_params(graph) * BYTES_PER_ELEMENT[precision]


def benchmark_fps(graph: ModelGraph, input_shape: Sequence[int], warmup: int = 5, iters: int = 20) -> float:
    """Eval-mode forwards per second at batch 1. Not thread-safe: run on an idle process."""
    if iters < 1:
        make_error(f"iters must be >= 1, got {iters}", ShapeError)
    _, h, w = _spatial(input_shape, graph)
    dtype = next((p.dtype for p in graph.parameters()), torch.float32)
    x = torch.zeros(1, graph.input_channels, h, w, dtype=dtype)
    was_training = graph.training
    graph.eval()
    try:
        with torch.no_grad():
            for _ in range(warmup):
                graph(x)
            start = time.perf_counter()
            for _ in range(iters):
                graph(x)
            elapsed = time.perf_counter() - start
    finally:
        graph.train(was_training)
    return iters / max(elapsed, 1e-9)


def profile(
    graph: ModelGraph,
    input_shape: Sequence[int],
    precision: Precision = "float16",
    fps_iters: int = 0,
    warmup: int = 5,
) -> ComplexityReport:
    macs = count_macs(graph, input_shape)
    report = ComplexityReport(
        params=count_params(graph),
        macs=macs,
        flops=2 * macs,
        size_bytes=model_size(graph, precision),
        fps=benchmark_fps(graph, input_shape, warmup, fps_iters) if fps_iters > 0 else None,
        precision=precision,
        input_shape=tuple(input_shape),
    )
    logger.info(f"Profiled graph: {report.params} params, {report.macs} MACs, {report.size_mb:.3f} MB")
    return report


def reduction_report(base: ComplexityReport, ours: ComplexityReport) -> ComplexityReport:
    """Copy of ``ours`` with reduction(m) = 100 * (base_m - ours_m) / base_m per metric."""
    if base.input_shape != ours.input_shape or base.precision != ours.precision:
        make_error("Reports must share input shape and precision", ReportError)
    reductions = {}
    for metric in REDUCTION_METRICS:
        b, o = getattr(base, metric), getattr(ours, metric)
        if b is None or o is None:
            continue
        if b == 0:
            make_error(f"Baseline {metric} is 0; reduction is undefined", ReportError)
        reductions[metric] = 100.0 * (b - o) / b
    return ours.model_copy(update={"reductions": reductions})


def render_table(base: ComplexityReport, ours: ComplexityReport, labels: tuple[str, str] = ("Base", "Ours")) -> str:
    """Text table in the style of a params/MACs/FLOPs/size/FPS comparison."""
    compared = reduction_report(base, ours)
    header = f"{'Model':<12}{'#parameters':>14}{'MACs (G)':>12}{'FLOPs (G)':>12}{'Size (MB)':>12}{'FPS':>10}"

    def row(label: str, r: ComplexityReport) -> str:
        fps = f"{r.fps:.1f}" if r.fps is not None else "-"
        return f"{label:<12}{r.params:>14,}{r.macs / 1e9:>12.5f}{r.flops / 1e9:>12.5f}{r.size_mb:>12.3f}{fps:>10}"

    red = compared.reductions
    fps_red = f"{red['fps']:.2f}%" if "fps" in red else "-"
    reduction_row = (
        f"{'Reduction':<12}{red['params']:>13.2f}%{red['macs']:>11.2f}%"
        f"{red['flops']:>11.2f}%{red['size_bytes']:>11.2f}%{fps_red:>10}"
    )
    return "\n".join([header, row(labels[0], base), row(labels[1], ours), reduction_row])
