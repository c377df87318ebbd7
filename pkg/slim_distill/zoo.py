"""Built-in toy graphs and distillation tap presets."""

import json
import logging
from pathlib import Path
from typing import Any, Callable, Optional

from slim_distill.graph import GRAPH_FORMAT, ModelGraph, build_graph, load_graph
from slim_distill.model import Alignment, DistillationConfig, TapPoint
from slim_distill.utils import ConfigError, handle_input_file, make_error

logger = logging.getLogger("slim_distill.zoo")


class _SpecBuilder:
    def __init__(self, input_channels: int = 3):
        self.input_channels = input_channels
        self.nodes: list[dict[str, Any]] = []
        self.edges: list[dict[str, str]] = []
        self.channels = {"input": input_channels}

    def node(self, nid: str, kind: str, sources: list[str], channels: int, **params) -> str:
        self.nodes.append({"id": nid, "kind": kind, "params": params})
        self.edges.extend({"from": src, "to": nid} for src in sources)
        self.channels[nid] = channels
        return nid

    def conv_block(self, name: str, src: str, out: int, kernel: int = 3, stride: int = 1) -> str:
        """conv -> bn -> act; returns the act id."""
        cin = self.channels[src]
        self.node(f"{name}_conv", "conv", [src], out, in_channels=cin, out_channels=out, kernel=kernel, stride=stride)
        self.node(f"{name}_bn", "bn", [f"{name}_conv"], out)
        return self.node(f"{name}_act", "act", [f"{name}_bn"], out, fn="silu")

    def concat(self, nid: str, sources: list[str]) -> str:
        return self.node(nid, "concat", sources, sum(self.channels[s] for s in sources))

    def add(self, nid: str, a: str, b: str) -> str:
        return self.node(nid, "add", [a, b], self.channels[a])

    def spec(self, outputs: list[str]) -> dict[str, Any]:
        return {"input_channels": self.input_channels, "nodes": self.nodes, "edges": self.edges, "outputs": outputs}


def _w(channels: int, width: float) -> int:
    return max(2, int(round(channels * width)))


def toy_detector(num_classes: int = 3, width: float = 1.0) -> dict[str, Any]:
    """Heatmap detector at stride 4: residual backbone, pooled-pyramid block, two-way neck.

    Roughly 60k parameters at ``width=1``.
    """
    b = _SpecBuilder()
    stem = b.conv_block("stem", "input", _w(16, width), stride=2)
    b1 = b.conv_block("b1", stem, _w(32, width), stride=2)
    b1_res = b.conv_block("b1_res", b1, _w(32, width))
    b1_add = b.add("b1_add", b1, b1_res)
    b2 = b.conv_block("b2", b1_add, _w(48, width), stride=2)

    sppf = b.conv_block("sppf", b2, _w(24, width), kernel=1)
    pool1 = b.node("sppf_pool1", "maxpool", [sppf], b.channels[sppf], kernel=5)
    pool2 = b.node("sppf_pool2", "maxpool", [pool1], b.channels[sppf], kernel=5)
    sppf_cat = b.concat("sppf_cat", [sppf, pool1, pool2])
    sppf_out = b.conv_block("sppf_out", sppf_cat, _w(48, width), kernel=1)

    up1 = b.node("up1", "upsample", [sppf_out], b.channels[sppf_out], factor=2)
    n1 = b.conv_block("n1", b.concat("n1_cat", [up1, b1_add]), _w(24, width))
    up2 = b.node("up2", "upsample", [n1], b.channels[n1], factor=2)
    n2 = b.conv_block("n2", b.concat("n2_cat", [up2, stem]), _w(24, width), stride=2)
    n3 = b.conv_block("n3", b.concat("n3_cat", [n2, n1]), _w(24, width), kernel=1)
    b.node("head", "head", [n3], num_classes, in_channels=b.channels[n3], out_channels=num_classes, kernel=1)
    return b.spec(["head"])


def toy_classifier(num_classes: int = 3, width: float = 1.0) -> dict[str, Any]:
    """Small residual classifier; logits are the spatial mean of the head output."""
    b = _SpecBuilder()
    stem = b.conv_block("stem", "input", _w(16, width), stride=2)
    b1 = b.conv_block("b1", stem, _w(32, width), stride=2)
    b1_res = b.conv_block("b1_res", b1, _w(32, width))
    b2 = b.conv_block("b2", b.add("b1_add", b1, b1_res), _w(48, width), stride=2)
    n1 = b.conv_block("n1", b2, _w(32, width))
    b.node("head", "head", [n1], num_classes, in_channels=b.channels[n1], out_channels=num_classes, kernel=1)
    return b.spec(["head"])


def conv_chain(channels: list[int], input_channels: int = 3) -> dict[str, Any]:
    """Plain chain of conv+BN+SiLU blocks, ``l0`` .. ``l{n-1}``."""
    b = _SpecBuilder(input_channels)
    src = "input"
    for i, out in enumerate(channels):
        src = b.conv_block(f"l{i}", src, out)
    return b.spec([src])


ZOO: dict[str, Callable[..., dict[str, Any]]] = {
    "toy_detector": toy_detector,
    "toy_detector_wide": lambda num_classes=3: toy_detector(num_classes, width=2.0),
    "toy_classifier": toy_classifier,
}

NECK_TAPS = ["n1_act", "n2_act", "n3_act"]
FUSION_TAPS = ["b1_add", "b2_act", "sppf_out_act", *NECK_TAPS]


def tap_preset(name: str, base: Optional[DistillationConfig] = None) -> DistillationConfig:
    """Fill ``tap_points`` (and alignment for C3) for a named preset.

    C1 taps the neck of a self-teacher, C2 every fusion point, C3 the neck of
    a wider teacher through learned projections.
    """
    base = base or DistillationConfig()
    if name == "C1":
        taps, alignment = NECK_TAPS, Alignment.INDEX_MAP
    elif name == "C2":
        taps, alignment = FUSION_TAPS, Alignment.INDEX_MAP
    elif name == "C3":
        taps, alignment = NECK_TAPS, Alignment.LEARNED_PROJECTION
    else:
        make_error(f"Unknown tap preset '{name}'. Use C1, C2 or C3", ConfigError)
    return base.model_copy(
        update={
            "tap_points": [TapPoint(teacher=t, student=t) for t in taps],
            "tap_preset": name,
            "alignment": alignment,
        }
    )


def resolve_distill_config(cfg: DistillationConfig) -> DistillationConfig:
    """Expand ``tap_preset`` unless explicit tap points were given."""
    if cfg.tap_points or cfg.tap_preset is None:
        return cfg
    return tap_preset(cfg.tap_preset, cfg)


def resolve_graph(name_or_path: str, num_classes: int = 3, seed: int = 0) -> ModelGraph:
    """Zoo name, graph spec JSON, or saved graph JSON (with weights) -> ModelGraph."""
    if name_or_path in ZOO:
        logger.info(f"Building zoo graph '{name_or_path}' with {num_classes} classes")
        return build_graph(ZOO[name_or_path](num_classes=num_classes), seed=seed)
    path = handle_input_file(name_or_path)
    doc = json.loads(Path(path).read_text())
    if doc.get("format") == GRAPH_FORMAT:
        return load_graph(path)
    return build_graph(doc, seed=seed)
