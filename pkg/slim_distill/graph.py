"""Channel-exact convolutional graphs.

A ``ModelGraph`` is an ``nn.Module`` whose layers live in a ``ModuleDict``
keyed by node id and are executed in topological order. The graph input is
implicit: it is the reserved source id ``input`` with ``input_channels``
channels, and any node without incoming edges reads from it.
"""

import copy
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from slim_distill.utils import (
    CouplingError,
    DegenerateLayerError,
    GraphStructureError,
    ShapeError,
    handle_input_file,
    make_error,
)

if TYPE_CHECKING:
    from slim_distill.pruning import PruningPlan

logger = logging.getLogger("slim_distill.graph")

INPUT_ID = "input"
GRAPH_FORMAT = "slim-distill-graph/1"
_NODE_ID = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class NodeKind(str, Enum):
    CONV = "conv"
    BN = "bn"
    ACT = "act"
    CONCAT = "concat"
    ADD = "add"
    UPSAMPLE = "upsample"
    MAXPOOL = "maxpool"
    HEAD = "head"


CHANNEL_PRESERVING = {NodeKind.ACT, NodeKind.UPSAMPLE, NodeKind.MAXPOOL}
_SINGLE_INPUT = {NodeKind.CONV, NodeKind.BN, NodeKind.ACT, NodeKind.UPSAMPLE, NodeKind.MAXPOOL, NodeKind.HEAD}


class NodeDef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    kind: NodeKind
    params: dict[str, Any] = Field(default_factory=dict)


class EdgeDef(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    src: str = Field(alias="from")
    dst: str = Field(alias="to")


class GraphSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input_channels: int = Field(gt=0)
    nodes: list[NodeDef]
    edges: list[EdgeDef] = Field(default_factory=list)
    outputs: Optional[list[str]] = None


class CouplingReason(str, Enum):
    RESIDUAL_ADD = "residual_add"
    SHARED_PRODUCER = "shared_producer"


@dataclass(frozen=True)
class ChannelGroup:
    """Channel slots that share one keep/prune fate.

    ``pinned`` groups also reach a channel source that cannot be pruned
    (the graph input or a conv without BN), so they are always kept.
    """

    members: tuple[tuple[str, int], ...]
    reason: CouplingReason
    pinned: bool = False


class Concat(nn.Module):
    def forward(self, *xs: torch.Tensor) -> torch.Tensor:
        return torch.cat(xs, dim=1)


class Add(nn.Module):
    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return a + b


class MaxPoolChain(nn.Sequential):
    """``repeats`` stride-1 max pools; channel and size preserving."""

    def __init__(self, kernel: int = 5, repeats: int = 1):
        if kernel % 2 == 0:
            make_error(f"Maxpool kernel must be odd to preserve size, got {kernel}", GraphStructureError)
        super().__init__(*[nn.MaxPool2d(kernel, stride=1, padding=kernel // 2) for _ in range(repeats)])
        self.kernel = kernel
        self.repeats = repeats


_ACTIVATIONS = {"silu": nn.SiLU, "relu": nn.ReLU, "identity": nn.Identity}


@dataclass
class ForwardResult:
    outputs: list[torch.Tensor]
    features: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def output(self) -> torch.Tensor:
        return self.outputs[0]


class ModelGraph(nn.Module):
    def __init__(
        self,
        input_channels: int,
        order: Sequence[str],
        kinds: Mapping[str, NodeKind],
        inputs_of: Mapping[str, Sequence[str]],
        output_ids: Sequence[str],
        layers: Mapping[str, nn.Module],
    ):
        super().__init__()
        self.input_channels = input_channels
        self.order = list(order)
        self.kinds = dict(kinds)
        self.inputs_of = {k: list(v) for k, v in inputs_of.items()}
        self.output_ids = list(output_ids)
        self.layers = nn.ModuleDict({nid: layers[nid] for nid in self.order})

    def consumers_of(self, node_id: str) -> list[str]:
        return [nid for nid in self.order if node_id in self.inputs_of[nid]]

    def channels_of(self, node_id: str) -> int:
        if node_id == INPUT_ID:
            return self.input_channels
        kind = self.kinds[node_id]
        layer = self.layers[node_id]
        if kind in (NodeKind.CONV, NodeKind.HEAD):
            return layer.out_channels
        if kind == NodeKind.BN:
            return layer.num_features
        if kind == NodeKind.CONCAT:
            return sum(self.channels_of(src) for src in self.inputs_of[node_id])
        return self.channels_of(self.inputs_of[node_id][0])

    def bn_ids(self) -> list[str]:
        return [nid for nid in self.order if self.kinds[nid] == NodeKind.BN]

    def prunable_layers(self) -> dict[str, str]:
        """BN id -> conv id for every conv+BN pair whose conv feeds only that BN."""
        pairs = {}
        for nid in self.bn_ids():
            src = self.inputs_of[nid][0]
            if src != INPUT_ID and self.kinds[src] == NodeKind.CONV and self.consumers_of(src) == [nid]:
                pairs[nid] = src
        return pairs

    def forward(self, x: torch.Tensor, return_features: bool = False):
        if x.dim() != 4 or x.shape[1] != self.input_channels:
            make_error(
                f"Expected input of shape [N, {self.input_channels}, H, W], got {list(x.shape)}",
                ShapeError,
            )
        features = {INPUT_ID: x}
        for nid in self.order:
            args = [features[src] for src in self.inputs_of[nid]]
            try:
                features[nid] = self.layers[nid](*args)
            except RuntimeError as e:
                raise ShapeError(f"Node '{nid}' failed on shapes {[list(a.shape) for a in args]}: {e}") from e
        outputs = [features[oid] for oid in self.output_ids]
        if return_features:
            return ForwardResult(outputs=outputs, features=features)
        return outputs[0] if len(outputs) == 1 else tuple(outputs)


def _as_spec(graph_spec: GraphSpec | Mapping[str, Any]) -> GraphSpec:
    if isinstance(graph_spec, GraphSpec):
        return graph_spec
    return GraphSpec.model_validate(graph_spec)


def _topological_order(node_ids: list[str], inputs_of: Mapping[str, list[str]]) -> list[str]:
    """Kahn's algorithm, preferring declaration order among ready nodes."""
    pending = {nid: {src for src in inputs_of[nid] if src != INPUT_ID} for nid in node_ids}
    order: list[str] = []
    while len(order) < len(node_ids):
        ready = [nid for nid in node_ids if nid not in order and not pending[nid]]
        if not ready:
            stuck = [nid for nid in node_ids if nid not in order]
            make_error(f"Graph contains a cycle through nodes: {', '.join(stuck)}", GraphStructureError)
        nid = ready[0]
        order.append(nid)
        for deps in pending.values():
            deps.discard(nid)
    return order


def _make_layer(node: NodeDef, in_channels: list[int]) -> nn.Module:
    p = node.params
    kind = node.kind
    if kind in (NodeKind.CONV, NodeKind.HEAD):
        kernel = int(p.get("kernel", 1))
        declared_in = int(p.get("in_channels", in_channels[0]))
        if declared_in != in_channels[0]:
            make_error(
                f"Node '{node.id}' declares in_channels={declared_in} but its producer provides {in_channels[0]}",
                GraphStructureError,
            )
        if int(p.get("stride", 1)) < 1:
            make_error(f"Node '{node.id}' has stride < 1", GraphStructureError)
        return nn.Conv2d(
            declared_in,
            int(p["out_channels"]),
            kernel,
            stride=int(p.get("stride", 1)),
            padding=int(p.get("padding", kernel // 2)),
            bias=bool(p.get("bias", kind == NodeKind.HEAD)),
        )
    if kind == NodeKind.BN:
        channels = int(p.get("channels", in_channels[0]))
        if channels != in_channels[0]:
            make_error(
                f"Node '{node.id}' declares {channels} channels but its producer provides {in_channels[0]}",
                GraphStructureError,
            )
        eps = float(p.get("eps", 1e-5))
        if eps <= 0:
            make_error(f"Node '{node.id}' needs eps > 0", GraphStructureError)
        return nn.BatchNorm2d(channels, eps=eps, momentum=float(p.get("momentum", 0.1)))
    if kind == NodeKind.ACT:
        fn = p.get("fn", "silu")
        if fn not in _ACTIVATIONS:
            make_error(f"Node '{node.id}' uses unknown activation '{fn}'", GraphStructureError)
        return _ACTIVATIONS[fn]()
    if kind == NodeKind.UPSAMPLE:
        return nn.Upsample(scale_factor=int(p.get("factor", 2)), mode="nearest")
    if kind == NodeKind.MAXPOOL:
        return MaxPoolChain(int(p.get("kernel", 5)), int(p.get("repeats", 1)))
    if kind == NodeKind.CONCAT:
        return Concat()
    if kind == NodeKind.ADD:
        if in_channels[0] != in_channels[1]:
            make_error(
                f"Node '{node.id}' adds producers with {in_channels[0]} and {in_channels[1]} channels",
                GraphStructureError,
            )
        return Add()
    make_error(f"Node '{node.id}' has unsupported kind '{kind}'", GraphStructureError)


def _init_layer(layer: nn.Module) -> None:
    if isinstance(layer, nn.Conv2d):
        nn.init.kaiming_normal_(layer.weight, mode="fan_in", nonlinearity="relu")
        if layer.bias is not None:
            nn.init.zeros_(layer.bias)
    elif isinstance(layer, nn.BatchNorm2d):
        nn.init.ones_(layer.weight)
        nn.init.zeros_(layer.bias)


def build_graph(graph_spec: GraphSpec | Mapping[str, Any], seed: int = 0) -> ModelGraph:
    """Build a ModelGraph from a spec, checking channel arithmetic node by node.

    Conv weights get Kaiming fan-in initialisation and BN starts at
    gamma=1, beta=0; the result is identical for identical ``seed``.
    """
    spec = _as_spec(graph_spec)
    ids = [node.id for node in spec.nodes]
    for nid in ids:
        if nid == INPUT_ID or not _NODE_ID.match(nid):
            make_error(f"Invalid node id '{nid}'", GraphStructureError)
    if len(set(ids)) != len(ids):
        dupes = sorted({nid for nid in ids if ids.count(nid) > 1})
        make_error(f"Duplicate node ids: {', '.join(dupes)}", GraphStructureError)

    inputs_of: dict[str, list[str]] = {nid: [] for nid in ids}
    for edge in spec.edges:
        if edge.dst not in inputs_of:
            make_error(f"Edge points to unknown node '{edge.dst}'", GraphStructureError)
        if edge.src != INPUT_ID and edge.src not in inputs_of:
            make_error(f"Edge starts at unknown node '{edge.src}'", GraphStructureError)
        inputs_of[edge.dst].append(edge.src)
    for nid in ids:
        if not inputs_of[nid]:
            inputs_of[nid] = [INPUT_ID]

    order = _topological_order(ids, inputs_of)
    nodes = {node.id: node for node in spec.nodes}
    channels: dict[str, int] = {INPUT_ID: spec.input_channels}
    layers: dict[str, nn.Module] = {}

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for nid in order:
            node = nodes[nid]
            arity = len(inputs_of[nid])
            if node.kind in _SINGLE_INPUT and arity != 1:
                make_error(f"Node '{nid}' ({node.kind.value}) expects 1 producer, got {arity}", GraphStructureError)
            if node.kind == NodeKind.ADD and arity != 2:
                make_error(f"Node '{nid}' (add) expects 2 producers, got {arity}", GraphStructureError)
            in_channels = [channels[src] for src in inputs_of[nid]]
            layer = _make_layer(node, in_channels)
            _init_layer(layer)
            layers[nid] = layer
            if node.kind in (NodeKind.CONV, NodeKind.HEAD):
                channels[nid] = layer.out_channels
            elif node.kind == NodeKind.CONCAT:
                channels[nid] = sum(in_channels)
            else:
                channels[nid] = in_channels[0]

    consumed = {src for srcs in inputs_of.values() for src in srcs}
    outputs = spec.outputs or [nid for nid in order if nid not in consumed]
    for oid in outputs:
        if oid not in nodes:
            make_error(f"Output '{oid}' is not a node", GraphStructureError)
    graph = ModelGraph(spec.input_channels, order, {n.id: n.kind for n in spec.nodes}, inputs_of, outputs, layers)
    logger.info(f"Built graph with {len(order)} nodes, outputs {outputs}")
    return graph


def to_spec(graph: ModelGraph) -> GraphSpec:
    nodes = []
    for nid in graph.order:
        kind = graph.kinds[nid]
        layer = graph.layers[nid]
        if kind in (NodeKind.CONV, NodeKind.HEAD):
            params = {
                "in_channels": layer.in_channels,
                "out_channels": layer.out_channels,
                "kernel": layer.kernel_size[0],
                "stride": layer.stride[0],
                "padding": layer.padding[0],
                "bias": layer.bias is not None,
            }
        elif kind == NodeKind.BN:
            params = {"channels": layer.num_features, "eps": layer.eps, "momentum": layer.momentum}
        elif kind == NodeKind.ACT:
            params = {"fn": next(name for name, cls in _ACTIVATIONS.items() if type(layer) is cls)}
        elif kind == NodeKind.UPSAMPLE:
            params = {"factor": int(layer.scale_factor)}
        elif kind == NodeKind.MAXPOOL:
            params = {"kernel": layer.kernel, "repeats": layer.repeats}
        else:
            params = {}
        nodes.append(NodeDef(id=nid, kind=kind, params=params))
    edges = [EdgeDef(src=src, dst=nid) for nid in graph.order for src in graph.inputs_of[nid]]
    return GraphSpec(input_channels=graph.input_channels, nodes=nodes, edges=edges, outputs=graph.output_ids)


def validate(graph: ModelGraph) -> list[str]:
    """Return every violated graph invariant; an empty list means the graph is valid."""
    violations: list[str] = []
    seen = {INPUT_ID}
    for nid in graph.order:
        for src in graph.inputs_of.get(nid, []):
            if src not in seen:
                violations.append(f"{nid}: producer '{src}' is missing or not earlier in topological order")
        seen.add(nid)
    if violations:
        return violations
    if INPUT_ID in graph.kinds:
        violations.append("node id 'input' is reserved for the graph input")
    if not any(INPUT_ID in srcs for srcs in graph.inputs_of.values()):
        violations.append("graph input is not consumed by any node")
    if not graph.output_ids:
        violations.append("graph has no outputs")
    for oid in graph.output_ids:
        if oid not in graph.kinds:
            violations.append(f"output '{oid}' is not a node")

    for nid in graph.order:
        kind = graph.kinds[nid]
        layer = graph.layers[nid]
        srcs = graph.inputs_of[nid]
        try:
            provided = [graph.channels_of(src) for src in srcs]
        except (AttributeError, IndexError) as e:
            violations.append(f"{nid}: cannot resolve producer channels ({e})")
            continue
        if kind in (NodeKind.CONV, NodeKind.HEAD):
            k = layer.kernel_size[0]
            expected = (layer.out_channels, layer.in_channels, k, k)
            if tuple(layer.weight.shape) != expected:
                violations.append(f"{nid}: weight shape {tuple(layer.weight.shape)} != declared {expected}")
            if layer.bias is not None and tuple(layer.bias.shape) != (layer.out_channels,):
                violations.append(f"{nid}: bias length {layer.bias.shape[0]} != {layer.out_channels}")
            if layer.stride[0] < 1:
                violations.append(f"{nid}: stride must be >= 1")
            if provided != [layer.in_channels]:
                violations.append(f"{nid}: declares {layer.in_channels} input channels, producers give {sum(provided)}")
        elif kind == NodeKind.BN:
            c = layer.num_features
            for name in ("weight", "bias", "running_mean", "running_var"):
                vec = getattr(layer, name)
                if vec is None or vec.shape != (c,):
                    violations.append(f"{nid}: {name} length does not match {c} channels")
            if layer.eps <= 0:
                violations.append(f"{nid}: eps must be > 0")
            if layer.running_var is not None and bool((layer.running_var < 0).any()):
                violations.append(f"{nid}: running_var has negative entries")
            if provided != [c]:
                violations.append(f"{nid}: declares {c} channels, producer gives {sum(provided)}")
        elif kind == NodeKind.ADD:
            if len(provided) != 2 or provided[0] != provided[1]:
                violations.append(f"{nid}: add producers have mismatched channels {provided}")
        elif kind in _SINGLE_INPUT and len(srcs) != 1:
            violations.append(f"{nid}: expects exactly one producer")
    return violations


def forward(graph: ModelGraph, x: torch.Tensor, mode: str = "eval") -> ForwardResult:
    """Run the graph in ``train`` or ``eval`` mode, keeping every feature map by node id."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    graph.train(mode == "train")
    return graph(x, return_features=True)


class _SlotUnion:
    def __init__(self):
        self.parent: dict[tuple[str, int], tuple[str, int]] = {}

    def find(self, slot: tuple[str, int]) -> tuple[str, int]:
        self.parent.setdefault(slot, slot)
        while self.parent[slot] != slot:
            self.parent[slot] = self.parent[self.parent[slot]]
            slot = self.parent[slot]
        return slot

    def union(self, a: tuple[str, int], b: tuple[str, int]) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def channel_sources(graph: ModelGraph) -> dict[str, list[tuple[str, int]]]:
    """For every node, the (source id, channel) each output channel originates from.

    Sources are prunable BN layers, BN-less convs/heads, or the graph input.
    """
    prunable = graph.prunable_layers()
    sources: dict[str, list[tuple[str, int]]] = {
        INPUT_ID: [(INPUT_ID, i) for i in range(graph.input_channels)]
    }
    for nid in graph.order:
        kind = graph.kinds[nid]
        srcs = graph.inputs_of[nid]
        if kind == NodeKind.BN and nid in prunable:
            sources[nid] = [(nid, i) for i in range(graph.layers[nid].num_features)]
        elif kind in (NodeKind.CONV, NodeKind.HEAD):
            sources[nid] = [(nid, i) for i in range(graph.layers[nid].out_channels)]
        elif kind == NodeKind.CONCAT:
            sources[nid] = [slot for src in srcs for slot in sources[src]]
        else:
            sources[nid] = list(sources[srcs[0]])
    return sources


def _fan_out(graph: ModelGraph, node_id: str) -> int:
    """Consumers reached through channel-preserving nodes, counted per edge."""
    total = 0
    for consumer in graph.consumers_of(node_id):
        edges = graph.inputs_of[consumer].count(node_id)
        if graph.kinds[consumer] in CHANNEL_PRESERVING:
            total += edges * max(_fan_out(graph, consumer), 1)
        else:
            total += edges
    return total


def resolve_coupling(graph: ModelGraph) -> list[ChannelGroup]:
    """Channel groups induced by residual adds and by producers with several consumers.

    Add pairs channel i of both producers (transitively across chained adds);
    Concat needs no group because consumers are remapped by offset instead.
    """
    prunable = graph.prunable_layers()
    sources = channel_sources(graph)
    union = _SlotUnion()
    for nid in graph.order:
        if graph.kinds[nid] == NodeKind.ADD:
            a, b = graph.inputs_of[nid]
            for slot_a, slot_b in zip(sources[a], sources[b]):
                union.union(slot_a, slot_b)

    rank = {nid: i for i, nid in enumerate(graph.order)}
    rank[INPUT_ID] = -1
    components: dict[tuple[str, int], list[tuple[str, int]]] = {}
    for slot in union.parent:
        components.setdefault(union.find(slot), []).append(slot)

    groups: list[ChannelGroup] = []
    grouped: set[tuple[str, int]] = set()
    for slots in components.values():
        if len(slots) < 2:
            continue
        members = sorted((s for s in slots if s[0] in prunable), key=lambda s: (rank[s[0]], s[1]))
        if not members:
            continue
        pinned = any(s[0] not in prunable for s in slots)
        groups.append(ChannelGroup(tuple(members), CouplingReason.RESIDUAL_ADD, pinned))
        grouped.update(members)

    for bn_id in prunable:
        if _fan_out(graph, bn_id) > 1:
            for ch in range(graph.layers[bn_id].num_features):
                if (bn_id, ch) not in grouped:
                    groups.append(ChannelGroup(((bn_id, ch),), CouplingReason.SHARED_PRODUCER))

    groups.sort(key=lambda g: (rank[g.members[0][0]], g.members[0][1]))
    logger.debug(f"Resolved {len(groups)} channel groups")
    return groups


def _check_kept(layer_id: str, kept: Sequence[int], channels: int) -> list[int]:
    kept = list(kept)
    if not kept:
        make_error(f"Plan keeps no channels of layer '{layer_id}'", DegenerateLayerError)
    if kept != sorted(set(kept)):
        make_error(f"Kept channels of layer '{layer_id}' must be sorted and unique", GraphStructureError)
    if kept[0] < 0 or kept[-1] >= channels:
        make_error(f"Kept channels of layer '{layer_id}' fall outside [0, {channels})", GraphStructureError)
    return kept


def kept_channels(graph: ModelGraph, per_layer: Mapping[str, Sequence[int]]) -> dict[str, list[int]]:
    """Original indices of the channels each node still produces under ``per_layer``."""
    prunable = graph.prunable_layers()
    for layer_id in per_layer:
        if layer_id not in prunable:
            make_error(f"Plan references '{layer_id}', which is not a prunable conv+BN layer", GraphStructureError)
    conv_plan = {prunable[bn]: bn for bn in per_layer}

    kept: dict[str, list[int]] = {INPUT_ID: list(range(graph.input_channels))}
    for nid in graph.order:
        kind = graph.kinds[nid]
        srcs = graph.inputs_of[nid]
        if kind == NodeKind.CONV and nid in conv_plan:
            bn = conv_plan[nid]
            kept[nid] = _check_kept(bn, per_layer[bn], graph.layers[nid].out_channels)
        elif kind in (NodeKind.CONV, NodeKind.HEAD):
            kept[nid] = list(range(graph.layers[nid].out_channels))
        elif kind == NodeKind.CONCAT:
            offset, merged = 0, []
            for src in srcs:
                merged.extend(offset + i for i in kept[src])
                offset += graph.channels_of(src)
            kept[nid] = merged
        elif kind == NodeKind.ADD:
            a, b = srcs
            if kept[a] != kept[b]:
                make_error(f"Add node '{nid}' receives differently pruned producers '{a}' and '{b}'", CouplingError)
            kept[nid] = list(kept[a])
        else:
            kept[nid] = list(kept[srcs[0]])
    return kept


def index_map(kept: Iterable[int]) -> dict[int, int]:
    return {orig: new for new, orig in enumerate(kept)}


def _check_groups(graph: ModelGraph, per_layer: Mapping[str, Sequence[int]]) -> None:
    for group in resolve_coupling(graph):
        fates = {
            ch in set(per_layer[layer]) if layer in per_layer else True
            for layer, ch in group.members
        }
        if len(fates) > 1:
            make_error(f"Plan splits the {group.reason.value} group {list(group.members)}", CouplingError)
        if group.pinned and fates == {False}:
            make_error(f"Plan prunes pinned group {list(group.members)}", CouplingError)


def _slice_conv(conv: nn.Conv2d, in_idx: list[int], out_idx: list[int]) -> nn.Conv2d:
    new = nn.Conv2d(
        len(in_idx),
        len(out_idx),
        conv.kernel_size,
        stride=conv.stride,
        padding=conv.padding,
        bias=conv.bias is not None,
    ).to(conv.weight.dtype)
    out_t = torch.tensor(out_idx, dtype=torch.long)
    in_t = torch.tensor(in_idx, dtype=torch.long)
    with torch.no_grad():
        new.weight.copy_(conv.weight.index_select(0, out_t).index_select(1, in_t))
        if conv.bias is not None:
            new.bias.copy_(conv.bias.index_select(0, out_t))
    new.weight.requires_grad_(conv.weight.requires_grad)
    return new


def _slice_bn(bn: nn.BatchNorm2d, idx: list[int]) -> nn.BatchNorm2d:
    new = nn.BatchNorm2d(len(idx), eps=bn.eps, momentum=bn.momentum).to(bn.weight.dtype)
    t = torch.tensor(idx, dtype=torch.long)
    with torch.no_grad():
        new.weight.copy_(bn.weight.index_select(0, t))
        new.bias.copy_(bn.bias.index_select(0, t))
        new.running_mean.copy_(bn.running_mean.index_select(0, t))
        new.running_var.copy_(bn.running_var.index_select(0, t))
        new.num_batches_tracked.copy_(bn.num_batches_tracked)
    return new


def apply_plan(graph: ModelGraph, plan: "PruningPlan | Mapping[str, Sequence[int]]") -> ModelGraph:
    """Return a new graph with the plan's channels removed; ``graph`` is left untouched.

    Pruned convs keep the selected filters, BN vectors are sliced to the same
    indices and every consumer keeps only the matching input slices (with
    Concat offsets remapped).
    """
    per_layer = plan.per_layer if hasattr(plan, "per_layer") else plan
    kept = kept_channels(graph, per_layer)
    _check_groups(graph, per_layer)

    pruned = copy.deepcopy(graph)
    for nid in graph.order:
        kind = graph.kinds[nid]
        layer = graph.layers[nid]
        if kind in (NodeKind.CONV, NodeKind.HEAD):
            in_idx = kept[graph.inputs_of[nid][0]]
            if len(in_idx) != layer.in_channels or len(kept[nid]) != layer.out_channels:
                pruned.layers[nid] = _slice_conv(layer, in_idx, kept[nid])
        elif kind == NodeKind.BN and len(kept[nid]) != layer.num_features:
            pruned.layers[nid] = _slice_bn(layer, kept[nid])
    pruned.train(graph.training)

    violations = validate(pruned)
    if violations:
        make_error(f"Pruned graph is inconsistent: {'; '.join(violations)}", GraphStructureError)
    removed = sum(graph.layers[bn].num_features - len(k) for bn, k in per_layer.items())
    logger.info(f"Applied plan over {len(per_layer)} layers, removed {removed} channels")
    return pruned


def serialize_graph(graph: ModelGraph, blob_name: str = "weights.bin") -> tuple[bytes, bytes]:
    """JSON document plus little-endian float32 blob; float32 weights round-trip bit-exactly."""
    doc = to_spec(graph).model_dump(mode="json", by_alias=True)
    tensors, chunks, offset = [], [], 0
    for key, value in graph.state_dict().items():
        if not value.is_floating_point():
            continue
        data = np.ascontiguousarray(value.detach().cpu().numpy(), dtype="<f4").tobytes()
        tensors.append({"key": key, "offset": offset, "shape": list(value.shape)})
        chunks.append(data)
        offset += len(data)
    doc["format"] = GRAPH_FORMAT
    doc["weights"] = {"file": blob_name, "dtype": "<f4", "tensors": tensors}
    return json.dumps(doc, indent=2, sort_keys=True).encode("utf-8"), b"".join(chunks)


def deserialize_graph(doc_bytes: bytes, blob: bytes) -> ModelGraph:
    doc = json.loads(doc_bytes.decode("utf-8"))
    if doc.get("format") != GRAPH_FORMAT:
        make_error(f"Unsupported graph format {doc.get('format')!r}", GraphStructureError)
    weights = doc.pop("weights")
    doc.pop("format")
    graph = build_graph(doc)
    state = graph.state_dict()
    for entry in weights["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        array = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"]).reshape(entry["shape"])
        if entry["key"] not in state:
            make_error(f"Weight '{entry['key']}' does not belong to the graph", GraphStructureError)
        state[entry["key"]] = torch.from_numpy(array.astype(np.float32))
    graph.load_state_dict(state)
    return graph


def save_graph(graph: ModelGraph, path: Path) -> Path:
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    doc, blob = serialize_graph(graph, blob_path.name)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(doc)
    blob_path.write_bytes(blob)
    logger.info(f"Saved graph to {path}")
    return path


def load_graph(path: Path) -> ModelGraph:
    path = handle_input_file(path)
    doc = path.read_bytes()
    blob_name = json.loads(doc.decode("utf-8"))["weights"]["file"]
    return deserialize_graph(doc, handle_input_file(path.parent / blob_name).read_bytes())
