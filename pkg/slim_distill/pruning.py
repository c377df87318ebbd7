"""BN-gamma channel pruning at a fixed per-layer ratio."""

import logging
import math
from pathlib import Path
from typing import Mapping, Sequence

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from slim_distill.graph import (
    INPUT_ID,
    ChannelGroup,
    ModelGraph,
    NodeKind,
    apply_plan,
    index_map,
    kept_channels,
    resolve_coupling,
)
from slim_distill.model import Rounding
from slim_distill.utils import GraphStructureError, ScheduleDomainError, make_error

logger = logging.getLogger("slim_distill.pruning")


class PruningPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ratio: float = Field(0.5, ge=0, lt=1)
    floor: int = Field(2, ge=1)
    rounding: Rounding = Rounding.NONE
    original_channels: dict[str, int] = Field(default_factory=dict)
    per_layer: dict[str, list[int]] = Field(default_factory=dict)
    index_maps: dict[str, dict[int, int]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_kept_lists(self) -> "PruningPlan":
        for layer_id, kept in self.per_layer.items():
            if not kept:
                raise ValueError(f"layer '{layer_id}' keeps no channels")
            if kept != sorted(set(kept)):
                raise ValueError(f"layer '{layer_id}' kept list must be sorted and unique")
            channels = self.original_channels.get(layer_id)
            if channels is not None:
                if kept[0] < 0 or kept[-1] >= channels:
                    raise ValueError(f"layer '{layer_id}' keeps channels outside [0, {channels})")
                if len(kept) < min(self.floor, channels):
                    raise ValueError(f"layer '{layer_id}' keeps fewer than floor={self.floor} channels")
            expected = index_map(kept)
            if layer_id in self.index_maps and self.index_maps[layer_id] != expected:
                raise ValueError(f"index map of layer '{layer_id}' is not the kept-order bijection")
        return self

    def kept_count(self, layer_id: str) -> int:
        return len(self.per_layer[layer_id])

    def summary(self) -> list[dict]:
        return [
            {"layer": layer_id, "original": self.original_channels[layer_id], "kept": len(kept)}
            for layer_id, kept in self.per_layer.items()
        ]

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2))
        logger.info(f"Saved pruning plan to {path}")
        return path

    @classmethod
    def load(cls, path: Path) -> "PruningPlan":
        return cls.model_validate_json(Path(path).read_text())


def rank_channels(gamma: torch.Tensor | Sequence[float]) -> list[int]:
    """Channel indices ascending by |gamma|; ties keep ascending channel order."""
    gamma = torch.as_tensor(gamma)
    if gamma.numel() == 0:
        make_error("Cannot rank an empty gamma vector", ScheduleDomainError)
    return torch.argsort(gamma.detach().abs(), stable=True).tolist()


def group_importance(group: ChannelGroup, gammas_by_layer: Mapping[str, torch.Tensor]) -> float:
    total = 0.0
    for layer_id, ch in group.members:
        gamma = gammas_by_layer.get(layer_id)
        if gamma is None or not 0 <= ch < gamma.numel():
            make_error(f"Group member ({layer_id}, {ch}) does not resolve to a BN channel", GraphStructureError)
        total += abs(float(gamma[ch]))
    return total


def kept_budget(channels: int, ratio: float, floor: int, rounding: Rounding = Rounding.NONE) -> int:
    kept = min(max(channels - math.floor(channels * ratio), floor), channels)
    if rounding == Rounding.MULTIPLE_OF_8:
        kept = min(-(-kept // 8) * 8, channels)
    return kept


def make_plan(
    graph: ModelGraph,
    gammas: Mapping[str, torch.Tensor],
    ratio: float = 0.5,
    floor: int = 2,
    rounding: Rounding = Rounding.NONE,
) -> PruningPlan:
    """Per-layer plan keeping the largest-|gamma| channels.

    Coupled groups are decided once, by their summed importance, inside the
    layer of their first member in topological order; later layers see those
    channels as already fixed. Convs without BN are never pruned.
    """
    if not 0 <= ratio < 1:
        make_error(f"Pruning ratio must be in [0, 1), got {ratio}", ScheduleDomainError)
    prunable = graph.prunable_layers()
    for layer_id in prunable:
        if layer_id not in gammas:
            make_error(f"No gamma vector for layer '{layer_id}'", GraphStructureError)

    coupled = [g for g in resolve_coupling(graph) if len(g.members) > 1 or g.pinned]
    group_of = {slot: g for g in coupled for slot in g.members}
    fate: dict[tuple[str, int], bool] = {}
    for g in coupled:
        if g.pinned:
            fate.update({slot: True for slot in g.members})

    per_layer: dict[str, list[int]] = {}
    for layer_id in (nid for nid in graph.order if nid in prunable):
        gamma = gammas[layer_id].detach()
        channels = gamma.numel()
        target = kept_budget(channels, ratio, floor, rounding)

        fixed_kept: list[int] = []
        units: dict[object, list[int]] = {}
        importance: dict[object, float] = {}
        for ch in range(channels):
            slot = (layer_id, ch)
            if slot in fate:
                if fate[slot]:
                    fixed_kept.append(ch)
                continue
            group = group_of.get(slot)
            key = group if group is not None else ch
            units.setdefault(key, []).append(ch)
            if key not in importance:
                importance[key] = group_importance(group, gammas) if group is not None else abs(float(gamma[ch]))

        ordered = sorted(units, key=lambda key: (importance[key], units[key][0]))
        to_prune = sum(len(chs) for chs in units.values()) - max(target - len(fixed_kept), 0)
        kept = list(fixed_kept)
        pruned_slots = 0
        for key in ordered:
            if pruned_slots + len(units[key]) <= to_prune:
                pruned_slots += len(units[key])
                decision = False
            else:
                kept.extend(units[key])
                decision = True
            if isinstance(key, ChannelGroup):
                fate.update({slot: decision for slot in key.members})

        per_layer[layer_id] = sorted(kept)
        if len(fixed_kept) == channels and target < channels:
            logger.warning(f"{layer_id}: all {channels} channels fixed by pinned or coupled groups, layer stays unpruned")
        elif len(kept) != target:
            logger.debug(f"{layer_id}: kept {len(kept)} of {channels} (budget {target}) due to coupling")

    plan = PruningPlan(
        ratio=ratio,
        floor=floor,
        rounding=rounding,
        original_channels={layer_id: graph.channels_of(layer_id) for layer_id in per_layer},
        per_layer=per_layer,
        index_maps={layer_id: index_map(kept) for layer_id, kept in per_layer.items()},
    )
    before = sum(plan.original_channels.values())
    after = sum(len(k) for k in per_layer.values())
    logger.info(f"Planned ratio {ratio}: {after}/{before} BN channels kept across {len(per_layer)} layers")
    return plan


def node_index_maps(graph: ModelGraph, plan: PruningPlan) -> dict[str, dict[int, int]]:
    """For every node of the unpruned ``graph``: original channel -> surviving channel index."""
    kept = kept_channels(graph, plan.per_layer)
    return {nid: index_map(k) for nid, k in kept.items() if nid != INPUT_ID}


def prune(graph: ModelGraph, plan: PruningPlan) -> tuple[ModelGraph, dict[str, dict[int, int]]]:
    """Pruned graph plus the per-node index maps the distillation stage aligns with."""
    maps = node_index_maps(graph, plan)
    return apply_plan(graph, plan), maps


def predict_param_count(graph: ModelGraph, plan: PruningPlan) -> int:
    """Parameter count of ``apply_plan(graph, plan)`` computed from kept counts alone."""
    kept = kept_channels(graph, plan.per_layer)
    total = 0
    for nid in graph.order:
        kind = graph.kinds[nid]
        layer = graph.layers[nid]
        if kind in (NodeKind.CONV, NodeKind.HEAD):
            k = layer.kernel_size[0]
            c_in = len(kept[graph.inputs_of[nid][0]])
            c_out = len(kept[nid])
            total += c_in * c_out * k * k + (c_out if layer.bias is not None else 0)
        elif kind == NodeKind.BN:
            total += 2 * len(kept[nid])
    return total
