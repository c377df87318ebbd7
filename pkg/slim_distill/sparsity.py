"""Sparse training on BN scaling factors.

The rate schedule decays (or, inverted, ramps) between ``initial_rate`` and
``0.1 * initial_rate`` over the run; the penalty is L1 on every BN gamma.
"""

import logging
from collections import OrderedDict

import torch

from slim_distill.graph import ModelGraph
from slim_distill.model import ScheduleDirection, SparsityScheduleConfig
from slim_distill.utils import ScheduleDomainError, make_error

logger = logging.getLogger("slim_distill.sparsity")


def sparsity_rate(e: int, cfg: SparsityScheduleConfig) -> float:
    if not 0 <= e <= cfg.total_epochs:
        make_error(f"Epoch {e} outside [0, {cfg.total_epochs}]", ScheduleDomainError)
    progress = 0.9 * e / cfg.total_epochs
    if cfg.direction == ScheduleDirection.INVERTED_RAMP:
        return cfg.initial_rate * (0.1 + progress)
    return cfg.initial_rate * (1 - progress)


def collect_bn_gammas(graph: ModelGraph) -> "OrderedDict[str, torch.Tensor]":
    """BN id -> gamma (a live view of the parameter), in topological order."""
    return OrderedDict((nid, graph.layers[nid].weight) for nid in graph.bn_ids())


def l1_penalty(gammas: torch.Tensor, rate: float) -> torch.Tensor:
    if rate < 0:
        make_error(f"Sparsity rate must be >= 0, got {rate}", ScheduleDomainError)
    return rate * gammas.abs().sum()


def l1_subgradient(gammas: torch.Tensor, rate: float) -> torch.Tensor:
    # sign(0) = 0 picks the zero subgradient at the kink
    if rate < 0:
        make_error(f"Sparsity rate must be >= 0, got {rate}", ScheduleDomainError)
    return rate * torch.sign(gammas)


def add_sparsity_subgradient(graph: ModelGraph, rate: float) -> float:
    """Add the L1 subgradient to every gamma's grad; returns the penalty value."""
    penalty = 0.0
    for gamma in collect_bn_gammas(graph).values():
        with torch.no_grad():
            if gamma.grad is None:
                gamma.grad = torch.zeros_like(gamma)
            gamma.grad.add_(l1_subgradient(gamma, rate))
            penalty += float(l1_penalty(gamma, rate))
    return penalty
