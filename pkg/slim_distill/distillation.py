"""Channel-wise distillation losses.

Each channel of a feature map is turned into a distribution over its H*W
spatial positions; the student is pulled toward the teacher with a KL term
scaled by tau^2 / C.
"""

from __future__ import annotations

import logging
import math
from typing import Mapping, Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from slim_distill.graph import ModelGraph
from slim_distill.model import Alignment, AlphaSchedule, DistillationConfig
from slim_distill.utils import (
    ConfigError,
    GraphStructureError,
    NumericError,
    ScheduleDomainError,
    ShapeError,
    make_error,
)

logger = logging.getLogger("slim_distill.distillation")


def _check_feature_map(fm: torch.Tensor, name: str = "feature map") -> None:
    if fm.dim() != 4 or min(fm.shape[1:]) < 1:
        make_error(f"{name} must be [batch, C, H, W] with C, H, W >= 1, got {list(fm.shape)}", ShapeError)


def _spatial_logits(fm: torch.Tensor, tau: float) -> torch.Tensor:
    if tau <= 0:
        make_error(f"Temperature must be > 0, got {tau}", ConfigError)
    _check_feature_map(fm)
    if not bool(torch.isfinite(fm).all()):
        make_error("Feature map contains non-finite values", NumericError)
    n, c, h, w = fm.shape
    logits = fm.reshape(n, c, h * w) / tau
    return logits - logits.amax(dim=-1, keepdim=True)


def channel_softmax(fm: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-channel softmax over spatial positions; same shape as ``fm``."""
    return torch.softmax(_spatial_logits(fm, tau), dim=-1).reshape(fm.shape)


def cwd_loss(teacher: torch.Tensor, student: torch.Tensor, tau: float) -> torch.Tensor:
    """(tau^2 / C) * sum over channels of KL(teacher || student), averaged over the batch.

    The teacher is detached, so gradients reach the student only.
    """
    if teacher.shape != student.shape:
        make_error(f"Teacher {list(teacher.shape)} and student {list(student.shape)} differ", ShapeError)
    log_p_t = F.log_softmax(_spatial_logits(teacher.detach(), tau), dim=-1)
    log_p_s = F.log_softmax(_spatial_logits(student, tau), dim=-1)
    kl = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=-1)
    channels = teacher.shape[1]
    loss = (tau**2 / channels) * kl.sum(dim=1).mean()
    return loss.clamp_min(0.0)


class ChannelProjector(nn.Module):
    """1x1 channel mixing that lifts student features to the teacher's width."""

    def __init__(self, student_channels: int, teacher_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(student_channels, teacher_channels, kernel_size=1, bias=False)
        nn.init.kaiming_normal_(self.proj.weight, mode="fan_in", nonlinearity="linear")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


def align_channels(
    teacher_fm: torch.Tensor,
    student_fm: torch.Tensor,
    alignment: Alignment = Alignment.INDEX_MAP,
    index_map: Optional[Mapping[int, int]] = None,
    projection: Optional[nn.Module] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    _check_feature_map(teacher_fm, "teacher feature map")
    _check_feature_map(student_fm, "student feature map")
    if alignment == Alignment.LEARNED_PROJECTION:
        if projection is None:
            make_error("learned_projection alignment needs a projection module", ConfigError)
        student_fm = projection(student_fm)
    else:
        if index_map is None:
            make_error("index_map alignment needs the pruning index map of the tap layer", ConfigError)
        teacher_idx = [orig for orig, _ in sorted(index_map.items(), key=lambda kv: kv[1])]
        if teacher_idx and (min(teacher_idx) < 0 or max(teacher_idx) >= teacher_fm.shape[1]):
            make_error(
                f"Index map references teacher channel outside [0, {teacher_fm.shape[1]})",
                GraphStructureError,
            )
        if len(teacher_idx) != student_fm.shape[1]:
            make_error(
                f"Index map has {len(teacher_idx)} entries but the student has {student_fm.shape[1]} channels",
                ShapeError,
            )
        teacher_fm = teacher_fm.index_select(1, torch.tensor(teacher_idx, device=teacher_fm.device))
    if teacher_fm.shape != student_fm.shape:
        make_error(f"Aligned shapes differ: {list(teacher_fm.shape)} vs {list(student_fm.shape)}", ShapeError)
    return teacher_fm, student_fm


def alpha_at(t: int, horizon: int, cfg: DistillationConfig) -> float:
    if horizon < 0 or not 0 <= t <= horizon:
        make_error(f"Step {t} outside [0, {horizon}]", ScheduleDomainError)
    a0 = cfg.alpha0
    if cfg.alpha_schedule == AlphaSchedule.CONSTANT or horizon == 0:
        return a0
    x = t / horizon
    k = cfg.schedule_params.k
    if cfg.alpha_schedule == AlphaSchedule.EXPONENTIAL_DECAY:
        return a0 * math.exp(-k * x)
    if cfg.alpha_schedule == AlphaSchedule.TIME_BASED_DECAY:
        return a0 / (1 + k * x)
    if cfg.alpha_schedule == AlphaSchedule.COSINE_ANNEALING:
        a_min = cfg.alpha_min
        return a0 - (a0 - a_min) * (1 - math.cos(math.pi * x)) / 2
    # inverse sigmoid, scaled so that t=0 gives a0 exactly
    return a0 * (1 + math.exp(-k / 2)) / (1 + math.exp(k * (x - 0.5)))


def total_loss(task_loss, cwd_losses: Sequence, alpha: float):
    if alpha < 0:
        make_error(f"alpha must be >= 0, got {alpha}", ConfigError)
    if not cwd_losses:
        return task_loss
    return task_loss + alpha * (sum(cwd_losses) / len(cwd_losses))


def check_tap_points(cfg: DistillationConfig, teacher: ModelGraph, student: ModelGraph) -> None:
    if not cfg.tap_points:
        make_error("Distillation needs at least one tap point", ConfigError)
    for tap in cfg.tap_points:
        if tap.teacher not in teacher.kinds:
            make_error(f"Tap '{tap.teacher}' is not a node of the teacher graph", ConfigError)
        if tap.student not in student.kinds:
            make_error(f"Tap '{tap.student}' is not a node of the student graph", ConfigError)


def make_projectors(cfg: DistillationConfig, teacher: ModelGraph, student: ModelGraph) -> nn.ModuleDict:
    """One projector per tap for ``learned_projection``; empty otherwise."""
    projectors = nn.ModuleDict()
    if cfg.alignment != Alignment.LEARNED_PROJECTION:
        return projectors
    for tap in cfg.tap_points:
        projectors[tap.student] = ChannelProjector(student.channels_of(tap.student), teacher.channels_of(tap.teacher))
    return projectors


def tap_losses(
    teacher_features: Mapping[str, torch.Tensor],
    student_features: Mapping[str, torch.Tensor],
    cfg: DistillationConfig,
    index_maps: Optional[Mapping[str, Mapping[int, int]]] = None,
    projectors: Optional[nn.ModuleDict] = None,
) -> list[torch.Tensor]:
    """CWD loss at every tap point, after channel alignment."""
    losses = []
    for tap in cfg.tap_points:
        index_map = None
        if cfg.alignment == Alignment.INDEX_MAP:
            if index_maps is None or tap.student not in index_maps:
                make_error(f"No index map for tap '{tap.student}'", ConfigError)
            index_map = index_maps[tap.student]
        projection = projectors[tap.student] if projectors is not None and tap.student in projectors else None
        t_fm, s_fm = align_channels(
            teacher_features[tap.teacher], student_features[tap.student], cfg.alignment, index_map, projection
        )
        losses.append(cwd_loss(t_fm, s_fm, cfg.temperature))
    return losses
