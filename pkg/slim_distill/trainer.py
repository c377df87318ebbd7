"""Desk-scale training harness for the baseline, sparse, finetune and distill stages."""

import copy
import json
import logging
import random
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from slim_distill.data import HEATMAP_STRIDE, ToyDataset, ToyObject
from slim_distill.distillation import alpha_at, check_tap_points, make_projectors, tap_losses, total_loss
from slim_distill.graph import ModelGraph, NodeKind, load_graph, save_graph
from slim_distill.model import Alignment, TaskKind, TrainConfig
from slim_distill.pruning import PruningPlan, node_index_maps
from slim_distill.sparsity import add_sparsity_subgradient, sparsity_rate
from slim_distill.utils import ConfigError, ShapeError, handle_input_file, make_error
from slim_distill.zoo import resolve_distill_config

logger = logging.getLogger("slim_distill.trainer")

POSITIVE_WEIGHT = 4.0
MIN_PEAK_SCORE = 0.05
PRIMARY_METRIC = {TaskKind.CLASSIFICATION: "accuracy", TaskKind.HEATMAP: "ap"}
# object radius as a fraction of the image side
SIZE_BUCKETS = {"small": (0.0, 0.10), "medium": (0.10, 0.16), "large": (0.16, float("inf"))}


class Stage(str, Enum):
    BASELINE = "baseline"
    SPARSE = "sparse"
    FINETUNE = "finetune"
    DISTILL = "distill"


def seed_everything(seed: int, threads: int = 1) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True, warn_only=True)


def task_loss(output: torch.Tensor, target: torch.Tensor, kind: TaskKind) -> torch.Tensor:
    if kind == TaskKind.CLASSIFICATION:
        return F.cross_entropy(output.mean(dim=(2, 3)), target)
    if output.shape != target.shape:
        make_error(f"Head output {list(output.shape)} does not match heatmap target {list(target.shape)}", ShapeError)
    return F.binary_cross_entropy_with_logits(output, target, weight=1 + POSITIVE_WEIGHT * target)


def _param_groups(graph: ModelGraph, extra: nn.Module, weight_decay: float) -> list[dict]:
    """Weight decay on conv/head/projector weights only; BN and biases are left alone."""
    decay, no_decay = [], []
    for nid in graph.order:
        layer = graph.layers[nid]
        if graph.kinds[nid] in (NodeKind.CONV, NodeKind.HEAD):
            decay.append(layer.weight)
            if layer.bias is not None:
                no_decay.append(layer.bias)
        elif graph.kinds[nid] == NodeKind.BN:
            no_decay.extend([layer.weight, layer.bias])
    decay.extend(extra.parameters())
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def _head_output(graph: ModelGraph, images: torch.Tensor) -> torch.Tensor:
    out = graph(images)
    return out[0] if isinstance(out, tuple) else out


def _frozen_teacher(teacher: ModelGraph) -> ModelGraph:
    """Copy that normalises with batch statistics like the student; running stats stay put."""
    teacher = copy.deepcopy(teacher).requires_grad_(False)
    for nid in teacher.bn_ids():
        teacher.layers[nid].momentum = 0.0
    return teacher.train()


def train(
    graph: ModelGraph,
    dataset: ToyDataset,
    cfg: TrainConfig,
    stage: Stage | str,
    teacher: Optional[ModelGraph] = None,
    plan: Optional[PruningPlan] = None,
    *,
    val_dataset: Optional[ToyDataset] = None,
    checkpoint_path: Optional[Path] = None,
    progress: bool = True,
) -> tuple[ModelGraph, list[dict]]:
    """Train a copy of ``graph`` for ``cfg.epochs`` epochs.

    Every history entry carries the mean of each loss component over the
    epoch; ``loss`` is ``task_loss + sparsity_penalty + alpha * cwd_loss``.
    """
    stage = Stage(stage)
    if stage == Stage.SPARSE and cfg.sparsity is None:
        make_error("Sparse stage needs a sparsity schedule in its TrainConfig", ConfigError)

    dcfg, index_maps, projectors = None, None, nn.ModuleDict()
    if stage == Stage.DISTILL:
        if teacher is None or cfg.distill is None:
            make_error("Distill stage needs a teacher graph and a distillation config", ConfigError)
        dcfg = resolve_distill_config(cfg.distill)
        check_tap_points(dcfg, teacher, graph)
        if dcfg.alignment == Alignment.INDEX_MAP:
            if plan is None:
                make_error("index_map alignment needs the PruningPlan that produced the student", ConfigError)
            index_maps = node_index_maps(teacher, plan)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            projectors = make_projectors(dcfg, teacher, graph)
        teacher = _frozen_teacher(teacher)

    graph = copy.deepcopy(graph)
    history: list[dict] = []
    if cfg.epochs == 0:
        return graph, history

    loader = DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(cfg.seed),
    )
    optimizer = torch.optim.SGD(
        _param_groups(graph, projectors, cfg.weight_decay), lr=cfg.learning_rate, momentum=cfg.momentum
    )

    for epoch in range(cfg.epochs):
        graph.train()
        projectors.train()
        rate = sparsity_rate(min(epoch, cfg.sparsity.total_epochs), cfg.sparsity) if stage == Stage.SPARSE else 0.0
        alpha = alpha_at(epoch, cfg.epochs, dcfg) if dcfg is not None else 0.0
        sums = {"loss": 0.0, "task_loss": 0.0, "sparsity_penalty": 0.0, "cwd_loss": 0.0}
        steps = 0
        bar = tqdm(loader, desc=f"{stage.value} {epoch + 1}/{cfg.epochs}", leave=False, disable=not progress)
        for images, targets in bar:
            optimizer.zero_grad(set_to_none=True)
            result = graph(images, return_features=True)
            task = task_loss(result.output, targets, dataset.kind)
            loss, cwd = task, 0.0
            if dcfg is not None:
                with torch.no_grad():
                    teacher_features = teacher(images, return_features=True).features
                losses = tap_losses(teacher_features, result.features, dcfg, index_maps, projectors)
                loss = total_loss(task, losses, alpha)
                cwd = float(sum(losses).detach()) / len(losses)
            loss.backward()
            penalty = add_sparsity_subgradient(graph, rate) if stage == Stage.SPARSE else 0.0
            optimizer.step()

            sums["loss"] += float(loss.detach()) + penalty
            sums["task_loss"] += float(task.detach())
            sums["sparsity_penalty"] += penalty
            sums["cwd_loss"] += cwd
            steps += 1
            bar.set_postfix(loss=f"{float(loss.detach()) + penalty:.4f}")

        entry = {"epoch": epoch, "alpha": alpha, "sparsity_rate": rate}
        entry.update({k: v / max(steps, 1) for k, v in sums.items()})
        if val_dataset is not None:
            entry.update({f"val_{k}": v for k, v in evaluate(graph, val_dataset).items()})
        history.append(entry)
        logger.info(
            f"{stage.value} epoch {epoch + 1}/{cfg.epochs}: loss {entry['loss']:.4f} "
            f"(task {entry['task_loss']:.4f}, l1 {entry['sparsity_penalty']:.4f}, cwd {entry['cwd_loss']:.4f})"
        )
        if checkpoint_path is not None:
            save_checkpoint(graph, history, checkpoint_path)

    return graph, history


def accuracy(logits: torch.Tensor, targets: torch.Tensor) -> float:
    if logits.shape[0] == 0:
        return 0.0
    return float((logits.argmax(dim=1) == targets).float().mean())


def _average_precision(labels: np.ndarray, num_gt: int) -> Optional[float]:
    """All-point interpolated AP over detections already sorted by score."""
    if num_gt == 0:
        return None
    if labels.size == 0:
        return 0.0
    ctp = np.cumsum(labels)
    cfp = np.cumsum(1 - labels)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.flip(np.maximum.accumulate(np.flip(mpre)))
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _peaks(probs: torch.Tensor) -> list[tuple[float, int, int, int, int]]:
    """(score, image, class, gy, gx) for every 3x3 local maximum above MIN_PEAK_SCORE."""
    pooled = F.max_pool2d(probs, 3, stride=1, padding=1)
    mask = (probs == pooled) & (probs >= MIN_PEAK_SCORE)
    idx = mask.nonzero().tolist()
    scores = probs[mask].tolist()
    return [(s, n, c, y, x) for s, (n, c, y, x) in zip(scores, idx)]


def heatmap_ap(
    probs: torch.Tensor,
    objects: Sequence[Sequence[ToyObject]],
    tolerance: int = 1,
    radius_range: tuple[float, float] = (0.0, float("inf")),
) -> Optional[float]:
    """Mean per-class AP of heatmap peaks against object centers.

    A peak matches an unmatched center of its class in the same image within
    ``tolerance`` cells (Chebyshev). Matches to objects outside
    ``radius_range`` (pixels) are ignored; classes without objects in range
    are skipped, and None means no class had any.
    """
    lo, hi = radius_range
    detections = sorted(_peaks(probs.detach().float()), key=lambda d: (-d[0], d[1], d[2], d[3], d[4]))
    aps = []
    for cls in range(probs.shape[1]):
        gts = {n: [o for o in objs if o.cls == cls] for n, objs in enumerate(objects)}
        num_gt = sum(lo <= o.radius < hi for objs in gts.values() for o in objs)
        matched: set[tuple[int, int]] = set()
        labels = []
        for _, n, c, y, x in detections:
            if c != cls:
                continue
            best = None
            for j, o in enumerate(gts.get(n, [])):
                dist = max(abs(o.gy - y), abs(o.gx - x))
                if (n, j) not in matched and dist <= tolerance and (best is None or dist < best[0]):
                    best = (dist, j)
            if best is None:
                labels.append(0.0)
                continue
            matched.add((n, best[1]))
            if lo <= gts[n][best[1]].radius < hi:
                labels.append(1.0)
        ap = _average_precision(np.asarray(labels), num_gt)
        if ap is not None:
            aps.append(ap)
    return float(np.mean(aps)) if aps else None


def _predict(graph: ModelGraph, dataset: ToyDataset, batch_size: int) -> torch.Tensor:
    was_training = graph.training
    graph.eval()
    try:
        with torch.no_grad():
            outputs = [
                _head_output(graph, dataset.images[i : i + batch_size])
                for i in range(0, len(dataset), batch_size)
            ]
    finally:
        graph.train(was_training)
    return torch.cat(outputs)


def evaluate(graph: ModelGraph, dataset: ToyDataset, batch_size: int = 64) -> dict[str, float]:
    """Top-1 accuracy, or heatmap AP proxies (``ap`` is within one cell, ``ap_strict`` exact)."""
    output = _predict(graph, dataset, batch_size)
    if dataset.kind == TaskKind.CLASSIFICATION:
        return {"accuracy": accuracy(output.mean(dim=(2, 3)), dataset.targets)}

    probs = torch.sigmoid(output)
    image_size = probs.shape[-1] * HEATMAP_STRIDE
    metrics = {
        "ap": heatmap_ap(probs, dataset.objects, tolerance=1),
        "ap_strict": heatmap_ap(probs, dataset.objects, tolerance=0),
    }
    for bucket, (lo, hi) in SIZE_BUCKETS.items():
        metrics[f"ap_{bucket}"] = heatmap_ap(probs, dataset.objects, 1, (lo * image_size, hi * image_size))
    return {k: v for k, v in metrics.items() if v is not None}


def primary_metric(metrics: Mapping[str, float], kind: TaskKind) -> float:
    return metrics.get(PRIMARY_METRIC[kind], 0.0)


def history_path(checkpoint_path: Path) -> Path:
    path = Path(checkpoint_path)
    return path.with_name(f"{path.stem}.history.json")


def save_checkpoint(graph: ModelGraph, history: list[dict], path: Path) -> Path:
    """Graph JSON + weight blob (see ``save_graph``) + metrics-history JSON."""
    path = save_graph(graph, path)
    history_path(path).write_text(json.dumps(history, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: Path) -> tuple[ModelGraph, list[dict]]:
    path = handle_input_file(path)
    graph = load_graph(path)
    hist = history_path(path)
    history = json.loads(hist.read_text()) if hist.exists() else []
    return graph, history
