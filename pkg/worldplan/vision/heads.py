"""Stage-1 perception heads and their losses (detection, waypoints, traffic light)."""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from worldplan.microworld.expert import PerceptionTargets
from worldplan.vision.encoder import VisionTokenSet

BOX_CLASSES = ("vehicle", "pedestrian")
LIGHT_CLASSES = ("red", "green", "none")
BOX_TERMS = 6  # dx, dy, log length, log width, sin yaw, cos yaw


@dataclass
class PerceptionOutputs:
    """Raw head outputs for a batch of frames."""

    objectness: Tensor  # (batch, H*W)
    class_logits: Tensor  # (batch, H*W, 2)
    boxes: Tensor  # (batch, H*W, 6)
    waypoints: Tensor  # (batch, 4, 2)
    light_logits: Tensor  # (batch, 3)


@dataclass
class DetectionTargets:
    """Dense per-cell detection targets after matching."""

    objectness: Tensor
    classes: Tensor
    boxes: Tensor
    matched: Tensor


@dataclass
class PerceptionLosses:
    """The three Stage-1 losses and their weighted total."""

    det: Tensor
    wp: Tensor
    light: Tensor
    total: Tensor


def cell_centers(bev_size: int, bev_range: float) -> np.ndarray:
    """Return the ego-frame centers of the BEV grid, row-major, shape (H*W, 2).

    Row 0 is the farthest ahead and column 0 the farthest left.
    """
    cell = 2.0 * bev_range / bev_size
    index = np.arange(bev_size)
    coords = bev_range - (index + 0.5) * cell
    xs, ys = np.meshgrid(coords, coords, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def greedy_match(centers: np.ndarray, grid: np.ndarray) -> List[int]:
    """Assign each box center to a distinct grid cell, closest pairs first."""
    if len(centers) == 0:
        return []
    distances = np.linalg.norm(centers[:, None, :] - grid[None, :, :], axis=-1)
    assignment = [-1] * len(centers)
    taken = set()
    for flat in np.argsort(distances, axis=None, kind="stable"):
        box, cell = divmod(int(flat), grid.shape[0])
        if assignment[box] >= 0 or cell in taken:
            continue
        assignment[box] = cell
        taken.add(cell)
        if len(taken) == len(centers):
            break
    return assignment


def detection_targets(
    targets: Sequence[PerceptionTargets], bev_size: int, bev_range: float
) -> DetectionTargets:
    """Match every target box to a cell and build dense tensors for the batch."""
    grid = cell_centers(bev_size, bev_range)
    cell = 2.0 * bev_range / bev_size
    cells = bev_size * bev_size
    objectness = torch.zeros(len(targets), cells)
    classes = torch.zeros(len(targets), cells, dtype=torch.long)
    boxes = torch.zeros(len(targets), cells, BOX_TERMS)
    for b, target in enumerate(targets):
        centers = np.array([box.center for box in target.boxes]).reshape(-1, 2)
        for box, index in zip(target.boxes, greedy_match(centers, grid)):
            offset = (np.asarray(box.center) - grid[index]) / cell
            objectness[b, index] = 1.0
            classes[b, index] = BOX_CLASSES.index(box.label)
            boxes[b, index] = torch.tensor(
                [
                    offset[0],
                    offset[1],
                    math.log(box.extent[0]),
                    math.log(box.extent[1]),
                    math.sin(box.yaw),
                    math.cos(box.yaw),
                ]
            )
    return DetectionTargets(objectness, classes, boxes, objectness > 0.5)


class PerceptionHeads(nn.Module):
    """Detection, waypoint and traffic-light heads; only used in Stage 1."""

    def __init__(self, d_model: int = 128):
        """Initialize the heads."""
        super().__init__()
        self.detection = nn.Linear(d_model, 1 + len(BOX_CLASSES) + BOX_TERMS)
        self.waypoint = nn.Linear(d_model, 2)
        self.light = nn.Linear(d_model, len(LIGHT_CLASSES))

    def forward(self, tokens: VisionTokenSet) -> PerceptionOutputs:
        """Decode the token set into detection, waypoint and light predictions."""
        det = self.detection(tokens.bev)
        return PerceptionOutputs(
            objectness=det[..., 0],
            class_logits=det[..., 1 : 1 + len(BOX_CLASSES)],
            boxes=det[..., 1 + len(BOX_CLASSES) :],
            waypoints=self.waypoint(tokens.waypoint),
            light_logits=self.light(tokens.light[:, 0]),
        )


def detection_loss(outputs: PerceptionOutputs, matched: DetectionTargets) -> Tensor:
    """Objectness BCE over every cell, class CE and L1 boxes on matched cells."""
    target_obj = matched.objectness.to(outputs.objectness)
    loss = F.binary_cross_entropy_with_logits(outputs.objectness, target_obj)
    if bool(matched.matched.any()):
        mask = matched.matched
        loss = loss + F.cross_entropy(outputs.class_logits[mask], matched.classes[mask])
        boxes = matched.boxes[mask].to(outputs.boxes)
        loss = loss + F.l1_loss(outputs.boxes[mask], boxes)
    return loss


def pretrain_losses(
    outputs: PerceptionOutputs,
    targets: Sequence[PerceptionTargets],
    bev_size: int,
    bev_range: float,
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> PerceptionLosses:
    """Return the detection, waypoint (MAE) and light (CE) losses for a batch."""
    matched = detection_targets(targets, bev_size, bev_range)
    det = detection_loss(outputs, matched)
    expert = torch.as_tensor(
        np.stack([np.asarray(t.expert_waypoints) for t in targets]),
        dtype=outputs.waypoints.dtype,
    )
    wp = F.l1_loss(outputs.waypoints, expert)
    light_labels = torch.tensor([LIGHT_CLASSES.index(t.light_state) for t in targets])
    light = F.cross_entropy(outputs.light_logits, light_labels)
    total = weights[0] * det + weights[1] * wp + weights[2] * light
    return PerceptionLosses(det=det, wp=wp, light=light, total=total)


def light_accuracy(
    outputs: PerceptionOutputs, targets: Sequence[PerceptionTargets]
) -> float:
    """Return the fraction of frames whose light state is classified correctly."""
    predicted = outputs.light_logits.argmax(dim=-1).tolist()
    truth = [LIGHT_CLASSES.index(t.light_state) for t in targets]
    return float(np.mean([p == q for p, q in zip(predicted, truth)]))
