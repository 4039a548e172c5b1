"""Training objectives: DINO distillation, part CE, attribute BCE, load balancing."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from clasp.errors import ConfigurationError, NumericError, UsageError
from clasp.pc_moe import GateRecord

BALANCE_ALPHA = 0.01
CV_EPS = 1e-10


@dataclass
class LossWeights:
    dino: float = 0.8
    part: float = 0.6
    attribute: float = 0.6
    balancing: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"loss weight {f.name} must be nonnegative")


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


@dataclass
class LossBreakdown:
    dino: float
    part: float
    attribute: float
    balancing: float
    total: float

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(*(_scalar(getattr(self, f.name)) for f in fields(self)))


@dataclass
class DinoState:
    center: torch.Tensor
    tau_s: float = 0.1
    tau_t: float = 0.04
    center_momentum: float = 0.9


class ProjectionHead(nn.Module):
    """Three linear layers: c -> hidden -> hidden, L2-normalised, then unit-norm prototypes -> out.

    Output logits are cosines to the prototype rows, so their scale is fixed
    and the temperatures alone set the sharpness.
    """

    def __init__(self, c: int, out_dim: int = 256, hidden: int = 256):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(c, hidden), nn.GELU(), nn.Linear(hidden, hidden))
        self.prototypes = nn.Parameter(torch.randn(out_dim, hidden) / math.sqrt(hidden))

    def forward(self, x):
        z = self.mlp(x)
        z = z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        w = self.prototypes / self.prototypes.norm(dim=-1, keepdim=True)
        return z @ w.T


def gap(F_: torch.Tensor) -> torch.Tensor:
    return F_.mean(dim=(-2, -1))


def dino_loss(teacher_out: Sequence[torch.Tensor], student_out: Sequence[torch.Tensor], state: DinoState) -> torch.Tensor:
    """Cross-view cross-entropy between sharpened/centred teacher and student outputs.

    Inputs are head logits per view, each [B, D]. Pairs with the same view index
    are skipped.
    """
    if len(teacher_out) < 2 or len(student_out) < 2:
        raise UsageError("DINO loss needs at least two views")
    targets = [torch.softmax((t - state.center) / state.tau_t, dim=-1).detach() for t in teacher_out]
    logps = [torch.log_softmax(s / state.tau_s, dim=-1) for s in student_out]
    total, pairs = 0.0, 0
    for i, p_t in enumerate(targets):
        for j, lp_s in enumerate(logps):
            if i == j:
                continue
            total = total + (-(p_t * lp_s).sum(dim=-1)).mean()
            pairs += 1
    return total / pairs


@torch.no_grad()
def update_center(state: DinoState, teacher_out: Sequence[torch.Tensor]) -> None:
    batch_center = torch.cat(list(teacher_out)).mean(dim=0)
    m = state.center_momentum
    state.center.copy_(m * state.center + (1 - m) * batch_center)


def dino_loss_from_features(F_t, F_s, teacher_head, student_head, state: DinoState) -> torch.Tensor:
    """Features are per-view lists of [B, c, h, w] maps."""
    with torch.no_grad():
        t = [teacher_head(gap(f)) for f in F_t]
    s = [student_head(gap(f)) for f in F_s]
    return dino_loss(t, s, state)


def downsample_labels(labels, h: int, w: int) -> np.ndarray:
    """Majority vote of an [H, W] label map inside each of h x w cells (ties -> lowest id)."""
    labels = np.asarray(labels)
    H, W = labels.shape
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    n = int(labels.max()) + 1
    counts = np.zeros((h, w, n), np.int64)
    np.add.at(counts, (rows[:, None], cols[None, :], labels), 1)
    return counts.argmax(-1)


def part_loss(F_s: torch.Tensor, labels: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """Mean token cross-entropy. F_s [B, c, h, w], labels [B, h, w] (0 = background)."""
    logits = head(F_s.movedim(-3, -1))
    if int(labels.max()) >= logits.shape[-1]:
        raise ConfigurationError(f"label id {int(labels.max())} exceeds part head classes {logits.shape[-1]}")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1))


def attribute_loss(F_s: torch.Tensor, targets: torch.Tensor, known: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """Mean BCE over the one-hot entries of known attributes.

    targets/known are [B, sum K]. Each sample's sum is divided by its number of
    known entries; samples with nothing known are left out of the batch mean.
    """
    logits = head(gap(F_s))
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none") * known
    n_known = known.sum(dim=-1)
    has = n_known > 0
    if not has.any():
        return logits.sum() * 0.0
    per_sample = bce.sum(dim=-1)[has] / n_known[has]
    return per_sample.mean()


def cv2(x) -> torch.Tensor:
    """Squared coefficient of variation with population variance."""
    x = x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)
    if x.numel() == 0:
        raise UsageError("cv2 of an empty vector")
    mean = x.mean()
    var = ((x - mean) ** 2).mean()
    return var / (mean ** 2 + CV_EPS)


def _gates(records) -> torch.Tensor:
    if isinstance(records, torch.Tensor):
        return records
    if not records:
        raise UsageError("empty batch of gate records")
    return torch.cat([r.gates if isinstance(r, GateRecord) else torch.as_tensor(r) for r in records])


def balancing_loss_stage(records, alpha: float = BALANCE_ALPHA) -> torch.Tensor:
    """alpha * [CV^2(importance) + CV^2(load)] over a batch of per-sample gates [B, N]."""
    g = _gates(records)
    if g.ndim == 1:
        g = g[None]
    if g.shape[0] == 0:
        raise UsageError("empty batch of gate records")
    importance = g.sum(dim=0)
    load = (g > 0).to(g.dtype).sum(dim=0)
    return alpha * (cv2(importance) + cv2(load))


def balancing_loss_total(per_stage: Sequence) -> torch.Tensor | float:
    return sum(per_stage, 0.0)


def total_loss(dino, part, attribute, balancing, w: LossWeights) -> LossBreakdown:
    """Weighted sum. Components may be floats or scalar tensors; the total keeps their type."""
    parts = {"dino": dino, "part": part, "attribute": attribute, "balancing": balancing}
    for name, v in parts.items():
        if not math.isfinite(_scalar(v)):
            raise NumericError(f"non-finite {name} loss: {float(v)}", name)
    total = w.dino * dino + w.part * part + w.attribute * attribute + w.balancing * balancing
    return LossBreakdown(dino, part, attribute, balancing, total)
