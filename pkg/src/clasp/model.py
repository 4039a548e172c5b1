"""Desk-scale staged backbone with a PC-MoE block after every stage, plus the task heads."""
from __future__ import annotations

import copy
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from clasp.encoders import StageShape
from clasp.errors import StructuralError
from clasp.losses import ProjectionHead
from clasp.pc_moe import GateRecord, MoEConfig, PCMoE


class Stage(nn.Module):
    """Patch embedding, then residual token mixing and channel mixing."""

    def __init__(self, in_c: int, in_hw: tuple[int, int], shape: StageShape):
        super().__init__()
        H, W = in_hw
        if H % shape.h or W % shape.w or H // shape.h != W // shape.w:
            raise ValueError(f"stage grid {shape.h}x{shape.w} must tile input {H}x{W} with square patches")
        self.patch = H // shape.h
        self.shape = shape
        self.embed = nn.Linear(in_c * self.patch ** 2, shape.c)
        self.norm = nn.LayerNorm(shape.c)
        self.token_mix = nn.Linear(shape.h * shape.w, shape.h * shape.w)
        self.channel_mix = nn.Linear(shape.c, shape.c)

    def forward(self, x):
        B = x.shape[0]
        t = F.unfold(x, self.patch, stride=self.patch).transpose(1, 2)  # [B, hw, in_c*p*p]
        t = self.norm(self.embed(t))
        t = t + self.token_mix(t.transpose(1, 2)).transpose(1, 2)
        t = t + F.gelu(self.channel_mix(t))
        return t.transpose(1, 2).reshape(B, self.shape.c, self.shape.h, self.shape.w)


class ClaspNetwork(nn.Module):
    """Stages, each followed by a PC-MoE block on a residual branch (x + block(x))."""

    def __init__(self, image_hw: tuple[int, int], stage_shapes: Sequence[StageShape], moe: MoEConfig):
        super().__init__()
        stages, blocks = [], []
        in_c, in_hw = 3, image_hw
        for s in stage_shapes:
            stages.append(Stage(in_c, in_hw, s))
            blocks.append(PCMoE(s.c, moe))
            in_c, in_hw = s.c, (s.h, s.w)
        self.stages = nn.ModuleList(stages)
        self.moe = nn.ModuleList(blocks)

    def forward(self, x, task: int, generator: torch.Generator | None = None) -> tuple[torch.Tensor, list[GateRecord]]:
        records = []
        for stage, block in zip(self.stages, self.moe):
            x = stage(x)
            y, rec = block(x, task, generator)
            x = x + y
            records.append(rec)
        return x, records

    def shared_parameters(self):
        """Backbone and MoE parameters, excluding the task prompts."""
        return [(n, p) for n, p in self.named_parameters() if not n.endswith("prompts")]


class ClaspModel(nn.Module):
    """Student, EMA teacher, and the three task heads."""

    def __init__(
        self,
        image_hw: tuple[int, int],
        stage_shapes: Sequence[StageShape],
        moe: MoEConfig,
        num_parts: int,
        attr_total: int,
        proto_dim: int = 256,
        head_hidden: int = 256,
    ):
        super().__init__()
        c = stage_shapes[-1].c
        self.student = ClaspNetwork(image_hw, stage_shapes, moe)
        self.student_head = ProjectionHead(c, proto_dim, head_hidden)
        self.teacher = copy.deepcopy(self.student)
        self.teacher_head = copy.deepcopy(self.student_head)
        for p in list(self.teacher.parameters()) + list(self.teacher_head.parameters()):
            p.requires_grad_(False)
        self.part_head = nn.Linear(c, num_parts + 1)
        self.attr_head = nn.Linear(c, attr_total)
        self.register_buffer("center", torch.zeros(proto_dim))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def student_tree(self):
        return [self.student, self.student_head]

    def teacher_tree(self):
        return [self.teacher, self.teacher_head]


@torch.no_grad()
def ema_update(teacher: Sequence[nn.Module] | nn.Module, student: Sequence[nn.Module] | nn.Module, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, tensor by tensor."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA momentum {m} outside [0, 1]")
    teacher = [teacher] if isinstance(teacher, nn.Module) else list(teacher)
    student = [student] if isinstance(student, nn.Module) else list(student)
    t_params = [p for mod in teacher for p in mod.parameters()]
    s_params = [p for mod in student for p in mod.parameters()]
    if len(t_params) != len(s_params) or any(a.shape != b.shape for a, b in zip(t_params, s_params)):
        raise StructuralError("teacher and student parameter trees differ in shape")
    for t, s in zip(t_params, s_params):
        t.copy_(m * t + (1.0 - m) * s)
