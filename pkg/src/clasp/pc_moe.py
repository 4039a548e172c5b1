"""Prompt-Controlled Mixture-of-Experts block.

For a feature map F [B, c, h, w] and task k:

    F_gate   = F + e_k                                  (broadcast over tokens)
    G_c      = softmax_channels(F_gate^T W_c)           per token
    g        = TopK(softmax(mean_hw(F_gate) W_g) [+ noise])   per sample
    Y_MoE    = sum_j g_j * E_j(F * G_c)
    Y_output = Y_MoE + FC(e_k)

Only experts with a nonzero gate are evaluated. Gradients come from autograd;
TopK acts as a fixed selection mask, so gradient reaches only selected entries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from clasp.errors import ConfigurationError, NumericError, UsageError

NUM_TASKS = 3
INIT_STD = 0.02


@dataclass
class MoEConfig:
    num_experts: int = 10
    top_k: int = 6
    noise_enabled: bool = True
    renormalize_after_topk: bool = False

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigurationError(f"need 1 <= top_k <= num_experts, got K={self.top_k}, N={self.num_experts}")


@dataclass
class GateRecord:
    gates: torch.Tensor  # [B, N], zero outside the selection
    selected: torch.Tensor  # [B, K] expert indices, best first
    probs: torch.Tensor  # [B, N] softmax before noise/TopK

    @property
    def batch_size(self) -> int:
        return self.gates.shape[0]

    def detach(self) -> "GateRecord":
        return GateRecord(self.gates.detach(), self.selected, self.probs.detach())


def softplus(x):
    """log(1 + exp(x)) without overflow. Accepts floats or tensors."""
    if isinstance(x, torch.Tensor):
        return x.clamp_min(0) + torch.log1p(torch.exp(-x.abs()))
    x = float(x)
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def augment_with_prompt(F_: torch.Tensor, e_k: torch.Tensor) -> torch.Tensor:
    if e_k.shape[-1] != F_.shape[-3]:
        raise ConfigurationError(f"prompt dim {e_k.shape[-1]} != channels {F_.shape[-3]}")
    return F_ + e_k[:, None, None]


def channel_gate(F_gate: torch.Tensor, W_c: torch.Tensor) -> torch.Tensor:
    logits = torch.einsum("...chw,cd->...dhw", F_gate, W_c)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite channel-gate logits", "channel_gate")
    return torch.softmax(logits, dim=-3)


def topk_mask(values: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Boolean mask of the k largest entries per row; ties go to the lower index."""
    order = torch.sort(values, dim=-1, descending=True, stable=True).indices[..., :k]
    mask = torch.zeros_like(values, dtype=torch.bool).scatter(-1, order, True)
    return mask, order


def global_gate(
    F_gate: torch.Tensor,
    W_g: torch.Tensor,
    W_noise: torch.Tensor,
    cfg: MoEConfig,
    generator: torch.Generator | None = None,
    training: bool = False,
) -> GateRecord:
    if cfg.top_k > W_g.shape[1]:
        raise ConfigurationError(f"top_k={cfg.top_k} exceeds {W_g.shape[1]} experts")
    pooled = F_gate.mean(dim=(-2, -1))
    probs = torch.softmax(pooled @ W_g, dim=-1)
    scores = probs
    if training and cfg.noise_enabled:
        eps = torch.randn(probs.shape, generator=generator, dtype=probs.dtype, device=probs.device)
        scores = probs + eps * softplus(pooled @ W_noise)
    mask, order = topk_mask(scores.detach(), cfg.top_k)
    # noisy scores can dip below zero; gate weights stay nonnegative
    gates = torch.where(mask, scores.clamp_min(0.0), torch.zeros_like(scores))
    if cfg.renormalize_after_topk:
        gates = gates / gates.sum(dim=-1, keepdim=True).clamp_min(1e-12)
    return GateRecord(gates, order, probs)


class Expert(nn.Module):
    """Token-wise two-layer perceptron c -> c -> c."""

    def __init__(self, c: int):
        super().__init__()
        self.fc1 = nn.Linear(c, c)
        self.fc2 = nn.Linear(c, c)

    def forward(self, x):  # [n, c, h, w]
        t = x.movedim(-3, -1)
        return self.fc2(F.gelu(self.fc1(t))).movedim(-1, -3)


class PCMoE(nn.Module):
    def __init__(self, c: int, cfg: MoEConfig, num_tasks: int = NUM_TASKS):
        super().__init__()
        self.c = c
        self.cfg = cfg
        self.prompts = nn.Parameter(torch.randn(num_tasks, c) * INIT_STD)
        self.W_c = nn.Parameter(torch.randn(c, c) * INIT_STD)
        self.W_g = nn.Parameter(torch.randn(c, cfg.num_experts) * INIT_STD)
        self.W_noise = nn.Parameter(torch.randn(c, cfg.num_experts) * INIT_STD)
        self.experts = nn.ModuleList(Expert(c) for _ in range(cfg.num_experts))
        self.fc = nn.Linear(c, c)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(
        self, x: torch.Tensor, task: int, generator: torch.Generator | None = None, dense: bool = False
    ) -> tuple[torch.Tensor, GateRecord]:
        if not 0 <= task < self.prompts.shape[0]:
            raise ConfigurationError(f"task index {task} out of range")
        e_k = self.prompts[task]
        x_gate = augment_with_prompt(x, e_k)
        expert_in = x * channel_gate(x_gate, self.W_c)
        record = global_gate(x_gate, self.W_g, self.W_noise, self.cfg, generator, self.training)
        g = record.gates
        if dense:
            y = sum(g[:, j, None, None, None] * E(expert_in) for j, E in enumerate(self.experts))
        else:
            y = torch.zeros_like(x)
            for j, E in enumerate(self.experts):
                idx = torch.nonzero(g[:, j]).squeeze(-1)
                if idx.numel() == 0:
                    continue
                contrib = g[idx, j, None, None, None] * E(expert_in[idx])
                y = y.index_add(0, idx, contrib)
        return y + self.fc(e_k)[:, None, None], record


def moe_forward(F_, task_k: int, block: PCMoE, generator=None, training: bool = False):
    """Functional wrapper: sets train/eval mode (noise only in training) and runs the block."""
    was = block.training
    block.train(training)
    try:
        return block(F_, task_k, generator)
    finally:
        block.train(was)


def moe_backward(output: torch.Tensor, grad_output: torch.Tensor, block: PCMoE, inputs: torch.Tensor | None = None):
    """Gradients of <output, grad_output> for every block parameter (zeros where untouched).

    `output` must still carry its autograd graph from the forward pass.
    """
    if output.grad_fn is None:
        raise UsageError("output has no forward record; run the forward pass with autograd enabled")
    names, params = zip(*block.named_parameters())
    wrt = list(params) + ([inputs] if inputs is not None else [])
    grads = torch.autograd.grad(output, wrt, grad_output, allow_unused=True, retain_graph=True)
    out = {n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads)}
    if inputs is not None:
        out["input"] = grads[-1] if grads[-1] is not None else torch.zeros_like(inputs)
    return out
