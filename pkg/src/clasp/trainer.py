"""Teacher-student pre-training with prompt-routed task passes and a two-stage schedule."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from clasp.checkpoint import check_compatible, load_checkpoint, save_checkpoint, state_tensors
from clasp.config import from_dict, to_dict
from clasp.dataset import DataConfig, LabeledBatch, build_datasets
from clasp.diagnostics import GradientTrace, build_activation_profile, conflict_ratio, ead_matrix
from clasp.encoders import StageShape
from clasp.errors import ConfigurationError, NumericError, StructuralError
from clasp.losses import (
    DinoState,
    LossBreakdown,
    LossWeights,
    attribute_loss,
    balancing_loss_stage,
    cv2,
    dino_loss,
    gap,
    part_loss,
    total_loss,
    update_center,
)
from clasp.metrics import TASKS, MetricsRow, export_metrics, row_from_record, row_to_record
from clasp.model import ClaspModel, ema_update
from clasp.pc_moe import MoEConfig
from clasp.pseudo_labels import AttributeSchema, PartVocabulary

DINO, PART, ATTR = 0, 1, 2
STEP_SEED_STRIDE = 1_000_003


def default_stages() -> list[StageShape]:
    return [StageShape(8, 8, 4), StageShape(16, 4, 2)]


@dataclass
class DinoConfig:
    tau_s: float = 0.1
    tau_t: float = 0.04
    center_momentum: float = 0.9
    proto_dim: int = 256
    head_hidden: int = 256


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    min_scale: float = 0.7
    brightness: float = 0.1
    contrast: float = 0.2


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 16
    lr: float = 5e-4
    lr_schedule: str = "cosine"  # or "constant"
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    ema_momentum: float = 0.98
    seed: int = 0
    image_height: int = 32
    image_width: int = 16
    stage_shapes: list[StageShape] = field(default_factory=default_stages)
    moe: MoEConfig = field(default_factory=MoEConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    dino: DinoConfig = field(default_factory=DinoConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    warm_start_checkpoint: str | None = None
    warm_start_lr_scale: float = 0.6
    # "auto": pure DINO unless warm-starting; "dino"/"clasp" force one objective
    schedule: str = "auto"
    deterministic: bool = False  # gate noise off
    diag_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigurationError("ema_momentum must lie in [0, 1]")
        if not self.lr > 0:
            raise ConfigurationError("lr must be > 0")
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.schedule not in ("auto", "dino", "clasp"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if not self.stage_shapes:
            raise ConfigurationError("need at least one stage")

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.image_height, self.image_width

    @property
    def final_grid(self) -> tuple[int, int]:
        return self.stage_shapes[-1].h, self.stage_shapes[-1].w

    @property
    def is_stage2(self) -> bool:
        return self.warm_start_checkpoint is not None

    def effective_weights(self) -> LossWeights:
        mode = self.schedule
        if mode == "auto":
            mode = "clasp" if self.is_stage2 else "dino"
        if mode == "dino":
            return LossWeights(self.weights.dino, 0.0, 0.0, 0.0)
        return self.weights

    def base_lr(self) -> float:
        return self.lr * (self.warm_start_lr_scale if self.is_stage2 else 1.0)

    def moe_config(self) -> MoEConfig:
        return replace(self.moe, noise_enabled=False) if self.deterministic else self.moe

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrainConfig":
        return from_dict(cls, data)

    def to_json_dict(self) -> dict:
        return to_dict(self)


@dataclass
class TrainState:
    model: ClaspModel
    optimizer: torch.optim.Optimizer
    dino: DinoState
    config: TrainConfig
    step: int = 0
    history: list[MetricsRow] = field(default_factory=list)
    last_trace: GradientTrace | None = None


def build_model(cfg: TrainConfig) -> ClaspModel:
    torch.manual_seed(cfg.seed)
    vocab, schema = PartVocabulary.default(), AttributeSchema.default()
    return ClaspModel(
        cfg.image_hw, cfg.stage_shapes, cfg.moe_config(), len(vocab), schema.total, cfg.dino.proto_dim, cfg.dino.head_hidden
    )


def init_state(cfg: TrainConfig) -> TrainState:
    model = build_model(cfg)
    model.teacher.eval()
    model.teacher_head.eval()
    # teacher parameters have requires_grad=False, so they never get optimizer moments
    opt = torch.optim.AdamW(
        model.trainable_parameters(), lr=cfg.base_lr(), betas=tuple(cfg.betas), weight_decay=cfg.weight_decay
    )
    dino = DinoState(model.center, cfg.dino.tau_s, cfg.dino.tau_t, cfg.dino.center_momentum)
    return TrainState(model, opt, dino, cfg)


def lr_at(cfg: TrainConfig, step: int) -> float:
    base = cfg.base_lr()
    if cfg.lr_schedule == "constant" or cfg.steps <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / cfg.steps))


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * STEP_SEED_STRIDE + step)


def augment(x: torch.Tensor, cfg: AugmentConfig, g: torch.Generator) -> torch.Tensor:
    """Random horizontal flip, crop-and-resize, brightness/contrast jitter."""
    B = x.shape[0]
    u = torch.rand(B, 6, generator=g, dtype=x.dtype)
    flip = torch.where(u[:, 0] < cfg.flip_prob, -1.0, 1.0).to(x.dtype)
    s = cfg.min_scale + (1.0 - cfg.min_scale) * u[:, 1]
    tx = (2 * u[:, 2] - 1) * (1 - s)
    ty = (2 * u[:, 3] - 1) * (1 - s)
    theta = torch.zeros(B, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = s * flip
    theta[:, 0, 2] = tx
    theta[:, 1, 1] = s
    theta[:, 1, 2] = ty
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    y = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    bright = (2 * u[:, 4] - 1) * cfg.brightness
    contrast = 1 + (2 * u[:, 5] - 1) * cfg.contrast
    mean = y.mean(dim=(1, 2, 3), keepdim=True)
    y = (y - mean) * contrast[:, None, None, None] + mean + bright[:, None, None, None]
    return y.clamp(0.0, 1.0)


@dataclass
class StepOutput:
    losses: LossBreakdown  # scalar tensors
    task_losses: dict[str, torch.Tensor]
    records: dict[str, list]  # task -> per-stage GateRecords
    teacher_out: list[torch.Tensor]


def forward_losses(state: TrainState, batch: LabeledBatch, g: torch.Generator) -> StepOutput:
    """All task passes for one batch; zero-weighted tasks are not run."""
    cfg, model = state.config, state.model
    w = cfg.effective_weights()
    records: dict[str, list] = {}
    task_losses: dict[str, torch.Tensor] = {}
    zero = torch.zeros((), dtype=batch.images.dtype)

    views = [augment(batch.images, cfg.augment, g) for _ in range(2)]
    with torch.no_grad():
        t_out = [model.teacher_head(gap(model.teacher(v, DINO)[0])) for v in views]

    dino = zero
    if w.dino > 0:
        feats, records["dino"] = model.student(torch.cat(views), DINO, g)
        s_out = model.student_head(gap(feats)).chunk(2)
        dino = dino_loss(t_out, s_out, state.dino)
        task_losses["dino"] = dino
    part = zero
    if w.part > 0:
        feats, records["part"] = model.student(batch.images, PART, g)
        part = part_loss(feats, batch.parts, model.part_head)
        task_losses["part"] = part
    attr = zero
    if w.attribute > 0:
        feats, records["attribute"] = model.student(batch.images, ATTR, g)
        attr = attribute_loss(feats, batch.attr_targets, batch.attr_known, model.attr_head)
        task_losses["attribute"] = attr

    bal = zero
    if w.balancing > 0 and records:
        n_stages = len(cfg.stage_shapes)
        for si in range(n_stages):
            per_task = [balancing_loss_stage([recs[si]]) for recs in records.values()]
            bal = bal + sum(per_task) / len(per_task)
    return StepOutput(total_loss(dino, part, attr, bal, w), task_losses, records, t_out)


def stage_cv2_importance(records: dict[str, list], n_stages: int) -> list[float]:
    out = []
    for si in range(n_stages):
        vals = [float(cv2(recs[si].gates.detach().sum(dim=0))) for recs in records.values()]
        out.append(sum(vals) / len(vals) if vals else math.nan)
    return out


EVAL_VIEW_SEED = 7919


@torch.no_grad()
def evaluate_dino(state: TrainState, batch: LabeledBatch, view_seed: int = EVAL_VIEW_SEED) -> float:
    """DINO loss on a fixed batch with fixed views, gate noise off, no parameter change."""
    model, cfg = state.model, state.config
    g = torch.Generator().manual_seed(view_seed)
    views = [augment(batch.images, cfg.augment, g) for _ in range(2)]
    was = model.student.training
    model.student.eval()
    try:
        t_out = [model.teacher_head(gap(model.teacher(v, DINO)[0])) for v in views]
        s_out = [model.student_head(gap(model.student(v, DINO)[0])) for v in views]
    finally:
        model.student.train(was)
    return float(dino_loss(t_out, s_out, state.dino))


def gradient_trace(state: TrainState, out: StepOutput, held: LabeledBatch | None) -> GradientTrace | None:
    """Per-task gradients on the shared backbone (one layer per parameter tensor)."""
    tasks = [t for t in TASKS if t in out.task_losses]
    if len(tasks) < 2:
        return None
    named = state.model.student.shared_parameters()
    grads = {}
    for t in tasks:
        gs = torch.autograd.grad(out.task_losses[t], [p for _, p in named], retain_graph=True, allow_unused=True)
        grads[t] = [
            (g if g is not None else torch.zeros_like(p)).detach().double().reshape(-1).numpy()
            for (_, p), g in zip(named, gs)
        ]
    profiles = activation_profiles(state, held) if held is not None else {}
    return GradientTrace(tasks, [n for n, _ in named], grads, profiles)


@torch.no_grad()
def activation_profiles(state: TrainState, batch: LabeledBatch) -> dict:
    """Stage -> task -> expert usage on a held-out batch, gate noise off."""
    net = state.model.student
    was = net.training
    net.eval()
    try:
        per_task = {name: net(batch.images, k)[1] for k, name in enumerate(TASKS)}
    finally:
        net.train(was)
    return {
        f"stage{si}": {t: build_activation_profile([recs[si].gates.numpy()]) for t, recs in per_task.items()}
        for si in range(len(state.config.stage_shapes))
    }


def train_step(
    state: TrainState, batch: LabeledBatch, g: torch.Generator, held: LabeledBatch | None = None, diagnose: bool = False
) -> tuple[LossBreakdown, MetricsRow]:
    cfg, model = state.config, state.model
    t0 = time.perf_counter()
    model.student.train()
    for group in state.optimizer.param_groups:
        group["lr"] = lr_at(cfg, state.step)

    try:
        out = forward_losses(state, batch, g)
    except NumericError as e:
        raise NumericError(f"step {state.step + 1}: {e}", e.component) from None
    if not torch.isfinite(out.losses.total):
        raise NumericError(f"step {state.step + 1}: non-finite total loss {out.losses.as_floats()}", "total")

    gcr, ead = math.nan, {}
    if diagnose:
        trace = gradient_trace(state, out, held)
        if trace is not None:
            gcr = conflict_ratio(trace)
            state.last_trace = trace
            if trace.profiles:
                per_stage = [ead_matrix(p) for p in trace.profiles.values()]
                ead = {k: sum(d[k] for d in per_stage) / len(per_stage) for k in per_stage[0]}

    state.optimizer.zero_grad(set_to_none=True)
    out.losses.total.backward()
    state.optimizer.step()
    ema_update(model.teacher_tree(), model.student_tree(), cfg.ema_momentum)
    update_center(state.dino, out.teacher_out)
    state.step += 1

    losses = out.losses.as_floats()
    cv = stage_cv2_importance(out.records, len(cfg.stage_shapes)) if out.records else [0.0] * len(cfg.stage_shapes)
    row = MetricsRow(
        state.step, losses.dino, losses.part, losses.attribute, losses.balancing, losses.total, cv, gcr, ead,
        time.perf_counter() - t0,
    )
    return losses, row


def sample_batch(data: LabeledBatch, batch_size: int, g: torch.Generator) -> LabeledBatch:
    idx = torch.randperm(len(data), generator=g)[: min(batch_size, len(data))]
    return data.take(idx)


def apply_warm_start(state: TrainState, path) -> None:
    """Load model weights (not optimizer moments) from a stage-1 checkpoint."""
    try:
        ck = load_checkpoint(path)
    except OSError as e:
        raise OSError(f"cannot read warm-start checkpoint {path}: {e}") from e
    expected = state.model.state_dict()
    check_compatible(ck.tensors, expected)
    state.model.load_state_dict({k: ck.tensors[k] for k in expected})


def save_state(state: TrainState, path) -> None:
    # wall time stays out so that reruns produce identical checkpoint bytes
    extra = {"history": [row_to_record(r, with_time=False) for r in state.history]}
    save_checkpoint(path, state_tensors(state.model, state.optimizer), state.config.to_json_dict(), state.step, extra)


def restore_state(state: TrainState, path) -> None:
    """Resume: model, optimizer moments, step counter and history. Validates before mutating."""
    ck = load_checkpoint(path)
    expected = state.model.state_dict()
    check_compatible(ck.tensors, expected)
    names = {id(p): n for n, p in state.model.named_parameters()}
    # build the optimizer state fully before touching anything
    opt_state = {}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            key = f"optim/{names[id(p)]}/"
            entries = {k[len(key):]: v for k, v in ck.tensors.items() if k.startswith(key)}
            if entries:
                for k, v in entries.items():
                    if k in ("exp_avg", "exp_avg_sq") and v.shape != p.shape:
                        raise StructuralError(f"optimizer tensor {key + k!r} has shape {tuple(v.shape)}, expected {tuple(p.shape)}")
                opt_state[p] = entries
    state.model.load_state_dict({k: ck.tensors[k] for k in expected})
    state.optimizer.state.clear()
    for p, entries in opt_state.items():
        state.optimizer.state[p] = {k: v.clone() for k, v in entries.items()}
    state.step = ck.step
    state.history = [row_from_record(d) for d in ck.extra.get("history", [])]


def run_pretraining(
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    data: tuple[LabeledBatch, LabeledBatch] | None = None,
    on_step: Callable[[MetricsRow], None] | None = None,
) -> TrainState:
    """Train for cfg.steps steps (counting any resumed ones) and write outputs to out_dir."""
    state = init_state(cfg)
    if cfg.warm_start_checkpoint is not None:
        apply_warm_start(state, cfg.warm_start_checkpoint)
    if resume is not None:
        restore_state(state, resume)
    if cfg.steps == 0:
        return state

    train, held = data if data is not None else build_datasets(cfg.data, cfg.seed, cfg.image_hw, cfg.final_grid)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_json_dict(), indent=1, sort_keys=True) + "\n")

    t_start = time.perf_counter()
    while state.step < cfg.steps:
        g = step_generator(cfg.seed, state.step)
        batch = sample_batch(train, cfg.batch_size, g)
        diagnose = cfg.diag_every > 0 and (state.step + 1) % cfg.diag_every == 0
        _, row = train_step(state, batch, g, held, diagnose)
        state.history.append(row)
        if on_step is not None:
            on_step(row)
        if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_state(state, out / f"checkpoint_{state.step:06d}.ckpt")
    elapsed = time.perf_counter() - t_start

    if out is not None:
        save_state(state, out / "checkpoint.ckpt")
        if state.history:
            export_metrics(state.history, out)
        if state.last_trace is not None:
            state.last_trace.save(out / "trace.json")
        timing = {"seconds": elapsed, "step_seconds": [r.wall_time for r in state.history]}
        (out / "timing.json").write_text(json.dumps(timing) + "\n")
    return state
