"""Prompt-routed mixture-of-experts pre-training with vision-language pseudo-labels, at desk scale."""
from clasp.diagnostics import GradientTrace, conflict_ratio, expert_activation_divergence, harmonic_mean
from clasp.encoders import FeatureMap, ImageRGB, OracleEncoder, StageShape
from clasp.losses import LossBreakdown, LossWeights, balancing_loss_stage, dino_loss, total_loss
from clasp.pc_moe import GateRecord, MoEConfig, PCMoE, moe_forward
from clasp.pseudo_labels import AttributeSchema, PartVocabulary, PseudoLabeler, generate_part_labels
from clasp.trainer import TrainConfig, run_pretraining, train_step

__version__ = "0.1.0"
