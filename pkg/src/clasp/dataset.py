"""Synthetic training set: rendered images plus their cached pseudo-labels."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from clasp.encoders import ImageRGB, OracleEncoder, OracleSpec, StageShape
from clasp.losses import downsample_labels
from clasp.netpbm import read_pgm, read_ppm, write_pgm, write_ppm
from clasp.pseudo_labels import AttributeSchema, ImageLabels, PartVocabulary, PseudoLabeler, image_rng
from clasp.synthetic import SyntheticPersonSpec, default_oracle_spec, generate_synthetic_dataset


@dataclass
class DataConfig:
    n_images: int = 64
    eval_images: int = 8
    seed: int | None = None  # None -> follow the training seed
    background_fraction: float = 0.25
    granularity: list[int] = field(default_factory=lambda: [2, 3, 4])
    patch: int = 4


@dataclass
class LabeledBatch:
    ids: list[str]
    images: torch.Tensor  # [n, 3, H, W]
    parts: torch.Tensor  # [n, h, w] int64 at the final stage grid
    attr_targets: torch.Tensor  # [n, sum K]
    attr_known: torch.Tensor  # [n, sum K]

    def __len__(self):
        return len(self.ids)

    def take(self, idx) -> "LabeledBatch":
        idx = torch.as_tensor(idx)
        return LabeledBatch(
            [self.ids[int(i)] for i in idx], self.images[idx], self.parts[idx], self.attr_targets[idx], self.attr_known[idx]
        )


def label_images(
    images: list[ImageRGB], oracle: OracleSpec, vocab: PartVocabulary, schema: AttributeSchema, cfg: DataConfig, seed: int
) -> list[ImageLabels]:
    H, W = images[0].height, images[0].width
    enc = OracleEncoder(oracle)
    labeler = PseudoLabeler(enc, enc, vocab, schema, StageShape(oracle.dim, H // cfg.patch, W // cfg.patch), cfg.granularity)
    return [labeler.label(img, image_rng(seed, i)) for i, img in enumerate(images)]


def to_batch(images: list[ImageRGB], labels: list[ImageLabels], grid: tuple[int, int]) -> LabeledBatch:
    keep = [(im, lb) for im, lb in zip(images, labels) if lb.accepted]
    if not keep:
        raise ValueError("every image was rejected by the pseudo-label filters")
    ids = [im.id for im, _ in keep]
    x = torch.tensor(np.stack([im.values for im, _ in keep]), dtype=torch.float32)
    parts = torch.tensor(np.stack([downsample_labels(lb.part_map, *grid) for _, lb in keep]), dtype=torch.int64)
    t, m = zip(*(lb.attributes.targets() for _, lb in keep))
    return LabeledBatch(
        ids, x, parts, torch.tensor(np.stack(t), dtype=torch.float32), torch.tensor(np.stack(m), dtype=torch.float32)
    )


def build_datasets(
    cfg: DataConfig, seed: int, image_hw: tuple[int, int], grid: tuple[int, int]
) -> tuple[LabeledBatch, LabeledBatch]:
    """Render train + held-out images, pseudo-label them once, drop rejected ones."""
    seed = cfg.seed if cfg.seed is not None else seed
    vocab, schema = PartVocabulary.default(), AttributeSchema.default()
    oracle = default_oracle_spec(seed, vocab, schema)
    spec = SyntheticPersonSpec(height=image_hw[0], width=image_hw[1], patch=cfg.patch, background_fraction=cfg.background_fraction)
    samples = generate_synthetic_dataset(cfg.n_images + cfg.eval_images, seed, spec, oracle, vocab, schema)
    images = [s.image for s in samples]
    labels = label_images(images, oracle, vocab, schema, cfg, seed)
    train = to_batch(images[: cfg.n_images], labels[: cfg.n_images], grid)
    held = to_batch(images[cfg.n_images:], labels[cfg.n_images:], grid) if cfg.eval_images else train
    return train, held


def write_label_files(
    out_dir, images: list[ImageRGB], labels: list[ImageLabels], vocab: PartVocabulary | None = None, with_images: bool = True
) -> None:
    """One PGM per accepted image plus attributes.jsonl, rejected.json and the parts.json id -> name sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, rejected = [], {}
    for im, lb in zip(images, labels):
        if not lb.accepted:
            rejected[im.id] = lb.rejected
            continue
        write_pgm(out / f"{im.id}.pgm", lb.part_map)
        if with_images:
            write_ppm(out / f"{im.id}.ppm", im.values)
        rec = lb.attributes.to_record(im.id)
        rec["granularity"] = lb.granularity
        rec["regions"] = lb.regions
        rows.append(json.dumps(rec, sort_keys=True))
    (out / "attributes.jsonl").write_text("".join(r + "\n" for r in rows))
    (out / "rejected.json").write_text(json.dumps(rejected, indent=1, sort_keys=True) + "\n")
    vocab = vocab or PartVocabulary.default()
    sidecar = {str(k): v for k, v in vocab.id_to_name().items()}
    (out / "parts.json").write_text(json.dumps(sidecar, indent=1) + "\n")


def read_label_files(label_dir) -> dict[str, tuple[np.ndarray, dict]]:
    d = Path(label_dir)
    out = {}
    for line in (d / "attributes.jsonl").read_text().splitlines():
        rec = json.loads(line)
        out[rec["image_id"]] = (read_pgm(d / f"{rec['image_id']}.pgm"), rec)
    return out


def read_images(paths) -> list[ImageRGB]:
    return [ImageRGB(read_ppm(p), Path(p).stem) for p in paths]
