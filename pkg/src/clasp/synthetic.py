"""Synthetic person images with exact part and attribute ground truth.

A person is a stack of horizontal part bands occupying some token columns of
the image; the remaining columns are background. Attribute values are shown by
rendering the carrier part in a tagged colour (e.g. hair drawn as
"hair+Female").
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from clasp.encoders import BACKGROUND, ImageRGB, OracleSpec, build_oracle_spec, composite_name, hex_to_rgb
from clasp.pseudo_labels import AttributeSchema, PartVocabulary

# attribute -> part whose pixels carry it
CARRIERS = {"gender": "hair", "hat": "face", "sleeve": "shirt", "lower": "pants"}
# part slots from head to feet; one part is drawn per slot
SLOTS = (("hair", "face"), ("shirt", "arm"), ("pants", "legs", "shoes"))


@dataclass
class SyntheticPersonSpec:
    height: int = 32
    width: int = 16
    patch: int = 4
    background_fraction: float = 0.25
    min_band_rows: int = 2  # in token rows
    carriers: dict[str, str] = field(default_factory=lambda: dict(CARRIERS))
    slots: tuple = SLOTS


@dataclass
class SyntheticSample:
    image: ImageRGB
    part_map: np.ndarray  # [H, W] int, 0 = background
    attributes: dict[str, str | None]  # None where no carrier part is visible
    parts: list[str]


def default_oracle_spec(
    seed: int = 0, vocab: PartVocabulary | None = None, schema: AttributeSchema | None = None
) -> OracleSpec:
    vocab = vocab or PartVocabulary.default()
    schema = schema or AttributeSchema.default()
    attrs = [(a.name, a.labels) for a in schema.attributes]
    carriers = {a: p for a, p in CARRIERS.items() if p in vocab.names and a in dict(attrs)}
    return build_oracle_spec(seed, vocab.names, attrs, carriers)


def _band_heights(rng: np.random.Generator, rows: int, n: int, minimum: int) -> list[int]:
    spare = rows - n * minimum
    if spare < 0:
        raise ValueError(f"{rows} token rows cannot hold {n} bands of {minimum}")
    cuts = np.sort(rng.integers(0, spare + 1, size=n - 1))
    extra = np.diff(np.concatenate([[0], cuts, [spare]]))
    return [minimum + int(e) for e in extra]


def render_person(
    rng: np.random.Generator,
    oracle: OracleSpec,
    vocab: PartVocabulary,
    schema: AttributeSchema,
    spec: SyntheticPersonSpec,
    image_id: str = "",
) -> SyntheticSample:
    H, W, p = spec.height, spec.width, spec.patch
    th, tw = H // p, W // p
    person_cols = int(round((1.0 - spec.background_fraction) * tw))
    bg = np.array(hex_to_rgb(oracle.color_of(BACKGROUND)), float) / 255.0
    img = np.broadcast_to(bg[:, None, None], (3, H, W)).copy()
    part_map = np.zeros((H, W), np.int64)
    attrs: dict[str, str | None] = {a.name: None for a in schema.attributes}
    if person_cols == 0:
        return SyntheticSample(ImageRGB(img, image_id), part_map, attrs, [])

    parts = [str(rng.choice([s for s in slot if s in vocab.names])) for slot in spec.slots]
    heights = _band_heights(rng, th, len(parts), spec.min_band_rows)
    col0 = int(rng.integers(0, tw - person_cols + 1)) * p
    col1 = col0 + person_cols * p
    by_part = {v: k for k, v in spec.carriers.items()}
    row = 0
    for part, hgt in zip(parts, heights):
        concept = part
        attr = by_part.get(part)
        if attr is not None and attr in attrs:
            labels = next(a.labels for a in schema.attributes if a.name == attr)
            value = labels[int(rng.integers(len(labels)))]
            attrs[attr] = value
            concept = composite_name(part, [value])
        color = np.array(hex_to_rgb(oracle.color_of(concept)), float) / 255.0
        r0, r1 = row * p, (row + hgt) * p
        img[:, r0:r1, col0:col1] = color[:, None, None]
        part_map[r0:r1, col0:col1] = vocab.label_id(part)
        row += hgt
    return SyntheticSample(ImageRGB(img, image_id), part_map, attrs, parts)


def generate_synthetic_dataset(
    n: int,
    seed: int = 0,
    spec: SyntheticPersonSpec | None = None,
    oracle: OracleSpec | None = None,
    vocab: PartVocabulary | None = None,
    schema: AttributeSchema | None = None,
) -> list[SyntheticSample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    spec = spec or SyntheticPersonSpec()
    vocab = vocab or PartVocabulary.default()
    schema = schema or AttributeSchema.default()
    oracle = oracle or default_oracle_spec(seed, vocab, schema)
    return [
        render_person(np.random.default_rng(np.random.SeedSequence([seed, i])), oracle, vocab, schema, spec, f"img{i:05d}")
        for i in range(n)
    ]


def solid_image(oracle: OracleSpec, concept: str, height: int = 32, width: int = 16) -> ImageRGB:
    color = np.array(hex_to_rgb(oracle.color_of(concept)), float) / 255.0
    return ImageRGB(np.broadcast_to(color[:, None, None], (3, height, width)).copy(), concept)


def column_image(oracle: OracleSpec, concepts: list[str], height: int = 32, width: int = 16) -> ImageRGB:
    """Equal-width vertical stripes, one concept each."""
    img = np.zeros((3, height, width))
    edges = np.linspace(0, width, len(concepts) + 1).astype(int)
    for c, a, b in zip(concepts, edges[:-1], edges[1:]):
        img[:, :, a:b] = (np.array(hex_to_rgb(oracle.color_of(c)), float) / 255.0)[:, None, None]
    return ImageRGB(img)
