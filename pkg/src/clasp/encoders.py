"""Embedding providers: a token-grid feature extractor and an image/text joint embedder.

The deterministic oracle implements both. Every pixel colour is looked up in a
palette that names a concept, and the concept's vector comes from a seeded
vocabulary. That makes pseudo-labelling exactly testable without checkpoints.
"""
from __future__ import annotations

import colorsys
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from clasp.errors import ConfigurationError, DomainError

ORACLE_DIM = 16
PERSON = "person"
BACKGROUND = "background"
VEHICLE = "vehicle"
PERSON_PROMPT = "a photo of a person"

# Geometry of the default oracle vocabulary. Parts and attribute values lean
# towards the person axis so a whole person image clears the 0.9 semantic
# threshold; see build_oracle_spec.
PART_PERSON_WEIGHT = 0.93
PART_OWN_WEIGHT = 0.2
TAG_WEIGHT = 0.3
ATTR_PERSON_WEIGHT = 0.5
VEHICLE_PERSON_WEIGHT = 0.25


@dataclass
class ImageRGB:
    values: np.ndarray  # [3, H, W] in [0, 1]
    id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != 3:
            raise DomainError(f"image must be [3, H, W], got {v.shape}")
        self.values = np.clip(v, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class FeatureMap:
    values: np.ndarray  # [c, h, w]
    stage_id: int = 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def tokens(self) -> np.ndarray:
        """Token vectors as rows, [h*w, c] in row-major (h, w) order."""
        c, h, w = self.values.shape
        return self.values.reshape(c, h * w).T


@dataclass(frozen=True)
class StageShape:
    c: int
    h: int
    w: int


class FeatureExtractor(Protocol):
    def extract_feature_map(self, image: ImageRGB, stage: StageShape) -> FeatureMap: ...


class JointEmbedder(Protocol):
    dim: int

    def embed_image_region(self, image: ImageRGB) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DomainError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def is_empty_embedding(v: np.ndarray) -> bool:
    """Empty regions embed to the zero vector, which is the invalid flag."""
    return not np.any(v)


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def hex_to_rgb(color: str) -> tuple[int, int, int]:
    color = color.lstrip("#")
    return tuple(int(color[i:i + 2], 16) for i in (0, 2, 4))


def rgb_to_hex(rgb) -> str:
    return "#" + "".join(f"{int(c):02x}" for c in rgb)


def composite_name(part: str, tags: Sequence[str]) -> str:
    return "+".join([part, *tags])


@dataclass
class OracleSpec:
    seed: int
    vocabulary: dict[str, np.ndarray]
    palette: dict[str, str]  # "#rrggbb" -> concept name
    families: dict[str, list[str]] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(next(iter(self.vocabulary.values())))

    def color_of(self, concept: str) -> str:
        for color, name in self.palette.items():
            if name == concept:
                return color
        raise KeyError(concept)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "vocabulary": {k: [float(x) for x in v] for k, v in self.vocabulary.items()},
            "palette": dict(self.palette),
            "families": {k: list(v) for k, v in self.families.items()},
        }
        # repr() of a float is the shortest round-tripping decimal
        return json.dumps(doc, indent=1, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "OracleSpec":
        doc = json.loads(text)
        vocab = {k: np.asarray(v, dtype=np.float64) for k, v in doc["vocabulary"].items()}
        dims = {len(v) for v in vocab.values()}
        if len(dims) != 1:
            raise ConfigurationError(f"vocabulary vectors have mixed dimensions {sorted(dims)}")
        for color, name in doc["palette"].items():
            if name not in vocab:
                raise ConfigurationError(f"palette colour {color} names unknown concept {name!r}")
        return cls(int(doc["seed"]), vocab, dict(doc["palette"]), doc.get("families", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "OracleSpec":
        return cls.from_json(Path(path).read_text())

    def max_family_cosine(self) -> float:
        """Largest pairwise cosine between distinct concepts of the same family."""
        worst = -1.0
        for names in self.families.values():
            for i, a in enumerate(names):
                for b in names[i + 1:]:
                    worst = max(worst, cosine_similarity(self.vocabulary[a], self.vocabulary[b]))
        return worst


def build_oracle_spec(
    seed: int,
    parts: Sequence[str],
    attributes: Sequence[tuple[str, Sequence[str]]],
    carriers: dict[str, str],
    dim: int = ORACLE_DIM,
) -> OracleSpec:
    """Seeded oracle vocabulary plus a palette covering plain and tagged parts.

    `carriers` maps an attribute name to the part whose pixels show it. A part
    rendered with attribute value v uses the composite concept "part+v", whose
    vector adds a tag direction to the plain part vector.
    """
    rng = np.random.default_rng(seed)
    # Gram-Schmidt on seeded Gaussian draws -> orthonormal axes
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    axes = iter(basis.T)

    def take() -> np.ndarray:
        try:
            return next(axes)
        except StopIteration:
            raise ConfigurationError(f"oracle dimension {dim} too small for vocabulary") from None

    person, background = take(), take()
    vocab: dict[str, np.ndarray] = {PERSON: person, BACKGROUND: background}
    part_axes = {}
    for p in parts:
        part_axes[p] = take()
        vocab[p] = _normalize(PART_PERSON_WEIGHT * person + PART_OWN_WEIGHT * part_axes[p])

    # Each attribute value's "visual tag" direction. Binary attributes share one
    # axis with opposite signs; larger ones get an axis per value.
    tag_dirs: dict[str, np.ndarray] = {}
    for _, values in attributes:
        if len(values) == 2:
            u = take()
            tag_dirs[values[0]], tag_dirs[values[1]] = u, -u
        else:
            for v in values:
                tag_dirs[v] = take()
    s = np.sqrt(1.0 - ATTR_PERSON_WEIGHT ** 2)
    for v, u in tag_dirs.items():
        vocab[v] = ATTR_PERSON_WEIGHT * person + s * u
    vocab[VEHICLE] = _normalize(VEHICLE_PERSON_WEIGHT * person + take())

    for attr, values in attributes:
        part = carriers.get(attr)
        if part is None:
            continue
        if part not in part_axes:
            raise ConfigurationError(f"carrier part {part!r} for {attr!r} not in vocabulary")
        for v in values:
            vocab[composite_name(part, [v])] = _normalize(
                PART_PERSON_WEIGHT * person + PART_OWN_WEIGHT * part_axes[part] + TAG_WEIGHT * tag_dirs[v]
            )

    families = {"parts": list(parts), "scene": [PERSON, BACKGROUND, VEHICLE]}
    for attr, values in attributes:
        families[f"attr:{attr}"] = list(values)

    palette = {rgb_to_hex(c): name for c, name in zip(_distinct_colors(len(vocab)), vocab)}
    return OracleSpec(seed, vocab, palette, families)


def _distinct_colors(n: int) -> list[tuple[int, int, int]]:
    # Evenly spaced hues at two brightness levels; never black.
    out = []
    for i in range(n):
        h = (i * 0.61803398875) % 1.0
        v = 0.95 if i % 2 == 0 else 0.65
        r, g, b = colorsys.hsv_to_rgb(h, 0.85, v)
        out.append((round(r * 255), round(g * 255), round(b * 255)))
    if len(set(out)) != n:
        raise ConfigurationError("palette colours collide")
    return out


class OracleEncoder:
    """Colour-keyed oracle standing in for both DINO and CLIP."""

    normalize = True

    def __init__(self, spec: OracleSpec):
        self.spec = spec
        self.dim = spec.dim
        self._colors = np.array([hex_to_rgb(c) for c in spec.palette], dtype=np.float64) / 255.0
        self._vectors = np.stack([spec.vocabulary[n] for n in spec.palette.values()])
        self._text_names = [n for n in spec.vocabulary if "+" not in n]
        self._patterns = {
            n: re.compile(r"(?<![A-Za-z])" + re.escape(n) + r"(?![A-Za-z])", re.IGNORECASE)
            for n in self._text_names
        }

    def pixel_embeddings(self, image: ImageRGB) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel concept vectors [H, W, d] and the nonzero-pixel mask [H, W]."""
        px = image.values.transpose(1, 2, 0)
        visible = np.any(px > 0, axis=-1)
        d2 = ((px[:, :, None, :] - self._colors[None, None]) ** 2).sum(-1)
        nearest = np.argmin(d2, axis=-1)
        emb = self._vectors[nearest]
        emb[~visible] = 0.0
        return emb, visible

    def extract_feature_map(self, image: ImageRGB, stage: StageShape) -> FeatureMap:
        if stage.c != self.dim:
            raise ConfigurationError(f"oracle emits c={self.dim}, stage declares c={stage.c}")
        H, W = image.height, image.width
        if H % stage.h or W % stage.w:
            raise ConfigurationError(f"image {H}x{W} not divisible into {stage.h}x{stage.w} tokens")
        ph, pw = H // stage.h, W // stage.w
        emb, visible = self.pixel_embeddings(image)
        sums = emb.reshape(stage.h, ph, stage.w, pw, self.dim).sum(axis=(1, 3))
        counts = visible.reshape(stage.h, ph, stage.w, pw).sum(axis=(1, 3))
        tokens = sums / np.maximum(counts, 1)[..., None]
        return FeatureMap(np.ascontiguousarray(tokens.transpose(2, 0, 1)))

    def embed_image_region(self, image: ImageRGB) -> np.ndarray:
        emb, visible = self.pixel_embeddings(image)
        if not visible.any():
            return np.zeros(self.dim)
        mean = emb[visible].mean(axis=0)
        return mean / np.linalg.norm(mean)

    def embed_text(self, text: str) -> np.ndarray:
        if not text.strip():
            raise DomainError("empty text")
        return self.spec.vocabulary[self.concept_for_text(text)].copy()

    def concept_for_text(self, text: str) -> str:
        hits = [n for n in self._text_names if self._patterns[n].search(text)]
        if len(hits) > 1 and PERSON in hits:
            hits.remove(PERSON)
        if len(hits) > 1:
            longest = max(len(h) for h in hits)
            hits = [h for h in hits if len(h) == longest]
        if len(hits) != 1:
            raise LookupError(f"no unique oracle concept in {text!r} (matches: {hits})")
        return hits[0]
