"""Image-text pseudo-labels for body parts and attributes.

Pipeline per image: spatial filter (2-means foreground split, > 50% foreground
tokens) -> semantic filter (person-prompt similarity > 0.9) -> sample a cluster
count L -> K-means over foreground tokens -> mask, embed and label each region
-> paint the pixel label map. Attribute labels come from the whole-image
embedding, thresholded at 0.5 and one-hot encoded.
"""
from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from clasp.encoders import (
    PERSON_PROMPT,
    FeatureExtractor,
    FeatureMap,
    ImageRGB,
    JointEmbedder,
    StageShape,
    cosine_similarity,
    is_empty_embedding,
)
from clasp.errors import (
    ConfigurationError,
    DomainError,
    GranularityError,
    InvariantViolation,
    RejectedRegionError,
)

SPATIAL_FOREGROUND_MIN = 0.5
SEMANTIC_THRESHOLD = 0.9
ATTRIBUTE_THRESHOLD = 0.5
PERSON_LIKE_THRESHOLD = 0.75
KMEANS_MAX_ITER = 100
KMEANS_RESTARTS = 4
DEFAULT_GRANULARITY = (2, 3, 4)
PART_TEMPLATE = "a photo of a person's {}"

DEFAULT_PARTS = ("hair", "face", "arm", "shirt", "pants", "legs", "shoes")


@dataclass
class PartVocabulary:
    entries: list[tuple[str, str]]  # (part name, prompt); label id = position + 1

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        if len(names) < 2:
            raise ConfigurationError("part vocabulary needs at least two parts")
        if len(set(names)) != len(names):
            raise ConfigurationError("part names must be unique")

    @classmethod
    def from_names(cls, names: Sequence[str], template: str = PART_TEMPLATE) -> "PartVocabulary":
        return cls([(n, template.format(n)) for n in names])

    @classmethod
    def default(cls) -> "PartVocabulary":
        return cls.from_names(DEFAULT_PARTS)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    @property
    def prompts(self) -> list[str]:
        return [p for _, p in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def label_id(self, name: str) -> int:
        return self.names.index(name) + 1

    def id_to_name(self) -> dict[int, str]:
        out = {0: "background"}
        out.update({i + 1: n for i, n in enumerate(self.names)})
        return out

    def to_json(self) -> str:
        return json.dumps({"parts": [{"name": n, "prompt": p} for n, p in self.entries]}, indent=1)

    @classmethod
    def load(cls, path) -> "PartVocabulary":
        doc = json.loads(Path(path).read_text())
        return cls([(e["name"], e.get("prompt") or PART_TEMPLATE.format(e["name"])) for e in doc["parts"]])


@dataclass
class Attribute:
    name: str
    template: str
    labels: list[str]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ConfigurationError(f"attribute {self.name!r} needs >= 2 candidate labels")
        slots = [f for _, f, _, _ in string.Formatter().parse(self.template) if f is not None]
        if slots != [""]:
            raise ConfigurationError(f"template for {self.name!r} must contain exactly one '{{}}' slot")

    def prompts(self) -> list[str]:
        return [self.template.format(label) for label in self.labels]


@dataclass
class AttributeSchema:
    attributes: list[Attribute]

    @classmethod
    def default(cls) -> "AttributeSchema":
        return cls([
            Attribute("gender", "A photo of a {} person.", ["Female", "Male"]),
            Attribute("hat", "A photo of a person {}.", ["With Hat", "Without Hat"]),
            Attribute("sleeve", "A photo of a person with {}.", ["Long Sleeve", "Short Sleeve"]),
            Attribute("lower", "A photo of a person wearing {}.", ["Trousers", "Shorts"]),
        ])

    @property
    def sizes(self) -> list[int]:
        return [len(a.labels) for a in self.attributes]

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def to_json(self) -> str:
        return json.dumps(
            {"attributes": [{"name": a.name, "template": a.template, "labels": a.labels} for a in self.attributes]},
            indent=1,
        )

    @classmethod
    def load(cls, path) -> "AttributeSchema":
        doc = json.loads(Path(path).read_text())
        return cls([Attribute(a["name"], a["template"], list(a["labels"])) for a in doc["attributes"]])


@dataclass
class AttributeLabel:
    name: str
    index: int | None
    label: str | None
    score: float
    onehot: np.ndarray

    @property
    def known(self) -> bool:
        return self.index is not None


@dataclass
class AttributeLabelSet:
    labels: list[AttributeLabel]

    def targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated one-hot targets and the matching known-mask."""
        t = np.concatenate([a.onehot for a in self.labels])
        m = np.concatenate([np.full(len(a.onehot), a.known) for a in self.labels])
        return t, m

    def to_record(self, image_id: str) -> dict:
        return {
            "image_id": image_id,
            "attributes": {
                a.name: {"label": a.label, "score": round(a.score, 6), "known": a.known} for a in self.labels
            },
        }


@dataclass
class SpatialResult:
    passed: bool
    fg_mask: np.ndarray  # bool [h, w]
    fraction: float
    code: str = "ok"


@dataclass
class ImageLabels:
    image_id: str
    part_map: np.ndarray | None = None  # int [H, W]
    attributes: AttributeLabelSet | None = None
    rejected: str | None = None
    granularity: int | None = None
    regions: list[dict] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return self.rejected is None


def onehot_encode(label: int, K: int) -> np.ndarray:
    if not 0 <= label < K:
        raise DomainError(f"label {label} outside [0, {K})")
    v = np.zeros(K)
    v[label] = 1.0
    return v


def argmax_lowest(scores) -> int:
    # np.argmax returns the first maximal index
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


def kmeans(
    X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = KMEANS_MAX_ITER, n_init: int = KMEANS_RESTARTS
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding; best of `n_init` restarts by inertia.

    Each restart stops when assignments are stable or after `max_iter` rounds.
    """
    n = len(X)
    if not 1 <= k <= n:
        raise GranularityError(f"cannot form {k} clusters from {n} points")
    best = None
    for _ in range(n_init):
        labels, centers = _lloyd(X, k, rng, max_iter)
        inertia = ((X - centers[labels]) ** 2).sum()
        if best is None or inertia < best[0]:
            best = (inertia, labels, centers)
    return best[1], best[2]


def _lloyd(X, k, rng, max_iter):
    n = len(X)
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
    centers = np.array(centers, dtype=np.float64)
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = X[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return labels, centers


def centroid_scorer(person_text: np.ndarray) -> Callable[[FeatureMap, np.ndarray, np.ndarray], float]:
    def score(fm: FeatureMap, mask: np.ndarray, centroid: np.ndarray) -> float:
        if not np.any(centroid):
            return -1.0
        return cosine_similarity(centroid, person_text)

    return score


def spatial_filter(
    fm: FeatureMap,
    scorer: Callable[[FeatureMap, np.ndarray, np.ndarray], float],
    rng: np.random.Generator,
    person_like: float = PERSON_LIKE_THRESHOLD,
) -> SpatialResult:
    """Split tokens into foreground/background; pass iff foreground share > 0.5.

    `scorer(fm, mask, centroid)` rates a cluster's similarity to the person
    prompt. When both clusters are person-like the whole grid is foreground.
    """
    c, h, w = fm.shape
    X = fm.tokens()
    if np.all(X == X[0]):
        return SpatialResult(False, np.zeros((h, w), bool), 0.0, "degenerate")
    labels, centers = kmeans(X, 2, rng)
    masks = [(labels == j).reshape(h, w) for j in range(2)]
    scores = [scorer(fm, masks[j], centers[j]) if masks[j].any() else -np.inf for j in range(2)]
    if min(scores) > person_like:
        fg = np.ones((h, w), bool)
    else:
        fg = masks[argmax_lowest(scores)]
    frac = float(fg.mean())
    return SpatialResult(frac > SPATIAL_FOREGROUND_MIN, fg, frac, "ok" if frac > SPATIAL_FOREGROUND_MIN else "small")


def passes_semantic(similarity: float) -> bool:
    return similarity > SEMANTIC_THRESHOLD


def semantic_similarity(image: ImageRGB, embedder: JointEmbedder, person_text: np.ndarray | None = None) -> float:
    z = embedder.embed_image_region(image)
    if is_empty_embedding(z):
        return 0.0
    t = embedder.embed_text(PERSON_PROMPT) if person_text is None else person_text
    return cosine_similarity(z, t)


def semantic_filter(image: ImageRGB, embedder: JointEmbedder) -> bool:
    return passes_semantic(semantic_similarity(image, embedder))


def sample_granularity(S: Sequence[int], rng: np.random.Generator) -> int:
    S = sorted(set(int(s) for s in S))
    if not S:
        raise ConfigurationError("granularity set is empty")
    return S[rng.integers(len(S))]


def cluster_foreground(fm: FeatureMap, fg_mask: np.ndarray, L: int, rng: np.random.Generator) -> list[np.ndarray]:
    """K-means with L clusters over foreground tokens; returns disjoint token masks.

    Masks are ordered by their first token in raster order. Clusters that end up
    empty (possible when fewer than L distinct tokens exist) are dropped.
    """
    c, h, w = fm.shape
    fg_idx = np.flatnonzero(np.asarray(fg_mask, bool).ravel())
    if len(fg_idx) < L:
        raise GranularityError(f"{len(fg_idx)} foreground tokens < L={L}")
    labels, _ = kmeans(fm.tokens()[fg_idx], L, rng)
    masks = []
    for j in range(L):
        m = np.zeros(h * w, bool)
        m[fg_idx[labels == j]] = True
        if m.any():
            masks.append(m.reshape(h, w))
    masks.sort(key=lambda m: int(np.flatnonzero(m.ravel())[0]))
    return masks


def upscale_mask(mask: np.ndarray, H: int, W: int) -> np.ndarray:
    """Nearest-neighbour resize of an [h, w] mask to [H, W]."""
    mask = np.asarray(mask)
    h, w = mask.shape
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    return mask[rows[:, None], cols[None, :]]


def mask_image(image: ImageRGB, mask: np.ndarray) -> ImageRGB:
    m = upscale_mask(mask, image.height, image.width).astype(np.float64)
    return ImageRGB(image.values * m[None], image.id)


def select_part_label(similarities: Sequence[float]) -> tuple[int, float]:
    """Winning vocabulary position and its similarity (ties -> lowest index)."""
    j = argmax_lowest(similarities)
    return j, float(similarities[j])


def select_attribute_label(similarities: Sequence[float], threshold: float = ATTRIBUTE_THRESHOLD) -> tuple[int | None, float]:
    """Argmax among candidates scoring strictly above `threshold`; None if none survive."""
    s = np.asarray(similarities, dtype=np.float64)
    survivors = s > threshold
    if not survivors.any():
        return None, float(s.max())
    j = argmax_lowest(np.where(survivors, s, -np.inf))
    return j, float(s[j])


def assign_part_label(
    masked: ImageRGB, vocab: PartVocabulary, embedder: JointEmbedder, text_embeddings: np.ndarray | None = None
) -> tuple[int, float]:
    z = embedder.embed_image_region(masked)
    if is_empty_embedding(z):
        raise RejectedRegionError("masked region has no visible pixels")
    T = text_embeddings if text_embeddings is not None else np.stack([embedder.embed_text(p) for p in vocab.prompts])
    sims = [cosine_similarity(z, t) for t in T]
    j, score = select_part_label(sims)
    return j + 1, score


def build_part_label_map(masks: Sequence[np.ndarray], labels: Sequence[int], H: int, W: int) -> np.ndarray:
    if len(masks) != len(labels):
        raise ConfigurationError("masks and labels differ in length")
    out = np.zeros((H, W), dtype=np.int64)
    covered = np.zeros((H, W), bool)
    for m, q in zip(masks, labels):
        if q < 1:
            raise DomainError(f"part label {q} must be >= 1")
        up = upscale_mask(m, H, W).astype(bool)
        if np.any(covered & up):
            raise InvariantViolation("upscaled region masks overlap")
        covered |= up
        out[up] = q
    return out


def assign_attribute_labels(
    image: ImageRGB, schema: AttributeSchema, embedder: JointEmbedder, text_embeddings: list[np.ndarray] | None = None
) -> AttributeLabelSet:
    z = embedder.embed_image_region(image)
    out = []
    for i, attr in enumerate(schema.attributes):
        W = text_embeddings[i] if text_embeddings is not None else [embedder.embed_text(p) for p in attr.prompts()]
        sims = [cosine_similarity(z, w) for w in W] if not is_empty_embedding(z) else [0.0] * len(attr.labels)
        k, score = select_attribute_label(sims)
        if k is None:
            out.append(AttributeLabel(attr.name, None, None, score, np.zeros(len(attr.labels))))
        else:
            out.append(AttributeLabel(attr.name, k, attr.labels[k], score, onehot_encode(k, len(attr.labels))))
    return AttributeLabelSet(out)


class PseudoLabeler:
    """Runs the full per-image pipeline with cached prompt embeddings."""

    def __init__(
        self,
        extractor: FeatureExtractor,
        embedder: JointEmbedder,
        vocab: PartVocabulary,
        schema: AttributeSchema,
        stage: StageShape,
        granularity: Sequence[int] = DEFAULT_GRANULARITY,
    ):
        if not granularity or min(granularity) < 1:
            raise ConfigurationError(f"invalid granularity set {granularity!r}")
        self.extractor = extractor
        self.embedder = embedder
        self.vocab = vocab
        self.schema = schema
        self.stage = stage
        self.granularity = sorted(set(int(g) for g in granularity))
        self.person_text = embedder.embed_text(PERSON_PROMPT)
        self.part_text = np.stack([embedder.embed_text(p) for p in vocab.prompts])
        self.attr_text = [[embedder.embed_text(p) for p in a.prompts()] for a in schema.attributes]

    def _scorer(self, image: ImageRGB):
        if self.stage.c == len(self.person_text):
            return centroid_scorer(self.person_text)

        # Token features not in the text space: score clusters by their masked crops.
        def score(fm, mask, centroid):
            z = self.embedder.embed_image_region(mask_image(image, mask))
            return -1.0 if is_empty_embedding(z) else cosine_similarity(z, self.person_text)

        return score

    def label(self, image: ImageRGB, rng: np.random.Generator, L: int | None = None) -> ImageLabels:
        fm = self.extractor.extract_feature_map(image, self.stage)
        sp = spatial_filter(fm, self._scorer(image), rng)
        if not sp.passed:
            return ImageLabels(image.id, rejected=f"spatial:{sp.code}")
        if not passes_semantic(semantic_similarity(image, self.embedder, self.person_text)):
            return ImageLabels(image.id, rejected="semantic")

        L = sample_granularity(self.granularity, rng) if L is None else L
        candidates = [L] + [g for g in reversed(self.granularity) if g < L]
        for L_try in candidates:
            try:
                masks = cluster_foreground(fm, sp.fg_mask, L_try, rng)
                break
            except GranularityError:
                continue
        else:
            return ImageLabels(image.id, rejected="granularity")

        kept, ids, regions = [], [], []
        for m in masks:
            try:
                q, score = assign_part_label(mask_image(image, m), self.vocab, self.embedder, self.part_text)
            except RejectedRegionError:
                continue
            kept.append(m)
            ids.append(q)
            regions.append({"label": q, "name": self.vocab.names[q - 1], "score": round(score, 6), "tokens": int(m.sum())})
        part_map = build_part_label_map(kept, ids, image.height, image.width)
        attrs = assign_attribute_labels(image, self.schema, self.embedder, self.attr_text)
        return ImageLabels(image.id, part_map, attrs, None, L_try, regions)


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-image stream so images can be labelled in any order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_part_labels(
    image: ImageRGB,
    S: Sequence[int],
    vocab: PartVocabulary,
    extractor: FeatureExtractor,
    embedder: JointEmbedder,
    stage: StageShape,
    rng: np.random.Generator,
    schema: AttributeSchema | None = None,
) -> ImageLabels:
    labeler = PseudoLabeler(extractor, embedder, vocab, schema or AttributeSchema.default(), stage, S)
    return labeler.label(image, rng)
