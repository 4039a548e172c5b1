"""Inter-task conflict metrics: gradient conflict ratio, expert-activation divergence, HM."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations, permutations
from pathlib import Path
from typing import Sequence

import numpy as np

from clasp.errors import DomainError, StructuralError, UsageError


@dataclass
class GradientTrace:
    tasks: list[str]
    layers: list[str]
    grads: dict[str, list[np.ndarray]]  # task -> one flat vector per layer
    # optional: stage -> task -> activation profile
    profiles: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        for t in self.tasks:
            if len(self.grads.get(t, ())) != len(self.layers):
                raise StructuralError(f"task {t!r} does not cover all {len(self.layers)} layers")
        for li in range(len(self.layers)):
            sizes = {len(self.grads[t][li]) for t in self.tasks}
            if len(sizes) > 1:
                raise StructuralError(f"layer {self.layers[li]!r} has mismatched gradient lengths {sorted(sizes)}")

    def to_json(self) -> str:
        def arr(v):
            return "[" + ",".join(format(float(x), ".17g") for x in np.ravel(v)) + "]"

        grads = ",".join(
            f"{json.dumps(t)}:[" + ",".join(arr(g) for g in self.grads[t]) + "]" for t in self.tasks
        )
        profiles = ",".join(
            f"{json.dumps(s)}:{{" + ",".join(f"{json.dumps(t)}:{arr(p)}" for t, p in per.items()) + "}"
            for s, per in self.profiles.items()
        )
        return (
            f'{{"tasks":{json.dumps(self.tasks)},"layers":{json.dumps(self.layers)},'
            f'"gradients":{{{grads}}},"profiles":{{{profiles}}}}}\n'
        )

    @classmethod
    def from_json(cls, text: str) -> "GradientTrace":
        doc = json.loads(text)
        grads = {t: [np.asarray(g, dtype=np.float64) for g in doc["gradients"][t]] for t in doc["tasks"]}
        profiles = {
            s: {t: np.asarray(p, dtype=np.float64) for t, p in per.items()} for s, per in doc.get("profiles", {}).items()
        }
        return cls(list(doc["tasks"]), list(doc["layers"]), grads, profiles)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GradientTrace":
        return cls.from_json(Path(path).read_text())


def gradient_cosine(g_i, g_j) -> float:
    """Cosine between two gradients; defined as 0 if either is all zeros."""
    a = np.asarray(g_i, dtype=np.float64).ravel()
    b = np.asarray(g_j, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise StructuralError(f"gradient lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def conflict_ratio(trace: GradientTrace) -> float:
    """Share of (layer, ordered task pair) combinations with negative gradient cosine."""
    T = len(trace.tasks)
    if T < 2:
        raise UsageError("conflict ratio needs at least two tasks")
    if not trace.layers:
        raise UsageError("trace has no layers")
    per_layer = []
    for li in range(len(trace.layers)):
        neg = sum(
            gradient_cosine(trace.grads[a][li], trace.grads[b][li]) < 0 for a, b in permutations(trace.tasks, 2)
        )
        per_layer.append(neg / (T * (T - 1)))
    return float(np.mean(per_layer))


def build_activation_profile(gates: Sequence) -> np.ndarray:
    """Normalised expert usage from per-sample gate vectors (rows of [n, N] or a list of them)."""
    if len(gates) == 0:
        raise UsageError("no gate records")
    G = np.concatenate([np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in gates])
    mass = G.sum(axis=0)
    if mass.sum() <= 0:
        mass = (G != 0).sum(axis=0).astype(np.float64)
        if mass.sum() == 0:
            raise UsageError("gate records select no experts")
    return mass / mass.sum()


def expert_activation_divergence(p_i, p_j, N: int | None = None) -> float:
    """1 - (1/N) * sum_e min(p_i[e], p_j[e])."""
    p_i = np.asarray(p_i, dtype=np.float64)
    p_j = np.asarray(p_j, dtype=np.float64)
    if p_i.shape != p_j.shape or (N is not None and len(p_i) != N):
        raise StructuralError(f"profiles cover different expert counts: {p_i.shape} vs {p_j.shape}, N={N}")
    N = len(p_i)
    return float(1.0 - np.minimum(p_i, p_j).sum() / N)


def harmonic_mean(a: float, b: float) -> float:
    if a <= 0 or b <= 0:
        raise DomainError("harmonic mean needs positive inputs")
    return 2.0 * a * b / (a + b)


def ead_matrix(profiles: dict[str, np.ndarray]) -> dict[str, float]:
    return {
        f"{a}|{b}": expert_activation_divergence(profiles[a], profiles[b]) for a, b in combinations(list(profiles), 2)
    }


def diagnose(trace: GradientTrace) -> dict:
    report = {"tasks": trace.tasks, "layers": len(trace.layers), "gcr": conflict_ratio(trace)}
    if trace.profiles:
        per_stage = {s: ead_matrix(p) for s, p in trace.profiles.items()}
        pairs = next(iter(per_stage.values())).keys()
        report["ead"] = {"per_stage": per_stage, "mean": {k: float(np.mean([v[k] for v in per_stage.values()])) for k in pairs}}
    return report
