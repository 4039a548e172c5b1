import math
import random

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st

from clasp.errors import ConfigurationError, NumericError, UsageError
from clasp.losses import (
    DinoState,
    LossWeights,
    ProjectionHead,
    attribute_loss,
    balancing_loss_stage,
    balancing_loss_total,
    cv2,
    dino_loss,
    downsample_labels,
    part_loss,
    total_loss,
    update_center,
)
from clasp.pc_moe import GateRecord


def brute_cv2(xs):
    n = len(xs)
    mean = sum(xs) / n
    var = sum((x - mean) ** 2 for x in xs) / n
    return var / (mean * mean + 1e-10)


def brute_balancing(rows, alpha=0.01):
    N = len(rows[0])
    imp = [sum(r[e] for r in rows) for e in range(N)]
    load = [sum(1.0 for r in rows if r[e] > 0) for e in range(N)]
    return alpha * (brute_cv2(imp) + brute_cv2(load))


class Fixed(nn.Module):
    """Head that ignores its input and returns fixed logits broadcast over leading dims."""

    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, x):
        return self.logits.expand(*x.shape[:-1], self.logits.shape[-1])


def state(D=8, tau_s=0.1, tau_t=0.04):
    return DinoState(torch.zeros(D, dtype=torch.float64), tau_s, tau_t)


def test_default_weights():
    w = LossWeights()
    assert (w.dino, w.part, w.attribute, w.balancing) == (0.8, 0.6, 0.6, 1.0)
    with pytest.raises(ConfigurationError):
        LossWeights(part=-0.1)


def test_dino_one_hot_teacher_uniform_student():
    t = torch.full((1, 8), -1e4, dtype=torch.float64)
    t[0, 3] = 0.0
    s = torch.zeros(1, 8, dtype=torch.float64)
    loss = dino_loss([t, t], [s, s], state())
    assert loss.item() == pytest.approx(math.log(8), abs=1e-12)


def test_dino_same_logits_is_entropy():
    torch.manual_seed(3)
    t = torch.randn(4, 8, dtype=torch.float64)
    st_ = state(tau_s=0.07, tau_t=0.07)
    loss = dino_loss([t, t], [t.clone(), t.clone()], st_)
    p = torch.softmax(t / 0.07, dim=-1)
    H = -(p * p.log()).sum(-1).mean()
    assert loss.item() == pytest.approx(H.item(), abs=1e-12)


def test_dino_skips_same_view_pairs():
    torch.manual_seed(0)
    t = [torch.randn(3, 8, dtype=torch.float64) for _ in range(2)]
    s = [torch.randn(3, 8, dtype=torch.float64) for _ in range(2)]
    st_ = state()

    def ce(ti, si):
        p = torch.softmax(ti / st_.tau_t, -1)
        return -(p * torch.log_softmax(si / st_.tau_s, -1)).sum(-1).mean()

    want = (ce(t[0], s[1]) + ce(t[1], s[0])) / 2
    assert dino_loss(t, s, st_).item() == pytest.approx(want.item(), abs=1e-12)


def test_dino_single_view_rejected():
    t = torch.zeros(1, 8)
    with pytest.raises(UsageError):
        dino_loss([t], [t], state())


def test_center_update():
    st_ = state()
    st_.center.fill_(0.5)
    st_.center_momentum = 1.0
    update_center(st_, [torch.randn(2, 8, dtype=torch.float64)] * 2)
    assert torch.all(st_.center == 0.5)
    st_.center_momentum = 0.9
    out = torch.ones(2, 8, dtype=torch.float64)
    update_center(st_, [out, 3 * out])
    assert torch.allclose(st_.center, torch.full((8,), 0.9 * 0.5 + 0.1 * 2.0, dtype=torch.float64))


def test_dino_no_gradient_to_teacher():
    torch.manual_seed(0)
    th, sh = ProjectionHead(4, 8, 16).double(), ProjectionHead(4, 8, 16).double()
    x = torch.randn(2, 4, dtype=torch.float64)
    with torch.no_grad():
        t = [th(x), th(x + 1)]
    loss = dino_loss(t, [sh(x), sh(x + 1)], state())
    loss.backward()
    assert all(p.grad is None for p in th.parameters())
    assert all(p.grad is not None for p in sh.parameters())
    # targets are detached even when the teacher outputs carry a graph
    t = [th(x), th(x + 1)]
    dino_loss(t, [sh(x), sh(x + 1)], state()).backward()
    assert all(p.grad is None for p in th.parameters())


def test_projection_head_shape():
    h = ProjectionHead(16, 256, 256)
    assert [m.out_features for m in h.mlp if isinstance(m, nn.Linear)] == [256, 256]
    assert h.prototypes.shape == (256, 256)
    out = h(torch.randn(5, 16))
    assert out.shape == (5, 256) and out.abs().max() <= 1 + 1e-6


def test_part_loss_uniform_and_confident():
    F_s = torch.zeros(2, 4, 2, 2, dtype=torch.float64)
    labels = torch.randint(0, 8, (2, 2, 2))
    assert part_loss(F_s, labels, Fixed(torch.zeros(8, dtype=torch.float64))).item() == pytest.approx(math.log(8))
    lab = torch.full((1, 2, 2), 3)
    logits = torch.full((8,), -10.0, dtype=torch.float64)
    logits[3] = 10.0
    assert part_loss(F_s[:1], lab, Fixed(logits)).item() <= 1e-6


def test_part_loss_brute_force():
    torch.manual_seed(1)
    head = nn.Linear(3, 5).double()
    F_s = torch.randn(1, 3, 2, 2, dtype=torch.float64)
    lab = torch.tensor([[[0, 4], [2, 2]]])
    got = part_loss(F_s, lab, head).item()
    total = 0.0
    for i in range(2):
        for j in range(2):
            z = head(F_s[0, :, i, j]).tolist()
            lse = math.log(sum(math.exp(v) for v in z))
            total += lse - z[lab[0, i, j]]
    assert got == pytest.approx(total / 4, abs=1e-12)


def test_part_loss_label_out_of_range():
    with pytest.raises(ConfigurationError):
        part_loss(torch.zeros(1, 2, 1, 1), torch.tensor([[[8]]]), nn.Linear(2, 8))


def test_attribute_loss_zero_logits():
    t = torch.tensor([[1.0, 0.0, 0.0, 1.0, 0.0]], dtype=torch.float64)
    k = torch.ones_like(t)
    head = Fixed(torch.zeros(5, dtype=torch.float64))
    assert attribute_loss(torch.zeros(1, 3, 1, 1, dtype=torch.float64), t, k, head).item() == pytest.approx(math.log(2))


def test_attribute_loss_confident():
    t = torch.tensor([[1.0, 0.0, 0.0, 1.0, 0.0]], dtype=torch.float64)
    head = Fixed(40 * t[0] - 20)
    assert attribute_loss(torch.zeros(1, 3, 1, 1, dtype=torch.float64), t, torch.ones_like(t), head).item() <= 1e-6


def bce(z, y):
    return -(y * math.log(1 / (1 + math.exp(-z))) + (1 - y) * math.log(1 - 1 / (1 + math.exp(-z))))


def test_attribute_loss_brute_force_masked():
    # M=2 attributes with K=(2,3); second sample has the second attribute unknown
    torch.manual_seed(2)
    head = nn.Linear(3, 5).double()
    F_s = torch.randn(2, 3, 2, 1, dtype=torch.float64)
    t = torch.tensor([[0, 1, 0, 0, 1], [1, 0, 0, 0, 0]], dtype=torch.float64)
    k = torch.tensor([[1, 1, 1, 1, 1], [1, 1, 0, 0, 0]], dtype=torch.float64)
    got = attribute_loss(F_s, t, k, head).item()
    per = []
    for b in range(2):
        z = head(F_s[b].mean(dim=(1, 2))).tolist()
        terms = [bce(z[j], t[b, j].item()) for j in range(5) if k[b, j]]
        per.append(sum(terms) / len(terms))
    assert got == pytest.approx(sum(per) / 2, abs=1e-12)


def test_attribute_loss_nothing_known():
    head = nn.Linear(3, 5)
    F_s = torch.randn(2, 3, 1, 1, requires_grad=True)
    loss = attribute_loss(F_s, torch.zeros(2, 5), torch.zeros(2, 5), head)
    loss.backward()
    assert loss.item() == 0.0
    assert torch.count_nonzero(F_s.grad) == 0 and torch.count_nonzero(head.weight.grad) == 0


def test_cv2_examples():
    assert cv2([3.0, 3.0, 3.0]).item() == 0.0
    assert cv2([2.0, 0.0]).item() == pytest.approx(1.0 / (1.0 + 1e-10), abs=1e-15)
    assert cv2([0.0, 0.0]).item() == 0.0
    with pytest.raises(UsageError):
        cv2([])


def test_balancing_examples():
    uniform = torch.full((4, 5), 0.2, dtype=torch.float64)
    assert balancing_loss_stage(uniform).item() == 0.0
    rec = [GateRecord(torch.tensor([[1.0, 0.0]], dtype=torch.float64), torch.tensor([[0]]), torch.tensor([[1.0, 0.0]]))] * 2
    assert abs(balancing_loss_stage(rec).item() - 0.02) <= 1e-9
    with pytest.raises(UsageError):
        balancing_loss_stage([])


def test_balancing_matches_brute_force_100():
    rng = random.Random(0)
    for _ in range(100):
        B, N = rng.randint(1, 8), rng.randint(1, 10)
        K = rng.randint(1, N)
        rows = []
        for _ in range(B):
            w = [rng.random() for _ in range(N)]
            keep = sorted(range(N), key=lambda e: -w[e])[:K]
            s = sum(w[e] for e in keep)
            rows.append([w[e] / s if e in keep else 0.0 for e in range(N)])
        got = balancing_loss_stage(torch.tensor(rows, dtype=torch.float64)).item()
        assert abs(got - brute_balancing(rows)) <= 1e-10


@given(st.integers(0, 10_000))
def test_balancing_permutation_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    gates = torch.rand(6, 7, generator=g, dtype=torch.float64) * (torch.rand(6, 7, generator=g) > 0.4)
    perm = torch.randperm(7, generator=g)
    a = balancing_loss_stage(gates).item()
    b = balancing_loss_stage(gates[:, perm]).item()
    assert a == pytest.approx(b, abs=1e-14)


def test_balancing_total():
    assert balancing_loss_total([0.0, 0.0, 0.0, 0.0]) == 0.0
    assert balancing_loss_total([0.02, 0.01]) == pytest.approx(0.03)
    xs = list(np.random.default_rng(0).random(4))
    assert balancing_loss_total(xs) == pytest.approx(sum(xs), abs=1e-15)


def test_total_loss():
    assert total_loss(1, 1, 1, 1, LossWeights(0, 0, 0, 0)).total == 0
    assert total_loss(1.0, 1.0, 1.0, 1.0, LossWeights()).total == pytest.approx(3.0, abs=1e-12)


@given(st.lists(st.floats(0, 50), min_size=4, max_size=4), st.integers(0, 3), st.floats(0, 5))
def test_total_loss_linear(comps, i, delta):
    w = LossWeights()
    names = ["dino", "part", "attribute", "balancing"]
    base = total_loss(*comps, w).total
    bumped = LossWeights(**{n: getattr(w, n) + (delta if k == i else 0) for k, n in enumerate(names)})
    assert total_loss(*comps, bumped).total - base == pytest.approx(delta * comps[i], abs=1e-9)


def test_doubling_part_weight():
    comps = (1.3, 2.1, 0.7, 0.05)
    a = total_loss(*comps, LossWeights()).total
    b = total_loss(*comps, LossWeights(part=1.2)).total
    assert abs((b - a) - 0.6 * comps[1]) <= 1e-12


def test_total_loss_non_finite_named():
    with pytest.raises(NumericError) as e:
        total_loss(1.0, float("nan"), 1.0, 1.0, LossWeights())
    assert e.value.component == "part"
    with pytest.raises(NumericError):
        total_loss(torch.tensor(float("inf")), 0.0, 0.0, 0.0, LossWeights())


def test_downsample_labels_majority():
    lab = np.array([[1, 1, 2, 2], [1, 3, 2, 0], [0, 0, 4, 4], [0, 5, 4, 5]])
    assert downsample_labels(lab, 2, 2).tolist() == [[1, 2], [0, 4]]
    # tie -> lowest id
    assert downsample_labels(np.array([[3, 1], [1, 3]]), 1, 1).tolist() == [[1]]
