"""Loss functions against direct-formula oracles, plus gradient checks."""
import numpy as np
import pytest

import reidlab.autodiff as ad
from reidlab.autodiff import Tensor, check_gradients
from reidlab.losses import (
    AffineHead,
    TripletLossConfig,
    batch_mean,
    sigmoid_ce_loss,
    softmax_ce_loss,
    triplet_distance,
    triplet_loss,
)


# ---------------------------------------------------------------------------
# oracles


def softmax_ce_oracle(logits, label):
    e = np.exp(logits - logits.max())
    return -np.log(e[label] / e.sum())


def sigmoid_ce_oracle(logits, targets, clamp=1e-7):
    total = 0.0
    for z, a in zip(logits, targets):
        p = min(max(1.0 / (1.0 + np.exp(-z)), clamp), 1.0 - clamp)
        total -= a * np.log(p) + (1.0 - a) * np.log(1.0 - p)
    return total


def triplet_distance_oracle(a, p, n):
    return 2 * np.sum((a - p) ** 2) - np.sum((a - n) ** 2) - np.sum((p - n) ** 2)


def _unit_vec(rng, r=8):
    v = rng.normal(size=r)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# classification loss


def test_softmax_ce_uniform_logits():
    loss = softmax_ce_loss(Tensor(np.zeros(4)), 2)
    assert abs(loss.item() - np.log(4.0)) < 1e-12


def test_softmax_ce_saturated_true_class():
    logits = np.zeros(5)
    logits[1] = 100.0
    assert softmax_ce_loss(Tensor(logits), 1).item() < 1e-9


def test_softmax_ce_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        logits = rng.normal(scale=3.0, size=7)
        label = int(rng.integers(7))
        got = softmax_ce_loss(Tensor(logits), label).item()
        assert abs(got - softmax_ce_oracle(logits, label)) < 1e-12


def test_softmax_ce_rejects_bad_label():
    for label in (-1, 4):
        with pytest.raises(ValueError):
            softmax_ce_loss(Tensor(np.zeros(4)), label)


def test_softmax_ce_gradient():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=6), requires_grad=True)
    report = check_gradients(lambda: softmax_ce_loss(logits, 3), {"logits": logits})
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# attribute loss


def test_sigmoid_ce_zero_logits_gives_k_ln2():
    k = 105
    loss = sigmoid_ce_loss(Tensor(np.zeros(k)), np.zeros(k))
    assert abs(loss.item() - k * np.log(2.0)) < 1e-9


def test_sigmoid_ce_single_attribute_value():
    # logit chosen so sigmoid gives exactly 0.9
    z = np.log(0.9 / 0.1)
    loss = sigmoid_ce_loss(Tensor(np.array([z])), np.array([1.0]))
    assert abs(loss.item() + np.log(0.9)) < 1e-12


def test_sigmoid_ce_matches_elementwise_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        k = int(rng.integers(1, 20))
        logits = rng.normal(scale=4.0, size=k)
        targets = rng.integers(0, 2, size=k).astype(float)
        got = sigmoid_ce_loss(Tensor(logits), targets).item()
        assert abs(got - sigmoid_ce_oracle(logits, targets)) < 1e-10


def test_sigmoid_ce_gradient_is_prob_minus_target():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(size=9), requires_grad=True)
    targets = rng.integers(0, 2, size=9).astype(float)
    logits.zero_grad()
    sigmoid_ce_loss(logits, targets).backward()
    probs = 1.0 / (1.0 + np.exp(-logits.data))
    assert np.max(np.abs(logits.grad - (probs - targets))) < 1e-12
    report = check_gradients(lambda: sigmoid_ce_loss(logits, targets), {"logits": logits}, tol=1e-6)
    assert report.passed, report.summary()


def test_sigmoid_ce_rejects_nonbinary_targets():
    with pytest.raises(ValueError):
        sigmoid_ce_loss(Tensor(np.zeros(3)), np.array([0.0, 0.5, 1.0]))


# ---------------------------------------------------------------------------
# triplet loss


def test_triplet_distance_identical_vectors():
    v = Tensor(np.array([1.0, 0.0]))
    assert triplet_distance(v, Tensor(v.data.copy()), Tensor(v.data.copy())).item() == 0.0


def test_triplet_distance_orthogonal_example():
    a = Tensor(np.array([1.0, 0.0]))
    p = Tensor(np.array([1.0, 0.0]))
    n = Tensor(np.array([0.0, 1.0]))
    assert abs(triplet_distance(a, p, n).item() - (-4.0)) < 1e-12


def test_triplet_distance_matches_oracle_on_random_units():
    rng = np.random.default_rng(4)
    for _ in range(200):
        a, p, n = (_unit_vec(rng) for _ in range(3))
        got = triplet_distance(Tensor(a), Tensor(p), Tensor(n)).item()
        assert abs(got - triplet_distance_oracle(a, p, n)) < 1e-12


def test_triplet_distance_rejects_unnormalized():
    rng = np.random.default_rng(5)
    a = Tensor(_unit_vec(rng) * 1.01)
    p = Tensor(_unit_vec(rng))
    n = Tensor(_unit_vec(rng))
    with pytest.raises(ValueError, match="unit-norm"):
        triplet_distance(a, p, n)


def test_triplet_loss_values():
    cfg = TripletLossConfig(margin=0.3)
    assert abs(triplet_loss(Tensor(np.asarray(0.0)), cfg).item() - 0.6) < 1e-15
    assert triplet_loss(Tensor(np.asarray(-4.0)), cfg).item() == 0.0
    assert triplet_loss(Tensor(np.asarray(-0.6)), cfg).item() == 0.0


def test_triplet_loss_boundary_subgradient_is_zero():
    cfg = TripletLossConfig(margin=0.3)
    d = Tensor(np.asarray(-0.6), requires_grad=True)
    d.zero_grad()
    triplet_loss(d, cfg).backward()
    assert d.grad == 0.0


def test_triplet_loss_active_region_gradient_is_one():
    cfg = TripletLossConfig(margin=0.3)
    d = Tensor(np.asarray(1.0), requires_grad=True)
    d.zero_grad()
    triplet_loss(d, cfg).backward()
    assert d.grad == 1.0


def test_triplet_chain_gradient_against_finite_differences():
    rng = np.random.default_rng(6)
    raw = {name: Tensor(rng.normal(size=6), requires_grad=True) for name in ("a", "p", "n")}
    cfg = TripletLossConfig(margin=0.3)

    def build():
        a = ad.l2_normalize(raw["a"])
        p = ad.l2_normalize(raw["p"])
        n = ad.l2_normalize(raw["n"])
        return triplet_loss(triplet_distance(a, p, n), cfg)

    report = check_gradients(build, raw, tol=1e-6)
    assert report.passed, report.summary()


def test_margin_validation():
    with pytest.raises(ValueError):
        TripletLossConfig(margin=-0.1)


def test_batch_mean_averages_scalars():
    losses = [Tensor(np.asarray(v)) for v in (1.0, 2.0, 6.0)]
    assert abs(batch_mean(losses).item() - 3.0) < 1e-15
    with pytest.raises(ValueError):
        batch_mean([])


def test_affine_head_naming_and_forward():
    rng = np.random.default_rng(7)
    head = AffineHead(rng, "classify_head", in_dim=5, out_dim=3)
    names = set(head.params())
    assert names == {"classify_head.weight", "classify_head.bias"}
    x = rng.normal(size=5)
    out = head.forward(Tensor(x)).data
    assert np.max(np.abs(out - (head.weight.data @ x + head.bias.data))) < 1e-12
