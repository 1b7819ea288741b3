"""Task heads and loss functions.

Identity classification uses softmax cross-entropy over pooled backbone
output; attribute recognition uses an independent sigmoid cross-entropy per
attribute; re-id training uses a triplet hinge on a signed combination of
squared distances between unit-norm descriptors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _accumulate, _record
from .backbone import fan_in_uniform

PROB_CLAMP = 1e-7  # keeps log() finite without measurably biasing training


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.3

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


class AffineHead:
    """Pooled features -> logits. ``name`` prefixes the parameters so heads
    for different tasks never collide in a weight file."""

    def __init__(self, rng, name, in_dim, out_dim, dtype=np.float64):
        self.name = name
        self.weight = Tensor(fan_in_uniform(rng, (out_dim, in_dim), in_dim, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def forward(self, pooled):
        return ad.affine(self.weight, pooled, self.bias)

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


def softmax_ce_loss(logits, label):
    """Negative log softmax probability of the true class, max-stabilized."""
    ad._need(logits, "logits", ndim=1)
    n = logits.data.shape[0]
    label = int(label)
    if not 0 <= label < n:
        raise ValueError(f"label {label} outside [0, {n})")
    z = logits.data - logits.data.max()
    ez = np.exp(z)
    probs = ez / ez.sum()
    out = np.asarray(-(z[label] - np.log(ez.sum())), dtype=logits.data.dtype)

    def backward(g):
        grad = probs.copy()
        grad[label] -= 1.0
        _accumulate(logits, float(g) * grad)

    return _record(out, (logits,), backward)


def sigmoid_ce_loss(logits, targets):
    """Sum over attributes of the binary cross-entropy between sigmoid(logit)
    and the 0/1 target, with probabilities clamped to (1e-7, 1 - 1e-7)."""
    ad._need(logits, "logits", ndim=1)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.data.shape:
        raise ad.ShapeError(f"targets shape {targets.shape} vs logits {logits.data.shape}")
    if not np.isin(targets, (0.0, 1.0)).all():
        raise ValueError("targets must be binary 0/1")
    x = logits.data
    probs = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    probs = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    out = np.asarray(-(targets * np.log(probs) + (1.0 - targets) * np.log(1.0 - probs)).sum(),
                     dtype=x.dtype)

    def backward(g):
        # d/dx of the clamped objective collapses to sigmoid(x) - target
        _accumulate(logits, float(g) * (probs - targets))

    return _record(out, (logits,), backward)


UNIT_NORM_TOL = 1e-6


def triplet_distance(anchor, positive, negative):
    """Signed distance combination 2*d(a,p) - d(a,n) - d(p,n) on unit vectors.

    Callers are responsible for normalization upstream; inputs off the unit
    sphere by more than 1e-6 are rejected rather than silently renormalized.
    """
    for name, v in (("anchor", anchor), ("positive", positive), ("negative", negative)):
        ad._need(v, name, ndim=1)
        norm = float(np.linalg.norm(v.data))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"{name} is not unit-norm (|v| = {norm:.8f})")
    ap = ad.sq_dist(anchor, positive)
    an = ad.sq_dist(anchor, negative)
    pn = ad.sq_dist(positive, negative)
    return ad.sub(ad.scale(ap, 2.0), ad.add(an, pn))


def triplet_loss(d, cfg):
    """Hinge max(d + 2*margin, 0); the boundary takes the inactive-side
    subgradient (zero)."""
    return ad.relu(ad.add_const(d, 2.0 * cfg.margin))


def batch_mean(losses):
    """Mean of per-example scalar losses, as a graph node."""
    if not losses:
        raise ValueError("batch_mean needs at least one loss")
    total = losses[0]
    for term in losses[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(losses))
