"""Recurrent feature extraction gated by spatial masks.

An LSTM consumes one masked view of a backbone feature map per step. Four
masking strategies are provided:

* ``global``: uniform weights, every step sees the per-channel mean.
* ``local``: a normalized row-band indicator, step t sees its own horizontal
  stripe of the map.
* ``soft``: learned attention; per-location scores are an affine function of
  concat(previous hidden state, the location's channel column), softmaxed
  over the map.
* ``fine``: the same learned attention applied one stage earlier; the masked
  map is re-extracted by the final backbone stage and average-pooled.

Every mask is nonnegative and sums to one, so the masked input is always a
convex combination of feature columns and magnitudes stay comparable across
strategies. The final descriptor is the L2-normalized last hidden state (or
the normalized mean over steps with ``temporal_mean``).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import fan_in_uniform

log = logging.getLogger(__name__)

STRATEGIES = ("global", "local", "soft", "fine")


@dataclass(frozen=True)
class GateConfig:
    strategy: str = "global"
    steps: int = 8
    hidden: int = 128
    temporal_mean: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.hidden < 1:
            raise ValueError(f"hidden size must be >= 1, got {self.hidden}")


@dataclass
class LstmState:
    cell: Tensor
    hidden: Tensor


class LstmUnit:
    """Gate affine, optional attention affine, and the two state-init MLPs.

    The gate affine maps concat(h_prev, y) of size r + c to 4r
    pre-activations sliced in the fixed order rows [0,r) input gate,
    [r,2r) forget gate, [2r,3r) output gate, [3r,4r) candidate. The order
    is arbitrary mathematically but frozen so weight files stay portable.
    """

    def __init__(self, rng, hidden, input_channels, score_channels=None, init_channels=None,
                 dtype=np.float64):
        r, c = hidden, input_channels
        ci = init_channels if init_channels is not None else input_channels
        self.hidden = r
        self.input_channels = c
        self.gates_weight = Tensor(fan_in_uniform(rng, (4 * r, r + c), r + c, dtype), requires_grad=True)
        self.gates_bias = Tensor(np.zeros(4 * r, dtype=dtype), requires_grad=True)
        if score_channels is not None:
            self.score_weight = Tensor(
                fan_in_uniform(rng, (r + score_channels,), r + score_channels, dtype),
                requires_grad=True,
            )
            self.score_bias = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        else:
            self.score_weight = None
            self.score_bias = None
        self.cell_init = _InitMlp(rng, ci, r, dtype)
        self.hidden_init = _InitMlp(rng, ci, r, dtype)

    def params(self):
        named = {
            "lstm.gates.weight": self.gates_weight,
            "lstm.gates.bias": self.gates_bias,
        }
        if self.score_weight is not None:
            named["lstm.score.weight"] = self.score_weight
            named["lstm.score.bias"] = self.score_bias
        named.update(self.cell_init.params("lstm.cell_init"))
        named.update(self.hidden_init.params("lstm.hidden_init"))
        return named


class _InitMlp:
    """Single-hidden-layer perceptron (tanh hidden) from channel means to a state."""

    def __init__(self, rng, c_in, r, dtype):
        self.w1 = Tensor(fan_in_uniform(rng, (r, c_in), c_in, dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(r, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(fan_in_uniform(rng, (r, r), r, dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(r, dtype=dtype), requires_grad=True)

    def forward(self, v):
        return ad.affine(self.w2, ad.tanh(ad.affine(self.w1, v, self.b1)), self.b2)

    def params(self, prefix):
        return {
            f"{prefix}.hidden_weight": self.w1,
            f"{prefix}.hidden_bias": self.b1,
            f"{prefix}.out_weight": self.w2,
            f"{prefix}.out_bias": self.b2,
        }


def init_states(x, unit):
    """Predict (c_0, h_0) from the per-channel means of the feature map."""
    means = ad.channel_mean(x)
    return LstmState(cell=unit.cell_init.forward(means), hidden=unit.hidden_init.forward(means))


def global_mask(h, w, dtype=np.float64):
    """Uniform mask: masked_input reduces to the per-channel mean."""
    if h < 1 or w < 1:
        raise ValueError(f"mask shape must be positive, got {h}x{w}")
    return Tensor(np.full((h, w), 1.0 / (h * w), dtype=dtype))


_widened_bands = set()


def local_mask(t, n, h, w, dtype=np.float64):
    """Normalized indicator of the row band [floor(t*h/n), floor((t+1)*h/n)).

    A band that rounds to zero rows (h < n) is widened to the single row
    nearest the band center, logged once per (h, n) pair.
    """
    if not 0 <= t < n:
        raise ValueError(f"step index {t} outside [0, {n})")
    if h < 1 or w < 1:
        raise ValueError(f"mask shape must be positive, got {h}x{w}")
    lo = (t * h) // n
    hi = ((t + 1) * h) // n
    if hi <= lo:
        center = (t + 0.5) * h / n
        lo = min(h - 1, int(center))
        hi = lo + 1
        if (h, n) not in _widened_bands:
            _widened_bands.add((h, n))
            log.warning("local mask bands narrower than one row for h=%d, n=%d; widening", h, n)
    m = np.zeros((h, w), dtype=dtype)
    m[lo:hi, :] = 1.0 / ((hi - lo) * w)
    return Tensor(m)


def soft_attention_mask(h_prev, x, unit):
    """Softmax over per-location affine scores of concat(h_prev, feature column)."""
    if unit.score_weight is None:
        raise ValueError("this unit was built without attention parameters")
    scores = ad.attention_scores(x, h_prev, unit.score_weight, unit.score_bias)
    return ad.softmax_spatial(scores)


def masked_input(x, m):
    """Mask-weighted sum over locations, one value per channel."""
    return ad.masked_pool(x, m)


def lstm_step(unit, y, state, step_index=0):
    """One recurrence update: gates from concat(h_prev, y), then the cell/hidden rules."""
    r = unit.hidden
    z = ad.affine(unit.gates_weight, ad.concat(state.hidden, y), unit.gates_bias)
    if not np.isfinite(z.data).all():
        raise FloatingPointError(f"non-finite gate pre-activations at step {step_index}")
    i = ad.sigmoid(ad.slice1d(z, 0, r))
    f = ad.sigmoid(ad.slice1d(z, r, 2 * r))
    o = ad.sigmoid(ad.slice1d(z, 2 * r, 3 * r))
    g = ad.tanh(ad.slice1d(z, 3 * r, 4 * r))
    cell = ad.add(ad.mul(f, state.cell), ad.mul(i, g))
    hidden = ad.mul(o, ad.tanh(cell))
    return LstmState(cell=cell, hidden=hidden)


class FeatureExtractor:
    """Backbone + gated LSTM producing a unit-norm descriptor per image.

    global/local/soft run the mask loop on the last backbone stage's map.
    fine masks the second-to-last stage's map, pushes each masked map
    through the final stage and feeds the LSTM its average pool, so the
    attention operates at higher resolution than the gate input.
    """

    def __init__(self, bb, config, seed):
        self.backbone = bb
        self.config = config
        if config.strategy == "fine" and bb.n_stages < 2:
            raise ValueError("fine strategy needs at least two backbone stages")
        gate_c = bb.stage_channels(bb.n_stages)
        if config.strategy == "fine":
            mask_c = bb.stage_channels(bb.n_stages - 1)
            score_c, init_c = mask_c, mask_c
        elif config.strategy == "soft":
            score_c, init_c = gate_c, gate_c
        else:
            score_c, init_c = None, gate_c
        rng = np.random.default_rng([seed, 0x1257])
        self.unit = LstmUnit(rng, config.hidden, gate_c,
                             score_channels=score_c, init_channels=init_c, dtype=bb.dtype)

    def extract(self, image, mode, collect_masks=False):
        """Descriptor for one image; optionally also the per-step masks."""
        cfg = self.config
        bb = self.backbone
        masks = [] if collect_masks else None
        if cfg.strategy == "fine":
            base = bb.forward_range(image, 1, bb.n_stages - 1, mode)
        else:
            base = bb.forward_range(image, 1, bb.n_stages, mode)
        h, w = base.data.shape[1], base.data.shape[2]
        state = init_states(base, self.unit)
        hidden_sum = None
        for t in range(cfg.steps):
            if cfg.strategy == "global":
                m = global_mask(h, w, dtype=base.data.dtype)
            elif cfg.strategy == "local":
                m = local_mask(t, cfg.steps, h, w, dtype=base.data.dtype)
            else:
                m = soft_attention_mask(state.hidden, base, self.unit)
            if collect_masks:
                masks.append(m.data.copy())
            if cfg.strategy == "fine":
                refined = bb.forward_range(ad.spatial_scale(base, m), bb.n_stages, bb.n_stages, mode)
                y = ad.channel_mean(refined)
            else:
                y = masked_input(base, m)
            state = lstm_step(self.unit, y, state, step_index=t)
            if cfg.temporal_mean:
                hidden_sum = state.hidden if hidden_sum is None else ad.add(hidden_sum, state.hidden)
        pooled = ad.scale(hidden_sum, 1.0 / cfg.steps) if cfg.temporal_mean else state.hidden
        feature = ad.l2_normalize(pooled)
        return (feature, masks) if collect_masks else feature

    def params(self):
        named = dict(self.backbone.params())
        named.update(self.unit.params())
        return named

    def trainable_params(self):
        return {n: t for n, t in self.params().items() if t.requires_grad}


def dump_masks(path, masks):
    """CSV inspection dump: one row per step, h*w flattened columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for m in masks:
            writer.writerow([f"{v:.10g}" for v in np.asarray(m).reshape(-1)])
