"""Truncatable residual CNN.

Five sequential stages at desk scale. Stage 1 is a stem (3x3 stride-2
convolution, normalization, relu, 2x2 max pool, downsample factor 4);
stages 2..5 hold residual blocks of the shape conv-norm-relu twice plus an
additive skip, with a 1x1 projection on the skip whenever the block changes
channel count or resolution. Every parameter carries a hierarchical name
"stage{s}.block{b}.{layer}.{param}" so prefixes of the network can be moved
between tasks through the weight store.

Initialization: kernels and weights are uniform in +-1/sqrt(fan_in), biases
start at zero, normalization starts as the identity (gain 1, shift 0,
running mean 0, running variance 1). Construction is deterministic per seed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

NORM_MOMENTUM = 0.9
NORM_EPS = 1e-5


def fan_in_uniform(rng, shape, fan_in, dtype=np.float64):
    """Weight init: uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the residual network; defaults give the 5-stage desk-scale net."""

    in_channels: int = 3
    widths: tuple = (8, 16, 32, 64, 128)
    blocks: tuple = (1, 1, 1, 1, 1)
    downsample: tuple = (4, 1, 2, 2, 2)

    def __post_init__(self):
        n = len(self.widths)
        if n < 1:
            raise ValueError("backbone needs at least one stage")
        if len(self.blocks) != n or len(self.downsample) != n:
            raise ValueError(
                f"widths/blocks/downsample lengths differ: "
                f"{n}/{len(self.blocks)}/{len(self.downsample)}"
            )
        if self.downsample[0] not in (2, 4):
            raise ValueError(f"stem downsample must be 2 or 4, got {self.downsample[0]}")
        for f in self.downsample[1:]:
            if f not in (1, 2):
                raise ValueError(f"residual stage downsample must be 1 or 2, got {f}")
        if any(b < 1 for b in self.blocks):
            raise ValueError("every stage needs at least one block")


class ConvLayer:
    """Convolution whose bias is dropped when a norm layer follows it
    (mean subtraction would zero that bias's gradient anyway)."""

    def __init__(self, rng, c_in, c_out, k, stride, padding, with_bias=False, dtype=np.float64):
        fan_in = c_in * k * k
        self.kernel = Tensor(fan_in_uniform(rng, (c_out, c_in, k, k), fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if with_bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ad.conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)

    def params(self):
        named = {"kernel": self.kernel}
        if self.bias is not None:
            named["bias"] = self.bias
        return named


class NormLayer:
    """Per-channel normalization with running buffers held as non-grad tensors."""

    def __init__(self, channels, dtype=np.float64):
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self._train_updates = 0
        self._warned_fresh_eval = False

    def forward(self, x, mode):
        if mode == "train":
            self._train_updates += 1
        elif not self._warned_fresh_eval and self._stats_at_init():
            # eval with never-fitted buffers normalizes by the (0, 1) init;
            # imported (transferred) statistics count as fitted
            log.warning("normalization layer evaluated with unfitted statistics")
            self._warned_fresh_eval = True
        return ad.batch_norm(
            x, self.gain, self.shift,
            self.running_mean.data, self.running_var.data,
            mode, momentum=NORM_MOMENTUM, eps=NORM_EPS,
        )

    def _stats_at_init(self):
        return (self._train_updates == 0
                and not self.running_mean.data.any()
                and (self.running_var.data == 1.0).all())

    def params(self):
        return {
            "gain": self.gain,
            "shift": self.shift,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }


class StemBlock:
    """Stage-1 opener: conv stride 2, norm, relu, then an optional 2x2 pool."""

    def __init__(self, rng, c_in, c_out, pool, dtype=np.float64):
        self.conv = ConvLayer(rng, c_in, c_out, k=3, stride=2, padding=1, dtype=dtype)
        self.norm = NormLayer(c_out, dtype=dtype)
        self.pool = pool

    def forward(self, x, mode):
        out = ad.relu(self.norm.forward(self.conv.forward(x), mode))
        if self.pool:
            out = ad.max_pool2d(out, window=2)
        return out

    def layers(self):
        return {"conv": self.conv, "norm": self.norm}


class ResidualBlock:
    def __init__(self, rng, c_in, c_out, stride, dtype=np.float64):
        self.conv1 = ConvLayer(rng, c_in, c_out, k=3, stride=stride, padding=1, dtype=dtype)
        self.norm1 = NormLayer(c_out, dtype=dtype)
        self.conv2 = ConvLayer(rng, c_out, c_out, k=3, stride=1, padding=1, dtype=dtype)
        self.norm2 = NormLayer(c_out, dtype=dtype)
        if c_in != c_out or stride != 1:
            # the skip path has no norm after it, so its bias is live
            self.proj = ConvLayer(rng, c_in, c_out, k=1, stride=stride, padding=0,
                                  with_bias=True, dtype=dtype)
        else:
            self.proj = None

    def forward(self, x, mode):
        out = ad.relu(self.norm1.forward(self.conv1.forward(x), mode))
        out = ad.relu(self.norm2.forward(self.conv2.forward(out), mode))
        skip = self.proj.forward(x) if self.proj is not None else x
        return ad.add(out, skip)

    def layers(self):
        named = {"conv1": self.conv1, "norm1": self.norm1, "conv2": self.conv2, "norm2": self.norm2}
        if self.proj is not None:
            named["proj"] = self.proj
        return named


class Backbone:
    """Ordered stages; supports partial forward passes and prefix truncation."""

    def __init__(self, config, seed, dtype=np.float64):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng([seed, 0x5747])
        self.stages = []
        c_prev = config.in_channels
        for s, (width, n_blocks, factor) in enumerate(
            zip(config.widths, config.blocks, config.downsample), start=1
        ):
            blocks = []
            if s == 1:
                blocks.append(StemBlock(rng, c_prev, width, pool=(factor == 4), dtype=dtype))
                for _ in range(n_blocks - 1):
                    blocks.append(ResidualBlock(rng, width, width, stride=1, dtype=dtype))
            else:
                for b in range(n_blocks):
                    stride = factor if b == 0 else 1
                    c_in = c_prev if b == 0 else width
                    blocks.append(ResidualBlock(rng, c_in, width, stride=stride, dtype=dtype))
            self.stages.append(blocks)
            c_prev = width

    @property
    def n_stages(self):
        return len(self.stages)

    def stage_channels(self, stage):
        return self.config.widths[stage - 1]

    def forward_range(self, x, from_stage, to_stage, mode):
        """Compose stages from_stage..to_stage (1-based, inclusive) on a feature map."""
        if not 1 <= from_stage <= to_stage <= self.n_stages:
            raise ValueError(
                f"stage range {from_stage}..{to_stage} invalid for a {self.n_stages}-stage backbone"
            )
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        out = x
        for s in range(from_stage, to_stage + 1):
            for block in self.stages[s - 1]:
                out = block.forward(out, mode)
        return out

    def forward(self, x, mode):
        return self.forward_range(x, 1, self.n_stages, mode)

    def params(self):
        """Flat name -> Tensor map including normalization running buffers."""
        named = {}
        for s, blocks in enumerate(self.stages, start=1):
            for b, block in enumerate(blocks, start=1):
                for lname, layer in block.layers().items():
                    for pname, tensor in layer.params().items():
                        named[f"stage{s}.block{b}.{lname}.{pname}"] = tensor
        return named

    def trainable_params(self):
        return {n: t for n, t in self.params().items() if t.requires_grad}


def build_backbone(config, seed, dtype=np.float64):
    return Backbone(config, seed, dtype=dtype)


def truncate(bb, keep_stages):
    """A backbone made of stages 1..keep_stages, sharing the source's tensors.

    Values are identical by construction; mutating one network mutates the
    other. Transfer between independently built models goes through the
    weight store instead.
    """
    if keep_stages not in (3, 4, 5):
        raise ValueError(f"keep_stages must be one of 3, 4, 5; got {keep_stages}")
    if keep_stages > bb.n_stages:
        raise ValueError(f"cannot keep {keep_stages} stages of a {bb.n_stages}-stage backbone")
    cfg = bb.config
    sub_cfg = BackboneConfig(
        in_channels=cfg.in_channels,
        widths=cfg.widths[:keep_stages],
        blocks=cfg.blocks[:keep_stages],
        downsample=cfg.downsample[:keep_stages],
    )
    sub = Backbone.__new__(Backbone)
    sub.config = sub_cfg
    sub.seed = bb.seed
    sub.dtype = bb.dtype
    sub.stages = bb.stages[:keep_stages]
    return sub
