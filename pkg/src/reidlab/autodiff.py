"""Dense tensors with reverse-mode automatic differentiation.

Implements exactly the operation set the pipeline needs: 2-D convolution,
pooling, affine maps, elementwise arithmetic and activations, spatial
softmax, batch normalization, concatenation, slicing, L2 normalization and
scalar reductions. Arrays are 64-bit floats by default so finite-difference
checks are conclusive; pass dtype=numpy.float32 where speed matters more.

Graphs are recorded implicitly: every op attaches a backward closure and its
parent tensors to the output. ``Tensor.backward`` walks the graph once in
reverse topological order and accumulates gradients additively, so fan-out
nodes receive the sum of all downstream contributions.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up; message reports both sides."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A shaped array plus an additive gradient accumulator.

    Leaf tensors created with ``requires_grad=True`` get a zero gradient
    buffer up front; intermediate results allocate theirs lazily during
    backward. Gradients of leaves never touched by the loss stay exactly
    zero.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.flat[0])

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    def backward(self):
        """Reverse-mode sweep from a scalar output.

        Visits each recorded node exactly once in reverse topological order.
        Leaf gradients accumulate across repeated calls; op-output gradients
        are transient and reset at the start of every sweep.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        for node in order:
            if node._backward_fn is not None:
                node.grad = None
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t, g):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _record(data, parents, backward_fn):
    """Wrap ``data`` as an op output, wiring the graph if recording is on.

    ``backward_fn(grad_out)`` must accumulate into the parents' ``grad``
    via ``_accumulate``. Shared by every op here and by the loss ops in
    :mod:`reidlab.losses`.
    """
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
    return out


def _need(t, name, ndim=None):
    if not isinstance(t, Tensor):
        raise TypeError(f"{name} must be a Tensor, got {type(t).__name__}")
    if ndim is not None and t.data.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dims, got shape {t.data.shape}")


def _same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    _same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b):
    _same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b):
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * bd)
        if b.requires_grad:
            _accumulate(b, g * ad)

    return _record(ad * bd, (a, b), backward)


def neg(a):
    def backward(g):
        _accumulate(a, -g)

    return _record(-a.data, (a,), backward)


def scale(a, factor):
    """Multiply by a plain float constant (no gradient to the constant)."""
    factor = float(factor)

    def backward(g):
        _accumulate(a, g * factor)

    return _record(a.data * factor, (a,), backward)


def add_const(a, offset):
    offset = float(offset)

    def backward(g):
        _accumulate(a, g)

    return _record(a.data + offset, (a,), backward)


# ---------------------------------------------------------------------------
# activations


def relu(a):
    out = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0.0))

    return _record(out, (a,), backward)


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _record(out, (a,), backward)


def tanh(a):
    out = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out * out))

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum_all(a):
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _record(out, (a,), backward)


def channel_mean(x):
    """Per-channel mean over the spatial extent: (c, h, w) -> (c,)."""
    _need(x, "input", ndim=3)
    c, h, w = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, None, None] / (h * w), (c, h, w)).copy())

    return _record(out, (x,), backward)


def concat(a, b):
    """Concatenate two 1-D tensors."""
    _need(a, "left operand", ndim=1)
    _need(b, "right operand", ndim=1)
    na = a.data.shape[0]

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g[:na])
        if b.requires_grad:
            _accumulate(b, g[na:])

    return _record(np.concatenate([a.data, b.data]), (a, b), backward)


def slice1d(a, start, stop):
    _need(a, "input", ndim=1)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[start:stop] = g
        _accumulate(a, buf)

    return _record(a.data[start:stop].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def affine(weight, x, bias):
    """weight @ x + bias for a 2-D weight, 1-D input and 1-D bias."""
    _need(weight, "weight", ndim=2)
    _need(x, "input", ndim=1)
    _need(bias, "bias", ndim=1)
    m, n = weight.data.shape
    if x.data.shape[0] != n or bias.data.shape[0] != m:
        raise ShapeError(
            f"affine: weight {weight.data.shape} expects input ({n},) and bias ({m},), "
            f"got input {x.data.shape} and bias {bias.data.shape}"
        )
    out = weight.data @ x.data + bias.data

    def backward(g):
        if weight.requires_grad:
            _accumulate(weight, np.outer(g, x.data))
        if x.requires_grad:
            _accumulate(x, weight.data.T @ g)
        if bias.requires_grad:
            _accumulate(bias, g)

    return _record(out, (weight, x, bias), backward)


def sq_dist(a, b):
    """Squared Euclidean distance between two 1-D tensors, as a scalar node."""
    _same_shape(a, b, "sq_dist")
    diff = a.data - b.data
    out = np.asarray((diff * diff).sum(), dtype=a.data.dtype)

    def backward(g):
        gd = 2.0 * float(g) * diff
        if a.requires_grad:
            _accumulate(a, gd)
        if b.requires_grad:
            _accumulate(b, -gd)

    return _record(out, (a, b), backward)


def l2_normalize(v, eps=1e-12):
    """Scale a 1-D tensor to unit Euclidean norm."""
    _need(v, "input", ndim=1)
    norm = float(np.sqrt((v.data * v.data).sum()))
    if norm <= eps:
        raise ValueError(f"l2_normalize: degenerate feature with norm {norm:.3e} (<= {eps:.0e})")
    out = v.data / norm

    def backward(g):
        _accumulate(v, (g - out * float(out @ g)) / norm)

    return _record(out, (v,), backward)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D cross-correlation of a (c_in, h, w) map with a (c_out, c_in, kh, kw) kernel.

    Output spatial size is floor((dim + 2*padding - k)/stride) + 1 per side.
    ``bias=None`` omits the additive term (the usual choice when the output
    feeds a normalization layer, where a bias would be a dead parameter).
    """
    _need(x, "input", ndim=3)
    _need(kernel, "kernel", ndim=4)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    c_in, h, w = x.data.shape
    c_out, kc, kh, kw = kernel.data.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: kernel expects {kc} input channels, input has {c_in}")
    if bias is not None:
        _need(bias, "bias", ndim=1)
        if bias.data.shape[0] != c_out:
            raise ShapeError(f"conv2d: bias has {bias.data.shape[0]} entries, kernel has {c_out} filters")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp} "
            f"(input {h}x{w}, padding {padding})"
        )
    if padding:
        xp = np.zeros((c_in, hp, wp), dtype=x.data.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (c_in, h_out, w_out, kh, kw)
    out = np.tensordot(kernel.data, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out += bias.data[:, None, None]
    h_out, w_out = out.shape[1], out.shape[2]

    def backward(g):
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(1, 2)))
        if kernel.requires_grad:
            _accumulate(kernel, np.tensordot(g, win, axes=([1, 2], [1, 2])))
        if x.requires_grad:
            gxp = np.zeros((c_in, hp, wp), dtype=g.dtype)
            kd = kernel.data
            for di in range(kh):
                for dj in range(kw):
                    t = np.tensordot(kd[:, :, di, dj], g, axes=([0], [0]))
                    gxp[:, di:di + stride * h_out:stride, dj:dj + stride * w_out:stride] += t
            if padding:
                gxp = gxp[:, padding:padding + h, padding:padding + w]
            _accumulate(x, gxp)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, parents, backward)


def max_pool2d(x, window=2):
    """Non-overlapping max pooling with stride == window; trailing rows/cols drop."""
    _need(x, "input", ndim=3)
    c, h, w = x.data.shape
    h2, w2 = h // window, w // window
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"max_pool2d: window {window} exceeds input {h}x{w}")
    tiles = x.data[:, :h2 * window, :w2 * window].reshape(c, h2, window, w2, window)
    flat = tiles.transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, window * window)
    idx = flat.argmax(axis=3)  # first maximum wins on ties
    out = np.take_along_axis(flat, idx[..., None], axis=3)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        ci, hi, wi = np.indices((c, h2, w2))
        rows = hi * window + idx // window
        cols = wi * window + idx % window
        gx[ci, rows, cols] = g
        _accumulate(x, gx)

    return _record(out, (x,), backward)


def softmax_spatial(scores):
    """Softmax over all locations of an (h, w) score map, max-subtracted for stability."""
    _need(scores, "scores", ndim=2)
    if not np.isfinite(scores.data).all():
        raise ValueError("softmax_spatial: scores contain NaN or Inf")
    z = scores.data - scores.data.max()
    ez = np.exp(z)
    out = ez / ez.sum()

    def backward(g):
        _accumulate(scores, out * (g - float((g * out).sum())))

    return _record(out, (scores,), backward)


def masked_pool(x, m):
    """Mask-weighted spatial sum per channel: (c, h, w) x (h, w) -> (c,)."""
    _need(x, "feature map", ndim=3)
    _need(m, "mask", ndim=2)
    if x.data.shape[1:] != m.data.shape:
        raise ShapeError(f"masked_pool: map {x.data.shape} vs mask {m.data.shape}")
    out = np.tensordot(x.data, m.data, axes=([1, 2], [0, 1]))

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g[:, None, None] * m.data[None, :, :])
        if m.requires_grad:
            _accumulate(m, np.tensordot(g, x.data, axes=([0], [0])))

    return _record(out, (x, m), backward)


def spatial_scale(x, m):
    """Broadcast an (h, w) map over channels: out[i] = x[i] * m."""
    _need(x, "feature map", ndim=3)
    _need(m, "mask", ndim=2)
    if x.data.shape[1:] != m.data.shape:
        raise ShapeError(f"spatial_scale: map {x.data.shape} vs mask {m.data.shape}")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * m.data[None, :, :])
        if m.requires_grad:
            _accumulate(m, (g * x.data).sum(axis=0))

    return _record(x.data * m.data[None, :, :], (x, m), backward)


def attention_scores(x, h_prev, weight, bias):
    """Per-location affine score from concat(h_prev, x[:, i, j]).

    ``weight`` has length r + c with the hidden part first; ``bias`` is a
    length-1 tensor. Returns an (h, w) score map.
    """
    _need(x, "feature map", ndim=3)
    _need(h_prev, "hidden state", ndim=1)
    _need(weight, "weight", ndim=1)
    _need(bias, "bias", ndim=1)
    r = h_prev.data.shape[0]
    c = x.data.shape[0]
    if weight.data.shape[0] != r + c:
        raise ShapeError(
            f"attention_scores: weight length {weight.data.shape[0]} != hidden {r} + channels {c}"
        )
    wh, wx = weight.data[:r], weight.data[r:]
    base = float(wh @ h_prev.data) + float(bias.data[0])
    out = np.tensordot(wx, x.data, axes=([0], [0])) + base

    def backward(g):
        gs = float(g.sum())
        if x.requires_grad:
            _accumulate(x, wx[:, None, None] * g[None, :, :])
        if h_prev.requires_grad:
            _accumulate(h_prev, wh * gs)
        if weight.requires_grad:
            gw = np.concatenate([h_prev.data * gs, np.tensordot(x.data, g, axes=([1, 2], [0, 1]))])
            _accumulate(weight, gw)
        if bias.requires_grad:
            _accumulate(bias, np.array([gs], dtype=g.dtype))

    return _record(out, (x, h_prev, weight, bias), backward)


def batch_norm(x, gain, bias, run_mean, run_var, mode, momentum=0.9, eps=1e-5):
    """Per-channel normalization of a (c, h, w) map.

    Train mode normalizes by the statistics of the current map (needs at
    least 2 values per channel) and folds them into the running buffers
    with the given momentum; eval mode normalizes by the running buffers.
    ``run_mean``/``run_var`` are plain numpy arrays mutated in place.
    """
    _need(x, "input", ndim=3)
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    c, h, w = x.data.shape
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ShapeError(f"batch_norm: gain/bias must be ({c},), got {gain.data.shape}/{bias.data.shape}")
    if mode == "train":
        if h * w < 2:
            raise ShapeError(f"batch_norm: train mode needs >= 2 values per channel, map is {h}x{w}")
        mu = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        run_mean *= momentum
        run_mean += (1.0 - momentum) * mu
        run_var *= momentum
        run_var += (1.0 - momentum) * var
    else:
        mu = run_mean
        var = run_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[:, None, None]) * inv_std[:, None, None]
    out = gain.data[:, None, None] * xhat + bias.data[:, None, None]

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=(1, 2)))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(1, 2)))
        if x.requires_grad:
            gxh = g * gain.data[:, None, None]
            if mode == "train":
                m1 = gxh.mean(axis=(1, 2))[:, None, None]
                m2 = (gxh * xhat).mean(axis=(1, 2))[:, None, None]
                gx = inv_std[:, None, None] * (gxh - m1 - xhat * m2)
            else:
                gx = gxh * inv_std[:, None, None]
            _accumulate(x, gx)

    return _record(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-finite-difference comparison."""

    tol: float
    step: float
    per_param: dict = field(default_factory=dict)  # name -> max relative error

    @property
    def max_error(self):
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self):
        return self.max_error < self.tol

    def summary(self):
        lines = [f"{name}: max rel err {err:.3e}" for name, err in self.per_param.items()]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"overall max {self.max_error:.3e} vs tol {self.tol:.0e} -> {verdict}")
        return "\n".join(lines)


def check_gradients(build_loss, params, step=1e-5, tol=1e-4, scale_floor=1e-4):
    """Compare backward() gradients of a scalar loss against central differences.

    ``build_loss`` is a zero-argument closure returning a fresh scalar loss
    over the tensors in ``params`` (a name -> Tensor mapping). The closure
    must be deterministic; two probe evaluations that disagree bitwise are
    rejected. Relative error uses max(|analytic|, |numeric|, scale_floor)
    as denominator so near-zero gradients are judged on absolute terms.
    """
    for name, p in params.items():
        if not p.requires_grad:
            raise ValueError(f"check_gradients: parameter {name!r} does not require grad")

    def eval_loss():
        out = build_loss()
        if out.data.size != 1:
            raise ShapeError(f"check_gradients: loss must be scalar, got shape {out.data.shape}")
        return float(out.data.flat[0])

    with no_grad():
        probe_a = eval_loss()
        probe_b = eval_loss()
    if probe_a != probe_b:
        raise ValueError(
            f"check_gradients: loss closure is non-deterministic ({probe_a!r} != {probe_b!r})"
        )

    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    report = GradCheckReport(tol=tol, step=step)
    with no_grad():
        for name, p in params.items():
            flat = p.data.flat
            an = analytic[name].reshape(-1)
            worst = 0.0
            for i in range(p.data.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = eval_loss()
                flat[i] = orig - step
                f_minus = eval_loss()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                denom = max(abs(an[i]), abs(numeric), scale_floor)
                worst = max(worst, abs(an[i] - numeric) / denom)
            report.per_param[name] = worst
    return report
