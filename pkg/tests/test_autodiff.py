"""Tests for the autodiff core.

Forward values are checked against independent nested-loop oracles written
directly from the operation definitions; gradients are checked against
central finite differences via check_gradients.
"""
import numpy as np
import pytest

from reidlab import autodiff as ad
from reidlab.autodiff import Tensor


# ---------------------------------------------------------------------------
# oracles: deliberately slow, loop-based reference implementations


def conv2d_oracle(x, k, b, stride=1, padding=0):
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                acc = b[o]
                for ci in range(c_in):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += k[o, ci, di, dj] * xp[ci, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


def max_pool_oracle(x, window):
    c, h, w = x.shape
    h2, w2 = h // window, w // window
    out = np.zeros((c, h2, w2))
    for ci in range(c):
        for i in range(h2):
            for j in range(w2):
                out[ci, i, j] = x[ci, i * window:(i + 1) * window, j * window:(j + 1) * window].max()
    return out


def softmax_oracle(s):
    e = np.exp(s - s.max())
    return e / e.sum()


def batch_norm_oracle(x, gain, bias, mu, var, eps):
    c = x.shape[0]
    out = np.zeros_like(x)
    for ci in range(c):
        out[ci] = gain[ci] * (x[ci] - mu[ci]) / np.sqrt(var[ci] + eps) + bias[ci]
    return out


# ---------------------------------------------------------------------------
# forward values against oracles


def test_conv2d_matches_nested_loop_oracle():
    rng = np.random.default_rng(7)
    for stride, padding, kh in [(1, 0, 3), (2, 1, 3), (1, 1, 1), (2, 0, 2), (3, 2, 5)]:
        x = rng.normal(size=(3, 11, 9))
        k = rng.normal(size=(4, 3, kh, kh))
        b = rng.normal(size=4)
        got = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=padding).data
        want = conv2d_oracle(x, k, b, stride=stride, padding=padding)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-12


def test_max_pool_matches_oracle():
    rng = np.random.default_rng(8)
    for shape in [(2, 8, 6), (3, 7, 5), (1, 2, 2)]:
        x = rng.normal(size=shape)
        got = ad.max_pool2d(Tensor(x), window=2).data
        assert np.array_equal(got, max_pool_oracle(x, 2))


def test_softmax_spatial_matches_oracle_and_sums_to_one():
    rng = np.random.default_rng(9)
    for _ in range(20):
        s = rng.normal(scale=5.0, size=(6, 4))
        got = ad.softmax_spatial(Tensor(s)).data
        assert np.max(np.abs(got - softmax_oracle(s))) < 1e-12
        assert abs(got.sum() - 1.0) < 1e-12
        assert (got > 0).all()


def test_softmax_spatial_survives_large_scores():
    s = np.array([[1000.0, 1000.0], [-1000.0, 999.0]])
    out = ad.softmax_spatial(Tensor(s)).data
    assert np.isfinite(out).all()
    assert abs(out.sum() - 1.0) < 1e-12


def test_softmax_spatial_rejects_nan():
    s = np.array([[0.0, np.nan]])
    with pytest.raises(ValueError):
        ad.softmax_spatial(Tensor(s))


def test_batch_norm_train_matches_oracle():
    rng = np.random.default_rng(10)
    x = rng.normal(loc=2.0, scale=3.0, size=(4, 6, 5))
    gain = rng.normal(size=4)
    bias = rng.normal(size=4)
    rm, rv = np.zeros(4), np.ones(4)
    out = ad.batch_norm(Tensor(x), Tensor(gain), Tensor(bias), rm, rv, mode="train").data
    mu = x.mean(axis=(1, 2))
    var = x.var(axis=(1, 2))
    want = batch_norm_oracle(x, gain, bias, mu, var, 1e-5)
    assert np.max(np.abs(out - want)) < 1e-10
    # running buffers folded with momentum 0.9 from (0, 1) start
    assert np.max(np.abs(rm - 0.1 * mu)) < 1e-12
    assert np.max(np.abs(rv - (0.9 + 0.1 * var))) < 1e-12


def test_batch_norm_eval_uses_running_buffers():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 3))
    rm = np.array([1.0, -2.0])
    rv = np.array([4.0, 0.25])
    gain = np.ones(2)
    bias = np.zeros(2)
    out = ad.batch_norm(Tensor(x), Tensor(gain), Tensor(bias), rm.copy(), rv.copy(), mode="eval").data
    want = batch_norm_oracle(x, gain, bias, rm, rv, 1e-5)
    assert np.max(np.abs(out - want)) < 1e-12


def test_batch_norm_train_rejects_single_value_maps():
    x = Tensor(np.ones((3, 1, 1)))
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    with pytest.raises(ad.ShapeError):
        ad.batch_norm(x, g, b, np.zeros(3), np.ones(3), mode="train")


def test_l2_normalize_unit_norm_and_degenerate_rejection():
    rng = np.random.default_rng(12)
    for _ in range(10):
        v = rng.normal(size=16)
        out = ad.l2_normalize(Tensor(v)).data
        assert abs(np.linalg.norm(out) - 1.0) < 1e-12
    with pytest.raises(ValueError):
        ad.l2_normalize(Tensor(np.zeros(8)))


def test_affine_and_sq_dist_values():
    rng = np.random.default_rng(13)
    w = rng.normal(size=(5, 7))
    x = rng.normal(size=7)
    b = rng.normal(size=5)
    got = ad.affine(Tensor(w), Tensor(x), Tensor(b)).data
    assert np.max(np.abs(got - (w @ x + b))) < 1e-12
    a2 = rng.normal(size=9)
    b2 = rng.normal(size=9)
    d = ad.sq_dist(Tensor(a2), Tensor(b2)).item()
    assert abs(d - ((a2 - b2) ** 2).sum()) < 1e-12


def test_masked_pool_and_spatial_scale_values():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(3, 4, 5))
    m = rng.uniform(size=(4, 5))
    pooled = ad.masked_pool(Tensor(x), Tensor(m)).data
    want = np.array([(x[c] * m).sum() for c in range(3)])
    assert np.max(np.abs(pooled - want)) < 1e-12
    scaled = ad.spatial_scale(Tensor(x), Tensor(m)).data
    assert np.max(np.abs(scaled - x * m[None])) < 1e-12


def test_attention_scores_match_per_location_affine():
    rng = np.random.default_rng(15)
    c, r, h, w = 3, 4, 5, 2
    x = rng.normal(size=(c, h, w))
    hp = rng.normal(size=r)
    wvec = rng.normal(size=r + c)
    bias = rng.normal(size=1)
    got = ad.attention_scores(Tensor(x), Tensor(hp), Tensor(wvec), Tensor(bias)).data
    want = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            want[i, j] = wvec @ np.concatenate([hp, x[:, i, j]]) + bias[0]
    assert np.max(np.abs(got - want)) < 1e-12


# ---------------------------------------------------------------------------
# graph mechanics


def test_fanout_gradients_accumulate():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1 = 7
    ad.sum_all(y).backward()
    assert abs(x.grad[0] - 7.0) < 1e-12


def test_repeated_backward_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = ad.sum_all(ad.mul(x, x))
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    assert np.allclose(x.grad, 2 * first)


def test_unused_leaf_keeps_zero_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    unused = Tensor(np.array([5.0]), requires_grad=True)
    ad.sum_all(x).backward()
    assert np.array_equal(unused.grad, np.zeros(1))


def test_no_grad_records_nothing():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert y._backward_fn is None


def test_long_chain_does_not_hit_recursion_limit():
    x = Tensor(np.array([1.0]), requires_grad=True)
    acc = x
    for _ in range(5000):
        acc = ad.add(acc, x)
    ad.sum_all(acc).backward()
    assert abs(x.grad[0] - 5001.0) < 1e-9


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.scale(x, 2.0).backward()


def test_shape_errors_name_both_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 2)))
    with pytest.raises(ad.ShapeError) as e:
        ad.add(a, b)
    assert "(2, 3)" in str(e.value) and "(3, 2)" in str(e.value)


def test_max_pool_tie_routes_gradient_to_first_cell():
    x = Tensor(np.zeros((1, 2, 2)), requires_grad=True)
    out = ad.max_pool2d(x, window=2)
    ad.sum_all(out).backward()
    want = np.zeros((1, 2, 2))
    want[0, 0, 0] = 1.0
    assert np.array_equal(x.grad, want)


def test_sigmoid_stable_at_extremes():
    x = Tensor(np.array([-800.0, 0.0, 800.0]))
    with np.errstate(over="raise"):
        out = ad.sigmoid(x).data
    assert np.allclose(out, [0.0, 0.5, 1.0])


# ---------------------------------------------------------------------------
# gradients against finite differences


def _check(build, params, tol=1e-6):
    report = ad.check_gradients(build, params, step=1e-5, tol=tol)
    assert report.passed, report.summary()


def test_grad_elementwise_and_activations():
    rng = np.random.default_rng(20)
    a = Tensor(rng.normal(size=6), requires_grad=True)
    b = Tensor(rng.normal(size=6), requires_grad=True)

    def build():
        t = ad.mul(ad.add(a, b), ad.sub(a, b))
        t = ad.add(ad.tanh(t), ad.sigmoid(ad.scale(t, 0.5)))
        return ad.sum_all(ad.add_const(ad.neg(t), 1.0))

    _check(build, {"a": a, "b": b})


def test_grad_relu_away_from_kink():
    rng = np.random.default_rng(21)
    vals = rng.normal(size=8)
    vals[np.abs(vals) < 0.05] = 0.1  # keep clear of the nondifferentiable point
    a = Tensor(vals, requires_grad=True)
    _check(lambda: ad.sum_all(ad.relu(a)), {"a": a})


def test_grad_affine_concat_slice():
    rng = np.random.default_rng(22)
    w = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    x = Tensor(rng.normal(size=4), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)

    def build():
        joined = ad.concat(x, ad.slice1d(x, 1, 3))
        h = ad.affine(w, joined, b)
        return ad.sum_all(ad.tanh(h))

    _check(build, {"w": w, "x": x, "b": b})


def test_grad_conv2d_all_inputs():
    rng = np.random.default_rng(23)
    x = Tensor(rng.normal(size=(2, 6, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)

    def build():
        return ad.sum_all(ad.tanh(ad.conv2d(x, k, b, stride=2, padding=1)))

    # saturated tanh regions inflate the relative error of the difference
    # quotient slightly, so this sits a notch above the smooth-op tolerance
    _check(build, {"x": x, "k": k, "b": b}, tol=1e-5)


def test_grad_max_pool():
    rng = np.random.default_rng(24)
    x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    _check(lambda: ad.sum_all(ad.tanh(ad.max_pool2d(x))), {"x": x}, tol=1e-4)


def test_grad_batch_norm_train_mode():
    rng = np.random.default_rng(25)
    x = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    s = Tensor(rng.normal(size=3), requires_grad=True)

    def build():
        # fresh buffers each call so the closure stays deterministic
        out = ad.batch_norm(x, g, s, np.zeros(3), np.ones(3), mode="train")
        return ad.sum_all(ad.tanh(out))

    _check(build, {"x": x, "gain": g, "shift": s})


def test_grad_softmax_masked_pool_l2norm():
    rng = np.random.default_rng(26)
    scores = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    fmap = Tensor(rng.normal(size=(5, 3, 4)), requires_grad=True)

    def build():
        m = ad.softmax_spatial(scores)
        pooled = ad.masked_pool(fmap, m)
        return ad.sq_dist(ad.l2_normalize(pooled), ad.l2_normalize(ad.channel_mean(fmap)))

    _check(build, {"scores": scores, "fmap": fmap})


def test_grad_attention_and_spatial_scale():
    rng = np.random.default_rng(27)
    x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
    hp = Tensor(rng.normal(size=5), requires_grad=True)
    w = Tensor(rng.normal(size=8), requires_grad=True)
    b = Tensor(rng.normal(size=1), requires_grad=True)

    def build():
        m = ad.softmax_spatial(ad.attention_scores(x, hp, w, b))
        return ad.sum_all(ad.tanh(ad.spatial_scale(x, m)))

    _check(build, {"x": x, "h_prev": hp, "w": w, "b": b})


def test_check_gradients_flags_corrupted_backward():
    x = Tensor(np.array([1.5, -0.5]), requires_grad=True)

    def wrong_square(t):
        # forward is t^2 but backward pretends the derivative is 3t
        def backward(grad):
            ad._accumulate(t, grad * 3.0 * t.data)
        return ad._record(t.data ** 2, (t,), backward)

    report = ad.check_gradients(lambda: ad.sum_all(wrong_square(x)), {"x": x})
    assert not report.passed


def test_check_gradients_rejects_nondeterministic_loss():
    x = Tensor(np.array([1.0]), requires_grad=True)
    rng = np.random.default_rng(0)

    def build():
        return ad.scale(x, float(rng.uniform()))

    with pytest.raises(ValueError):
        ad.check_gradients(build, {"x": x})
