"""Mask strategies, LSTM recurrence and the end-to-end extractor."""
import numpy as np
import pytest

from reidlab import autodiff as ad
from reidlab import gates
from reidlab.autodiff import Tensor
from reidlab.backbone import BackboneConfig, build_backbone, truncate
from reidlab.gates import (
    FeatureExtractor,
    GateConfig,
    LstmState,
    LstmUnit,
    global_mask,
    init_states,
    local_mask,
    lstm_step,
    masked_input,
    soft_attention_mask,
)


def _unit(seed=0, r=3, c=4, score=None, init_c=None):
    rng = np.random.default_rng(seed)
    return LstmUnit(rng, r, c, score_channels=score, init_channels=init_c)


# ---------------------------------------------------------------------------
# oracles


def lstm_step_oracle(W, b, h_prev, y, c_prev):
    r = h_prev.shape[0]
    z = W @ np.concatenate([h_prev, y]) + b

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    i, f, o = sig(z[:r]), sig(z[r:2 * r]), sig(z[2 * r:3 * r])
    g = np.tanh(z[3 * r:])
    c = f * c_prev + i * g
    return c, o * np.tanh(c)


def masked_input_oracle(x, m):
    c, h, w = x.shape
    out = np.zeros(c)
    for ci in range(c):
        for i in range(h):
            for j in range(w):
                out[ci] += m[i, j] * x[ci, i, j]
    return out


# ---------------------------------------------------------------------------
# masks


def test_global_mask_values():
    assert np.array_equal(global_mask(2, 2).data, np.full((2, 2), 0.25))
    assert np.array_equal(global_mask(8, 4).data, np.full((8, 4), 1.0 / 32))


def test_global_masked_input_is_channel_mean():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 8, 4))
    y = masked_input(Tensor(x), global_mask(8, 4)).data
    assert np.max(np.abs(y - x.mean(axis=(1, 2)))) < 1e-12


def test_local_mask_single_row_band():
    m = local_mask(t=2, n=8, h=8, w=4).data
    want = np.zeros((8, 4))
    want[2, :] = 0.25
    assert np.array_equal(m, want)


def test_local_mask_two_row_band():
    m = local_mask(t=0, n=8, h=16, w=4).data
    assert np.all(m[0:2, :] == 1.0 / 8)
    assert np.all(m[2:, :] == 0.0)


def test_local_masks_partition_rows_when_divisible():
    for h, n in [(8, 8), (16, 8), (8, 4), (12, 4)]:
        support = np.zeros((h, 3), dtype=bool)
        for t in range(n):
            m = local_mask(t, n, h, 3).data
            active = m > 0
            assert not np.any(support & active), f"overlap at t={t} (h={h}, n={n})"
            support |= active
        assert support.all(), f"rows not covered for h={h}, n={n}"


def test_local_mask_widens_empty_band(caplog):
    gates._widened_bands.clear()
    with caplog.at_level("WARNING"):
        masks = [local_mask(t, 8, 4, 2).data for t in range(8)]
    for m in masks:
        assert abs(m.sum() - 1.0) < 1e-12
        assert (m >= 0).all()
        assert np.count_nonzero(m.sum(axis=1)) == 1  # exactly one active row
    assert sum("widening" in r.message for r in caplog.records) == 1  # logged once


def test_local_mask_rejects_bad_step():
    for t in (-1, 8, 100):
        with pytest.raises(ValueError):
            local_mask(t, 8, 8, 4)


def test_soft_attention_zero_weights_equals_global():
    unit = _unit(score=4)
    unit.score_weight.data[...] = 0.0
    unit.score_bias.data[...] = 0.0
    x = Tensor(np.random.default_rng(2).normal(size=(4, 5, 3)))
    h_prev = Tensor(np.random.default_rng(3).normal(size=3))
    m = soft_attention_mask(h_prev, x, unit).data
    assert np.array_equal(m, global_mask(5, 3).data)


def test_soft_attention_concentrates_on_hot_location():
    unit = _unit(score=4)
    unit.score_weight.data[...] = 0.0
    unit.score_weight.data[3] = 50.0  # read channel 0 of the map only
    unit.score_bias.data[...] = 0.0
    x = np.zeros((4, 5, 3))
    x[0, 2, 1] = 1.0
    m = soft_attention_mask(Tensor(np.zeros(3)), Tensor(x), unit).data
    assert m[2, 1] > 0.99


def test_soft_attention_matches_affine_softmax_oracle():
    rng = np.random.default_rng(4)
    unit = _unit(seed=5, r=3, c=4, score=4)
    x = rng.normal(size=(4, 6, 2))
    h_prev = rng.normal(size=3)
    m = soft_attention_mask(Tensor(h_prev), Tensor(x), unit).data
    scores = np.zeros((6, 2))
    for i in range(6):
        for j in range(2):
            col = np.concatenate([h_prev, x[:, i, j]])
            scores[i, j] = unit.score_weight.data @ col + unit.score_bias.data[0]
    e = np.exp(scores - scores.max())
    assert np.max(np.abs(m - e / e.sum())) < 1e-12


def test_all_strategy_masks_satisfy_invariants():
    rng = np.random.default_rng(6)
    unit = _unit(seed=7, r=3, c=4, score=4)
    for trial in range(25):
        x = Tensor(rng.normal(size=(4, 6, 3)))
        h_prev = Tensor(rng.normal(size=3))
        candidates = [
            global_mask(6, 3).data,
            local_mask(trial % 4, 4, 6, 3).data,
            soft_attention_mask(h_prev, x, unit).data,
        ]
        for m in candidates:
            assert abs(m.sum() - 1.0) < 1e-9
            assert (m >= 0).all()


def test_masked_input_one_hot_selects_column():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(5, 4, 3))
    m = np.zeros((4, 3))
    m[1, 2] = 1.0
    y = masked_input(Tensor(x), Tensor(m)).data
    assert np.array_equal(y, x[:, 1, 2])


def test_masked_input_matches_double_loop_oracle():
    rng = np.random.default_rng(9)
    for _ in range(10):
        x = rng.normal(size=(3, 5, 4))
        m = rng.uniform(size=(5, 4))
        m /= m.sum()
        got = masked_input(Tensor(x), Tensor(m)).data
        assert np.max(np.abs(got - masked_input_oracle(x, m))) < 1e-12


# ---------------------------------------------------------------------------
# recurrence


def test_init_states_zero_weights_give_zero_states():
    unit = _unit()
    for mlp in (unit.cell_init, unit.hidden_init):
        for t in (mlp.w1, mlp.b1, mlp.w2, mlp.b2):
            t.data[...] = 0.0
    x = Tensor(np.random.default_rng(10).normal(size=(4, 3, 2)))
    state = init_states(x, unit)
    assert np.array_equal(state.cell.data, np.zeros(3))
    assert np.array_equal(state.hidden.data, np.zeros(3))


def test_init_states_consume_channel_means():
    rng = np.random.default_rng(11)
    unit = _unit(seed=12)
    x = rng.normal(size=(4, 3, 2))
    means = x.mean(axis=(1, 2))
    state = init_states(Tensor(x), unit)
    want = unit.cell_init.w2.data @ np.tanh(
        unit.cell_init.w1.data @ means + unit.cell_init.b1.data
    ) + unit.cell_init.b2.data
    assert np.max(np.abs(state.cell.data - want)) < 1e-12


def test_lstm_step_zero_weights_from_zero_state():
    unit = _unit()
    unit.gates_weight.data[...] = 0.0
    unit.gates_bias.data[...] = 0.0
    state = LstmState(cell=Tensor(np.zeros(3)), hidden=Tensor(np.zeros(3)))
    out = lstm_step(unit, Tensor(np.zeros(4)), state)
    assert np.array_equal(out.cell.data, np.zeros(3))
    assert np.array_equal(out.hidden.data, np.zeros(3))


def test_lstm_step_zero_weights_halve_cell():
    unit = _unit()
    unit.gates_weight.data[...] = 0.0
    unit.gates_bias.data[...] = 0.0
    v = np.array([1.0, -2.0, 0.5])
    state = LstmState(cell=Tensor(v), hidden=Tensor(np.zeros(3)))
    out = lstm_step(unit, Tensor(np.zeros(4)), state)
    assert np.max(np.abs(out.cell.data - 0.5 * v)) < 1e-12
    assert np.max(np.abs(out.hidden.data - 0.5 * np.tanh(0.5 * v))) < 1e-12


def test_lstm_step_matches_equation_oracle():
    rng = np.random.default_rng(13)
    unit = _unit(seed=14)
    for _ in range(10):
        h_prev = rng.normal(size=3)
        c_prev = rng.normal(size=3)
        y = rng.normal(size=4)
        out = lstm_step(unit, Tensor(y), LstmState(cell=Tensor(c_prev), hidden=Tensor(h_prev)))
        c_want, h_want = lstm_step_oracle(
            unit.gates_weight.data, unit.gates_bias.data, h_prev, y, c_prev
        )
        assert np.max(np.abs(out.cell.data - c_want)) < 1e-12
        assert np.max(np.abs(out.hidden.data - h_want)) < 1e-12


def test_lstm_step_rejects_nonfinite_preactivations():
    unit = _unit()
    state = LstmState(cell=Tensor(np.zeros(3)), hidden=Tensor(np.zeros(3)))
    bad = Tensor(np.array([np.inf, 0.0, 0.0, 0.0]))
    with pytest.raises(FloatingPointError, match="step 5"):
        lstm_step(unit, bad, state, step_index=5)


# ---------------------------------------------------------------------------
# extractor

TINY_BB = BackboneConfig(widths=(2, 2, 4, 4, 8))


def _extractor(strategy, steps=4, hidden=8, seed=0, temporal_mean=False):
    # the re-id extractor runs on the transferable 4-stage prefix; stage5
    # exists only for the classification/attribute sources
    bb = truncate(build_backbone(TINY_BB, seed=seed), 4)
    cfg = GateConfig(strategy=strategy, steps=steps, hidden=hidden, temporal_mean=temporal_mean)
    return FeatureExtractor(bb, cfg, seed=seed)


def _image(seed, h=32, w=16):
    return Tensor(np.random.default_rng(seed).normal(size=(3, h, w)))


@pytest.mark.parametrize("strategy", ["global", "local", "soft", "fine"])
def test_extract_feature_is_unit_norm(strategy):
    ex = _extractor(strategy)
    feat = ex.extract(_image(20), mode="eval")
    assert feat.data.shape == (8,)
    assert abs(np.linalg.norm(feat.data) - 1.0) < 1e-9


def test_global_strategy_depends_only_on_channel_means():
    # permuting the spatial layout preserves channel means, so the whole
    # global rollout must be unchanged
    unit = _unit(seed=30, r=3, c=4)
    rng = np.random.default_rng(21)
    x = rng.normal(size=(4, 3, 2))
    y = x[:, ::-1, ::-1].copy()

    def rollout(arr):
        base = Tensor(arr)
        state = init_states(base, unit)
        for t in range(3):
            state = lstm_step(unit, masked_input(base, global_mask(3, 2)), state, t)
        return state.hidden.data

    assert np.max(np.abs(rollout(x) - rollout(y))) < 1e-12


def test_local_rollout_covers_disjoint_bands():
    ex = _extractor("local", steps=4)
    # stage5 map for a 64x32 input is 2x1: bands widen; use mask dump on a
    # taller synthetic map instead to check the rollout wiring
    feat, masks = ex.extract(_image(22, h=64, w=32), mode="eval", collect_masks=True)
    assert len(masks) == 4
    for m in masks:
        assert abs(m.sum() - 1.0) < 1e-9


def test_soft_and_global_agree_when_attention_is_zero():
    ex_soft = _extractor("soft", seed=3)
    ex_glob = _extractor("global", seed=3)
    # align every shared weight, zero the attention
    soft_params = ex_soft.params()
    for name, t in ex_glob.params().items():
        soft_params[name].data[...] = t.data
    ex_soft.unit.score_weight.data[...] = 0.0
    ex_soft.unit.score_bias.data[...] = 0.0
    img = _image(23)
    a = ex_soft.extract(img, mode="eval").data
    b = ex_glob.extract(img, mode="eval").data
    assert np.array_equal(a, b)


def test_temporal_mean_switch_changes_feature():
    a = _extractor("global", seed=4).extract(_image(24), mode="eval").data
    ex = _extractor("global", seed=4, temporal_mean=True)
    b = ex.extract(_image(24), mode="eval").data
    assert abs(np.linalg.norm(b) - 1.0) < 1e-9
    assert not np.allclose(a, b)


def test_extractor_param_names_cover_backbone_and_lstm():
    ex = _extractor("soft")
    names = set(ex.params())
    assert "lstm.gates.weight" in names
    assert "lstm.score.weight" in names
    assert "lstm.cell_init.hidden_weight" in names
    assert "lstm.hidden_init.out_bias" in names
    assert "stage1.block1.conv.kernel" in names
    glob = _extractor("global")
    assert "lstm.score.weight" not in set(glob.params())


def test_fine_strategy_gradients_reach_attention_and_final_stage():
    ex = _extractor("fine", steps=2)
    img = _image(25)
    params = ex.trainable_params()
    for p in params.values():
        p.zero_grad()
    feat = ex.extract(img, mode="train")
    ad.sum_all(ad.mul(feat, feat)).backward()
    assert np.any(params["lstm.score.weight"].grad != 0.0)
    assert np.any(params["stage4.block1.conv1.kernel"].grad != 0.0)
    assert np.any(params["stage1.block1.conv.kernel"].grad != 0.0)


def test_mask_dump_csv_layout(tmp_path):
    ex = _extractor("soft", steps=3)
    _, masks = ex.extract(_image(26), mode="eval", collect_masks=True)
    path = tmp_path / "masks.csv"
    gates.dump_masks(path, masks)
    rows = path.read_text().strip().split("\n")
    assert len(rows) == 3
    h, w = masks[0].shape
    for row, m in zip(rows, masks):
        vals = np.array([float(v) for v in row.split(",")])
        assert vals.shape == (h * w,)
        assert np.max(np.abs(vals - m.reshape(-1))) < 1e-9
