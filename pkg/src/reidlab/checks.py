"""Self-contained verification suites.

Each suite re-derives expected values from an independent oracle (finite
differences, direct formulas, brute-force ranking) and compares the live
implementation against it. The CLI exposes them under ``check --suite`` and
the acceptance tests call them directly, so one code path produces both
answers.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import gates
from .autodiff import Tensor, check_gradients, no_grad
from .backbone import BackboneConfig, build_backbone, truncate
from .evaluation import cmc_single_split
from .gates import FeatureExtractor, GateConfig, global_mask, local_mask, soft_attention_mask
from .losses import TripletLossConfig, sigmoid_ce_loss, triplet_distance, triplet_loss

GRAD_TOL = 1e-4
MASK_SUM_TOL = 1e-9
LOSS_ORACLE_TOL = 1e-12
SIGMOID_LANDMARK_TOL = 1e-9

TINY_BACKBONE = BackboneConfig(widths=(2, 2, 4, 4, 8))
TINY_INPUT = (3, 32, 16)   # leaves a 2x1 map at the deepest kept stage
TINY_HIDDEN = 8
TINY_STEPS = 4


@dataclass
class CheckReport:
    suite: str
    ok: bool
    lines: list
    elapsed: float

    def summary(self):
        verdict = "PASS" if self.ok else "FAIL"
        head = f"[{verdict}] suite={self.suite} elapsed={self.elapsed:.1f}s"
        return "\n".join([head] + [f"  {line}" for line in self.lines])


def tiny_extractor(strategy, seed=0):
    """The gradient-check model: 4-stage truncated backbone plus gate."""
    bb = truncate(build_backbone(TINY_BACKBONE, seed), 4)
    cfg = GateConfig(strategy=strategy, steps=TINY_STEPS, hidden=TINY_HIDDEN)
    return FeatureExtractor(bb, cfg, seed)


def _install_fitted_stats(extractor, rng):
    """Move normalization buffers off their (0, 1) init, as training would.

    At the init values, zero patches that upstream relus carve out pass
    through eval-mode normalization unchanged and land exactly on the next
    relu kink, where finite differences measure the two-sided average slope
    and no analytic choice can match it. Any fitted statistics break the
    degeneracy.
    """
    for name, p in extractor.params().items():
        if name.endswith("running_mean"):
            p.data[...] = rng.normal(0.0, 0.3, size=p.data.shape)
        elif name.endswith("running_var"):
            p.data[...] = rng.uniform(0.5, 2.0, size=p.data.shape)


def check_grads(step=1e-5, tol=GRAD_TOL, seed=0):
    """End-to-end triplet-loss gradient vs central finite differences.

    Forwards run exactly like re-id training: normalization layers on
    fitted, frozen running statistics. With the statistics fixed the loss
    is smooth in every parameter, so at step 1e-5 the O(step^2) truncation
    term and the roundoff term both sit around 1e-7 relative, three orders
    under the tolerance. (Batch-stat forwards would be rougher: the
    per-map statistics add strong higher-order terms.)
    """
    t0 = time.perf_counter()
    lines = []
    ok = True
    rng = np.random.default_rng([seed, 21])
    images = [Tensor(rng.uniform(0.1, 0.9, size=TINY_INPUT)) for _ in range(3)]
    margin = TripletLossConfig(margin=0.3)
    for strategy in gates.STRATEGIES:
        extractor = tiny_extractor(strategy, seed)
        _install_fitted_stats(extractor, rng)
        params = {n: p for n, p in extractor.params().items() if p.requires_grad}

        def build_loss():
            feats = [extractor.extract(img, mode="eval") for img in images]
            return triplet_loss(triplet_distance(*feats), margin)

        report = check_gradients(build_loss, params, step=step, tol=tol)
        ok &= report.passed
        worst = max(report.per_param, key=report.per_param.get)
        lines.append(
            f"{'PASS' if report.passed else 'FAIL'} strategy={strategy:<6s} "
            f"tensors={len(report.per_param)} max_rel_err={report.max_error:.3e} "
            f"(worst: {worst})"
        )
    return CheckReport("grads", ok, lines, time.perf_counter() - t0)


def check_masks(rollouts=100, seed=0):
    """Mask simplex/partition invariants over random rollouts per strategy."""
    t0 = time.perf_counter()
    lines = []
    ok = True
    rng = np.random.default_rng([seed, 22])

    worst_sum = 0.0
    min_value = np.inf
    soft_matches = True
    partition_ok = True
    for _ in range(rollouts):
        h = int(rng.integers(2, 9))
        w = int(rng.integers(1, 7))
        c = int(rng.integers(1, 5))
        r = int(rng.integers(1, 5))
        n = int(rng.integers(1, min(h, 8) + 1))
        x = Tensor(rng.normal(size=(c, h, w)))
        unit = gates.LstmUnit(rng, hidden=r, input_channels=c, score_channels=c)
        h_prev = Tensor(rng.normal(size=(r,)))
        masks = {
            "global": global_mask(h, w),
            "local": [local_mask(t, n, h, w) for t in range(n)],
            "soft": soft_attention_mask(h_prev, x, unit),
        }
        flat = [masks["global"], masks["soft"], *masks["local"]]
        for m in flat:
            worst_sum = max(worst_sum, abs(float(m.data.sum()) - 1.0))
            min_value = min(min_value, float(m.data.min()))

        zero_unit = gates.LstmUnit(rng, hidden=r, input_channels=c, score_channels=c)
        zero_unit.score_weight.data[...] = 0.0
        zero_unit.score_bias.data[...] = 0.0
        soft_zero = soft_attention_mask(h_prev, x, zero_unit)
        if not np.array_equal(soft_zero.data, global_mask(h, w).data):
            soft_matches = False

        if h % n == 0:
            support = np.stack([(m.data > 0) for m in masks["local"]])
            rows_covered = support.any(axis=0).all()
            overlap = support.sum(axis=0).max() > 1
            if not rows_covered or overlap:
                partition_ok = False

    ok = (worst_sum <= MASK_SUM_TOL) and (min_value >= 0.0) and soft_matches and partition_ok
    lines.append(f"{'PASS' if worst_sum <= MASK_SUM_TOL else 'FAIL'} "
                 f"mask sums within {MASK_SUM_TOL:g} (worst |sum-1| = {worst_sum:.3e})")
    lines.append(f"{'PASS' if min_value >= 0.0 else 'FAIL'} "
                 f"masks nonnegative (min value = {min_value:.3e})")
    lines.append(f"{'PASS' if soft_matches else 'FAIL'} "
                 "zero scoring network makes the soft mask equal the global mask exactly")
    lines.append(f"{'PASS' if partition_ok else 'FAIL'} "
                 "local masks partition the rows when the height divides evenly")
    return CheckReport("masks", ok, lines, time.perf_counter() - t0)


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def check_losses(n_triplets=1000, seed=0):
    """Triplet distance/loss against direct formulas plus fixed landmarks."""
    t0 = time.perf_counter()
    lines = []
    rng = np.random.default_rng([seed, 23])
    dim = 16
    margin = TripletLossConfig(margin=0.3)
    worst_d = 0.0
    worst_l = 0.0
    for _ in range(n_triplets):
        a, p, n = (_unit(rng, dim) for _ in range(3))
        sq = lambda u, v: float(np.sum((u - v) ** 2))
        want_d = 2.0 * sq(a, p) - sq(a, n) - sq(p, n)
        want_l = max(0.0, want_d + 2 * margin.margin)
        with no_grad():
            got_d = triplet_distance(Tensor(a), Tensor(p), Tensor(n)).item()
            got_l = triplet_loss(
                triplet_distance(Tensor(a), Tensor(p), Tensor(n)), margin).item()
        worst_d = max(worst_d, abs(got_d - want_d))
        worst_l = max(worst_l, abs(got_l - want_l))

    e = np.zeros(4)
    e[0] = 1.0
    with no_grad():
        # identical unit vectors give distance 0 exactly, so L = 2 * 0.3
        landmark = triplet_loss(
            triplet_distance(Tensor(e), Tensor(e), Tensor(e)), margin).item()
        k = 16
        zero_ce = sigmoid_ce_loss(Tensor(np.zeros(k)),
                                  np.zeros(k, dtype=int)).item()
    landmark_ok = landmark == 0.6
    ce_ok = abs(zero_ce - k * np.log(2.0)) <= SIGMOID_LANDMARK_TOL
    d_ok = worst_d <= LOSS_ORACLE_TOL
    l_ok = worst_l <= LOSS_ORACLE_TOL
    lines.append(f"{'PASS' if d_ok else 'FAIL'} triplet distance vs oracle "
                 f"on {n_triplets} unit triplets (worst |diff| = {worst_d:.3e})")
    lines.append(f"{'PASS' if l_ok else 'FAIL'} triplet loss vs oracle "
                 f"(worst |diff| = {worst_l:.3e})")
    lines.append(f"{'PASS' if landmark_ok else 'FAIL'} "
                 f"loss at zero distance with margin 0.3 is exactly 0.6 (got {landmark!r})")
    lines.append(f"{'PASS' if ce_ok else 'FAIL'} sigmoid CE at zero logits is "
                 f"K*ln2 (|diff| = {abs(zero_ce - k * np.log(2.0)):.3e})")
    ok = d_ok and l_ok and landmark_ok and ce_ok
    return CheckReport("losses", ok, lines, time.perf_counter() - t0)


def brute_force_cmc(query_feats, query_ids, gallery_feats, gallery_ids):
    """Rank every gallery entry per query by (distance, gallery id) tuples."""
    n_g = len(gallery_ids)
    hits = np.zeros(n_g)
    for q in range(len(query_ids)):
        pairs = []
        for g in range(n_g):
            dist = float(np.sum((query_feats[q] - gallery_feats[g]) ** 2))
            pairs.append((dist, int(gallery_ids[g])))
        order = sorted(range(n_g), key=lambda g: pairs[g])
        rank = next(i for i, g in enumerate(order)
                    if gallery_ids[g] == query_ids[q])
        hits[rank:] += 1
    return hits / len(query_ids)


def check_cmc(instances=200, seed=0):
    """cmc_single_split vs exhaustive ranking on random instances."""
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 24])
    mismatches = 0
    for _ in range(instances):
        n_ids = int(rng.integers(2, 51))
        dim = int(rng.integers(2, 9))
        gallery = np.stack([_unit(rng, dim) for _ in range(n_ids)])
        gallery_ids = rng.permutation(n_ids)
        n_q = int(rng.integers(1, 2 * n_ids + 1))
        query_ids = rng.integers(0, n_ids, size=n_q)
        queries = np.stack([_unit(rng, dim) for _ in range(n_q)])
        if rng.uniform() < 0.3:
            # force distance ties so the documented tie-break matters
            queries[0] = gallery[0]
            dup = gallery[0]
            gallery = np.concatenate([gallery, dup[None]], axis=0)
            gallery_ids = np.concatenate([gallery_ids, [int(gallery_ids.max()) + 1]])
        got = cmc_single_split(queries, query_ids, gallery, gallery_ids)
        want = brute_force_cmc(queries, query_ids, gallery, gallery_ids)
        if not np.array_equal(got, want):
            mismatches += 1
    ok = mismatches == 0
    lines = [f"{'PASS' if ok else 'FAIL'} cmc_single_split equals brute force on "
             f"{instances} instances ({mismatches} mismatches)"]
    return CheckReport("cmc", ok, lines, time.perf_counter() - t0)


SUITES = {
    "grads": check_grads,
    "masks": check_masks,
    "losses": check_losses,
    "cmc": check_cmc,
}


def run_suite(name):
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name]()
