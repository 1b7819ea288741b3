"""Cross-view ranking evaluation with CMC curves.

Protocol: per split, sample a set of test identities; the gallery holds one
random image per identity from the gallery view (single-shot), queries are
all images of those identities from the query view. A query's rank is the
1-based position of its own identity in the ascending-distance ordering of
the gallery, with exact ties broken by gallery identity ascending (a
documented rule so desk-scale distance collisions stay reproducible).
CMC(k) is the fraction of queries ranked within the top k; results aggregate
mean and standard deviation over splits.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class EvalProtocol:
    splits: int = 20
    test_identities: int = 100
    seed: int = 0
    cutoffs: tuple = (1, 5, 10, 20)

    def __post_init__(self):
        if self.splits < 1:
            raise ValueError(f"splits must be >= 1, got {self.splits}")
        if self.test_identities < 2:
            raise ValueError(f"need >= 2 test identities, got {self.test_identities}")
        if any(k < 1 for k in self.cutoffs):
            raise ValueError("rank cutoffs must be >= 1")


@dataclass
class CmcResult:
    cutoffs: tuple
    per_split: np.ndarray        # (splits, len(cutoffs))
    mean: np.ndarray
    std: np.ndarray
    excluded_identities: int = 0
    notes: list = field(default_factory=list)

    def rank1(self):
        return float(self.mean[self.cutoffs.index(1)]) if 1 in self.cutoffs else None

    def table(self):
        head = "rank  mean    std"
        rows = [f"{k:<5d} {m:.4f}  {s:.4f}" for k, m, s in zip(self.cutoffs, self.mean, self.std)]
        return "\n".join([head] + rows)


def _require_unit(feats, who):
    norms = np.linalg.norm(feats, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.size:
        raise ValueError(f"{who} feature {bad[0]} is not unit-norm (|v| = {norms[bad[0]]:.8f})")


def pairwise_distance(a, b):
    """Squared Euclidean distance between two unit vectors; lies in [0, 4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"feature dims differ: {a.shape} vs {b.shape}")
    for v, who in ((a, "left"), (b, "right")):
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"{who} feature is not unit-norm (|v| = {norm:.8f})")
    d = a - b
    return float(d @ d)


def cmc_single_split(query_feats, query_ids, gallery_feats, gallery_ids):
    """Full CMC curve (length = gallery size) for one single-shot split."""
    query_feats = np.asarray(query_feats, dtype=np.float64)
    gallery_feats = np.asarray(gallery_feats, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if len(np.unique(gallery_ids)) != len(gallery_ids):
        raise ValueError("gallery must be single-shot: one image per identity")
    missing = np.setdiff1d(query_ids, gallery_ids)
    if missing.size:
        raise ValueError(f"query identities absent from gallery: {missing[:5].tolist()}")
    _require_unit(query_feats, "query")
    _require_unit(gallery_feats, "gallery")

    n_gallery = gallery_feats.shape[0]
    hits = np.zeros(n_gallery)
    for q, qid in zip(query_feats, query_ids):
        diffs = gallery_feats - q
        dists = np.einsum("ij,ij->i", diffs, diffs)
        order = np.lexsort((gallery_ids, dists))  # distance first, then id
        rank = int(np.flatnonzero(gallery_ids[order] == qid)[0]) + 1
        hits[rank - 1] += 1
    return np.cumsum(hits) / len(query_ids)


def features_for(extractor, images, mode="eval"):
    """Unit-norm feature matrix for an (n, 3, h, w) image array, no gradients."""
    feats = []
    with no_grad():
        for img in images:
            feats.append(extractor.extract(Tensor(img), mode=mode).data.copy())
    return np.stack(feats)


def evaluate(extractor, dataset, protocol, query_view=0, gallery_view=1):
    """CMC over random identity splits; features are computed once and shared.

    ``extractor`` either has an ``extract(image, mode)`` method or is a
    callable mapping a raw image array to a unit-norm vector.
    """
    eligible = []
    excluded = 0
    for person in np.unique(dataset.person_ids):
        has_q = dataset.indices_of(person, query_view).size > 0
        has_g = dataset.indices_of(person, gallery_view).size > 0
        if has_q and has_g:
            eligible.append(person)
        else:
            excluded += 1
    if excluded:
        log.warning("excluded %d identities lacking one of the views", excluded)
    if len(eligible) < protocol.test_identities:
        raise ValueError(
            f"protocol needs {protocol.test_identities} identities with both views, "
            f"dataset offers {len(eligible)}"
        )

    if callable(extractor) and not hasattr(extractor, "extract"):
        feats = np.stack([np.asarray(extractor(img), dtype=np.float64) for img in dataset.images])
    else:
        feats = features_for(extractor, dataset.images)
    _require_unit(feats, "extracted")

    cutoffs = tuple(protocol.cutoffs)
    per_split = np.zeros((protocol.splits, len(cutoffs)))
    for split in range(protocol.splits):
        rng = np.random.default_rng([protocol.seed, 4, split])
        chosen = rng.choice(np.asarray(eligible), size=protocol.test_identities, replace=False)
        gallery_idx = []
        query_idx = []
        for person in chosen:
            g_pool = dataset.indices_of(person, gallery_view)
            gallery_idx.append(int(g_pool[rng.integers(len(g_pool))]))
            query_idx.extend(dataset.indices_of(person, query_view).tolist())
        curve = cmc_single_split(
            feats[query_idx], dataset.person_ids[query_idx],
            feats[gallery_idx], dataset.person_ids[gallery_idx],
        )
        per_split[split] = [curve[min(k, len(curve)) - 1] for k in cutoffs]

    return CmcResult(
        cutoffs=cutoffs,
        per_split=per_split,
        mean=per_split.mean(axis=0),
        std=per_split.std(axis=0),
        excluded_identities=excluded,
    )


def emit_report(result, csv_path, plot_path=None):
    """CSV with columns rank,mean,std; optional plot file of "rank accuracy" pairs."""
    with open(csv_path, "w") as fh:
        fh.write("rank,mean,std\n")
        for k, m, s in zip(result.cutoffs, result.mean, result.std):
            fh.write(f"{k},{m:.10g},{s:.10g}\n")
    if plot_path is not None:
        with open(plot_path, "w") as fh:
            for k, m in zip(result.cutoffs, result.mean):
                fh.write(f"{k} {m:.10g}\n")
