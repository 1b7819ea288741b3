"""Staged training pipeline.

Three tasks share one optimizer/augmentation/logging harness:

* ``classify``: 5-stage backbone + softmax head over person identities.
* ``attr``: 5-stage backbone + sigmoid head over binary attributes.
* ``reid``: truncated backbone (transferred from a source checkpoint when
  configured) + spatial-gate LSTM, trained with the triplet hinge. The three
  triplet branches literally share parameter tensors.

Learning rate halves after ``patience`` epochs without validation
improvement and never increases. A non-finite loss or gradient aborts
training and restores the last epoch-end snapshot. Runs are bitwise
deterministic per seed: every random decision draws from a stream keyed by
(seed, purpose, epoch, item).
"""
from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .backbone import BackboneConfig, build_backbone, truncate
from .evaluation import EvalProtocol, evaluate
from .gates import FeatureExtractor, GateConfig
from .losses import (
    AffineHead,
    TripletLossConfig,
    batch_mean,
    sigmoid_ce_loss,
    softmax_ce_loss,
    triplet_distance,
    triplet_loss,
)
from .weightstore import apply_weights, load_weights, save_weights

log = logging.getLogger(__name__)

TASKS = ("classify", "attr", "reid")


# ---------------------------------------------------------------------------
# optimizer


class NanGradient(FloatingPointError):
    """A parameter produced a non-finite gradient; carries the name."""


class Adam:
    """Bias-corrected Adam. ``step`` consumes and zeroes the gradients."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.step_count = 0

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name} has no gradient; run backward first")
            if not np.isfinite(p.grad).all():
                raise NanGradient(f"non-finite gradient in {name}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** t)
            v_hat = self.v[name] / (1 - b2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.zero_grads()


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip_prob: float = 0.5
    max_shift: float = 0.10      # fraction of each dimension
    zoom_lo: float = 0.9
    zoom_hi: float = 1.1
    blur_prob: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0 or not 0.0 <= self.blur_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if not 0.0 <= self.max_shift <= 0.5:
            raise ValueError(f"max_shift must be in [0, 0.5], got {self.max_shift}")
        if not 0.0 < self.zoom_lo <= self.zoom_hi:
            raise ValueError("zoom range must satisfy 0 < lo <= hi")


IDENTITY_AUGMENT = AugmentParams(flip_prob=0.0, max_shift=0.0, zoom_lo=1.0, zoom_hi=1.0,
                                 blur_prob=0.0)


def augment(image, rng, params):
    """Flip/shift/zoom/blur in a fixed order with a fixed rng draw order.

    Shift and zoom pad with edge replication so the output keeps the input
    dimensions. With all knobs neutral the image passes through unchanged.
    """
    c, h, w = image.shape
    out = image
    do_flip = rng.uniform() < params.flip_prob
    span_y = int(round(params.max_shift * h))
    span_x = int(round(params.max_shift * w))
    dy = int(rng.integers(-span_y, span_y + 1)) if span_y else 0
    dx = int(rng.integers(-span_x, span_x + 1)) if span_x else 0
    zoom = float(rng.uniform(params.zoom_lo, params.zoom_hi))
    do_blur = rng.uniform() < params.blur_prob

    if do_flip:
        out = out[:, :, ::-1]
    if dy or dx:
        padded = np.pad(out, ((0, 0), (abs(dy), abs(dy)), (abs(dx), abs(dx))), mode="edge")
        y0 = abs(dy) - dy
        x0 = abs(dx) - dx
        out = padded[:, y0:y0 + h, x0:x0 + w]
    if zoom != 1.0:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        src_r = np.clip(np.round((np.arange(h) - cy) / zoom + cy).astype(int), 0, h - 1)
        src_c = np.clip(np.round((np.arange(w) - cx) / zoom + cx).astype(int), 0, w - 1)
        out = out[:, src_r[:, None], src_c[None, :]]
    if do_blur:
        padded = np.pad(out, ((0, 0), (1, 1), (1, 1)), mode="edge")
        acc = np.zeros_like(out)
        for di in range(3):
            for dj in range(3):
                acc += padded[:, di:di + h, dj:dj + w]
        out = acc / 9.0
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# triplet sampling


def sample_triplet(dataset, rng):
    """Indices (anchor, positive, negative): anchor/positive share an identity
    but are different images; negative is any image of another identity."""
    persons = np.unique(dataset.person_ids)
    if len(persons) < 2:
        raise ValueError(f"triplets need >= 2 identities, dataset has {len(persons)}")
    counts = {int(p): dataset.indices_of(p).size for p in persons}
    eligible = [p for p, n in counts.items() if n >= 2]
    if not eligible:
        raise ValueError(
            f"no identity with >= 2 images (identities: {len(persons)}, "
            f"max images per identity: {max(counts.values())})"
        )
    anchor_person = int(eligible[rng.integers(len(eligible))])
    own = dataset.indices_of(anchor_person)
    pick = rng.choice(len(own), size=2, replace=False)
    anchor, positive = int(own[pick[0]]), int(own[pick[1]])
    others = persons[persons != anchor_person]
    negative_person = int(others[rng.integers(len(others))])
    neg_pool = dataset.indices_of(negative_person)
    negative = int(neg_pool[rng.integers(len(neg_pool))])
    return anchor, positive, negative


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    task: str = "reid"
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 5
    val_fraction: float = 0.10
    margin: float = 0.3
    seed: int = 0
    keep_stages: int = 4                 # reid only
    source_weights: str | None = None    # reid only
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    checkpoint_every: int = 0            # epochs between checkpoints; 0 = final only
    stop_loss_ratio: float | None = None # stop when train loss < ratio * first epoch's
    triplets_per_epoch: int | None = None
    val_triplets: int = 16
    n_classes: int | None = None         # classify head width; dataset identities when None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0,1), got {self.val_fraction}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.keep_stages not in (3, 4, 5):
            raise ValueError(f"keep_stages must be 3, 4 or 5, got {self.keep_stages}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_seconds: float


@dataclass
class TrainResult:
    params: dict
    model: object
    log: list
    load_report: object = None
    diverged: bool = False
    stopped_early: bool = False
    weights_path: Path | None = None


# ---------------------------------------------------------------------------
# model builders


def build_classify_model(cfg, n_out, seed):
    bb = build_backbone(cfg.backbone, seed)
    rng = np.random.default_rng([seed, 0xC1A5])
    head = AffineHead(rng, "classify_head", bb.stage_channels(bb.n_stages), n_out)
    return bb, head


def build_attr_model(cfg, n_attrs, seed):
    bb = build_backbone(cfg.backbone, seed)
    rng = np.random.default_rng([seed, 0xA77])
    head = AffineHead(rng, "attr_head", bb.stage_channels(bb.n_stages), n_attrs)
    return bb, head


def build_reid_extractor(cfg, seed):
    bb = truncate(build_backbone(cfg.backbone, seed), cfg.keep_stages)
    return FeatureExtractor(bb, cfg.gate, seed)


def _head_logits(bb, head, image, mode):
    feats = bb.forward(image, mode)
    return head.forward(ad.channel_mean(feats))


# ---------------------------------------------------------------------------
# training


def _image_rng(seed, epoch, index):
    # the concurrency contract: augmentation streams keyed by
    # (master seed, epoch, image index) so batch order cannot matter
    return np.random.default_rng([seed, 10, epoch, int(index)])


def train_task(cfg, dataset, out_dir=None):
    """Train one task on a dataset; returns weights, model, per-epoch log."""
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.task == "reid":
        return _train(cfg, dataset, out_dir, _ReidHarness(cfg, dataset))
    if cfg.task == "classify":
        n_out = cfg.n_classes if cfg.n_classes is not None else dataset.n_identities
        return _train(cfg, dataset, out_dir, _HeadHarness(cfg, dataset, "classify", n_out))
    return _train(cfg, dataset, out_dir, _HeadHarness(cfg, dataset, "attr",
                                                      dataset.attributes.shape[1]))


class _HeadHarness:
    """Classification / attribute task: image-level 90/10 split."""

    def __init__(self, cfg, dataset, kind, n_out):
        self.cfg = cfg
        self.dataset = dataset
        self.kind = kind
        if kind == "classify":
            self.bb, self.head = build_classify_model(cfg, n_out, cfg.seed)
            if dataset.person_ids.max() >= n_out:
                raise ValueError(
                    f"classify head has {n_out} outputs but dataset ids reach "
                    f"{int(dataset.person_ids.max())}"
                )
        else:
            self.bb, self.head = build_attr_model(cfg, n_out, cfg.seed)
        perm = np.random.default_rng([cfg.seed, 11]).permutation(dataset.n_images)
        n_val = max(1, int(round(cfg.val_fraction * dataset.n_images)))
        self.val_idx = perm[:n_val]
        self.train_idx = perm[n_val:]
        self.load_report = None

    def params(self):
        named = dict(self.bb.params())
        named.update(self.head.params())
        return named

    def model(self):
        return (self.bb, self.head)

    def _target(self, index):
        if self.kind == "classify":
            return int(self.dataset.person_ids[index])
        return self.dataset.attributes[int(self.dataset.person_ids[index])]

    def _loss_node(self, image_np, index, mode):
        logits = _head_logits(self.bb, self.head, Tensor(image_np), mode)
        if self.kind == "classify":
            return softmax_ce_loss(logits, self._target(index))
        return sigmoid_ce_loss(logits, self._target(index))

    def epoch_batches(self, epoch):
        order = np.random.default_rng([self.cfg.seed, 12, epoch]).permutation(self.train_idx)
        bs = self.cfg.batch_size
        return [order[i:i + bs] for i in range(0, len(order), bs)]

    def batch_loss(self, batch, epoch):
        losses = []
        for index in batch:
            rng = _image_rng(self.cfg.seed, epoch, index)
            img = augment(self.dataset.images[index], rng, self.cfg.augment)
            losses.append(self._loss_node(img, index, mode="train"))
        return batch_mean(losses)

    def validation_loss(self):
        with no_grad():
            vals = [
                self._loss_node(self.dataset.images[i], i, mode="eval").item()
                for i in self.val_idx
            ]
        return float(np.mean(vals))


class _ReidHarness:
    """Triplet task: identity-level split, three branches on shared tensors.

    Training forwards run the normalization layers on their running
    statistics (frozen, never updated here). With single-image forwards the
    batch statistics are per-map statistics, so batch-stat training would
    optimize a per-image-normalized function that feature extraction never
    uses; freezing makes the trained function and the extracted one
    identical. Transferred checkpoints bring fitted statistics along; a
    from-scratch extractor keeps its init buffers and the normalization
    acts as a trainable affine.
    """

    def __init__(self, cfg, dataset):
        self.cfg = cfg
        self.dataset = dataset
        self.extractor = build_reid_extractor(cfg, cfg.seed)
        self.triplet_cfg = TripletLossConfig(margin=cfg.margin)
        self.load_report = None
        if cfg.source_weights is not None:
            loaded = load_weights(cfg.source_weights)
            self.load_report = apply_weights(self.extractor.params(), loaded, policy="prefix")
            log.info("transfer load:\n%s", self.load_report.summary())

        persons = np.unique(dataset.person_ids)
        perm = np.random.default_rng([cfg.seed, 11]).permutation(persons)
        n_val = int(round(cfg.val_fraction * len(persons)))
        if n_val >= 2:
            self.val_persons = perm[:n_val]
            self.train_persons = perm[n_val:]
            self.val_source = dataset.subset(self.val_persons)
        else:
            # too few identities to hold a validation pool that can form
            # triplets; fall back to validating on training identities
            self.val_persons = np.array([], dtype=int)
            self.train_persons = perm
            self.val_source = dataset.subset(self.train_persons)
            log.warning("validation fell back to training identities "
                        "(%d identities total)", len(persons))
        self.train_subset = dataset.subset(self.train_persons)
        rng = np.random.default_rng([cfg.seed, 13])
        self.val_triplets = [sample_triplet(self.val_source, rng)
                             for _ in range(cfg.val_triplets)]

    def params(self):
        return self.extractor.params()

    def model(self):
        return self.extractor

    def epoch_batches(self, epoch):
        n = self.cfg.triplets_per_epoch or self.train_subset.n_images
        rng = np.random.default_rng([self.cfg.seed, 12, epoch])
        triplets = [sample_triplet(self.train_subset, rng) for _ in range(n)]
        bs = self.cfg.batch_size
        return [triplets[i:i + bs] for i in range(0, n, bs)]

    def _triplet_loss_node(self, triplet, mode, epoch=None, source=None):
        source = source if source is not None else self.train_subset
        feats = []
        for index in triplet:
            img = source.images[index]
            if epoch is not None:
                rng = _image_rng(self.cfg.seed, epoch, index)
                img = augment(img, rng, self.cfg.augment)
            feats.append(self.extractor.extract(Tensor(img), mode=mode))
        return triplet_loss(triplet_distance(*feats), self.triplet_cfg)

    def batch_loss(self, batch, epoch):
        return batch_mean([self._triplet_loss_node(t, "eval", epoch=epoch) for t in batch])

    def validation_loss(self):
        with no_grad():
            vals = [
                self._triplet_loss_node(t, "eval", source=self.val_source).item()
                for t in self.val_triplets
            ]
        return float(np.mean(vals))


def _train(cfg, dataset, out_dir, harness):
    params = harness.params()
    trainable = {n: p for n, p in params.items() if p.requires_grad}
    opt = Adam(trainable, lr=cfg.lr)
    rows = []
    best_val = np.inf
    stale = 0
    first_train_loss = None
    diverged = False
    stopped_early = False
    snapshot = {n: p.data.copy() for n, p in params.items()}

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        try:
            for batch in harness.epoch_batches(epoch):
                opt.zero_grads()
                loss = harness.batch_loss(batch, epoch)
                value = loss.item()
                if not np.isfinite(value):
                    raise NanGradient(f"non-finite training loss {value!r}")
                loss.backward()
                opt.step()
                total += value * len(batch)
                count += len(batch)
            train_loss = total / max(count, 1)
            val_loss = harness.validation_loss()
            if not np.isfinite(val_loss):
                raise NanGradient(f"non-finite validation loss {val_loss!r}")
        except NanGradient as err:
            log.error("diverged at epoch %d: %s; restoring last good weights", epoch, err)
            for name, p in params.items():
                p.data[...] = snapshot[name]
            diverged = True
            rows.append(EpochRow(epoch, float("nan"), float("nan"), opt.lr,
                                 time.perf_counter() - t0))
            break

        snapshot = {n: p.data.copy() for n, p in params.items()}
        rows.append(EpochRow(epoch, train_loss, val_loss, opt.lr, time.perf_counter() - t0))

        if val_loss < best_val - 1e-12:
            best_val = val_loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                opt.lr /= 2.0
                stale = 0
                log.info("epoch %d: no validation improvement for %d epochs, lr -> %g",
                         epoch, cfg.patience, opt.lr)

        if first_train_loss is None:
            first_train_loss = train_loss
        elif cfg.stop_loss_ratio is not None and train_loss < cfg.stop_loss_ratio * first_train_loss:
            stopped_early = True
            break

        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_weights(out_dir / f"epoch{epoch:04d}.rtlw", params)

    result = TrainResult(
        params=params,
        model=harness.model(),
        log=rows,
        load_report=harness.load_report,
        diverged=diverged,
        stopped_early=stopped_early,
    )
    if out_dir is not None:
        result.weights_path = out_dir / "final.rtlw"
        save_weights(result.weights_path, params)
        with open(out_dir / "log.csv", "w") as fh:
            fh.write("epoch,train_loss,val_loss,lr,wall_seconds\n")
            for r in rows:
                fh.write(f"{r.epoch},{r.train_loss:.10g},{r.val_loss:.10g},"
                         f"{r.lr:.10g},{r.wall_seconds:.3f}\n")
        if result.load_report is not None:
            (out_dir / "load_report.txt").write_text(result.load_report.summary() + "\n")
    return result


# ---------------------------------------------------------------------------
# ablations


PRESETS = ("transfer_stages", "knowledge_source", "mask_type")

MASK_ROW_LABELS = {"global": "GM", "soft": "AM", "local": "LM", "fine": "FM"}


@dataclass
class AblationRow:
    label: str
    per_seed: np.ndarray   # (seeds, cutoffs)
    median: np.ndarray     # (cutoffs,)


@dataclass
class AblationTable:
    preset: str
    cutoffs: tuple
    rows: list

    def __str__(self):
        head = "row        " + "  ".join(f"rank{k:<3d}" for k in self.cutoffs)
        lines = [head]
        for row in self.rows:
            cells = "  ".join(f"{v * 100:6.2f}%" for v in row.median)
            lines.append(f"{row.label:<10s} {cells}")
        return "\n".join(lines)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("row," + ",".join(f"rank{k}" for k in self.cutoffs) + "\n")
            for row in self.rows:
                fh.write(row.label + "," + ",".join(f"{v:.10g}" for v in row.median) + "\n")

    def median_rank1(self, label):
        for row in self.rows:
            if row.label == label:
                return float(row.median[self.cutoffs.index(1)])
        raise KeyError(label)


def split_identities(n_identities, eval_count, seed):
    """Disjoint (train, eval) identity sets, deterministic per seed."""
    if not 0 < eval_count < n_identities:
        raise ValueError(f"eval_count must be in (0, {n_identities}), got {eval_count}")
    perm = np.random.default_rng([seed, 14]).permutation(n_identities)
    return np.sort(perm[eval_count:]), np.sort(perm[:eval_count])


@dataclass
class AblationSettings:
    dataset: object                  # person-domain Dataset
    generic: object = None           # generic-domain Dataset (knowledge_source)
    out_dir: Path | None = None
    seeds: tuple = (0, 1, 2)
    eval_identities: int = 16
    eval_splits: int = 5
    cutoffs: tuple = (1, 5, 10, 20)
    source_cfg: TrainConfig = None   # template for classify/attr sources
    reid_cfg: TrainConfig = None     # template for the reid target


def _variants(preset, settings):
    if preset == "transfer_stages":
        return [(f"TStage{k}", {"source": "classify", "keep_stages": k}) for k in (3, 4, 5)]
    if preset == "knowledge_source":
        rows = [
            ("NTransfer", {"source": None}),
            ("ITransfer", {"source": "generic"}),
            ("ATransfer", {"source": "attr"}),
            ("CTransfer", {"source": "classify"}),
        ]
        if settings.generic is None:
            raise ValueError("knowledge_source preset needs the generic-domain dataset")
        return rows
    if preset == "mask_type":
        return [(MASK_ROW_LABELS[s], {"source": "classify", "strategy": s})
                for s in ("global", "soft", "local", "fine")]
    raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")


def run_ablation(preset, settings):
    """Train/evaluate every variant of a preset over shared seeds.

    Source checkpoints are trained once per (kind, seed) and reused by all
    variants of that seed. Evaluation runs on identities held out from every
    training stage.
    """
    variants = _variants(preset, settings)
    out_dir = Path(settings.out_dir) if settings.out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    results = {label: [] for label, _ in variants}
    for seed in settings.seeds:
        train_ids, eval_ids = split_identities(
            settings.dataset.n_identities, settings.eval_identities, seed
        )
        train_ds = settings.dataset.subset(train_ids)
        eval_ds = settings.dataset.subset(eval_ids)
        source_paths = {}

        def source_checkpoint(kind):
            if kind in source_paths:
                return source_paths[kind]
            cfg = replace(settings.source_cfg,
                          task="classify" if kind in ("classify", "generic") else "attr",
                          seed=seed)
            ds = settings.generic if kind == "generic" else train_ds
            if kind in ("classify", "generic"):
                cfg = replace(cfg, n_classes=int(ds.person_ids.max()) + 1)
            run_dir = None if out_dir is None else out_dir / f"seed{seed}" / f"source_{kind}"
            res = train_task(cfg, ds, out_dir=run_dir)
            if res.weights_path is None:
                tmp = Path(tempfile.mkdtemp(prefix="reidlab_src_")) / "final.rtlw"
                save_weights(tmp, res.params)
                res.weights_path = tmp
            source_paths[kind] = res.weights_path
            return res.weights_path

        for label, opts in variants:
            cfg = replace(settings.reid_cfg, task="reid", seed=seed)
            if opts.get("strategy"):
                cfg = replace(cfg, gate=replace(cfg.gate, strategy=opts["strategy"]))
            if opts.get("keep_stages"):
                cfg = replace(cfg, keep_stages=opts["keep_stages"])
            source = opts.get("source")
            if source is not None:
                cfg = replace(cfg, source_weights=str(source_checkpoint(source)))
            else:
                cfg = replace(cfg, source_weights=None)
            run_dir = None if out_dir is None else out_dir / f"seed{seed}" / f"reid_{label}"
            res = train_task(cfg, train_ds, out_dir=run_dir)
            protocol = EvalProtocol(
                splits=settings.eval_splits,
                test_identities=settings.eval_identities,
                seed=0,
                cutoffs=settings.cutoffs,
            )
            cmc = evaluate(res.model, eval_ds, protocol)
            results[label].append(cmc.mean)
            log.info("seed %d %s: rank1 %.4f", seed, label, cmc.mean[0])

    rows = []
    for label, _ in variants:
        per_seed = np.stack(results[label])
        rows.append(AblationRow(label=label, per_seed=per_seed,
                                median=np.median(per_seed, axis=0)))
    table = AblationTable(preset=preset, cutoffs=tuple(settings.cutoffs), rows=rows)
    if out_dir is not None:
        table.to_csv(out_dir / f"{preset}.csv")
    return table
