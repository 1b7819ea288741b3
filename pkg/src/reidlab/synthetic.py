"""Procedural person-like image datasets.

Each identity is a small appearance latent (clothing colors, body aspect,
hair size, carried object, stripe texture). Images render the latent as
layered shapes, then apply one of two fixed camera views that differ in
illumination gain, color cast, horizontal jitter and noise, emulating the
cross-camera gap of real re-id data. Binary attributes are pure functions of
the latent, so attribute labels are exact by construction.

A second "generic" domain renders the same latents with a different shape
vocabulary (disc/diamond/bars instead of a person silhouette). It serves as
an out-of-domain classification source for transfer experiments.

Datasets are byte-deterministic functions of their DatasetSpec.
"""
from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

GENERATOR_VERSION = 1

DOMAINS = ("person", "generic")


@dataclass(frozen=True)
class DatasetSpec:
    identities: int = 64
    images_per_view: int = 4
    height: int = 128
    width: int = 64
    attributes: int = 16
    seed: int = 0
    domain: str = "person"

    def __post_init__(self):
        if min(self.identities, self.images_per_view, self.height, self.width) < 1:
            raise ValueError("all dataset counts must be >= 1")
        if not 1 <= self.attributes <= len(ATTRIBUTE_CATALOG):
            raise ValueError(
                f"attribute count must be in [1, {len(ATTRIBUTE_CATALOG)}], got {self.attributes}"
            )
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")


@dataclass(frozen=True)
class IdentityLatent:
    torso_color: tuple      # RGB in [0,1]
    legs_color: tuple
    aspect: float           # body width as a fraction of image width, [0.35, 0.65]
    hair_size: float        # hair extent as a fraction of image height
    carrying: bool
    carried_color: tuple
    stripes: bool


@dataclass(frozen=True)
class ViewModel:
    gain: float             # illumination multiplier, [0.6, 1.4]
    cast: tuple             # per-channel multiplier
    jitter: int             # max |horizontal shift| in pixels
    noise_sigma: float


def sample_latent(rng):
    return IdentityLatent(
        torso_color=tuple(rng.uniform(0.0, 1.0, size=3)),
        legs_color=tuple(rng.uniform(0.0, 1.0, size=3)),
        aspect=float(rng.uniform(0.35, 0.65)),
        hair_size=float(rng.uniform(0.06, 0.16)),
        carrying=bool(rng.uniform() < 0.5),
        carried_color=tuple(rng.uniform(0.0, 1.0, size=3)),
        stripes=bool(rng.uniform() < 0.35),
    )


def sample_latents(spec):
    """The identity latents of a dataset, regenerable from the spec alone."""
    rng = np.random.default_rng([spec.seed, 1])
    return [sample_latent(rng) for _ in range(spec.identities)]


def sample_views(spec):
    """Two camera views: a neutral one and one with a cold cast, lower gain
    and more noise. Parameters vary slightly per dataset but never per image."""
    rng = np.random.default_rng([spec.seed, 2])
    view_a = ViewModel(
        gain=float(np.clip(1.0 + rng.uniform(-0.05, 0.05), 0.6, 1.4)),
        cast=tuple(1.0 + rng.uniform(-0.05, 0.05, size=3)),
        jitter=1,
        noise_sigma=0.04,
    )
    base = np.array([0.80, 1.00, 1.20])
    view_b = ViewModel(
        gain=float(np.clip(0.78 + rng.uniform(-0.05, 0.05), 0.6, 1.4)),
        cast=tuple(base * (1.0 + rng.uniform(-0.05, 0.05, size=3))),
        jitter=2,
        noise_sigma=0.06,
    )
    return (view_a, view_b)


# ---------------------------------------------------------------------------
# attribute catalog

_SKIN = np.array([0.92, 0.78, 0.62])
_HAIR = np.array([0.15, 0.10, 0.08])


def _dominant(color, channel):
    c = np.asarray(color)
    others = [c[i] for i in range(3) if i != channel]
    return bool(c[channel] > others[0] + 0.1 and c[channel] > others[1] + 0.1)


ATTRIBUTE_CATALOG = (
    ("torso_red", lambda lt: _dominant(lt.torso_color, 0)),
    ("torso_green", lambda lt: _dominant(lt.torso_color, 1)),
    ("torso_blue", lambda lt: _dominant(lt.torso_color, 2)),
    ("legs_red", lambda lt: _dominant(lt.legs_color, 0)),
    ("legs_green", lambda lt: _dominant(lt.legs_color, 1)),
    ("legs_blue", lambda lt: _dominant(lt.legs_color, 2)),
    ("torso_bright", lambda lt: float(np.mean(lt.torso_color)) > 0.5),
    ("legs_bright", lambda lt: float(np.mean(lt.legs_color)) > 0.5),
    ("wide_body", lambda lt: lt.aspect > 0.5),
    ("long_hair", lambda lt: lt.hair_size > 0.11),
    ("carrying", lambda lt: lt.carrying),
    ("carried_bright", lambda lt: lt.carrying and float(np.mean(lt.carried_color)) > 0.5),
    ("striped_torso", lambda lt: lt.stripes),
    ("torso_saturated", lambda lt: float(np.ptp(lt.torso_color)) > 0.25),
    ("legs_saturated", lambda lt: float(np.ptp(lt.legs_color)) > 0.25),
    ("torso_darker_than_legs",
     lambda lt: float(np.mean(lt.torso_color)) < float(np.mean(lt.legs_color))),
)


def derive_attributes(latent, k):
    """First k catalog predicates evaluated on the latent, as a 0/1 vector."""
    if not 1 <= k <= len(ATTRIBUTE_CATALOG):
        raise ValueError(f"k must be in [1, {len(ATTRIBUTE_CATALOG)}], got {k}")
    return np.array([float(pred(latent)) for _, pred in ATTRIBUTE_CATALOG[:k]])


# ---------------------------------------------------------------------------
# rendering


def _person_layers(canvas, latent, cx, h, w):
    body_w = latent.aspect * w
    ys, xs = np.mgrid[0:h, 0:w]

    head_cy, head_ry = 0.12 * h, 0.065 * h
    head_rx = max(2.0, 0.22 * body_w)
    hair_ry = latent.hair_size * h

    hair = ((ys - head_cy) / hair_ry) ** 2 + ((xs - cx) / (head_rx * 1.25)) ** 2 <= 1.0
    canvas[hair] = _HAIR
    head = ((ys - head_cy) / head_ry) ** 2 + ((xs - cx) / head_rx) ** 2 <= 1.0
    canvas[head & (ys >= head_cy - 0.2 * head_ry)] = _SKIN

    torso = (ys >= 0.20 * h) & (ys < 0.52 * h) & (np.abs(xs - cx) <= body_w / 2)
    canvas[torso] = latent.torso_color
    if latent.stripes:
        stripe_period = max(4, int(0.06 * h))
        stripes = torso & ((ys // (stripe_period // 2)) % 2 == 0)
        canvas[stripes] = np.asarray(latent.torso_color) * 0.45

    leg_w = body_w * 0.32
    for side in (-1, 1):
        leg_cx = cx + side * body_w * 0.22
        leg = (ys >= 0.52 * h) & (ys < 0.94 * h) & (np.abs(xs - leg_cx) <= leg_w / 2)
        canvas[leg] = latent.legs_color

    if latent.carrying:
        blob_cx = cx + body_w * 0.72
        blob_cy = 0.44 * h
        blob_r = 0.065 * h
        blob = (ys - blob_cy) ** 2 + (xs - blob_cx) ** 2 <= blob_r ** 2
        canvas[blob] = latent.carried_color


def _generic_layers(canvas, latent, cx, h, w):
    # same latent, different shape vocabulary: disc, diamond, bars, ring
    body_w = latent.aspect * w
    ys, xs = np.mgrid[0:h, 0:w]

    disc_cy, disc_r = 0.30 * h, 0.30 * body_w + 0.08 * h
    disc = (ys - disc_cy) ** 2 + (xs - cx) ** 2 <= disc_r ** 2
    canvas[disc] = latent.torso_color
    if latent.stripes:
        bars = disc & ((xs // max(2, int(0.08 * w))) % 2 == 0)
        canvas[bars] = np.asarray(latent.torso_color) * 0.45

    diamond_cy = 0.70 * h
    diamond_r = 0.26 * body_w + 0.10 * h
    diamond = (np.abs(ys - diamond_cy) + np.abs(xs - cx)) <= diamond_r
    canvas[diamond] = latent.legs_color

    cap_ry = latent.hair_size * h
    cap = ((ys - 0.08 * h) / cap_ry) ** 2 + ((xs - cx) / (0.30 * body_w + 1e-9)) ** 2 <= 1.0
    canvas[cap] = _HAIR

    if latent.carrying:
        ring_cy, ring_cx, ring_r = 0.50 * h, cx - body_w * 0.70, 0.075 * h
        d2 = (ys - ring_cy) ** 2 + (xs - ring_cx) ** 2
        ring = (d2 <= ring_r ** 2) & (d2 >= (0.5 * ring_r) ** 2)
        canvas[ring] = latent.carried_color


def render_person(latent, view, rng, h, w, domain="person"):
    """One image of a latent under a view, as float64 (3, h, w) in [0, 1]."""
    canvas = np.full((h, w, 3), 0.85)
    jitter = int(rng.integers(-view.jitter, view.jitter + 1)) if view.jitter else 0
    cx = w / 2 + jitter
    if domain == "person":
        _person_layers(canvas, latent, cx, h, w)
    else:
        _generic_layers(canvas, latent, cx, h, w)
    img = canvas.transpose(2, 0, 1)
    img = img * view.gain * np.asarray(view.cast)[:, None, None]
    img = img + rng.normal(0.0, view.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# on-disk format


def _image_name(person, view, idx):
    return f"{person:04d}_{view}_{idx:02d}.png"


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_dataset(spec, out_path, force=False):
    """Render the dataset to disk and return the manifest dictionary."""
    out = Path(out_path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use force to overwrite)")
        shutil.rmtree(out)
    (out / "images").mkdir(parents=True, exist_ok=True)

    latents = sample_latents(spec)
    views = sample_views(spec)
    label_rows = []
    checksums = {}
    for person, latent in enumerate(latents):
        for view_idx, view in enumerate(views):
            for idx in range(spec.images_per_view):
                rng = np.random.default_rng([spec.seed, 3, person, view_idx, idx])
                img = render_person(latent, view, rng, spec.height, spec.width,
                                    domain=spec.domain)
                name = _image_name(person, view_idx, idx)
                arr = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
                Image.fromarray(arr, mode="RGB").save(out / "images" / name)
                label_rows.append((name, person, view_idx))
                checksums[f"images/{name}"] = _sha256(out / "images" / name)

    with open(out / "labels.csv", "w") as fh:
        fh.write("image_file,person_id,camera_id\n")
        for name, person, view_idx in label_rows:
            fh.write(f"{name},{person},{view_idx}\n")
    checksums["labels.csv"] = _sha256(out / "labels.csv")

    with open(out / "attributes.csv", "w") as fh:
        header = ",".join(["person_id"] + [f"a_{k}" for k in range(spec.attributes)])
        fh.write(header + "\n")
        for person, latent in enumerate(latents):
            bits = derive_attributes(latent, spec.attributes).astype(int)
            fh.write(",".join([str(person)] + [str(b) for b in bits]) + "\n")
    checksums["attributes.csv"] = _sha256(out / "attributes.csv")

    manifest = {
        "spec": asdict(spec),
        "generator_version": GENERATOR_VERSION,
        "image_count": len(label_rows),
        "files": checksums,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


class DatasetError(Exception):
    pass


@dataclass
class Dataset:
    """In-memory dataset: images as float64 (n, 3, h, w) in [0, 1]."""

    images: np.ndarray
    person_ids: np.ndarray   # (n,)
    camera_ids: np.ndarray   # (n,)
    attributes: np.ndarray   # (identities, K), row index == person id
    spec: DatasetSpec

    @property
    def n_images(self):
        return self.images.shape[0]

    @property
    def n_identities(self):
        return int(self.person_ids.max()) + 1

    def indices_of(self, person, camera=None):
        mask = self.person_ids == person
        if camera is not None:
            mask &= self.camera_ids == camera
        return np.flatnonzero(mask)

    def subset(self, identities):
        """A view restricted to the given identities; ids are kept as-is."""
        keep = np.isin(self.person_ids, list(identities))
        return Dataset(
            images=self.images[keep],
            person_ids=self.person_ids[keep],
            camera_ids=self.camera_ids[keep],
            attributes=self.attributes,
            spec=self.spec,
        )


def load_dataset(path):
    """Read a generated dataset back, verifying every manifest checksum."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    spec = DatasetSpec(**manifest["spec"])

    for rel, want in manifest["files"].items():
        target = root / rel
        if not target.exists():
            raise DatasetError(f"missing file {rel}")
        got = _sha256(target)
        if got != want:
            raise DatasetError(f"checksum mismatch for {rel}")

    label_lines = (root / "labels.csv").read_text().strip().split("\n")
    if label_lines[0] != "image_file,person_id,camera_id":
        raise DatasetError("labels.csv has an unexpected header")
    names, person_ids, camera_ids = [], [], []
    for line in label_lines[1:]:
        name, person, camera = line.split(",")
        names.append(name)
        person_ids.append(int(person))
        camera_ids.append(int(camera))

    attr_lines = (root / "attributes.csv").read_text().strip().split("\n")
    attr_rows = {}
    for line in attr_lines[1:]:
        parts = line.split(",")
        attr_rows[int(parts[0])] = np.array([float(v) for v in parts[1:]])
    for person in person_ids:
        if person not in attr_rows:
            raise DatasetError(f"person {person} from labels.csv missing in attributes.csv")

    images = np.empty((len(names), 3, spec.height, spec.width))
    for i, name in enumerate(names):
        with Image.open(root / "images" / name) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        if arr.shape != (spec.height, spec.width, 3):
            raise DatasetError(f"{name} has shape {arr.shape[:2]}, spec says "
                               f"{(spec.height, spec.width)}")
        images[i] = arr.transpose(2, 0, 1)

    attributes = np.stack([attr_rows[p] for p in sorted(attr_rows)])
    return Dataset(
        images=images,
        person_ids=np.asarray(person_ids),
        camera_ids=np.asarray(camera_ids),
        attributes=attributes,
        spec=spec,
    )
