"""Binary storage for named weight tensors.

File layout (all integers little-endian):

    magic           4 bytes  b"RTLW"
    format version  u16
    tensor count    u32
    per tensor:
        name length u16, then that many UTF-8 bytes
        dtype tag   u8   (0 = float64, 1 = float32)
        rank        u8
        dims        u32 per axis
        values      little-endian floats, C order

Files use the ``.rtlw`` extension. Reading is defensive: any structural
problem raises :class:`WeightStoreError` naming the byte offset where the
file stopped making sense.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"RTLW"
FORMAT_VERSION = 1
EXTENSION = ".rtlw"

_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAG_FOR_KIND = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_MAX_RANK = 8


class WeightStoreError(Exception):
    """Malformed weight file or a load that violates the active policy."""


def save_weights(path, tensors):
    """Write a name -> Tensor (or ndarray) mapping; insertion order is preserved."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", FORMAT_VERSION)
    blob += struct.pack("<I", len(tensors))
    for name, t in tensors.items():
        arr = np.ascontiguousarray(getattr(t, "data", t))
        if arr.dtype not in _TAG_FOR_KIND:
            raise WeightStoreError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        name_bytes = name.encode("utf-8")
        if not 0 < len(name_bytes) <= 0xFFFF:
            raise WeightStoreError(f"tensor name {name!r} has invalid encoded length")
        if arr.ndim > _MAX_RANK:
            raise WeightStoreError(f"tensor {name!r} has rank {arr.ndim} > {_MAX_RANK}")
        tag = _TAG_FOR_KIND[arr.dtype]
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<BB", tag, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.raw):
            raise WeightStoreError(
                f"truncated file: needed {n} bytes for {what} at byte offset {self.off}, "
                f"only {len(self.raw) - self.off} left"
            )
        chunk = self.raw[self.off:self.off + n]
        self.off += n
        return chunk

    def u8(self, what):
        return self.take(1, what)[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_weights(path):
    """Read a weight file back into an ordered name -> ndarray mapping."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise WeightStoreError(f"bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    version = r.u16("format version")
    if version != FORMAT_VERSION:
        raise WeightStoreError(f"unsupported format version {version} at byte offset 4")
    count = r.u32("tensor count")
    out = {}
    for i in range(count):
        entry_off = r.off
        name_len = r.u16("name length")
        if name_len == 0:
            raise WeightStoreError(f"empty tensor name at byte offset {entry_off}")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise WeightStoreError(f"undecodable tensor name at byte offset {entry_off}") from e
        if name in out:
            raise WeightStoreError(f"duplicate tensor name {name!r} at byte offset {entry_off}")
        tag_off = r.off
        tag = r.u8("dtype tag")
        if tag not in _DTYPE_TAGS:
            raise WeightStoreError(f"unknown dtype tag {tag} at byte offset {tag_off}")
        rank = r.u8("rank")
        if rank > _MAX_RANK:
            raise WeightStoreError(f"rank {rank} exceeds limit {_MAX_RANK} at byte offset {tag_off + 1}")
        dims = tuple(r.u32(f"dim {d} of {name!r}") for d in range(rank))
        if any(d == 0 for d in dims):
            raise WeightStoreError(f"zero-sized axis in {name!r} at byte offset {tag_off + 2}")
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        dtype = _DTYPE_TAGS[tag]
        data = r.take(n_values * dtype.itemsize, f"values of {name!r}")
        out[name] = np.frombuffer(data, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if r.off != len(raw):
        raise WeightStoreError(
            f"{len(raw) - r.off} unexpected trailing bytes at byte offset {r.off}"
        )
    return out


@dataclass
class LoadReport:
    """What a checkpoint application actually did."""

    policy: str
    copied: list = field(default_factory=list)
    skipped_file_only: list = field(default_factory=list)  # in file, no model match
    left_default: list = field(default_factory=list)       # in model, absent from file
    notes: list = field(default_factory=list)

    def summary(self):
        lines = [
            f"policy {self.policy}: copied {len(self.copied)} tensors",
        ]
        if self.skipped_file_only:
            lines.append("skipped (no model match): " + ", ".join(self.skipped_file_only))
        if self.left_default:
            lines.append("left at init: " + ", ".join(self.left_default))
        lines.extend(self.notes)
        return "\n".join(lines)


def apply_weights(params, loaded, policy="strict"):
    """Copy ``loaded`` arrays into model tensors in place, returning a LoadReport.

    strict: file and model must hold exactly the same names.
    prefix: the intersection is copied, everything else is reported.
    Either way a name match with a shape mismatch is an error, never a
    silent skip.
    """
    if policy not in ("strict", "prefix"):
        raise ValueError(f"unknown load policy {policy!r}")
    report = LoadReport(policy=policy)
    model_names = set(params)
    file_names = set(loaded)
    conflicts = [
        f"{name}: file {loaded[name].shape} vs model {params[name].data.shape}"
        for name in sorted(model_names & file_names)
        if loaded[name].shape != params[name].data.shape
    ]
    if conflicts:
        raise WeightStoreError("shape conflicts: " + "; ".join(conflicts))
    if policy == "strict":
        missing = sorted(model_names - file_names)
        extra = sorted(file_names - model_names)
        if missing or extra:
            parts = []
            if missing:
                parts.append("missing from file: " + ", ".join(missing))
            if extra:
                parts.append("not in model: " + ", ".join(extra))
            raise WeightStoreError("strict load failed; " + "; ".join(parts))
    for name in loaded:
        if name in params:
            params[name].data[...] = loaded[name]
            report.copied.append(name)
        else:
            report.skipped_file_only.append(name)
    report.left_default = sorted(model_names - file_names)
    stats = [n for n in report.copied if "running_" in n]
    if stats:
        report.notes.append(
            f"normalization running statistics transferred for {len(stats)} buffers"
        )
    return report
