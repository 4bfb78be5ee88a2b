"""Preprocessing, dataset manifests, batching, and the on-disk tensor format.

The preprocessing chain mirrors the CT convention: clip intensities to
[-1024, 1024] HU, clip expansion maps to [mu - 3*sigma, mu + 3*sigma] with
statistics taken from the training split only, rescale both to [-1, 1], and
center crop / symmetric pad to a fixed slice size. Files use a tiny binary
format ("JXP1") that round-trips float32 bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

HU_MIN = -1024.0
HU_MAX = 1024.0
BACKGROUND_FILL = -1.0  # scaled-unit value for padding / outside-lung pixels

_MAGIC = b"JXP1"
_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, ndim, reserved


class TensorFormatError(IOError):
    """Base class for tensor-file format problems."""


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedFileError(TensorFormatError):
    pass


class ManifestError(ValueError):
    """A dataset manifest violates its invariants."""


class SplitLeakError(ValueError):
    """Clip statistics sourced from a non-training split were about to be used."""


# -- tensor files -------------------------------------------------------------

def save_tensor(path, tensor):
    """Write a float32 array (or Tensor) in the JXP1 format, little-endian."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, np.float32)
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _FORMAT_VERSION, arr.ndim, 0))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_tensor(path):
    """Read a JXP1 file back into a Tensor; bit-exact for finite float32."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise TruncatedFileError(f"{path}: file shorter than header")
        magic, version, ndim, _ = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        if version != _FORMAT_VERSION:
            raise VersionMismatchError(
                f"{path}: format version {version}, expected {_FORMAT_VERSION}")
        dims_raw = fh.read(4 * ndim)
        if len(dims_raw) < 4 * ndim:
            raise TruncatedFileError(f"{path}: truncated extents")
        shape = struct.unpack(f"<{ndim}I", dims_raw)
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = fh.read(4 * count)
        if len(payload) < 4 * count:
            raise TruncatedFileError(
                f"{path}: payload {len(payload)} bytes, expected {4 * count}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return Tensor(np.ascontiguousarray(arr))


# -- preprocessing operations --------------------------------------------------

def clip_hu(image):
    """Clamp CT-like intensities to [-1024, 1024] HU. Idempotent."""
    return np.clip(np.asarray(image, np.float32), HU_MIN, HU_MAX)


@dataclass
class ClipStats:
    """Training-split statistics driving the expansion-map clip window."""

    mu: float
    sigma: float
    n_train: int
    source_split: str = "train"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("ClipStats sigma must be >= 0")

    @property
    def lo(self):
        return self.mu - 3.0 * self.sigma

    @property
    def hi(self):
        return self.mu + 3.0 * self.sigma

    def to_json(self):
        return {"mu": self.mu, "sigma": self.sigma, "n_train": self.n_train,
                "source_split": self.source_split}

    @classmethod
    def from_json(cls, obj):
        return cls(mu=float(obj["mu"]), sigma=float(obj["sigma"]),
                   n_train=int(obj["n_train"]),
                   source_split=str(obj.get("source_split", "train")))


def compute_clip_stats(jmaps, source_split="train"):
    """mu = average of per-map means, sigma = average of per-map population SDs."""
    jmaps = list(jmaps)
    if not jmaps:
        raise ValueError("compute_clip_stats: empty training set")
    means = [float(np.mean(j)) for j in jmaps]
    sds = [float(np.std(j)) for j in jmaps]
    return ClipStats(mu=float(np.mean(means)), sigma=float(np.mean(sds)),
                     n_train=len(jmaps), source_split=source_split)


def clip_j(jmap, stats):
    """Clamp an expansion map to the mu +/- 3 sigma window of the training split."""
    if stats.source_split != "train":
        raise SplitLeakError(
            f"clip_j: stats sourced from split {stats.source_split!r}, expected 'train'")
    return np.clip(np.asarray(jmap, np.float32), np.float32(stats.lo), np.float32(stats.hi))


def rescale_to_unit(a, lo, hi):
    """Affine map sending lo -> -1 and hi -> 1."""
    if hi <= lo:
        raise ValueError(f"rescale_to_unit: hi ({hi}) must exceed lo ({lo})")
    a = np.asarray(a, np.float32)
    scale = np.float32(2.0 / (hi - lo))
    return (a - np.float32(lo)) * scale - np.float32(1.0)


def unrescale(a, lo, hi):
    """Inverse of rescale_to_unit; recovers originals within ~1e-6."""
    if hi <= lo:
        raise ValueError(f"unrescale: hi ({hi}) must exceed lo ({lo})")
    a = np.asarray(a, np.float32)
    return (a + np.float32(1.0)) * np.float32((hi - lo) / 2.0) + np.float32(lo)


def crop_or_pad(a, target_hw, fill=BACKGROUND_FILL):
    """Center crop when larger, symmetric constant-pad when smaller.

    Odd differences put the extra row/column on the high side.
    """
    th, tw = (int(v) for v in target_hw)
    if th < 1 or tw < 1:
        raise ValueError("crop_or_pad: target extents must be >= 1")
    a = np.asarray(a, np.float32)
    h, w = a.shape[-2:]
    # rows
    if h > th:
        lo = (h - th) // 2
        a = a[..., lo:lo + th, :]
    elif h < th:
        lo = (th - h) // 2
        a = np.pad(a, [(0, 0)] * (a.ndim - 2) + [(lo, th - h - lo), (0, 0)],
                   constant_values=np.float32(fill))
    # cols
    if w > tw:
        lo = (w - tw) // 2
        a = a[..., :, lo:lo + tw]
    elif w < tw:
        lo = (tw - w) // 2
        a = np.pad(a, [(0, 0)] * (a.ndim - 2) + [(0, 0), (lo, tw - w - lo)],
                   constant_values=np.float32(fill))
    return np.ascontiguousarray(a)


# -- manifests -----------------------------------------------------------------

MANIFEST_VERSION = 1


@dataclass
class ManifestEntry:
    id: str
    x_path: str
    y_path: str
    severity_tag: str
    split: str

    def to_json(self):
        return {"id": self.id, "x_path": self.x_path, "y_path": self.y_path,
                "severity_tag": self.severity_tag, "split": self.split}

    @classmethod
    def from_json(cls, obj):
        return cls(id=str(obj["id"]), x_path=str(obj["x_path"]),
                   y_path=str(obj["y_path"]), severity_tag=str(obj["severity_tag"]),
                   split=str(obj["split"]))


@dataclass
class SamplePair:
    """One preprocessed (expiration slice, expansion map) pair in [-1, 1]."""

    x: Tensor
    y: Tensor
    id: str
    severity_tag: str = ""


@dataclass
class DatasetManifest:
    slice_size: tuple
    entries: list = field(default_factory=list)
    clip_stats: ClipStats | None = None
    preprocessed: bool = False
    version: int = MANIFEST_VERSION
    meta: dict = field(default_factory=dict)
    root: str = "."  # directory paths are relative to; set on load/save

    def validate(self, check_files=True):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate ids in manifest: {dup[:5]}")
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise ManifestError(f"entry {e.id}: unknown split {e.split!r}")
            if check_files:
                for p in (e.x_path, e.y_path):
                    full = os.path.join(self.root, p)
                    if not os.path.exists(full):
                        raise ManifestError(f"entry {e.id}: missing file {full}")

    def split_entries(self, split):
        return [e for e in self.entries if e.split == split]

    def to_json(self):
        return {
            "version": self.version,
            "slice_size": list(self.slice_size),
            "preprocessed": self.preprocessed,
            "clip_stats": self.clip_stats.to_json() if self.clip_stats else None,
            "meta": self.meta,
            "entries": [e.to_json() for e in self.entries],
        }


def save_manifest(manifest, path):
    manifest.root = os.path.dirname(os.path.abspath(path)) or "."
    manifest.validate(check_files=False)
    with open(path, "w") as fh:
        json.dump(manifest.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path, check_files=True):
    with open(path) as fh:
        obj = json.load(fh)
    if int(obj.get("version", -1)) != MANIFEST_VERSION:
        raise ManifestError(f"{path}: manifest version {obj.get('version')}, "
                            f"expected {MANIFEST_VERSION}")
    m = DatasetManifest(
        slice_size=tuple(int(v) for v in obj["slice_size"]),
        entries=[ManifestEntry.from_json(e) for e in obj["entries"]],
        clip_stats=ClipStats.from_json(obj["clip_stats"]) if obj.get("clip_stats") else None,
        preprocessed=bool(obj.get("preprocessed", False)),
        meta=dict(obj.get("meta", {})),
        root=os.path.dirname(os.path.abspath(path)) or ".",
    )
    m.validate(check_files=check_files)
    return m


def load_pair(manifest, entry):
    x = load_tensor(os.path.join(manifest.root, entry.x_path))
    y = load_tensor(os.path.join(manifest.root, entry.y_path))
    return SamplePair(x=x, y=y, id=entry.id, severity_tag=entry.severity_tag)


# -- preprocessing pipeline -----------------------------------------------------

def preprocess_arrays(x_hu, y_j, stats, slice_size):
    """Raw (HU image, J map) -> scaled, fixed-size pair. Order: clip, rescale, crop/pad."""
    x = clip_hu(x_hu)
    x = rescale_to_unit(x, HU_MIN, HU_MAX)
    x = crop_or_pad(x, slice_size)
    y = clip_j(y_j, stats)
    y = rescale_to_unit(y, stats.lo, stats.hi)
    y = crop_or_pad(y, slice_size)
    return x, y


def preprocess_manifest(manifest, out_dir, slice_size=None):
    """Apply the full pipeline to every entry, writing a processed dataset.

    Clip statistics come from the train split only. Applying this to an
    already-processed manifest returns it unchanged, which is the sense in
    which the pipeline is idempotent (re-clipping data that already lives in
    [-1, 1] would not be a no-op).
    """
    if manifest.preprocessed:
        return manifest
    slice_size = tuple(slice_size or manifest.slice_size)
    train = manifest.split_entries("train")
    if not train:
        raise ManifestError("preprocess: training split is empty")
    jmaps = [load_tensor(os.path.join(manifest.root, e.y_path)).data for e in train]
    stats = compute_clip_stats(jmaps, source_split="train")

    os.makedirs(out_dir, exist_ok=True)
    new_entries = []
    for e in manifest.entries:
        pair = load_pair(manifest, e)
        x, y = preprocess_arrays(pair.x.data, pair.y.data, stats, slice_size)
        xp = f"{e.id}_x.jxp"
        yp = f"{e.id}_y.jxp"
        save_tensor(os.path.join(out_dir, xp), x)
        save_tensor(os.path.join(out_dir, yp), y)
        new_entries.append(ManifestEntry(id=e.id, x_path=xp, y_path=yp,
                                         severity_tag=e.severity_tag, split=e.split))
    out = DatasetManifest(slice_size=slice_size, entries=new_entries,
                          clip_stats=stats, preprocessed=True,
                          meta=dict(manifest.meta), root=out_dir)
    return out


# -- batching -------------------------------------------------------------------

def batch_iterator(manifest, split, batch_size, seed, epoch=0):
    """One shuffled epoch of (x, y, ids) batches; the short tail batch is dropped.

    x and y are float32 arrays shaped (B, 1, H, W). Shuffle order is a pure
    function of (seed, epoch) so runs replay bit-exactly; requiring an even
    batch size keeps the top-k schedule's k = B/2 integral.
    """
    if batch_size < 2 or batch_size % 2 != 0:
        raise ValueError("batch_iterator: batch_size must be even and >= 2")
    entries = manifest.split_entries(split)
    if not entries:
        raise ManifestError(f"batch_iterator: split {split!r} is empty")
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(len(entries))
    for start in range(0, len(entries) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        xs, ys, ids = [], [], []
        for i in idx:
            pair = load_pair(manifest, entries[int(i)])
            xs.append(pair.x.data[None, :, :])
            ys.append(pair.y.data[None, :, :])
            ids.append(pair.id)
        yield np.stack(xs), np.stack(ys), ids
