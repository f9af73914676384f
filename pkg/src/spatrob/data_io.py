"""Dataset ingestion (IDX format), normalization, and model checkpoints."""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .network import LayerSpec, Network

__all__ = [
    "Dataset",
    "IdxFormatError",
    "BadMagicError",
    "TruncatedPayloadError",
    "CountMismatchError",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "WeightCountError",
    "load_idx",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_manifest",
    "subset",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
CHECKPOINT_MAGIC = b"SPATROB1"
CHECKPOINT_VERSION = 1


class IdxFormatError(ValueError):
    """Base error for malformed IDX inputs."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class CheckpointError(ValueError):
    """Base error for malformed checkpoints."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class WeightCountError(CheckpointError):
    pass


@dataclass
class Dataset:
    """Images (n, c, h, w) in [0, 1] with integer labels in [0, 10)."""

    images: np.ndarray
    labels: np.ndarray
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if len(self.labels) and not ((self.labels >= 0) & (self.labels < 10)).all():
            raise ValueError("labels must be in [0, 10)")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.split)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(f) as gz:
                return gz.read()
        return f.read()


def load_idx(images_path, labels_path) -> Dataset:
    """Parse a big-endian IDX image/label file pair into a Dataset.

    Pixels are unsigned bytes divided by 255. Gzip-compressed files are
    detected by their 2-byte prefix and decompressed transparently.
    """
    raw_img = _read_bytes(images_path)
    if len(raw_img) < 16:
        raise TruncatedPayloadError(f"{images_path}: header shorter than 16 bytes")
    magic, count, rows, cols = struct.unpack(">IIII", raw_img[:16])
    if magic != IMAGES_MAGIC:
        raise BadMagicError(
            f"{images_path}: expected images magic {IMAGES_MAGIC}, got {magic}"
        )
    expected = 16 + count * rows * cols
    if len(raw_img) < expected:
        raise TruncatedPayloadError(
            f"{images_path}: need {expected} bytes for {count} images, have {len(raw_img)}"
        )
    if len(raw_img) > expected:
        raise IdxFormatError(
            f"{images_path}: {len(raw_img) - expected} trailing bytes after payload"
        )
    pixels = np.frombuffer(raw_img, dtype=np.uint8, offset=16)
    images = pixels.reshape(count, 1, rows, cols).astype(np.float32) / 255.0

    raw_lab = _read_bytes(labels_path)
    if len(raw_lab) < 8:
        raise TruncatedPayloadError(f"{labels_path}: header shorter than 8 bytes")
    magic_l, count_l = struct.unpack(">II", raw_lab[:8])
    if magic_l != LABELS_MAGIC:
        raise BadMagicError(
            f"{labels_path}: expected labels magic {LABELS_MAGIC}, got {magic_l}"
        )
    if len(raw_lab) < 8 + count_l:
        raise TruncatedPayloadError(
            f"{labels_path}: need {8 + count_l} bytes for {count_l} labels, have {len(raw_lab)}"
        )
    if len(raw_lab) > 8 + count_l:
        raise IdxFormatError(
            f"{labels_path}: {len(raw_lab) - 8 - count_l} trailing bytes after payload"
        )
    if count != count_l:
        raise CountMismatchError(
            f"{count} images in {images_path} but {count_l} labels in {labels_path}"
        )
    labels = np.frombuffer(raw_lab, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images, labels, split=os.path.basename(str(images_path)))


def _weight_order(layers) -> list[str]:
    names = []
    conv_idx = 0
    for spec in layers:
        if spec.kind == "conv":
            names.append(f"conv{conv_idx}.weight")
            names.append(f"conv{conv_idx}.bias")
            conv_idx += 1
    return names


def save_checkpoint(net: Network, provenance: dict, path) -> None:
    """Write a versioned checkpoint: magic, manifest length, JSON manifest,
    then raw little-endian float32 weights in manifest order. Atomic."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "num_classes": net.num_classes,
        "layers": [spec.to_json() for spec in net.layers],
        "weight_order": _weight_order(net.layers),
        "provenance": provenance or {},
    }
    blob = bytearray()
    for arr in net.weight_arrays():
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        f.write(bytes(blob))
    os.replace(tmp, path)


def read_checkpoint_manifest(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"{path}: bad checkpoint magic {magic!r}")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint version {version!r}"
        )
    return manifest


def load_checkpoint(path) -> Network:
    """Restore a Network; forward outputs are bit-identical to the saved net."""
    manifest = read_checkpoint_manifest(path)
    layers = tuple(LayerSpec.from_json(d) for d in manifest["layers"])
    with open(path, "rb") as f:
        f.seek(8)
        (mlen,) = struct.unpack("<I", f.read(4))
        f.seek(8 + 4 + mlen)
        blob = f.read()
    shapes = []
    for spec in layers:
        if spec.kind == "conv":
            shapes.append((spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
            shapes.append((spec.out_channels,))
    total = sum(int(np.prod(s)) for s in shapes)
    if len(blob) != 4 * total:
        raise WeightCountError(
            f"{path}: weight blob holds {len(blob) // 4} floats, architecture needs {total}"
        )
    flat = np.frombuffer(blob, dtype="<f4")
    weights, pos = [], 0
    for i in range(0, len(shapes), 2):
        w_shape, b_shape = shapes[i], shapes[i + 1]
        n_w, n_b = int(np.prod(w_shape)), int(np.prod(b_shape))
        w = flat[pos : pos + n_w].reshape(w_shape).astype(np.float32)
        pos += n_w
        b = flat[pos : pos + n_b].reshape(b_shape).astype(np.float32)
        pos += n_b
        weights.append((w, b))
    return Network(layers, weights, manifest["num_classes"], np.float32)


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Deterministic class-stratified subsample without replacement.

    Per-class counts follow proportional allocation with largest-remainder
    rounding, so the subset's label balance tracks the source within +-2.
    """
    if n > len(dataset):
        raise ValueError(f"cannot take {n} examples from a dataset of {len(dataset)}")
    rng = np.random.default_rng(seed)
    counts = np.bincount(dataset.labels, minlength=10)
    exact = n * counts / len(dataset)
    alloc = np.floor(exact).astype(int)
    remainder_order = np.argsort(-(exact - alloc), kind="stable")
    for cls in remainder_order[: n - alloc.sum()]:
        alloc[cls] += 1
    picks = []
    for cls in range(10):
        idx = np.flatnonzero(dataset.labels == cls)
        if alloc[cls]:
            picks.append(rng.choice(idx, size=alloc[cls], replace=False))
    chosen = np.concatenate(picks) if picks else np.array([], dtype=int)
    rng.shuffle(chosen)
    return dataset.take(chosen)
