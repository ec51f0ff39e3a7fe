"""Dataset ingestion and synthesis.

IDX container loading, static/dynamic binarization, the two synthetic
families used for the information-placement experiments (short-range
textures vs long-range shapes), and seed-deterministic split management.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import load_tensor, save_tensor

__all__ = [
    "Dataset", "SynthSpec",
    "load_idx", "binarize", "synth", "split",
    "save_dataset", "load_dataset",
]

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Dataset:
    """Images in [0, 1] (or {0, 1} once binarized) with provenance."""

    images: np.ndarray  # (N, H, W) or (N, C, H, W)
    split: str = "train"
    binarization: str = "none"  # none | static | dynamic
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self):
        return self.images.shape[0]

    def batched(self, c_first=True) -> np.ndarray:
        """(N, C, H, W) view regardless of stored channel layout."""
        if self.images.ndim == 3:
            return self.images[:, None]
        return self.images


@dataclass
class SynthSpec:
    kind: str  # local-texture | long-range-shapes
    height: int = 12
    width: int = 12
    copy_prob: float = 0.9  # textures: P(pixel == left neighbor)
    n_shapes: int = 8  # shapes: template vocabulary size
    noise: float = 0.05  # shapes: independent flip probability
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("local-texture", "long-range-shapes"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")


def load_idx(path) -> np.ndarray:
    """Load a big-endian IDX file; images are scaled to [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise ValueError("truncated header")
    magic = struct.unpack_from(">I", blob, 0)[0]
    if magic == IDX_LABELS:
        ndim = 1
    elif magic == IDX_IMAGES:
        ndim = 3
    else:
        raise ValueError(f"magic mismatch: 0x{magic:08x} is not an IDX images/labels file")
    if len(blob) < 4 + 4 * ndim:
        raise ValueError("truncated header")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    count = int(np.prod(dims))
    if count > 1 << 34:
        raise ValueError("dimension overflow")
    payload = blob[4 + 4 * ndim:]
    if len(payload) != count:
        raise ValueError(f"truncated payload: expected {count} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    if magic == IDX_LABELS:
        return arr.astype(np.int64)
    return arr.astype(np.float64) / 255.0


def binarize(images: np.ndarray, mode: str, rng: np.random.Generator | None = None,
             provenance: str = "") -> Dataset:
    """Static thresholding or per-call Bernoulli draw on pixel intensities.

    Static mode thresholds at 0.5 unless the input is already binary; the
    canonical pre-binarized file, when available, should be loaded directly
    and passed through here unchanged. Dynamic mode draws each pixel
    Bernoulli(intensity); call once per epoch for fresh noise.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("intensities must lie in [0, 1]")
    if mode == "static":
        already = np.all((images == 0.0) | (images == 1.0))
        out = images if already else (images >= 0.5).astype(np.float64)
        note = provenance or ("pre-binarized" if already
                              else "threshold-0.5 (no canonical binarization file)")
        return Dataset(out, binarization="static", provenance=note)
    if mode == "dynamic":
        if rng is None:
            raise ValueError("dynamic binarization requires an rng")
        out = (rng.random(images.shape) < images).astype(np.float64)
        return Dataset(out, binarization="dynamic", provenance=provenance)
    raise ValueError(f"unknown binarization mode {mode!r}")


def synth(spec: SynthSpec, n: int) -> Dataset:
    """Generate a synthetic binary dataset.

    local-texture: raster-order Markov process whose conditioning window is
    the single left neighbor (rows are independent), so it fits inside any
    decoder window. long-range-shapes: one of ``n_shapes`` fixed global
    templates XOR sparse flip noise, so distant regions stay dependent.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    if spec.kind == "local-texture":
        x = np.zeros((n, h, w))
        x[:, :, 0] = rng.random((n, h)) < 0.5
        for c in range(1, w):
            keep = rng.random((n, h)) < spec.copy_prob
            x[:, :, c] = np.where(keep, x[:, :, c - 1], 1.0 - x[:, :, c - 1])
        return Dataset(x, provenance=f"synth local-texture p={spec.copy_prob} seed={spec.seed}",
                       binarization="static")

    templates = (rng.random((spec.n_shapes, h, w)) < 0.5).astype(np.float64)
    idx = rng.integers(0, spec.n_shapes, size=n)
    x = templates[idx]
    if spec.noise > 0:
        flips = rng.random((n, h, w)) < spec.noise
        x = np.where(flips, 1.0 - x, x)
    return Dataset(x, provenance=f"synth long-range-shapes S={spec.n_shapes} "
                                 f"noise={spec.noise} seed={spec.seed}",
                   binarization="static")


def split(dataset: Dataset, fractions, seed: int):
    """Disjoint, exhaustive, seed-deterministic train/valid/test split."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 or f > 1 for f in fractions):
        raise ValueError("need three fractions in [0, 1]")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = round(n * fractions[0])
    n_valid = round(n * fractions[1])
    parts = (perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:])
    names = ("train", "valid", "test")
    return tuple(
        Dataset(dataset.images[p], split=name, binarization=dataset.binarization,
                provenance=dataset.provenance)
        for p, name in zip(parts, names)
    )


def save_dataset(directory, dataset: Dataset) -> None:
    os.makedirs(directory, exist_ok=True)
    save_tensor(os.path.join(directory, "images.ndt"), dataset.images)
    manifest = {"split": dataset.split, "binarization": dataset.binarization,
                "provenance": dataset.provenance}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_dataset(directory) -> Dataset:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    images = load_tensor(os.path.join(directory, "images.ndt"))
    return Dataset(images, split=manifest["split"],
                   binarization=manifest["binarization"],
                   provenance=manifest["provenance"])
