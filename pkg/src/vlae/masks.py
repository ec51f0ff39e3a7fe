"""Connectivity machinery for autoregressive networks.

MADE layer masks, PixelCNN-style spatial convolution masks, exact
receptive-field geometry for stacks of masked convolutions, and the
Jacobian-based causality check used to certify decoders.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad

__all__ = [
    "MadeMaskSet",
    "ConvMask",
    "ReceptiveField",
    "CausalityReport",
    "build_made_masks",
    "build_conv_mask",
    "receptive_field_of",
    "offsets_of_chain",
    "assert_causality",
    "grayscale",
    "grayscale_np",
    "GRAY_WEIGHTS",
]


# ---------------------------------------------------------------------------
# MADE masks


@dataclass
class MadeMaskSet:
    """Per-layer binary masks enforcing strict autoregressive connectivity.

    ``masks[l]`` has shape (fan_in, fan_out) and multiplies the weight matrix
    of layer l elementwise. ``ordering[j]`` is the 1-based rank of input j:
    output unit i may only read inputs with rank < ordering[i].
    """

    masks: list
    ordering: np.ndarray
    degrees: list


def build_made_masks(layer_sizes: Sequence[int], ordering=None,
                     rng: np.random.Generator | None = None) -> MadeMaskSet:
    """Construct MADE masks for an MLP with the given layer widths.

    The first layer width is the autoregressive dimension D; the last width
    must be a multiple of D (one block per output head). Hidden degrees are
    assigned round-robin in [1, D-1] by default, or sampled when ``rng`` is
    given; round-robin keeps tests reproducible.
    """
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ValueError("need at least input and output layer")
    d = sizes[0]
    if d < 1:
        raise ValueError("autoregressive dimension must be >= 1")
    if any(s < 1 for s in sizes):
        raise ValueError("hidden layer of width 0")
    if sizes[-1] % d != 0:
        raise ValueError(f"output width {sizes[-1]} is not a multiple of D={d}")

    if ordering is None:
        ordering = np.arange(1, d + 1)
    else:
        ordering = np.asarray(ordering, dtype=int)
        if sorted(ordering.tolist()) != list(range(1, d + 1)):
            raise ValueError("ordering must be a permutation of 1..D")

    hi = max(1, d - 1)
    degrees = [ordering]
    for width in sizes[1:-1]:
        if rng is None:
            deg = 1 + np.arange(width) % hi
        else:
            deg = rng.integers(1, hi + 1, size=width)
        degrees.append(deg)
    degrees.append(np.tile(ordering, sizes[-1] // d))

    masks = []
    for l in range(len(sizes) - 1):
        din, dout = degrees[l], degrees[l + 1]
        if l == len(sizes) - 2:
            # output connections are strict: rank(out) > degree(in)
            m = (dout[None, :] > din[:, None]).astype(np.float64)
        else:
            m = (dout[None, :] >= din[:, None]).astype(np.float64)
        masks.append(m)
    return MadeMaskSet(masks=masks, ordering=ordering, degrees=degrees)


# ---------------------------------------------------------------------------
# convolution masks


@dataclass(frozen=True)
class ConvMask:
    """Spatial mask spec for one masked convolution layer.

    Kind "A" excludes the center tap (the layer may not read its own pixel);
    kind "B" includes it. ``full_channels`` lists input channel indices that
    carry no autoregressive content (e.g. a conditioning map derived from the
    latent code) and are therefore visible at every tap.
    """

    kind: str
    kh: int
    kw: int
    c_in: int = 1
    c_out: int = 1
    full_channels: tuple = ()

    def spatial(self) -> np.ndarray:
        return _spatial_mask(self.kind, self.kh, self.kw)

    def tensor(self) -> np.ndarray:
        sp = self.spatial()
        m = np.broadcast_to(sp, (self.c_out, self.c_in, self.kh, self.kw)).copy()
        for c in self.full_channels:
            m[:, c] = 1.0
        return m


def _spatial_mask(kind: str, kh: int, kw: int) -> np.ndarray:
    if kind not in ("A", "B"):
        raise ValueError(f"mask kind must be 'A' or 'B', got {kind!r}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("filter extents must be odd")
    ch, cw = kh // 2, kw // 2
    m = np.zeros((kh, kw))
    m[:ch, :] = 1.0
    m[ch, :cw] = 1.0
    if kind == "B":
        m[ch, cw] = 1.0
    return m


def build_conv_mask(kind: str, kh: int, kw: int, c_in: int = 1, c_out: int = 1,
                    full_channels: Iterable[int] = ()) -> np.ndarray:
    """Binary (c_out, c_in, kh, kw) mask for a raster-order masked convolution."""
    return ConvMask(kind, kh, kw, c_in, c_out, tuple(full_channels)).tensor()


# ---------------------------------------------------------------------------
# receptive fields


@dataclass(frozen=True)
class ReceptiveField:
    """Exact past-pixel dependency window of an autoregressive decoder.

    ``offsets`` is the set of (dr, dc) displacements from an output pixel to
    the input pixels it may read; all offsets precede (0, 0) in raster order.
    ``width``/``rows_above``/``left_extent`` describe the bounding AxB-plus-
    left-pixels window; ``rectangular`` is True when the offset set fills that
    window exactly.
    """

    offsets: frozenset

    def __post_init__(self):
        for dr, dc in self.offsets:
            if dr > 0 or (dr == 0 and dc >= 0):
                raise ValueError(f"offset {(dr, dc)} is not strictly in the raster past")

    @property
    def rows_above(self) -> int:
        return -min((dr for dr, _ in self.offsets), default=0)

    @property
    def width(self) -> int:
        above = [dc for dr, dc in self.offsets if dr < 0]
        if not above:
            return 0
        return max(above) - min(above) + 1

    @property
    def left_extent(self) -> int:
        row0 = [-dc for dr, dc in self.offsets if dr == 0]
        return max(row0, default=0)

    @property
    def rectangular(self) -> bool:
        above = {(dr, dc) for dr, dc in self.offsets if dr < 0}
        if not above:
            return self.offsets == {(0, -k) for k in range(1, self.left_extent + 1)}
        lo = min(dc for _, dc in above)
        hi = max(dc for _, dc in above)
        block = {(dr, dc) for dr in range(-self.rows_above, 0) for dc in range(lo, hi + 1)}
        row0 = {(0, -k) for k in range(1, self.left_extent + 1)}
        return self.offsets == block | row0

    def window_pixels(self, r: int, c: int, h: int, w: int) -> set:
        """Concrete in-bounds window for output pixel (r, c) of an h x w image."""
        out = set()
        for dr, dc in self.offsets:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w:
                out.add((rr, cc))
        return out

    def describe(self) -> str:
        shape = "exact" if self.rectangular else "staircase within"
        return (f"{self.width}x{self.rows_above} window "
                f"+ {self.left_extent} left pixels ({shape})")


def _layer_offsets(mask: ConvMask) -> set:
    ch, cw = mask.kh // 2, mask.kw // 2
    sp = mask.spatial()
    return {(i - ch, j - cw) for i in range(mask.kh) for j in range(mask.kw) if sp[i, j]}


def offsets_of_chain(stack: Sequence[ConvMask]) -> frozenset:
    """Influence offsets of a sequential chain of masked convolutions.

    The end-to-end support is the Minkowski sum of the per-layer offset sets.
    """
    acc = {(0, 0)}
    for layer in stack:
        step = _layer_offsets(layer)
        acc = {(a + c, b + d) for a, b in acc for c, d in step}
    return frozenset(acc)


def receptive_field_of(stack: Sequence[ConvMask]) -> ReceptiveField:
    """Exact dependency window of a sequential masked-conv stack.

    The first layer must be kind A (the decoder may never read the pixel it
    is predicting); later layers are kind B.
    """
    if not stack:
        raise ValueError("empty stack")
    if stack[0].kind != "A":
        raise ValueError("first layer must be kind A; kind B would leak the center pixel")
    return ReceptiveField(offsets_of_chain(stack))


# ---------------------------------------------------------------------------
# causality check


@dataclass
class CausalityReport:
    passed: bool
    field: ReceptiveField
    violations: list = field(default_factory=list)
    inside_nonzero: int = 0

    def describe(self) -> str:
        lines = [f"window: {self.field.describe()}",
                 f"status: {'pass' if self.passed else 'FAIL'}",
                 f"nonzero-inside-window entries: {self.inside_nonzero}"]
        for (out_px, in_px) in self.violations[:20]:
            lines.append(f"violation: output {out_px} reads input {in_px}")
        if len(self.violations) > 20:
            lines.append(f"... {len(self.violations) - 20} more violations")
        return "\n".join(lines)


def assert_causality(decoder, probe_shape: tuple,
                     rng: np.random.Generator | None = None) -> CausalityReport:
    """Verify that decoder outputs read only their predicted past window.

    ``decoder`` must expose ``logits(x, z)`` mapping an image tensor to
    per-pixel distribution parameters and ``predicted_field()`` returning its
    ReceptiveField. The Jacobian of every output pixel w.r.t. every input
    pixel is computed by reverse-mode sweeps; entries outside the predicted
    window must be exactly zero (masked paths multiply by literal zeros).
    """
    rng = rng or np.random.default_rng(0)
    c, h, w = probe_shape
    rf = decoder.predicted_field()
    x = rng.random(probe_shape)

    violations = []
    inside_nonzero = 0
    for r in range(h):
        for col in range(w):
            xt = ad.Parameter(x.copy())
            out = decoder.logits(xt, decoder.probe_latent(rng))
            # random channel weighting guards against cancellation across channels
            weights = rng.standard_normal(out.shape)
            loss = ad.reduce_sum(ad.mul(out, ad.Tensor(weights * _pixel_mask(out.shape, r, col))))
            ad.backward(loss)
            if xt.grad is None:  # output reads no pixels at all
                continue
            grad = np.abs(xt.grad).sum(axis=0)  # collapse input channels
            window = rf.window_pixels(r, col, h, w)
            for rr in range(h):
                for cc in range(w):
                    if grad[rr, cc] != 0.0:
                        if (rr, cc) in window:
                            inside_nonzero += 1
                        else:
                            violations.append(((r, col), (rr, cc)))
    return CausalityReport(passed=not violations, field=rf,
                           violations=violations, inside_nonzero=inside_nonzero)


def _pixel_mask(shape: tuple, r: int, c: int) -> np.ndarray:
    m = np.zeros(shape)
    m[..., r, c] = 1.0
    return m


def gray_projection_deviation(decoder, probe_shape: tuple,
                              rng: np.random.Generator | None = None) -> float:
    """Max deviation of input-channel gradients from the luminance direction.

    For a decoder that reads past pixels only through their grayscale
    projection, the gradient of any output w.r.t. the three channels of any
    input pixel must be parallel to the projection weights. Returns the
    largest relative off-axis component observed.
    """
    rng = rng or np.random.default_rng(0)
    c, h, w = probe_shape
    if c != 3:
        raise ValueError("projection check needs a 3-channel probe")
    x = rng.random(probe_shape)
    xt = ad.Parameter(x.copy())
    out = decoder.logits(xt, decoder.probe_latent(rng))
    loss = ad.reduce_sum(ad.mul(out, ad.Tensor(rng.standard_normal(out.shape))))
    ad.backward(loss)
    g = xt.grad  # (3, H, W)
    wvec = GRAY_WEIGHTS / np.linalg.norm(GRAY_WEIGHTS)
    worst = 0.0
    for r in range(h):
        for col in range(w):
            v = g[:, r, col]
            norm = np.linalg.norm(v)
            if norm == 0.0:
                continue
            off = v - np.dot(v, wvec) * wvec
            worst = max(worst, float(np.linalg.norm(off) / norm))
    return worst


# ---------------------------------------------------------------------------
# grayscale transform

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def grayscale(x: "ad.Tensor") -> "ad.Tensor":
    """Differentiable RGB -> single-channel luminance projection.

    Input is (..., 3, H, W) with values in [0, 1]; the weights sum to 1 so
    the output range stays in [0, 1]. Implemented as a masked 1x1 convolution
    so the gradient path reuses the conv machinery.
    """
    if x.shape[-3] != 3:
        raise ValueError(f"grayscale expects 3 channels, got {x.shape[-3]}")
    kernel = ad.Tensor(GRAY_WEIGHTS.reshape(1, 3, 1, 1))
    return ad.conv2d(x, kernel, np.ones((1, 3, 1, 1)), padding=0)


def grayscale_np(x: np.ndarray) -> np.ndarray:
    if x.shape[-3] != 3:
        raise ValueError(f"grayscale expects 3 channels, got {x.shape[-3]}")
    if x.ndim == 3:
        return np.einsum("c,chw->hw", GRAY_WEIGHTS, x)[None]
    return np.einsum("c,bchw->bhw", GRAY_WEIGHTS, x)[:, None]
