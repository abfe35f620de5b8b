"""Distortion-aware operators.

Patch embedding and token mixing whose sampling taps are displaced by
learned, clamped offsets. An offset predictor (a small convolution over
the input) emits continuous per-location displacements; taps are gathered
with bilinear interpolation (zero outside the map) so gradients reach the
predictor through the sampling coordinates. Offsets are clamped
componentwise to +-H/r rows and +-W/r columns.

With the predictor zeroed, `DeformablePatchEmbed` collapses to a standard
overlapping patch embedding and `DeformableTokenMixer` to a plain
channel-MLP; the tests pin both equivalences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module, param, zeros_param


@dataclass
class OffsetField:
    """Continuous (dy, dx) displacements with their clamp bounds.

    `displacements[..., 0]` is the row offset, `[..., 1]` the column
    offset. `bounds` is (row_bound, col_bound); every stored component
    lies inside them. `r` is the restriction factor (None: unrestricted).
    """

    displacements: np.ndarray
    bounds: tuple
    r: int | None = None


def fixed_offsets(s: int) -> OffsetField:
    """The s x s lattice offsets of a standard patch, center-relative."""
    if s < 1:
        raise ValueError(f"patch size must be >= 1, got {s}")
    axis = np.arange(s) - s // 2
    dy, dx = np.meshgrid(axis, axis, indexing="ij")
    disp = np.stack([dy.ravel(), dx.ravel()], axis=-1).astype(np.float64)
    return OffsetField(displacements=disp, bounds=(float(s // 2), float(s // 2)), r=None)


def offset_bounds(h, w, r):
    """Clamp bounds (+-H/r, +-W/r); r=None means unrestricted."""
    if r is None:
        return (np.inf, np.inf)
    if r <= 0:
        raise ValueError(f"restriction factor must be positive, got {r}")
    return (h / r, w / r)


def clamp_offsets(raw, h, w, r) -> OffsetField:
    """Componentwise clamp of a (..., 2) displacement field to +-H/r, +-W/r."""
    by, bx = offset_bounds(h, w, r)
    raw = np.asarray(raw, dtype=np.float64)
    disp = np.empty_like(raw)
    disp[..., 0] = np.clip(raw[..., 0], -by, by)
    disp[..., 1] = np.clip(raw[..., 1], -bx, bx)
    return OffsetField(displacements=disp, bounds=(by, bx), r=r)


def _clip_offsets_node(offsets, h, w, r):
    """Graph-side clamp; last axis is (dy, dx)."""
    by, bx = offset_bounds(h, w, r)
    if not np.isfinite([by, bx]).all():
        return offsets
    lo = np.array([-by, -bx])
    hi = np.array([by, bx])
    return ad.clip(offsets, lo, hi)


class DeformablePatchEmbed(Module):
    """Patch embedding with learned per-tap sampling offsets.

    A convolution over the input predicts 2*s^2 offset channels per output
    location (one (dy, dx) pair per kernel tap); `offset_mode="shared"`
    predicts a single pair applied to every tap. Offsets are clamped, the
    s^2 taps are gathered bilinearly at lattice+offset positions, and a
    linear projection maps the gathered patch to `out_channels`.

    The offset predictor initializes to zero, so training starts from the
    standard embedding. `deformable=False` omits the predictor entirely.
    """

    def __init__(self, rng, in_channels, out_channels, patch_size, stride,
                 padding=None, r=4, deformable=True, offset_mode="per_tap"):
        if patch_size < stride:
            raise ValueError(f"patch size {patch_size} must be >= stride {stride}")
        if offset_mode not in ("per_tap", "shared"):
            raise ValueError(f"unknown offset_mode '{offset_mode}'")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.patch_size = patch_size
        self.stride = stride
        self.padding = patch_size // 2 if padding is None else padding
        self.r = r
        self.deformable = deformable
        self.offset_mode = offset_mode
        s = patch_size
        self.weight = param(rng, (out_channels, in_channels, s, s))
        self.bias = zeros_param((out_channels,))
        if deformable:
            n_off = 2 * s * s if offset_mode == "per_tap" else 2
            self.offset_weight = zeros_param((n_off, in_channels, s, s))
            self.offset_bias = zeros_param((n_off,))
        self.last_offsets = None  # populated only when forward(record=True)

    def out_size(self, h, w):
        s, st, p = self.patch_size, self.stride, self.padding
        return ((h + 2 * p - s) // st + 1, (w + 2 * p - s) // st + 1)

    def _base_grid(self, h, w):
        s, st, p = self.patch_size, self.stride, self.padding
        ho, wo = self.out_size(h, w)
        oy = np.arange(ho) * st - p
        ox = np.arange(wo) * st - p
        ky, kx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        base = np.zeros((s * s, ho, wo, 2), dtype=np.float64)
        base[:, :, :, 0] = ky.ravel()[:, None, None] + oy[None, :, None]
        base[:, :, :, 1] = kx.ravel()[:, None, None] + ox[None, None, :]
        return base

    def __call__(self, x, record=False):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ad.ShapeError(f"patch embed expects {self.in_channels} channels, got input {x.shape}")
        s = self.patch_size
        ho, wo = self.out_size(h, w)
        if ho < 1 or wo < 1:
            raise ad.ShapeError(f"input {x.shape} too small for patch size {s} stride {self.stride}")
        base = self._base_grid(h, w)  # (s^2, ho, wo, 2)

        if self.deformable:
            raw = ad.conv2d(x, self.offset_weight, self.offset_bias,
                            stride=self.stride, padding=self.padding)
            if not np.isfinite(raw.data).all():
                raise ad.NumericError("non-finite offsets from patch-embed offset predictor")
            taps = s * s if self.offset_mode == "per_tap" else 1
            off = raw.reshape((n, 2, taps, ho, wo))
            off = ad.transpose(off, (0, 2, 3, 4, 1))  # (n, taps, ho, wo, 2)
            off = _clip_offsets_node(off, h, w, self.r)
            if record:
                rec = off.data if self.offset_mode == "per_tap" else \
                    np.broadcast_to(off.data, (n, s * s, ho, wo, 2))
                self.last_offsets = rec + 0.0
            grid = off + base  # broadcasts shared mode over taps
        else:
            if record:
                self.last_offsets = np.zeros((n, s * s, ho, wo, 2))
            grid = Tensor(np.broadcast_to(base, (n, s * s, ho, wo, 2)).copy())

        grid = grid.reshape((n, s * s * ho, wo, 2))
        samp = ad.grid_sample(x, grid)  # (n, c, s^2*ho, wo)
        samp = samp.reshape((n, c, s * s, ho, wo))
        cols = ad.transpose(samp, (0, 3, 4, 1, 2)).reshape((n * ho * wo, c * s * s))
        wmat = self.weight.reshape((self.out_channels, c * s * s))
        out = ad.matmul(cols, ad.transpose(wmat, (1, 0))) + self.bias
        return ad.transpose(out.reshape((n, ho, wo, self.out_channels)), (0, 3, 1, 2))


class StandardPatchEmbed(Module):
    """Plain overlapping patch embedding (a strided convolution)."""

    def __init__(self, rng, in_channels, out_channels, patch_size, stride, padding=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.patch_size = patch_size
        self.stride = stride
        self.padding = patch_size // 2 if padding is None else padding
        self.weight = param(rng, (out_channels, in_channels, patch_size, patch_size))
        self.bias = zeros_param((out_channels,))

    def __call__(self, x, record=False):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DeformableTokenMixer(Module):
    """Channel-wise spatial gather at learned offsets, then a linear map.

    Every channel of every location gets its own (dy, dx): the predictor
    emits 2*C channels. Channel c of the output token at (y, x) reads
    channel c of the input at (y+dy_c, x+dx_c) (bilinear, zero padded);
    the gathered C-vector then passes through a fully-connected layer.
    With zero offsets this is exactly a per-token channel MLP.
    """

    def __init__(self, rng, channels, out_channels=None, r=4, deformable=True):
        out_channels = channels if out_channels is None else out_channels
        self.channels = channels
        self.r = r
        self.deformable = deformable
        if deformable:
            self.offset_weight = zeros_param((2 * channels, channels, 3, 3))
            self.offset_bias = zeros_param((2 * channels,))
        self.fc = Linear(rng, channels, out_channels)
        self.last_offsets = None

    def __call__(self, x, record=False):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ad.ShapeError(f"token mixer expects {self.channels} channels, got input {x.shape}")
        gy, gx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        base = np.stack([gy, gx], axis=-1)  # (h, w, 2)

        if self.deformable:
            raw = ad.conv2d(x, self.offset_weight, self.offset_bias, stride=1, padding=1)
            if not np.isfinite(raw.data).all():
                raise ad.NumericError("non-finite offsets from token-mixer offset predictor")
            off = raw.reshape((n, 2, c, h, w))
            off = ad.transpose(off, (0, 2, 3, 4, 1))  # (n, c, h, w, 2)
            off = _clip_offsets_node(off, h, w, self.r)
            if record:
                self.last_offsets = off.data + 0.0
            grid = (off + base).reshape((n * c, h, w, 2))
        else:
            if record:
                self.last_offsets = np.zeros((n, c, h, w, 2))
            grid = Tensor(np.broadcast_to(base, (n * c, h, w, 2)).copy())

        planes = x.reshape((n * c, 1, h, w))
        gathered = ad.grid_sample(planes, grid).reshape((n, c, h, w))
        tokens = ad.transpose(gathered, (0, 2, 3, 1)).reshape((n * h * w, c))
        mixed = self.fc(tokens)
        co = mixed.shape[-1]
        return ad.transpose(mixed.reshape((n, h, w, co)), (0, 3, 1, 2))


def pool_mixer(x):
    """3x3 average pooling, stride 1, zero padding 1, channel-preserving.

    Padded cells count toward the divisor, so border cells are attenuated
    by the padding fraction.
    """
    return ad.avg_pool2d(x, kernel=3, stride=1, padding=1)


class ChannelMixer(Module):
    """Squeeze-excite channel gate: GAP -> bottleneck -> sigmoid rescale."""

    def __init__(self, rng, channels, reduction=4):
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.squeeze = Linear(rng, channels, hidden)
        self.excite = Linear(rng, hidden, channels)

    def __call__(self, x):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ad.ShapeError(f"channel mixer expects {self.channels} channels, got input {x.shape}")
        pooled = ad.global_avg_pool(x)  # (n, c)
        gate = ad.sigmoid(self.excite(ad.silu(self.squeeze(pooled))))
        return x * gate.reshape((n, c, 1, 1))


def offset_csv_rows(stage, offsets, base=None):
    """Flatten recorded offsets into (stage, y, x, dy, dx) rows.

    `offsets` is (taps_or_channels, H, W, 2) for one image; `base` adds a
    fixed lattice displacement per tap (patch-embed case) so rows describe
    the full sampled displacement relative to the location.
    """
    t, h, w, _ = offsets.shape
    total = offsets.copy()
    if base is not None:
        total += base.reshape(t, 1, 1, 2)
    rows = []
    for k in range(t):
        for y in range(h):
            for x in range(w):
                dy, dx = total[k, y, x]
                rows.append((stage, y, x, float(dy), float(dx)))
    return rows
