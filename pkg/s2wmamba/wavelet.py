"""
Haar wavelet transforms: 2D over 2x2 pixel blocks, 1D over adjacent channel pairs

Analysis divides by 4 (2D) and 2 (1D), synthesis uses unit coefficients, so
idwt(dwt(x)) == x. Both are linear autodiff ops whose backward pass is the
scaled opposite transform.
"""

from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np

from .errors import ShapeError, UsageError
from .models import is_power_of_two
from .tensor import Tensor, concat, make_op, slice_axis


class Subbands2D(NamedTuple):
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    @property
    def shape(self):
        return self.ll.shape

    def stacked(self) -> Tensor:
        """[LL, LH, HL, HH] along channels: 4C x h x w"""
        return concat(list(self), axis=0)


@dataclass
class Pyramid2D:
    root: Tensor
    levels: List[Subbands2D] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def level(self, i: int) -> Subbands2D:
        """1-based level access, level 1 is the finest"""
        return self.levels[i - 1]


@dataclass
class Pyramid1D:
    root: Tensor
    lows: List[Tensor] = field(default_factory=list)
    highs: List[Tensor] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.lows)

    def level(self, i: int):
        return self.lows[i - 1], self.highs[i - 1]


# ==================== Array kernels ====================


def haar2d_forward(x: np.ndarray) -> np.ndarray:
    """C x H x W -> 4C x H/2 x W/2 stacked as [LL, LH, HL, HH]"""
    a11 = x[:, 0::2, 0::2]
    a12 = x[:, 0::2, 1::2]
    a21 = x[:, 1::2, 0::2]
    a22 = x[:, 1::2, 1::2]
    ll = (a11 + a12 + a21 + a22) / 4.0
    lh = (a11 + a12 - a21 - a22) / 4.0
    hl = (a11 - a12 + a21 - a22) / 4.0
    hh = (a11 - a12 - a21 + a22) / 4.0
    return np.concatenate([ll, lh, hl, hh], axis=0)


def haar2d_inverse(s: np.ndarray) -> np.ndarray:
    """4C x h x w stacked subbands -> C x 2h x 2w"""
    ll, lh, hl, hh = np.split(s, 4, axis=0)
    c, h, w = ll.shape
    out = np.empty((c, 2 * h, 2 * w), dtype=s.dtype)
    out[:, 0::2, 0::2] = ll + lh + hl + hh
    out[:, 0::2, 1::2] = ll + lh - hl - hh
    out[:, 1::2, 0::2] = ll - lh + hl - hh
    out[:, 1::2, 1::2] = ll - lh - hl + hh
    return out


def haar1d_forward(x: np.ndarray) -> np.ndarray:
    """C x H x W -> [L (C/2), H (C/2)] x H x W, pairs are channels (2k, 2k+1)"""
    c1 = x[0::2]
    c2 = x[1::2]
    return np.concatenate([(c1 + c2) / 2.0, (c1 - c2) / 2.0], axis=0)


def haar1d_inverse(s: np.ndarray) -> np.ndarray:
    low, high = np.split(s, 2, axis=0)
    out = np.empty((2 * low.shape[0],) + low.shape[1:], dtype=s.dtype)
    out[0::2] = low + high
    out[1::2] = low - high
    return out


# ==================== Differentiable transforms ====================


def dwt2d_stacked(x: Tensor) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"dwt2d expects C x H x W, got {x.shape}")
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"dwt2d needs even height and width, got {x.shape[1]}x{x.shape[2]}")
    return make_op(haar2d_forward(x.data), (x,), lambda g: (0.25 * haar2d_inverse(g),))


def idwt2d_stacked(s: Tensor) -> Tensor:
    if s.ndim != 3 or s.shape[0] % 4:
        raise ShapeError(f"idwt2d expects 4C x h x w subbands, got {s.shape}")
    return make_op(haar2d_inverse(s.data), (s,), lambda g: (4.0 * haar2d_forward(g),))


def dwt2d(x: Tensor) -> Subbands2D:
    stacked = dwt2d_stacked(x)
    c = x.shape[0]
    return Subbands2D(*(slice_axis(stacked, k * c, (k + 1) * c, axis=0) for k in range(4)))


def idwt2d(s: Subbands2D) -> Tensor:
    shapes = {band.shape for band in s}
    if len(shapes) != 1:
        raise ShapeError(f"idwt2d subband shapes differ: {sorted(shapes)}")
    return idwt2d_stacked(s.stacked())


def dwt1d_stacked(x: Tensor) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"dwt1d expects C x H x W, got {x.shape}")
    if x.shape[0] % 2:
        raise ShapeError(f"dwt1d needs an even channel count, got {x.shape[0]}")
    return make_op(haar1d_forward(x.data), (x,), lambda g: (0.5 * haar1d_inverse(g),))


def idwt1d_stacked(s: Tensor) -> Tensor:
    if s.ndim != 3 or s.shape[0] % 2:
        raise ShapeError(f"idwt1d expects [L, H] stacked channels, got {s.shape}")
    return make_op(haar1d_inverse(s.data), (s,), lambda g: (2.0 * haar1d_forward(g),))


def dwt1d(x: Tensor):
    """Returns (L, H), each C/2 x H x W"""
    stacked = dwt1d_stacked(x)
    half = x.shape[0] // 2
    return slice_axis(stacked, 0, half, axis=0), slice_axis(stacked, half, 2 * half, axis=0)


def idwt1d(low: Tensor, high: Tensor) -> Tensor:
    if low.shape != high.shape:
        raise ShapeError(f"idwt1d: L {low.shape} and H {high.shape} differ")
    return idwt1d_stacked(concat([low, high], axis=0))


# ==================== Pyramids ====================


def build_pyramid2d(pan_feat: Tensor, ratio: int) -> Pyramid2D:
    """n_r = log2(ratio) levels, level i decomposes LL of level i-1"""
    if ratio < 2 or not is_power_of_two(ratio):
        raise UsageError(f"ratio must be a power of two >= 2, got {ratio}")
    _, h, w = pan_feat.shape
    if h % ratio or w % ratio:
        raise ShapeError(f"pyramid input {h}x{w} not divisible by ratio {ratio}")
    pyramid = Pyramid2D(root=pan_feat)
    ll = pan_feat
    for _ in range(ratio.bit_length() - 1):
        bands = dwt2d(ll)
        pyramid.levels.append(bands)
        ll = bands.ll
    return pyramid


def reconstruct_pyramid2d(pyramid: Pyramid2D) -> Tensor:
    ll = pyramid.levels[-1].ll
    for bands in reversed(pyramid.levels):
        ll = idwt2d(Subbands2D(ll, bands.lh, bands.hl, bands.hh))
    return ll


def build_pyramid1d(l0: Tensor) -> Pyramid1D:
    """n_c = log2(c) levels of (L_i, H_i), channel count halves per level"""
    c = l0.shape[0]
    if c < 2 or not is_power_of_two(c):
        raise UsageError(f"band count must be a power of two >= 2, got {c}")
    pyramid = Pyramid1D(root=l0)
    low = l0
    for _ in range(c.bit_length() - 1):
        low, high = dwt1d(low)
        pyramid.lows.append(low)
        pyramid.highs.append(high)
    return pyramid


def reconstruct_pyramid1d(pyramid: Pyramid1D) -> Tensor:
    low = pyramid.lows[-1]
    for high in reversed(pyramid.highs):
        low = idwt1d(low, high)
    return low
