"""
Spectral and spatial branches, plus the bicubic upsampler they build on
"""

from typing import List, Optional, Tuple

import numpy as np

from .errors import ShapeError, UsageError
from .fmamba import fuse_pair, make_fusion
from .models import NetworkConfig, is_power_of_two
from .tensor import ParamGroup, Tensor, conv2d, init_uniform, make_op
from .wavelet import Subbands2D, build_pyramid1d, build_pyramid2d, idwt1d, idwt2d

SUBBANDS = ("ll", "lh", "hl", "hh")
BICUBIC_A = -0.5

Trace = Optional[List[Tuple[str, Tuple[int, ...]]]]


def _record(trace: Trace, label: str, shape) -> None:
    if trace is not None:
        trace.append((label, tuple(shape)))


class ConvParams(ParamGroup):
    """Same-padded k x k convolution with bias"""

    def __init__(self, rng, name, c_in, c_out, k=3, dtype=np.float64):
        fan_in = c_in * k * k
        self.pad = k // 2
        self.weight = init_uniform(rng, (c_out, c_in, k, k), fan_in, f"{name}.weight", dtype)
        self.bias = init_uniform(rng, (c_out,), fan_in, f"{name}.bias", dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, pad=self.pad)


# ==================== Upsampling ====================


def _cubic(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    near = ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    far = ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def bicubic_matrix(n: int, r: int) -> np.ndarray:
    """(r n) x n interpolation matrix, half-pixel centers, clamped borders"""
    out = np.zeros((r * n, n))
    src = (np.arange(r * n) + 0.5) / r - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    for tap in range(-1, 3):
        weights = _cubic(frac - tap)
        index = np.clip(base + tap, 0, n - 1)
        np.add.at(out, (np.arange(r * n), index), weights)
    return out


def bicubic_upsample(lrms: Tensor, r: int) -> Tensor:
    """Separable bicubic (a = -0.5) upsampling of a c x h x w image by r"""
    if r < 1 or not is_power_of_two(r):
        raise UsageError(f"upsampling ratio must be a power of two, got {r}")
    if lrms.ndim != 3:
        raise ShapeError(f"bicubic_upsample expects c x h x w, got {lrms.shape}")
    _, h, w = lrms.shape
    uh = bicubic_matrix(h, r).astype(lrms.dtype)
    uw = bicubic_matrix(w, r).astype(lrms.dtype)
    out = np.einsum("ij,cjk,lk->cil", uh, lrms.data, uw)
    return make_op(out, (lrms,), lambda g: (np.einsum("ij,cil,lk->cjk", uh, g, uw),))


# ==================== Spectral branch ====================


class SpectralBranchParams(ParamGroup):
    def __init__(self, rng, cfg: NetworkConfig, name: str = "spe"):
        dtype = np.dtype(cfg.dtype)
        self.ratio = cfg.ratio
        self.pan_in = ConvParams(rng, f"{name}.pan_in", 1, cfg.width, dtype=dtype)
        self.lrms_in = ConvParams(rng, f"{name}.lrms_in", cfg.bands, cfg.width, dtype=dtype)
        self.stages = [
            {
                band: [make_fusion(rng, f"spebs{i}.fm_{band}.{k}", cfg) for k in range(cfg.depth)]
                for band in SUBBANDS
            }
            for i in range(1, cfg.n_r + 1)
        ]
        self.out = ConvParams(rng, f"{name}.out", cfg.width, cfg.bands, dtype=dtype)


def spectral_branch(pan: Tensor, lrms: Tensor, p: SpectralBranchParams, trace: Trace = None) -> Tensor:
    """Inject PAN subbands into the LRMS features level by level; returns Output1"""
    r = p.ratio
    _, h, w = pan.shape
    if lrms.shape[1] * r != h or lrms.shape[2] * r != w:
        raise ShapeError(f"PAN {pan.shape} and LRMS {lrms.shape} do not agree on ratio {r}")

    pan_feat = p.pan_in(pan)
    _record(trace, "Input PAN conv", pan_feat.shape)
    pyramid = build_pyramid2d(pan_feat, r)
    for j, bands in enumerate(pyramid.levels, start=1):
        _record(trace, f"Level-{j} DWT2D", (4 * bands.shape[0],) + bands.shape[1:])

    m = p.lrms_in(lrms)
    n_r = pyramid.depth
    for i, blocks in enumerate(p.stages, start=1):
        level = pyramid.level(n_r - i + 1)
        fused = [fuse_pair(m, getattr(level, band), blocks[band])[0] for band in SUBBANDS]
        _record(trace, f"FMamba (SpeBS-{i})", (4 * fused[0].shape[0],) + fused[0].shape[1:])
        m = idwt2d(Subbands2D(*fused))
        _record(trace, f"IDWT2D (SpeBS-{i})", m.shape)

    out = p.out(m)
    _record(trace, "Reduce to c", out.shape)
    return out


# ==================== Spatial branch ====================


class SpatialStageParams(ParamGroup):
    """Conv_C projections per path, fusion blocks, Conv_orig back projections"""

    def __init__(self, rng, cfg: NetworkConfig, i: int):
        dtype = np.dtype(cfg.dtype)
        k = 2 ** (i - 1)
        name = f"spabs{i}"
        self.channels = k
        self.p_to_l = ConvParams(rng, f"{name}.conv_p_l", k, cfg.width, dtype=dtype)
        self.p_to_h = ConvParams(rng, f"{name}.conv_p_h", k, cfg.width, dtype=dtype)
        self.l_in = ConvParams(rng, f"{name}.conv_l", k, cfg.width, dtype=dtype)
        self.h_in = ConvParams(rng, f"{name}.conv_h", k, cfg.width, dtype=dtype)
        self.fm_l = [make_fusion(rng, f"{name}.fm_l.{d}", cfg) for d in range(cfg.depth)]
        self.fm_h = [make_fusion(rng, f"{name}.fm_h.{d}", cfg) for d in range(cfg.depth)]
        self.l_out = ConvParams(rng, f"{name}.orig_l", cfg.width, k, dtype=dtype)
        self.h_out = ConvParams(rng, f"{name}.orig_h", cfg.width, k, dtype=dtype)


class SpatialBranchParams(ParamGroup):
    def __init__(self, rng, cfg: NetworkConfig):
        self.stages = [SpatialStageParams(rng, cfg, i) for i in range(1, cfg.n_c + 1)]


def spatial_branch(pan: Tensor, l0: Tensor, p: SpatialBranchParams, trace: Trace = None) -> Tensor:
    """Grow PAN from 1 to c channels guided by the channel pyramid of l0; returns Output2"""
    if pan.shape[1:] != l0.shape[1:]:
        raise ShapeError(f"PAN {pan.shape} and L0 {l0.shape} differ spatially")
    pyramid = build_pyramid1d(l0)
    n_c = pyramid.depth
    if n_c != len(p.stages):
        raise ShapeError(f"{l0.shape[0]} bands need {n_c} stages, parameters have {len(p.stages)}")

    current = pan
    for i, stage in enumerate(p.stages, start=1):
        j = n_c - i + 1
        low, high = pyramid.level(j)
        _record(trace, f"Level-{j} DWT1D", low.shape)
        f_low = fuse_pair(stage.p_to_l(current), stage.l_in(low), stage.fm_l)[0]
        f_high = fuse_pair(stage.p_to_h(current), stage.h_in(high), stage.fm_h)[0]
        current = idwt1d(stage.l_out(f_low), stage.h_out(f_high))
        _record(trace, f"IDWT1D (SpaBS-{i})", current.shape)
    return current
