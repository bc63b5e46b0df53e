"""
Multi-scale dynamic gate: fuses the two branch outputs into the residual image

    out = X_main * (1 + G_dec + G_mul * X_extra) + G_add
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .fmamba import TokenSeq, derasterize, rasterize
from .models import AblationConfig
from .tensor import (
    ParamGroup,
    Tensor,
    add,
    add_scalar,
    concat,
    conv2d,
    expand_spatial,
    gelu,
    init_const,
    init_uniform,
    layernorm,
    linear,
    mul,
    reshape,
    sigmoid,
    slice_axis,
    spatial_mean,
    sub,
    tanh,
    zeros,
)


@dataclass
class GateBundle:
    g_mul: Tensor
    g_dec: Tensor
    g_add: Tensor


class RfebParams(ParamGroup):
    """Depthwise k x k, pointwise 1 x 1, GELU"""

    def __init__(self, rng, name, channels, k, dtype=np.float64):
        self.k = k
        self.dw_w = init_uniform(rng, (channels, 1, k, k), k * k, f"{name}.dw_w", dtype)
        self.dw_b = init_uniform(rng, (channels,), k * k, f"{name}.dw_b", dtype)
        self.pw_w = init_uniform(rng, (channels, channels, 1, 1), channels, f"{name}.pw_w", dtype)
        self.pw_b = init_uniform(rng, (channels,), channels, f"{name}.pw_b", dtype)


class GfebParams(ParamGroup):
    """Pooled statistic through a two layer bottleneck"""

    def __init__(self, rng, name, channels, reduction, dtype=np.float64):
        hidden = max(1, channels // reduction)
        self.fc1_w = init_uniform(rng, (hidden, channels), channels, f"{name}.fc1_w", dtype)
        self.fc1_b = init_uniform(rng, (hidden,), channels, f"{name}.fc1_b", dtype)
        self.fc2_w = init_uniform(rng, (channels, hidden), hidden, f"{name}.fc2_w", dtype)
        self.fc2_b = init_uniform(rng, (channels,), hidden, f"{name}.fc2_b", dtype)


class MsdgParams(ParamGroup):
    def __init__(self, rng, name, bands, reduction=4, dtype=np.float64):
        c, c2 = bands, 2 * bands
        self.bands = bands
        self.ieb_x_w = init_uniform(rng, (c, c, 1, 1), c, f"{name}.ieb_x_w", dtype)
        self.ieb_x_b = init_uniform(rng, (c,), c, f"{name}.ieb_x_b", dtype)
        self.ieb_y_w = init_uniform(rng, (c, c, 1, 1), c, f"{name}.ieb_y_w", dtype)
        self.ieb_y_b = init_uniform(rng, (c,), c, f"{name}.ieb_y_b", dtype)
        self.ln_gamma = init_const((c2,), 1.0, f"{name}.ln_gamma", dtype)
        self.ln_beta = init_const((c2,), 0.0, f"{name}.ln_beta", dtype)
        self.rfeb1 = RfebParams(rng, f"{name}.rfeb1", c2, 1, dtype)
        self.rfeb3 = RfebParams(rng, f"{name}.rfeb3", c2, 3, dtype)
        self.gfeb = GfebParams(rng, f"{name}.gfeb", c2, reduction, dtype)
        # zero head: every gate starts at 0 and the block starts as X_main
        self.head_w = init_const((3 * c, c2, 1, 1), 0.0, f"{name}.head_w", dtype)
        self.head_b = init_const((3 * c,), 0.0, f"{name}.head_b", dtype)


class DualMsdgParams(ParamGroup):
    def __init__(self, rng, bands, reduction=4, dtype=np.float64):
        self.gate1 = MsdgParams(rng, "msdg1", bands, reduction, dtype)
        self.gate2 = MsdgParams(rng, "msdg2", bands, reduction, dtype)
        self.rho = init_const((1,), 0.0, "msdg.rho", dtype)


def interactive_enhance(x: Tensor, y: Tensor, p: MsdgParams):
    """X' = X + X * sigmoid(conv1x1(Y)) and the mirror for Y"""
    x_new = add(x, mul(x, sigmoid(conv2d(y, p.ieb_x_w, p.ieb_x_b))))
    y_new = add(y, mul(y, sigmoid(conv2d(x, p.ieb_y_w, p.ieb_y_b))))
    return x_new, y_new


def channel_norm(z: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    seq = rasterize(z)
    return derasterize(TokenSeq(layernorm(seq.tokens, gamma, beta), seq.height, seq.width))


def rfeb(z: Tensor, p: RfebParams) -> Tensor:
    hidden = conv2d(z, p.dw_w, p.dw_b, pad=p.k // 2, groups=z.shape[0])
    return gelu(conv2d(hidden, p.pw_w, p.pw_b))


def gfeb(z: Tensor, p: GfebParams) -> Tensor:
    """Spatially constant per channel"""
    c, h, w = z.shape
    pooled = reshape(spatial_mean(z), (1, c))
    hidden = gelu(linear(pooled, p.fc1_w, p.fc1_b))
    return expand_spatial(reshape(linear(hidden, p.fc2_w, p.fc2_b), (c,)), h, w)


def msdg_gates(x_main: Tensor, x_extra: Tensor, p: MsdgParams, ablation: AblationConfig = None) -> GateBundle:
    if x_main.shape != x_extra.shape:
        raise ShapeError(f"msdg inputs differ: {x_main.shape} vs {x_extra.shape}")
    c = x_main.shape[0]
    if c != p.bands:
        raise ShapeError(f"msdg built for {p.bands} bands, got {c}")
    xm, xe = interactive_enhance(x_main, x_extra, p)
    z = channel_norm(concat([xm, xe], axis=0), p.ln_gamma, p.ln_beta)
    features = add(add(rfeb(z, p.rfeb1), rfeb(z, p.rfeb3)), gfeb(z, p.gfeb))
    raw = conv2d(features, p.head_w, p.head_b)

    bundle = GateBundle(
        g_mul=tanh(slice_axis(raw, 0, c, axis=0)),
        g_dec=tanh(slice_axis(raw, c, 2 * c, axis=0)),
        g_add=slice_axis(raw, 2 * c, 3 * c, axis=0),
    )
    if ablation is not None:
        blank = zeros(x_main.shape, dtype=x_main.dtype)
        if ablation.no_gm:
            bundle.g_mul = blank
        if ablation.no_gc:
            bundle.g_dec = blank
        if ablation.no_ga:
            bundle.g_add = blank
    return bundle


def apply_gates(x_main: Tensor, x_extra: Tensor, gates: GateBundle) -> Tensor:
    modulation = add_scalar(add(gates.g_dec, mul(gates.g_mul, x_extra)), 1.0)
    return add(mul(x_main, modulation), gates.g_add)


def msdg_gate(x_main: Tensor, x_extra: Tensor, p: MsdgParams, ablation: AblationConfig = None) -> Tensor:
    return apply_gates(x_main, x_extra, msdg_gates(x_main, x_extra, p, ablation))


def dual_msdg(o1: Tensor, o2: Tensor, p: DualMsdgParams, ablation: AblationConfig = None) -> Tensor:
    """sigmoid(rho) * gate(o1 | o2) + (1 - sigmoid(rho)) * gate(o2 | o1)"""
    if o1.shape != o2.shape:
        raise ShapeError(f"dual msdg inputs differ: {o1.shape} vs {o2.shape}")
    first = msdg_gate(o1, o2, p.gate1, ablation)
    second = msdg_gate(o2, o1, p.gate2, ablation)
    rate = sigmoid(p.rho)
    return add(mul(first, rate), sub(second, mul(second, rate)))
