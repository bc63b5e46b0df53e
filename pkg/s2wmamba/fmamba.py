"""
Selective state-space blocks and the two-stream FMamba fusion block

The scan runs the recurrence

    h_t = exp(delta_t * A) h_{t-1} + delta_t B_t u_t
    y_t = h_t C_t + D u_t

token by token in raster order. Forward keeps only chunk boundary states;
backward recomputes each chunk from its boundary, so time is linear in N and
live memory is one chunk plus N / chunk boundary states.
"""

import math
import time
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import config
from .errors import NumericalError, ShapeError
from .tensor import (
    ParamGroup,
    Tensor,
    add,
    causal_conv1d,
    concat,
    conv2d,
    gelu,
    init_const,
    init_uniform,
    layernorm,
    linear,
    make_op,
    mul,
    no_grad,
    permute,
    reshape,
    scale_axis,
    sigmoid,
    silu,
    slice_axis,
    softplus,
    sub,
)

DT_MIN = 1e-3
DT_MAX = 1e-1


@dataclass
class TokenSeq:
    """N x d tokens of a row-major raster, N = height * width"""

    tokens: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.height * self.width:
            raise ShapeError(
                f"token count {self.tokens.shape} does not match raster {self.height}x{self.width}"
            )

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]


def rasterize(x: Tensor) -> TokenSeq:
    """C x h x w -> (h w) x C"""
    if x.ndim != 3:
        raise ShapeError(f"rasterize expects C x h x w, got {x.shape}")
    c, h, w = x.shape
    return TokenSeq(permute(reshape(x, (c, h * w)), (1, 0)), h, w)


def derasterize(seq: TokenSeq) -> Tensor:
    return reshape(permute(seq.tokens, (1, 0)), (seq.d, seq.height, seq.width))


# ==================== Scan kernel ====================


def _chunk_states(u, delta, a, b, c_mat, h0):
    """Run one chunk from h0; returns all states (L, D, S) and the decay factors"""
    decay = np.exp(delta[:, :, None] * a[None])
    drive = (delta * u)[:, :, None] * b[:, None, :]
    states = np.empty_like(drive)
    h = h0
    for t in range(len(u)):
        h = decay[t] * h + drive[t]
        states[t] = h
    return states, decay


def selective_scan_core(
    u: Tensor,
    delta: Tensor,
    a_log: Tensor,
    b: Tensor,
    c: Tensor,
    d_skip: Tensor,
    chunk: Optional[int] = None,
) -> Tensor:
    """Fused selective scan.

    Args:
        u: N x D inputs
        delta: N x D positive step sizes
        a_log: D x S log magnitudes of the diagonal decay, A = -exp(a_log)
        b: N x S input projections
        c: N x S readout projections
        d_skip: D skip scale
        chunk: tokens per checkpoint chunk, defaults to S2W_SCAN_CHUNK
    """
    n, dim = u.shape
    n_state = a_log.shape[1]
    if delta.shape != (n, dim) or b.shape != (n, n_state) or c.shape != (n, n_state):
        raise ShapeError(
            f"scan shapes disagree: u {u.shape}, delta {delta.shape}, B {b.shape}, C {c.shape}"
        )
    if a_log.shape != (dim, n_state) or d_skip.shape != (dim,):
        raise ShapeError(f"scan parameters disagree: A_log {a_log.shape}, D {d_skip.shape}")
    if np.any(delta.data <= 0.0):
        raise NumericalError("non-positive step size in selective scan")

    chunk = chunk or config.SCAN_CHUNK
    a = -np.exp(a_log.data)
    starts = list(range(0, n, chunk))
    boundaries = []
    y = np.empty((n, dim), dtype=np.result_type(u.data, delta.data, b.data))
    h = np.zeros((dim, n_state), dtype=y.dtype)
    for s in starts:
        e = min(s + chunk, n)
        boundaries.append(h)
        states, _ = _chunk_states(u.data[s:e], delta.data[s:e], a, b.data[s:e], c.data[s:e], h)
        y[s:e] = np.einsum("lds,ls->ld", states, c.data[s:e])
        h = states[-1]
    y += u.data * d_skip.data

    def backward(gy):
        gu = gy * d_skip.data
        gdelta = np.zeros_like(delta.data)
        ga = np.zeros_like(a)
        gb = np.zeros_like(b.data)
        gc = np.zeros_like(c.data)
        gd = (gy * u.data).sum(axis=0)
        carry = np.zeros((dim, n_state), dtype=gy.dtype)
        for s, h0 in zip(reversed(starts), reversed(boundaries)):
            e = min(s + chunk, n)
            uu, dd, bb, cc, gg = u.data[s:e], delta.data[s:e], b.data[s:e], c.data[s:e], gy[s:e]
            states, decay = _chunk_states(uu, dd, a, bb, cc, h0)
            prev = np.concatenate([h0[None], states[:-1]], axis=0)
            dh = np.empty_like(states)
            for t in range(e - s - 1, -1, -1):
                carry = carry + gg[t][:, None] * cc[t][None, :]
                dh[t] = carry
                carry = decay[t] * carry
            gc[s:e] = np.einsum("lds,ld->ls", states, gg)
            g_decay = dh * prev * decay
            gdelta[s:e] += (g_decay * a[None]).sum(axis=2)
            ga += np.einsum("lds,ld->ds", g_decay, dd)
            dh_b = np.einsum("lds,ls->ld", dh, bb)
            gdelta[s:e] += dh_b * uu
            gu[s:e] += dh_b * dd
            gb[s:e] = np.einsum("lds,ld->ls", dh, dd * uu)
        return gu, gdelta, ga * a, gb, gc, gd

    return make_op(y, (u, delta, a_log, b, c, d_skip), backward)


# ==================== Mamba mixers ====================


class SsmParams(ParamGroup):
    """Projections and state parameters of one selective SSM mixer.

    In cross mode the main stream supplies u, C and the gate z, while a
    separate modulator path supplies delta and B.
    """

    def __init__(self, rng, name: str, d_model: int, d_state=16, expand=2, conv_width=4, cross=False, dtype=np.float64):
        d_inner = expand * d_model
        self.d_model = d_model
        self.d_inner = d_inner
        self.d_state = d_state
        self.dt_rank = math.ceil(d_model / 16)
        self.cross = cross

        self.in_proj = init_uniform(rng, (2 * d_inner, d_model), d_model, f"{name}.in_proj", dtype)
        self.conv_w = init_uniform(rng, (d_inner, conv_width), conv_width, f"{name}.conv_w", dtype)
        self.conv_b = init_uniform(rng, (d_inner,), conv_width, f"{name}.conv_b", dtype)
        if cross:
            self.x_proj = init_uniform(rng, (d_state, d_inner), d_inner, f"{name}.x_proj", dtype)
            self.mod_in_proj = init_uniform(rng, (d_inner, d_model), d_model, f"{name}.mod_in_proj", dtype)
            self.mod_conv_w = init_uniform(rng, (d_inner, conv_width), conv_width, f"{name}.mod_conv_w", dtype)
            self.mod_conv_b = init_uniform(rng, (d_inner,), conv_width, f"{name}.mod_conv_b", dtype)
            self.mod_x_proj = init_uniform(
                rng, (self.dt_rank + d_state, d_inner), d_inner, f"{name}.mod_x_proj", dtype
            )
        else:
            self.x_proj = init_uniform(
                rng, (self.dt_rank + 2 * d_state, d_inner), d_inner, f"{name}.x_proj", dtype
            )
        self.dt_proj_w = init_uniform(rng, (d_inner, self.dt_rank), self.dt_rank, f"{name}.dt_proj_w", dtype)
        # softplus(bias) starts log-uniform in [DT_MIN, DT_MAX]
        dt = np.exp(rng.uniform(math.log(DT_MIN), math.log(DT_MAX), size=d_inner))
        self.dt_proj_b = init_const((d_inner,), 0.0, f"{name}.dt_proj_b", dtype)
        self.dt_proj_b.data[:] = dt + np.log(-np.expm1(-dt))
        self.a_log = init_const((d_inner, d_state), 0.0, f"{name}.A_log", dtype)
        self.a_log.data[:] = np.log(np.arange(1, d_state + 1, dtype=np.float64))[None, :]
        self.d_skip = init_const((d_inner,), 1.0, f"{name}.D", dtype)
        self.out_proj = init_uniform(rng, (d_model, d_inner), d_inner, f"{name}.out_proj", dtype)

    def step_size(self, dt_in: Tensor) -> Tensor:
        return softplus(linear(dt_in, self.dt_proj_w, self.dt_proj_b))


def selective_scan(x: TokenSeq, p: SsmParams, modulator: Optional[TokenSeq] = None) -> TokenSeq:
    """Selective SSM mixer; self mode without a modulator, cross mode with one"""
    if x.d != p.d_model:
        raise ShapeError(f"token width {x.d} does not match mixer width {p.d_model}")
    if (modulator is None) == p.cross:
        raise ShapeError("cross mixers need a modulator stream and self mixers must not get one")
    di, ns, r = p.d_inner, p.d_state, p.dt_rank

    xz = linear(x.tokens, p.in_proj)
    xs = slice_axis(xz, 0, di, axis=1)
    z = slice_axis(xz, di, 2 * di, axis=1)
    u = silu(causal_conv1d(xs, p.conv_w, p.conv_b, row_width=x.width))

    if modulator is None:
        dbc = linear(u, p.x_proj)
        delta = p.step_size(slice_axis(dbc, 0, r, axis=1))
        b = slice_axis(dbc, r, r + ns, axis=1)
        c = slice_axis(dbc, r + ns, r + 2 * ns, axis=1)
    else:
        if modulator.n != x.n or modulator.d != x.d:
            raise ShapeError(f"stream mismatch: {x.tokens.shape} vs {modulator.tokens.shape}")
        c = linear(u, p.x_proj)
        m = silu(causal_conv1d(linear(modulator.tokens, p.mod_in_proj), p.mod_conv_w, p.mod_conv_b, row_width=x.width))
        db = linear(m, p.mod_x_proj)
        delta = p.step_size(slice_axis(db, 0, r, axis=1))
        b = slice_axis(db, r, r + ns, axis=1)

    y = selective_scan_core(u, delta, p.a_log, b, c, p.d_skip)
    y = mul(y, silu(z))
    return TokenSeq(linear(y, p.out_proj), x.height, x.width)


class SelfMambaParams(ParamGroup):
    def __init__(self, rng, name, d_model, d_state, expand, conv_width, dtype=np.float64):
        self.ln_gamma = init_const((d_model,), 1.0, f"{name}.ln_gamma", dtype)
        self.ln_beta = init_const((d_model,), 0.0, f"{name}.ln_beta", dtype)
        self.ssm = SsmParams(rng, f"{name}.ssm", d_model, d_state, expand, conv_width, False, dtype)
        self.skip = init_const((d_model,), 1.0, f"{name}.skip", dtype)


class CrossMambaParams(ParamGroup):
    def __init__(self, rng, name, d_model, d_state, expand, conv_width, dtype=np.float64):
        self.ln_main_gamma = init_const((d_model,), 1.0, f"{name}.ln_main_gamma", dtype)
        self.ln_main_beta = init_const((d_model,), 0.0, f"{name}.ln_main_beta", dtype)
        self.ln_mod_gamma = init_const((d_model,), 1.0, f"{name}.ln_mod_gamma", dtype)
        self.ln_mod_beta = init_const((d_model,), 0.0, f"{name}.ln_mod_beta", dtype)
        self.ssm = SsmParams(rng, f"{name}.ssm", d_model, d_state, expand, conv_width, True, dtype)


def self_mamba(x: TokenSeq, p: SelfMambaParams) -> TokenSeq:
    """x~ = phi(LN(x)) + skip * x"""
    normed = TokenSeq(layernorm(x.tokens, p.ln_gamma, p.ln_beta), x.height, x.width)
    mixed = selective_scan(normed, p.ssm)
    return TokenSeq(add(mixed.tokens, scale_axis(x.tokens, p.skip, axis=1)), x.height, x.width)


def cross_mamba(main: TokenSeq, aux: TokenSeq, p: CrossMambaParams) -> TokenSeq:
    main_n = TokenSeq(layernorm(main.tokens, p.ln_main_gamma, p.ln_main_beta), main.height, main.width)
    aux_n = TokenSeq(layernorm(aux.tokens, p.ln_mod_gamma, p.ln_mod_beta), aux.height, aux.width)
    return selective_scan(main_n, p.ssm, modulator=aux_n)


# ==================== FMamba ====================


class FMambaParams(ParamGroup):
    """Self mixer per stream, one cross mixer per direction, blend scalar alpha"""

    def __init__(self, rng, name, width, d_state=16, expand=2, conv_width=4, skip_source="post", dtype=np.float64):
        self.width = width
        self.skip_source = skip_source
        self.self_x = SelfMambaParams(rng, f"{name}.self_x", width, d_state, expand, conv_width, dtype)
        self.self_y = SelfMambaParams(rng, f"{name}.self_y", width, d_state, expand, conv_width, dtype)
        self.cross_x = CrossMambaParams(rng, f"{name}.cross_x", width, d_state, expand, conv_width, dtype)
        self.cross_y = CrossMambaParams(rng, f"{name}.cross_y", width, d_state, expand, conv_width, dtype)
        self.alpha = init_const((1,), 0.0, f"{name}.alpha", dtype)


def fmamba_block(x: Tensor, y: Tensor, p: FMambaParams) -> Tuple[Tensor, Tensor, Tensor]:
    """Fuse two C x h x w maps; returns (F, X_out, Y_out)"""
    if x.shape != y.shape:
        raise ShapeError(f"fmamba inputs differ: {x.shape} vs {y.shape}")
    if x.shape[0] != p.width:
        raise ShapeError(f"fmamba expects {p.width} channels, got {x.shape[0]}")
    xs, ys = rasterize(x), rasterize(y)
    xt = self_mamba(xs, p.self_x)
    yt = self_mamba(ys, p.self_y)
    xh = cross_mamba(xt, yt, p.cross_x)
    yh = cross_mamba(yt, xt, p.cross_y)

    bx, by = (xt, yt) if p.skip_source == "post" else (xs, ys)
    weight = sigmoid(p.alpha)
    blend = add(mul(bx.tokens, weight), sub(by.tokens, mul(by.tokens, weight)))
    fused = add(add(xh.tokens, yh.tokens), blend)
    h, w = xs.height, xs.width
    return derasterize(TokenSeq(fused, h, w)), derasterize(xt), derasterize(yt)


class ConvFusionParams(ParamGroup):
    """Residual block of two 3x3 convs with GELU standing in for FMamba"""

    def __init__(self, rng, name, width, dtype=np.float64):
        self.width = width
        self.conv1_w = init_uniform(rng, (width, 2 * width, 3, 3), 2 * width * 9, f"{name}.conv1_w", dtype)
        self.conv1_b = init_uniform(rng, (width,), 2 * width * 9, f"{name}.conv1_b", dtype)
        self.conv2_w = init_uniform(rng, (width, width, 3, 3), width * 9, f"{name}.conv2_w", dtype)
        self.conv2_b = init_uniform(rng, (width,), width * 9, f"{name}.conv2_b", dtype)


def conv_fusion_block(x: Tensor, y: Tensor, p: ConvFusionParams) -> Tuple[Tensor, Tensor, Tensor]:
    if x.shape != y.shape:
        raise ShapeError(f"fusion inputs differ: {x.shape} vs {y.shape}")
    hidden = gelu(conv2d(concat([x, y], axis=0), p.conv1_w, p.conv1_b, pad=1))
    fused = add(add(x, y), conv2d(hidden, p.conv2_w, p.conv2_b, pad=1))
    return fused, x, y


def make_fusion(rng, name, cfg) -> ParamGroup:
    """FMamba, or the conv block when the network is built with the CRM ablation"""
    dtype = np.dtype(cfg.dtype)
    if cfg.ablation.crm:
        return ConvFusionParams(rng, name, cfg.width, dtype)
    return FMambaParams(rng, name, cfg.width, cfg.d_state, cfg.expand, cfg.conv_width, cfg.skip_source, dtype)


def fuse_pair(x: Tensor, y: Tensor, blocks: List[ParamGroup]) -> Tuple[Tensor, Tensor, Tensor]:
    """Apply a stack of fusion blocks; each block reads the previous (F, Y_out)"""
    out = (x, x, y)
    for p in blocks:
        run = conv_fusion_block if isinstance(p, ConvFusionParams) else fmamba_block
        out = run(x, y, p)
        x, y = out[0], out[2]
    return out


# ==================== Benchmark ====================


def time_scan(n: int, dim: int = 32, d_state: int = 16, repeats: int = 5, seed: int = 0, dtype=np.float32) -> float:
    """Median wall-clock seconds of one forward scan over n tokens"""
    rng = np.random.default_rng(seed)
    u = Tensor(rng.standard_normal((n, dim)), dtype=dtype)
    delta = Tensor(rng.uniform(DT_MIN, DT_MAX, (n, dim)), dtype=dtype)
    a_log = Tensor(np.log(np.tile(np.arange(1, d_state + 1), (dim, 1))), dtype=dtype)
    b = Tensor(rng.standard_normal((n, d_state)), dtype=dtype)
    c = Tensor(rng.standard_normal((n, d_state)), dtype=dtype)
    d_skip = Tensor(np.ones(dim), dtype=dtype)
    timings = []
    with no_grad():
        for _ in range(repeats):
            start = time.perf_counter()
            selective_scan_core(u, delta, a_log, b, c, d_skip)
            timings.append(time.perf_counter() - start)
    return float(np.median(timings))
