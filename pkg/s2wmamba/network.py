"""
Network assembly, training loop and checkpoint files

HRMS = upsample(LRMS) + residual, the residual coming from the two branches
and the dual gate, or from the reduced pipeline of an ablation variant.
"""

import math
import time
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import config, logs
from .branches import (
    ConvParams,
    SpatialBranchParams,
    SpectralBranchParams,
    bicubic_upsample,
    spatial_branch,
    spectral_branch,
)
from .dataset import MAX_ELEMENTS, center_crop, random_crop
from .errors import FormatError, NumericalError, ShapeError, UsageError
from .models import AblationConfig, HistoryEntry, NetworkConfig, TrainConfig
from .msdg import DualMsdgParams, dual_msdg
from .tensor import (
    ParamGroup,
    Parameter,
    Tensor,
    add,
    avg_pool2d,
    concat,
    init_uniform,
    linear,
    mean_abs_error,
    mul,
    no_grad,
    reshape,
    scale,
    scale_axis,
    sigmoid,
    spatial_mean,
    sub,
    zero_grad,
)

CHECKPOINT_MAGIC = b"S2WC"
CHECKPOINT_VERSION = 1
# branch output convs start small so the untrained network stays near the upsampler
OUTPUT_INIT_SCALE = 0.1


class AwsParams(ParamGroup):
    """Channel attention over the concatenated branch outputs"""

    def __init__(self, rng, bands, dtype=np.float64):
        self.fc_w = init_uniform(rng, (bands, 2 * bands), 2 * bands, "aws.fc_w", dtype)
        self.fc_b = init_uniform(rng, (bands,), 2 * bands, "aws.fc_b", dtype)


class S2WMambaModel(ParamGroup):
    def __init__(self, cfg: NetworkConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = np.dtype(cfg.dtype)
        structure = cfg.ablation.structure

        self.spectral = None if structure == "spao" else SpectralBranchParams(rng, cfg)
        self.spatial = None if structure == "speo" else SpatialBranchParams(rng, cfg)
        self.gate = DualMsdgParams(rng, cfg.bands, cfg.gfeb_reduction, dtype) if cfg.ablation.has_dual_gate else None
        self.aws = AwsParams(rng, cfg.bands, dtype) if structure == "aws" else None
        single = structure in ("speo", "spao", "seqb1", "seqb2")
        self.head = ConvParams(rng, "head", cfg.bands, cfg.bands, dtype=dtype) if single else None

        if self.spectral is not None:
            self.spectral.out.weight.data *= OUTPUT_INIT_SCALE
        if self.spatial is not None:
            last = self.spatial.stages[-1]
            last.l_out.weight.data *= OUTPUT_INIT_SCALE
            last.h_out.weight.data *= OUTPUT_INIT_SCALE

        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise UsageError(f"duplicate parameter names: {dupes}")

    def named_parameters(self):
        for value in (self.spectral, self.spatial, self.gate, self.aws, self.head):
            if value is not None:
                yield from value.named_parameters()

    def state(self) -> "OrderedDict[str, Parameter]":
        return OrderedDict((p.name, p) for p in self.parameters())

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def forward(self, pan: Tensor, lrms: Tensor, trace=None) -> Tensor:
        cfg = self.config
        r, c = cfg.ratio, cfg.bands
        if pan.ndim != 3 or pan.shape[0] != 1:
            raise ShapeError(f"PAN must be 1 x H x W, got {pan.shape}")
        if lrms.ndim != 3 or lrms.shape[0] != c:
            raise ShapeError(f"LRMS must be {c} x h x w, got {lrms.shape}")
        if pan.shape[1] != lrms.shape[1] * r or pan.shape[2] != lrms.shape[2] * r:
            raise ShapeError(f"PAN {pan.shape} is not {r}x the LRMS {lrms.shape}")

        up = bicubic_upsample(lrms, r)
        structure = cfg.ablation.structure
        if structure == "speo":
            residual = self.head(spectral_branch(pan, lrms, self.spectral, trace))
        elif structure == "spao":
            residual = self.head(spatial_branch(pan, up, self.spatial, trace))
        elif structure == "seqb1":
            o1 = spectral_branch(pan, lrms, self.spectral, trace)
            residual = self.head(spatial_branch(pan, add(up, o1), self.spatial, trace))
        elif structure == "seqb2":
            o2 = spatial_branch(pan, up, self.spatial, trace)
            m0 = avg_pool2d(add(up, o2), r)
            residual = self.head(spectral_branch(pan, m0, self.spectral, trace))
        else:
            o1 = spectral_branch(pan, lrms, self.spectral, trace)
            o2 = spatial_branch(pan, add(up, o1), self.spatial, trace)
            if structure == "hp":
                residual = mul(o1, o2)
            elif structure == "aws":
                residual = attention_weighted_sum(o1, o2, self.aws)
            else:
                residual = dual_msdg(o1, o2, self.gate, cfg.ablation)
        return add(up, residual)

    __call__ = forward

    def zero_residual_path(self) -> None:
        """Zero every branch output projection and gate head"""
        targets = []
        if self.spectral is not None:
            targets += self.spectral.out.parameters()
        if self.spatial is not None:
            last = self.spatial.stages[-1]
            targets += last.l_out.parameters() + last.h_out.parameters()
        if self.head is not None:
            targets += self.head.parameters()
        if self.gate is not None:
            for gate in (self.gate.gate1, self.gate.gate2):
                targets += [gate.head_w, gate.head_b]
        for p in targets:
            p.data[...] = 0.0


def attention_weighted_sum(o1: Tensor, o2: Tensor, p: AwsParams) -> Tensor:
    c = o1.shape[0]
    pooled = reshape(spatial_mean(concat([o1, o2], axis=0)), (1, 2 * c))
    weights = reshape(sigmoid(linear(pooled, p.fc_w, p.fc_b)), (c,))
    return add(scale_axis(o1, weights, axis=0), sub(o2, scale_axis(o2, weights, axis=0)))


def build_model(cfg: Optional[NetworkConfig] = None, **overrides) -> S2WMambaModel:
    cfg = cfg or NetworkConfig()
    if overrides:
        cfg = cfg.model_copy(update=overrides)
    return S2WMambaModel(cfg)


def apply_ablation(model: S2WMambaModel, ablation: AblationConfig) -> S2WMambaModel:
    """Rebuild with another variant, carrying over parameters whose name and shape match"""
    variant = S2WMambaModel(model.config.model_copy(update={"ablation": ablation}))
    source = model.state()
    for name, p in variant.state().items():
        if name in source and source[name].shape == p.shape:
            p.data[...] = source[name].data
    return variant


def count_parameters(model: ParamGroup) -> int:
    return model.num_parameters()


def parameter_breakdown(model: S2WMambaModel) -> Dict[str, int]:
    """Parameter count per top level name prefix"""
    groups: Dict[str, int] = OrderedDict()
    for p in model.parameters():
        key = p.name.split(".")[0]
        groups[key] = groups.get(key, 0) + p.size
    return groups


# ==================== Loss / evaluation ====================


def l1_loss(pred: Union[Tensor, Sequence[Tensor]], gt: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    """Mean absolute error over all elements of all K samples"""
    if isinstance(pred, Tensor):
        return mean_abs_error(pred, gt)
    if len(pred) != len(gt) or not pred:
        raise ShapeError(f"l1_loss needs matching non-empty batches, got {len(pred)} and {len(gt)}")
    total = mean_abs_error(pred[0], gt[0])
    for p, g in zip(pred[1:], gt[1:]):
        total = add(total, mean_abs_error(p, g))
    return scale(total, 1.0 / len(pred))


def fuse(model: S2WMambaModel, pan: np.ndarray, lrms: np.ndarray) -> np.ndarray:
    with no_grad():
        out = model.forward(Tensor(pan, dtype=model.dtype), Tensor(lrms, dtype=model.dtype))
    return out.data


def mean_psnr(model: Optional[S2WMambaModel], samples, ratio: int) -> float:
    """Average PSNR over samples; model=None scores the bicubic baseline"""
    from .metrics import psnr

    scores = []
    for sample in samples:
        if model is None:
            with no_grad():
                pred = bicubic_upsample(Tensor(sample.lrms), ratio).data
        else:
            pred = fuse(model, sample.pan, sample.lrms)
        scores.append(psnr(pred, sample.gt))
    return float(np.mean(scores))


# ==================== Optimizer ====================


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices and kernels only"""

    def __init__(self, params: List[Parameter], cfg: TrainConfig):
        self.params = params
        self.beta1, self.beta2 = cfg.betas
        self.eps = cfg.eps
        self.weight_decay = cfg.weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_toy(
    model: S2WMambaModel,
    train_set,
    cfg: TrainConfig,
    val_set=None,
    ckpt: Optional[Union[str, Path]] = None,
) -> List[HistoryEntry]:
    """Minimize the l1 loss with per-sample graphs and gradient accumulation"""
    if not train_set:
        raise UsageError("training set is empty")
    history: List[HistoryEntry] = []
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    optimizer = AdamW(params, cfg)
    dtype = model.dtype
    ratio = model.config.ratio
    if val_set and cfg.patch:
        val_set = [center_crop(t, cfg.patch) for t in val_set]

    logs.info(f"TRAIN: {model.config.ablation.label}, {count_parameters(model)} parameters, {cfg.steps} steps")
    if val_set:
        logs.info(f"TRAIN: bicubic baseline val psnr {mean_psnr(None, val_set, ratio):.3f}")

    start = time.perf_counter()
    for step in range(cfg.steps):
        picks = rng.choice(len(train_set), size=cfg.batch, replace=len(train_set) < cfg.batch)
        zero_grad(params)
        total = 0.0
        try:
            for index in picks:
                sample = train_set[int(index)]
                if cfg.patch:
                    sample = random_crop(sample, cfg.patch, rng)
                pred = model.forward(Tensor(sample.pan, dtype=dtype), Tensor(sample.lrms, dtype=dtype))
                loss = mean_abs_error(pred, Tensor(sample.gt, dtype=dtype))
                scale(loss, 1.0 / cfg.batch).backward()
                total += float(loss.data)
        except NumericalError as ex:
            raise NumericalError(f"training diverged at step {step}: {ex.detail}")
        loss_value = total / cfg.batch
        if not np.isfinite(loss_value):
            raise NumericalError(f"training diverged at step {step}: loss {loss_value}")

        lr = cfg.lr_at(step)
        optimizer.step(lr)

        val_psnr = None
        last = step == cfg.steps - 1
        if val_set and (step % cfg.eval_every == 0 or last):
            val_psnr = mean_psnr(model, val_set, ratio)
        history.append(HistoryEntry(step=step, loss=loss_value, lr=lr, val_psnr=val_psnr))
        if step % cfg.eval_every == 0 or last:
            shown = f", val psnr {val_psnr:.3f}" if val_psnr is not None else ""
            logs.info(f"TRAIN: step {step}, loss {loss_value:.5f}, lr {lr:.2e}{shown}")

    zero_grad(params)
    logs.info(f"TRAIN: done in {time.perf_counter() - start:.1f}s")
    if ckpt is not None:
        save_checkpoint(model, ckpt)
    return history


def history_table(history: List[HistoryEntry]) -> str:
    lines = [f"{'step':>6} {'loss':>10} {'lr':>10} {'val_psnr':>9}"]
    for h in history:
        val = f"{h.val_psnr:9.3f}" if h.val_psnr is not None else f"{'-':>9}"
        lines.append(f"{h.step:>6d} {h.loss:>10.6f} {h.lr:>10.3e} {val}")
    return "\n".join(lines)


# ==================== Checkpoints ====================


def save_checkpoint(model: S2WMambaModel, path: Union[str, Path]) -> Path:
    """S2WC: magic, u16 version, then per parameter
    u16 name length, utf-8 name, u8 rank, u32 dims, f32 values (all little endian)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        np.array([CHECKPOINT_VERSION], dtype="<u2").tofile(f)
        for p in model.parameters():
            name = p.name.encode("utf-8")
            np.array([len(name)], dtype="<u2").tofile(f)
            f.write(name)
            np.array([p.ndim], dtype="<u1").tofile(f)
            np.array(p.shape, dtype="<u4").tofile(f)
            p.data.astype("<f4").tofile(f)
    config.save_network_config(path, model.config)
    return path


def read_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    if not Path(path).exists():
        raise FormatError(f"{path}: no such checkpoint")
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(raw) < 6:
        raise FormatError(f"{path}: truncated header")
    version = int(np.frombuffer(raw, dtype="<u2", count=1, offset=4)[0])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")

    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    pos = 6

    def take(n: int) -> int:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated at byte {pos}")
        start = pos
        pos += n
        return start

    while pos < len(raw):
        name_len = int(np.frombuffer(raw, dtype="<u2", count=1, offset=take(2))[0])
        try:
            name = raw[take(name_len):pos].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: parameter name at byte {pos - name_len} is not UTF-8")
        rank = int(np.frombuffer(raw, dtype="<u1", count=1, offset=take(1))[0])
        dims = tuple(int(d) for d in np.frombuffer(raw, dtype="<u4", count=rank, offset=take(4 * rank)))
        count = math.prod(dims)
        if count > MAX_ELEMENTS:
            raise FormatError(f"{path}: {name} has implausible dimensions {dims}")
        values = np.frombuffer(raw, dtype="<f4", count=count, offset=take(4 * count))
        entries[name] = values.reshape(dims).copy()
    return entries


def load_checkpoint(path: Union[str, Path]) -> S2WMambaModel:
    """Rebuild the model from the config sidecar and fill in the stored values"""
    cfg = config.load_network_config(path)
    model = S2WMambaModel(cfg)
    stored = read_checkpoint(path)
    state = model.state()
    missing = [name for name in state if name not in stored]
    extra = [name for name in stored if name not in state]
    if missing or extra:
        raise FormatError(f"{path}: checkpoint does not match its config, missing {missing[:3]}, extra {extra[:3]}")
    for name, p in state.items():
        if stored[name].shape != p.shape:
            raise FormatError(f"{path}: {name} has shape {stored[name].shape}, expected {p.shape}")
        p.data[...] = stored[name]
    return model
