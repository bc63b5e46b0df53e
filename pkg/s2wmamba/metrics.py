"""
Pansharpening quality indexes

Reduced resolution (reference available): PSNR, SAM, ERGAS, Q2n.
Full resolution (no reference): D_lambda, D_s and HQNR = (1 - D_lambda)(1 - D_s).
All images are planar c x H x W arrays.
"""

import math
from typing import Optional, Tuple

import numpy as np

from . import logs
from .errors import NumericalError, ShapeError
from .models import MetricsReport

Q_BLOCK = 32
TINY = 1e-12


def _pair(pred: np.ndarray, gt: np.ndarray, op: str) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"{op}: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim != 3:
        raise ShapeError(f"{op}: expected c x H x W images, got {pred.shape}")
    return pred, gt


def psnr(pred, gt, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); +inf when the images are identical"""
    pred, gt = _pair(pred, gt, "psnr")
    if peak <= 0:
        raise ShapeError(f"psnr peak must be positive, got {peak}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def sam(pred, gt) -> float:
    """Mean spectral angle in degrees, pixels with a zero spectrum are skipped"""
    pred, gt = _pair(pred, gt, "sam")
    dot = np.sum(pred * gt, axis=0)
    norms = np.linalg.norm(pred, axis=0) * np.linalg.norm(gt, axis=0)
    valid = norms > 0.0
    skipped = int(valid.size - valid.sum())
    if not valid.any():
        raise NumericalError("sam: every pixel has a zero spectrum")
    if skipped:
        logs.warning(f"sam: skipped {skipped} zero-norm pixels")
    cosine = np.clip(dot[valid] / norms[valid], -1.0, 1.0)
    # parallel spectra can land an ulp below 1
    cosine[cosine >= 1.0 - TINY] = 1.0
    return float(np.degrees(np.mean(np.arccos(cosine))))


def ergas(pred, gt, ratio: int = 4) -> float:
    """100 / r * sqrt(mean_b (RMSE_b / mean_b)^2)"""
    pred, gt = _pair(pred, gt, "ergas")
    means = gt.mean(axis=(1, 2))
    if np.any(means == 0.0):
        raise NumericalError(f"ergas: zero-mean reference band(s) {np.flatnonzero(means == 0.0).tolist()}")
    rmse = np.sqrt(np.mean((pred - gt) ** 2, axis=(1, 2)))
    return float(100.0 / ratio * np.sqrt(np.mean((rmse / means) ** 2)))


# ==================== Hypercomplex quality ====================


def conj(x: np.ndarray) -> np.ndarray:
    """Hypercomplex conjugate along the last axis"""
    out = -x
    out[..., 0] = x[..., 0]
    return out


def cd_mul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cayley-Dickson product along the last axis (length a power of two)

    (a, b)(c, d) = (a c - conj(d) b, d a + b conj(c))
    """
    n = x.shape[-1]
    if n == 1:
        return x * y
    half = n // 2
    a, b = x[..., :half], x[..., half:]
    c, d = y[..., :half], y[..., half:]
    return np.concatenate([cd_mul(a, c) - cd_mul(conj(d), b), cd_mul(d, a) + cd_mul(b, conj(c))], axis=-1)


def q_block(z1: np.ndarray, z2: np.ndarray) -> float:
    """Hypercomplex UIQI of two h x w x n blocks; signed for n == 1"""
    n = z1.shape[-1]
    m1 = z1.mean(axis=(0, 1))
    m2 = z2.mean(axis=(0, 1))
    cov = cd_mul(z1, conj(z2)).mean(axis=(0, 1)) - cd_mul(m1, conj(m2))
    var1 = float(np.mean(np.sum(z1 * z1, axis=-1)) - np.sum(m1 * m1))
    var2 = float(np.mean(np.sum(z2 * z2, axis=-1)) - np.sum(m2 * m2))
    mean_energy = float(np.sum(m1 * m1) + np.sum(m2 * m2))
    spread = var1 + var2
    if n == 1:
        mean_prod = float(m1[0] * m2[0])
        cov_value = float(cov[0])
    else:
        mean_prod = float(np.linalg.norm(m1) * np.linalg.norm(m2))
        cov_value = float(np.linalg.norm(cov))

    if spread <= TINY and mean_energy <= TINY:
        return 1.0
    if spread <= TINY:
        return 2.0 * mean_prod / mean_energy
    if mean_energy <= TINY:
        return 2.0 * cov_value / spread
    return 4.0 * cov_value * mean_prod / (spread * mean_energy)


def q2n(pred, gt, block: int = Q_BLOCK, stride: Optional[int] = None) -> Tuple[float, np.ndarray]:
    """Block-averaged hypercomplex quality index and its block map.

    Bands are zero padded up to the next power of two. An image smaller than
    the block is scored as one global block.
    """
    pred, gt = _pair(pred, gt, "q2n")
    stride = stride or block
    c, h, w = gt.shape
    n = 1 << (c - 1).bit_length()
    z1 = np.zeros((h, w, n))
    z2 = np.zeros((h, w, n))
    z1[..., :c] = gt.transpose(1, 2, 0)
    z2[..., :c] = pred.transpose(1, 2, 0)

    if h < block or w < block:
        rows, cols, size_h, size_w = [0], [0], h, w
    else:
        rows = range(0, h - block + 1, stride)
        cols = range(0, w - block + 1, stride)
        size_h = size_w = block
    qmap = np.array(
        [[q_block(z1[y:y + size_h, x:x + size_w], z2[y:y + size_h, x:x + size_w]) for x in cols] for y in rows]
    )
    return float(np.mean(qmap)), qmap


def uiqi(x, y, block: int = Q_BLOCK) -> float:
    """Scalar universal image quality index of two H x W bands"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return q2n(x[None], y[None], block)[0]


# ==================== No-reference quality ====================


def _degenerate(band: np.ndarray) -> bool:
    return float(np.ptp(band)) == 0.0


def _planar(fused, lrms, op: str) -> Tuple[np.ndarray, np.ndarray]:
    fused = np.asarray(fused, dtype=np.float64)
    lrms = np.asarray(lrms, dtype=np.float64)
    if fused.ndim != 3 or lrms.ndim != 3:
        raise ShapeError(f"{op}: expected c x H x W images, got {fused.shape} and {lrms.shape}")
    if fused.shape[0] != lrms.shape[0]:
        raise ShapeError(f"{op}: band counts differ, {fused.shape[0]} vs {lrms.shape[0]}")
    return fused, lrms


def _single_band(band, shape, op: str, name: str) -> np.ndarray:
    band = np.asarray(band, dtype=np.float64)
    if band.ndim == 3 and band.shape[0] == 1:
        band = band[0]
    if band.shape != shape:
        raise ShapeError(f"{op}: {name} shape {band.shape} does not match {shape}")
    return band


def d_lambda(fused, lrms, block: int = Q_BLOCK, quiet: bool = False) -> float:
    """Mean over band pairs of |Q(F_i, F_j) - Q(L_i, L_j)|, each pair clamped to [0, 1]"""
    fused, lrms = _planar(fused, lrms, "d_lambda")
    c = fused.shape[0]
    diffs, skipped = [], 0
    for i in range(c):
        for j in range(i + 1, c):
            if any(_degenerate(b) for b in (fused[i], fused[j], lrms[i], lrms[j])):
                skipped += 1
                continue
            diffs.append(min(abs(uiqi(fused[i], fused[j], block) - uiqi(lrms[i], lrms[j], block)), 1.0))
    if skipped and not quiet:
        logs.warning(f"d_lambda: skipped {skipped} band pairs with a constant band")
    return float(np.mean(diffs)) if diffs else 0.0


def d_s(fused, lrms, pan, pan_lp, block: int = Q_BLOCK, quiet: bool = False) -> float:
    """Mean over bands of |Q(F_i, PAN) - Q(L_i, PAN_lp)|, each band clamped to [0, 1]"""
    fused, lrms = _planar(fused, lrms, "d_s")
    pan = _single_band(pan, fused.shape[1:], "d_s", "PAN")
    pan_lp = _single_band(pan_lp, lrms.shape[1:], "d_s", "PAN_lp")
    if _degenerate(pan) or _degenerate(pan_lp):
        if not quiet:
            logs.warning("d_s: constant PAN, spatial distortion undefined")
        return 0.0
    diffs, skipped = [], 0
    for i in range(fused.shape[0]):
        if _degenerate(fused[i]) or _degenerate(lrms[i]):
            skipped += 1
            continue
        diffs.append(min(abs(uiqi(fused[i], pan, block) - uiqi(lrms[i], pan_lp, block)), 1.0))
    if skipped and not quiet:
        logs.warning(f"d_s: skipped {skipped} constant bands")
    return float(np.mean(diffs)) if diffs else 0.0


def hqnr(d_lambda_value: float, d_s_value: float) -> float:
    return (1.0 - d_lambda_value) * (1.0 - d_s_value)


def hqnr_map(fused, lrms, pan, pan_lp, ratio: int = 4, block: int = Q_BLOCK) -> np.ndarray:
    """HQNR per non-overlapping full-resolution tile of block x block pixels"""
    fused = np.asarray(fused, dtype=np.float64)
    lrms = np.asarray(lrms, dtype=np.float64)
    pan = np.asarray(pan, dtype=np.float64)
    pan_lp = np.asarray(pan_lp, dtype=np.float64)
    if block % ratio:
        raise ShapeError(f"hqnr_map: block {block} not divisible by ratio {ratio}")
    small = block // ratio
    _, h, w = fused.shape
    rows, cols = max(1, h // block), max(1, w // block)
    out = np.zeros((rows, cols))
    for ty in range(rows):
        for tx in range(cols):
            hi = (slice(None), slice(ty * block, (ty + 1) * block), slice(tx * block, (tx + 1) * block))
            lo = (slice(None), slice(ty * small, (ty + 1) * small), slice(tx * small, (tx + 1) * small))
            dl = d_lambda(fused[hi], lrms[lo], block=small, quiet=True)
            ds = d_s(fused[hi], lrms[lo], pan[hi], pan_lp[lo], block=small, quiet=True)
            out[ty, tx] = hqnr(dl, ds)
    return out


# ==================== Reports ====================


def reduced_report(pred, gt, ratio: int = 4, peak: float = 1.0, block: int = Q_BLOCK) -> MetricsReport:
    return MetricsReport(
        psnr=psnr(pred, gt, peak),
        sam=sam(pred, gt),
        ergas=ergas(pred, gt, ratio),
        q2n=q2n(pred, gt, block)[0],
    )


def full_report(fused, lrms, pan, pan_lp, block: int = Q_BLOCK) -> MetricsReport:
    return MetricsReport(
        d_lambda=d_lambda(fused, lrms, block),
        d_s=d_s(fused, lrms, pan, pan_lp, block),
    )
