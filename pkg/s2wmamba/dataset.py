"""
Synthetic scenes, Wald-protocol degradation and S2WT image files

S2WT layout: b"S2WT", u32 C, u32 H, u32 W (little endian), then C*H*W
float32 little endian samples in planar C-major order.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from . import logs
from .errors import FormatError, ShapeError, UsageError
from .models import SceneSpec, is_power_of_two

IMAGE_MAGIC = b"S2WT"
HEADER_BYTES = 16
MAX_ELEMENTS = 2**31
KINDS = ("gt", "lrms", "pan")


@dataclass
class Triplet:
    gt: np.ndarray
    lrms: np.ndarray
    pan: np.ndarray
    pan_lp: np.ndarray

    @property
    def ratio(self) -> int:
        return self.pan.shape[1] // self.lrms.shape[1]


# ==================== Scene generation ====================


def _smooth_noise(rng, h, w, sigma=1.5) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    return field / (np.abs(field).max() + 1e-12)


def _polygon_mask(rng, h, w) -> np.ndarray:
    """Axis aligned rectangle or random triangle"""
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        y0, x0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
        y1 = rng.integers(y0 + max(2, h // 8), h + 1)
        x1 = rng.integers(x0 + max(2, w // 8), w + 1)
        return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
    pts = rng.uniform(0, [h, w], size=(3, 2))
    signs = []
    for k in range(3):
        (ay, ax), (by, bx) = pts[k], pts[(k + 1) % 3]
        signs.append((bx - ax) * (yy - ay) - (by - ay) * (xx - ax) >= 0)
    inside = (signs[0] == signs[1]) & (signs[1] == signs[2])
    if inside.sum() < 4:
        return (yy >= h // 4) & (yy < 3 * h // 4) & (xx >= w // 4) & (xx < 3 * w // 4)
    return inside


def generate_scene(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    c, size = spec.bands, spec.size
    corr = spec.band_correlation
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)

    shared_ramp = rng.uniform(-0.3, 0.3) * yy + rng.uniform(-0.3, 0.3) * xx
    shared_texture = _smooth_noise(rng, size, size)
    scene = np.empty((c, size, size))
    for b in range(c):
        own_ramp = rng.uniform(-0.3, 0.3) * yy + rng.uniform(-0.3, 0.3) * xx
        own_texture = _smooth_noise(rng, size, size)
        ramp = corr * shared_ramp + (1.0 - corr) * own_ramp
        texture = corr * shared_texture + (1.0 - corr) * own_texture
        scene[b] = 0.45 + rng.uniform(-0.1, 0.1) + ramp + spec.texture_weight * texture

    for _ in range(spec.polygons):
        mask = _polygon_mask(rng, size, size)
        step = rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.35)
        signature = step * (corr + (1.0 - corr) * rng.uniform(0.5, 1.5, size=c))
        scene += signature[:, None, None] * mask[None]

    lo, hi = spec.value_range
    return np.clip(scene, lo, hi)


def generate_scenes(spec: SceneSpec) -> List[np.ndarray]:
    """Deterministic list of c x size x size ground truth scenes"""
    rng = np.random.default_rng(spec.seed)
    return [generate_scene(rng, spec) for _ in range(spec.count)]


# ==================== Degradation ====================


def gaussian_kernel(ratio: int) -> np.ndarray:
    """Normalized Gaussian taps, sigma = r / 2, truncated at 4 sigma"""
    sigma = ratio / 2.0
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def blur_decimate(img: np.ndarray, ratio: int) -> np.ndarray:
    """Separable Gaussian blur then keep every r-th sample starting at r // 2"""
    taps = gaussian_kernel(ratio)
    blurred = ndimage.correlate1d(img, taps, axis=1, mode="reflect")
    blurred = ndimage.correlate1d(blurred, taps, axis=2, mode="reflect")
    offset = ratio // 2
    return blurred[:, offset::ratio, offset::ratio]


def wald_degrade(gt: np.ndarray, ratio: int, pan_weights: Optional[Sequence[float]] = None) -> Triplet:
    """LRMS = blur_decimate(GT), PAN = weighted band sum of GT, PAN_lp = blur_decimate(PAN)"""
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim != 3:
        raise ShapeError(f"ground truth must be c x H x W, got {gt.shape}")
    c, h, w = gt.shape
    if ratio < 1 or not is_power_of_two(ratio):
        raise UsageError(f"ratio must be a power of two, got {ratio}")
    if h % ratio or w % ratio:
        raise ShapeError(f"{h}x{w} is not divisible by ratio {ratio}")

    if pan_weights is None:
        weights = np.full(c, 1.0 / c)
    else:
        weights = np.asarray(pan_weights, dtype=np.float64)
        if weights.shape != (c,) or np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise UsageError(f"PAN weights must be {c} positive values summing to 1")
    pan = np.tensordot(weights, gt, axes=1)[None]
    return Triplet(gt=gt, lrms=blur_decimate(gt, ratio), pan=pan, pan_lp=blur_decimate(pan, ratio))


def crop(t: Triplet, y: int, x: int, size: int) -> Triplet:
    """GT-scale crop at (y, x); offsets and size must be multiples of the ratio"""
    r = t.ratio
    if y % r or x % r or size % r:
        raise ShapeError(f"crop ({y}, {x}, {size}) not aligned to ratio {r}")
    s = size // r
    return Triplet(
        gt=t.gt[:, y:y + size, x:x + size],
        lrms=t.lrms[:, y // r:y // r + s, x // r:x // r + s],
        pan=t.pan[:, y:y + size, x:x + size],
        pan_lp=t.pan_lp[:, y // r:y // r + s, x // r:x // r + s],
    )


def random_crop(t: Triplet, size: int, rng: np.random.Generator) -> Triplet:
    r = t.ratio
    h, w = t.gt.shape[1:]
    if size >= min(h, w):
        return t
    y = int(rng.integers(0, (h - size) // r + 1)) * r
    x = int(rng.integers(0, (w - size) // r + 1)) * r
    return crop(t, y, x, size)


def center_crop(t: Triplet, size: int) -> Triplet:
    r = t.ratio
    h, w = t.gt.shape[1:]
    if size >= min(h, w):
        return t
    return crop(t, (h - size) // (2 * r) * r, (w - size) // (2 * r) * r, size)


# ==================== Files ====================


def write_image(path: Union[str, Path], img: np.ndarray) -> Path:
    img = np.asarray(img)
    if img.ndim != 3:
        raise ShapeError(f"S2WT images are C x H x W, got {img.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        np.array(img.shape, dtype="<u4").tofile(f)
        np.ascontiguousarray(img, dtype="<f4").tofile(f)
    return path


def read_image(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    raw = path.read_bytes()
    if len(raw) < HEADER_BYTES:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {IMAGE_MAGIC!r}")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype="<u4", count=3, offset=4))
    count = dims[0] * dims[1] * dims[2]
    if count == 0 or count > MAX_ELEMENTS:
        raise FormatError(f"{path}: invalid dimensions {dims}")
    expected = HEADER_BYTES + 4 * count
    if len(raw) != expected:
        raise FormatError(f"{path}: {len(raw)} bytes, expected {expected} for {dims}")
    return np.frombuffer(raw, dtype="<f4", offset=HEADER_BYTES).reshape(dims).astype(np.float32)


def triplet_paths(directory: Union[str, Path], index: int):
    directory = Path(directory)
    return {kind: directory / f"{index}.{kind}.s2wt" for kind in KINDS}


def write_split(directory: Union[str, Path], triplets: Sequence[Triplet]) -> List[Path]:
    """<split>/<index>.{gt,lrms,pan}.s2wt"""
    written = []
    for index, t in enumerate(triplets):
        for kind, path in triplet_paths(directory, index).items():
            written.append(write_image(path, getattr(t, kind)))
    return written


def load_split(directory: Union[str, Path]) -> List[Triplet]:
    """Read every triplet of a split directory; PAN_lp is derived from PAN"""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"{directory}: not a dataset split directory")
    indices = sorted(int(p.name.split(".")[0]) for p in directory.glob("*.gt.s2wt"))
    triplets = []
    for index in indices:
        paths = triplet_paths(directory, index)
        missing = [str(p) for p in paths.values() if not p.exists()]
        if missing:
            raise FormatError(f"missing counterpart file(s): {missing}")
        gt, lrms, pan = (read_image(paths[kind]).astype(np.float64) for kind in KINDS)
        if pan.shape[0] != 1 or pan.shape[1:] != gt.shape[1:]:
            raise FormatError(f"{paths['pan']}: PAN {pan.shape} does not match GT {gt.shape}")
        if lrms.shape[0] != gt.shape[0]:
            raise FormatError(f"{paths['lrms']}: LRMS has {lrms.shape[0]} bands, GT has {gt.shape[0]}")
        ratio = gt.shape[1] // lrms.shape[1]
        if ratio < 1 or (lrms.shape[1] * ratio, lrms.shape[2] * ratio) != gt.shape[1:]:
            raise FormatError(f"{paths['lrms']}: LRMS {lrms.shape} is not GT {gt.shape} at an integer ratio")
        triplets.append(Triplet(gt=gt, lrms=lrms, pan=pan, pan_lp=blur_decimate(pan, ratio)))
    logs.info(f"DATA: loaded {len(triplets)} triplets from {directory}")
    return triplets


def write_pgm(path: Union[str, Path], band: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> Path:
    """8-bit binary portable graymap preview of one H x W band"""
    band = np.asarray(band, dtype=np.float64)
    if band.ndim == 3 and band.shape[0] == 1:
        band = band[0]
    if band.ndim != 2:
        raise ShapeError(f"write_pgm expects one H x W band, got {band.shape}")
    lo = float(band.min()) if lo is None else lo
    hi = float(band.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    pixels = np.clip(np.round((band - lo) / span * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{band.shape[1]} {band.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    return path
