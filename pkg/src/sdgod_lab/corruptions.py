"""Seeded 15-type x 5-severity corruption suite and the training-time augmentation.

Images are (H, W, 3) float64 arrays in [0, 1].  Every corruption is geometry
preserving, so annotations transfer unchanged.  Within one corruption type the
random fields depend only on the seed, not on the severity, so severities are
nested perturbations of the same draw.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from .structures import DetectionSample, check_image


class CorruptionType(str, enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    DEFOCUS_BLUR = "defocus_blur"
    GLASS_BLUR = "glass_blur"
    MOTION_BLUR = "motion_blur"
    ZOOM_BLUR = "zoom_blur"
    SNOW = "snow"
    FROST = "frost"
    FOG = "fog"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    ELASTIC_TRANSFORM = "elastic_transform"
    PIXELATE = "pixelate"
    JPEG_COMPRESSION = "jpeg_compression"

    @property
    def group(self) -> str:
        return next(g for g, members in GROUPS.items() if self in members)

    @property
    def index(self) -> int:
        return list(CorruptionType).index(self)


C = CorruptionType
GROUPS = {
    "noise": (C.GAUSSIAN_NOISE, C.SHOT_NOISE, C.IMPULSE_NOISE),
    "blur": (C.DEFOCUS_BLUR, C.GLASS_BLUR, C.MOTION_BLUR, C.ZOOM_BLUR),
    "weather": (C.SNOW, C.FROST, C.FOG, C.BRIGHTNESS),
    "digital": (C.CONTRAST, C.ELASTIC_TRANSFORM, C.PIXELATE, C.JPEG_COMPRESSION),
}
SEVERITIES = (1, 2, 3, 4, 5)

# One entry per severity 1..5, tuned for 64x64 images.
DEFAULT_SCHEDULE = {
    C.GAUSSIAN_NOISE: [0.04, 0.08, 0.12, 0.18, 0.26],           # sigma
    C.SHOT_NOISE: [60, 25, 12, 5, 3],                          # photons per unit intensity
    C.IMPULSE_NOISE: [0.03, 0.06, 0.09, 0.17, 0.27],           # corrupted fraction
    C.DEFOCUS_BLUR: [1.0, 1.5, 2.0, 2.5, 3.0],                 # disk radius, px
    C.GLASS_BLUR: [(0.5, 1, 1), (0.6, 1, 2), (0.7, 2, 1), (0.8, 2, 2), (1.0, 3, 2)],  # sigma, radius, passes
    C.MOTION_BLUR: [3, 5, 7, 9, 11],                           # kernel length, px
    C.ZOOM_BLUR: [0.06, 0.11, 0.16, 0.21, 0.26],               # max extra zoom
    C.SNOW: [(0.004, 0.95), (0.008, 0.9), (0.012, 0.85), (0.018, 0.8), (0.025, 0.75)],  # flake density, image weight
    C.FROST: [(0.70, 0.50), (0.60, 0.60), (0.50, 0.70), (0.40, 0.75), (0.30, 0.80)],  # mask threshold, opacity
    C.FOG: [0.2, 0.35, 0.5, 0.65, 0.8],                        # haze opacity
    C.BRIGHTNESS: [0.05, 0.1, 0.15, 0.2, 0.3],                 # HSV value shift
    C.CONTRAST: [0.4, 0.3, 0.2, 0.1, 0.05],                    # contrast factor
    C.ELASTIC_TRANSFORM: [0.4, 0.75, 1.1, 1.45, 1.8],          # max displacement, px
    # each tile shape refines the next, so the error cannot shrink with severity
    C.PIXELATE: [(2, 2), (2, 4), (4, 4), (4, 8), (8, 8)],      # tile rows, cols
    C.JPEG_COMPRESSION: [25, 18, 15, 10, 7],                   # quality
}


def parse_corruption(name) -> CorruptionType:
    try:
        return CorruptionType(name)
    except ValueError:
        raise ValueError(f"unknown corruption {name!r}") from None


def check_severity(s: int) -> int:
    if int(s) != s or not 1 <= s <= 5:
        raise ValueError(f"severity must be an integer in [1, 5], got {s!r}")
    return int(s)


# ------------------------------------------------------------------ primitives


def value_noise(shape, rng, octaves=4, base=4):
    """Multi-octave value noise normalized to [0, 1]."""
    h, w = shape
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = base * 2 ** o
        grid = rng.uniform(size=(cells + 1, cells + 1))
        ys = np.linspace(0, cells, h)
        xs = np.linspace(0, cells, w)
        out += amp * ndimage.map_coordinates(grid, np.meshgrid(ys, xs, indexing="ij"), order=1)
        total += amp
        amp *= 0.5
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def _convolve(img, kernel):
    kernel = kernel / kernel.sum()
    return np.stack([ndimage.convolve(img[..., c], kernel, mode="reflect") for c in range(3)], axis=-1)


def disk_kernel(radius):
    r = int(np.ceil(radius))
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = (x * x + y * y <= radius * radius).astype(np.float64)
    return k / k.sum()


def line_kernel(length, angle):
    """Normalized 1-D box kernel of ``length`` px rotated by ``angle`` radians."""
    half = (length - 1) / 2
    size = int(np.ceil(half)) * 2 + 1
    k = np.zeros((size, size))
    c = size // 2
    for t in np.linspace(-half, half, 4 * length):
        x, y = c + t * np.cos(angle), c + t * np.sin(angle)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                            (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
            if 0 <= y0 + dy < size and 0 <= x0 + dx < size:
                k[y0 + dy, x0 + dx] += wgt
    return k / k.sum()


def _rgb_to_ycbcr(x):
    m = np.array([[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]])
    y = x @ m.T
    y[..., 1:] += 128.0
    return y


def _ycbcr_to_rgb(y):
    y = y.copy()
    y[..., 1:] -= 128.0
    m = np.array([[1.0, 0.0, 1.402], [1.0, -0.344136, -0.714136], [1.0, 1.772, 0.0]])
    return y @ m.T


_Q_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61], [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56], [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77], [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101], [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)
_Q_CHROMA = np.full((8, 8), 99.0)
_Q_CHROMA[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]


def _quality_table(base, quality):
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


# ---------------------------------------------------------------- corruptions


def gaussian_noise(x, rng, sigma):
    return x + sigma * rng.normal(size=x.shape)


def shot_noise(x, rng, lam):
    return rng.poisson(x * lam) / lam


def impulse_noise(x, rng, amount):
    u = rng.uniform(size=x.shape)
    salt = rng.uniform(size=x.shape) < 0.5
    return np.where(u < amount, np.where(salt, 1.0, 0.0), x)


def defocus_blur(x, rng, radius):
    return _convolve(x, disk_kernel(radius))


def glass_blur(x, rng, params):
    sigma, radius, passes = params
    h, w, _ = x.shape
    out = ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), mode="reflect")
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(passes):
        # unit displacement draws scaled by the radius
        d = rng.uniform(-1, 1, size=(2, h, w))
        dy = np.clip(yy + np.rint(d[0] * radius).astype(int), 0, h - 1)
        dx = np.clip(xx + np.rint(d[1] * radius).astype(int), 0, w - 1)
        out = out[dy, dx]
    return ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0), mode="reflect")


def motion_blur(x, rng, length):
    angle = rng.uniform(-np.pi / 4, np.pi / 4)
    return _convolve(x, line_kernel(length, angle))


def zoom_blur(x, rng, max_zoom):
    h, w, _ = x.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    acc = x.copy()
    zooms = np.linspace(0, max_zoom, 6)[1:]
    for z in zooms:
        f = 1.0 + z
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        coords = [cy + (yy - cy) / f, cx + (xx - cx) / f]
        acc += np.stack([ndimage.map_coordinates(x[..., c], coords, order=1, mode="nearest")
                         for c in range(3)], axis=-1)
    return acc / (len(zooms) + 1)


def snow(x, rng, params):
    density, keep = params
    h, w, _ = x.shape
    gray = x.mean(axis=-1, keepdims=True)
    base = keep * x + (1 - keep) * np.maximum(x, gray * 1.5 + 0.5)
    u = rng.uniform(size=(h, w))
    level = rng.uniform(0.7, 1.0, size=(h, w))
    flakes = np.where(u < density, level, 0.0)
    flakes = ndimage.convolve(flakes, line_kernel(4, rng.uniform(np.pi / 3, 2 * np.pi / 3)) * 2, mode="reflect")
    return base + flakes[..., None]


def frost(x, rng, params):
    thr, opacity = params
    h, w, _ = x.shape
    n = value_noise((h, w), rng, octaves=5, base=8)
    crystals = value_noise((h, w), rng, octaves=2, base=16)
    alpha = opacity * np.clip((n - thr) / (1 - thr), 0, 1) * (0.6 + 0.4 * crystals)
    ice = np.array([0.85, 0.92, 1.0])
    return (1 - alpha[..., None]) * x + alpha[..., None] * ice


def fog(x, rng, opacity):
    h, w, _ = x.shape
    f = 0.5 + 0.5 * value_noise((h, w), rng, octaves=4, base=2)
    alpha = (opacity * f)[..., None]
    return (1 - alpha) * x + alpha * 0.8


def brightness(x, rng, shift):
    v = x.max(axis=-1, keepdims=True)
    v_new = np.minimum(v + shift, 1.0)
    scaled = x * (v_new / np.where(v > 0, v, 1.0))
    return np.where(v > 0, scaled, v_new)


def contrast(x, rng, factor):
    m = x.mean()
    return (x - m) * factor + m


def elastic_transform(x, rng, max_disp):
    h, w, _ = x.shape
    field = ndimage.gaussian_filter(rng.normal(size=(2, h, w)), sigma=(0, 4, 4), mode="reflect")
    mag = np.sqrt((field ** 2).sum(axis=0)).max()
    field *= max_disp / mag if mag > 0 else 0.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy + field[0], xx + field[1]]
    return np.stack([ndimage.map_coordinates(x[..., c], coords, order=1, mode="reflect")
                     for c in range(3)], axis=-1)


def pixelate(x, rng, tile):
    """Replace each (rows, cols) tile, partial at the far edges, by its mean."""
    th, tw = tile
    h, w, _ = x.shape
    ys, xs = np.arange(0, h, th), np.arange(0, w, tw)
    sums = np.add.reduceat(np.add.reduceat(x, ys, axis=0), xs, axis=1)
    counts = np.outer(np.diff(np.append(ys, h)), np.diff(np.append(xs, w)))[..., None]
    return (sums / counts)[np.arange(h) // th][:, np.arange(w) // tw]


def jpeg_compression(x, rng, quality):
    """8x8 block DCT, quality-scaled quantization, inverse DCT (no entropy coding)."""
    h, w, _ = x.shape
    ph, pw = -h % 8, -w % 8
    y = _rgb_to_ycbcr(np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="edge") * 255.0) - 128.0
    H, W = y.shape[:2]
    blocks = y.reshape(H // 8, 8, W // 8, 8, 3).transpose(0, 2, 4, 1, 3)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    q = np.stack([_quality_table(_Q_LUMA, quality)] + [_quality_table(_Q_CHROMA, quality)] * 2)
    coef = np.round(coef / q) * q
    rec = idctn(coef, axes=(-2, -1), norm="ortho").transpose(0, 3, 1, 4, 2).reshape(H, W, 3)
    return (_ycbcr_to_rgb(rec + 128.0) / 255.0)[:h, :w]


_FUNCS = {
    C.GAUSSIAN_NOISE: gaussian_noise, C.SHOT_NOISE: shot_noise, C.IMPULSE_NOISE: impulse_noise,
    C.DEFOCUS_BLUR: defocus_blur, C.GLASS_BLUR: glass_blur, C.MOTION_BLUR: motion_blur,
    C.ZOOM_BLUR: zoom_blur, C.SNOW: snow, C.FROST: frost, C.FOG: fog, C.BRIGHTNESS: brightness,
    C.CONTRAST: contrast, C.ELASTIC_TRANSFORM: elastic_transform, C.PIXELATE: pixelate,
    C.JPEG_COMPRESSION: jpeg_compression,
}


def corruption_rng(corruption: CorruptionType, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, corruption.index])


def apply_corruption(img, corruption, severity, seed, schedule=None):
    """Corrupt ``img`` deterministically; ``schedule`` overrides the per-severity parameter table."""
    c = parse_corruption(corruption)
    s = check_severity(severity)
    x = check_image(img)
    table = (schedule or DEFAULT_SCHEDULE)[c]
    out = _FUNCS[c](x, corruption_rng(c, seed), table[s - 1])
    return np.clip(out, 0.0, 1.0)


def corrupt_dataset(ds, corruption, severity, seed, schedule=None):
    if not ds:
        raise ValueError("cannot corrupt an empty dataset")
    return [sample.with_image(apply_corruption(sample.image, corruption, severity, int(seed) ^ i, schedule))
            for i, sample in enumerate(ds)]


# --------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    gain: float = 0.3          # per-channel gain drawn from [1 - gain, 1 + gain]
    bias: float = 0.1          # per-channel bias drawn from [-bias, bias]
    hue: float = 0.6           # max rotation about the gray axis, radians
    freq_gain: float = 2.5     # radial band gains log-uniform in [1/g, g]
    n_bands: int = 4

    @classmethod
    def identity(cls):
        return cls(gain=0.0, bias=0.0, hue=0.0, freq_gain=1.0)


def hue_rotation(theta):
    """Rotation about the (1, 1, 1) gray axis (Rodrigues)."""
    k = np.ones(3) / np.sqrt(3)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def color_transform(x, gains, biases, theta):
    return (x * gains + biases) @ hue_rotation(theta).T


def radial_bands(h, w, n_bands):
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    r = np.sqrt(fy ** 2 + fx ** 2) / np.sqrt(0.5)
    return np.minimum((r * n_bands).astype(int), n_bands - 1)


def frequency_transform(x, band_gains):
    """Rescale the amplitude spectrum per radial band; phase and DC are kept."""
    h, w, _ = x.shape
    band_gains = np.asarray(band_gains, dtype=np.float64)
    g = band_gains[radial_bands(h, w, len(band_gains))]
    g[0, 0] = 1.0
    spectrum = np.fft.fft2(x, axes=(0, 1))
    return np.real(np.fft.ifft2(spectrum * g[..., None], axes=(0, 1)))


def augment_train(img, seed, cfg: AugmentConfig | None = None):
    cfg = cfg or AugmentConfig()
    x = check_image(img)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0xA06])
    gains = rng.uniform(1 - cfg.gain, 1 + cfg.gain, size=3)
    biases = rng.uniform(-cfg.bias, cfg.bias, size=3)
    theta = rng.uniform(-cfg.hue, cfg.hue)
    lg = np.log(cfg.freq_gain)
    band_gains = np.exp(rng.uniform(-lg, lg, size=cfg.n_bands))
    x = color_transform(x, gains, biases, theta)
    if cfg.freq_gain != 1.0:
        x = frequency_transform(x, band_gains)
    return np.clip(x, 0.0, 1.0)


# ------------------------------------------------------------------------ I/O


def to_uint8(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def save_png(path, img):
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_png(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_suite(ds, out_dir, seed, corruptions=None, severities=SEVERITIES, schedule=None):
    """Write ``<out>/<corruption>/<severity>/<image-id>.png`` plus ``manifest.json``."""
    out_dir = Path(out_dir)
    corruptions = [parse_corruption(c) for c in (corruptions or list(CorruptionType))]
    manifest = {"seed": int(seed), "images": [int(s.image_id) for s in ds],
                "sample_seeds": {str(s.image_id): int(seed) ^ i for i, s in enumerate(ds)},
                "cells": []}
    for c in corruptions:
        for sev in severities:
            cell = out_dir / c.value / str(sev)
            cell.mkdir(parents=True, exist_ok=True)
            for sample in corrupt_dataset(ds, c, sev, seed, schedule):
                save_png(cell / f"{sample.image_id}.png", sample.image)
            manifest["cells"].append({"corruption": c.value, "severity": sev})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def read_suite_cell(suite_dir, corruption, severity, template):
    """Load one suite cell, re-attaching annotations from the clean ``template`` samples."""
    cell = Path(suite_dir) / parse_corruption(corruption).value / str(check_severity(severity))
    return [s.with_image(load_png(cell / f"{s.image_id}.png")) for s in template]
