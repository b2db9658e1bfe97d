"""Replayable photometric and geometric augmentations.

Every transform is materialized into a parameter record when sampled, and
applying a record is a pure function of (input, record).  This is what lets
the clustering phase and the training phase of an epoch see bit-identical
augmentations: records are sampled once, stored, and replayed.

A record holds two photometric parameter sets (one per view) and a single
geometric transform shared by both views.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from scipy import ndimage

from picie import resample
from picie.errors import ConfigError

JITTER_PROB = 0.8
BRIGHTNESS_STRENGTH = 0.3
CONTRAST_STRENGTH = 0.3
SATURATION_STRENGTH = 0.3
HUE_STRENGTH = 0.1
GRAYSCALE_PROB = 0.2
BLUR_PROB = 0.5
BLUR_SIGMA_RANGE = (0.1, 2.0)
CROP_FACTOR_RANGE = (0.5, 1.0)
FLIP_PROB = 0.5

LUMA = np.array([0.299, 0.587, 0.114])

RECORD_SIZE = 21  # 2 * 8 photometric values + 5 geometric values


@dataclasses.dataclass(frozen=True)
class PhotometricParams:
    jitter_active: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    grayscale_active: bool = False
    blur_active: bool = False
    blur_sigma: float = BLUR_SIGMA_RANGE[0]

    def validate(self):
        for name, val, strength in (
            ("brightness", self.brightness, BRIGHTNESS_STRENGTH),
            ("contrast", self.contrast, CONTRAST_STRENGTH),
            ("saturation", self.saturation, SATURATION_STRENGTH),
        ):
            if not 1 - strength <= val <= 1 + strength:
                raise ConfigError(f"{name} factor {val} outside ±{strength} around 1")
        if not -HUE_STRENGTH <= self.hue <= HUE_STRENGTH:
            raise ConfigError(f"hue shift {self.hue} outside ±{HUE_STRENGTH}")
        if self.blur_active and not (
            BLUR_SIGMA_RANGE[0] <= self.blur_sigma <= BLUR_SIGMA_RANGE[1]
        ):
            raise ConfigError(f"blur sigma {self.blur_sigma} outside {BLUR_SIGMA_RANGE}")


@dataclasses.dataclass(frozen=True)
class GeometricParams:
    flip: bool = False
    crop_factor: float = 1.0  # square crop of side crop_factor * min(H, W)
    center_x: float = 0.5  # normalized crop-box center
    center_y: float = 0.5
    out_side: int = 320

    def validate(self):
        lo, hi = CROP_FACTOR_RANGE
        if not lo <= self.crop_factor <= hi:
            raise ConfigError(f"crop factor {self.crop_factor} outside [{lo}, {hi}]")
        half = self.crop_factor / 2
        for c in (self.center_x, self.center_y):
            if not half - 1e-9 <= c <= 1 - half + 1e-9:
                raise ConfigError(f"crop center {c} puts the box outside the grid")
        if self.out_side < 1:
            raise ConfigError(f"out_side must be >= 1, got {self.out_side}")

    def with_out_side(self, out_side: int) -> "GeometricParams":
        """Same normalized crop on a grid at another resolution (e.g. the
        quarter-scale feature grid)."""
        return dataclasses.replace(self, out_side=out_side)


@dataclasses.dataclass(frozen=True)
class TransformRecord:
    photo1: PhotometricParams
    photo2: PhotometricParams
    geo: GeometricParams


IDENTITY_PHOTO = PhotometricParams()


def identity_record(out_side: int) -> TransformRecord:
    return TransformRecord(IDENTITY_PHOTO, IDENTITY_PHOTO, GeometricParams(out_side=out_side))


def sample_photometric(rng: np.random.Generator) -> PhotometricParams:
    jitter = bool(rng.random() < JITTER_PROB)
    brightness = contrast = saturation = 1.0
    hue = 0.0
    if jitter:
        brightness = rng.uniform(1 - BRIGHTNESS_STRENGTH, 1 + BRIGHTNESS_STRENGTH)
        contrast = rng.uniform(1 - CONTRAST_STRENGTH, 1 + CONTRAST_STRENGTH)
        saturation = rng.uniform(1 - SATURATION_STRENGTH, 1 + SATURATION_STRENGTH)
        hue = rng.uniform(-HUE_STRENGTH, HUE_STRENGTH)
    grayscale = bool(rng.random() < GRAYSCALE_PROB)
    blur = bool(rng.random() < BLUR_PROB)
    sigma = rng.uniform(*BLUR_SIGMA_RANGE) if blur else BLUR_SIGMA_RANGE[0]
    return PhotometricParams(jitter, brightness, contrast, saturation, hue, grayscale, blur, sigma)


def sample_geometric(rng: np.random.Generator, out_side: int) -> GeometricParams:
    flip = bool(rng.random() < FLIP_PROB)
    r = rng.uniform(*CROP_FACTOR_RANGE)
    cx = rng.uniform(r / 2, 1 - r / 2)
    cy = rng.uniform(r / 2, 1 - r / 2)
    return GeometricParams(flip, r, cx, cy, out_side)


def sample_record(rng: np.random.Generator, out_side: int) -> TransformRecord:
    """One photometric parameter set per view, one shared geometric transform."""
    return TransformRecord(
        photo1=sample_photometric(rng),
        photo2=sample_photometric(rng),
        geo=sample_geometric(rng, out_side),
    )


# --- color space helpers ----------------------------------------------------

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV, all channels in [0, 1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    h = np.zeros_like(maxc)
    h = np.where(maxc == r, ((g - b) / safe) % 6.0, h)
    h = np.where((maxc == g) & (maxc != r), (b - r) / safe + 2.0, h)
    h = np.where((maxc == b) & (maxc != r) & (maxc != g), (r - g) / safe + 4.0, h)
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    hp = (h % 1.0) * 6.0
    i = np.floor(hp).astype(np.int64) % 6
    f = hp - np.floor(hp)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


# --- application -------------------------------------------------------------

def apply_photometric(image: np.ndarray, p: PhotometricParams) -> np.ndarray:
    """Jitter -> grayscale -> blur on an H,W,3 image in [0, 1]; output clipped
    to [0, 1], same shape and dtype. With everything inactive this is the
    identity."""
    dtype = image.dtype
    out = image.astype(np.float64)
    if p.jitter_active:
        out = np.clip(out * p.brightness, 0.0, 1.0)
        mean = float((out @ LUMA).mean())
        out = np.clip((out - mean) * p.contrast + mean, 0.0, 1.0)
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + p.hue) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * p.saturation, 0.0, 1.0)
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    if p.grayscale_active:
        out = np.repeat((out @ LUMA)[..., None], 3, axis=-1)
    if p.blur_active:
        out = ndimage.gaussian_filter(
            out, sigma=(p.blur_sigma, p.blur_sigma, 0.0), mode="reflect"
        )
        out = np.clip(out, 0.0, 1.0)
    return out.astype(dtype)


def _crop_box(g: GeometricParams, h: int, w: int):
    side = g.crop_factor * min(h, w)
    if side < 1.0:
        raise ConfigError(f"crop box side {side:.3f} below one cell on a {h}x{w} grid")
    x0 = min(max(g.center_x * w - side / 2.0, 0.0), w - side)
    y0 = min(max(g.center_y * h - side / 2.0, 0.0), h - side)
    return y0, x0, side


def apply_geometric(grid, g: GeometricParams, kind: str, out_side: int | None = None):
    """Square crop -> resize -> horizontal flip.

    kind='image':    H,W,C numpy array, bilinear.
    kind='labels':   H,W integer numpy array, nearest neighbor.
    kind='features': D,H,W torch tensor, bilinear then per-pixel L2
                     renormalization; differentiable w.r.t. the input.
    """
    out = g.out_side if out_side is None else out_side
    if kind == "labels":
        box = _crop_box(g, grid.shape[0], grid.shape[1])
        res = resample.nearest_hw(grid, (*box[:2], box[2], box[2]), out, out)
        return np.ascontiguousarray(res[:, ::-1] if g.flip else res)
    if kind == "image":
        box = _crop_box(g, grid.shape[0], grid.shape[1])
        res = resample.bilinear_hwc(grid, (*box[:2], box[2], box[2]), out, out)
        return np.ascontiguousarray(res[:, ::-1] if g.flip else res)
    if kind == "features":
        if not isinstance(grid, torch.Tensor) or grid.dim() != 3:
            raise ConfigError("feature grids must be D,H,W torch tensors")
        box = _crop_box(g, grid.shape[1], grid.shape[2])
        res = resample.bilinear_chw(grid, (*box[:2], box[2], box[2]), out, out)
        if g.flip:
            res = torch.flip(res, dims=[-1])
        norm = torch.sqrt((res * res).sum(dim=0, keepdim=True) + 1e-12)
        return res / norm
    raise ConfigError(f"unknown grid kind {kind!r}")


# --- serialization -----------------------------------------------------------

def _photo_to_vec(p: PhotometricParams) -> list[float]:
    return [
        float(p.jitter_active), p.brightness, p.contrast, p.saturation, p.hue,
        float(p.grayscale_active), float(p.blur_active), p.blur_sigma,
    ]


def _photo_from_vec(v) -> PhotometricParams:
    return PhotometricParams(
        bool(v[0]), float(v[1]), float(v[2]), float(v[3]), float(v[4]),
        bool(v[5]), bool(v[6]), float(v[7]),
    )


def record_to_vector(rec: TransformRecord) -> np.ndarray:
    """Flat float64 vector, field order:
    photo1[jitter, brightness, contrast, saturation, hue, grayscale, blur, sigma],
    photo2[same 8], geo[flip, crop_factor, center_x, center_y, out_side]."""
    g = rec.geo
    vec = (
        _photo_to_vec(rec.photo1)
        + _photo_to_vec(rec.photo2)
        + [float(g.flip), g.crop_factor, g.center_x, g.center_y, float(g.out_side)]
    )
    return np.asarray(vec, dtype=np.float64)


def record_from_vector(vec: np.ndarray) -> TransformRecord:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (RECORD_SIZE,):
        raise ConfigError(f"transform record vector must have {RECORD_SIZE} entries")
    geo = GeometricParams(
        bool(vec[16]), float(vec[17]), float(vec[18]), float(vec[19]), int(vec[20])
    )
    return TransformRecord(_photo_from_vec(vec[0:8]), _photo_from_vec(vec[8:16]), geo)
