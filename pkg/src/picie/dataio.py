"""Dataset ingestion, preprocessing, label remapping, and a synthetic
desk-scale scene generator.

Folder datasets live under ``<root>/<split>/images/*.png|jpg`` with optional
label maps ``<root>/<split>/labels/<stem>.png`` (single-channel 8-bit,
paletted or grayscale).  Preprocessing resizes the shorter side to the
manifest resolution (bilinear for images, nearest for labels) and
center-crops to a square.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from PIL import Image

from picie import resample
from picie.errors import ConfigError, DataError

IGNORE_VALUE = 255

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclasses.dataclass(frozen=True)
class ImageSample:
    """One image with optional ground-truth labels (evaluation only)."""

    id: str
    image: np.ndarray  # H,W,3 float32 in [0, 1]
    labels: np.ndarray | None = None  # H,W int32; ignore_value marks unlabeled pixels
    ignore_value: int = IGNORE_VALUE


@dataclasses.dataclass(frozen=True)
class DatasetManifest:
    root: str
    split: str = ""
    resolution: int = 320
    n_classes: int = 27
    label_remap: dict[int, int] | None = None
    ignore_value: int = IGNORE_VALUE

    def validate(self):
        if self.resolution <= 0:
            raise ConfigError(f"resolution must be positive, got {self.resolution}")
        if self.n_classes < 1:
            raise ConfigError(f"n_classes must be >= 1, got {self.n_classes}")


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    """Procedural dataset: classes differ by shape and texture, never by
    color, so per-image photometric nuisances cannot be used to solve it."""

    n_images: int = 200
    side: int = 64
    n_classes: int = 4
    shapes: tuple[str, ...] = ("disk", "rect", "band")  # vocabulary for classes 1..n-1
    min_shapes: int = 3
    max_shapes: int = 6
    brightness_range: float = 0.15  # per-image additive shift on the value channel
    hue_range: float = 1.0  # per-image hue rotation, fraction of the wheel
    tint_saturation: float = 0.35
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self):
        if self.n_images < 1 or self.side < 8:
            raise ConfigError("synthetic spec needs n_images >= 1 and side >= 8")
        if self.n_classes < 2:
            raise ConfigError("synthetic spec needs at least 2 classes")
        if self.n_classes - 1 > len(self.shapes):
            raise ConfigError(
                f"{self.n_classes} classes exceed the shape vocabulary "
                f"({len(self.shapes)} shapes for {self.n_classes - 1} figure classes)"
            )
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 0 <= min_shapes <= max_shapes")


def remap_table(label_remap: dict[int, int] | None, ignore_value: int) -> np.ndarray:
    """256-entry lookup table; unmapped ids fall to ignore_value."""
    if label_remap is None:
        return np.arange(256, dtype=np.int32)
    table = np.full(256, ignore_value, dtype=np.int32)
    for orig, merged in label_remap.items():
        if not 0 <= orig < 256:
            raise ConfigError(f"remap source id {orig} outside [0, 255]")
        table[orig] = merged
    table[ignore_value] = ignore_value
    return table


def preprocess_sample(sample: ImageSample, manifest: DatasetManifest) -> ImageSample:
    """Resize shorter side to the manifest resolution, center-crop to a
    square, and remap labels. Idempotent on already-conforming samples."""
    res = manifest.resolution
    image = sample.image
    labels = sample.labels
    h, w = image.shape[:2]
    if labels is not None and labels.shape != (h, w):
        raise DataError(
            f"{sample.id}: label map {labels.shape} does not match image ({h}, {w})"
        )
    if min(h, w) != res:
        scale = res / min(h, w)
        nh, nw = (res, round(w * scale)) if h <= w else (round(h * scale), res)
        box = (0.0, 0.0, float(h), float(w))
        image = resample.bilinear_hwc(image, box, nh, nw).astype(np.float32)
        if labels is not None:
            labels = resample.nearest_hw(labels, box, nh, nw)
        h, w = nh, nw
    top, left = (h - res) // 2, (w - res) // 2
    if (h, w) != (res, res):
        image = image[top : top + res, left : left + res]
        if labels is not None:
            labels = labels[top : top + res, left : left + res]
    if labels is not None and manifest.label_remap is not None:
        labels = remap_table(manifest.label_remap, manifest.ignore_value)[labels]
    if labels is not None:
        bad = (labels != manifest.ignore_value) & (
            (labels < 0) | (labels >= manifest.n_classes)
        )
        if bad.any():
            raise DataError(
                f"{sample.id}: labels outside [0, {manifest.n_classes}) after remap: "
                f"{sorted(np.unique(labels[bad]).tolist())}"
            )
        labels = np.ascontiguousarray(labels.astype(np.int32))
    image = np.clip(np.ascontiguousarray(image, dtype=np.float32), 0.0, 1.0)
    return ImageSample(sample.id, image, labels, manifest.ignore_value)


def _decode_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def _decode_labels(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "P", "I", "I;16"):
            img = img.convert("L")
        arr = np.asarray(img).astype(np.int32)
    if arr.ndim != 2:
        raise DataError(f"{path}: label map must be single-channel")
    return arr


def load_and_preprocess(manifest: DatasetManifest) -> list[ImageSample]:
    """Load a folder dataset, preprocess every file, return samples sorted
    by id. Per-file problems raise DataError naming the file."""
    manifest.validate()
    base = Path(manifest.root) / manifest.split if manifest.split else Path(manifest.root)
    image_dir = base / "images"
    label_dir = base / "labels"
    if not image_dir.is_dir():
        raise DataError(f"image directory not found: {image_dir}")
    paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise DataError(f"no images under {image_dir}")
    samples = []
    for path in paths:
        sid = path.stem
        try:
            image = _decode_image(path)
        except (OSError, ValueError) as exc:
            raise DataError(f"{sid}: cannot decode {path}: {exc}") from exc
        labels = None
        label_path = label_dir / f"{path.stem}.png"
        if label_path.exists():
            try:
                labels = _decode_labels(label_path)
            except (OSError, ValueError) as exc:
                raise DataError(f"{sid}: cannot decode {label_path}: {exc}") from exc
        raw = ImageSample(sid, image, labels, manifest.ignore_value)
        samples.append(preprocess_sample(raw, manifest))
    return samples


# --- synthetic generator ---------------------------------------------------

# Each class pairs a base luminance level with a patterned texture.  The
# per-image brightness shift overlaps the levels across images, so absolute
# intensity cannot identify a class; context-relative intensity can.
_PERIOD = 8
_TEXTURE_AMP = 0.05


def _class_level(cls: int, n_classes: int) -> float:
    return 0.3 + 0.5 * cls / (n_classes - 1)


def _texture(cls: int, n_classes: int, yy, xx, oy: float, ox: float):
    half = _PERIOD // 2
    if cls % 3 == 1:  # checkerboard
        q = ((yy + oy) // half + (xx + ox) // half) % 2
    elif cls % 3 == 2:  # horizontal stripes
        q = ((yy + oy) // half) % 2
    else:  # vertical stripes
        q = ((xx + ox) // half) % 2
    level = _class_level(cls, n_classes)
    return level + np.where(q == 0, -_TEXTURE_AMP, _TEXTURE_AMP)


def _paint(labels, value, mask, cls, n_classes, yy, xx, oy, ox):
    labels[mask] = cls
    value[mask] = _texture(cls, n_classes, yy, xx, oy, ox)[mask]


def _hsv_value_to_rgb(hue: float, sat: float, value: np.ndarray) -> np.ndarray:
    # scalar hue/saturation, per-pixel value
    hp = (hue % 1.0) * 6.0
    i = int(hp) % 6
    f = hp - int(hp)
    p, q, t = 1.0 - sat, 1.0 - sat * f, 1.0 - sat * (1.0 - f)
    weights = [
        (1.0, t, p), (q, 1.0, p), (p, 1.0, t),
        (p, q, 1.0), (t, p, 1.0), (1.0, p, q),
    ][i]
    return np.stack([value * wc for wc in weights], axis=-1)


def generate_synthetic(spec: SyntheticSpec) -> list[ImageSample]:
    """Deterministic given the seed; every pixel carries a ground-truth class."""
    spec.validate()
    samples = []
    for i in range(spec.n_images):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        side = spec.side
        yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
        labels = np.zeros((side, side), dtype=np.int32)
        value = np.full((side, side), _class_level(0, spec.n_classes))
        oy, ox = rng.uniform(0, _PERIOD, size=2)
        n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        for _ in range(n_shapes):
            cls = int(rng.integers(1, spec.n_classes))
            kind = spec.shapes[(cls - 1) % len(spec.shapes)]
            if kind == "disk":
                r = rng.uniform(0.16, 0.28) * side
                cy, cx = rng.uniform(r, side - r, size=2)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            elif kind == "rect":
                rh, rw = rng.uniform(0.28, 0.52, size=2) * side
                y0 = rng.uniform(0, side - rh)
                x0 = rng.uniform(0, side - rw)
                mask = (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)
            elif kind == "band":
                theta = rng.uniform(0, np.pi)
                width = rng.uniform(0.16, 0.26) * side
                proj = xx * np.cos(theta) + yy * np.sin(theta)
                offset = rng.uniform(proj.min() + width, proj.max() - width)
                mask = np.abs(proj - offset) <= width / 2
            else:
                raise ConfigError(f"unknown shape kind {kind!r}")
            _paint(labels, value, mask, cls, spec.n_classes, yy, xx, oy, ox)
        value = value + rng.normal(0.0, spec.noise_sigma, value.shape)
        # per-image nuisances: these must not help classification
        value = value + rng.uniform(-spec.brightness_range, spec.brightness_range)
        hue = rng.uniform(0.0, 1.0) * spec.hue_range
        rgb = _hsv_value_to_rgb(hue, spec.tint_saturation, np.clip(value, 0.0, 1.0))
        image = np.clip(rgb, 0.0, 1.0).astype(np.float32)
        samples.append(
            ImageSample(f"synth_{i:04d}", image, labels, IGNORE_VALUE)
        )
    return samples
