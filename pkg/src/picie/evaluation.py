"""Hungarian-matched metrics, partitioned evaluation, robustness under
test-time augmentation, majority-vote renderings, and pixel-feature
nearest-neighbor retrieval.

Predicted clusters are matched injectively to ground-truth classes so as to
maximize the matched pixel mass; accuracy and IoU are computed under that
matching.  Ignore-valued pixels never enter the confusion matrix.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from picie import transforms
from picie.clustering import Centroids, assign
from picie.dataio import ImageSample
from picie.errors import ConfigError, DataError
from picie.features import PixelFeatureExtractor, extract
from picie.trainer import Checkpoint, k1_centroids, restore_extractor
from picie.transforms import GeometricParams, PhotometricParams

EMPTY_CLUSTER_COLOR = (255, 0, 255)  # reserved for clusters with no pixels


@dataclasses.dataclass
class MetricsReport:
    accuracy: float
    miou: float
    per_class_iou: list[float | None]  # None: no gt and no predicted pixels
    matching: list[int]  # per predicted cluster, matched gt class or -1

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "matching": self.matching,
        }


def confusion_matrix(
    pred: np.ndarray, gt: np.ndarray, k_pred: int, k_gt: int, ignore_value: int = 255
) -> np.ndarray:
    """K_pred x K_gt pixel-count matrix; ignore pixels excluded."""
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} does not match labels {gt.shape}")
    valid = gt != ignore_value
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= k_pred):
        raise DataError(f"prediction labels outside [0, {k_pred})")
    if g.size and (g.min() < 0 or g.max() >= k_gt):
        raise DataError(f"ground-truth labels outside [0, {k_gt})")
    return np.bincount(p * k_gt + g, minlength=k_pred * k_gt).reshape(k_pred, k_gt)


def hungarian_match(cm: np.ndarray) -> np.ndarray:
    """Injective map predicted cluster -> gt class maximizing the matched
    pixel mass; -1 marks unmatched clusters (when K_pred > K_gt)."""
    cm = np.asarray(cm)
    if cm.size == 0:
        raise ConfigError("empty confusion matrix")
    rows, cols = linear_sum_assignment(cm, maximize=True)
    matching = np.full(cm.shape[0], -1, dtype=np.int64)
    matching[rows] = cols
    return matching


def matched_mass(cm: np.ndarray, matching: np.ndarray) -> int:
    return int(sum(cm[k, g] for k, g in enumerate(matching) if g >= 0))


def metrics(cm: np.ndarray, matching: np.ndarray | None = None) -> MetricsReport:
    """Pixel accuracy and per-class IoU under a (given or optimal) matching.

    IoU_c = TP / (TP + FP + FN) for each gt class; classes with neither gt
    nor matched predicted pixels are excluded from the mean.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if matching is None:
        matching = hungarian_match(cm)
    total = cm.sum()
    if total == 0:
        raise DataError("confusion matrix has no evaluated pixels")
    accuracy = matched_mass(cm, matching) / total
    k_pred, k_gt = cm.shape
    inverse = {g: k for k, g in enumerate(matching) if g >= 0}
    per_class: list[float | None] = []
    for c in range(k_gt):
        k = inverse.get(c)
        tp = int(cm[k, c]) if k is not None else 0
        fp = int(cm[k].sum()) - tp if k is not None else 0
        fn = int(cm[:, c].sum()) - tp
        denom = tp + fp + fn
        per_class.append(tp / denom if denom > 0 else None)
    present = [v for v in per_class if v is not None]
    miou = float(np.mean(present)) if present else 0.0
    return MetricsReport(
        accuracy=float(accuracy),
        miou=miou,
        per_class_iou=per_class,
        matching=matching.tolist(),
    )


def partition_metrics(
    cm: np.ndarray, partitions: dict[str, list[int]], matching: np.ndarray | None = None
) -> dict[str, MetricsReport]:
    """Metrics restricted to disjoint gt-class subsets, keeping the global
    matching (the full-K confusion matrix is partitioned by gt columns)."""
    cm = np.asarray(cm, dtype=np.int64)
    if matching is None:
        matching = hungarian_match(cm)
    seen: set[int] = set()
    for name, classes in partitions.items():
        if len(classes) == 0:
            raise ConfigError(f"partition {name!r} is empty")
        overlap = seen & set(classes)
        if overlap:
            raise ConfigError(f"partitions overlap on classes {sorted(overlap)}")
        seen |= set(classes)
    out = {}
    for name, classes in partitions.items():
        cols = list(classes)
        col_pos = {c: i for i, c in enumerate(cols)}
        sub = cm[:, cols]
        sub_matching = np.array(
            [col_pos.get(g, -1) for g in matching], dtype=np.int64
        )
        out[name] = metrics(sub, sub_matching)
    return out


def predict_labels(
    samples: list[ImageSample],
    extractor: PixelFeatureExtractor,
    centroids: Centroids,
    images: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Nearest-prototype labels per pixel, upsampled (nearest neighbor) from
    feature resolution back to image resolution."""
    stride = extractor.config.stride
    extractor.eval()
    preds = {}
    with torch.no_grad():
        for sample in samples:
            image = sample.image if images is None else images[sample.id]
            fmap = extract(extractor, image, image_id=sample.id)
            grid = assign(fmap, centroids)
            preds[sample.id] = np.kron(grid, np.ones((stride, stride), dtype=np.int32))
    return preds


def dataset_confusion(
    samples: list[ImageSample],
    preds: dict[str, np.ndarray],
    k_pred: int,
    k_gt: int,
    gts: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Accumulate confusion counts over a dataset (associative merge)."""
    cm = np.zeros((k_pred, k_gt), dtype=np.int64)
    for sample in samples:
        gt = sample.labels if gts is None else gts[sample.id]
        if gt is None:
            raise DataError(f"{sample.id}: no ground-truth labels to evaluate against")
        cm += confusion_matrix(preds[sample.id], gt, k_pred, k_gt, sample.ignore_value)
    return cm


def evaluate(
    samples: list[ImageSample],
    extractor: PixelFeatureExtractor,
    centroids: Centroids,
    n_classes: int,
) -> tuple[MetricsReport, np.ndarray]:
    preds = predict_labels(samples, extractor, centroids)
    cm = dataset_confusion(samples, preds, centroids.k, n_classes)
    return metrics(cm), cm


def evaluate_checkpoint(
    samples: list[ImageSample], ckpt: Checkpoint, n_classes: int
) -> tuple[MetricsReport, np.ndarray]:
    return evaluate(samples, restore_extractor(ckpt), k1_centroids(ckpt), n_classes)


def robustness_eval(
    samples: list[ImageSample],
    extractor: PixelFeatureExtractor,
    centroids: Centroids,
    n_classes: int,
    rng: np.random.Generator,
    photo_params: dict[str, PhotometricParams] | None = None,
    geo_params: dict[str, GeometricParams] | None = None,
) -> dict[str, MetricsReport]:
    """Test-time-augmentation conditions.

    photometric: perturb the input images, keep the labels; geometric:
    transform image and ground truth with the identical parameters. The
    clean report is included for computing degradations.
    """
    clean, _ = evaluate(samples, extractor, centroids, n_classes)

    if photo_params is None:
        photo_params = {s.id: transforms.sample_photometric(rng) for s in samples}
    photo_images = {
        s.id: transforms.apply_photometric(s.image, photo_params[s.id]) for s in samples
    }
    preds = predict_labels(samples, extractor, centroids, images=photo_images)
    cm = dataset_confusion(samples, preds, centroids.k, n_classes)
    photometric = metrics(cm)

    if geo_params is None:
        geo_params = {
            s.id: transforms.sample_geometric(rng, s.image.shape[0]) for s in samples
        }
    geo_images = {
        s.id: transforms.apply_geometric(s.image, geo_params[s.id], "image")
        for s in samples
    }
    geo_gts = {}
    for s in samples:
        if s.labels is None:
            raise DataError(f"{s.id}: no ground-truth labels to evaluate against")
        geo_gts[s.id] = transforms.apply_geometric(
            s.labels, geo_params[s.id], "labels", out_side=geo_params[s.id].out_side
        )
    preds = predict_labels(samples, extractor, centroids, images=geo_images)
    cm = dataset_confusion(samples, preds, centroids.k, n_classes, gts=geo_gts)
    geometric = metrics(cm)

    return {"clean": clean, "photometric": photometric, "geometric": geometric}


def default_palette(n: int) -> np.ndarray:
    """Deterministic n x 3 uint8 palette with well-separated hues."""
    hsv = np.stack(
        [np.arange(n) / max(n, 1), np.full(n, 0.75), np.full(n, 0.95)], axis=-1
    )
    return (transforms.hsv_to_rgb(hsv) * 255).round().astype(np.uint8)


def render_majority_vote(
    preds: dict[str, np.ndarray],
    gts: dict[str, np.ndarray],
    palette: np.ndarray,
    k_pred: int,
    ignore_value: int = 255,
) -> dict[str, np.ndarray]:
    """Paint each cluster with the color of its majority gt class over the
    whole evaluated set; ties go to the lowest class id, empty clusters get
    a reserved color."""
    k_gt = len(palette)
    cm = np.zeros((k_pred, k_gt), dtype=np.int64)
    for image_id, pred in preds.items():
        cm += confusion_matrix(pred, gts[image_id], k_pred, k_gt, ignore_value)
    colors = np.empty((k_pred, 3), dtype=np.uint8)
    for k in range(k_pred):
        if cm[k].sum() == 0:
            colors[k] = EMPTY_CLUSTER_COLOR
        else:
            colors[k] = palette[int(cm[k].argmax())]
    return {image_id: colors[pred] for image_id, pred in preds.items()}


@dataclasses.dataclass(frozen=True)
class Neighbor:
    image_id: str
    coord: tuple[int, int]  # (row, col) on the feature grid
    distance: float


@dataclasses.dataclass
class NeighborResult:
    items: list[Neighbor]
    truncated: bool = False  # k exceeded the corpus size


def nearest_neighbors(
    query_id: str,
    coord: tuple[int, int],
    samples: list[ImageSample],
    extractor: PixelFeatureExtractor,
    k: int,
    subsample_stride: int = 2,
) -> NeighborResult:
    """Top-k corpus pixels by ascending cosine distance to the query pixel
    feature, over a strided subsample of every image's feature grid; the
    query pixel itself is excluded."""
    extractor.eval()
    by_id = {s.id: s for s in samples}
    if query_id not in by_id:
        raise DataError(
            f"unknown image id {query_id!r}; available: {', '.join(sorted(by_id))}"
        )
    feats = {}
    with torch.no_grad():
        for s in samples:
            feats[s.id] = extract(extractor, s.image, image_id=s.id).values.numpy()
    d, h, w = feats[query_id].shape
    row, col = coord
    if not (0 <= row < h and 0 <= col < w):
        raise ConfigError(
            f"query coord {coord} outside the {h}x{w} feature grid"
        )
    query = feats[query_id][:, row, col]
    ids, coords, dists = [], [], []
    for s in samples:
        f = feats[s.id]
        ys = np.arange(0, f.shape[1], subsample_stride)
        xs = np.arange(0, f.shape[2], subsample_stride)
        sub = f[:, ys][:, :, xs]
        sims = np.einsum("d,dhw->hw", query, sub)
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                if s.id == query_id and (y, x) == (row, col):
                    continue
                ids.append(s.id)
                coords.append((int(y), int(x)))
                dists.append(1.0 - float(sims[i, j]))
    order = np.argsort(np.asarray(dists), kind="stable")
    truncated = k > len(order)
    top = order[: max(k, 0)]
    items = [Neighbor(ids[i], coords[i], float(dists[i])) for i in top]
    return NeighborResult(items=items, truncated=truncated)
