"""Mini-batch spherical k-means over pixel features and the two-view
clustering pass that produces an epoch's pseudo-labels.

Features are unit-norm, distance is cosine, and centroids are re-normalized
after every update, so assignments coincide with squared-Euclidean k-means
(||a - b||^2 = 2 * (1 - a.b) on unit vectors).  Centroids move only every
``update_period`` batches, from count-weighted running means accumulated
since initialization; empty clusters are re-seeded from a random member of
the currently largest cluster.
"""

from __future__ import annotations

import copy
import dataclasses
import struct

import numpy as np
import torch

from picie import kernels, transforms
from picie.dataio import ImageSample
from picie.errors import ConfigError, DataError
from picie.features import FeatureMap, PixelFeatureExtractor, image_to_tensor
from picie.transforms import TransformRecord, apply_geometric, apply_photometric

PSEUDOLABEL_MAGIC = b"PLBS"
PSEUDOLABEL_VERSION = 1


@dataclasses.dataclass(frozen=True)
class Centroids:
    """K x D prototype matrix with unit-norm rows."""

    matrix: np.ndarray
    view: int = 1

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def validate(self):
        if self.matrix.ndim != 2 or self.k < 1:
            raise ConfigError("centroid matrix must be K x D with K >= 1")
        if not np.isfinite(self.matrix).all():
            raise ConfigError("centroid matrix contains non-finite entries")
        norms = np.linalg.norm(self.matrix, axis=1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise ConfigError("centroid rows must be unit-norm within 1e-5")


@dataclasses.dataclass
class KMeansState:
    centroids: np.ndarray  # K,D float64, unit rows
    sums: np.ndarray  # K,D running sums since init
    counts: np.ndarray  # K int64 assignment counts since init
    iteration: int
    rng: np.random.Generator
    update_period: int = 20


@dataclasses.dataclass(frozen=True)
class KMeansConfig:
    init_batches: int = 50
    batch_size: int = 128
    update_period: int = 20
    passes: int = 2  # mini-batch passes over the pixel stream
    restarts: int = 4  # k-means++ restarts during initialization


@dataclasses.dataclass
class PseudoLabelEntry:
    labels1: np.ndarray  # h,w int32, view-1 assignments
    labels2: np.ndarray
    record: TransformRecord


@dataclasses.dataclass
class PseudoLabelSet:
    entries: dict[str, PseudoLabelEntry]
    centroids1: Centroids
    centroids2: Centroids
    epoch: int = 0

    @property
    def k(self) -> int:
        return self.centroids1.k

    def label_counts(self, view: int) -> np.ndarray:
        counts = np.zeros(self.k, dtype=np.int64)
        for entry in self.entries.values():
            grid = entry.labels1 if view == 1 else entry.labels2
            counts += np.bincount(grid.ravel(), minlength=self.k)
        return counts


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def objective(x: np.ndarray, centroids: np.ndarray) -> float:
    """Summed cosine distance of every row to its nearest centroid."""
    sims = x @ centroids.T
    return float(np.sum(1.0 - sims.max(axis=1)))


def assign(features, centroids: Centroids | np.ndarray):
    """Nearest-centroid labels under cosine distance, ties broken toward the
    lowest cluster index.

    Accepts a FeatureMap (returns an H',W' grid) or an N x D array
    (returns a length-N vector).
    """
    matrix = centroids.matrix if isinstance(centroids, Centroids) else centroids
    if isinstance(features, FeatureMap):
        vals = features.values.detach().to(torch.float64).numpy()
        d, h, w = vals.shape
        if d != matrix.shape[1]:
            raise ConfigError(
                f"feature dim {d} does not match centroid dim {matrix.shape[1]}"
            )
        flat = vals.reshape(d, -1).T
        return kernels.assign(np.ascontiguousarray(flat), matrix).reshape(h, w)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != matrix.shape[1]:
        raise ConfigError(
            f"expected N x {matrix.shape[1]} features, got shape {x.shape}"
        )
    return kernels.assign(x, matrix)


def _kmeans_pp_seed(pool: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = pool.shape[0]
    seeds = np.empty(k, dtype=np.int64)
    seeds[0] = rng.integers(n)
    dist = 1.0 - pool @ pool[seeds[0]]
    np.clip(dist, 0.0, None, out=dist)
    for j in range(1, k):
        total = dist.sum()
        if total <= 0:
            seeds[j] = rng.integers(n)
        else:
            seeds[j] = rng.choice(n, p=dist / total)
        cand = 1.0 - pool @ pool[seeds[j]]
        np.minimum(dist, np.clip(cand, 0.0, None), out=dist)
    return pool[seeds].copy()


def _lloyd(pool: np.ndarray, centroids: np.ndarray, rng, max_iter=100, tol=1e-10):
    for _ in range(max_iter):
        labels = kernels.assign(pool, centroids)
        new = np.empty_like(centroids)
        for j in range(centroids.shape[0]):
            members = pool[labels == j]
            if len(members) == 0:
                largest = np.bincount(labels, minlength=centroids.shape[0]).argmax()
                pick = rng.choice(np.flatnonzero(labels == largest))
                new[j] = pool[pick]
            else:
                mean = members.mean(axis=0)
                norm = np.linalg.norm(mean)
                new[j] = mean / norm if norm > 1e-12 else pool[rng.integers(len(pool))]
        move = np.abs(new - centroids).max()
        centroids = new
        if move < tol:
            break
    return centroids


def init_centroids(
    stream,
    k: int,
    rng: np.random.Generator,
    init_batches: int = 50,
    batch_size: int = 128,
    update_period: int = 20,
    restarts: int = 4,
) -> KMeansState:
    """Fit initial centroids on the first ``init_batches * batch_size``
    vectors of the stream (k-means++ seeding plus full-batch refinement,
    best of ``restarts``)."""
    if k < 1:
        raise ConfigError(f"cluster count must be >= 1, got {k}")
    target = init_batches * batch_size
    chunks, seen = [], 0
    for batch in stream:
        batch = np.asarray(batch, dtype=np.float64)
        chunks.append(batch)
        seen += len(batch)
        if seen >= target:
            break
    if not chunks:
        raise DataError("empty feature stream")
    pool = np.ascontiguousarray(np.concatenate(chunks, axis=0)[:target])
    if len(np.unique(pool, axis=0)) < k:
        raise DataError(
            f"initialization pool has fewer than {k} distinct vectors"
        )
    best, best_obj = None, np.inf
    for _ in range(max(1, restarts)):
        cents = _lloyd(pool, _kmeans_pp_seed(pool, k, rng), rng)
        obj = objective(pool, cents)
        if obj < best_obj:
            best, best_obj = cents, obj
    return KMeansState(
        centroids=np.ascontiguousarray(best),
        sums=np.zeros_like(best),
        counts=np.zeros(k, dtype=np.int64),
        iteration=0,
        rng=rng,
        update_period=update_period,
    )


def _refresh_centroids(state: KMeansState, batch: np.ndarray, labels: np.ndarray):
    k = state.centroids.shape[0]
    alive = state.counts > 0
    means = np.zeros_like(state.sums)
    means[alive] = state.sums[alive] / state.counts[alive, None]
    norms = np.linalg.norm(means, axis=1)
    ok = alive & (norms > 1e-8)
    new = state.centroids.copy()
    new[ok] = means[ok] / norms[ok, None]
    for j in np.flatnonzero(~ok):
        largest = int(state.counts.argmax())
        members = np.flatnonzero(labels == largest)
        pick = state.rng.choice(members) if len(members) else state.rng.integers(len(batch))
        seed = batch[pick]
        new[j] = seed
        state.sums[j] = seed
        state.counts[j] = 1
    state.centroids = np.ascontiguousarray(new)


def minibatch_update(state: KMeansState, batch: np.ndarray) -> KMeansState:
    """One mini-batch step: assign against the current centroids, fold the
    batch into the running means, and replace the centroids only at
    ``update_period`` boundaries."""
    batch = np.ascontiguousarray(batch, dtype=np.float64)
    labels, _ = kernels.assign_accumulate(batch, state.centroids, state.sums, state.counts)
    state.iteration += 1
    if state.iteration % state.update_period == 0:
        _refresh_centroids(state, batch, labels)
    return state


def _scaled_batching(total: int, config: KMeansConfig, k: int):
    init_batches, batch_size = config.init_batches, config.batch_size
    target = init_batches * batch_size
    if total < target:
        f = np.sqrt(total / target)
        init_batches = max(1, int(init_batches * f))
        batch_size = max(k, int(batch_size * f))
    return init_batches, batch_size


def cluster_pixels(
    per_image: list[np.ndarray],
    k: int,
    rng: np.random.Generator,
    config: KMeansConfig = KMeansConfig(),
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Mini-batch spherical k-means over a list of (h, w, D) feature grids.

    Returns (centroid matrix, per-image label grids from a final full
    assignment pass against the frozen centroids).
    """
    shapes = [z.shape[:2] for z in per_image]
    flat = np.ascontiguousarray(
        np.concatenate([z.reshape(-1, z.shape[-1]) for z in per_image]), dtype=np.float64
    )
    total = len(flat)
    init_batches, batch_size = _scaled_batching(total, config, k)

    def stream():
        for start in range(0, total, batch_size):
            yield flat[start : start + batch_size]

    state = init_centroids(
        stream(), k, rng,
        init_batches=init_batches,
        batch_size=batch_size,
        update_period=config.update_period,
        restarts=config.restarts,
    )
    for _ in range(config.passes):
        for batch in stream():
            minibatch_update(state, batch)
    labels = kernels.assign(flat, state.centroids)
    grids, offset = [], 0
    for h, w in shapes:
        grids.append(labels[offset : offset + h * w].reshape(h, w).astype(np.int32))
        offset += h * w
    return state.centroids, grids


def compute_view_features(
    samples: list[ImageSample],
    extractor: PixelFeatureExtractor,
    records: dict[str, TransformRecord],
    batch_images: int = 16,
    two_views: bool = True,
) -> dict[str, tuple[np.ndarray, np.ndarray | None]]:
    """Per-image feature grids for the two augmentation views.

    View 1 embeds the geometrically transformed image; view 2 geometrically
    transforms the feature map of the photometric-only image, so both views
    live in the same coordinate frame.  Returns (h, w, D) float32 arrays.
    """
    stride = extractor.config.stride
    was_training = extractor.training
    extractor.eval()
    dtype = next(extractor.parameters()).dtype
    out: dict[str, tuple[np.ndarray, np.ndarray | None]] = {}
    with torch.no_grad():
        for start in range(0, len(samples), batch_images):
            chunk = samples[start : start + batch_images]
            recs = [records[s.id] for s in chunk]
            v1 = torch.stack(
                [
                    image_to_tensor(
                        apply_geometric(
                            apply_photometric(s.image, r.photo1), r.geo, "image"
                        ),
                        dtype,
                    )
                    for s, r in zip(chunk, recs)
                ]
            )
            z1 = extractor(v1)
            z2 = None
            if two_views:
                v2 = torch.stack(
                    [
                        image_to_tensor(apply_photometric(s.image, r.photo2), dtype)
                        for s, r in zip(chunk, recs)
                    ]
                )
                z2 = extractor(v2)
            for i, (s, r) in enumerate(zip(chunk, recs)):
                feat_side = r.geo.out_side // stride
                g1 = z1[i].permute(1, 2, 0).to(torch.float32).numpy()
                g2 = None
                if two_views:
                    warped = apply_geometric(
                        z2[i], r.geo.with_out_side(feat_side), "features"
                    )
                    g2 = warped.permute(1, 2, 0).to(torch.float32).numpy()
                out[s.id] = (np.ascontiguousarray(g1), g2)
    if was_training:
        extractor.train()
    return out


def cluster_two_views(
    samples: list[ImageSample],
    extractor: PixelFeatureExtractor,
    k: int,
    rng: np.random.Generator,
    records: dict[str, TransformRecord] | None = None,
    config: KMeansConfig = KMeansConfig(),
    epoch: int = 0,
    share_view_rng: bool = False,
    features: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
) -> PseudoLabelSet:
    """Run two independent mini-batch k-means passes, one per view, and
    return frozen pseudo-labels plus centroids for one training epoch.

    ``share_view_rng`` gives both views an identical rng so that the
    degenerate identity-transform case yields identical clusterings.
    Precomputed ``features`` (from compute_view_features) are reused when
    given, e.g. for a second overclustering head.
    """
    if not samples:
        raise DataError("cannot cluster an empty dataset")
    if records is None:
        rec_rng = rng.spawn(1)[0]
        side = samples[0].image.shape[0]
        records = {s.id: transforms.sample_record(rec_rng, side) for s in samples}
    if features is None:
        features = compute_view_features(samples, extractor, records)
    rng1 = rng.spawn(1)[0]
    rng2 = copy.deepcopy(rng1) if share_view_rng else rng.spawn(1)[0]
    ids = [s.id for s in samples]
    try:
        c1, grids1 = cluster_pixels([features[i][0] for i in ids], k, rng1, config)
        c2, grids2 = cluster_pixels([features[i][1] for i in ids], k, rng2, config)
    except (ConfigError, DataError) as exc:
        raise type(exc)(f"two-view clustering failed over {len(ids)} images: {exc}") from exc
    entries = {
        i: PseudoLabelEntry(g1, g2, records[i])
        for i, g1, g2 in zip(ids, grids1, grids2)
    }
    return PseudoLabelSet(
        entries=entries,
        centroids1=Centroids(c1, view=1),
        centroids2=Centroids(c2, view=2),
        epoch=epoch,
    )


# --- persistence -------------------------------------------------------------
#
# Binary layout (little-endian), version 1:
#   magic "PLBS" | version u8 | epoch u32 | K u32 | D u32 | n_images u32
#   centroids view1: K*D f64 | centroids view2: K*D f64
#   per image: id_len u16 | id utf-8 | h u16 | w u16
#              labels1 h*w i32 | labels2 h*w i32 | record 21 f64

def save_pseudo_labels(pls: PseudoLabelSet, path):
    with open(path, "wb") as fh:
        k, d = pls.centroids1.matrix.shape
        fh.write(PSEUDOLABEL_MAGIC)
        fh.write(struct.pack("<BIIII", PSEUDOLABEL_VERSION, pls.epoch, k, d, len(pls.entries)))
        fh.write(pls.centroids1.matrix.astype("<f8").tobytes())
        fh.write(pls.centroids2.matrix.astype("<f8").tobytes())
        for image_id in sorted(pls.entries):
            entry = pls.entries[image_id]
            raw = image_id.encode("utf-8")
            h, w = entry.labels1.shape
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<HH", h, w))
            fh.write(entry.labels1.astype("<i4").tobytes())
            fh.write(entry.labels2.astype("<i4").tobytes())
            fh.write(transforms.record_to_vector(entry.record).astype("<f8").tobytes())


def load_pseudo_labels(path) -> PseudoLabelSet:
    with open(path, "rb") as fh:
        if fh.read(4) != PSEUDOLABEL_MAGIC:
            raise DataError(f"{path}: not a pseudo-label cache")
        version, epoch, k, d, n = struct.unpack("<BIIII", fh.read(17))
        if version != PSEUDOLABEL_VERSION:
            raise DataError(f"{path}: unsupported cache version {version}")
        c1 = np.frombuffer(fh.read(k * d * 8), dtype="<f8").reshape(k, d).copy()
        c2 = np.frombuffer(fh.read(k * d * 8), dtype="<f8").reshape(k, d).copy()
        entries = {}
        for _ in range(n):
            (id_len,) = struct.unpack("<H", fh.read(2))
            image_id = fh.read(id_len).decode("utf-8")
            h, w = struct.unpack("<HH", fh.read(4))
            l1 = np.frombuffer(fh.read(h * w * 4), dtype="<i4").reshape(h, w).copy()
            l2 = np.frombuffer(fh.read(h * w * 4), dtype="<i4").reshape(h, w).copy()
            vec = np.frombuffer(fh.read(transforms.RECORD_SIZE * 8), dtype="<f8")
            entries[image_id] = PseudoLabelEntry(l1, l2, transforms.record_from_vector(vec))
    return PseudoLabelSet(
        entries, Centroids(c1, view=1), Centroids(c2, view=2), epoch=epoch
    )
