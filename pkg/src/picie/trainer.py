"""Alternating-optimization drivers.

``picie``: per epoch, (a) sample transform records and cluster both views
under two K-heads, (b) replay the records and train the extractor with the
balanced within+cross prototype loss.  ``mdc``: single-view alternation with
a parametric 1x1 classifier re-initialized after every clustering phase.
``no-train``: cluster the initialized extractor once and stop.

Centroids and pseudo-labels are frozen during a training phase; parameters
are frozen during a clustering phase.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import torch
from torch import nn

from picie import clustering, losses, transforms
from picie.clustering import Centroids, KMeansConfig, PseudoLabelSet
from picie.dataio import ImageSample
from picie.errors import ConfigError, DataError, NumericalError
from picie.features import ExtractorConfig, PixelFeatureExtractor, image_to_tensor
from picie.transforms import apply_geometric, apply_photometric

CHECKPOINT_VERSION = 1

METHODS = ("picie", "mdc", "no-train")


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent, reproducible rng stream addressed by (seed, *keys)."""
    digest = hashlib.sha256("/".join(map(str, keys)).encode()).digest()
    return np.random.default_rng(
        np.random.SeedSequence([seed, int.from_bytes(digest[:8], "little")])
    )


def fingerprint(payload: dict) -> str:
    """Stable hash of a JSON-serializable config mapping."""
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    method: str = "picie"
    k1: int = 27
    k2: int = 100  # overclustering head; 0 disables
    epochs: int | None = None  # None -> 10 with pretrained weights, 20 from scratch
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 16
    seed: int = 0
    deterministic: bool = False
    kmeans: KMeansConfig = dataclasses.field(default_factory=KMeansConfig)

    def resolve_epochs(self, pretrained: bool) -> int:
        if self.epochs is not None:
            return self.epochs
        return 10 if pretrained else 20

    def validate(self, pretrained: bool = False):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        # mdc tolerates the degenerate single-cluster case; picie's loss needs K >= 2
        k1_floor = 1 if self.method == "mdc" else 2
        if self.k1 < k1_floor:
            raise ConfigError(f"k1 must be >= {k1_floor} for {self.method}, got {self.k1}")
        if self.k2 == 1 or self.k2 < 0:
            raise ConfigError(f"k2 must be 0 (disabled) or >= 2, got {self.k2}")
        if self.method != "no-train" and self.resolve_epochs(pretrained) < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")


@dataclasses.dataclass
class EpochReport:
    epoch: int
    method: str
    clustering_seconds: float
    training_seconds: float
    losses: dict[str, dict[str, float]]
    cluster_sizes: dict[str, dict[str, list[int]]]

    def validate(self):
        for head in self.losses.values():
            for value in head.values():
                if not np.isfinite(value):
                    raise NumericalError(f"non-finite loss in epoch report {self.epoch}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class Checkpoint:
    method: str
    epoch: int  # epochs completed
    extractor_config: ExtractorConfig
    extractor_state: dict
    optimizer_state: dict | None
    centroids: dict[str, np.ndarray]  # "k1/view1" etc.
    config_hash: str
    rng_state: dict
    head_state: dict | None = None  # mdc classifier
    version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path):
    payload = {
        "version": ckpt.version,
        "method": ckpt.method,
        "epoch": ckpt.epoch,
        "extractor_config": dataclasses.asdict(ckpt.extractor_config),
        "extractor_state": ckpt.extractor_state,
        "optimizer_state": ckpt.optimizer_state,
        "centroids": ckpt.centroids,
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "head_state": ckpt.head_state,
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if expected_hash is not None and payload["config_hash"] != expected_hash:
        raise ConfigError(
            "checkpoint was produced by a different configuration "
            f"(stored hash {payload['config_hash'][:12]}…, expected {expected_hash[:12]}…)"
        )
    return Checkpoint(
        method=payload["method"],
        epoch=payload["epoch"],
        extractor_config=ExtractorConfig(**payload["extractor_config"]),
        extractor_state=payload["extractor_state"],
        optimizer_state=payload["optimizer_state"],
        centroids=payload["centroids"],
        config_hash=payload["config_hash"],
        rng_state=payload["rng_state"],
        head_state=payload["head_state"],
    )


def build_extractor(config: ExtractorConfig, seed: int) -> PixelFeatureExtractor:
    torch.manual_seed(int(derive_rng(seed, "init").integers(2**31)))
    return PixelFeatureExtractor(config)


def restore_extractor(ckpt: Checkpoint) -> PixelFeatureExtractor:
    extractor = PixelFeatureExtractor(ckpt.extractor_config)
    extractor.load_state_dict(ckpt.extractor_state)
    extractor.eval()
    return extractor


def k1_centroids(ckpt: Checkpoint) -> Centroids:
    """View-1 K1 centroids used by the prototype classifier at eval time."""
    if "k1/view1" not in ckpt.centroids:
        raise DataError("checkpoint carries no K1 centroids")
    return Centroids(ckpt.centroids["k1/view1"], view=1)


def _replay_views(samples, records, extractor, need_grad=True):
    """Recompute (z1, z2) feature batches from stored records, with grad."""
    dtype = next(extractor.parameters()).dtype
    stride = extractor.config.stride
    recs = [records[s.id] for s in samples]
    v1 = torch.stack(
        [
            image_to_tensor(
                apply_geometric(apply_photometric(s.image, r.photo1), r.geo, "image"),
                dtype,
            )
            for s, r in zip(samples, recs)
        ]
    )
    v2 = torch.stack(
        [
            image_to_tensor(apply_photometric(s.image, r.photo2), dtype)
            for s, r in zip(samples, recs)
        ]
    )
    z1 = extractor(v1)
    z2_full = extractor(v2)
    z2 = torch.stack(
        [
            apply_geometric(
                z2_full[i], r.geo.with_out_side(r.geo.out_side // stride), "features"
            )
            for i, r in enumerate(recs)
        ]
    )
    return z1, z2


def _label_batch(pls: PseudoLabelSet, ids, view: int) -> torch.Tensor:
    grids = [pls.entries[i].labels1 if view == 1 else pls.entries[i].labels2 for i in ids]
    return torch.from_numpy(np.stack(grids)).long()


def _rng_state(seed: int) -> dict:
    return {"seed": seed, "torch": torch.get_rng_state()}


def _heads(cfg: TrainConfig):
    heads = [("k1", cfg.k1)]
    if cfg.k2:
        heads.append(("k2", cfg.k2))
    return heads


def _head_weights(cfg: TrainConfig):
    if cfg.k2:
        coeff = losses.balance(cfg.k1, cfg.k2)
        return {"k1": coeff.lam_k1, "k2": coeff.lam_k2}
    return {"k1": 1.0}


def _cluster_heads(samples, extractor, cfg, epoch, run_dir=None):
    """Clustering phase: fresh records, shared features, one pass per head."""
    side = samples[0].image.shape[0]
    rec_rng = derive_rng(cfg.seed, "records", epoch)
    records = {s.id: transforms.sample_record(rec_rng, side) for s in samples}
    feats = clustering.compute_view_features(samples, extractor, records)
    sets: dict[str, PseudoLabelSet] = {}
    for idx, (name, k) in enumerate(_heads(cfg)):
        sets[name] = clustering.cluster_two_views(
            samples,
            extractor,
            k,
            derive_rng(cfg.seed, "kmeans", epoch, idx),
            records=records,
            config=cfg.kmeans,
            epoch=epoch,
            features=feats,
        )
        if run_dir is not None:
            clustering.save_pseudo_labels(
                sets[name], Path(run_dir) / f"pseudo_{name}_epoch{epoch:03d}.plb"
            )
    return records, sets


def _epoch_sizes(sets: dict[str, PseudoLabelSet]):
    return {
        name: {
            "view1": pls.label_counts(1).tolist(),
            "view2": pls.label_counts(2).tolist(),
        }
        for name, pls in sets.items()
    }


def train(
    samples: list[ImageSample],
    extractor_config: ExtractorConfig,
    cfg: TrainConfig,
    run_dir=None,
    config_hash: str | None = None,
    resume=None,
) -> tuple[Checkpoint, list[EpochReport]]:
    """Run the configured method and return the final checkpoint plus one
    report per epoch."""
    if not samples:
        raise DataError("training requires a non-empty dataset")
    pretrained = bool(extractor_config.weights)
    cfg.validate(pretrained)
    extractor_config.validate()
    if config_hash is None:
        config_hash = fingerprint(
            {
                "extractor": dataclasses.asdict(extractor_config),
                "train": dataclasses.asdict(cfg),
            }
        )
    old_threads = torch.get_num_threads()
    if cfg.deterministic:
        torch.set_num_threads(1)
    try:
        if cfg.method == "picie":
            return _train_picie(samples, extractor_config, cfg, run_dir, config_hash, resume)
        if cfg.method == "mdc":
            return _train_mdc(samples, extractor_config, cfg, run_dir, config_hash, resume)
        return _no_train(samples, extractor_config, cfg, config_hash)
    finally:
        if cfg.deterministic:
            torch.set_num_threads(old_threads)


def _train_picie(samples, extractor_config, cfg, run_dir, config_hash, resume):
    epochs = cfg.resolve_epochs(bool(extractor_config.weights))
    extractor = build_extractor(extractor_config, cfg.seed)
    optimizer = torch.optim.Adam(
        extractor.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    start_epoch = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume, config_hash)
        extractor.load_state_dict(ckpt.extractor_state)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        start_epoch = ckpt.epoch
    if start_epoch >= epochs:
        raise ConfigError(
            f"nothing to resume: checkpoint already at epoch {start_epoch} of {epochs}"
        )
    lam = _head_weights(cfg)
    reports: list[EpochReport] = []
    sets: dict[str, PseudoLabelSet] = {}
    for epoch in range(start_epoch + 1, epochs + 1):
        t0 = time.perf_counter()
        records, sets = _cluster_heads(samples, extractor, cfg, epoch, run_dir)
        weights = {
            name: {
                view: losses.cluster_size_weights(pls.label_counts(view))
                for view in (1, 2)
            }
            for name, pls in sets.items()
        }
        t1 = time.perf_counter()

        extractor.train()
        order = derive_rng(cfg.seed, "order", epoch).permutation(len(samples))
        sums = {name: {"within": 0.0, "cross": 0.0, "total": 0.0} for name in sets}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start : start + cfg.batch_size]]
            chunk_ids = [s.id for s in chunk]
            z1, z2 = _replay_views(chunk, records, extractor)
            combined = None
            for name, pls in sets.items():
                y1 = _label_batch(pls, chunk_ids, 1)
                y2 = _label_batch(pls, chunk_ids, 2)
                try:
                    lw, lx = losses.within_and_cross(
                        z1, z2, y1, y2,
                        pls.centroids1, pls.centroids2,
                        weights[name][1], weights[name][2],
                    )
                    lt = losses.total_loss(lw, lx)
                except NumericalError as exc:
                    raise NumericalError(str(exc), tuple(chunk_ids)) from exc
                sums[name]["within"] += float(lw.detach())
                sums[name]["cross"] += float(lx.detach())
                sums[name]["total"] += float(lt.detach())
                term = lam[name] * lt
                combined = term if combined is None else combined + term
            optimizer.zero_grad()
            combined.backward()
            optimizer.step()
            n_batches += 1
        t2 = time.perf_counter()

        report = EpochReport(
            epoch=epoch,
            method="picie",
            clustering_seconds=t1 - t0,
            training_seconds=t2 - t1,
            losses={
                name: {key: val / n_batches for key, val in vals.items()}
                for name, vals in sums.items()
            },
            cluster_sizes=_epoch_sizes(sets),
        )
        report.validate()
        reports.append(report)

    centroids = {}
    for name, pls in sets.items():
        centroids[f"{name}/view1"] = pls.centroids1.matrix
        centroids[f"{name}/view2"] = pls.centroids2.matrix
    checkpoint = Checkpoint(
        method="picie",
        epoch=epochs,
        extractor_config=extractor_config,
        extractor_state=extractor.state_dict(),
        optimizer_state=optimizer.state_dict(),
        centroids=centroids,
        config_hash=config_hash,
        rng_state=_rng_state(cfg.seed),
    )
    return checkpoint, reports


def _train_mdc(samples, extractor_config, cfg, run_dir, config_hash, resume):
    epochs = cfg.resolve_epochs(bool(extractor_config.weights))
    extractor = build_extractor(extractor_config, cfg.seed)
    optimizer = torch.optim.Adam(
        extractor.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    start_epoch = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume, config_hash)
        extractor.load_state_dict(ckpt.extractor_state)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        start_epoch = ckpt.epoch
    if start_epoch >= epochs:
        raise ConfigError(
            f"nothing to resume: checkpoint already at epoch {start_epoch} of {epochs}"
        )
    side = samples[0].image.shape[0]
    reports: list[EpochReport] = []
    cents = None
    for epoch in range(start_epoch + 1, epochs + 1):
        t0 = time.perf_counter()
        rec_rng = derive_rng(cfg.seed, "records", epoch)
        records = {s.id: transforms.sample_record(rec_rng, side) for s in samples}
        feats = clustering.compute_view_features(
            samples, extractor, records, two_views=False
        )
        cents, grids = clustering.cluster_pixels(
            [feats[s.id][0] for s in samples],
            cfg.k1,
            derive_rng(cfg.seed, "kmeans", epoch, 0),
            cfg.kmeans,
        )
        labels = {s.id: g for s, g in zip(samples, grids)}
        counts = np.zeros(cfg.k1, dtype=np.int64)
        for g in grids:
            counts += np.bincount(g.ravel(), minlength=cfg.k1)
        weights = losses.cluster_size_weights(counts)
        t1 = time.perf_counter()

        # fresh classifier every epoch: cluster ids carry no meaning across epochs
        torch.manual_seed(int(derive_rng(cfg.seed, "head", epoch).integers(2**31)))
        head = nn.Conv2d(extractor_config.dim, cfg.k1, 1)
        head_opt = torch.optim.Adam(
            head.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
        )
        extractor.train()
        order = derive_rng(cfg.seed, "order", epoch).permutation(len(samples))
        ce_sum, n_batches = 0.0, 0
        dtype = next(extractor.parameters()).dtype
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start : start + cfg.batch_size]]
            chunk_ids = [s.id for s in chunk]
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
            logits = head(z1)
            flat = logits.permute(0, 2, 3, 1).reshape(-1, cfg.k1)
            y = torch.from_numpy(np.stack([labels[i] for i in chunk_ids])).long().reshape(-1)
            try:
                loss = losses.parametric_ce(flat, y, weights).mean()
            except NumericalError as exc:
                raise NumericalError(str(exc), tuple(chunk_ids)) from exc
            if not torch.isfinite(loss):
                raise NumericalError("non-finite training loss", tuple(chunk_ids))
            optimizer.zero_grad()
            head_opt.zero_grad()
            loss.backward()
            optimizer.step()
            head_opt.step()
            ce_sum += float(loss.detach())
            n_batches += 1
        t2 = time.perf_counter()
        report = EpochReport(
            epoch=epoch,
            method="mdc",
            clustering_seconds=t1 - t0,
            training_seconds=t2 - t1,
            losses={"k1": {"ce": ce_sum / n_batches}},
            cluster_sizes={"k1": {"view1": counts.tolist(), "view2": counts.tolist()}},
        )
        report.validate()
        reports.append(report)

    checkpoint = Checkpoint(
        method="mdc",
        epoch=epochs,
        extractor_config=extractor_config,
        extractor_state=extractor.state_dict(),
        optimizer_state=optimizer.state_dict(),
        centroids={"k1/view1": cents, "k1/view2": cents},
        config_hash=config_hash,
        rng_state=_rng_state(cfg.seed),
        head_state=head.state_dict(),
    )
    return checkpoint, reports


def _no_train(samples, extractor_config, cfg, config_hash):
    """Table-1-style baseline: cluster the freshly initialized extractor
    once (no transforms, single view) and evaluate with those centroids."""
    extractor = build_extractor(extractor_config, cfg.seed)
    side = samples[0].image.shape[0]
    records = {s.id: transforms.identity_record(side) for s in samples}
    t0 = time.perf_counter()
    feats = clustering.compute_view_features(samples, extractor, records, two_views=False)
    cents, grids = clustering.cluster_pixels(
        [feats[s.id][0] for s in samples],
        cfg.k1,
        derive_rng(cfg.seed, "kmeans", 0, 0),
        cfg.kmeans,
    )
    t1 = time.perf_counter()
    counts = np.zeros(cfg.k1, dtype=np.int64)
    for g in grids:
        counts += np.bincount(g.ravel(), minlength=cfg.k1)
    report = EpochReport(
        epoch=0,
        method="no-train",
        clustering_seconds=t1 - t0,
        training_seconds=0.0,
        losses={},
        cluster_sizes={"k1": {"view1": counts.tolist(), "view2": counts.tolist()}},
    )
    checkpoint = Checkpoint(
        method="no-train",
        epoch=0,
        extractor_config=extractor_config,
        extractor_state=extractor.state_dict(),
        optimizer_state=None,
        centroids={"k1/view1": cents, "k1/view2": cents},
        config_hash=config_hash,
        rng_state=_rng_state(cfg.seed),
    )
    return checkpoint, [report]
