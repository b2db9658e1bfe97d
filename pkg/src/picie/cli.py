"""Command-line entry points.

Commands: train, eval, cluster, visualize, nn.  Configuration is a flat
key=value file with dotted keys, overridable by PICIE_* environment
variables (dots spelled as double underscores, e.g. PICIE_TRAIN__SEED=7)
and by repeated ``--set key=value`` flags; unknown keys are rejected.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from picie import clustering, evaluation, trainer, transforms
from picie.clustering import KMeansConfig
from picie.dataio import DatasetManifest, SyntheticSpec, generate_synthetic, load_and_preprocess
from picie.errors import ConfigError, DataError, NumericalError, PicieError
from picie.features import ExtractorConfig
from picie.trainer import TrainConfig

ENV_PREFIX = "PICIE_"

# key -> default; the default's type decides how overrides are parsed
DEFAULTS: dict[str, object] = {
    "data.kind": "synthetic",  # synthetic | folder
    "data.root": "",
    "data.split": "",
    "data.resolution": 64,
    "data.n_classes": 4,
    "data.remap": "",  # optional JSON file {original_id: merged_id}
    "data.ignore_value": 255,
    "synth.n_images": 200,
    "synth.side": 64,
    "synth.n_classes": 4,
    "synth.seed": 0,
    "synth.min_shapes": 2,
    "synth.max_shapes": 4,
    "synth.brightness_range": 0.15,
    "synth.hue_range": 1.0,
    "synth.tint_saturation": 0.35,
    "synth.noise_sigma": 0.02,
    "model.backbone": "tiny",
    "model.dim": 128,
    "model.stride": 4,
    "model.weights": "",
    "train.method": "picie",
    "train.k1": 4,
    "train.k2": 100,
    "train.epochs": 0,  # 0 -> 10 with pretrained weights, 20 from scratch
    "train.lr": 1e-3,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.weight_decay": 0.0,
    "train.batch_size": 16,
    "train.seed": 0,
    "kmeans.init_batches": 50,
    "kmeans.batch_size": 128,
    "kmeans.update_period": 20,
    "kmeans.passes": 2,
    "kmeans.restarts": 4,
    "run.out": "runs/latest",
    "run.deterministic": False,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must exit 1, not argparse's 2
        raise ConfigError(message)


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r} as {type(default).__name__}") from None


def _check_key(key: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")


def resolve_config(config_path: str | None, overrides: list[str]) -> dict:
    """defaults < config file < environment < --set overrides."""
    cfg = dict(DEFAULTS)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            _check_key(key)
            cfg[key] = _parse_value(key, raw)
    for env_key, raw in sorted(os.environ.items()):
        if not env_key.startswith(ENV_PREFIX):
            continue
        key = env_key[len(ENV_PREFIX) :].lower().replace("__", ".")
        _check_key(key)
        cfg[key] = _parse_value(key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        _check_key(key)
        cfg[key] = _parse_value(key, raw)
    return cfg


def snapshot_text(cfg: dict) -> str:
    return "".join(f"{key} = {cfg[key]}\n" for key in sorted(cfg))


def load_samples(cfg: dict):
    if cfg["data.kind"] == "synthetic":
        spec = SyntheticSpec(
            n_images=cfg["synth.n_images"],
            side=cfg["synth.side"],
            n_classes=cfg["synth.n_classes"],
            min_shapes=cfg["synth.min_shapes"],
            max_shapes=cfg["synth.max_shapes"],
            brightness_range=cfg["synth.brightness_range"],
            hue_range=cfg["synth.hue_range"],
            tint_saturation=cfg["synth.tint_saturation"],
            noise_sigma=cfg["synth.noise_sigma"],
            seed=cfg["synth.seed"],
        )
        return generate_synthetic(spec), cfg["synth.n_classes"]
    if cfg["data.kind"] == "folder":
        remap = None
        if cfg["data.remap"]:
            try:
                raw = json.loads(Path(cfg["data.remap"]).read_text())
            except FileNotFoundError:
                raise DataError(f"remap file not found: {cfg['data.remap']}") from None
            remap = {int(k): int(v) for k, v in raw.items()}
        manifest = DatasetManifest(
            root=cfg["data.root"],
            split=cfg["data.split"],
            resolution=cfg["data.resolution"],
            n_classes=cfg["data.n_classes"],
            label_remap=remap,
            ignore_value=cfg["data.ignore_value"],
        )
        return load_and_preprocess(manifest), cfg["data.n_classes"]
    raise ConfigError(f"data.kind must be synthetic or folder, got {cfg['data.kind']!r}")


def build_configs(cfg: dict) -> tuple[ExtractorConfig, TrainConfig]:
    extractor = ExtractorConfig(
        backbone=cfg["model.backbone"],
        dim=cfg["model.dim"],
        stride=cfg["model.stride"],
        weights=cfg["model.weights"] or None,
    )
    train_cfg = TrainConfig(
        method=cfg["train.method"],
        k1=cfg["train.k1"],
        k2=cfg["train.k2"],
        epochs=cfg["train.epochs"] or None,
        lr=cfg["train.lr"],
        betas=(cfg["train.beta1"], cfg["train.beta2"]),
        weight_decay=cfg["train.weight_decay"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["train.seed"],
        deterministic=cfg["run.deterministic"],
        kmeans=KMeansConfig(
            init_batches=cfg["kmeans.init_batches"],
            batch_size=cfg["kmeans.batch_size"],
            update_period=cfg["kmeans.update_period"],
            passes=cfg["kmeans.passes"],
            restarts=cfg["kmeans.restarts"],
        ),
    )
    return extractor, train_cfg


def parse_partitions(spec: str, n_classes: int) -> dict[str, list[int]]:
    """e.g. "stuff:0-14 things:15-26" -> named class-id subsets."""
    partitions: dict[str, list[int]] = {}
    for token in spec.split():
        if ":" not in token:
            raise ConfigError(f"partition {token!r} must look like name:0-4 or name:1,3")
        name, body = token.split(":", 1)
        ids: list[int] = []
        for piece in body.split(","):
            if "-" in piece:
                lo, hi = piece.split("-", 1)
                ids.extend(range(int(lo), int(hi) + 1))
            elif piece:
                ids.append(int(piece))
        bad = [c for c in ids if not 0 <= c < n_classes]
        if bad:
            raise ConfigError(f"partition {name!r} has classes outside [0, {n_classes}): {bad}")
        partitions[name] = ids
    return partitions


def metrics_json(report, partitions=None, robustness=None) -> str:
    payload = report.to_dict()
    if partitions:
        payload["partitions"] = {
            name: {"accuracy": rep.accuracy, "miou": rep.miou}
            for name, rep in partitions.items()
        }
    if robustness:
        payload["robustness"] = {name: rep.to_dict() for name, rep in robustness.items()}
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _write_eval(out_path, samples, ckpt, n_classes, partitions_spec, robustness, seed):
    extractor = trainer.restore_extractor(ckpt)
    centroids = trainer.k1_centroids(ckpt)
    preds = evaluation.predict_labels(samples, extractor, centroids)
    cm = evaluation.dataset_confusion(samples, preds, centroids.k, n_classes)
    report = evaluation.metrics(cm)
    partition_reports = None
    if partitions_spec:
        partition_reports = evaluation.partition_metrics(
            cm, parse_partitions(partitions_spec, n_classes), np.asarray(report.matching)
        )
    robustness_reports = None
    if robustness:
        robustness_reports = evaluation.robustness_eval(
            samples, extractor, centroids, n_classes,
            trainer.derive_rng(seed, "robustness"),
        )
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(metrics_json(report, partition_reports, robustness_reports))
    return report


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set or [])
    run_dir = Path(cfg["run.out"])
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot").write_text(snapshot_text(cfg))
    config_hash = trainer.fingerprint(cfg)
    samples, n_classes = load_samples(cfg)
    extractor_cfg, train_cfg = build_configs(cfg)
    ckpt, reports = trainer.train(
        samples, extractor_cfg, train_cfg,
        run_dir=run_dir, config_hash=config_hash,
        resume=args.resume,
    )
    trainer.save_checkpoint(ckpt, run_dir / "checkpoint.pt")
    with open(run_dir / "reports.jsonl", "w") as fh:
        for report in reports:
            fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    _write_eval(
        run_dir / "metrics.json", samples, ckpt, n_classes,
        partitions_spec="", robustness=False, seed=train_cfg.seed,
    )
    print(f"run written to {run_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args.config, args.set or [])
    samples, n_classes = load_samples(cfg)
    ckpt = trainer.load_checkpoint(args.checkpoint)
    extractor_cfg, _ = build_configs(cfg)
    if ckpt.extractor_config != extractor_cfg:
        raise ConfigError(
            f"checkpoint extractor {ckpt.extractor_config} does not match "
            f"configured {extractor_cfg}; pass the run's config"
        )
    out = args.out or str(Path(args.checkpoint).parent / "metrics.json")
    report = _write_eval(
        out, samples, ckpt, n_classes,
        partitions_spec=args.partitions, robustness=args.robustness,
        seed=cfg["train.seed"],
    )
    print(f"accuracy {report.accuracy:.4f}  miou {report.miou:.4f}  -> {out}")
    return 0


def cmd_cluster(args) -> int:
    cfg = resolve_config(args.config, args.set or [])
    samples, _ = load_samples(cfg)
    extractor_cfg, train_cfg = build_configs(cfg)
    if args.checkpoint:
        extractor = trainer.restore_extractor(trainer.load_checkpoint(args.checkpoint))
    else:
        extractor = trainer.build_extractor(extractor_cfg, train_cfg.seed)
    pls = clustering.cluster_two_views(
        samples, extractor, train_cfg.k1,
        trainer.derive_rng(train_cfg.seed, "cluster-cmd"),
        config=train_cfg.kmeans,
    )
    run_dir = Path(cfg["run.out"])
    run_dir.mkdir(parents=True, exist_ok=True)
    cache = run_dir / "pseudo_labels.plb"
    clustering.save_pseudo_labels(pls, cache)
    for view in (1, 2):
        counts = pls.label_counts(view)
        print(f"view {view} cluster sizes: {counts.tolist()}")
    print(f"pseudo-label cache written to {cache}")
    return 0


def cmd_visualize(args) -> int:
    cfg = resolve_config(args.config, args.set or [])
    samples, n_classes = load_samples(cfg)
    ckpt = trainer.load_checkpoint(args.checkpoint)
    extractor = trainer.restore_extractor(ckpt)
    centroids = trainer.k1_centroids(ckpt)
    wanted = args.ids.split(",") if args.ids else [s.id for s in samples[:4]]
    by_id = {s.id: s for s in samples}
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise DataError(
            f"unknown image ids {missing}; available: {', '.join(sorted(by_id))}"
        )
    preds = evaluation.predict_labels(samples, extractor, centroids)
    gts = {s.id: s.labels for s in samples}
    renders = evaluation.render_majority_vote(
        preds, gts, evaluation.default_palette(n_classes), centroids.k
    )
    out_dir = Path(args.outdir or Path(cfg["run.out"]) / "renders")
    out_dir.mkdir(parents=True, exist_ok=True)
    for image_id in wanted:
        path = out_dir / f"{image_id}.png"
        Image.fromarray(renders[image_id]).save(path)
        print(f"wrote {path}")
    return 0


def cmd_nn(args) -> int:
    cfg = resolve_config(args.config, args.set or [])
    samples, _ = load_samples(cfg)
    ckpt = trainer.load_checkpoint(args.checkpoint)
    extractor = trainer.restore_extractor(ckpt)
    try:
        image_id, coord = args.query.split(":", 1)
        row, col = (int(v) for v in coord.split(","))
    except ValueError:
        raise ConfigError(f"--query must look like image_id:row,col, got {args.query!r}") from None
    result = evaluation.nearest_neighbors(
        image_id, (row, col), samples, extractor, args.k, args.stride
    )
    for rank, item in enumerate(result.items, 1):
        print(f"{rank:3d}  {item.image_id}  ({item.coord[0]}, {item.coord[1]})  {item.distance:.6f}")
    if result.truncated:
        print(f"(corpus exhausted: only {len(result.items)} neighbors available)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="picie", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p_train = sub.add_parser("train", help="run an alternating-optimization experiment")
    common(p_train)
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--partitions", default="", metavar="SPEC",
                        help='e.g. "stuff:0-14 things:15-26"')
    p_eval.add_argument("--robustness", action="store_true",
                        help="add test-time-augmentation condition reports")
    p_eval.add_argument("--out", help="metrics JSON path")
    p_eval.set_defaults(func=cmd_eval)

    p_cluster = sub.add_parser("cluster", help="one two-view clustering pass")
    common(p_cluster)
    p_cluster.add_argument("--checkpoint", help="extractor weights (fresh init otherwise)")
    p_cluster.set_defaults(func=cmd_cluster)

    p_vis = sub.add_parser("visualize", help="majority-vote renderings")
    common(p_vis)
    p_vis.add_argument("--checkpoint", required=True)
    p_vis.add_argument("--ids", default="", help="comma-separated image ids")
    p_vis.add_argument("--outdir")
    p_vis.set_defaults(func=cmd_visualize)

    p_nn = sub.add_parser("nn", help="pixel-feature nearest neighbors")
    common(p_nn)
    p_nn.add_argument("--checkpoint", required=True)
    p_nn.add_argument("--query", required=True, metavar="ID:ROW,COL")
    p_nn.add_argument("--k", type=int, default=5)
    p_nn.add_argument("--stride", type=int, default=2, help="corpus subsample stride")
    p_nn.set_defaults(func=cmd_nn)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except PicieError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
