"""Harness calibration: accuracy trajectories for the three methods."""
import sys, time
import numpy as np
from picie.dataio import SyntheticSpec, generate_synthetic
from picie.features import ExtractorConfig
from picie.trainer import TrainConfig, train
from picie.clustering import KMeansConfig
from picie import evaluation

n_images = int(sys.argv[1]) if len(sys.argv) > 1 else 200
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 10
dim = int(sys.argv[3]) if len(sys.argv) > 3 else 128
k2 = int(sys.argv[4]) if len(sys.argv) > 4 else 0
seed = int(sys.argv[5]) if len(sys.argv) > 5 else 0

samples = generate_synthetic(SyntheticSpec(n_images=n_images, side=64, seed=11))
ecfg = ExtractorConfig(dim=dim)
km = KMeansConfig(passes=2)

for method in ("no-train", "mdc", "picie"):
    t0 = time.time()
    cfg = TrainConfig(method=method, k1=4, k2=k2, epochs=epochs, batch_size=16, seed=seed, kmeans=km)
    ckpt, reports = train(samples, ecfg, cfg)
    rep, _ = evaluation.evaluate_checkpoint(samples, ckpt, 4)
    dt = time.time() - t0
    last = reports[-1].losses if reports else {}
    print(f"{method:9s} seed={seed} acc={rep.accuracy:.4f} miou={rep.miou:.4f} time={dt:.1f}s losses={last}")
