"""Incremental per-epoch trace using checkpoint resume."""
import sys
import numpy as np
from picie.dataio import SyntheticSpec, generate_synthetic
from picie.features import ExtractorConfig
from picie.trainer import TrainConfig, train
from picie.clustering import KMeansConfig
from picie import evaluation
import dataclasses

k2 = int(sys.argv[1]); lr = float(sys.argv[2]); epochs = int(sys.argv[3])
bs = int(sys.argv[4]) if len(sys.argv) > 4 else 16
samples = generate_synthetic(SyntheticSpec(n_images=200, side=64, seed=11))
ecfg = ExtractorConfig(dim=128)
km = KMeansConfig(passes=2)
ckpt = None
for e in range(1, epochs + 1):
    cfg = TrainConfig(method="picie", k1=4, k2=k2, epochs=e, batch_size=bs, seed=0, lr=lr, kmeans=km)
    ckpt, reports = train(samples, ecfg, cfg, resume=ckpt)
    rep, _ = evaluation.evaluate_checkpoint(samples, ckpt, 4)
    r = reports[-1].losses["k1"]
    print(f"k2={k2} lr={lr} bs={bs} epoch {e}: acc={rep.accuracy:.4f} "
          f"w={r['within']:.3f} x={r['cross']:.3f}", flush=True)
