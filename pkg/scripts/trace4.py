"""Diagnostics: uniform-weight ablation and lr sweep (monkeypatched, not shipped)."""
import sys
import numpy as np
from picie.dataio import SyntheticSpec, generate_synthetic
from picie.features import ExtractorConfig
from picie.trainer import TrainConfig, train
from picie.clustering import KMeansConfig
from picie import evaluation, losses

mode = sys.argv[1]  # "uniform" | "weighted"
lr = float(sys.argv[2]); epochs = int(sys.argv[3])
if mode == "uniform":
    losses.cluster_size_weights = lambda counts, total=None: np.ones(len(np.asarray(counts)))

samples = generate_synthetic(SyntheticSpec(n_images=200, side=64, seed=11))
ecfg = ExtractorConfig(dim=128)
km = KMeansConfig(passes=2)
ckpt = None
for e in range(1, epochs + 1):
    cfg = TrainConfig(method="picie", k1=4, k2=100, epochs=e, batch_size=16, seed=0, lr=lr, kmeans=km)
    ckpt, reports = train(samples, ecfg, cfg, resume=ckpt)
    rep, _ = evaluation.evaluate_checkpoint(samples, ckpt, 4)
    r = reports[-1].losses["k1"]
    sizes = reports[-1].cluster_sizes["k1"]["view1"]
    print(f"{mode} lr={lr} epoch {e}: acc={rep.accuracy:.4f} w={r['within']:.3f} x={r['cross']:.3f} sizes={sizes}", flush=True)
