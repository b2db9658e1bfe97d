"""Quick sweeps of k2 / lr to find a non-collapsing harness regime."""
import sys, time
import numpy as np
from picie.dataio import SyntheticSpec, generate_synthetic
from picie.features import ExtractorConfig
from picie.trainer import TrainConfig, train
from picie.clustering import KMeansConfig
from picie import evaluation

k2 = int(sys.argv[1]); lr = float(sys.argv[2]); epochs = int(sys.argv[3])
samples = generate_synthetic(SyntheticSpec(n_images=200, side=64, seed=11))
ecfg = ExtractorConfig(dim=128)
km = KMeansConfig(passes=2)
for e in (2, 4, 6, epochs):
    t0 = time.time()
    cfg = TrainConfig(method="picie", k1=4, k2=k2, epochs=e, batch_size=16, seed=0, lr=lr, kmeans=km)
    ckpt, reports = train(samples, ecfg, cfg)
    rep, _ = evaluation.evaluate_checkpoint(samples, ckpt, 4)
    sizes = reports[-1].cluster_sizes["k1"]["view1"]
    print(f"k2={k2} lr={lr} epoch {e}: acc={rep.accuracy:.4f} sizes={sizes} ({time.time()-t0:.0f}s)", flush=True)
