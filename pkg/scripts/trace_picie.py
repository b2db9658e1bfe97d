"""Per-epoch accuracy trace for picie to understand the learning dynamics."""
import sys
import numpy as np
from picie.dataio import SyntheticSpec, generate_synthetic
from picie.features import ExtractorConfig
from picie.trainer import TrainConfig, train
from picie.clustering import KMeansConfig, Centroids, cluster_pixels, compute_view_features
from picie import evaluation, trainer, transforms, clustering

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
k2 = int(sys.argv[2]) if len(sys.argv) > 2 else 0
samples = generate_synthetic(SyntheticSpec(n_images=200, side=64, seed=11))
ecfg = ExtractorConfig(dim=128)
km = KMeansConfig(passes=2)

for e in range(1, epochs + 1):
    cfg = TrainConfig(method="picie", k1=4, k2=k2, epochs=e, batch_size=16, seed=0, kmeans=km)
    ckpt, reports = train(samples, ecfg, cfg)
    rep, _ = evaluation.evaluate_checkpoint(samples, ckpt, 4)
    # also: fresh k-means on clean features of the trained extractor
    ex = trainer.restore_extractor(ckpt)
    records = {s.id: transforms.identity_record(64) for s in samples}
    feats = compute_view_features(samples, ex, records, two_views=False)
    cents, _ = cluster_pixels([feats[s.id][0] for s in samples], 4,
                              np.random.default_rng(0), km)
    rep2, _ = evaluation.evaluate(samples, ex, Centroids(cents), 4)
    r = reports[-1].losses["k1"]
    print(f"epoch {e}: stored-cent acc={rep.accuracy:.4f}  fresh-cent acc={rep2.accuracy:.4f} "
          f"within={r['within']:.4f} cross={r['cross']:.4f}", flush=True)
