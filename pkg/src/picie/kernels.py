"""K-means inner-loop kernels.

The compiled extension is used when it was built; otherwise a numpy
fallback with identical semantics is selected at import time.  Both paths
compute the batch-vs-centroid similarities with BLAS; the backends differ
in the argmax + scatter-accumulate step.  ``benchmarks/bench_kernels.py``
compares them.
"""

from __future__ import annotations

import numpy as np

try:
    from picie import _accel
except ImportError:  # extension not built; pure numpy is fine, just slower
    _accel = None


def backend() -> str:
    return "cython" if _accel is not None else "numpy"


def assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per row under cosine distance, ties to the lowest
    index. Inputs are unit-norm rows."""
    sims = x @ centroids.T
    return np.argmax(sims, axis=1).astype(np.int32)


def assign_accumulate(
    x: np.ndarray,
    centroids: np.ndarray,
    sums: np.ndarray,
    counts: np.ndarray,
) -> tuple[np.ndarray, float]:
    """Assign each row of ``x`` to its nearest centroid and accumulate
    per-cluster sums and counts in place.

    Returns (labels, summed cosine-distance objective of the batch).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    sims = x @ centroids.T
    labels = np.empty(len(x), dtype=np.int32)
    if _accel is not None:
        obj = _accel.assign_accumulate(
            np.ascontiguousarray(sims), x, sums, counts, labels
        )
    else:
        labels[:] = np.argmax(sims, axis=1)
        np.add.at(sums, labels, x)
        counts += np.bincount(labels, minlength=len(counts)).astype(counts.dtype)
        obj = float(np.sum(1.0 - sims[np.arange(len(x)), labels]))
    return labels, float(obj)
