"""PiCIE: unsupervised semantic segmentation by pixel-level clustering.

Alternates mini-batch spherical k-means pseudo-labeling over two augmented
views with a prototype cross-entropy objective that enforces photometric
invariance and geometric equivariance, plus the Hungarian-matched
evaluation stack.
"""

__version__ = "0.1.0"
