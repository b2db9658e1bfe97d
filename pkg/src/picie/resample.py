"""Grid resampling shared by preprocessing and the geometric transforms.

All routines take a continuous source box in pixel units (pixel i spans
[i, i+1), its center sits at i + 0.5) and produce an output grid whose
pixel centers sample the box uniformly.  When the box is the whole grid
and the output size equals the input size the source coordinates are exact
integers, so the resampling is an exact identity; tests rely on this.
"""

from __future__ import annotations

import numpy as np
import torch


def source_coords(start: float, extent: float, n_out: int) -> np.ndarray:
    """Pixel-center source coordinates for ``n_out`` output samples."""
    step = extent / n_out
    return start + (np.arange(n_out, dtype=np.float64) + 0.5) * step - 0.5


def _bilinear_axis(coords, size):
    coords = np.clip(coords, 0.0, size - 1.0)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = coords - lo
    return lo, hi, frac


def bilinear_chw(grid: torch.Tensor, box, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear crop+resize of a C,H,W tensor. Differentiable w.r.t. ``grid``.

    ``box`` is (y0, x0, height, width) in pixel units; coordinates outside
    the grid are clamped (replicate border).
    """
    y0, x0, bh, bw = box
    h, w = grid.shape[-2], grid.shape[-1]
    ylo, yhi, wy = _bilinear_axis(source_coords(y0, bh, out_h), h)
    xlo, xhi, wx = _bilinear_axis(source_coords(x0, bw, out_w), w)
    wy = torch.as_tensor(wy, dtype=grid.dtype)[:, None]
    wx = torch.as_tensor(wx, dtype=grid.dtype)
    top = grid[..., ylo, :]
    bot = grid[..., yhi, :]
    row0 = top[..., xlo] * (1.0 - wx) + top[..., xhi] * wx
    row1 = bot[..., xlo] * (1.0 - wx) + bot[..., xhi] * wx
    return row0 * (1.0 - wy) + row1 * wy


def bilinear_hwc(grid: np.ndarray, box, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear crop+resize of an H,W[,C] numpy array."""
    squeeze = grid.ndim == 2
    if squeeze:
        grid = grid[:, :, None]
    t = torch.from_numpy(np.ascontiguousarray(grid.transpose(2, 0, 1)))
    out = bilinear_chw(t, box, out_h, out_w).numpy().transpose(1, 2, 0)
    return out[:, :, 0] if squeeze else out


def nearest_hw(grid: np.ndarray, box, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor crop+resize of an H,W[,...] numpy array.

    Only copies values, so the output never contains a value absent from
    the source (required for categorical label maps).
    """
    y0, x0, bh, bw = box
    h, w = grid.shape[0], grid.shape[1]
    yi = np.clip(np.floor(source_coords(y0, bh, out_h) + 0.5), 0, h - 1).astype(np.int64)
    xi = np.clip(np.floor(source_coords(x0, bw, out_w) + 0.5), 0, w - 1).astype(np.int64)
    return grid[yi][:, xi]
