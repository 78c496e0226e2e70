"""Localization map algebra.

Two ways of getting a per-category map from final features ``S [K, H, H]``:

* post hoc (CAM style): a GAP -> fully connected head, then re-weight ``S``
  with the column of the FC matrix for category ``c``;
* in the forward pass: a 1x1 convolution -> GAP head, whose ``c``-th output
  channel already is the map.

With a shared ``[K, C]`` weight matrix the two give identical logits and maps,
which ``equivalence_report`` measures numerically.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_core import ConvLayerParams, ShapeError, bilinear_resize, conv2d_forward, gap

__all__ = [
    "LocalizationMap",
    "select_map",
    "cam_posthoc",
    "normalize_map",
    "fuse_maps",
    "equivalence_report",
    "JET_LUT",
    "save_heatmap_png",
    "overlay_heatmap",
]


@dataclass
class LocalizationMap:
    grid: np.ndarray
    category: int
    normalized: bool = False

    def normalize(self) -> "LocalizationMap":
        if self.normalized:
            return self
        return LocalizationMap(normalize_map(self.grid), self.category, True)


def select_map(branch_maps: np.ndarray, c: int, index: int = 0) -> LocalizationMap:
    """Channel ``c`` of sample ``index`` from ``[N, C, H, W]`` head output, unmodified."""
    if branch_maps.ndim == 3:
        branch_maps = branch_maps[None]
    n_cat = branch_maps.shape[1]
    if not 0 <= c < n_cat:
        raise IndexError(f"category {c} out of range [0, {n_cat})")
    return LocalizationMap(branch_maps[index, c], int(c), normalized=False)


def cam_posthoc(s: np.ndarray, w_fc: np.ndarray, c: int) -> LocalizationMap:
    """Class activation map ``sum_k S_k * W[k, c]`` (bias ignored)."""
    if s.ndim != 3 or w_fc.ndim != 2 or s.shape[0] != w_fc.shape[0]:
        raise ShapeError(f"features {s.shape} incompatible with FC weights {w_fc.shape}")
    if not 0 <= c < w_fc.shape[1]:
        raise IndexError(f"category {c} out of range [0, {w_fc.shape[1]})")
    return LocalizationMap(np.tensordot(w_fc[:, c], s, axes=(0, 0)), int(c))


def normalize_map(m) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant map becomes all zeros."""
    if isinstance(m, LocalizationMap):
        m = m.grid
    m = np.asarray(m)
    lo, hi = m.min(), m.max()
    if not hi > lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def fuse_maps(a, b) -> np.ndarray:
    """Elementwise maximum of two normalized maps."""
    a = a.grid if isinstance(a, LocalizationMap) else np.asarray(a)
    b = b.grid if isinstance(b, LocalizationMap) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot fuse maps of shapes {a.shape} and {b.shape}")
    return np.maximum(a, b)


def equivalence_report(
    seed: int = 0,
    trials: int = 100,
    k: int = 64,
    c: int = 10,
    h: int = 8,
    dtype=np.float64,
    weights: str = "random",
) -> dict:
    """Compare the GAP->FC head against the 1x1-conv->GAP head on shared weights.

    Each trial draws fresh features ``S`` and a weight matrix ``W [K, C]``.
    ``weights="onehot"`` uses a one-hot column per category instead.

    Returns:
        ``{"max_logit_diff", "max_map_diff", "trials", "dtype"}``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst_logit = worst_map = 0.0
    for _ in range(trials):
        s = rng.standard_normal((k, h, h)).astype(dtype)
        if weights == "onehot":
            w = np.zeros((k, c), dtype=dtype)
            w[rng.integers(0, k, size=c), np.arange(c)] = 1
        else:
            w = (rng.standard_normal((k, c)) / np.sqrt(k)).astype(dtype)

        # GAP then fully connected, CAM computed afterwards
        y_fc = gap(s[None])[0] @ w
        a_fc = np.stack([cam_posthoc(s, w, ci).grid for ci in range(c)])

        # 1x1 conv whose outputs are the maps, GAP gives the logits
        head = ConvLayerParams(
            np.ascontiguousarray(w.T).reshape(c, k, 1, 1), np.zeros(c, dtype=dtype)
        )
        a_conv = conv2d_forward(s[None], head)
        y_conv = gap(a_conv)[0]

        worst_logit = max(worst_logit, float(np.abs(y_fc - y_conv).max()))
        worst_map = max(worst_map, float(np.abs(a_fc - a_conv[0]).max()))
    return {
        "max_logit_diff": worst_logit,
        "max_map_diff": worst_map,
        "trials": trials,
        "dtype": np.dtype(dtype).name,
    }


def _jet_lut() -> np.ndarray:
    x = np.arange(256) / 255.0
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.round(np.stack([r, g, b], axis=1) * 255).astype(np.uint8)


# fixed 256-entry colormap so overlays are byte-reproducible
JET_LUT = _jet_lut()


def to_uint8(m: np.ndarray) -> np.ndarray:
    return np.round(np.clip(m, 0, 1) * 255).astype(np.uint8)


def save_heatmap_png(m, path) -> Path:
    """Write a normalized map as 8-bit grayscale PNG."""
    from PIL import Image

    grid = m.grid if isinstance(m, LocalizationMap) else m
    path = Path(path)
    Image.fromarray(to_uint8(grid)).save(path)
    return path


def overlay_heatmap(image: np.ndarray, m: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a jet-colored map onto an RGB image ``[3, H, W]`` or ``[H, W, 3]`` in [0, 1].

    Returns ``uint8 [H, W, 3]``; the map is resized to the image if needed.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] == 3 and img.ndim == 3:
        img = img.transpose(1, 2, 0)
    h, w = img.shape[:2]
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (h, w):
        m = bilinear_resize(m, h, w)
    color = JET_LUT[to_uint8(m)].astype(np.float64) / 255.0
    out = (1 - alpha) * img + alpha * color
    return to_uint8(out)
