"""Two-branch network whose second classifier sees features erased by the first.

A shared convolutional backbone produces feature maps ``S``. Classifier A
sees ``S``; classifier B sees ``S`` with the positions that A finds most
discriminative zeroed out. Each branch ends in a 1x1 convolution whose output
channels are the per-category localization maps, and the category logits are
the spatial means of those maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor_core as tc
from .locmaps import normalize_map
from .tensor_core import ConvLayerParams, ShapeError

__all__ = [
    "NetworkParams",
    "ForwardRecord",
    "init_params",
    "backbone_forward",
    "classifier_forward",
    "make_erase_mask",
    "erase_features",
    "acol_forward",
    "acol_loss_and_grads",
    "predict_logits",
]

BRANCH_PREFIX = {"a": "clsA", "b": "clsB"}


@dataclass
class NetworkParams:
    backbone: list[ConvLayerParams]
    classifier_a: list[ConvLayerParams]
    classifier_b: list[ConvLayerParams]
    num_categories: int

    def __post_init__(self):
        shapes_a = [p.weight.shape for p in self.classifier_a]
        shapes_b = [p.weight.shape for p in self.classifier_b]
        if shapes_a != shapes_b:
            raise ShapeError(f"classifier branches differ: {shapes_a} vs {shapes_b}")
        last = self.classifier_a[-1]
        if last.kernel != 1 or last.out_ch != self.num_categories:
            raise ShapeError(
                f"branch head must be a 1x1 conv with {self.num_categories} outputs, "
                f"got weight shape {last.weight.shape}"
            )

    @property
    def downsample(self) -> int:
        # every backbone block ends with a 2x2 max pool
        return 2 ** len(self.backbone)

    def layers(self) -> Iterator[tuple[str, ConvLayerParams]]:
        for i, p in enumerate(self.backbone):
            yield f"backbone.{i}", p
        for i, p in enumerate(self.classifier_a):
            yield f"clsA.{i}", p
        for i, p in enumerate(self.classifier_b):
            yield f"clsB.{i}", p

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Live references keyed by the stable checkpoint names."""
        out = {}
        for name, p in self.layers():
            out[f"{name}.weight"] = p.weight
            out[f"{name}.bias"] = p.bias
        return out

    def copy(self) -> "NetworkParams":
        def dup(layers):
            return [
                ConvLayerParams(p.weight.copy(), p.bias.copy(), p.stride, p.pad) for p in layers
            ]

        return NetworkParams(
            dup(self.backbone), dup(self.classifier_a), dup(self.classifier_b), self.num_categories
        )

    def astype(self, dtype) -> "NetworkParams":
        def cast(layers):
            return [
                ConvLayerParams(p.weight.astype(dtype), p.bias.astype(dtype), p.stride, p.pad)
                for p in layers
            ]

        return NetworkParams(
            cast(self.backbone), cast(self.classifier_a), cast(self.classifier_b), self.num_categories
        )

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        """Copy checkpoint tensors into this parameter set, checking every shape."""
        for name, arr in self.named_tensors().items():
            if name not in tensors:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            src = tensors[name]
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {src.shape} != model shape {arr.shape}")
            arr[...] = src


def _he_conv(rng: np.random.Generator, cin: int, cout: int, k: int, dtype) -> ConvLayerParams:
    std = np.sqrt(2.0 / (cin * k * k))
    w = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
    return ConvLayerParams(w, np.zeros(cout, dtype=dtype), stride=1, pad=k // 2)


def init_params(
    num_categories: int = 4,
    in_channels: int = 3,
    backbone_widths: tuple[int, ...] = (16, 32, 64),
    branch_width: int = 64,
    seed: int = 0,
    identical_branches: bool = False,
    dtype=np.float32,
) -> NetworkParams:
    """He fan-in initialization with zero biases, drawn from one seeded stream."""
    rng = np.random.default_rng(seed)
    backbone = []
    cin = in_channels
    for width in backbone_widths:
        backbone.append(_he_conv(rng, cin, width, 3, dtype))
        cin = width

    def branch():
        return [
            _he_conv(rng, cin, branch_width, 3, dtype),
            _he_conv(rng, branch_width, branch_width, 3, dtype),
            _he_conv(rng, branch_width, num_categories, 1, dtype),
        ]

    cls_a = branch()
    if identical_branches:
        cls_b = [ConvLayerParams(p.weight.copy(), p.bias.copy(), p.stride, p.pad) for p in cls_a]
    else:
        cls_b = branch()
    return NetworkParams(backbone, cls_a, cls_b, num_categories)


def backbone_forward(images: np.ndarray, backbone: list[ConvLayerParams], cache: list | None = None):
    """Run the ``conv3x3 -> relu -> maxpool2`` blocks.

    When ``cache`` is a list, per-block intermediates needed by the backward
    pass are appended to it.
    """
    factor = 2 ** len(backbone)
    if images.ndim != 4 or images.shape[2] % factor or images.shape[3] % factor:
        raise ShapeError(
            f"image shape {images.shape} not divisible by backbone downsampling factor {factor}"
        )
    x = images
    for p in backbone:
        cols = tc.im2col(x, p)
        pre = tc.conv2d_forward(x, p, cols)
        act = tc.relu(pre)
        out, arg = tc.maxpool2(act)
        if cache is not None:
            cache.append((x, cols, pre, arg))
        x = out
    return x


def _backbone_backward(backbone, cache, grad):
    grads = []
    for i in reversed(range(len(backbone))):
        x, cols, pre, arg = cache[i]
        g = tc.maxpool2_backward(grad, arg)
        g = tc.relu_backward(pre, g)
        grad, gw, gb = tc.conv2d_backward(x, backbone[i], g, cols, need_input_grad=i > 0)
        grads.append((gw, gb))
    return grads[::-1]


def classifier_forward(s: np.ndarray, branch: list[ConvLayerParams], cache: list | None = None):
    """Map features to ``(maps [N, C, H2, H2], logits [N, C])``.

    Hidden layers are ``conv -> relu``; the last layer is the linear 1x1 head
    whose outputs are the localization maps. Logits are their spatial means.
    """
    x = s
    for i, p in enumerate(branch):
        cols = tc.im2col(x, p) if p.kernel != 1 else None
        pre = tc.conv2d_forward(x, p, cols)
        if cache is not None:
            cache.append((x, cols, pre))
        x = pre if i == len(branch) - 1 else tc.relu(pre)
    return x, tc.gap(x)


def _classifier_backward(branch, cache, grad_logits, maps_shape):
    g = tc.gap_backward(grad_logits, maps_shape)
    grads = []
    for i in reversed(range(len(branch))):
        x, cols, pre = cache[i]
        if i < len(branch) - 1:
            g = tc.relu_backward(pre, g)
        g, gw, gb = tc.conv2d_backward(x, branch[i], g, cols)
        grads.append((gw, gb))
    return g, grads[::-1]


def make_erase_mask(map_a: np.ndarray, delta: float, target: int | None = None) -> np.ndarray:
    """Boolean mask of cells whose min-max normalized value is strictly above ``delta``.

    A constant map normalizes to all zeros and therefore erases nothing. The
    map is bilinearly resized to ``target x target`` first when the sizes differ.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"erase threshold must lie in (0, 1), got {delta}")
    m = normalize_map(np.asarray(map_a))
    if target is not None and m.shape != (target, target):
        m = tc.bilinear_resize(m, target, target)
    return m > delta


def erase_features(s: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero every channel of ``s [N, K, H, W]`` where ``mask [N, H, W]`` is true."""
    if mask.shape != (s.shape[0],) + s.shape[2:]:
        raise ShapeError(f"mask shape {mask.shape} does not match feature shape {s.shape}")
    return np.where(mask[:, None], 0, s).astype(s.dtype, copy=False)


@dataclass
class ForwardRecord:
    images: np.ndarray
    S: np.ndarray
    S_erased: np.ndarray
    maps_a: np.ndarray
    maps_b: np.ndarray
    logits_a: np.ndarray
    logits_b: np.ndarray
    mask: np.ndarray
    mask_category: np.ndarray
    mode: str
    cache: dict = field(default_factory=dict, repr=False)


def acol_forward(
    images: np.ndarray,
    params: NetworkParams,
    delta: float,
    labels=None,
    mode: str = "train",
    mask: np.ndarray | None = None,
) -> ForwardRecord:
    """Backbone, classifier A, erase, classifier B.

    In train mode the erase mask comes from A's map at the ground-truth label;
    in test mode from A's map at its own top prediction. Passing ``mask``
    overrides the computed mask (used to freeze it for gradient checks).
    """
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    if mode == "train" and labels is None:
        raise ValueError("train mode requires labels")
    bb_cache, a_cache, b_cache = [], [], []
    s = backbone_forward(images, params.backbone, bb_cache)
    maps_a, logits_a = classifier_forward(s, params.classifier_a, a_cache)
    n, _, h1, _ = s.shape
    if mode == "train":
        cats = np.asarray(labels, dtype=np.int64)
    else:
        cats = logits_a.argmax(axis=1)
    if mask is None:
        mask = np.stack([make_erase_mask(maps_a[i, cats[i]], delta, h1) for i in range(n)])
    s_erased = erase_features(s, mask)
    maps_b, logits_b = classifier_forward(s_erased, params.classifier_b, b_cache)
    return ForwardRecord(
        images=images,
        S=s,
        S_erased=s_erased,
        maps_a=maps_a,
        maps_b=maps_b,
        logits_a=logits_a,
        logits_b=logits_b,
        mask=mask,
        mask_category=cats,
        mode=mode,
        cache={"backbone": bb_cache, "a": a_cache, "b": b_cache},
    )


def acol_loss_and_grads(record: ForwardRecord, labels, params: NetworkParams, return_parts=False):
    """Sum of both branch cross-entropies and gradients for every parameter.

    The mask is a constant: branch B's gradient reaches ``S`` only through the
    unerased positions. Gradients are returned keyed like ``named_tensors``.
    With ``return_parts`` the individual branch losses and the gradient
    w.r.t. ``S`` contributed by branch B are returned as well.
    """
    if record.mode != "train" or not record.cache:
        raise ValueError("loss requires a train-mode forward record with caches")
    loss_a, g_logits_a = tc.softmax_cross_entropy(record.logits_a, labels)
    loss_b, g_logits_b = tc.softmax_cross_entropy(record.logits_b, labels)
    g_s_a, grads_a = _classifier_backward(
        params.classifier_a, record.cache["a"], g_logits_a.astype(record.maps_a.dtype), record.maps_a.shape
    )
    g_s_erased, grads_b = _classifier_backward(
        params.classifier_b, record.cache["b"], g_logits_b.astype(record.maps_b.dtype), record.maps_b.shape
    )
    g_s_b = np.where(record.mask[:, None], 0, g_s_erased).astype(g_s_erased.dtype, copy=False)
    grads_bb = _backbone_backward(params.backbone, record.cache["backbone"], g_s_a + g_s_b)

    grads = {}
    for prefix, layer_grads in (("backbone", grads_bb), ("clsA", grads_a), ("clsB", grads_b)):
        for i, (gw, gb) in enumerate(layer_grads):
            grads[f"{prefix}.{i}.weight"] = gw
            grads[f"{prefix}.{i}.bias"] = gb
    loss = loss_a + loss_b
    if return_parts:
        return loss, grads, {"loss_a": loss_a, "loss_b": loss_b, "grad_S_from_b": g_s_b}
    return loss, grads


def predict_logits(record: ForwardRecord, branch_mode: str = "mean") -> np.ndarray:
    """Logits used for the final category decision: ``a``, ``b`` or their ``mean``."""
    if branch_mode == "a":
        return record.logits_a
    if branch_mode == "b":
        return record.logits_b
    if branch_mode == "mean":
        return 0.5 * (record.logits_a + record.logits_b)
    raise ValueError(f"unknown branch mode {branch_mode!r}")
