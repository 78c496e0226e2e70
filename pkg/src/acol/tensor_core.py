"""Dense numpy kernels with explicit forward and backward passes.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Training runs in
float32; every gradient oracle runs in float64. Nothing here keeps hidden
state, so identical inputs always produce bitwise identical outputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ConvLayerParams",
    "ShapeError",
    "TensorFileError",
    "conv2d_forward",
    "conv2d_backward",
    "im2col",
    "relu",
    "relu_backward",
    "maxpool2",
    "maxpool2_backward",
    "gap",
    "gap_backward",
    "softmax",
    "softmax_cross_entropy",
    "bilinear_resize",
    "sgd_update",
    "finite_difference_check",
    "save_tensors",
    "load_tensors",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class TensorFileError(IOError):
    """Raised when a tensor file is malformed or has the wrong magic/version."""


@dataclass
class ConvLayerParams:
    """Weights ``[out_ch, in_ch, k, k]`` and bias ``[out_ch]`` of one conv layer."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got shape {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh != kw or kh not in (1, 3):
            raise ShapeError(f"only 1x1 and 3x3 kernels are supported, got {kh}x{kw}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight shape {self.weight.shape}"
            )
        if self.stride < 1 or self.pad < 0:
            raise ValueError(f"invalid stride={self.stride} / pad={self.pad}")

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.pad
        out = []
        for size in (h, w):
            span = size + 2 * p - k
            if span < 0 or span % s:
                raise ShapeError(
                    f"input spatial size {(h, w)} incompatible with kernel {k}, stride {s}, pad {p}"
                )
            out.append(span // s + 1)
        return out[0], out[1]


def _check_conv_input(x: np.ndarray, params: ConvLayerParams) -> tuple[int, int]:
    if x.ndim != 4 or x.shape[1] != params.in_ch:
        raise ShapeError(
            f"input shape {x.shape} does not match conv weight shape {params.weight.shape}"
        )
    return params.output_size(x.shape[2], x.shape[3])


def im2col(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """Unfold receptive fields into rows of shape ``(N*H'*W', in_ch*k*k)``."""
    ho, wo = _check_conv_input(x, params)
    k, s, p = params.kernel, params.stride, params.pad
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    # (N, C, H', W', k, k) -> (N, H', W', C, k, k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(x.shape[0] * ho * wo, -1)


def conv2d_forward(
    x: np.ndarray, params: ConvLayerParams, cols: np.ndarray | None = None
) -> np.ndarray:
    """2-D cross-correlation with zero padding.

    Args:
        x: input ``[N, in_ch, H, W]``.
        params: layer weights and geometry.
        cols: optional precomputed ``im2col(x, params)``.

    Returns:
        Output ``[N, out_ch, H', W']``.
    """
    ho, wo = _check_conv_input(x, params)
    n = x.shape[0]
    w2 = params.weight.reshape(params.out_ch, -1)
    if params.kernel == 1 and params.stride == 1 and params.pad == 0:
        out = np.matmul(w2, x.reshape(n, params.in_ch, -1))
        out = out.reshape(n, params.out_ch, ho, wo)
    else:
        if cols is None:
            cols = im2col(x, params)
        out = (cols @ w2.T).reshape(n, ho, wo, params.out_ch).transpose(0, 3, 1, 2)
    return out + params.bias.reshape(1, -1, 1, 1)


def conv2d_backward(
    x: np.ndarray,
    params: ConvLayerParams,
    grad_out: np.ndarray,
    cols: np.ndarray | None = None,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv2d_forward(x, params))``.

    Returns:
        ``(grad_input, grad_weight, grad_bias)``; ``grad_input`` is None when
        ``need_input_grad`` is False.
    """
    ho, wo = _check_conv_input(x, params)
    n = x.shape[0]
    expected = (n, params.out_ch, ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    w2 = params.weight.reshape(params.out_ch, -1)
    grad_b = grad_out.sum(axis=(0, 2, 3))

    if params.kernel == 1 and params.stride == 1 and params.pad == 0:
        g = grad_out.reshape(n, params.out_ch, -1)
        xf = x.reshape(n, params.in_ch, -1)
        grad_w = np.einsum("nop,nip->oi", g, xf).reshape(params.weight.shape)
        grad_x = None
        if need_input_grad:
            grad_x = np.matmul(w2.T, g).reshape(x.shape)
        return grad_x, grad_w.astype(x.dtype, copy=False), grad_b

    if cols is None:
        cols = im2col(x, params)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, params.out_ch)
    grad_w = (g.T @ cols).reshape(params.weight.shape)
    if not need_input_grad:
        return None, grad_w, grad_b

    k, s, p = params.kernel, params.stride, params.pad
    gcols = (g @ w2).reshape(n, ho, wo, params.in_ch, k, k)
    hp, wp = x.shape[2] + 2 * p, x.shape[3] + 2 * p
    grad_xp = np.zeros((n, params.in_ch, hp, wp), dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            grad_xp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[..., i, j].transpose(
                0, 3, 1, 2
            )
    grad_x = grad_xp[:, :, p : hp - p, p : wp - p] if p else grad_xp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # strict > : the kink at exactly 0 passes zero gradient
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 non-overlapping max pool.

    Returns the pooled tensor and the argmax record: for every output cell the
    window offset (0..3, row-major) of the winner. ``np.argmax`` returns the
    first maximum, which gives the first-in-scan-order tie rule.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects a 4-D tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {(h, w)}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.uint8)


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != argmax shape {argmax.shape}")
    n, c, h2, w2 = grad_out.shape
    onehot = argmax[..., None] == np.arange(4, dtype=np.uint8)
    g = np.where(onehot, grad_out[..., None], 0).astype(grad_out.dtype, copy=False)
    g = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return g.reshape(n, c, 2 * h2, 2 * w2)


def gap(x: np.ndarray) -> np.ndarray:
    """Global average pooling ``[N, C, H, W] -> [N, C]``."""
    if x.ndim != 4:
        raise ShapeError(f"gap expects a 4-D tensor, got shape {x.shape}")
    return x.mean(axis=(2, 3))


def gap_backward(grad_out: np.ndarray, input_shape: Sequence[int]) -> np.ndarray:
    n, c, h, w = input_shape
    if grad_out.shape != (n, c):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, c)}")
    g = grad_out / (h * w)
    return np.broadcast_to(g[:, :, None, None], (n, c, h, w)).copy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits shape {logits.shape} incompatible with labels shape {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got {labels.tolist()}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1
    return loss, grad / n


def bilinear_resize(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the trailing two axes with half-pixel centers.

    Source coordinate of output index ``i`` is ``(i + 0.5) * H / out_h - 0.5``,
    clamped to ``[0, H - 1]``.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {(out_h, out_w)}")
    h, w = m.shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError(f"cannot resize empty map of shape {m.shape}")

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis_weights(h, out_h)
    c0, c1, fc = axis_weights(w, out_w)
    fr = fr.astype(m.dtype)[:, None]
    fc = fc.astype(m.dtype)
    top = m[..., r0, :] * (1 - fr) + m[..., r1, :] * fr
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


def sgd_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: dict[str, np.ndarray] | None = None,
) -> Mapping[str, np.ndarray]:
    """In-place SGD with momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Missing velocity entries are created as zeros.
    """
    if velocity is None:
        velocity = {}
    for name in params:
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ShapeError(f"{name}: param shape {p.shape} != grad shape {g.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"{name}: velocity shape {v.shape} != param shape {p.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params


def finite_difference_check(
    fn: Callable[[], float],
    tensors: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    eps: float = 1e-5,
    n_probes: int = 32,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic gradients and central differences.

    ``fn`` is called with no arguments and must read the current contents of
    ``tensors``, which are perturbed in place (and restored) one coordinate at
    a time. Each tensor gets ``n_probes`` random coordinates, or all of them if
    it is smaller. Relative error is ``|fd - an| / max(1, |an|)``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        if t.shape != g.shape:
            raise ShapeError(f"tensor shape {t.shape} != gradient shape {g.shape}")
        if not t.flags.c_contiguous:
            raise ValueError("tensors must be C-contiguous so they can be perturbed in place")
        flat, gflat = t.reshape(-1), g.reshape(-1)
        if t.size <= n_probes:
            idx = np.arange(t.size)
        else:
            idx = rng.choice(t.size, size=n_probes, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn()
            flat[i] = orig - eps
            fm = fn()
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            an = float(gflat[i])
            worst = max(worst, abs(fd - an) / max(1.0, abs(an)))
    return worst


_MAGIC = b"ACOL"
_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors to the portable ``ACOL`` container.

    Layout (little-endian): magic, u32 version, u32 count, then per tensor
    u32 name length, UTF-8 name, u8 dtype tag, u32 rank, u64 dims, raw data.
    """
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != _MAGIC:
        raise TensorFileError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != _VERSION:
            raise TensorFileError(f"{path}: unsupported format version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BI", buf, off)
            off += 5
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            dtype = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(buf):
                raise TensorFileError(f"{path}: truncated data for tensor {name!r}")
            arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
            out[name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise TensorFileError(f"{path}: corrupt tensor file ({exc})") from exc
    if off != len(buf):
        raise TensorFileError(f"{path}: {len(buf) - off} trailing bytes")
    return out
