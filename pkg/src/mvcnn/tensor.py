"""Dense (n, c, h, w) arrays and the layer primitives built on them.

Tensors are plain numpy arrays. ``as_tensor`` validates and casts to float32;
the primitives themselves preserve the dtype they are given, which lets the
gradient checks run in float64.

Every layer comes as a forward/backward pair. Convolution is valid (no
padding) with stride 1; max pooling is a fixed 2x2/stride-2 window that drops
an odd trailing row or column.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatchError, DimensionError, ParameterError

DTYPE = np.float32
BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Return ``data`` as a contiguous rank-4 array, validating its shape."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise DimensionError(f"expected a rank-4 (n, c, h, w) tensor, got shape {arr.shape}")
    for axis, size in zip("nchw", arr.shape):
        if size < 1:
            raise DimensionError(f"axis {axis} has size {size}; every dimension must be >= 1")
    return arr


def _check_rank4(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} must be rank-4 (n, c, h, w), got shape {x.shape}")


@dataclass
class LayerParams:
    """Trainable state of one conv or dense layer.

    Conv weights are ``(out, in, k, k)``; dense weights are ``(out, in, 1, 1)``.
    The batch-norm vectors are present only for layers followed by batch norm.
    """

    weights: np.ndarray
    bias: np.ndarray
    bn_gamma: Optional[np.ndarray] = None
    bn_beta: Optional[np.ndarray] = None
    bn_running_mean: Optional[np.ndarray] = None
    bn_running_var: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise DimensionError(f"weights must be rank-4, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"bias length {self.bias.shape} does not match weights' leading dimension "
                f"{self.weights.shape[0]}"
            )
        if self.bn_running_var is not None and np.any(self.bn_running_var < 0):
            raise ParameterError("bn_running_var must be nonnegative")

    @property
    def has_bn(self) -> bool:
        return self.bn_gamma is not None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"weights": self.weights, "bias": self.bias}
        if self.has_bn:
            out.update(
                bn_gamma=self.bn_gamma,
                bn_beta=self.bn_beta,
                bn_running_mean=self.bn_running_mean,
                bn_running_var=self.bn_running_var,
            )
        return out

    def copy(self) -> "LayerParams":
        return LayerParams(**{k: v.copy() for k, v in self.arrays().items()})

    @classmethod
    def batchnorm(cls, channels: int, dtype=DTYPE) -> "LayerParams":
        """Stand-alone batch-norm parameters (identity weights, zero bias)."""
        return cls(
            weights=np.ones((channels, 1, 1, 1), dtype=dtype),
            bias=np.zeros(channels, dtype=dtype),
            bn_gamma=np.ones(channels, dtype=dtype),
            bn_beta=np.zeros(channels, dtype=dtype),
            bn_running_mean=np.zeros(channels, dtype=dtype),
            bn_running_var=np.ones(channels, dtype=dtype),
        )


@dataclass
class GradBundle:
    """Loss gradients for one layer.

    For batch norm, ``d_weights`` holds d/d_gamma and ``d_bias`` d/d_beta.
    """

    d_input: np.ndarray
    d_weights: Optional[np.ndarray] = None
    d_bias: Optional[np.ndarray] = None


# --- convolution -----------------------------------------------------------


def _conv_shapes(x: np.ndarray, w: np.ndarray) -> tuple[int, int, int]:
    _check_rank4(x)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv weights must be (out, in, k, k), got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"channel axis mismatch: input has {x.shape[1]} channels, weights expect {w.shape[1]}"
        )
    k = w.shape[2]
    if k > x.shape[2]:
        raise DimensionError(f"height axis: kernel {k} larger than input height {x.shape[2]}")
    if k > x.shape[3]:
        raise DimensionError(f"width axis: kernel {k} larger than input width {x.shape[3]}")
    return k, x.shape[2] - k + 1, x.shape[3] - k + 1


# bounds the im2col buffer of one chunk (in elements)
_IM2COL_BUDGET = 1 << 25


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(n, c, h, w) -> (n*oh*ow, c*k*k), rows ordered (n, oh, ow), cols (c, ki, kj)."""
    n, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (n, c, oh, ow, k, k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * k * k)


def _chunks(n: int, per_sample: int):
    step = max(1, _IM2COL_BUDGET // max(per_sample, 1))
    for lo in range(0, n, step):
        yield slice(lo, min(n, lo + step))


def conv2d_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Valid, stride-1 cross-correlation plus bias (im2col + one GEMM per chunk)."""
    w = params.weights
    k, oh, ow = _conv_shapes(x, w)
    n, c = x.shape[:2]
    o = w.shape[0]
    w2 = w.reshape(o, -1)
    out = np.empty((n, o, oh, ow), dtype=np.result_type(x, w))
    for sl in _chunks(n, oh * ow * c * k * k):
        cols = _im2col(x[sl], k)
        y = cols @ w2.T + params.bias
        out[sl] = y.reshape(-1, oh, ow, o).transpose(0, 3, 1, 2)
    return out


def conv2d_backward(
    x: np.ndarray, params: LayerParams, d_out: np.ndarray, input_grad: bool = True
) -> GradBundle:
    """Analytic conv gradients.

    ``d_input`` is the full convolution of ``d_out`` with the flipped kernels;
    pass ``input_grad=False`` to skip it (first layer), leaving it ``None``.
    """
    w = params.weights
    k, oh, ow = _conv_shapes(x, w)
    n, c = x.shape[:2]
    o = w.shape[0]
    expected = (n, o, oh, ow)
    if d_out.shape != expected:
        raise DimensionError(f"d_output shape {d_out.shape} does not match forward output {expected}")
    d_w = np.zeros((o, c * k * k), dtype=np.result_type(x, w, d_out))
    for sl in _chunks(n, oh * ow * c * k * k):
        dy = d_out[sl].transpose(0, 2, 3, 1).reshape(-1, o)
        d_w += dy.T @ _im2col(x[sl], k)
    d_b = d_out.sum(axis=(0, 2, 3))
    d_x = None
    if input_grad:
        padded = np.pad(d_out, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        d_x = conv2d_forward(padded, LayerParams(flipped, np.zeros(c, dtype=w.dtype)))
    return GradBundle(d_x, d_w.reshape(w.shape), d_b)


# --- activation ------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    # gradient at exactly zero is zero
    return np.where(x > 0, d_out, 0).astype(d_out.dtype, copy=False)


# --- max pooling -----------------------------------------------------------


@dataclass
class PoolIndices:
    """Flat positions (into the input's h*w plane) of each window's maximum."""

    flat: np.ndarray  # (n, c, oh, ow) int64
    input_shape: tuple


def maxpool2d(x: np.ndarray) -> tuple[np.ndarray, PoolIndices]:
    """2x2, stride-2 max pooling; an odd trailing row or column is dropped."""
    _check_rank4(x)
    n, c, h, w = x.shape
    if h < 2:
        raise DimensionError(f"height axis: maxpool needs at least 2 rows, got {h}")
    if w < 2:
        raise DimensionError(f"width axis: maxpool needs at least 2 columns, got {w}")
    oh, ow = h // 2, w // 2
    win = x[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, 4)
    # argmax returns the first maximum, i.e. row-major tie breaking within the window
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(oh)[:, None] + local // 2
    cols = 2 * np.arange(ow)[None, :] + local % 2
    return out, PoolIndices(rows * w + cols, x.shape)


def maxpool2d_backward(indices: PoolIndices, d_out: np.ndarray) -> np.ndarray:
    n, c, h, w = indices.input_shape
    if d_out.shape != indices.flat.shape:
        raise DimensionError(
            f"d_output shape {d_out.shape} does not match pooled shape {indices.flat.shape}"
        )
    d_x = np.zeros((n, c, h * w), dtype=d_out.dtype)
    # windows never overlap, so a plain scatter is safe
    np.put_along_axis(d_x, indices.flat.reshape(n, c, -1), d_out.reshape(n, c, -1), axis=-1)
    return d_x.reshape(n, c, h, w)


# --- batch normalization ---------------------------------------------------


def _bn_vectors(params: LayerParams, c: int):
    if not params.has_bn:
        raise ParameterError("layer has no batch-norm parameters")
    if params.bn_gamma.shape != (c,):
        raise DimensionError(
            f"channel axis mismatch: input has {c} channels, batch norm has {params.bn_gamma.shape[0]}"
        )
    return params.bn_gamma, params.bn_beta


def batchnorm_forward(
    x: np.ndarray,
    params: LayerParams,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    epsilon: float = BN_EPSILON,
) -> np.ndarray:
    """Per-channel normalization over (n, h, w).

    In train mode the batch statistics are used and the running statistics in
    ``params`` are updated in place.
    """
    _check_rank4(x)
    gamma, beta = _bn_vectors(params, x.shape[1])
    if mode == "train":
        if x.shape[0] * x.shape[2] * x.shape[3] < 2:
            raise DegenerateBatchError("train-mode batch norm needs more than one value per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        rm, rv = params.bn_running_mean, params.bn_running_var
        rm[...] = (1 - momentum) * rm + momentum * mean
        rv[...] = (1 - momentum) * rv + momentum * var
    elif mode == "infer":
        mean, var = params.bn_running_mean, params.bn_running_var
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype)
    scale = (gamma * inv_std).astype(x.dtype)
    shift = (beta - mean * scale).astype(x.dtype)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batchnorm_backward(
    x: np.ndarray,
    params: LayerParams,
    d_out: np.ndarray,
    mode: str = "train",
    epsilon: float = BN_EPSILON,
) -> GradBundle:
    gamma, _ = _bn_vectors(params, x.shape[1])
    axes = (0, 2, 3)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = params.bn_running_mean, params.bn_running_var
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype)[None, :, None, None]
    x_hat = (x - mean[None, :, None, None]) * inv_std
    d_gamma = (d_out * x_hat).sum(axis=axes)
    d_beta = d_out.sum(axis=axes)
    g = gamma[None, :, None, None]
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        d_x = (g * inv_std / m) * (
            m * d_out - d_beta[None, :, None, None] - x_hat * d_gamma[None, :, None, None]
        )
    else:
        d_x = d_out * g * inv_std
    return GradBundle(d_x.astype(d_out.dtype, copy=False), d_gamma, d_beta)


# --- pooling / dense / softmax / dropout -----------------------------------


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    _check_rank4(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(d_out: np.ndarray, input_shape: tuple) -> np.ndarray:
    n, c, h, w = input_shape
    d = d_out.reshape(n, c, 1, 1) / (h * w)
    return np.broadcast_to(d, input_shape).astype(d_out.dtype)


def _flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def dense_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """``W @ x + b`` per sample; ``x`` is flattened past the batch axis. Returns (n, out)."""
    flat = _flatten(x)
    w = params.weights.reshape(params.weights.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise DimensionError(f"feature axis mismatch: input has {flat.shape[1]} features, dense expects {w.shape[1]}")
    return flat @ w.T + params.bias


def dense_backward(x: np.ndarray, params: LayerParams, d_out: np.ndarray) -> GradBundle:
    flat = _flatten(x)
    w = params.weights.reshape(params.weights.shape[0], -1)
    if d_out.shape != (flat.shape[0], w.shape[0]):
        raise DimensionError(f"d_output shape {d_out.shape} does not match ({flat.shape[0]}, {w.shape[0]})")
    d_w = (d_out.T @ flat).reshape(params.weights.shape)
    d_b = d_out.sum(axis=0)
    d_x = (d_out @ w).reshape(x.shape)
    return GradBundle(d_x, d_w, d_b)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the class axis (axis 1)."""
    z = logits.reshape(logits.shape[0], -1)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).reshape(logits.shape)


def dropout_mask(shape: tuple, rate: float, seed: int, dtype=DTYPE) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return np.ones(shape, dtype=dtype)
    keep = np.random.default_rng(seed).random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def dropout(x: np.ndarray, rate: float, mode: str = "train", seed: int = 0) -> np.ndarray:
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x
    return x * dropout_mask(x.shape, rate, seed, dtype=x.dtype)
