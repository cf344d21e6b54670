"""Dense tensor kernels with explicit forward and backward passes.

Tensors are plain ``numpy.ndarray`` objects. Layouts follow the usual
channel-first convention: volumes are ``[N, C, T, H, W]`` and linear
layers take ``[batch, features]`` with weights ``[out, features]``.

There is no autograd graph. Every forward kernel returns whatever its
backward counterpart needs and the caller threads those caches through
a fixed layer sequence (see :mod:`vcp.model`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, ValidationError

__all__ = [
    "Conv3dSpec",
    "OptimState",
    "conv3d_forward",
    "conv3d_backward",
    "maxpool3d",
    "maxpool3d_backward",
    "global_avgpool3d",
    "global_avgpool3d_backward",
    "relu",
    "relu_backward",
    "linear_forward",
    "linear_backward",
    "softmax",
    "softmax_cross_entropy",
    "sgd_momentum_step",
    "finite_diff_gradcheck",
]

_AXES = ("T", "H", "W")


def _triple(v, name):
    if np.isscalar(v):
        v = (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValidationError(f"{name} must have 3 entries, got {v}")
    return v


@dataclass(frozen=True)
class Conv3dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel, "kernel"))
        object.__setattr__(self, "stride", _triple(self.stride, "stride"))
        object.__setattr__(self, "padding", _triple(self.padding, "padding"))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError("channel counts must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValidationError(
                f"invalid conv geometry kernel={self.kernel} "
                f"stride={self.stride} padding={self.padding}"
            )

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel

    def output_extents(self, extents):
        out = []
        for axis, n, k, s, p in zip(_AXES, extents, self.kernel, self.stride, self.padding):
            if n + 2 * p < k:
                raise DimensionError(
                    f"axis {axis}: padded extent {n + 2 * p} smaller than kernel {k}"
                )
            out.append((n + 2 * p - k) // s + 1)
        return tuple(out)


@dataclass
class OptimState:
    """SGD-with-momentum hyperparameters plus one velocity buffer per parameter."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")


def _check_conv_args(x, weights, bias, spec):
    if x.ndim != 5:
        raise DimensionError(f"conv3d input must be [N,C,T,H,W], got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"axis C: input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    if weights.shape != spec.weight_shape:
        raise DimensionError(f"weights shape {weights.shape} != {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias shape {bias.shape} != ({spec.out_channels},)")


def _im2col(x, spec):
    """Unfold into a ``[C*kt*kh*kw, N*T'*H'*W']`` matrix.

    Rows are ordered channel-major, then kernel offset. That order is the
    contraction order of every conv product below.
    """
    n, c = x.shape[:2]
    pt, ph, pw = spec.padding
    st, sh, sw = spec.stride
    kt, kh, kw = spec.kernel
    ot, oh, ow = spec.output_extents(x.shape[2:])
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))) if (pt or ph or pw) else x
    xp = xp.transpose(1, 0, 2, 3, 4)
    cols = np.empty((c, kt, kh, kw, n, ot, oh, ow), dtype=x.dtype)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                cols[:, a, b, d] = xp[:, :, a : a + st * ot : st, b : b + sh * oh : sh, d : d + sw * ow : sw]
    return cols.reshape(c * kt * kh * kw, n * ot * oh * ow)


def conv3d_forward(x, weights, bias, spec, return_cols=False):
    """3D cross-correlation of ``[N, C, T, H, W]`` with ``[O, C, kt, kh, kw]``.

    Computed as one matrix product over the unfolded input, so repeated
    calls on equal inputs agree bitwise. With ``return_cols`` the unfolded
    matrix is returned too and can be handed to :func:`conv3d_backward`.
    """
    _check_conv_args(x, weights, bias, spec)
    ot, oh, ow = spec.output_extents(x.shape[2:])
    cols = _im2col(x, spec)
    out = weights.reshape(spec.out_channels, -1) @ cols
    out = out.reshape(spec.out_channels, x.shape[0], ot, oh, ow).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1, 1)
    out = np.ascontiguousarray(out)
    return (out, cols) if return_cols else out


def conv3d_backward(grad_out, cached_input, weights, spec, cols=None, input_grad=True):
    """Gradients of :func:`conv3d_forward` w.r.t. input, weights and bias.

    ``input_grad=False`` skips the (costly) input gradient and returns
    ``None`` in its place, for the first layer of a network.
    """
    _check_conv_args(cached_input, weights, None, spec)
    ot, oh, ow = spec.output_extents(cached_input.shape[2:])
    n, c, t, h, w = cached_input.shape
    o = spec.out_channels
    if grad_out.shape != (n, o, ot, oh, ow):
        raise DimensionError(f"grad_out shape {grad_out.shape} != forward output {(n, o, ot, oh, ow)}")
    if cols is None:
        cols = _im2col(cached_input, spec)

    g2 = grad_out.transpose(1, 0, 2, 3, 4).reshape(o, -1)
    wm = weights.reshape(o, -1)
    grad_w = (g2 @ cols.T).reshape(weights.shape)
    grad_b = g2.sum(axis=1)
    if not input_grad:
        return None, grad_w.astype(weights.dtype, copy=False), grad_b.astype(weights.dtype, copy=False)

    kt, kh, kw = spec.kernel
    pt, ph, pw = spec.padding
    st, sh, sw = spec.stride
    dcols = (wm.T @ g2).reshape(c, kt, kh, kw, n, ot, oh, ow)
    gpad = np.zeros((c, n, t + 2 * pt, h + 2 * ph, w + 2 * pw), dtype=cached_input.dtype)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                gpad[:, :, a : a + st * ot : st, b : b + sh * oh : sh, d : d + sw * ow : sw] += dcols[:, a, b, d]
    grad_in = gpad[:, :, pt : pt + t, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3, 4)
    return (
        np.ascontiguousarray(grad_in),
        grad_w.astype(weights.dtype, copy=False),
        grad_b.astype(weights.dtype, copy=False),
    )


def maxpool3d(x, window, stride=None):
    """Max pooling over the last three axes of ``[N, C, T, H, W]``.

    Returns the pooled tensor and, per output voxel, the flat index of the
    winning input element. Ties go to the lowest linear index in the window.
    """
    window = _triple(window, "window")
    stride = window if stride is None else _triple(stride, "stride")
    if x.ndim != 5:
        raise DimensionError(f"maxpool3d input must be [N,C,T,H,W], got shape {x.shape}")
    for axis, n, k in zip(_AXES, x.shape[2:], window):
        if k > n:
            raise DimensionError(f"axis {axis}: pool window {k} larger than extent {n}")

    win = sliding_window_view(x, window, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    flat = win.reshape(win.shape[:5] + (-1,))
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]

    # local window offset -> flat index into x
    kt, kh, kw = window
    lt, rem = np.divmod(local, kh * kw)
    lh, lw = np.divmod(rem, kw)
    n, c, t, h, w = x.shape
    ot, oh, ow = out.shape[2:]
    it = np.arange(ot).reshape(-1, 1, 1) * stride[0] + lt
    ih = np.arange(oh).reshape(1, -1, 1) * stride[1] + lh
    iw = np.arange(ow).reshape(1, 1, -1) * stride[2] + lw
    nc = np.arange(n * c).reshape(n, c, 1, 1, 1)
    index = ((nc * t + it) * h + ih) * w + iw
    return np.ascontiguousarray(out), index


def maxpool3d_backward(grad_out, index, input_shape):
    size = int(np.prod(input_shape))
    g = np.bincount(index.ravel(), weights=grad_out.ravel(), minlength=size)
    return g.astype(grad_out.dtype).reshape(input_shape)


def global_avgpool3d(x):
    """Mean over T, H, W: ``[N, C, T, H, W] -> [N, C]``."""
    return x.mean(axis=(2, 3, 4))


def global_avgpool3d_backward(grad_out, input_shape):
    scale = 1.0 / float(np.prod(input_shape[2:]))
    g = (grad_out * np.asarray(scale, dtype=grad_out.dtype))[:, :, None, None, None]
    return np.ascontiguousarray(np.broadcast_to(g, input_shape))


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, cached_input):
    return np.where(cached_input > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def linear_forward(x, weights, bias):
    """Affine map ``x @ weights.T + bias`` with ``weights`` shaped [out, in]."""
    if x.ndim != 2:
        raise DimensionError(f"linear input must be [batch, features], got shape {x.shape}")
    if weights.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise DimensionError(
            f"linear weights {weights.shape} do not match {x.shape[1]} input features"
        )
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} != ({weights.shape[0]},)")
    return x @ weights.T + bias


def linear_backward(grad_out, cached_input, weights):
    if grad_out.shape != (cached_input.shape[0], weights.shape[0]):
        raise DimensionError(f"grad_out shape {grad_out.shape} mismatches linear layer")
    return grad_out @ weights, grad_out.T @ cached_input, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got shape {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} != ({logits.shape[0]},)")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValidationError(f"labels must lie in [0, {classes})")
    batch = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(batch)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1
    grad /= batch
    return loss, grad.astype(logits.dtype, copy=False)


def sgd_momentum_step(param, grad, state, name="param"):
    """In-place update ``v <- mu*v - lr*g; p <- p + v``.

    ``state.velocity[name]`` is created lazily with zeros.
    """
    if param.shape != grad.shape:
        raise DimensionError(f"{name}: grad shape {grad.shape} != param shape {param.shape}")
    v = state.velocity.get(name)
    if v is None:
        v = np.zeros_like(param)
        state.velocity[name] = v
    elif v.shape != param.shape:
        raise DimensionError(f"{name}: velocity shape {v.shape} != param shape {param.shape}")
    lr = np.asarray(state.learning_rate, dtype=param.dtype)
    mu = np.asarray(state.momentum, dtype=param.dtype)
    v *= mu
    v -= lr * grad
    param += v
    return param, state


def finite_diff_gradcheck(
    forward: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic: np.ndarray,
    epsilon: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Max relative error between ``analytic`` and central differences.

    ``forward`` maps ``params`` (perturbed in place, restored afterwards)
    to a scalar. Both sides are compared in float64; per element the error
    is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if params.dtype != np.float64:
        raise ValidationError("gradcheck requires float64 parameters")
    if analytic.shape != params.shape:
        raise DimensionError(f"analytic grad shape {analytic.shape} != {params.shape}")
    numeric = np.zeros_like(params)
    flat = params.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(forward(params))
        flat[i] = orig - epsilon
        fm = float(forward(params))
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * epsilon)
    analytic = np.asarray(analytic, dtype=np.float64)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NumericError("non-finite value encountered during gradcheck")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if params.size else 0.0
