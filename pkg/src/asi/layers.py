"""Convolution, fully-connected, ReLU and SGD with explicit backward passes.

Weight gradients consume the stored layer input; input gradients consume
only the weights. The low-rank weight-gradient routines take the stored
input in factored form and never rebuild it densely.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels, macs
from .decomposition import TuckerFactors
from .tensor import storage_dtype, truncated_svd


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid conv spec {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid conv spec {self}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def out_hw(self, h, w):
        d, s, p = self.kernel, self.stride, self.padding
        ho, wo = (h + 2 * p - d) // s + 1, (w + 2 * p - d) // s + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for {self}")
        return ho, wo

    def out_shape(self, in_shape):
        b, c, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(f"input has {c} channels, layer expects {self.in_channels}")
        return (b, self.out_channels) + self.out_hw(h, w)


def _check_grad_out(grad_out, spec, in_shape):
    expected = spec.out_shape(in_shape)
    if tuple(grad_out.shape) != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} != expected {expected}")


def _flat_grad(grad_out):
    # (B, C', H', W') -> (C', B*H'*W') in the im2col row order
    g = np.asarray(grad_out, dtype=np.float64)
    return g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)


def _weight_grad(x, grad_out, spec):
    cols = kernels.im2col(x, spec.kernel, spec.kernel, spec.stride, spec.padding)
    g = _flat_grad(grad_out)
    return (g @ cols).reshape(grad_out.shape[1], x.shape[1], spec.kernel, spec.kernel)


def conv_forward(x, w, spec, bias=None):
    """Cross-correlation of ``x`` (B, C, H, W) with kernel ``w`` (C', C, D, D)."""
    x = np.asarray(x)
    if tuple(w.shape) != spec.weight_shape:
        raise ValueError(f"kernel shape {w.shape} != {spec.weight_shape}")
    b, _, ho, wo = spec.out_shape(x.shape)
    cols = kernels.im2col(x, spec.kernel, spec.kernel, spec.stride, spec.padding)
    wm = np.asarray(w, dtype=np.float64).reshape(spec.out_channels, -1)
    macs.add("conv_forward", cols.shape[0] * cols.shape[1] * wm.shape[0])
    out = cols @ wm.T
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    out = out.reshape(b, ho, wo, spec.out_channels).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out, dtype=storage_dtype(x, w))


def conv_backward_weight(x_stored, grad_out, spec):
    """dL/dW from the dense stored input and the output gradient."""
    x_stored = np.asarray(x_stored)
    _check_grad_out(grad_out, spec, x_stored.shape)
    b, _, ho, wo = grad_out.shape
    macs.add("conv_backward_weight",
             spec.out_channels * b * ho * wo * spec.in_channels * spec.kernel ** 2)
    return _weight_grad(x_stored, grad_out, spec).astype(storage_dtype(x_stored, grad_out))


def conv_backward_input(w, grad_out, spec, in_shape):
    """dL/dA for an input of shape ``in_shape``: full correlation with the flipped kernel."""
    in_shape = tuple(in_shape)
    _check_grad_out(grad_out, spec, in_shape)
    wm = np.asarray(w, dtype=np.float64).reshape(spec.out_channels, -1)
    g = _flat_grad(grad_out)
    macs.add("conv_backward_input", g.shape[1] * wm.shape[0] * wm.shape[1])
    dcols = g.T @ wm
    dx = kernels.col2im(dcols, in_shape, spec.kernel, spec.kernel, spec.stride, spec.padding)
    return dx.astype(storage_dtype(w, grad_out))


def conv_backward_bias(grad_out):
    return np.asarray(grad_out, dtype=np.float64).sum(axis=(0, 2, 3)).astype(
        storage_dtype(grad_out))


def conv_backward_weight_lowrank(f: TuckerFactors, grad_out, spec):
    """dL/dW from a Tucker-factored stored input.

    Contraction order: project the output gradient onto the batch factor,
    expand the core along height then width, correlate spatially over the
    reduced batch, and finally expand along channels. The MAC count is

        r1·B·C'·H'·W' + r1·r2·r3·r4·H + r1·r2·r4·H·W
        + r1·r2·C'·H'·W'·D² + r2·C'·C·D²
    """
    shape = tuple(f.source_shape)
    _check_grad_out(grad_out, spec, shape)
    u1, u2, u3, u4 = (np.asarray(u, dtype=np.float64) for u in f.factors)
    core = np.asarray(f.core, dtype=np.float64)
    r1, r2, r3, r4 = core.shape
    b, c, h, w = shape
    cp, ho, wo, d = spec.out_channels, grad_out.shape[2], grad_out.shape[3], spec.kernel

    g = np.asarray(grad_out, dtype=np.float64)
    g1 = np.tensordot(u1.T, g, axes=(1, 0))                     # (r1, C', H', W')
    z = np.einsum("abcd,hc->abhd", core, u3, optimize=True)      # (r1, r2, H, r4)
    y = np.einsum("abhd,wd->abhw", z, u4, optimize=True)         # (r1, r2, H, W)
    inner = ConvSpec(r2, cp, d, spec.stride, spec.padding)
    t = _weight_grad(y, g1, inner)                               # (C', r2, D, D)
    dw = np.einsum("orij,cr->ocij", t, u2, optimize=True)        # (C', C, D, D)

    macs.add("conv_backward_weight_lowrank",
             r1 * b * cp * ho * wo + r1 * r2 * r3 * r4 * h + r1 * r2 * r4 * h * w
             + r1 * r2 * cp * ho * wo * d * d + r2 * cp * c * d * d)
    return dw.astype(storage_dtype(f.core, grad_out))


def fc_forward(x, w, bias=None):
    """Affine map ``x @ w.T + bias`` for x (B, in) and w (out, in)."""
    x = np.asarray(x)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"fc shape mismatch: x {x.shape}, w {w.shape}")
    macs.add("fc_forward", x.shape[0] * w.shape[0] * w.shape[1])
    out = np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64).T
    if bias is not None:
        out += bias
    return out.astype(storage_dtype(x, w))


def fc_backward(x_stored, w, grad_out):
    """Returns (weight_grad, input_grad, bias_grad)."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != (x_stored.shape[0], w.shape[0]):
        raise ValueError(f"grad_out shape {g.shape} does not match the layer")
    dt = storage_dtype(x_stored, w, grad_out)
    dw = g.T @ np.asarray(x_stored, dtype=np.float64)
    dx = g @ np.asarray(w, dtype=np.float64)
    return dw.astype(dt), dx.astype(dt), g.sum(axis=0).astype(dt)


@dataclass(frozen=True)
class LowRankMatrix:
    """``left @ right`` with left (B, r) orthonormal and right (r, in)."""

    left: np.ndarray
    right: np.ndarray

    @property
    def stored_elements(self):
        return int(self.left.size + self.right.size)


def compress_matrix(x, r):
    """Rank-``r`` truncated factorization of a stored fc input."""
    u, s, v = truncated_svd(x, r)
    dt = storage_dtype(x)
    return LowRankMatrix(u.astype(dt), (s[:, None] * v.T).astype(dt))


def fc_backward_weight_lowrank(x: LowRankMatrix, grad_out):
    """Weight gradient ``grad_outᵀ @ left @ right`` without forming the input."""
    g = np.asarray(grad_out, dtype=np.float64)
    gl = g.T @ np.asarray(x.left, dtype=np.float64)
    return (gl @ np.asarray(x.right, dtype=np.float64)).astype(storage_dtype(x.left, grad_out))


def relu_forward(x):
    """Returns (output, mask); the mask is what backward needs (one bit per element)."""
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype), mask


def relu_backward(mask, grad_out):
    return np.where(mask, grad_out, 0).astype(grad_out.dtype)


def sgd_step(params, grads, buffers, lr, momentum=0.0, weight_decay=0.0, clip_l2=None):
    """One SGD update over dicts of named arrays.

    Order: clip the global L2 norm of all gradients to ``clip_l2``, add
    weight decay, update the momentum buffers, step the parameters.

    Returns:
        (new_params, new_buffers)
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    names = list(params)
    g = {k: np.asarray(grads[k], dtype=np.float64) for k in names}
    if clip_l2 is not None:
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
        if norm > clip_l2:
            g = {k: v * (clip_l2 / norm) for k, v in g.items()}
    new_params, new_buffers = {}, {}
    for k in names:
        p = np.asarray(params[k], dtype=np.float64)
        step = g[k] + weight_decay * p if weight_decay else g[k]
        if momentum:
            prev = buffers.get(k)
            step = step if prev is None else momentum * np.asarray(prev, np.float64) + step
        dt = params[k].dtype
        new_buffers[k] = step.astype(dt)
        new_params[k] = (p - lr * step).astype(dt)
    return new_params, new_buffers
