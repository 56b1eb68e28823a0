"""Dense numerical kernels with hand-written forward and backward passes.

Every kernel follows the same calling convention: ``*_forward`` returns
``(out, cache)`` and ``*_backward(grad_out, cache)`` returns the gradient
with respect to the input while accumulating parameter gradients into the
``Parameter.grad`` buffers it was given.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DTYPE", "DimensionError", "NumericError", "Parameter",
    "dense_forward", "dense_backward", "relu_forward", "relu_backward",
    "conv_seq_forward", "conv_seq_backward", "maxpool_seq_forward",
    "maxpool_seq_backward", "l2norm_forward", "l2norm_backward",
    "GradCheckReport", "gradient_check",
]

_PRECISIONS = {"float64": np.float64, "float32": np.float32}
_precision = os.environ.get("TRANSKB_PRECISION", "float64")
if _precision not in _PRECISIONS:
    raise ImportError(f"TRANSKB_PRECISION must be float64 or float32, got {_precision!r}")
DTYPE = np.dtype(_PRECISIONS[_precision])

NORM_EPS = 1e-12


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(
                f"gradient shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


# -- dense -----------------------------------------------------------------

def dense_forward(x, W: Parameter, b: Parameter):
    """Affine map ``W x + b`` for a vector ``x`` or a batch of row vectors."""
    x = np.asarray(x, dtype=DTYPE)
    out_dim, in_dim = W.shape
    if x.shape[-1] != in_dim or b.shape != (out_dim,):
        raise DimensionError(
            f"dense: input {x.shape} incompatible with W {W.shape} and b {b.shape}")
    return x @ W.value.T + b.value, (x, W, b)


def dense_backward(grad_out, cache):
    x, W, b = cache
    g = np.asarray(grad_out, dtype=DTYPE)
    if g.shape[:-1] != x.shape[:-1] or g.shape[-1] != W.shape[0]:
        raise DimensionError(f"dense backward: grad {g.shape} vs input {x.shape}, W {W.shape}")
    g2 = g.reshape(-1, W.shape[0])
    x2 = x.reshape(-1, W.shape[1])
    W.grad += g2.T @ x2
    b.grad += g2.sum(axis=0)
    return g @ W.value


# -- relu ------------------------------------------------------------------

def relu_forward(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x, 0.0), x


def relu_backward(grad_out, cache):
    # subgradient at exactly 0 is 0
    return np.where(cache > 0, grad_out, 0.0)


# -- convolution over sequences ---------------------------------------------

def _same_padding(length, width, stride):
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + width - length, 0)
    return total // 2, total - total // 2


def conv_seq_forward(F, K: Parameter, bias: Parameter | None = None, stride=1, padding="valid"):
    """Multi-channel cross-correlation of feature maps ``F[c, h, L]``.

    ``K`` has shape ``(c_out, c, kh, kw)``.  The y axis is never padded and
    moves with stride 1; ``stride`` and ``padding`` ("valid" or "same") act
    on the x axis only.  Output shape is ``(c_out, h - kh + 1, L')``.  A
    leading batch axis ``F[B, c, h, L]`` is accepted and kept.
    """
    F = np.asarray(F, dtype=DTYPE)
    batched = F.ndim == 4
    if not batched:
        F = F[None]
    if F.ndim != 4 or K.value.ndim != 4:
        raise DimensionError(f"conv: expected F[c,h,L] and K[o,c,kh,kw], got {F.shape} and {K.shape}")
    n, c, h, length = F.shape
    c_out, c_k, kh, kw = K.shape
    if c_k != c:
        raise DimensionError(f"conv: input has {c} channels, kernel {K.shape} expects {c_k}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv: bias {bias.shape} does not match {c_out} output channels")
    if padding == "same":
        left, right = _same_padding(length, kw, stride)
    elif padding == "valid":
        left = right = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    padded_len = length + left + right
    if kh > h or kw > padded_len:
        raise DimensionError(
            f"conv: kernel {K.shape} larger than padded input {(c, h, padded_len)}")
    Fp = np.pad(F, ((0, 0), (0, 0), (0, 0), (left, right))) if left or right else F
    # (n, c, h', Lfull, kh, kw) -> strided along x -> im2col rows (n, h', L', c*kh*kw)
    windows = np.lib.stride_tricks.sliding_window_view(Fp, (kh, kw), axis=(2, 3))[:, :, :, ::stride]
    out_h, out_l = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_l, c * kh * kw)
    out = cols @ K.value.reshape(c_out, -1).T
    if bias is not None:
        out += bias.value
    out = out.reshape(n, out_h, out_l, c_out).transpose(0, 3, 1, 2)
    cache = (batched, Fp.shape, left, length, stride, cols, out_h, out_l, K, bias)
    return (out if batched else out[0]), cache


def conv_seq_backward(grad_out, cache):
    batched, fp_shape, left, length, stride, cols, out_h, out_l, K, bias = cache
    g = np.asarray(grad_out, dtype=DTYPE)
    if not batched:
        g = g[None]
    n, c, _, _ = fp_shape
    c_out, _, kh, kw = K.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
    K.grad += (g2.T @ cols).reshape(K.shape)
    if bias is not None:
        bias.grad += g2.sum(axis=0)
    gcols = (g2 @ K.value.reshape(c_out, -1)).reshape(n, out_h, out_l, c, kh, kw)
    grad_fp = np.zeros(fp_shape, dtype=DTYPE)
    x_end = (out_l - 1) * stride + 1
    for a in range(kh):
        for bx in range(kw):
            grad_fp[:, :, a:a + out_h, bx:bx + x_end:stride] += gcols[:, :, :, :, a, bx].transpose(0, 3, 1, 2)
    grad = grad_fp[:, :, :, left:left + length]
    return grad if batched else grad[0]


# -- max pooling over sequences ----------------------------------------------

def maxpool_seq_forward(F, width=2, stride=2):
    """Max-pool along the x axis of ``F[c, h, L]`` (or ``F[B, c, h, L]``).

    Inputs shorter than ``width`` are right-padded with zeros so at least
    one window exists; otherwise trailing positions that do not fill a
    window are dropped.
    """
    F = np.asarray(F, dtype=DTYPE)
    length = F.shape[-1]
    if length < 1:
        raise DimensionError("maxpool: empty sequence")
    Fp = F
    if length < width:
        Fp = np.pad(F, [(0, 0)] * (F.ndim - 1) + [(0, width - length)])
    windows = np.lib.stride_tricks.sliding_window_view(Fp, width, axis=-1)[..., ::stride, :]
    offsets = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, offsets[..., None], axis=-1)[..., 0]
    argmax = offsets + np.arange(out.shape[-1]) * stride
    return out, (F.shape, argmax)


def maxpool_seq_backward(grad_out, cache):
    f_shape, argmax = cache
    length = f_shape[-1]
    grad = np.zeros(f_shape[:-1] + (max(length, int(argmax.max()) + 1),), dtype=DTYPE)
    lead = np.indices(argmax.shape)[:-1]
    np.add.at(grad, (*lead, argmax), grad_out)
    # gradient landing on zero padding has no input to flow to
    return grad[..., :length]


# -- normalization output layer ---------------------------------------------

def l2norm_forward(x, W: Parameter, b: Parameter):
    """Affine map followed by division by its own L2 norm, row-wise."""
    z, dense_cache = dense_forward(x, W, b)
    norm = np.sqrt(np.sum(z * z, axis=-1, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise NumericError("degenerate normalization input")
    e = z / norm
    return e, (dense_cache, e, norm)


def l2norm_backward(grad_out, cache):
    dense_cache, e, norm = cache
    g = np.asarray(grad_out, dtype=DTYPE)
    grad_z = (g - e * np.sum(g * e, axis=-1, keepdims=True)) / norm
    return dense_backward(grad_z, dense_cache)


# -- finite-difference checking ---------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict          # name -> max relative error over checked coordinates
    checked: dict         # name -> number of coordinates compared
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tolerance


def gradient_check(loss_fn, arrays, analytic, step=1e-5, tolerance=1e-4,
                   floor=1e-8, exclude=None):
    """Compare analytic gradients to central differences.

    ``arrays`` maps names to the ndarrays ``loss_fn()`` reads; they are
    perturbed in place and restored.  ``analytic`` maps the same names to
    gradient arrays.  ``exclude`` optionally maps names to boolean masks of
    coordinates to skip (non-differentiable points).  The relative error of
    a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    errors, checked = {}, {}
    for name, arr in arrays.items():
        grad = np.asarray(analytic[name])
        mask = None if exclude is None else exclude.get(name)
        worst, count = 0.0, 0
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"{name}: array must be contiguous to perturb in place")
        for i in range(flat.size):
            if mask is not None and mask.reshape(-1)[i]:
                continue
            orig = flat[i]
            flat[i] = orig + step
            plus = loss_fn()
            flat[i] = orig - step
            minus = loss_fn()
            flat[i] = orig
            numeric = (plus - minus) / (2 * step)
            a = grad.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
            count += 1
        errors[name] = worst
        checked[name] = count
    return GradCheckReport(errors, checked, tolerance)
