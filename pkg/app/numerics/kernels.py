# app/numerics/kernels.py
"""
Dense kernels with exact analytic backward passes.

Arrays are float64 numpy arrays laid out H x W x C (channels last). Label masks are int64
H x W arrays. Every function here is pure: inputs are never modified.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np


LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class GradPair:
    """A value and the gradient of some scalar with respect to it."""
    value: np.ndarray
    grad: np.ndarray

    def __post_init__(self):
        if self.value.shape != self.grad.shape:
            raise ValueError(f"GradPair shape mismatch: value {self.value.shape} vs grad {self.grad.shape}")


def _as_float(x: np.ndarray, name: str, ndim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dims, got shape {x.shape}")
    return x


def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int = 1) -> int:
    span = dilation * (k - 1) + 1
    return (size + 2 * pad - span) // stride + 1


def _check_conv(x: np.ndarray, kernel: np.ndarray, stride: int, pad: int, dilation: int) -> Tuple[int, int]:
    kh, kw, cin, _ = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial dims must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if x.shape[2] != cin:
        raise ValueError(f"input has {x.shape[2]} channels but kernel expects {cin} (input {x.shape}, kernel {kernel.shape})")
    h_out = conv_output_size(x.shape[0], kh, stride, pad, dilation)
    w_out = conv_output_size(x.shape[1], kw, stride, pad, dilation)
    if h_out < 1 or w_out < 1:
        raise ValueError(f"input {x.shape} too small for kernel {kernel.shape} with pad {pad}")
    return h_out, w_out


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0, dilation: int = 1) -> np.ndarray:
    """
    Cross-correlation of an H x W x Cin map with a kh x kw x Cin x Cout kernel.

    Output is H' x W' x Cout with H' = floor((H + 2*pad - span) / stride) + 1,
    span = dilation*(kh-1) + 1. Accumulation runs over kernel offsets in row-major order and,
    within each offset, over input channels in ascending order, so the sum at every output
    element is formed in (i, j, c) order.
    """
    x = _as_float(x, "input", 3)
    kernel = _as_float(kernel, "kernel", 4)
    h_out, w_out = _check_conv(x, kernel, stride, pad, dilation)
    kh, kw, cin, cout = kernel.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    out = np.zeros((h_out, w_out, cout))
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            window = xp[r0:r0 + stride * (h_out - 1) + 1:stride, c0:c0 + stride * (w_out - 1) + 1:stride, :]
            for c in range(cin):
                out += window[:, :, c, None] * kernel[i, j, c]
    return out


def conv2d_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * conv2d(x, kernel)) with respect to x and kernel."""
    x = _as_float(x, "input", 3)
    kernel = _as_float(kernel, "kernel", 4)
    grad_out = _as_float(grad_out, "grad_out", 3)
    h_out, w_out = _check_conv(x, kernel, stride, pad, dilation)
    kh, kw, cin, cout = kernel.shape
    if grad_out.shape != (h_out, w_out, cout):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match conv output {(h_out, w_out, cout)}")

    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    grad_xp = np.zeros_like(xp)
    grad_kernel = np.zeros_like(kernel)
    g_flat = grad_out.reshape(-1, cout)
    for i in range(kh):
        r0 = i * dilation
        rows = slice(r0, r0 + stride * (h_out - 1) + 1, stride)
        for j in range(kw):
            c0 = j * dilation
            cols = slice(c0, c0 + stride * (w_out - 1) + 1, stride)
            window = xp[rows, cols, :]
            grad_kernel[i, j] = window.reshape(-1, cin).T @ g_flat
            # strided positions inside one offset are distinct, so in-place add is safe
            grad_xp[rows, cols, :] += grad_out @ kernel[i, j].T
    if pad:
        grad_x = grad_xp[pad:pad + x.shape[0], pad:pad + x.shape[1], :]
    else:
        grad_x = grad_xp
    return np.ascontiguousarray(grad_x), grad_kernel


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass grad_out where x > 0; the subgradient at exactly 0 is 0."""
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if x.shape != grad_out.shape:
        raise ValueError(f"relu_backward shape mismatch: x {x.shape} vs grad {grad_out.shape}")
    return np.where(x > 0.0, grad_out, 0.0)


def _linear_sampling(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices and weights for align-corners-false linear sampling along one axis."""
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    return i0, i1, lam


def resize_bilinear(x: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Bilinear resize of an H x W x C map, sampling at pixel centers (align_corners=False)."""
    x = _as_float(x, "input", 3)
    if h2 < 1 or w2 < 1:
        raise ValueError(f"target size must be positive, got {h2}x{w2}")
    h, w, _ = x.shape
    if (h2, w2) == (h, w):
        return x.copy()
    r0, r1, rl = _linear_sampling(h, h2)
    rows = x[r0] * (1.0 - rl)[:, None, None] + x[r1] * rl[:, None, None]
    c0, c1, cl = _linear_sampling(w, w2)
    return rows[:, c0] * (1.0 - cl)[None, :, None] + rows[:, c1] * cl[None, :, None]


def resize_nearest_labels(mask: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Nearest-neighbour resize of an H x W label mask, sampling at pixel centers."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"label mask must be 2-D, got shape {mask.shape}")
    if h2 < 1 or w2 < 1:
        raise ValueError(f"target size must be positive, got {h2}x{w2}")
    h, w = mask.shape
    if (h2, w2) == (h, w):
        return mask.astype(np.int64, copy=True)
    rows = np.minimum(np.floor((np.arange(h2) + 0.5) * (h / h2)).astype(np.int64), h - 1)
    cols = np.minimum(np.floor((np.arange(w2) + 0.5) * (w / w2)).astype(np.int64), w - 1)
    return mask[rows[:, None], cols[None, :]].astype(np.int64)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-subtraction."""
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(soft: np.ndarray, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if soft.shape[:-1] != target.shape:
        raise ValueError(f"soft map {soft.shape} and target {target.shape} disagree on H x W")
    n_classes = soft.shape[-1]
    if target.size and (target.min() < 0 or target.max() >= n_classes):
        raise ValueError(f"target labels must lie in [0, {n_classes - 1}], got range [{target.min()}, {target.max()}]")
    return target.astype(np.int64)


def _picked(soft: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Checked (soft, target) plus the probability each pixel gives its target class."""
    soft = np.asarray(soft, dtype=np.float64)
    target = _check_labels(soft, target)
    return soft, target, np.take_along_axis(soft, target[..., None], axis=-1)[..., 0]


def cross_entropy(soft: np.ndarray, target: np.ndarray) -> float:
    """Mean over pixels of -log soft[target], probabilities clamped to >= 1e-12."""
    _, _, picked = _picked(soft, target)
    return float(-np.log(np.maximum(picked, LOG_CLAMP)).mean())


def one_hot(target: np.ndarray, n_classes: int) -> np.ndarray:
    target = np.asarray(target, dtype=np.int64)
    return (target[..., None] == np.arange(n_classes)).astype(np.float64)


def softmax_cross_entropy_grad(soft: np.ndarray, target: np.ndarray) -> np.ndarray:
    """
    Gradient of cross_entropy(softmax(s), target) with respect to the scores s.

    Pixels whose target probability sits below the clamp contribute a constant to the loss,
    so their rows are zero.
    """
    soft, target, picked = _picked(soft, target)
    grad = (soft - one_hot(target, soft.shape[-1])) / target.size
    grad[picked < LOG_CLAMP] = 0.0
    return grad
