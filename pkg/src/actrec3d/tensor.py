"""Numeric kernels for the 3D-CNN layers.

Tensors are plain numpy arrays.  Storage is float32; every reduction
accumulates in float64 and the result is cast back to the promoted dtype of
the inputs, so float64 inputs (used by the gradient checks) stay float64.

All kernels accept either a single sample (``[C, T, H, W]`` / ``[D]``) or a
batch with a leading axis (``[B, C, T, H, W]`` / ``[B, D]``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_AXES = ("T", "H", "W")


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent for a kernel."""


@dataclass(frozen=True)
class ConvGeom:
    """Convolution geometry: stride 1 and zero 'same' padding on every axis."""

    kernel: tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        k = tuple(int(v) for v in self.kernel)
        if len(k) != 3:
            raise ValueError(f"kernel must have 3 dims, got {self.kernel!r}")
        for name, v in zip(("kT", "kH", "kW"), k):
            if v < 1 or v % 2 == 0:
                raise ValueError(f"{name}={v} must be a positive odd integer")
        object.__setattr__(self, "kernel", k)

    @property
    def pad(self) -> tuple[int, int, int]:
        return tuple((k - 1) // 2 for k in self.kernel)


def _out_dtype(*arrays) -> np.dtype:
    dt = np.result_type(*arrays)
    return dt if dt in (np.float32, np.float64) else np.dtype(np.float32)


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected {ndim} or {ndim + 1} dims, got shape {x.shape}")


def _windows(x: np.ndarray, geom: ConvGeom) -> np.ndarray:
    """Zero-pad ``x`` [B,C,T,H,W] and return a [B,C,T,H,W,kT,kH,kW] view."""
    pt, ph, pw = geom.pad
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    return sliding_window_view(xp, geom.kernel, axis=(2, 3, 4))


def _check_conv(x: np.ndarray, weights: np.ndarray, geom: ConvGeom) -> None:
    if weights.ndim != 5:
        raise ShapeError(f"weights must be [Cout,Cin,kT,kH,kW], got {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"axis Cin: input has {x.shape[1]} channels, weights expect {weights.shape[1]}"
        )
    for axis, k, kw in zip(("kT", "kH", "kW"), geom.kernel, weights.shape[2:]):
        if k != kw:
            raise ShapeError(f"axis {axis}: geometry kernel {k} != weights {kw}")


def conv3d_forward(input, weights, bias, geom: ConvGeom | None = None) -> np.ndarray:
    """Same-padded, stride-1 3D convolution (cross-correlation).

    ``input`` is [Cin,T,H,W] or [B,Cin,T,H,W]; output has Cout channels and the
    same spatial/temporal dims.
    """
    geom = geom or ConvGeom(tuple(np.shape(weights)[2:]))
    x, single = _batched(input, 4)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    _check_conv(x, weights, geom)
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"axis Cout: bias shape {bias.shape} != ({weights.shape[0]},)")
    dt = _out_dtype(x, weights, bias)

    win = _windows(x.astype(np.float64, copy=False), geom)
    # [B,T,H,W,Cout]
    out = np.tensordot(win, weights.astype(np.float64), axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out += bias.astype(np.float64)
    out = np.moveaxis(out, -1, 1).astype(dt)
    return out[0] if single else out


def conv3d_backward(input, weights, geom: ConvGeom | None, grad_out,
                    need_input_grad: bool = True):
    """Gradients of :func:`conv3d_forward` w.r.t. input, weights and bias.

    With ``need_input_grad=False`` the input gradient is skipped and returned
    as ``None`` (first layer of a network).
    """
    geom = geom or ConvGeom(tuple(np.shape(weights)[2:]))
    x, single = _batched(input, 4)
    g, _ = _batched(grad_out, 4)
    weights = np.asarray(weights)
    _check_conv(x, weights, geom)
    expected = (x.shape[0], weights.shape[0]) + x.shape[2:]
    if g.shape != expected:
        raise ShapeError(f"grad_out shape {g.shape[int(single):]} != forward output "
                         f"{expected[int(single):]}")
    dt = _out_dtype(x, weights, g)
    g64 = g.astype(np.float64, copy=False)

    win = _windows(x.astype(np.float64, copy=False), geom)
    grad_w = np.tensordot(g64, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    grad_b = g64.sum(axis=(0, 2, 3, 4))

    if not need_input_grad:
        return None, grad_w.astype(dt), grad_b.astype(dt)

    # Adjoint of a stride-1 same conv: same conv of grad_out with the
    # spatially flipped, channel-transposed kernel.
    w_adj = np.ascontiguousarray(
        np.flip(weights.astype(np.float64), axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4))
    gwin = _windows(g64, geom)
    grad_x = np.moveaxis(
        np.tensordot(gwin, w_adj, axes=([1, 5, 6, 7], [1, 2, 3, 4])), -1, 1)

    grad_x = grad_x.astype(dt)
    return (grad_x[0] if single else grad_x), grad_w.astype(dt), grad_b.astype(dt)


@dataclass(frozen=True)
class PoolIndex:
    """Argmax routing recorded by :func:`maxpool3d_forward`.

    ``indices`` holds, for every pooled cell, the flat (row-major) index into
    the full input tensor of the element that won the max.
    """

    input_shape: tuple[int, ...]
    indices: np.ndarray


def maxpool3d_forward(input, window=(2, 2, 2)) -> tuple[np.ndarray, PoolIndex]:
    """Disjoint 2x2x2 max pooling with floor semantics.

    Trailing odd frames/rows/cols are dropped.  Ties resolve to the first
    element of the block in row-major scan order.
    """
    if tuple(window) != (2, 2, 2):
        raise ValueError(f"only a (2,2,2) window is supported, got {window!r}")
    x, single = _batched(input, 4)
    B, C, T, H, W = x.shape
    for name, n in zip(_AXES, (T, H, W)):
        if n < 2:
            raise ShapeError(f"axis {name}: size {n} < 2 cannot be pooled")
    To, Ho, Wo = T // 2, H // 2, W // 2
    xc = x[:, :, : 2 * To, : 2 * Ho, : 2 * Wo]
    blocks = (xc.reshape(B, C, To, 2, Ho, 2, Wo, 2)
                .transpose(0, 1, 2, 4, 6, 3, 5, 7)
                .reshape(B, C, To, Ho, Wo, 8))
    local = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]

    dt_, dh, dw = local // 4, (local // 2) % 2, local % 2
    b, c, t, h, w = np.indices((B, C, To, Ho, Wo), sparse=True)
    flat = np.ravel_multi_index(
        (b, c, 2 * t + dt_, 2 * h + dh, 2 * w + dw), (B, C, T, H, W))
    if single:
        out, flat = out[0], flat[0]
    return out, PoolIndex(tuple(np.shape(input)), flat)


def maxpool3d_backward(index: PoolIndex, grad_out) -> np.ndarray:
    """Route ``grad_out`` back to the argmax positions only."""
    grad_out = np.asarray(grad_out)
    if not isinstance(index, PoolIndex):
        raise TypeError("index must be the PoolIndex returned by maxpool3d_forward")
    if grad_out.shape != index.indices.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match pooled shape "
            f"{index.indices.shape}; stale or mismatched index map")
    grad_in = np.zeros(int(np.prod(index.input_shape)), dtype=_out_dtype(grad_out))
    # pooled blocks are disjoint, so plain assignment cannot collide
    grad_in[index.indices.ravel()] = grad_out.ravel()
    return grad_in.reshape(index.input_shape)


def dense_forward(input, weights, bias) -> np.ndarray:
    x, single = _batched(input, 1)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise ShapeError(f"axis D: input dim {x.shape[1]} vs weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"axis U: bias shape {bias.shape} != ({weights.shape[0]},)")
    dt = _out_dtype(x, weights, bias)
    out = x.astype(np.float64) @ weights.astype(np.float64).T + bias.astype(np.float64)
    out = out.astype(dt)
    return out[0] if single else out


def dense_backward(input, weights, grad_out):
    x, single = _batched(input, 1)
    g, _ = _batched(grad_out, 1)
    weights = np.asarray(weights)
    if weights.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise ShapeError(f"axis D: input dim {x.shape[1]} vs weights {weights.shape}")
    if g.shape != (x.shape[0], weights.shape[0]):
        raise ShapeError(f"axis U: grad_out shape {np.shape(grad_out)} vs "
                         f"{weights.shape[0]} units")
    dt = _out_dtype(x, weights, g)
    g64 = g.astype(np.float64)
    grad_x = (g64 @ weights.astype(np.float64)).astype(dt)
    grad_w = (g64.T @ x.astype(np.float64)).astype(dt)
    grad_b = g64.sum(axis=0).astype(dt)
    return (grad_x[0] if single else grad_x), grad_w, grad_b


def relu(input) -> np.ndarray:
    x = np.asarray(input)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(input, grad_out) -> np.ndarray:
    x = np.asarray(input)
    grad_out = np.asarray(grad_out)
    if x.shape != grad_out.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0, grad_out, 0).astype(_out_dtype(grad_out), copy=False)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target):
    """Softmax + negative log-likelihood.

    For a single ``[K]`` logit vector returns ``(loss, probs, grad_logits)``
    with a float loss.  For ``[B, K]`` logits and ``B`` targets, losses and
    gradients are per sample (not averaged).  Probabilities are float64.
    """
    z, single = _batched(logits, 1)
    tgt = np.atleast_1d(np.asarray(target))
    K = z.shape[1]
    if tgt.shape != (z.shape[0],):
        raise ShapeError(f"expected {z.shape[0]} targets, got shape {tgt.shape}")
    if not np.issubdtype(tgt.dtype, np.integer):
        raise TypeError("targets must be integer class indices")
    if np.any(tgt < 0) or np.any(tgt >= K):
        raise ValueError(f"target out of range [0, {K}): {tgt.tolist()}")

    shifted = z.astype(np.float64) - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    rows = np.arange(z.shape[0])
    loss = -log_probs[rows, tgt]
    grad = probs.copy()
    grad[rows, tgt] -= 1.0
    if single:
        return float(loss[0]), probs[0], grad[0]
    return loss, probs, grad
