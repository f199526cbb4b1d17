"""Dense float64 tensor ops with hand-derived backward passes.

Tensors are plain C-ordered ``numpy.ndarray`` of float64. Every backward here
returns exact gradients of the corresponding forward map; the test suite pins
them against central finite differences and nested-loop oracles. Convolutions
are stride-1 with same padding (k odd) only, pooling is disjoint 2x2x2 —
the minimal vocabulary for a VGG-style volumetric encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

ZERO_NORM_TOL = 1e-12


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operation's contract."""


@dataclass
class LayerGrads:
    """Gradient of a layer: with respect to its input and to each parameter."""

    d_input: Tensor
    d_params: list[Tensor]


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# 3D convolution (stride 1, same padding)


def _im2col(x: Tensor, k: int) -> Tensor:
    """(C,D,H,W) -> (D*H*W, C*k^3) patch matrix with zero padding."""
    c, d, h, w = x.shape
    p = k // 2
    xp = np.zeros((c, d + 2 * p, h + 2 * p, w + 2 * p))
    xp[:, p:p + d, p:p + h, p:p + w] = x
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))  # (C,D,H,W,k,k,k)
    return win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(d * h * w, c * k * k * k)


def _conv_shapes(x: Tensor, weights: Tensor, bias: Tensor | None):
    _check(x.ndim == 4, f"conv3d input must be (C,D,H,W), got shape {x.shape}")
    _check(weights.ndim == 5, f"conv3d weights must be (Cout,Cin,k,k,k), got shape {weights.shape}")
    c_out, c_in, k, k2, k3 = weights.shape
    _check(k == k2 == k3, f"conv3d kernel must be cubic, got {weights.shape[2:]}")
    _check(k % 2 == 1, f"conv3d kernel size must be odd, got {k}")
    _check(c_in == x.shape[0], f"conv3d channel mismatch: input {x.shape[0]}, weights expect {c_in}")
    if bias is not None:
        _check(bias.shape == (c_out,), f"conv3d bias must be ({c_out},), got {bias.shape}")
    return c_out, c_in, k


def conv3d_forward(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """out[o,z,y,x] = bias[o] + sum_{c,dz,dy,dx} w[o,c,dz,dy,dx] * in[c,z+dz-p,y+dy-p,x+dx-p]."""
    _check(stride == 1, "only stride-1 convolutions are supported")
    c_out, _, k = _conv_shapes(x, weights, bias)
    _, d, h, w = x.shape
    col = _im2col(x, k)
    out = col @ weights.reshape(c_out, -1).T + bias
    return np.ascontiguousarray(out.T).reshape(c_out, d, h, w)


def conv3d_backward(x: Tensor, weights: Tensor, d_output: Tensor, stride: int = 1) -> LayerGrads:
    _check(stride == 1, "only stride-1 convolutions are supported")
    c_out, c_in, k = _conv_shapes(x, weights, None)
    _check(d_output.shape == (c_out,) + x.shape[1:],
           f"conv3d d_output shape {d_output.shape} != {(c_out,) + x.shape[1:]}")
    d_y2 = d_output.reshape(c_out, -1)
    d_bias = d_y2.sum(axis=1)
    d_weights = (d_y2 @ _im2col(x, k)).reshape(weights.shape)
    # input gradient = same-padded correlation of d_output with the
    # spatially flipped, channel-swapped kernel
    w_flip = np.ascontiguousarray(weights.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    d_x = conv3d_forward(d_output, w_flip, np.zeros(c_in))
    return LayerGrads(d_x, [d_weights, d_bias])


# ---------------------------------------------------------------------------
# 2x2x2 max pooling


def _pool_windows(x: Tensor):
    c, d, h, w = x.shape
    _check(d % 2 == 0 and h % 2 == 0 and w % 2 == 0,
           f"maxpool3d requires even spatial extents, got {x.shape[1:]}")
    # window axis is ordered (dz,dy,dx), dx fastest == ascending linear index
    win = x.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2)
    return win.transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, d // 2, h // 2, w // 2, 8)


def maxpool3d_forward(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    _check(window == 2 and stride == 2, "only 2x2x2/stride-2 pooling is supported")
    return _pool_windows(x).max(axis=-1)


def maxpool3d_backward(x: Tensor, d_output: Tensor, window: int = 2, stride: int = 2) -> LayerGrads:
    _check(window == 2 and stride == 2, "only 2x2x2/stride-2 pooling is supported")
    win = _pool_windows(x)
    _check(d_output.shape == win.shape[:4],
           f"maxpool3d d_output shape {d_output.shape} != {win.shape[:4]}")
    am = win.argmax(axis=-1)  # ties: first occurrence == lowest linear index
    c, d2, h2, w2 = am.shape
    dz, rem = np.divmod(am, 4)
    dy, dx = np.divmod(rem, 2)
    ci, zi, yi, xi = np.indices((c, d2, h2, w2), sparse=False)
    d_x = np.zeros_like(x)
    d_x[ci, zi * 2 + dz, yi * 2 + dy, xi * 2 + dx] = d_output
    return LayerGrads(d_x, [])


# ---------------------------------------------------------------------------
# pointwise and dense layers


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, d_output: Tensor) -> LayerGrads:
    _check(x.shape == d_output.shape, f"relu d_output shape {d_output.shape} != {x.shape}")
    return LayerGrads(d_output * (x > 0.0), [])


def dense_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    _check(x.ndim == 1 and weights.ndim == 2, "dense expects vector input and (m,n) weights")
    m, n = weights.shape
    _check(x.shape == (n,), f"dense input shape {x.shape} != ({n},)")
    _check(bias.shape == (m,), f"dense bias shape {bias.shape} != ({m},)")
    return weights @ x + bias


def dense_backward(x: Tensor, weights: Tensor, d_output: Tensor) -> LayerGrads:
    m, n = weights.shape
    _check(x.shape == (n,) and d_output.shape == (m,),
           f"dense backward shapes {x.shape}/{d_output.shape} != ({n},)/({m},)")
    return LayerGrads(weights.T @ d_output, [np.outer(d_output, x), d_output.copy()])


def l2_normalize_forward(v: Tensor) -> Tensor:
    _check(v.ndim == 1, f"l2_normalize expects a vector, got shape {v.shape}")
    norm = float(np.linalg.norm(v))
    if norm < ZERO_NORM_TOL:
        raise ValueError(f"l2_normalize: vector norm {norm} below {ZERO_NORM_TOL}")
    return v / norm


def l2_normalize_backward(v: Tensor, d_output: Tensor) -> LayerGrads:
    _check(v.shape == d_output.shape, f"l2_normalize d_output shape {d_output.shape} != {v.shape}")
    norm = float(np.linalg.norm(v))
    if norm < ZERO_NORM_TOL:
        raise ValueError(f"l2_normalize: vector norm {norm} below {ZERO_NORM_TOL}")
    z = v / norm
    return LayerGrads((d_output - z * (z @ d_output)) / norm, [])
