"""Differentiable neural-network kernels on :class:`Tensor`.

Convolutions use a flat-offset formulation: the zero-padded volume is
flattened per channel, and each kernel tap becomes one contiguous slice of
that buffer, so a k^3 convolution is k^3 matrix products without an im2col
copy. Output columns that fall in the padded margin are computed and
discarded.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import ConfigError, ShapeError, Tensor, as_tensor

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


# -- activations --------------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)
    return Tensor._result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
    return Tensor._result(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def softmax_lastaxis(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (x,), backward, "softmax")


# -- normalisation --------------------------------------------------------------

def _normalize(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...], affine_shape, eps: float, op: str):
    if eps <= 0:
        raise ConfigError(f"{op}: eps must be positive, got {eps}")
    xd = x.data
    n = int(np.prod([xd.shape[a] for a in axes]))
    if n == 0:
        raise ShapeError(f"{op}: empty normalisation group")
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(affine_shape)
    bd = beta.data.reshape(affine_shape)
    out = xhat * gd + bd
    red = tuple(i for i in range(xd.ndim) if affine_shape[i] == 1)

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (
                gh
                - gh.mean(axis=axes, keepdims=True)
                - xhat * (gh * xhat).mean(axis=axes, keepdims=True)
            )
        gg = (g * xhat).sum(axis=red).reshape(gamma.shape) if gamma.requires_grad else None
        gb = g.sum(axis=red).reshape(beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor._result(out, (x, gamma, beta), backward, op)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalise over the last axis (channels of a token matrix)."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine params must have shape ({c},)")
    affine = (1,) * (x.ndim - 1) + (c,)
    return _normalize(x, gamma, beta, (x.ndim - 1,), affine, eps, "layer_norm")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel normalisation over the spatial axes of an (N, C, ...) tensor."""
    if x.ndim < 3:
        raise ShapeError("instance_norm expects (N, C, *spatial)")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm affine params must have shape ({c},)")
    affine = (1, c) + (1,) * (x.ndim - 2)
    return _normalize(x, gamma, beta, tuple(range(2, x.ndim)), affine, eps, "instance_norm")


# -- dense layers -------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"linear: input features {xd.shape[-1]} != weight in-features {wd.shape[1]}")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._result(out, parents, backward, "linear")


# -- convolutions -----------------------------------------------------------

def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation of (N, Cin, H, W, D) with (Cout, Cin, k, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError("conv3d expects 5-D input and weight")
    n, cin, h, w, d = x.shape
    cout, wcin, k, k2, k3 = weight.shape
    if not (k == k2 == k3):
        raise ShapeError("conv3d kernel must be cubic")
    if wcin != cin:
        raise ShapeError(f"conv3d: input has {cin} channels, weight expects {wcin}")
    if not (k % 2 == 1 or k == 2):
        raise ConfigError(f"conv3d: kernel size {k} unsupported (odd or 2)")
    if stride < 1 or padding < 0:
        raise ConfigError("conv3d: stride must be >= 1 and padding >= 0")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    p1, p2, p3 = h + 2 * padding, w + 2 * padding, d + 2 * padding
    f1, f2, f3 = p1 - k + 1, p2 - k + 1, p3 - k + 1  # stride-1 extents
    if min(f1, f2, f3) < 1:
        raise ValueError(f"conv3d: zero-size output for input {x.shape[2:]}, k={k}, padding={padding}")
    o1, o2, o3 = (f1 - 1) // stride + 1, (f2 - 1) // stride + 1, (f3 - 1) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2, (padding,) * 2)) if padding else x.data
    flat = np.ascontiguousarray(xp).reshape(n, cin, p1 * p2 * p3)
    span = (f1 - 1) * p2 * p3 + (f2 - 1) * p3 + f3
    offsets = [
        (a, b, c, a * p2 * p3 + b * p3 + c) for a in range(k) for b in range(k) for c in range(k)
    ]
    wd = weight.data
    acc = np.zeros((n, cout, f1 * p2 * p3))
    for a, b, c, off in offsets:
        acc[:, :, :span] += wd[:, :, a, b, c] @ flat[:, :, off : off + span]
    full = acc.reshape(n, cout, f1, p2, p3)[:, :, :, :f2, :f3]
    out = full[:, :, ::stride, ::stride, ::stride]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((n, cout, f1, p2, p3))
        gfull[:, :, : f1 : stride, : f2 : stride, : f3 : stride] = g
        gflat = gfull.reshape(n, cout, -1)
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros((n, cin, p1 * p2 * p3))
            for a, b, c, off in offsets:
                gxp[:, :, off : off + span] += wd[:, :, a, b, c].T @ gflat[:, :, :span]
            gxp = gxp.reshape(n, cin, p1, p2, p3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w, padding : padding + d]
        if weight.requires_grad:
            gw = np.empty_like(wd)
            gs = gflat[:, :, :span]
            for a, b, c, off in offsets:
                gw[:, :, a, b, c] = (gs @ flat[:, :, off : off + span].transpose(0, 2, 1)).sum(axis=0)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "conv3d")


def transposed_conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, k: int | None = None) -> Tensor:
    """Non-overlapping transposed convolution (k == stride == 2).

    ``weight`` is (Cin, Cout, 2, 2, 2); every output voxel receives exactly one
    input voxel.
    """
    kk = weight.shape[2] if k is None else k
    if stride != 2 or kk != 2 or weight.shape[2:] != (2, 2, 2):
        raise ConfigError(f"transposed_conv3d supports only stride=k=2 (got stride={stride}, k={kk})")
    if x.ndim != 5:
        raise ShapeError("transposed_conv3d expects 5-D input")
    n, cin, h, w, d = x.shape
    if weight.shape[0] != cin:
        raise ShapeError(f"transposed_conv3d: input has {cin} channels, weight expects {weight.shape[0]}")
    cout = weight.shape[1]
    wd = weight.data
    y = np.einsum("nihwd,ioabc->nohawbdc", x.data, wd, optimize=True)
    out = y.reshape(n, cout, 2 * h, 2 * w, 2 * d)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1, 1)

    def backward(g):
        g8 = g.reshape(n, cout, h, 2, w, 2, d, 2)
        gx = np.einsum("nohawbdc,ioabc->nihwd", g8, wd, optimize=True) if x.requires_grad else None
        gw = np.einsum("nihwd,nohawbdc->ioabc", x.data, g8, optimize=True) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "transposed_conv3d")


# -- resampling ------------------------------------------------------------

def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    mat = np.zeros((n_out, n_in))
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def trilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Separable align-corners trilinear upsampling of an (N, C, H, W, D) tensor."""
    if int(factor) != factor or factor < 2:
        raise ConfigError(f"upsample factor must be an integer >= 2, got {factor}")
    if x.ndim != 5:
        raise ShapeError("trilinear_upsample expects 5-D input")
    factor = int(factor)
    mats = [interp_matrix(s, s * factor) for s in x.shape[2:]]
    out = x.data
    for ax, m in zip((2, 3, 4), mats):
        out = np.moveaxis(np.tensordot(m, np.moveaxis(out, ax, 0), axes=(1, 0)), 0, ax)

    def backward(g):
        for ax, m in zip((2, 3, 4), mats):
            g = np.moveaxis(np.tensordot(m.T, np.moveaxis(g, ax, 0), axes=(1, 0)), 0, ax)
        return (g,)

    return Tensor._result(np.ascontiguousarray(out), (x,), backward, "trilinear_upsample")
