"""Non-LIF layers as forward/backward function pairs on NCHW arrays.

Backward functions take the forward *input* (not a cache object) and return
the input gradient followed by parameter gradients. Everything that needs
randomness takes an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import check_tensor4

__all__ = [
    "LinearParams",
    "DwConvParams",
    "GroupNormParams",
    "trunc_normal",
    "init_linear",
    "init_dwconv",
    "init_group_norm",
    "channel_mlp",
    "channel_mlp_backward",
    "dwconv3x3",
    "dwconv3x3_backward",
    "group_norm",
    "group_norm_backward",
    "gelu",
    "gelu_backward",
    "patchify",
    "unpatchify",
    "patch_embed",
    "patch_embed_backward",
    "merge_gather",
    "merge_scatter",
    "patch_merge",
    "patch_merge_backward",
    "dropout_mask",
    "drop_path_mask",
    "dropout",
    "drop_path",
]

GELU_K = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715


@dataclass
class LinearParams:
    weight: np.ndarray  # (C_out, C_in)
    bias: np.ndarray  # (C_out,)


@dataclass
class DwConvParams:
    kernel: np.ndarray  # (C, 3, 3)
    bias: np.ndarray  # (C,)


@dataclass
class GroupNormParams:
    num_groups: int
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if self.num_groups < 1 or self.gamma.shape[0] % self.num_groups:
            raise ValueError(
                f"channel count {self.gamma.shape[0]} not divisible by num_groups {self.num_groups}"
            )
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) redrawn outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_linear(rng, c_in: int, c_out: int, dtype=np.float32) -> LinearParams:
    return LinearParams(trunc_normal(rng, (c_out, c_in), dtype=dtype), np.zeros(c_out, dtype=dtype))


def init_dwconv(rng, channels: int, dtype=np.float32) -> DwConvParams:
    return DwConvParams(trunc_normal(rng, (channels, 3, 3), dtype=dtype), np.zeros(channels, dtype=dtype))


def init_group_norm(channels: int, num_groups: int = 1, dtype=np.float32, eps: float = 1e-5) -> GroupNormParams:
    return GroupNormParams(num_groups, np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype), eps)


# -- channel MLP (1x1 projection) ---------------------------------------------

def channel_mlp(x: np.ndarray, p: LinearParams) -> np.ndarray:
    check_tensor4(x)
    n, c, h, w = x.shape
    c_out, c_in = p.weight.shape
    if c != c_in:
        raise ValueError(f"channel mismatch: input has {c} channels, weight expects {c_in}")
    out = np.matmul(p.weight, x.reshape(n, c, h * w))
    out += p.bias[None, :, None]
    return out.reshape(n, c_out, h, w)


def channel_mlp_backward(dout: np.ndarray, x: np.ndarray, p: LinearParams):
    n, c, h, w = x.shape
    c_out = p.weight.shape[0]
    d3 = dout.reshape(n, c_out, h * w)
    x3 = x.reshape(n, c, h * w)
    dweight = np.tensordot(d3, x3, axes=([0, 2], [0, 2]))
    dbias = d3.sum(axis=(0, 2))
    dx = np.matmul(p.weight.T, d3).reshape(n, c, h, w)
    return dx, dweight, dbias


# -- depthwise 3x3 convolution, stride 1, zero padding 1 ----------------------

def dwconv3x3(x: np.ndarray, p: DwConvParams) -> np.ndarray:
    check_tensor4(x)
    n, c, h, w = x.shape
    if p.kernel.shape != (c, 3, 3):
        raise ValueError(f"channel mismatch: input has {c} channels, kernel is {p.kernel.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.empty_like(x)
    out[...] = p.bias[None, :, None, None]
    for i in range(3):
        for j in range(3):
            out += p.kernel[None, :, i, j, None, None] * xp[:, :, i:i + h, j:j + w]
    return out


def dwconv3x3_backward(dout: np.ndarray, x: np.ndarray, p: DwConvParams):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dxp = np.zeros_like(xp)
    dkernel = np.empty_like(p.kernel)
    for i in range(3):
        for j in range(3):
            dkernel[:, i, j] = np.einsum("nchw,nchw->c", dout, xp[:, :, i:i + h, j:j + w])
            dxp[:, :, i:i + h, j:j + w] += p.kernel[None, :, i, j, None, None] * dout
    dbias = dout.sum(axis=(0, 2, 3))
    return dxp[:, :, 1:h + 1, 1:w + 1].copy(), dkernel, dbias


# -- group normalisation -------------------------------------------------------

def _gn_stats(x: np.ndarray, p: GroupNormParams):
    n, c, h, w = x.shape
    if c != p.gamma.shape[0]:
        raise ValueError(f"channel mismatch: input has {c} channels, norm expects {p.gamma.shape[0]}")
    if c % p.num_groups:
        raise ValueError(f"channel count {c} not divisible by num_groups {p.num_groups}")
    xg = x.reshape(n, p.num_groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = np.square(xg - mean).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = ((xg - mean) * inv_std).reshape(x.shape)
    return xhat, inv_std


def group_norm(x: np.ndarray, p: GroupNormParams) -> np.ndarray:
    check_tensor4(x)
    xhat, _ = _gn_stats(x, p)
    return xhat * p.gamma[None, :, None, None] + p.beta[None, :, None, None]


def group_norm_backward(dout: np.ndarray, x: np.ndarray, p: GroupNormParams):
    n = x.shape[0]
    xhat, inv_std = _gn_stats(x, p)
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = (dout * p.gamma[None, :, None, None]).reshape(n, p.num_groups, -1)
    xh = xhat.reshape(n, p.num_groups, -1)
    dx = inv_std * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=2, keepdims=True))
    return dx.reshape(x.shape), dgamma, dbeta


# -- GELU (tanh approximation) -------------------------------------------------

def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_K * (x + GELU_C * (x * x * x))))


def gelu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    t = np.tanh(GELU_K * (x + GELU_C * (x * x * x)))
    dt = GELU_K * (1.0 + 3.0 * GELU_C * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


# -- patch embedding -----------------------------------------------------------

def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*p*p, H/p, W/p), features ordered (c, dy, dx)."""
    n, c, h, w = img.shape
    if patch < 1 or h % patch or w % patch:
        raise ValueError(f"image extent {h}x{w} not divisible by patch size {patch}")
    hp, wp = h // patch, w // patch
    t = img.reshape(n, c, hp, patch, wp, patch).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(t).reshape(n, c * patch * patch, hp, wp)


def unpatchify(cols: np.ndarray, channels: int, patch: int) -> np.ndarray:
    n, _, hp, wp = cols.shape
    t = cols.reshape(n, channels, patch, patch, hp, wp).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(t).reshape(n, channels, hp * patch, wp * patch)


def patch_embed(img: np.ndarray, p: LinearParams, patch: int = 4) -> np.ndarray:
    check_tensor4(img, "img")
    if img.shape[1] * patch * patch != p.weight.shape[1]:
        raise ValueError(
            f"projection expects {p.weight.shape[1]} inputs, image gives "
            f"{img.shape[1]}*{patch}*{patch}"
        )
    return channel_mlp(patchify(img, patch), p)


def patch_embed_backward(dout, img, p: LinearParams, patch: int = 4):
    cols = patchify(img, patch)
    dcols, dweight, dbias = channel_mlp_backward(dout, cols, p)
    return unpatchify(dcols, img.shape[1], patch), dweight, dbias


# -- patch merging -------------------------------------------------------------

_MERGE_ORDER = ((0, 0), (0, 1), (1, 0), (1, 1))  # (row parity, column parity)


def merge_gather(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, 4C, H/2, W/2) concatenating 2x2 neighbours."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"patch merging needs even extents, got {h}x{w}")
    return np.concatenate([x[:, :, a::2, b::2] for a, b in _MERGE_ORDER], axis=1)


def merge_scatter(g: np.ndarray) -> np.ndarray:
    n, c4, h2, w2 = g.shape
    c = c4 // 4
    x = np.empty((n, c, 2 * h2, 2 * w2), dtype=g.dtype)
    for k, (a, b) in enumerate(_MERGE_ORDER):
        x[:, :, a::2, b::2] = g[:, k * c:(k + 1) * c]
    return x


def patch_merge(x: np.ndarray, p: LinearParams) -> np.ndarray:
    check_tensor4(x)
    return channel_mlp(merge_gather(x), p)


def patch_merge_backward(dout, x, p: LinearParams):
    dg, dweight, dbias = channel_mlp_backward(dout, merge_gather(x), p)
    return merge_scatter(dg), dweight, dbias


# -- stochastic regularisers -------------------------------------------------------

def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop rate must lie in [0, 1), got {rate}")


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    _check_rate(rate)
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def drop_path_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """One keep/drop draw per sample, shaped (N, 1, 1, 1)."""
    _check_rate(rate)
    keep = rng.random((shape[0], 1, 1, 1)) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool) -> np.ndarray:
    _check_rate(rate)
    if not training or rate == 0.0:
        return x
    return x * dropout_mask(x.shape, rate, rng, x.dtype)


def drop_path(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool) -> np.ndarray:
    _check_rate(rate)
    if not training or rate == 0.0:
        return x
    return x * drop_path_mask(x.shape, rate, rng, x.dtype)
