"""Pure-numpy group-LIF kernels, same calling convention as ``_lif_native``.

Chains are vectorised across every (outer, block, inner) coordinate at once;
only the position inside a block is looped. The chained axis is zero-padded
up to a multiple of ``groups``. Padding sits at the tail of the last block,
so it never feeds back into real positions, and its upstream gradient is
zero.
"""
from __future__ import annotations

import numpy as np


def set_num_threads(n: int) -> None:
    pass


def get_max_threads() -> int:
    return 1


def _blocked(a: np.ndarray, groups: int) -> np.ndarray:
    outer, extent, inner = a.shape
    nblocks = -(-extent // groups)
    pad = nblocks * groups - extent
    if pad:
        a = np.concatenate([a, np.zeros((outer, pad, inner), dtype=a.dtype)], axis=1)
    return a.reshape(outer, nblocks, groups, inner)


def forward(x, tau, vth, groups, r, u, o) -> None:
    dtype = x.dtype.type
    tau = dtype(tau)
    vth = dtype(vth)
    extent = x.shape[1]
    groups = min(groups, extent) if extent else groups
    xb = _blocked(x, groups)
    ub = np.empty_like(xb)
    ob = np.empty(xb.shape, dtype=np.uint8)
    cur = xb[:, :, 0, :].copy()
    for t in range(groups):
        if t:
            cur = tau * cur * (1 - ob[:, :, t - 1, :]).astype(x.dtype) + xb[:, :, t, :]
        ub[:, :, t, :] = cur
        ob[:, :, t, :] = cur > vth
    shape = xb.shape[0], -1, xb.shape[3]
    u[...] = ub.reshape(shape)[:, :extent, :]
    o[...] = ob.reshape(shape)[:, :extent, :]
    np.maximum(u, vth, out=r)


def backward(dr, u, o, tau, groups, dx, part_tau, part_vth) -> None:
    dtype = dr.dtype.type
    tau = dtype(tau)
    extent = dr.shape[1]
    groups = min(groups, extent) if extent else groups
    drb = _blocked(dr, groups)
    ub = _blocked(u, groups)
    keep = 1 - _blocked(o, groups).astype(dr.dtype)
    fired = 1 - keep
    dxb = np.empty_like(drb)
    contrib = np.zeros_like(drb)
    gnext = np.zeros_like(drb[:, :, 0, :])
    for t in range(groups - 1, -1, -1):
        kt = keep[:, :, t, :]
        if t < groups - 1:
            contrib[:, :, t, :] = gnext * ub[:, :, t, :] * kt
        gnext = drb[:, :, t, :] * fired[:, :, t, :] + gnext * tau * kt
        dxb[:, :, t, :] = gnext
    dx[...] = dxb.reshape(drb.shape[0], -1, drb.shape[3])[:, :extent, :]
    part_tau[...] = contrib.astype(np.float64).sum(axis=(1, 2, 3))
    part_vth[...] = (drb * keep).astype(np.float64).sum(axis=(1, 2, 3))
