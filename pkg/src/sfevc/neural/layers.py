"""Fused differentiable layers on batched sequences.

Sequences are ``(B, T, C)`` tensors. Variable lengths are carried as an
integer array ``lengths`` of shape ``(B,)``; frames at or beyond an
example's length are padding, kept at zero between layers. A 2-D
``(T, C)`` input is treated as a batch of one.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, _node, _sigmoid, as_tensor, reshape


def length_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    """``(B, T, 1)`` float mask that is 1 on valid frames."""
    return (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)[..., None]


def _batched(x: Tensor):
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def apply_mask(x: Tensor, lengths) -> Tensor:
    if lengths is None:
        return x
    m = length_mask(lengths, x.shape[1])
    return _node(x.data * m, (x,), lambda g: (g * m,))


# ------------------------------------------------------------------ conv1d


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, lengths=None) -> Tensor:
    """Same-padded 1-D cross-correlation along time.

    ``weight`` has shape ``(K, C_in, C_out)`` with odd ``K``; output frame
    ``t`` is ``sum_k x[t + k - K//2] @ weight[k]`` (+ bias), zero outside
    the valid frames.
    """
    x, squeeze = _batched(as_tensor(x))
    k, cin, cout = weight.shape
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.shape[-1] != cin:
        raise ValueError(f"conv1d expects {cin} input channels, got {x.shape[-1]}")
    bsz, t, _ = x.shape
    half = k // 2
    xd = x.data
    if lengths is not None:
        xd = xd * length_mask(lengths, t)
    xp = np.pad(xd, ((0, 0), (half, half), (0, 0)))
    cols = np.stack([xp[:, j : j + t] for j in range(k)], axis=2).reshape(bsz, t, k * cin)
    wmat = weight.data.reshape(k * cin, cout)
    y = cols @ wmat
    if bias is not None:
        y = y + bias.data
    mask = length_mask(lengths, t) if lengths is not None else None
    if mask is not None:
        y = y * mask

    def back(g):
        if mask is not None:
            g = g * mask
        gw = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        gcols = (g @ wmat.T).reshape(bsz, t, k, cin)
        gxp = np.zeros((bsz, t + 2 * half, cin))
        for j in range(k):
            gxp[:, j : j + t] += gcols[:, :, j]
        gx = gxp[:, half : half + t]
        if mask is not None:
            gx = gx * mask
        gb = g.sum(axis=(0, 1)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _unbatch(_node(y, parents, back), squeeze)


# -------------------------------------------------------------- group norm


def group_norm(
    x: Tensor,
    groups: int,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    eps: float = 1e-5,
    lengths=None,
) -> Tensor:
    """Group normalisation with statistics over all valid frames of each example."""
    x, squeeze = _batched(as_tensor(x))
    bsz, t, c = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"{groups} groups do not divide {c} channels")
    cg = c // groups
    m = length_mask(lengths, t) if lengths is not None else np.ones((bsz, t, 1))
    m4 = m[..., None]  # (B, T, 1, 1)
    count = m.sum(axis=1)[:, 0] * cg  # (B,)
    xg = x.data.reshape(bsz, t, groups, cg)
    mu = (xg * m4).sum(axis=(1, 3)) / count[:, None]  # (B, G)
    xc = (xg - mu[:, None, :, None]) * m4
    var = (xc**2).sum(axis=(1, 3)) / count[:, None]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[:, None, :, None]
    xhat_flat = xhat.reshape(bsz, t, c)
    y = xhat_flat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    y = y * m

    def back(g):
        g = g * m
        gg = gb = None
        if beta is not None:
            gb = g.sum(axis=(0, 1))
        if gamma is not None:
            gg = (g * xhat_flat).sum(axis=(0, 1))
            g = g * gamma.data
        gh = g.reshape(bsz, t, groups, cg)
        n = count[:, None, None, None]
        mean_gh = (gh * m4).sum(axis=(1, 3), keepdims=True) / n
        mean_ghx = (gh * xhat).sum(axis=(1, 3), keepdims=True) / n
        gx = inv[:, None, :, None] * (gh - mean_gh - xhat * mean_ghx) * m4
        out = [gx.reshape(bsz, t, c)]
        if gamma is not None:
            out.append(gg)
        if beta is not None:
            out.append(gb)
        return tuple(out)

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return _unbatch(_node(y, parents, back), squeeze)


# ------------------------------------------------------------------- BLSTM


def reverse_index(lengths: np.ndarray, t: int) -> np.ndarray:
    """Index that reverses each example within its valid length, padding left in place."""
    ar = np.arange(t)[None, :]
    lens = np.asarray(lengths)[:, None]
    return np.where(ar < lens, lens - 1 - ar, ar)


def blstm(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, lengths=None) -> Tensor:
    """Bidirectional LSTM; returns ``(B, T, 2H)`` = [forward | backward].

    Weights are stacked per direction: ``wx (2, C, 4H)``, ``wh (2, H, 4H)``,
    ``b (2, 4H)``. Gate order is input, forget, output, cell. The backward
    direction runs over each example reversed within its own length, so
    padding never leaks into valid frames. Both directions share one
    time loop.
    """
    x, squeeze = _batched(as_tensor(x))
    bsz, t, cin = x.shape
    h4 = wx.shape[2]
    hid = h4 // 4
    if hid < 1:
        raise ValueError("hidden size must be >= 1")
    if wx.shape[1] != cin:
        raise ValueError(f"blstm expects {cin} input channels, got {wx.shape[1]}")
    if lengths is None:
        lengths = np.full(bsz, t)
    lengths = np.asarray(lengths)
    rev = reverse_index(lengths, t)
    bi = np.arange(bsz)[:, None]
    xd = x.data * length_mask(lengths, t)
    xs = np.stack([xd, xd[bi, rev]])  # (2, B, T, C)
    xw = (xs.reshape(2, bsz * t, cin) @ wx.data).reshape(2, bsz, t, h4) + b.data[:, None, None, :]

    whd = wh.data
    hs = np.zeros((2, bsz, t + 1, hid))
    cs = np.zeros((2, bsz, t + 1, hid))
    gates = np.empty((2, bsz, t, h4))
    tc = np.empty((2, bsz, t, hid))
    for s in range(t):
        z = xw[:, :, s] + np.matmul(hs[:, :, s], whd)
        a = gates[:, :, s]
        a[..., : 3 * hid] = _sigmoid(z[..., : 3 * hid])
        a[..., 3 * hid :] = np.tanh(z[..., 3 * hid :])
        c = a[..., hid : 2 * hid] * cs[:, :, s] + a[..., :hid] * a[..., 3 * hid :]
        cs[:, :, s + 1] = c
        th = np.tanh(c)
        tc[:, :, s] = th
        hs[:, :, s + 1] = a[..., 2 * hid : 3 * hid] * th

    mask = length_mask(lengths, t)
    out_f = hs[0, :, 1:]
    out_b = hs[1, :, 1:][bi, rev]
    y = np.concatenate([out_f, out_b], axis=-1) * mask

    def back(g):
        g = g * mask
        gh_out = np.stack([g[..., :hid], g[..., hid:][bi, rev]])  # (2, B, T, H) in run order
        dz = np.empty((2, bsz, t, h4))
        dh = np.zeros((2, bsz, hid))
        dc = np.zeros((2, bsz, hid))
        whT = np.swapaxes(whd, 1, 2)
        for s in range(t - 1, -1, -1):
            a = gates[:, :, s]
            i, f, o, gg = a[..., :hid], a[..., hid : 2 * hid], a[..., 2 * hid : 3 * hid], a[..., 3 * hid :]
            dh = dh + gh_out[:, :, s]
            th = tc[:, :, s]
            dc = dc + dh * o * (1 - th * th)
            d = dz[:, :, s]
            d[..., :hid] = dc * gg * i * (1 - i)
            d[..., hid : 2 * hid] = dc * cs[:, :, s] * f * (1 - f)
            d[..., 2 * hid : 3 * hid] = dh * th * o * (1 - o)
            d[..., 3 * hid :] = dc * i * (1 - gg * gg)
            dc = dc * f
            dh = np.matmul(d, whT)
        dz2 = dz.reshape(2, bsz * t, h4)
        gwx = np.swapaxes(xs.reshape(2, bsz * t, cin), 1, 2) @ dz2
        gwh = np.swapaxes(hs[:, :, :-1].reshape(2, bsz * t, hid), 1, 2) @ dz2
        gb = dz2.sum(axis=1)
        gxs = (dz2 @ np.swapaxes(wx.data, 1, 2)).reshape(2, bsz, t, cin)
        gx = gxs[0].copy()
        np.add.at(gx, (bi, rev), gxs[1])
        gx = gx * mask
        return gx, gwx, gwh, gb

    return _unbatch(_node(y, (x, wx, wh, b), back), squeeze)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    x = as_tensor(x)
    y = x @ weight
    return y + bias if bias is not None else y
