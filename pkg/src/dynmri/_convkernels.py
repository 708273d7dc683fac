"""Compiled inner loops for 3D convolution.

numba compiles the loops per dtype; a pure-numpy im2col fallback keeps the
engine usable when numba is absent. Both paths compute identical stride-1
zero-padded cross-correlations.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return deco


@njit(cache=True, fastmath=True)
def _conv_fwd_jit(xp, w, b, out):
    F, _, kt, kh, kw = w.shape
    N, C = xp.shape[0], xp.shape[1]
    To, Ho, Wo = out.shape[2], out.shape[3], out.shape[4]
    for n in range(N):
        for f in range(F):
            for t in range(To):
                for h in range(Ho):
                    orow = out[n, f, t, h]
                    for i in range(Wo):
                        orow[i] = b[f]
                    for c in range(C):
                        for a in range(kt):
                            for bb in range(kh):
                                xrow = xp[n, c, t + a, h + bb]
                                for d in range(kw):
                                    wv = w[f, c, a, bb, d]
                                    for i in range(Wo):
                                        orow[i] += wv * xrow[i + d]


@njit(cache=True, fastmath=True)
def _conv_grad_w_jit(xp, gy, gw):
    F, C, kt, kh, kw = gw.shape
    N = xp.shape[0]
    To, Ho, Wo = gy.shape[2], gy.shape[3], gy.shape[4]
    for n in range(N):
        for t in range(To):
            for h in range(Ho):
                for f in range(F):
                    gyrow = gy[n, f, t, h]
                    for c in range(C):
                        for a in range(kt):
                            for bb in range(kh):
                                xrow = xp[n, c, t + a, h + bb]
                                for d in range(kw):
                                    acc = 0.0
                                    for i in range(Wo):
                                        acc += gyrow[i] * xrow[i + d]
                                    gw[f, c, a, bb, d] += acc


def _pad5(x, pt, ph, pw):
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _corr3d_numpy(xp: np.ndarray, w: np.ndarray, out_shape) -> np.ndarray:
    n, c = xp.shape[:2]
    f, _, kt, kh, kw = w.shape
    to, ho, wo = out_shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        n * to * ho * wo, -1
    )
    out = cols @ w.reshape(f, -1).T
    return np.ascontiguousarray(
        out.reshape(n, to, ho, wo, f).transpose(0, 4, 1, 2, 3)
    )


def corr3d(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad) -> np.ndarray:
    """(N,C,T,H,W) x (F,C,kt,kh,kw) -> (N,F,To,Ho,Wo), stride 1, zero padded."""
    pt, ph, pw = pad
    f, _, kt, kh, kw = w.shape
    n, _, t, h, wd = x.shape
    to, ho, wo = t + 2 * pt - kt + 1, h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    xp = _pad5(x, pt, ph, pw)
    if HAVE_NUMBA:
        out = np.empty((n, f, to, ho, wo), dtype=x.dtype)
        _conv_fwd_jit(xp, w, b, out)
        return out
    return _corr3d_numpy(xp, w, (to, ho, wo)) + b[None, :, None, None, None]


def corr3d_grad_w(x: np.ndarray, gy: np.ndarray, kshape, pad) -> np.ndarray:
    pt, ph, pw = pad
    xp = _pad5(x, pt, ph, pw)
    if HAVE_NUMBA:
        gw = np.zeros(kshape, dtype=x.dtype)
        _conv_grad_w_jit(xp, gy, gw)
        return gw
    f, c, kt, kh, kw = kshape
    n = x.shape[0]
    to, ho, wo = gy.shape[2:]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        n * to * ho * wo, -1
    )
    gmat = gy.transpose(0, 2, 3, 4, 1).reshape(-1, f)
    return (gmat.T @ cols).reshape(kshape)


def corr3d_grad_x(gy: np.ndarray, w: np.ndarray, pad) -> np.ndarray:
    """Transposed correlation: flip the kernel spatially, swap F and C."""
    _, _, kt, kh, kw = w.shape
    pt, ph, pw = pad
    wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    zero = np.zeros(wflip.shape[0], dtype=gy.dtype)
    return corr3d(gy, wflip, zero, (kt - 1 - pt, kh - 1 - ph, kw - 1 - pw))
