"""Training losses: per-element MSE plus edge-enhancing total-variation terms.

All TV variants act on the two-channel (real/imaginary) view of a complex
image and penalize the complex modulus of finite-difference fields:

  - anisotropic: |d/dx| + |d/dy|, forward differences, replicate boundary
  - isotropic: sqrt(|d/dx|^2 + |d/dy|^2), same discretization
  - second-degree: sqrt((3|sxx|^2 + 3|syy|^2 + 4|sxy|^2 + 2 Re(sxx conj(syy))) / 8)
  - third-degree: sqrt(5(|sxxx|^2+|syyy|^2) + 6 Re(sxxx conj(sxyy) + syyy conj(sxxy))
                       + 9(|sxxy|^2+|sxyy|^2)) / (4 sqrt(2))

Higher-degree stencils are central differences evaluated on the valid
interior only, so polynomial images below the stencil order give exactly
zero. Every value is normalized by the number of evaluated samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dynmri import tensor as dt
from dynmri.tensor import ShapeMismatchError, Tensor

__all__ = [
    "LossConfig",
    "TV_KINDS",
    "mse_loss",
    "tv_aniso",
    "tv_iso",
    "tv_2d_hdtv",
    "tv_3d_hdtv",
    "tv_penalty",
    "total_loss",
]

TV_KINDS = ("none", "aniso", "iso", "2dtv", "3dtv")

DEFAULT_SMOOTHING_EPS = 1e-8


@dataclass
class LossConfig:
    tv_kind: str = "none"
    tv_weight: float = 0.0
    smoothing_eps: float = DEFAULT_SMOOTHING_EPS

    def validate(self) -> None:
        if self.tv_kind not in TV_KINDS:
            raise ValueError(f"tv_kind must be one of {TV_KINDS}, got {self.tv_kind!r}")
        if self.tv_weight < 0:
            raise ValueError(f"tv_weight must be >= 0, got {self.tv_weight}")
        if self.smoothing_eps < 0:
            raise ValueError(f"smoothing_eps must be >= 0, got {self.smoothing_eps}")


def mse_loss(rec: Tensor, ref: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if rec.shape != ref.shape:
        raise ShapeMismatchError(
            f"mse_loss: shapes differ: {rec.shape} vs {ref.shape}"
        )
    return dt.reduce_mean(dt.square(dt.subtract(rec, ref)))


def _channel_axis(s: Tensor) -> int:
    # [2, nt, ny, nx] or batched [N, 2, nt, ny, nx]
    if s.data.ndim == 4 and s.shape[0] == 2:
        return 0
    if s.data.ndim == 5 and s.shape[1] == 2:
        return 1
    raise ShapeMismatchError(
        f"expected a two-channel complex view [2,nt,ny,nx] or [N,2,...], got {s.shape}"
    )


def _split_complex(s: Tensor, ch_axis: int):
    re = dt.narrow(s, ch_axis, 0, 1)
    im = dt.narrow(s, ch_axis, 1, 1)
    return re, im


def _fwd_diff(x: Tensor, axis: int) -> Tensor:
    """Forward difference with replicate boundary (last sample's diff is 0)."""
    n = x.shape[axis]
    padded = dt.pad_replicate(x, axis, 0, 1)
    return dt.subtract(dt.narrow(padded, axis, 1, n), x)


def _central1(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    return dt.scale(
        dt.subtract(dt.narrow(x, axis, 2, n - 2), dt.narrow(x, axis, 0, n - 2)), 0.5
    )


def _central2(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    mid = dt.scale(dt.narrow(x, axis, 1, n - 2), -2.0)
    return dt.add(
        dt.add(dt.narrow(x, axis, 2, n - 2), dt.narrow(x, axis, 0, n - 2)), mid
    )


def _central3(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    a = dt.narrow(x, axis, 4, n - 4)
    b = dt.scale(dt.narrow(x, axis, 3, n - 4), -2.0)
    c = dt.scale(dt.narrow(x, axis, 1, n - 4), 2.0)
    d = dt.scale(dt.narrow(x, axis, 0, n - 4), -1.0)
    return dt.scale(dt.add(dt.add(a, b), dt.add(c, d)), 0.5)


def _crop(x: Tensor, axis: int, margin: int) -> Tensor:
    if margin == 0:
        return x
    n = x.shape[axis]
    return dt.narrow(x, axis, margin, n - 2 * margin)


def _abs2(re: Tensor, im: Tensor) -> Tensor:
    return dt.add(dt.square(re), dt.square(im))


def _re_conj_product(a_re, a_im, b_re, b_im) -> Tensor:
    # Re(a * conj(b)) for complex fields given as channel pairs
    return dt.add(dt.multiply(a_re, b_re), dt.multiply(a_im, b_im))


def _sample_count(s: Tensor, ch_axis: int, margin: int = 0) -> int:
    shape = list(s.shape)
    del shape[ch_axis]
    ny, nx = shape[-2] - 2 * margin, shape[-1] - 2 * margin
    count = ny * nx
    for extent in shape[:-2]:
        count *= extent
    return count


def tv_aniso(s_hat: Tensor, eps: float = 0.0) -> Tensor:
    """Anisotropic TV: mean of |dx| + |dy| over frames and pixels."""
    ch = _channel_axis(s_hat)
    re, im = _split_complex(s_hat, ch)
    yax, xax = s_hat.data.ndim - 2, s_hat.data.ndim - 1
    total = None
    for axis in (xax, yax):
        mod = dt.sqrt(
            dt.add_scalar(_abs2(_fwd_diff(re, axis), _fwd_diff(im, axis)), eps)
        )
        total = mod if total is None else dt.add(total, mod)
    return dt.scale(dt.reduce_sum(total), 1.0 / _sample_count(s_hat, ch))


def tv_iso(s_hat: Tensor, eps: float = 0.0) -> Tensor:
    """Isotropic TV: mean of sqrt(|dx|^2 + |dy|^2)."""
    ch = _channel_axis(s_hat)
    re, im = _split_complex(s_hat, ch)
    yax, xax = s_hat.data.ndim - 2, s_hat.data.ndim - 1
    gx = _abs2(_fwd_diff(re, xax), _fwd_diff(im, xax))
    gy = _abs2(_fwd_diff(re, yax), _fwd_diff(im, yax))
    mod = dt.sqrt(dt.add_scalar(dt.add(gx, gy), eps))
    return dt.scale(dt.reduce_sum(mod), 1.0 / _sample_count(s_hat, ch))


def tv_2d_hdtv(s_hat: Tensor, eps: float = 0.0) -> Tensor:
    """Second-degree TV on the valid interior (margin 1 in y and x)."""
    ch = _channel_axis(s_hat)
    re, im = _split_complex(s_hat, ch)
    yax, xax = s_hat.data.ndim - 2, s_hat.data.ndim - 1

    def second_fields(c: Tensor):
        sxx = _crop(_central2(c, xax), yax, 1)
        syy = _crop(_central2(c, yax), xax, 1)
        sxy = _central1(_central1(c, xax), yax)
        return sxx, syy, sxy

    xx_r, yy_r, xy_r = second_fields(re)
    xx_i, yy_i, xy_i = second_fields(im)
    q = dt.add(
        dt.add(
            dt.scale(_abs2(xx_r, xx_i), 3.0 / 8.0),
            dt.scale(_abs2(yy_r, yy_i), 3.0 / 8.0),
        ),
        dt.add(
            dt.scale(_abs2(xy_r, xy_i), 4.0 / 8.0),
            dt.scale(_re_conj_product(xx_r, xx_i, yy_r, yy_i), 2.0 / 8.0),
        ),
    )
    val = dt.reduce_sum(dt.sqrt(dt.add_scalar(q, eps)))
    return dt.scale(val, 1.0 / _sample_count(s_hat, ch, margin=1))


def tv_3d_hdtv(s_hat: Tensor, eps: float = 0.0) -> Tensor:
    """Third-degree TV on the valid interior (margin 2 in y and x)."""
    ch = _channel_axis(s_hat)
    re, im = _split_complex(s_hat, ch)
    yax, xax = s_hat.data.ndim - 2, s_hat.data.ndim - 1

    def third_fields(c: Tensor):
        sxxx = _crop(_central3(c, xax), yax, 2)
        syyy = _crop(_central3(c, yax), xax, 2)
        sxxy = _crop(_central1(_central2(c, xax), yax), xax, 1)
        sxxy = _crop(sxxy, yax, 1)
        sxyy = _crop(_central1(_central2(c, yax), xax), yax, 1)
        sxyy = _crop(sxyy, xax, 1)
        return sxxx, syyy, sxxy, sxyy

    a_r, b_r, c_r, d_r = third_fields(re)
    a_i, b_i, c_i, d_i = third_fields(im)
    q = dt.add(
        dt.add(
            dt.scale(dt.add(_abs2(a_r, a_i), _abs2(b_r, b_i)), 5.0),
            dt.scale(dt.add(_abs2(c_r, c_i), _abs2(d_r, d_i)), 9.0),
        ),
        dt.scale(
            dt.add(
                _re_conj_product(a_r, a_i, d_r, d_i),
                _re_conj_product(b_r, b_i, c_r, c_i),
            ),
            6.0,
        ),
    )
    val = dt.reduce_sum(dt.sqrt(dt.add_scalar(q, eps)))
    return dt.scale(val, 1.0 / (4.0 * np.sqrt(2.0) * _sample_count(s_hat, ch, margin=2)))


_TV_FUNCS = {
    "aniso": tv_aniso,
    "iso": tv_iso,
    "2dtv": tv_2d_hdtv,
    "3dtv": tv_3d_hdtv,
}


def tv_penalty(s_hat: Tensor, kind: str, eps: float = 0.0) -> Tensor:
    if kind not in _TV_FUNCS:
        raise ValueError(f"unknown TV kind {kind!r}; expected one of {TV_KINDS[1:]}")
    return _TV_FUNCS[kind](s_hat, eps)


def total_loss(rec: Tensor, ref: Tensor, config: LossConfig) -> Tensor:
    """MSE plus the configured TV penalty on the reconstruction."""
    config.validate()
    loss = mse_loss(rec, ref)
    if config.tv_kind != "none" and config.tv_weight > 0:
        tv = tv_penalty(rec, config.tv_kind, config.smoothing_eps)
        loss = dt.add(loss, dt.scale(tv, config.tv_weight))
    return loss
