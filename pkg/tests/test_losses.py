"""Loss-function tests: hand values, invariances, and a scalar-loop oracle
for the first-order TV terms."""

import numpy as np
import pytest

from dynmri import losses
from dynmri import tensor as dt
from dynmri.losses import (
    LossConfig,
    mse_loss,
    total_loss,
    tv_2d_hdtv,
    tv_3d_hdtv,
    tv_aniso,
    tv_iso,
    tv_penalty,
)
from dynmri.tensor import Tensor


def channels(z):
    """Complex (nt, ny, nx) array -> [2, nt, ny, nx] float64 tensor."""
    z = np.asarray(z, dtype=np.complex128)
    return Tensor(np.stack([z.real, z.imag]), dtype=np.float64)


def coordinate_grids(n=12, nt=2):
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    return np.broadcast_to(xs, (nt, n, n)).copy(), np.broadcast_to(ys, (nt, n, n)).copy()


def tv_loop_oracle(z, kind, eps):
    """Direct scalar-loop evaluation of the first-order TV terms."""
    nt, ny, nx = z.shape
    total = 0.0
    for t in range(nt):
        for y in range(ny):
            for x in range(nx):
                dx = z[t, y, min(x + 1, nx - 1)] - z[t, y, x]
                dy = z[t, min(y + 1, ny - 1), x] - z[t, y, x]
                if kind == "aniso":
                    total += np.sqrt(abs(dx) ** 2 + eps) + np.sqrt(abs(dy) ** 2 + eps)
                else:
                    total += np.sqrt(abs(dx) ** 2 + abs(dy) ** 2 + eps)
    return total / (nt * ny * nx)


class TestMse:
    def test_hand_value(self):
        rec = Tensor([[1.0, 2.0], [3.0, 4.0]])
        ref = Tensor([[1.0, 0.0], [0.0, 4.0]])
        assert mse_loss(rec, ref).item() == pytest.approx((4 + 9) / 4)

    def test_zero_on_match(self):
        a = Tensor(np.random.default_rng(0).standard_normal((2, 3)))
        assert mse_loss(a, Tensor(a.data.copy())).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(dt.ShapeMismatchError):
            mse_loss(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


class TestFirstOrderTV:
    def test_constant_image_zero(self):
        s = channels(np.full((2, 8, 8), 3 + 2j))
        assert tv_aniso(s).item() == pytest.approx(0.0, abs=1e-12)
        assert tv_iso(s).item() == pytest.approx(0.0, abs=1e-12)

    def test_single_step_edge_hand_value(self):
        # one vertical edge of height 1 in an n x n frame: n difference
        # samples of magnitude 1 along x, none along y
        n = 8
        z = np.zeros((1, n, n))
        z[:, :, n // 2:] = 1.0
        assert tv_aniso(channels(z)).item() == pytest.approx(n / n**2, rel=1e-6)
        assert tv_iso(channels(z)).item() == pytest.approx(n / n**2, rel=1e-6)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((2, 6, 7)) + 1j * rng.standard_normal((2, 6, 7))
        for kind in ("aniso", "iso"):
            for eps in (0.0, 1e-8, 1e-3):
                got = tv_penalty(channels(z), kind, eps).item()
                want = tv_loop_oracle(z, kind, eps)
                assert got == pytest.approx(want, rel=1e-6)

    def test_homogeneity_degree_one(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((1, 8, 8)) + 1j * rng.standard_normal((1, 8, 8))
        for kind in ("aniso", "iso"):
            base = tv_penalty(channels(z), kind, 0.0).item()
            scaled = tv_penalty(channels(3.5 * z), kind, 0.0).item()
            assert scaled == pytest.approx(3.5 * base, rel=1e-6)

    def test_iso_aniso_ordering(self):
        # iso <= aniso <= sqrt(2) * iso pointwise, hence in the mean
        rng = np.random.default_rng(3)
        for seed in range(10):
            z = np.random.default_rng(seed).standard_normal((1, 8, 8)).astype(complex)
            z += 1j * rng.standard_normal((1, 8, 8))
            iso = tv_iso(channels(z)).item()
            aniso = tv_aniso(channels(z)).item()
            assert iso <= aniso + 1e-12
            assert aniso <= np.sqrt(2) * iso + 1e-12

    def test_phase_rotation_invariance(self):
        rng = np.random.default_rng(4)
        z = rng.standard_normal((2, 8, 8)) + 1j * rng.standard_normal((2, 8, 8))
        rot = z * np.exp(1j * 0.7)
        for kind in ("aniso", "iso", "2dtv", "3dtv"):
            a = tv_penalty(channels(z), kind, 0.0).item()
            b = tv_penalty(channels(rot), kind, 0.0).item()
            assert b == pytest.approx(a, rel=1e-6)

    def test_translation_invariance_compact_bump(self):
        # a bump away from every border gives identical TV after a shift
        z = np.zeros((1, 16, 16), dtype=complex)
        z[0, 6:9, 6:9] = 1.0 + 0.5j
        shifted = np.roll(z, (2, 3), axis=(1, 2))
        for kind in ("aniso", "iso", "2dtv", "3dtv"):
            a = tv_penalty(channels(z), kind, 0.0).item()
            b = tv_penalty(channels(shifted), kind, 0.0).item()
            assert b == pytest.approx(a, rel=1e-6)

    def test_eps_monotone(self):
        rng = np.random.default_rng(5)
        z = rng.standard_normal((1, 8, 8)).astype(complex)
        s = channels(z)
        vals = [tv_aniso(s, eps).item() for eps in (0.0, 1e-8, 1e-4, 1e-2)]
        assert vals == sorted(vals)


class TestSecondDegreeTV:
    def test_affine_image_exactly_zero(self):
        xs, ys = coordinate_grids()
        affine = 1.0 + 2.0 * xs - 0.5 * ys
        assert tv_2d_hdtv(channels(affine), 0.0).item() == 0.0

    def test_pure_quadratic_hand_value(self):
        # x^2: only sxx = 2 survives -> integrand sqrt(3*4/8) everywhere
        xs, _ = coordinate_grids()
        val = tv_2d_hdtv(channels(xs**2), 0.0).item()
        assert val == pytest.approx(np.sqrt(1.5), rel=1e-10)

    def test_rotation_symmetry(self):
        ys, xs = np.mgrid[0:16, 0:16].astype(np.float64)
        bump = np.exp(-((xs - 7.5) ** 2 + (ys - 7.5) ** 2) / 8.0)[None]
        a = tv_2d_hdtv(channels(bump), 0.0).item()
        b = tv_2d_hdtv(channels(np.rot90(bump[0]).copy()[None]), 0.0).item()
        assert b == pytest.approx(a, rel=1e-6)


class TestThirdDegreeTV:
    def test_quadratic_image_zero(self):
        xs, ys = coordinate_grids()
        for mono in (xs**2, ys**2, xs * ys):
            assert tv_3d_hdtv(channels(mono), 0.0).item() == 0.0
        # combined terms cancel only up to float rounding
        quad = xs**2 + 0.3 * ys**2 + 0.1 * xs * ys
        assert tv_3d_hdtv(channels(quad), 0.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_pure_cubic_hand_value(self):
        # x^3: only sxxx = 6 survives -> integrand sqrt(5*36)/(4 sqrt 2)
        xs, _ = coordinate_grids()
        val = tv_3d_hdtv(channels(xs**3), 0.0).item()
        assert val == pytest.approx(np.sqrt(180.0) / (4 * np.sqrt(2)), rel=1e-10)

    def test_rotation_symmetry(self):
        ys, xs = np.mgrid[0:16, 0:16].astype(np.float64)
        bump = np.exp(-((xs - 7.5) ** 2 + (ys - 7.5) ** 2) / 8.0)[None]
        a = tv_3d_hdtv(channels(bump), 0.0).item()
        b = tv_3d_hdtv(channels(np.rot90(bump[0]).copy()[None]), 0.0).item()
        assert b == pytest.approx(a, rel=1e-6)


class TestTotalLoss:
    def test_reduces_to_mse_without_tv(self):
        rng = np.random.default_rng(6)
        rec = Tensor(rng.standard_normal((2, 2, 8, 8)), dtype=np.float64)
        ref = Tensor(rng.standard_normal((2, 2, 8, 8)), dtype=np.float64)
        cfg = LossConfig(tv_kind="none", tv_weight=0.0)
        assert total_loss(rec, ref, cfg).item() == pytest.approx(
            mse_loss(rec, ref).item()
        )

    def test_adds_weighted_penalty(self):
        rng = np.random.default_rng(7)
        rec = Tensor(rng.standard_normal((2, 2, 8, 8)), dtype=np.float64)
        ref = Tensor(rng.standard_normal((2, 2, 8, 8)), dtype=np.float64)
        cfg = LossConfig(tv_kind="aniso", tv_weight=0.25, smoothing_eps=1e-8)
        want = (
            mse_loss(rec, ref).item()
            + 0.25 * tv_aniso(rec, 1e-8).item()
        )
        assert total_loss(rec, ref, cfg).item() == pytest.approx(want, rel=1e-10)

    def test_invalid_kind_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(tv_kind="banana").validate()
        with pytest.raises(ValueError):
            tv_penalty(Tensor(np.zeros((2, 1, 4, 4))), "banana")

    def test_batched_matches_single(self):
        rng = np.random.default_rng(8)
        arr = rng.standard_normal((2, 2, 8, 8))
        single = tv_aniso(Tensor(arr, dtype=np.float64), 1e-8).item()
        batched = tv_aniso(Tensor(arr[None], dtype=np.float64), 1e-8).item()
        assert batched == pytest.approx(single, rel=1e-10)

    def test_bad_shape_rejected(self):
        with pytest.raises(dt.ShapeMismatchError):
            tv_aniso(Tensor(np.zeros((3, 4, 4))))
