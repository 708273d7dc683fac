"""Classical TV-regularized reconstruction tests."""

import numpy as np
import pytest

from dynmri import data as dd
from dynmri import kspace as ks
from dynmri.baseline import CsConfig, cs_reconstruct
from dynmri.data import metric_psnr
from dynmri.kspace import fft2c, forward_model, generate_mask, zero_filled_recon


def make_problem(seed=0, n=32, nt=4, accel=4.0, acs=6):
    phantom = dd.generate_phantom(
        dd.PhantomConfig(nx=n, ny=n, nt=nt, seed=seed, smooth_phase=False)
    )
    mask = generate_mask(n, n, nt, accel, acs, seed=seed)
    return phantom, mask, forward_model(phantom, mask)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            CsConfig(lam=-1).validate()
        with pytest.raises(ValueError):
            CsConfig(iterations=0).validate()
        with pytest.raises(ValueError):
            CsConfig(step_size=0).validate()
        with pytest.raises(ValueError):
            CsConfig(tv_kind="2dtv").validate()


class TestLamZero:
    def test_full_mask_recovers_exactly(self):
        phantom, mask, ku = make_problem(accel=1.0)
        rec, trace = cs_reconstruct(ku, CsConfig(lam=0.0, iterations=5))
        np.testing.assert_allclose(rec.data, phantom.data.astype(rec.data.dtype), atol=1e-5)
        assert trace[-1] == pytest.approx(0.0, abs=1e-8)

    def test_undersampled_zero_filled_is_fixed_point(self):
        # without the prior, the zero-filled image already zeroes the
        # data term, so the trace starts and stays at ~0
        phantom, mask, ku = make_problem(accel=4.0)
        rec, trace = cs_reconstruct(ku, CsConfig(lam=0.0, iterations=10))
        assert trace[0] == pytest.approx(0.0, abs=1e-12)
        assert all(t <= trace[0] + 1e-12 for t in trace)
        zf = zero_filled_recon(ku)
        np.testing.assert_allclose(rec.data, zf.data.astype(rec.data.dtype), atol=1e-6)


class TestDescent:
    def test_trace_non_increasing(self):
        phantom, mask, ku = make_problem(seed=1)
        rec, trace = cs_reconstruct(ku, CsConfig(lam=0.01, iterations=30))
        diffs = np.diff(trace)
        assert np.all(diffs <= 1e-10)

    def test_output_consistent_with_measurements(self):
        # the reconstruction must not drift far from the acquired samples
        phantom, mask, ku = make_problem(seed=2)
        rec, _ = cs_reconstruct(ku, CsConfig(lam=0.005, iterations=50))
        resid = (fft2c(rec.data.astype(np.complex128)) - ku.data) * mask.as_volume()
        zf_resid = np.linalg.norm(
            (fft2c(zero_filled_recon(ku).data.astype(np.complex128)) - ku.data)
        )
        assert np.linalg.norm(resid) < 0.2 * np.linalg.norm(np.abs(ku.data))

    def test_improves_over_zero_filled(self):
        phantom, mask, ku = make_problem(seed=3)
        zf_psnr = metric_psnr(zero_filled_recon(ku), phantom)
        rec, _ = cs_reconstruct(ku, CsConfig(lam=0.003, iterations=100))
        assert metric_psnr(rec, phantom) > zf_psnr

    def test_deterministic(self):
        phantom, mask, ku = make_problem(seed=4)
        a, ta = cs_reconstruct(ku, CsConfig(lam=0.005, iterations=20))
        b, tb = cs_reconstruct(ku, CsConfig(lam=0.005, iterations=20))
        np.testing.assert_array_equal(a.data, b.data)
        assert ta == tb

    def test_iso_variant_runs(self):
        phantom, mask, ku = make_problem(seed=5)
        rec, trace = cs_reconstruct(
            ku, CsConfig(lam=0.005, iterations=20, tv_kind="iso")
        )
        assert np.all(np.diff(trace) <= 1e-10)
