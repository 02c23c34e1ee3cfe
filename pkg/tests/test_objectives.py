from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdr_enhance import autodiff as ad
from sdr_enhance import bss, dsp
from sdr_enhance import objectives as obj
from sdr_enhance.autodiff import Tape, backward, grad_check


def stoi_oracle(x_mag, y_mag, bands, N, zeta):
    """Loop-based negative STOI for a single spectrogram pair."""
    J = bands.n_bands
    M = y_mag.shape[1]
    total = 0.0
    count = 0
    for j, (p, q) in enumerate(bands.edges):
        a = np.sqrt(np.sum(x_mag[p:q] ** 2, axis=0))
        b = np.sqrt(np.sum(y_mag[p:q] ** 2, axis=0))
        for m in range(N - 1, M):
            xs = a[m - N + 1 : m + 1]
            ys = b[m - N + 1 : m + 1]
            xh = np.minimum(xs * np.linalg.norm(ys) / np.linalg.norm(xs), (1 + 10 ** (-zeta / 20)) * ys)
            xc = xh - xh.mean()
            yc = ys - ys.mean()
            total += xc @ yc / (np.linalg.norm(xc) * np.linalg.norm(yc))
            count += 1
    assert count == J * (M - N + 1)
    return -total / count


def one_band_cfg(N=2, zeta=-15.0, n_bins=1):
    bands = dsp.BandPartition(((0, n_bins),), n_bins)
    return obj.StoiConfig(analysis_len=N, zeta_db=zeta, bands=bands, frame_size=2 * (n_bins - 1) or 1, hop=1)


class TestElementwise:
    def test_l2_value(self):
        t = Tape()
        assert obj.loss_l2(t.variable([1.0, 2.0]), [0.0, 0.0]).value == 5.0

    def test_l1_value(self):
        t = Tape()
        assert obj.loss_l1(t.variable([1.0, -2.0]), [0.0, 0.0]).value == 3.0

    def test_batched_shared_target(self):
        t = Tape()
        x = t.variable(np.ones((3, 4)))
        np.testing.assert_array_equal(obj.loss_l2(x, np.zeros(4)).value, [4.0, 4.0, 4.0])

    def test_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ad.ShapeError):
            obj.loss_l2(t.variable([1.0, 2.0]), [1.0, 2.0, 3.0])
        with pytest.raises(ad.ShapeError):
            obj.loss_l1(t.variable([1.0, 2.0]), np.ones((2, 2)))

    def test_identity_zero(self):
        y = np.array([0.3, -1.0, 2.0])
        assert obj.loss_l2(Tape().variable(y), y).value == 0.0
        assert obj.loss_l1(Tape().variable(y), y).value == 0.0

    def test_l2_symmetric(self):
        a, b = np.random.default_rng(20).normal(size=(2, 9))
        assert obj.loss_l2(Tape().variable(a), b).value == obj.loss_l2(Tape().variable(b), a).value

    def test_l2_hand_gradient(self):
        t = Tape()
        x = t.variable([1.0, 2.0])
        np.testing.assert_array_equal(backward(obj.loss_l2(x, [0.0, 0.0]))[x], [2.0, 4.0])

    def test_l1_gradient_away_from_kinks(self):
        rng = np.random.default_rng(21)
        y = rng.normal(size=6)
        x0 = y + rng.uniform(0.1, 1.0, 6) * rng.choice([-1, 1], 6)
        rep = grad_check(lambda x: obj.loss_l1(x, y), x0)
        assert rep.max_rel_error < 1e-6 and not rep.skipped

    def test_l2_gradient(self):
        y = np.array([0.5, -1.0, 2.0])
        rep = grad_check(lambda x: obj.loss_l2(x, y), [1.0, 1.0, 1.0])
        assert rep.max_rel_error < 1e-7


class TestItakuraSaito:
    def test_equal_spectra_zero(self):
        y = np.random.default_rng(0).uniform(0.1, 2.0, (5, 7))
        assert obj.loss_is(Tape().variable(y), y).value == pytest.approx(0.0, abs=1e-12)

    def test_ratio_e(self):
        K, M = 5, 7
        y = np.random.default_rng(1).uniform(0.1, 2.0, (K, M))
        v = obj.loss_is(Tape().variable(y / np.e), y).value
        assert v == pytest.approx((np.e - 2) * K * M, rel=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            x, y = rng.uniform(0.01, 3.0, (2, 4, 6))
            assert obj.loss_is(Tape().variable(x), y).value >= 0.0

    def test_scalar_oracle_2x2(self):
        rng = np.random.default_rng(22)
        x, y = rng.uniform(0.1, 3.0, (2, 2, 2))
        expect = 0.0
        for k in range(2):
            for m in range(2):
                r = y[k, m] / x[k, m]
                expect += r - np.log(r) - 1.0
        assert obj.loss_is(Tape().variable(x), y).value == pytest.approx(expect, rel=1e-12, abs=1e-12)

    def test_asymmetric(self):
        x, y = np.random.default_rng(23).uniform(0.1, 3.0, (2, 4, 4))
        assert obj.loss_is(Tape().variable(x), y).value != pytest.approx(obj.loss_is(Tape().variable(y), x).value)

    def test_nonpositive_counted(self):
        diag = Counter()
        v = obj.loss_is(Tape().variable([[0.0, 1.0]]), np.array([[1.0, 1.0]]), diag)
        assert diag["is_nonpositive"] == 1
        assert np.isfinite(v.value)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        y = rng.uniform(0.5, 2.0, (3, 4))
        rep = grad_check(lambda x: obj.loss_is(x, y), rng.uniform(0.5, 2.0, (3, 4)))
        assert rep.max_rel_error < 1e-5

    def test_window_gradient(self):
        spec = obj.LossSpec.make("is")
        rng = np.random.default_rng(4)
        target = rng.normal(size=40)
        rep = grad_check(lambda x: obj.window_loss(spec, x, target), target + 0.3 * rng.normal(size=40))
        assert rep.max_rel_error < 1e-4


class TestStft:
    def test_matches_numpy_stft(self):
        x = np.random.default_rng(5).normal(size=100)
        mag = obj.stft_mag_var(Tape().variable(x), 32, 4).value
        np.testing.assert_allclose(mag, dsp.stft_mag(x, 32, 4).magnitudes, atol=1e-10)

    def test_power_gradient(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=(17, 5))
        rep = grad_check(lambda x: ad.sum(obj.stft_power_var(x, 32, 4) * w), rng.normal(size=48))
        assert rep.max_rel_error < 1e-5


class TestNegStoi:
    def test_scalar_oracle_minus_one(self):
        cfg = one_band_cfg()
        out = obj.loss_neg_stoi(Tape().variable([[1.0, 2.0]]), np.array([[2.0, 4.0]]), cfg)
        assert out.value == pytest.approx(-1.0, abs=1e-12)

    def test_identical_is_minus_one(self):
        cfg = obj.StoiConfig.for_window()
        x = np.random.default_rng(7).normal(size=100)
        mag = dsp.stft_mag(x, 32, 4).magnitudes
        assert obj.loss_neg_stoi(Tape().variable(mag), mag, cfg).value == pytest.approx(-1.0, abs=1e-9)

    def test_clipped_case_matches_oracle(self):
        # zeta = +20 dB makes the clip bound 1.1*beta, so clipping is active
        rng = np.random.default_rng(8)
        bands = dsp.BandPartition(((0, 2), (2, 5)), 5)
        cfg = obj.StoiConfig(analysis_len=4, zeta_db=20.0, bands=bands, frame_size=8, hop=1)
        x = rng.uniform(0.1, 2.0, (5, 9))
        y = rng.uniform(0.1, 2.0, (5, 9))
        got = obj.loss_neg_stoi(Tape().variable(x), y, cfg).value
        assert got == pytest.approx(stoi_oracle(x, y, bands, 4, 20.0), abs=1e-10)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(9)
        cfg = obj.StoiConfig.for_window()
        for _ in range(20):
            x, y = rng.normal(size=(2, 100))
            xm = dsp.stft_mag(x, 32, 4).magnitudes
            ym = dsp.stft_mag(y, 32, 4).magnitudes
            got = obj.loss_neg_stoi(Tape().variable(xm), ym, cfg).value
            assert got == pytest.approx(stoi_oracle(xm, ym, cfg.bands, 8, -15.0), abs=1e-10)
            assert -1.0 - 1e-12 <= got <= 1.0 + 1e-12

    def test_degenerate_segment_counted(self):
        cfg = one_band_cfg()
        diag = Counter()
        out = obj.loss_neg_stoi(Tape().variable([[1.0, 1.0]]), np.array([[2.0, 4.0]]), cfg, diag)
        assert diag["stoi_degenerate"] == 1
        assert out.value == 0.0

    def test_too_few_frames(self):
        cfg = one_band_cfg(N=3)
        with pytest.raises(ad.ShapeError):
            obj.loss_neg_stoi(Tape().variable([[1.0, 2.0]]), np.array([[2.0, 4.0]]), cfg)

    def test_gradient(self):
        rng = np.random.default_rng(10)
        bands = dsp.BandPartition(((0, 2), (2, 5)), 5)
        cfg = obj.StoiConfig(analysis_len=4, zeta_db=-15.0, bands=bands, frame_size=8, hop=1)
        y = rng.uniform(0.5, 2.0, (5, 9))
        rep = grad_check(lambda x: obj.loss_neg_stoi(x, y, cfg), rng.uniform(0.5, 2.0, (5, 9)))
        assert rep.max_rel_error < 1e-5

    def test_window_gradient(self):
        spec = obj.LossSpec.make("neg_stoi")
        rng = np.random.default_rng(11)
        target = np.sin(np.arange(100) * 0.7) + 0.2 * rng.normal(size=100)
        x0 = target + 0.5 * rng.normal(size=100)
        rep = grad_check(lambda x: obj.window_loss(spec, x, target), x0, tol=1e-4)
        assert rep.passed


class TestNegSdr:
    def test_matches_metric(self):
        rng = np.random.default_rng(12)
        for G in (1, 4):
            s, n = rng.normal(size=(2, 100))
            est = s + 0.4 * n
            p = bss.build_projector(s, G)
            val = obj.loss_neg_sdr(Tape().variable(est), p, obj.SdrLossConfig(max_delay=G)).value
            assert val == pytest.approx(-bss.sdr(s, est, G=G), abs=1e-6)

    def test_perfect_estimate_finite(self):
        s = dsp.gen_sine(100)
        p = bss.build_projector(s, 1)
        val = obj.loss_neg_sdr(Tape().variable(s), p).value
        assert np.isfinite(val)
        assert val < -100.0

    def test_orthogonal_estimate_large_positive(self):
        s = np.zeros(20)
        s[0] = 1.0
        est = np.zeros(20)
        est[10] = 1.0
        val = obj.loss_neg_sdr(Tape().variable(est), bss.build_projector(s, 1)).value
        assert val == pytest.approx(10 * np.log10((1.0 + 1e-12) / 1e-12), rel=1e-9)

    @pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
    def test_scale_invariant_spec_points(self, c):
        rng = np.random.default_rng(24)
        s, est = rng.normal(size=(2, 50))
        p = bss.build_projector(s, 1)
        a = obj.loss_neg_sdr(Tape().variable(est), p).value
        assert obj.loss_neg_sdr(Tape().variable(c * est), p).value == pytest.approx(a, abs=1e-6)

    def test_zero_estimate_finite(self):
        s = dsp.gen_sine(100)
        diag = Counter()
        t = Tape()
        x = t.variable(np.zeros(100))
        val = obj.loss_neg_sdr(x, bss.build_projector(s, 1), diagnostics=diag)
        assert val.value == pytest.approx(0.0, abs=1e-9)
        assert diag["sdr_zero_estimate"] == 1
        assert np.all(np.isfinite(backward(val)[x]))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 2**32 - 1))
    def test_scale_invariant(self, c, seed):
        rng = np.random.default_rng(seed)
        s, est = rng.normal(size=(2, 50))
        p = bss.build_projector(s, 2)
        a = obj.loss_neg_sdr(Tape().variable(est), p).value
        b = obj.loss_neg_sdr(Tape().variable(c * est), p).value
        # exact up to the additive floor, which shrinks relative to larger estimates
        d = bss.project(p, min(c, 1.0) * est)
        eps = 1e-12 * (s @ s)
        bound = 10 / np.log(10) * (eps / (d.s_target @ d.s_target) + eps / (d.residual @ d.residual))
        assert abs(a - b) <= bound + 1e-12

    def test_gradient_orthogonal_to_estimate(self):
        # scale invariance means the gradient has no radial component
        rng = np.random.default_rng(13)
        s, est = rng.normal(size=(2, 60))
        t = Tape()
        x = t.variable(est)
        g = backward(obj.loss_neg_sdr(x, bss.build_projector(s, 3)))[x]
        assert abs(g @ est) < 1e-9 * np.linalg.norm(g) * np.linalg.norm(est)

    def test_gradient(self):
        rng = np.random.default_rng(14)
        s = rng.normal(size=30)
        p = bss.build_projector(s, 2)
        rep = grad_check(lambda x: obj.loss_neg_sdr(x, p), s + rng.normal(size=30))
        assert rep.max_rel_error < 1e-5

    def test_batch_matches_single(self):
        rng = np.random.default_rng(15)
        S = rng.normal(size=(4, 20))
        E = S + rng.normal(size=(4, 20))
        spec = obj.LossSpec.make("neg_sdr")
        batched = obj.window_loss(spec, Tape().variable(E), S).value
        single = [obj.window_loss(spec, Tape().variable(e), s).value for e, s in zip(E, S)]
        np.testing.assert_allclose(batched, single, atol=1e-10)

    def test_length_mismatch(self):
        p = bss.build_projector(np.ones(10), 1)
        with pytest.raises(ad.ShapeError):
            obj.loss_neg_sdr(Tape().variable(np.ones(9)), p)


@pytest.mark.parametrize("kind", obj.LOSS_KINDS)
def test_lower_bounds(kind):
    spec = obj.LossSpec.make(kind)
    rng = np.random.default_rng(25)
    for _ in range(10):
        target = np.sin(np.arange(100) * rng.uniform(0.1, 1.0)) + 0.1 * rng.normal(size=100)
        est = target + rng.normal(scale=rng.uniform(0.01, 2.0), size=100)
        v = obj.window_loss(spec, Tape().variable(est), target).value
        if kind == "neg_stoi":
            assert v >= -1.0 - 1e-12
        elif kind != "neg_sdr":
            assert v >= 0.0
        else:
            assert np.isfinite(v)


class TestSpec:
    @pytest.mark.parametrize("kind", obj.LOSS_KINDS)
    def test_make_all(self, kind):
        spec = obj.LossSpec.make(kind)
        assert spec.kind == kind
        t = Tape()
        target = np.sin(np.arange(100) * 0.3)
        v = obj.window_loss(spec, t.variable(np.stack([target * 0.9, target * 0.5])), np.stack([target, target]))
        assert v.shape == (2,)
        assert np.all(np.isfinite(v.value))

    def test_unknown(self):
        with pytest.raises(ValueError):
            obj.LossSpec("l3")

    def test_missing_config(self):
        with pytest.raises(ValueError):
            obj.LossSpec("neg_sdr")
        with pytest.raises(ValueError):
            obj.LossSpec("l2", sdr=obj.SdrLossConfig())

    def test_window_stoi_bands_fit(self):
        cfg = obj.StoiConfig.for_window()
        assert cfg.bands.n_bands == 6
        assert dsp.n_frames(100, cfg.frame_size, cfg.hop) >= cfg.analysis_len

    def test_bad_sdr_config(self):
        with pytest.raises(ValueError):
            obj.SdrLossConfig(max_delay=0)
        with pytest.raises(ValueError):
            obj.SdrLossConfig(floor=0.0)
