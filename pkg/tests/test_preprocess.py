import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sleepgmu import preprocess as pp
from sleepgmu.errors import ConfigError, InputError, ShapeError, ValidationError

from oracles import dft_power, hamming, lstsq_poly_residual, triple_loop_matmul

# min-max then z-score of [[0,1],[2,3]], evaluated with mpmath at 40 digits.
NORMALIZED_0123 = [-1.3416407864998738, -0.4472135954999579, 0.4472135954999579, 1.3416407864998738]


class TestDetrend:
    def test_constant(self):
        resid, fit = pp.detrend_polyfit([2, 2, 2, 2], 1)
        np.testing.assert_allclose(resid, 0.0, atol=1e-12)
        assert len(fit.coefficients) == 2

    def test_exact_line(self):
        resid, _ = pp.detrend_polyfit([1, 2, 3, 4], 1)
        np.testing.assert_allclose(resid, 0.0, atol=1e-12)

    def test_parabola_against_normal_equations(self):
        coef, want = lstsq_poly_residual([0, 1, 4, 9], 1)
        assert coef == [-1.0, 3.0]
        resid, fit = pp.detrend_polyfit([0, 1, 4, 9], 1)
        np.testing.assert_allclose(resid, [1, -1, -1, 1], atol=1e-12)
        np.testing.assert_allclose(resid, want, atol=1e-12)
        np.testing.assert_allclose(fit.coefficients, [-1.0, 3.0], atol=1e-12)

    @pytest.mark.parametrize("order", [0, 1, 2, 3])
    def test_random_against_rational_oracle(self, order):
        y = np.random.default_rng(order).normal(size=25)
        coef, want = lstsq_poly_residual(y, order)
        resid, fit = pp.detrend_polyfit(y, order)
        np.testing.assert_allclose(resid, want, atol=1e-10)
        np.testing.assert_allclose(fit.coefficients, coef, rtol=1e-8, atol=1e-10)

    def test_residual_equals_y_minus_fit(self):
        y = np.random.default_rng(9).normal(size=40)
        resid, fit = pp.detrend_polyfit(y, 2)
        np.testing.assert_allclose(resid, y - fit(np.arange(40)), atol=1e-10)

    def test_underdetermined(self):
        with pytest.raises(InputError):
            pp.detrend_polyfit([1.0, 2.0], 2)

    def test_3000_sample_epoch_cubic(self):
        x = np.arange(3000.0)
        y = 0.3 - 2e-3 * x + 4e-7 * x**2 - 1e-10 * x**3
        resid, _ = pp.detrend_polyfit(y, 3)
        assert np.max(np.abs(resid)) < 1e-9

    @settings(max_examples=40, deadline=None)
    @given(st.integers(4, 64), st.integers(0, 3), st.integers(0, 2**31))
    def test_residual_orthogonal_to_monomials(self, n, order, seed):
        if n <= order:
            return
        y = np.random.default_rng(seed).normal(size=n)
        resid, _ = pp.detrend_polyfit(y, order)
        i = np.arange(n, dtype=float)
        for k in range(order + 1):
            assert abs(np.sum(resid * i**k)) <= 1e-8 * n

    @settings(max_examples=40, deadline=None)
    @given(st.integers(5, 64), st.integers(0, 3), st.integers(0, 2**31))
    def test_adding_low_order_polynomial_does_not_change_residual(self, n, order, seed):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=n)
        i = np.arange(n) / n
        poly = sum(c * i**j for j, c in enumerate(rng.normal(size=order + 1)))
        a, _ = pp.detrend_polyfit(y, order)
        b, _ = pp.detrend_polyfit(y + poly, order)
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestStft:
    def test_thirty_second_epoch_shape(self):
        spec = pp.stft_logpower(np.random.default_rng(0).normal(size=3000), 100.0)
        assert spec.shape == (29, 128)

    def test_zero_signal_floor(self):
        spec = pp.stft_logpower(np.zeros(3000), 100.0)
        assert np.all(spec == math.log(1e-10))

    def test_ten_hz_peak_bin(self):
        t = np.arange(3000) / 100.0
        spec = pp.stft_logpower(np.sin(2 * np.pi * 10 * t), 100.0)
        peaks = pp.stft_bins()[spec.argmax(axis=1)]
        assert set(peaks.tolist()) <= {25, 26}

    def test_single_frame_matches_direct_dft(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=200)
        spec = pp.stft_logpower(x, 100.0)
        assert spec.shape == (1, 128)
        w = hamming(200)
        power = dft_power([a * b for a, b in zip(x, w)], 256)
        np.testing.assert_allclose(spec[0], np.log(np.array(power[1:129]) + 1e-10), atol=1e-10)

    def test_ten_hz_oracle_peak(self):
        t = np.arange(200) / 100.0
        w = hamming(200)
        power = dft_power([math.sin(2 * math.pi * 10 * v) * h for v, h in zip(t, w)], 256)
        assert int(np.argmax(power)) in (25, 26)

    def test_too_short(self):
        with pytest.raises(InputError):
            pp.stft_logpower(np.zeros(150), 100.0)

    def test_window_longer_than_fft(self):
        with pytest.raises(ConfigError):
            pp.stft_logpower(np.zeros(6000), 200.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(200, 4000))
    def test_frame_count_formula(self, n):
        spec = pp.stft_logpower(np.ones(n), 100.0)
        assert spec.shape[0] == (n - 200) // 100 + 1


class TestNormalize:
    def test_hand_case(self):
        out, params = pp.normalize_standardize([[0, 1], [2, 3]])
        np.testing.assert_allclose(out.ravel(), NORMALIZED_0123, atol=1e-12)
        assert (params.min, params.max) == (0.0, 3.0)
        assert abs(params.mu - 0.5) < 1e-15

    def test_constant(self):
        out, params = pp.normalize_standardize([[7, 7], [7, 7]])
        assert out.tolist() == [[0, 0], [0, 0]]
        assert params.sigma == 0.0

    def test_empty(self):
        with pytest.raises(InputError):
            pp.normalize_standardize(np.zeros((0, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 100), st.floats(-100, 100))
    def test_moments_and_affine_invariance(self, seed, a, b):
        A = np.random.default_rng(seed).normal(size=(5, 7))
        out, _ = pp.normalize_standardize(A)
        assert abs(out.mean()) < 1e-9
        assert abs(out.std() - 1.0) < 1e-9
        out2, _ = pp.normalize_standardize(a * A + b)
        np.testing.assert_allclose(out, out2, atol=1e-9)


class TestRelabel:
    def test_merge_n3_n4(self):
        assert pp.relabel_epochs(["S3", "S4"]).kept_stages == ["N3", "N3"]

    def test_movement_dropped(self):
        r = pp.relabel_epochs(["MOVEMENT"])
        assert r.keep.tolist() == [False]

    def test_unknown_dropped(self):
        r = pp.relabel_epochs(["S2", "UNKNOWN", "S2"])
        assert r.keep.tolist() == [True, False, True]

    def test_leading_wake_trim(self):
        r = pp.relabel_epochs(["W"] * 100 + ["S1"])
        assert r.keep[:40].sum() == 0
        assert r.keep[40:].all()
        assert r.keep.sum() == 61

    def test_trailing_wake_trim(self):
        r = pp.relabel_epochs(["S2", "REM"] + ["W"] * 90)
        assert r.keep.sum() == 62
        assert r.keep[:62].all()

    def test_all_wake_kept(self):
        assert pp.relabel_epochs(["W"] * 10).keep.all()

    def test_unknown_label_string(self):
        with pytest.raises(ValidationError):
            pp.relabel_epochs(["S2", "S9"])

    def test_sleep_edf_annotation_names(self):
        r = pp.relabel_epochs(["Sleep stage 4", "Sleep stage R", "Movement time", "Sleep stage ?"])
        assert r.stages == ["N3", "REM", None, None]


def _complete_streams(n_windows=1, hr_values=None, t0=0.0):
    resp_t = t0 + np.arange(n_windows * 1500) * 0.02
    resp = np.sin(resp_t)
    hr_t = t0 + np.arange(n_windows * 6) * 5.0
    hr = np.array(hr_values if hr_values is not None else 60.0 + np.arange(n_windows * 6), dtype=float)
    labels = [(t0 + 30.0 * k, "N2") for k in range(n_windows)]
    return pp.WearableStreams(resp_t, resp, hr_t, hr, [], labels)


class TestAlignWearable:
    def test_complete_window_shapes(self):
        records, report = pp.align_wearable(_complete_streams())
        (rec,) = records
        for name in ("respiration", "heart_rate", "steps"):
            assert rec.channels[name].size == 1500
        assert len(np.unique(rec.channels["heart_rate"])) == 6
        assert report.retained == 1 and report.excluded_count == 0

    def test_heart_rate_repeated_per_five_seconds(self):
        (rec,), _ = pp.align_wearable(_complete_streams())
        hr = rec.channels["heart_rate"].ravel()
        for j in range(6):
            assert np.all(hr[250 * j : 250 * (j + 1)] == 60.0 + j)

    def test_no_steps_is_zero(self):
        (rec,), _ = pp.align_wearable(_complete_streams())
        assert not rec.channels["steps"].any()

    def test_step_events_land_on_slots(self):
        s = _complete_streams()
        s.steps = [(1.0, 3.0), (29.98, 2.0), (45.0, 9.0)]
        (rec,), _ = pp.align_wearable(s)
        steps = rec.channels["steps"].ravel()
        assert steps[50] == 3.0 and steps[1499] == 2.0 and steps.sum() == 5.0

    def test_missing_heart_rate_interpolated(self):
        s = _complete_streams(hr_values=[57, 60, 0, 66, 69, 72])
        keep = np.array([True, True, False, True, True, True])
        s.heart_rate_t, s.heart_rate = s.heart_rate_t[keep], s.heart_rate[keep]
        (rec,), report = pp.align_wearable(s)
        hr = rec.channels["heart_rate"].ravel()
        assert np.all(hr[500:750] == 63.0)
        assert report.interpolated_slots == 1

    def test_missing_respiration_interpolated_and_edges_extended(self):
        s = _complete_streams()
        drop = np.zeros(1500, bool)
        drop[[0, 1, 700, 701, 1499]] = True
        vals = s.respiration.copy()
        s.respiration_t, s.respiration = s.respiration_t[~drop], s.respiration[~drop]
        (rec,), _ = pp.align_wearable(s)
        r = rec.channels["respiration"].ravel()
        assert r[0] == r[1] == vals[2]
        assert r[1499] == vals[1498]
        assert abs(r[700] - (vals[699] + (vals[702] - vals[699]) / 3)) < 1e-15

    def test_jittered_timestamps_snap(self):
        s = _complete_streams()
        s.respiration_t = s.respiration_t + np.random.default_rng(0).uniform(-0.009, 0.009, 1500)
        s.heart_rate_t = s.heart_rate_t + 1.2
        (rec,), report = pp.align_wearable(s)
        np.testing.assert_array_equal(rec.channels["respiration"].ravel(), s.respiration)
        assert report.interpolated_slots == 0

    def test_empty_window_excluded(self):
        s = _complete_streams(n_windows=2)
        s.labels.append((60.0, "W"))
        records, report = pp.align_wearable(s)
        assert len(records) == 2
        assert report.excluded == [2]
        assert report.retained + report.excluded_count == len(s.labels)

    def test_rows_must_divide(self):
        with pytest.raises(ConfigError):
            pp.align_wearable(_complete_streams(), rows=7)


class TestProjectFeatures:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(pp.project_features(x, np.eye(3)).data, x)

    def test_row_vector_matches_loop(self):
        rng = np.random.default_rng(1)
        x, w = rng.normal(size=(1, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(pp.project_features(x, w).data, triple_loop_matmul(x, w), atol=1e-12)

    def test_zero(self):
        assert not pp.project_features(np.zeros((4, 3)), np.ones((3, 6))).data.any()

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            pp.project_features(np.zeros((4, 3)), np.ones((4, 6)))


def test_epoch_record_rejects_bad_label():
    with pytest.raises(ValidationError):
        pp.EpochRecord({"a": np.zeros((2, 2))}, "N4")


def test_psg_chain_shape_and_determinism():
    x = np.random.default_rng(3).normal(size=3000) + np.linspace(0, 50, 3000)
    a = pp.psg_epoch_features(x, 100.0)
    b = pp.psg_epoch_features(x, 100.0)
    assert a.shape == (29, 128)
    assert a.tobytes() == b.tobytes()
    assert abs(a.mean()) < 1e-9
