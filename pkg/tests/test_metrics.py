import json
import math

import numpy as np
import pytest

from codeckit import AudioBuffer
from codeckit.metrics import (ALL_METRICS, EvalConfig, MCD_CONST, MetricUndefined, ci_sdr, evaluate_pair,
                              f0_corr, f0_rmse, mcd, mcd_from_cepstra, si_snr, stoi, third_octave_bands)
from oracles import chirp_phase, sawtooth, sine, speechlike

pystoi = pytest.importorskip("pystoi")


def _buf(x, sr=16000):
    return AudioBuffer(np.asarray(x, dtype=float), sr)


@pytest.fixture(scope="module")
def voice():
    return _buf(speechlike(0, sr=16000, seconds=2.0))


def test_mcd_identity_and_symmetry(voice):
    assert mcd(voice, voice) == 0.0
    other = _buf(voice.samples + 0.05 * np.random.default_rng(0).standard_normal(len(voice)))
    assert mcd(voice, other) == mcd(other, voice) > 0


def test_mcd_unit_coefficient_constant():
    rng = np.random.default_rng(1)
    ref = rng.standard_normal((40, 25))
    deg = ref.copy()
    deg[:, 7] += 1.0
    assert abs(mcd_from_cepstra(ref, deg) - 10 / math.log(10) * math.sqrt(2)) < 1e-9
    assert MCD_CONST * math.sqrt(2) == pytest.approx(6.1418, abs=1e-4)


def test_mcd_ignores_energy_coefficient():
    ref = np.zeros((5, 10))
    deg = ref.copy()
    deg[:, 0] = 3.0
    assert mcd_from_cepstra(ref, deg) == 0.0


def test_mcd_rate_mismatch(voice):
    with pytest.raises(ValueError):
        mcd(voice, _buf(voice.samples, 8000))


def test_f0_identity():
    x = _buf(sawtooth(180.0))
    assert f0_rmse(x, x) == 0.0


def test_f0_rmse_220_vs_225():
    value = f0_rmse(_buf(sawtooth(220.0)), _buf(sawtooth(225.0)))
    assert abs(value - 5.0) <= 0.5


def test_f0_rmse_undefined_against_noise():
    noise = _buf(np.random.default_rng(2).standard_normal(16000))
    with pytest.raises(MetricUndefined) as info:
        f0_rmse(_buf(sawtooth(220.0)), noise)
    assert info.value.reason == "no_co_voiced_frames"


def _sweep(f0, f1, seconds=2.0):
    phase = chirp_phase(f0, f1, seconds=seconds)
    return 0.5 * (2.0 * ((phase / (2 * np.pi)) % 1.0) - 1.0)


def test_f0_corr_cases():
    vib = _buf(0.5 * np.sin(chirp_phase(200.0, 300.0, seconds=2.0)))
    assert f0_corr(vib, vib) == pytest.approx(1.0, abs=1e-6)
    up = _sweep(200.0, 300.0)
    assert f0_corr(_buf(up), _buf(up[::-1].copy())) < -0.95
    flat = _buf(sine(250.0, seconds=1.0))
    with pytest.raises(MetricUndefined) as info:
        f0_corr(flat, flat)
    assert info.value.reason == "zero_variance"


def test_si_snr_examples():
    s = np.array([1.0, -1.0, 1.0, -1.0])
    n = np.array([1.0, 1.0, -1.0, -1.0])
    assert abs(si_snr(_buf(s), _buf(s + n))) < 1e-9
    assert si_snr(_buf(s), _buf(0.5 * s)) == 60.0
    with pytest.raises(MetricUndefined):
        si_snr(_buf(np.zeros(4)), _buf(s))
    with pytest.raises(ValueError):
        si_snr(_buf(s), _buf(s[:3]))


def test_si_snr_scale_identity():
    rng = np.random.default_rng(3)
    s, n = rng.standard_normal(1000), rng.standard_normal(1000)
    for alpha in (0.1, 2.0, 7.5):
        a = si_snr(_buf(s), _buf(alpha * s + n))
        b = si_snr(_buf(s), _buf(s + n / alpha))
        assert a == pytest.approx(b, abs=1e-9)
        assert si_snr(_buf(s), _buf(alpha * (s + n))) == pytest.approx(si_snr(_buf(s), _buf(s + n)), abs=1e-9)


def test_ci_sdr_delay_and_identity():
    s = np.random.default_rng(4).standard_normal(4000)
    delayed = np.concatenate([np.zeros(10), s[:-10]])
    assert ci_sdr(_buf(s), _buf(delayed), 512) == 60.0
    assert ci_sdr(_buf(s), _buf(s)) == 60.0


def test_ci_sdr_single_tap_equals_si_snr():
    rng = np.random.default_rng(5)
    s = rng.standard_normal(2000)
    s -= s.mean()
    d = 0.7 * s + 0.4 * rng.standard_normal(2000)
    d -= d.mean()
    assert ci_sdr(_buf(s), _buf(d), 1) == pytest.approx(si_snr(_buf(s), _buf(d)), abs=1e-6)


def test_ci_sdr_least_squares_oracle():
    # direct lstsq over the truncated causal convolution matrix
    rng = np.random.default_rng(6)
    s, d = rng.standard_normal(300), rng.standard_normal(300)
    taps = 8
    a = np.column_stack([np.concatenate([np.zeros(k), s[:len(s) - k]]) for k in range(taps)])
    h = np.linalg.lstsq(a, d, rcond=None)[0]
    fit = a @ h
    expect = 10 * math.log10(np.sum(fit ** 2) / np.sum((d - fit) ** 2))
    assert ci_sdr(_buf(s), _buf(d), taps) == pytest.approx(expect, abs=1e-8)


def test_ci_sdr_monotone_in_taps():
    rng = np.random.default_rng(7)
    s = rng.standard_normal(3000)
    d = np.convolve(s, rng.standard_normal(40))[:3000] + rng.standard_normal(3000)
    values = [ci_sdr(_buf(s), _buf(d), t) for t in (1, 4, 16, 64, 256)]
    assert all(b >= a - 1e-6 for a, b in zip(values, values[1:]))


def test_ci_sdr_errors():
    with pytest.raises(MetricUndefined) as info:
        ci_sdr(_buf(np.zeros(1000)), _buf(np.ones(1000)))
    assert info.value.reason == "zero_reference"
    with pytest.raises(MetricUndefined) as info:
        ci_sdr(_buf(np.ones(100)), _buf(np.ones(100)), 512)
    assert info.value.reason == "too_short"


def test_third_octave_bands_shape():
    matrix, centers = third_octave_bands()
    assert matrix.shape == (15, 257)
    assert np.all(matrix.sum(axis=1) > 0)
    assert centers[0] == pytest.approx(150.0)
    np.testing.assert_allclose(centers[1:] / centers[:-1], 2 ** (1 / 3))


def test_stoi_identity(voice):
    assert stoi(voice, voice) == pytest.approx(1.0, abs=1e-6)


def test_stoi_noise_low():
    x = _buf(speechlike(1, sr=10000), 10000)
    n = _buf(np.random.default_rng(8).standard_normal(len(x)) * 0.1, 10000)
    assert stoi(x, n) < 0.4


def test_stoi_snr_monotone():
    x = speechlike(2, sr=10000)
    noise = np.random.default_rng(9).standard_normal(len(x))
    noise *= np.sqrt(np.mean(x ** 2) / np.mean(noise ** 2))
    hi = stoi(_buf(x, 10000), _buf(x + 0.1 * noise, 10000))
    lo = stoi(_buf(x, 10000), _buf(x + noise, 10000))
    assert hi > lo


@pytest.mark.parametrize("seed", range(10))
def test_stoi_matches_reference_implementation(seed):
    x = speechlike(seed, sr=10000)
    rng = np.random.default_rng(100 + seed)
    snr_db = rng.uniform(-5, 20)
    noise = rng.standard_normal(len(x))
    noise *= np.sqrt(np.mean(x ** 2) / np.mean(noise ** 2) / 10 ** (snr_db / 10))
    y = x + noise
    ours = stoi(_buf(x, 10000), _buf(y, 10000))
    ref = pystoi.stoi(x, y, 10000, extended=False)
    assert abs(ours - ref) < 0.01


def test_stoi_too_short():
    x = _buf(np.random.default_rng(10).standard_normal(2000), 10000)
    with pytest.raises(MetricUndefined):
        stoi(x, x)


def test_evaluate_identical_pair(voice):
    report = evaluate_pair(voice, voice)
    m = report.metrics
    assert list(m) == list(ALL_METRICS)
    assert m["mcd"] == 0.0 and m["f0_rmse"] == 0.0
    assert m["si_snr"] == 60.0 and m["ci_sdr"] == 60.0
    assert m["stoi"] == pytest.approx(1.0, abs=1e-6)
    assert m["f0_corr"] is None or m["f0_corr"] == pytest.approx(1.0, abs=1e-6)
    assert set(report.reasons) == {k for k, v in m.items() if v is None}


def test_evaluate_selection_and_json(voice):
    report = evaluate_pair(voice, voice, EvalConfig(("si_snr",)))
    assert list(report.metrics) == ["si_snr"]
    obj = report.to_json("a.wav", "b.wav")
    assert set(obj) == {"ref", "deg", "sample_rate", "metrics", "reasons"}
    assert json.loads(json.dumps(obj)) == obj


def test_evaluate_resample_policy():
    ref = _buf(speechlike(3, sr=48000, seconds=1.0), 48000)
    deg = _buf(speechlike(3, sr=16000, seconds=1.0), 16000)
    report = evaluate_pair(ref, deg, EvalConfig(("si_snr", "mcd"), resample="to-min"))
    assert report.metadata["sample_rate"] == 16000
    assert report.metadata["ref_sample_rate"] == 48000 and report.metadata["deg_sample_rate"] == 16000
    assert report.metrics["si_snr"] is not None
    none = evaluate_pair(ref, deg, EvalConfig(("si_snr",), resample="none"))
    assert none.metrics["si_snr"] is None and none.reasons["si_snr"] == "sample_rate_mismatch"


def test_evaluate_failure_is_recorded_not_raised():
    x = _buf(sawtooth(220.0))
    noise = _buf(np.random.default_rng(11).standard_normal(16000))
    report = evaluate_pair(x, noise, EvalConfig(("f0_rmse", "pesq", "si_snr")))
    assert report.metrics["f0_rmse"] is None
    assert report.reasons == {"f0_rmse": "no_co_voiced_frames", "pesq": "not_supported"}
    assert report.metrics["si_snr"] is not None


def test_evaluate_deterministic(voice):
    other = _buf(voice.samples[::-1].copy())
    a = json.dumps(evaluate_pair(voice, other).to_json())
    b = json.dumps(evaluate_pair(voice, other).to_json())
    assert a == b


def test_stoi_upsample_warning():
    x = _buf(speechlike(4, sr=8000, seconds=2.0), 8000)
    report = evaluate_pair(x, x, EvalConfig(("stoi",)))
    assert "stoi_upsampled" in report.metadata["warnings"]
    assert report.metrics["stoi"] == pytest.approx(1.0, abs=1e-6)


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(("visqol",))
    with pytest.raises(ValueError):
        EvalConfig(resample="sideways")
    with pytest.raises(ValueError):
        EvalConfig(ci_sdr_taps=0)
    assert EvalConfig().digest() == EvalConfig().digest() != EvalConfig(mcd_order=12).digest()
