"""Intrusive (full-reference) quality metrics for a reference/degraded pair.

All functions take the reference first. MCD is symmetric; SI-SNR, CI-SDR and
STOI are not. A metric that is mathematically undefined for the given input
raises :class:`MetricUndefined` carrying a machine-readable reason code.

MCD here is computed from DCT-II cepstra of a log-mel spectrogram, not from
SPTK mel-generalized cepstra, so absolute values are not comparable with
SPTK-based MCD numbers.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.fft
import scipy.linalg
from scipy.signal import fftconvolve

from codeckit.audio_io import AudioBuffer, resample
from codeckit.dsp import StftConfig, mel_cepstrum, mel_spectrogram, track_pitch

SDR_CLAMP_DB = 60.0
MCD_CONST = 10.0 / math.log(10.0)
EPS = np.finfo(np.float64).eps
F0_FLAT_RTOL = 1e-4

ALL_METRICS = ("mcd", "f0_rmse", "f0_corr", "si_snr", "ci_sdr", "stoi")
# reserved so report consumers see a stable key set; never computed here
UNSUPPORTED_METRICS = ("pesq",)

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0


class MetricUndefined(Exception):
    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or reason)
        self.reason = reason


def _check_rates(a: AudioBuffer, b: AudioBuffer) -> None:
    if a.sample_rate != b.sample_rate:
        raise ValueError(f"sample rates differ: {a.sample_rate} vs {b.sample_rate}")


# --- MCD --------------------------------------------------------------------

def mcd_config(sample_rate: int) -> StftConfig:
    """~64 ms power-of-two window, quarter-window hop."""
    n = 2 ** int(round(math.log2(0.064 * sample_rate)))
    return StftConfig(n, n // 4)


def mcd_from_cepstra(ref: np.ndarray, deg: np.ndarray) -> float:
    """Frame-averaged mel cepstral distortion in dB; column 0 (energy) is ignored."""
    n = min(ref.shape[0], deg.shape[0])
    if n < 1:
        raise MetricUndefined("too_short", "no frames to compare")
    diff = ref[:n, 1:] - deg[:n, 1:]
    return float(np.mean(MCD_CONST * np.sqrt(2.0 * np.sum(diff * diff, axis=1))))


def mcd(reference: AudioBuffer, degraded: AudioBuffer, order: int = 24, n_mels: int = 80) -> float:
    _check_rates(reference, degraded)
    if min(len(reference), len(degraded)) == 0:
        raise MetricUndefined("too_short", "empty signal")
    cfg = mcd_config(reference.sample_rate)
    ref = mel_cepstrum(mel_spectrogram(reference, cfg, n_mels, log=True), order)
    deg = mel_cepstrum(mel_spectrogram(degraded, cfg, n_mels, log=True), order)
    return mcd_from_cepstra(ref, deg)


# --- F0 ---------------------------------------------------------------------

def _co_voiced(reference, degraded, f_min, f_max, hop):
    _check_rates(reference, degraded)
    a = track_pitch(reference, hop, f_min, f_max)
    b = track_pitch(degraded, hop, f_min, f_max)
    n = min(len(a.f0), len(b.f0))
    both = a.voiced[:n] & b.voiced[:n]
    return a.f0[:n][both], b.f0[:n][both]


def f0_rmse(reference: AudioBuffer, degraded: AudioBuffer, f_min: float = 70.0,
            f_max: float = 400.0, hop: int | None = None) -> float:
    """RMSE in Hz over frames voiced in both signals."""
    fa, fb = _co_voiced(reference, degraded, f_min, f_max, hop)
    if fa.size == 0:
        raise MetricUndefined("no_co_voiced_frames", "no frames voiced in both signals")
    return float(np.sqrt(np.mean((fa - fb) ** 2)))


def f0_corr(reference: AudioBuffer, degraded: AudioBuffer, f_min: float = 70.0,
            f_max: float = 400.0, hop: int | None = None) -> float:
    fa, fb = _co_voiced(reference, degraded, f_min, f_max, hop)
    if fa.size < 2:
        raise MetricUndefined("no_co_voiced_frames", "fewer than two co-voiced frames")
    da, db = fa - fa.mean(), fb - fb.mean()
    # interpolation jitter of the tracker on a steady tone is ~1e-6 relative; not variance
    if fa.std() <= F0_FLAT_RTOL * fa.mean() or fb.std() <= F0_FLAT_RTOL * fb.mean():
        raise MetricUndefined("zero_variance", "F0 contour is constant")
    sa, sb = np.sqrt(np.sum(da * da)), np.sqrt(np.sum(db * db))
    return float(np.clip(np.sum(da * db) / (sa * sb), -1.0, 1.0))


# --- SI-SNR / CI-SDR --------------------------------------------------------

def _ratio_db(signal_energy: float, error_energy: float) -> float:
    if error_energy <= 0.0:
        return SDR_CLAMP_DB
    if signal_energy <= 0.0:
        return -SDR_CLAMP_DB
    return float(np.clip(10.0 * math.log10(signal_energy / error_energy), -SDR_CLAMP_DB, SDR_CLAMP_DB))


def si_snr(reference: AudioBuffer, degraded: AudioBuffer) -> float:
    _check_rates(reference, degraded)
    if len(reference) != len(degraded):
        raise ValueError(f"lengths differ: {len(reference)} vs {len(degraded)}")
    s = reference.samples - reference.samples.mean()
    e = degraded.samples - degraded.samples.mean()
    ss = float(np.dot(s, s))
    if ss == 0.0:
        raise MetricUndefined("zero_reference", "reference is silent after mean removal")
    target = (np.dot(e, s) / ss) * s
    noise = e - target
    return _ratio_db(float(np.dot(target, target)), float(np.dot(noise, noise)))


def _autocorr(x: np.ndarray, max_lag: int) -> np.ndarray:
    n = scipy.fft.next_fast_len(2 * len(x))
    X = scipy.fft.rfft(x, n)
    return scipy.fft.irfft(X * np.conj(X), n)[:max_lag]


def _xcorr(target: np.ndarray, ref: np.ndarray, max_lag: int) -> np.ndarray:
    """p[j] = sum_n target[n] * ref[n - j]."""
    n = scipy.fft.next_fast_len(2 * len(ref))
    return scipy.fft.irfft(scipy.fft.rfft(target, n) * np.conj(scipy.fft.rfft(ref, n)), n)[:max_lag]


def ci_sdr(reference: AudioBuffer, degraded: AudioBuffer, taps: int = 512) -> float:
    """SDR after the least-squares FIR fit ``h * reference ~ degraded``.

    The fit uses the causal convolution truncated to the signal length, so a
    pure delay shorter than ``taps`` is absorbed exactly.
    """
    _check_rates(reference, degraded)
    if len(reference) != len(degraded):
        raise ValueError(f"lengths differ: {len(reference)} vs {len(degraded)}")
    s, y = reference.samples, degraded.samples
    T = len(s)
    if taps < 1:
        raise ValueError("taps must be >= 1")
    if T <= taps:
        raise MetricUndefined("too_short", f"need more than {taps} samples")
    if not np.any(s):
        raise MetricUndefined("zero_reference", "reference is silent")
    r = _autocorr(s, taps)
    gram = scipy.linalg.toeplitz(r)
    # rows T .. T+taps-2 of the full convolution matrix are cut by the truncation
    lag = np.arange(taps)
    rows = T + np.arange(taps - 1)[:, None] - lag[None, :]
    tail = np.where(rows < T, s[np.clip(rows, 0, T - 1)], 0.0)
    gram -= tail.T @ tail
    p = _xcorr(y, s, taps)
    try:
        h = scipy.linalg.solve(gram, p, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        h = scipy.linalg.lstsq(gram, p)[0]
    fit = fftconvolve(s, h)[:T]
    err = y - fit
    return _ratio_db(float(np.dot(fit, fit)), float(np.dot(err, err)))


# --- STOI -------------------------------------------------------------------

def third_octave_bands(fs: int = STOI_FS, nfft: int = STOI_NFFT, n_bands: int = STOI_BANDS,
                       min_freq: float = STOI_MIN_FREQ) -> tuple[np.ndarray, np.ndarray]:
    """One-third-octave band matrix over rfft bins, and the band centers."""
    f = np.linspace(0, fs, nfft + 1)[:nfft // 2 + 1]
    k = np.arange(n_bands, dtype=np.float64)
    centers = 2.0 ** (k / 3.0) * min_freq
    lo = np.sqrt(centers * 2.0 ** ((k - 1) / 3.0) * min_freq)
    hi = np.sqrt(centers * 2.0 ** ((k + 1) / 3.0) * min_freq)
    bands = np.zeros((n_bands, len(f)))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        bands[i, a:b] = 1.0
    rank = bands.sum(axis=1)
    keep = np.flatnonzero((rank[1:] >= rank[:-1]) & (rank[1:] != 0))
    n_keep = keep[-1] + 2 if keep.size else 1
    return bands[:n_keep], centers[:n_keep]


def _stoi_window(n: int) -> np.ndarray:
    # symmetric Hann without the zero endpoints
    return np.hanning(n + 2)[1:-1]


def _remove_silent_frames(x, y, dyn_range, n, hop):
    starts = np.arange(0, len(x) - n, hop)
    w = _stoi_window(n)
    if starts.size == 0:
        return x[:0], y[:0]
    fx = np.stack([x[s:s + n] for s in starts]) * w
    fy = np.stack([y[s:s + n] for s in starts]) * w
    with np.errstate(divide="ignore"):
        energy = 20.0 * np.log10(np.linalg.norm(fx, axis=1) / np.sqrt(n))
    mask = (energy - energy.max() + dyn_range) > 0
    kept = np.flatnonzero(mask)
    if kept.size == 0:
        return x[:0], y[:0]
    out_len = starts[kept.size - 1] + n
    xs, ys = np.zeros(out_len), np.zeros(out_len)
    for count, j in enumerate(kept):
        s = starts[count]
        xs[s:s + n] += fx[j]
        ys[s:s + n] += fy[j]
    return xs, ys


def _band_envelopes(x, bands, n, hop, nfft):
    starts = np.arange(0, len(x) - n, hop)
    w = _stoi_window(n)
    frames = np.stack([x[s:s + n] for s in starts]) * w
    spec = np.abs(np.fft.rfft(frames, nfft, axis=1)) ** 2
    return np.sqrt(spec @ bands.T).T  # (bands, frames)


def stoi(reference: AudioBuffer, degraded: AudioBuffer) -> float:
    """Short-time objective intelligibility, computed at 10 kHz."""
    _check_rates(reference, degraded)
    if len(reference) != len(degraded):
        raise ValueError(f"lengths differ: {len(reference)} vs {len(degraded)}")
    x = resample(reference, STOI_FS).samples
    y = resample(degraded, STOI_FS).samples
    x, y = _remove_silent_frames(x, y, STOI_DYN_RANGE, STOI_FRAME, STOI_FRAME // 2)
    if len(x) <= STOI_FRAME:
        raise MetricUndefined("too_short", "nothing left after silent-frame removal")
    bands, _ = third_octave_bands()
    X = _band_envelopes(x, bands, STOI_FRAME, STOI_FRAME // 2, STOI_NFFT)
    Y = _band_envelopes(y, bands, STOI_FRAME, STOI_FRAME // 2, STOI_NFFT)
    if X.shape[1] < STOI_SEGMENT:
        raise MetricUndefined("too_short", f"need {STOI_SEGMENT} frames after silence removal")
    clip = 10.0 ** (-STOI_BETA / 20.0)
    # (segments, bands, N) sliding views
    xs = np.lib.stride_tricks.sliding_window_view(X, STOI_SEGMENT, axis=1).transpose(1, 0, 2)
    ys = np.lib.stride_tricks.sliding_window_view(Y, STOI_SEGMENT, axis=1).transpose(1, 0, 2)
    alpha = np.sqrt(np.sum(xs ** 2, axis=2, keepdims=True) / (np.sum(ys ** 2, axis=2, keepdims=True) + EPS))
    yp = np.minimum(ys * alpha, xs * (1.0 + clip))
    xn = xs - xs.mean(axis=2, keepdims=True)
    yn = yp - yp.mean(axis=2, keepdims=True)
    xn = xn / (np.linalg.norm(xn, axis=2, keepdims=True) + EPS)
    yn = yn / (np.linalg.norm(yn, axis=2, keepdims=True) + EPS)
    return float(np.mean(np.sum(xn * yn, axis=2)))


# --- pair evaluation --------------------------------------------------------

RESAMPLE_POLICIES = ("to-min", "to-max", "to-ref", "none")


@dataclass(frozen=True)
class EvalConfig:
    metrics: tuple[str, ...] = ALL_METRICS
    mcd_order: int = 24
    f0_min: float = 70.0
    f0_max: float = 400.0
    ci_sdr_taps: int = 512
    resample: str = "to-min"

    def __post_init__(self):
        metrics = tuple(self.metrics)
        unknown = set(metrics) - set(ALL_METRICS) - set(UNSUPPORTED_METRICS)
        if unknown:
            raise ValueError(f"unknown metrics: {sorted(unknown)}")
        if len(set(metrics)) != len(metrics):
            raise ValueError("duplicate metric names")
        object.__setattr__(self, "metrics", metrics)
        if not 1 <= self.mcd_order < 80:
            raise ValueError("mcd_order must be in [1, 80)")
        if not 0 < self.f0_min < self.f0_max:
            raise ValueError("need 0 < f0_min < f0_max")
        if self.ci_sdr_taps < 1:
            raise ValueError("ci_sdr_taps must be >= 1")
        if self.resample not in RESAMPLE_POLICIES:
            raise ValueError(f"resample policy must be one of {RESAMPLE_POLICIES}")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricReport:
    metrics: dict[str, float | None] = field(default_factory=dict)
    reasons: dict[str, str] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self, ref: str = "", deg: str = "") -> dict:
        return {"ref": ref, "deg": deg, "sample_rate": self.metadata.get("sample_rate"),
                "metrics": dict(self.metrics), "reasons": dict(self.reasons)}


def _align_rates(reference, degraded, policy):
    ra, rb = reference.sample_rate, degraded.sample_rate
    if ra == rb or policy == "none":
        return reference, degraded
    target = {"to-min": min(ra, rb), "to-max": max(ra, rb), "to-ref": ra}[policy]
    return resample(reference, target), resample(degraded, target)


def evaluate_pair(reference: AudioBuffer, degraded: AudioBuffer,
                  config: EvalConfig = EvalConfig()) -> MetricReport:
    """Run every requested metric; failures become ``None`` entries with a reason."""
    report = MetricReport()
    report.metadata.update(ref_sample_rate=reference.sample_rate, deg_sample_rate=degraded.sample_rate,
                           ref_duration=reference.duration, deg_duration=degraded.duration,
                           config_digest=config.digest(), warnings=[])
    ref, deg = _align_rates(reference, degraded, config.resample)
    n = min(len(ref), len(deg))
    ref = AudioBuffer(ref.samples[:n], ref.sample_rate)
    deg = AudioBuffer(deg.samples[:n], deg.sample_rate)
    report.metadata["sample_rate"] = ref.sample_rate if ref.sample_rate == deg.sample_rate else None
    if ref.sample_rate < STOI_FS and "stoi" in config.metrics:
        report.metadata["warnings"].append("stoi_upsampled")

    runners = {
        "mcd": lambda: mcd(ref, deg, config.mcd_order),
        "f0_rmse": lambda: f0_rmse(ref, deg, config.f0_min, config.f0_max),
        "f0_corr": lambda: f0_corr(ref, deg, config.f0_min, config.f0_max),
        "si_snr": lambda: si_snr(ref, deg),
        "ci_sdr": lambda: ci_sdr(ref, deg, config.ci_sdr_taps),
        "stoi": lambda: stoi(ref, deg),
    }
    for name in config.metrics:
        if name in UNSUPPORTED_METRICS:
            report.metrics[name] = None
            report.reasons[name] = "not_supported"
            continue
        try:
            value = runners[name]()
        except MetricUndefined as exc:
            report.metrics[name], report.reasons[name] = None, exc.reason
            continue
        except ValueError as exc:
            report.metrics[name] = None
            report.reasons[name] = "sample_rate_mismatch" if "sample rate" in str(exc) else "invalid_input"
            continue
        if not math.isfinite(value):
            report.metrics[name], report.reasons[name] = None, "non_finite"
        else:
            report.metrics[name] = value
    return report
