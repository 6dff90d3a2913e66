"""STFT analysis/synthesis, mel features, YIN pitch tracking and Griffin-Lim."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy.signal import check_NOLA

from codeckit.audio_io import AudioBuffer

LOG_FLOOR = 1e-10
DEFAULT_N_MELS = 80
MIN_N_MELS = 5
YIN_THRESHOLD = 0.15


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 1024
    hop: int | None = None
    window: str = "hann"

    def __post_init__(self):
        n = self.window_size
        if n < 1 or n & (n - 1):
            raise ValueError(f"window_size must be a power of two, got {n}")
        if self.hop is None:
            object.__setattr__(self, "hop", max(1, n // 4))
        if not 0 < self.hop <= n:
            raise ValueError(f"hop must be in (0, {n}], got {self.hop}")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return max(1, -(-n_samples // self.hop))


@dataclass(frozen=True, eq=False)
class Spectrogram:
    frames: np.ndarray  # (n_frames, n_bins) complex
    config: StftConfig
    sample_rate: int
    length: int | None = None  # original signal length, if known

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    frames: np.ndarray  # (n_frames, n_mels)
    n_mels: int
    fmin: float
    fmax: float
    log: bool


@dataclass(frozen=True, eq=False)
class PitchTrack:
    f0: np.ndarray
    voiced: np.ndarray
    hop: int
    sample_rate: int = field(default=0)


def default_n_mels(window_size: int) -> int:
    """80 mel bands at a 1024-sample window, scaled with the window, at least 5."""
    return max(MIN_N_MELS, int(round(DEFAULT_N_MELS * window_size / 1024)))


# --- STFT -----------------------------------------------------------------

def _pad_index(n_samples: int, cfg: StftConfig) -> tuple[np.ndarray, int]:
    """Source sample of every position in the center (reflect) padded signal."""
    n_frames = cfg.n_frames(n_samples)
    left = cfg.window_size // 2
    right = (n_frames - 1) * cfg.hop + cfg.window_size - left - n_samples
    idx = np.arange(n_samples)
    idx = np.pad(idx, (left, max(right, 0)), mode="reflect")
    if right < 0:
        idx = idx[:right]
    return idx, n_frames


def _analyze(x: np.ndarray, cfg: StftConfig, n_frames: int) -> np.ndarray:
    """rfft of Hann-windowed frames of an already padded signal."""
    n = cfg.window_size
    frames = np.lib.stride_tricks.sliding_window_view(x, n)[::cfg.hop][:n_frames]
    return scipy.fft.rfft(frames * hann(n), axis=-1)


def _synthesize(frames: np.ndarray, cfg: StftConfig, idx: np.ndarray, n_samples: int) -> np.ndarray:
    """Least-squares inverse of the padded STFT.

    Windowed overlap-add numerators and squared-window weights are folded back
    onto their source samples, so reflected edge samples are solved exactly too.
    """
    n, hop = cfg.window_size, cfg.hop
    w = hann(n)
    chunks = scipy.fft.irfft(frames, n=n, axis=-1) * w
    num = np.zeros(len(idx))
    den = np.zeros(len(idx))
    for i in range(frames.shape[0]):
        num[i * hop:i * hop + n] += chunks[i]
        den[i * hop:i * hop + n] += w * w
    num = np.bincount(idx, weights=num, minlength=n_samples)
    den = np.bincount(idx, weights=den, minlength=n_samples)
    out = np.zeros(n_samples)
    nz = den > 1e-11
    out[nz] = num[nz] / den[nz]
    return out


def _check_nola(cfg: StftConfig) -> None:
    w = hann(cfg.window_size)
    if not check_NOLA(w * w, cfg.window_size, cfg.window_size - cfg.hop):
        raise ValueError(f"window {cfg.window_size} / hop {cfg.hop} violates the overlap-add constraint")


def stft(buffer: AudioBuffer, config: StftConfig) -> Spectrogram:
    """Center (reflect) padded Hann STFT with ``ceil(len / hop)`` frames."""
    x = buffer.samples
    if len(x) < 1:
        raise ValueError("stft needs at least one sample")
    idx, n_frames = _pad_index(len(x), config)
    if config.window_size > len(idx):
        raise ValueError("window longer than padded signal")
    return Spectrogram(_analyze(x[idx], config, n_frames), config, buffer.sample_rate, len(x))


def istft(spec: Spectrogram, length: int | None = None) -> AudioBuffer:
    """Inverse STFT; output length defaults to the recorded length, else ``n_frames * hop``."""
    cfg = spec.config
    _check_nola(cfg)
    n_frames = spec.frames.shape[0]
    if length is None:
        length = spec.length if spec.length is not None else n_frames * cfg.hop
    if cfg.n_frames(length) != n_frames:
        raise ValueError(f"length {length} implies {cfg.n_frames(length)} frames, spectrogram has {n_frames}")
    idx, _ = _pad_index(length, cfg)
    return AudioBuffer(_synthesize(spec.frames, cfg, idx, length), spec.sample_rate)


# --- mel features ---------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft_bins: int, n_mels: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-scale triangular filters, each row normalized to unit sum.

    A filter too narrow to cover any bin center collapses onto the bin nearest
    its center frequency.
    """
    if fmax is None:
        fmax = sample_rate / 2
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got ({fmin}, {fmax})")
    freqs = np.linspace(0.0, sample_rate / 2, n_fft_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    sums = fb.sum(axis=1)
    for i in np.flatnonzero(sums <= 0):
        fb[i, np.argmin(np.abs(freqs - edges[i + 1]))] = 1.0
    return fb / fb.sum(axis=1, keepdims=True)


def mel_spectrogram(buffer: AudioBuffer, config: StftConfig, n_mels: int | None = None,
                    log: bool = False, fmin: float = 0.0, fmax: float | None = None) -> MelSpectrogram:
    if n_mels is None:
        n_mels = default_n_mels(config.window_size)
    if fmax is None:
        fmax = buffer.sample_rate / 2
    spec = stft(buffer, config)
    power = spec.frames.real ** 2 + spec.frames.imag ** 2
    fb = mel_filterbank(config.n_bins, n_mels, buffer.sample_rate, fmin, fmax)
    mel = power @ fb.T
    if log:
        mel = np.log(np.maximum(mel, LOG_FLOOR))
    return MelSpectrogram(mel, n_mels, fmin, fmax, log)


def mel_cepstrum(mel: MelSpectrogram, order: int) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel frame, coefficients ``c_0 .. c_order``."""
    if not mel.log:
        raise ValueError("mel_cepstrum expects a log-mel spectrogram")
    if not 0 <= order < mel.n_mels:
        raise ValueError(f"order must be in [0, {mel.n_mels}), got {order}")
    return scipy.fft.dct(mel.frames, type=2, norm="ortho", axis=-1)[:, :order + 1]


# --- pitch ----------------------------------------------------------------

def _yin_difference(frames: np.ndarray, tau_max: int) -> np.ndarray:
    """Difference function d(tau), tau = 0..tau_max, over a fixed integration window."""
    n_frames, width = frames.shape
    integ = width - tau_max
    nfft = scipy.fft.next_fast_len(width + integ)
    a = scipy.fft.rfft(frames[:, :integ], nfft, axis=-1)
    b = scipy.fft.rfft(frames, nfft, axis=-1)
    cross = scipy.fft.irfft(np.conj(a) * b, nfft, axis=-1)[:, :tau_max + 1]
    cs = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames ** 2, axis=-1)], axis=-1)
    taus = np.arange(tau_max + 1)
    energy = cs[:, taus + integ] - cs[:, taus]
    d = energy[:, :1] + energy - 2.0 * cross
    d[:, 0] = 0.0
    return np.maximum(d, 0.0)


def _cmnd(d: np.ndarray) -> np.ndarray:
    out = np.ones_like(d)
    running = np.cumsum(d[:, 1:], axis=-1)
    taus = np.arange(1, d.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = d[:, 1:] * taus / running
    out[:, 1:] = np.where(running > 0, ratio, 1.0)
    return out


def track_pitch(buffer: AudioBuffer, hop: int | None = None, f_min: float = 70.0,
                f_max: float = 400.0, threshold: float = YIN_THRESHOLD,
                frame_seconds: float = 0.04) -> PitchTrack:
    """YIN pitch tracker.

    Frames are centered at ``i * hop`` (zero padded), ``ceil(len / hop)`` of them.
    A frame is voiced when the cumulative-mean-normalized difference dips below
    ``threshold`` inside the lag range implied by ``[f_min, f_max]``.
    """
    sr = buffer.sample_rate
    if hop is None:
        hop = sr // 100
    if not 0 < f_min < f_max < sr / 2:
        raise ValueError(f"need 0 < f_min < f_max < {sr / 2}, got ({f_min}, {f_max})")
    tau_min = max(2, int(math.floor(sr / f_max)))
    tau_max = int(math.ceil(sr / f_min)) + 1
    width = max(int(round(frame_seconds * sr)), 2 * tau_max + 2)

    x = buffer.samples
    n_frames = max(1, -(-len(x) // hop))
    left = width // 2
    padded = np.zeros(left + (n_frames - 1) * hop + width)
    padded[left:left + len(x)] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, width)[::hop][:n_frames]

    d = _yin_difference(frames, tau_max)
    dn = _cmnd(d)
    integ = width - tau_max
    silent = d.max(axis=1) <= 1e-12 * integ

    f0 = np.zeros(n_frames)
    voiced = np.zeros(n_frames, dtype=bool)
    for i in range(n_frames):
        if silent[i]:
            continue
        below = np.flatnonzero(dn[i, tau_min:tau_max] < threshold)
        if below.size == 0:
            continue
        tau = tau_min + below[0]
        while tau + 1 < tau_max and dn[i, tau + 1] < dn[i, tau]:
            tau += 1
        shift = 0.0
        if 0 < tau < tau_max:
            a, b, c = d[i, tau - 1], d[i, tau], d[i, tau + 1]
            denom = a - 2.0 * b + c
            if denom > 0:
                shift = 0.5 * (a - c) / denom
        freq = sr / (tau + shift)
        if f_min <= freq <= f_max:
            f0[i] = freq
            voiced[i] = True
    return PitchTrack(f0, voiced, hop, sr)


# --- phase recovery -------------------------------------------------------

def _bin_weights(n_bins: int, window_size: int) -> np.ndarray:
    # one-sided spectrum weights so squared norms match the full two-sided spectrum
    w = np.full(n_bins, 2.0)
    w[0] = 1.0
    if window_size % 2 == 0:
        w[-1] = 1.0
    return w


def spectral_convergence(estimate: np.ndarray, target: np.ndarray, window_size: int) -> float:
    """Relative Frobenius distance between magnitude spectrograms (two-sided weighting)."""
    w = _bin_weights(target.shape[-1], window_size)
    num = np.sum(w * (estimate - target) ** 2)
    den = np.sum(w * target ** 2)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def _unit_phase(spec: np.ndarray) -> np.ndarray:
    amp = np.abs(spec)
    phase = np.ones_like(spec)
    nz = amp > 0
    phase[nz] = spec[nz] / amp[nz]
    return phase


def griffin_lim(magnitude: np.ndarray, config: StftConfig, iterations: int = 60,
                sample_rate: int = 16000, length: int | None = None, seed: int = 0,
                momentum: float = 0.99, history: list | None = None) -> AudioBuffer:
    """Recover a waveform whose STFT magnitude approximates ``magnitude``.

    Fast Griffin-Lim from a seeded random phase. A momentum step is kept only
    if it does not raise the spectral convergence; otherwise the iteration
    falls back to the plain projection, which never does. The value appended
    to ``history`` each iteration is therefore non-increasing. ``momentum=0``
    gives classic Griffin-Lim.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    mag = np.asarray(magnitude, dtype=np.float64)
    if np.any(mag < 0):
        raise ValueError("magnitudes must be non-negative")
    _check_nola(config)
    n_frames = mag.shape[0]
    if length is None:
        length = n_frames * config.hop
    idx, expected = _pad_index(length, config)
    if expected != n_frames:
        raise ValueError(f"length {length} implies {expected} frames, got {n_frames}")

    def project(spec):
        x = _synthesize(mag * _unit_phase(spec), config, idx, length)
        rebuilt = _analyze(x[idx], config, n_frames)
        return x, rebuilt, spectral_convergence(np.abs(rebuilt), mag, config.window_size)

    rng = np.random.default_rng(seed)
    x, current, err = project(np.exp(2j * np.pi * rng.random(mag.shape)))
    previous = accel = current
    for _ in range(iterations):
        x_new, rebuilt, err_new = project(accel)
        if err_new <= err:
            accel = rebuilt + momentum * (rebuilt - previous)
        else:
            x_new, rebuilt, err_new = project(current)
            accel = rebuilt
        x, current, err, previous = x_new, rebuilt, err_new, rebuilt
        if history is not None:
            history.append(err)
    return AudioBuffer(x, sample_rate)
