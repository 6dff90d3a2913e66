"""A DSP spectral codec: log-mel encoder, RVQ/GRVQ quantizer, mel-inversion decoder.

Binary formats (all little-endian):

Model ``ESPK``::

    magic "ESPK" | version u16 | sample_rate, window, hop, n_mels, fmin, fmax,
    codebook_size, n_levels, n_groups, group_dim, gl_iterations (u32 each) |
    codebooks float32, group-major then level-major, each B x group_dim row-major

Stream ``ESPC``::

    magic "ESPC" | version u16 | sample_rate u32 | hop u32 | window u32 |
    n_mels u16 | codebook_size u32 | n_levels u16 | n_levels_used u16 |
    n_groups u16 | n_frames u32 | codes u16, ordered (frame, level, group)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from codeckit.audio_io import AudioBuffer
from codeckit.dsp import StftConfig, griffin_lim, mel_filterbank, mel_spectrogram
from codeckit.losses import NormKind, ScaleSet, commitment_loss, multi_scale_mel_loss
from codeckit.quantizer import (CodeSequence, Codebook, GrvqQuantizer, RvqQuantizer, grvq_decode,
                                grvq_encode, levels_for_bitrate, residual_chain, rvq_decode,
                                rvq_encode, train_grvq, train_rvq)

MODEL_MAGIC = b"ESPK"
STREAM_MAGIC = b"ESPC"
FORMAT_VERSION = 1
RIDGE = 1e-8

_MODEL_HEADER = struct.Struct("<4sH11I")
_STREAM_HEADER = struct.Struct("<4sHIIIHIHHHI")


class FormatError(ValueError):
    pass


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class TruncatedData(FormatError):
    pass


class HeaderMismatch(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    sample_rate: int = 16000
    window: int = 1024
    hop: int = 320
    n_mels: int = 80
    fmin: int = 0
    fmax: int | None = None
    n_levels: int = 32
    codebook_size: int = 1024
    n_groups: int = 1
    epochs: int = 10
    gl_iterations: int = 60

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if not 2 <= self.codebook_size <= 65536:
            raise ValueError("codebook_size must be in [2, 65536]")
        if self.n_groups < 1 or self.n_mels % self.n_groups:
            raise ValueError(f"n_mels {self.n_mels} is not divisible into {self.n_groups} groups")
        if self.epochs < 0 or self.gl_iterations < 1:
            raise ValueError("epochs must be >= 0 and gl_iterations >= 1")
        StftConfig(self.window, self.hop)


class SpectralCodec:
    """Encoder = log-mel analysis, Quantizer = RVQ or GRVQ, Decoder = mel pseudo-inverse + Griffin-Lim."""

    def __init__(self, quantizer: RvqQuantizer | GrvqQuantizer, sample_rate: int = 16000,
                 window: int = 1024, hop: int = 320, n_mels: int = 80, fmin: int = 0,
                 fmax: int | None = None, gl_iterations: int = 60):
        self.quantizer = quantizer
        self.sample_rate = int(sample_rate)
        self.stft_config = StftConfig(window, hop)
        self.n_mels = int(n_mels)
        self.fmin = int(fmin)
        self.fmax = int(fmax if fmax is not None else sample_rate // 2)
        self.gl_iterations = int(gl_iterations)
        if quantizer.dim != self.n_mels:
            raise ValueError(f"quantizer dimension {quantizer.dim} != n_mels {self.n_mels}")
        fb = mel_filterbank(self.stft_config.n_bins, self.n_mels, self.sample_rate, self.fmin, self.fmax)
        self.filterbank = fb
        self.pseudo_inverse = fb.T @ np.linalg.inv(fb @ fb.T + RIDGE * np.eye(self.n_mels))

    @property
    def window(self) -> int:
        return self.stft_config.window_size

    @property
    def hop(self) -> int:
        return self.stft_config.hop

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def n_groups(self) -> int:
        return self.quantizer.n_groups if isinstance(self.quantizer, GrvqQuantizer) else 1

    @property
    def n_levels(self) -> int:
        return self.quantizer.n_levels

    @property
    def codebook_size(self) -> int:
        return self.quantizer.codebook_size

    def groups(self) -> list[RvqQuantizer]:
        q = self.quantizer
        return q.groups if isinstance(q, GrvqQuantizer) else [q]

    def analyze(self, audio: AudioBuffer) -> np.ndarray:
        """Encoder: log-mel frames, shape ``(ceil(len / hop), n_mels)``."""
        if audio.sample_rate != self.sample_rate:
            raise ValueError(f"audio at {audio.sample_rate} Hz, codec expects {self.sample_rate} Hz")
        return mel_spectrogram(audio, self.stft_config, self.n_mels, log=True,
                               fmin=self.fmin, fmax=self.fmax).frames

    def quantize(self, E: np.ndarray, n_levels: int) -> tuple[CodeSequence, np.ndarray]:
        if isinstance(self.quantizer, GrvqQuantizer):
            return grvq_encode(self.quantizer, E, n_levels, self.frame_rate)
        return rvq_encode(self.quantizer, E, n_levels, self.frame_rate)

    def dequantize(self, codes: CodeSequence) -> np.ndarray:
        if isinstance(self.quantizer, GrvqQuantizer):
            return grvq_decode(self.quantizer, codes)
        return rvq_decode(self.quantizer, codes)

    def synthesize(self, E_hat: np.ndarray) -> AudioBuffer:
        """Decoder: log-mel frames back to a waveform of ``n_frames * hop`` samples."""
        power = np.maximum(np.exp(E_hat) @ self.pseudo_inverse.T, 0.0)
        return griffin_lim(np.sqrt(power), self.stft_config, self.gl_iterations,
                           self.sample_rate, length=E_hat.shape[0] * self.hop, seed=0)


@dataclass(eq=False)
class EncodedStream:
    sample_rate: int
    hop: int
    window: int
    n_mels: int
    codebook_size: int
    n_levels: int
    n_groups: int
    codes: np.ndarray  # (n_frames, n_groups, n_levels_used)
    clamped: bool = field(default=False)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 3 or self.codes.shape[1] != self.n_groups:
            raise ValueError(f"codes must have shape (frames, {self.n_groups}, levels), got {self.codes.shape}")
        if not 1 <= self.n_levels_used <= self.n_levels:
            raise ValueError(f"n_levels_used {self.n_levels_used} outside [1, {self.n_levels}]")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.codebook_size):
            raise ValueError("code index out of range")

    @property
    def n_frames(self) -> int:
        return self.codes.shape[0]

    @property
    def n_levels_used(self) -> int:
        return self.codes.shape[2]

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def duration(self) -> float:
        return self.n_frames * self.hop / self.sample_rate

    @property
    def payload_bits(self) -> float:
        return self.n_frames * self.n_levels_used * self.n_groups * math.log2(self.codebook_size)

    @property
    def bitrate(self) -> float:
        """Payload bits per second of decoded audio."""
        return self.frame_rate * self.n_levels_used * self.n_groups * math.log2(self.codebook_size)

    def code_sequence(self) -> CodeSequence:
        c = self.codes[:, 0, :] if self.n_groups == 1 else self.codes
        return CodeSequence(c, self.codebook_size, self.frame_rate)

    def header(self) -> tuple:
        return (self.sample_rate, self.hop, self.window, self.n_mels, self.codebook_size,
                self.n_levels, self.n_levels_used, self.n_groups, self.n_frames)

    def __eq__(self, other):
        if not isinstance(other, EncodedStream):
            return NotImplemented
        return self.header() == other.header() and np.array_equal(self.codes, other.codes)


# --- pipeline ---------------------------------------------------------------

def _to_float32_precision(q: RvqQuantizer | GrvqQuantizer) -> None:
    groups = q.groups if isinstance(q, GrvqQuantizer) else [q]
    for g in groups:
        for cb in g.levels:
            cb.codes = cb.codes.astype(np.float32).astype(np.float64)
        g.states = [None] * g.n_levels


def train_codec(corpus, config: CodecConfig = CodecConfig(), seed: int = 0) -> SpectralCodec:
    """Fit the quantizer on log-mel frames pooled from ``corpus``.

    Codebooks are rounded to float32 so a saved model reloads bit-identically.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    probe = SpectralCodec(RvqQuantizer([Codebook(np.zeros((1, config.n_mels)))]), config.sample_rate,
                          config.window, config.hop, config.n_mels, config.fmin, config.fmax,
                          config.gl_iterations)
    frames = np.concatenate([probe.analyze(a) for a in corpus], axis=0)
    if frames.shape[0] < config.codebook_size:
        raise ValueError(f"corpus yields {frames.shape[0]} frames, need at least {config.codebook_size}")
    if config.n_groups == 1:
        q = train_rvq(frames, config.n_levels, config.codebook_size, config.epochs, seed)
    else:
        q = train_grvq(frames, config.n_groups, config.n_levels, config.codebook_size, config.epochs, seed)
    _to_float32_precision(q)
    return SpectralCodec(q, config.sample_rate, config.window, config.hop, config.n_mels,
                         config.fmin, config.fmax, config.gl_iterations)


def encode(codec: SpectralCodec, audio: AudioBuffer, bitrate: float) -> EncodedStream:
    """Encoder then quantizer, at the level count matching ``bitrate``."""
    if audio.sample_rate != codec.sample_rate:
        raise ValueError(f"audio at {audio.sample_rate} Hz, codec expects {codec.sample_rate} Hz")
    exact = bitrate / (math.log2(codec.codebook_size) * codec.frame_rate * codec.n_groups)
    n_levels = levels_for_bitrate(bitrate, codec.codebook_size, codec.frame_rate,
                                  codec.n_levels, codec.n_groups)
    clamped = int(math.floor(exact + 0.5)) != n_levels
    codes, _ = codec.quantize(codec.analyze(audio), n_levels)
    c = codes.codes if codes.codes.ndim == 3 else codes.codes[:, None, :]
    return EncodedStream(codec.sample_rate, codec.hop, codec.window, codec.n_mels, codec.codebook_size,
                         codec.n_levels, codec.n_groups, c, clamped)


def check_stream(codec: SpectralCodec, stream: EncodedStream) -> None:
    expected = (codec.sample_rate, codec.hop, codec.window, codec.n_mels, codec.codebook_size,
                codec.n_levels, codec.n_groups)
    got = (stream.sample_rate, stream.hop, stream.window, stream.n_mels, stream.codebook_size,
           stream.n_levels, stream.n_groups)
    if expected != got:
        names = ("sample_rate", "hop", "window", "n_mels", "codebook_size", "n_levels", "n_groups")
        diff = [f"{n}: model {a} / stream {b}" for n, a, b in zip(names, expected, got) if a != b]
        raise HeaderMismatch("stream does not match model (" + "; ".join(diff) + ")")


def decode(codec: SpectralCodec, stream: EncodedStream) -> AudioBuffer:
    check_stream(codec, stream)
    return codec.synthesize(codec.dequantize(stream.code_sequence()))


# --- serialization ----------------------------------------------------------

def _unpack_header(fmt: struct.Struct, data: bytes, magic: bytes, what: str) -> tuple:
    if len(data) < 4:
        raise TruncatedData(f"{what} shorter than its magic")
    if data[:4] != magic:
        raise BadMagic(f"bad magic: expected {magic!r}, got {data[:4]!r}")
    if len(data) < 6:
        raise TruncatedData(f"{what} header truncated")
    version = struct.unpack_from("<H", data, 4)[0]
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported version {version} (this build reads {FORMAT_VERSION})")
    if len(data) < fmt.size:
        raise TruncatedData(f"{what} header truncated")
    return fmt.unpack_from(data)


def save_model(codec: SpectralCodec) -> bytes:
    groups = codec.groups()
    header = _MODEL_HEADER.pack(MODEL_MAGIC, FORMAT_VERSION, codec.sample_rate, codec.window, codec.hop,
                                codec.n_mels, codec.fmin, codec.fmax, codec.codebook_size, codec.n_levels,
                                len(groups), groups[0].dim, codec.gl_iterations)
    body = b"".join(cb.codes.astype("<f4").tobytes() for g in groups for cb in g.levels)
    return header + body


def load_model(data: bytes) -> SpectralCodec:
    (_, _, sample_rate, window, hop, n_mels, fmin, fmax, size, n_levels, n_groups, group_dim,
     gl_iterations) = _unpack_header(_MODEL_HEADER, data, MODEL_MAGIC, "model")
    if n_groups < 1 or n_levels < 1 or size < 1 or group_dim * n_groups != n_mels:
        raise FormatError("inconsistent model header")
    per_book = size * group_dim
    expected = _MODEL_HEADER.size + 4 * per_book * n_levels * n_groups
    if len(data) < expected:
        raise TruncatedData(f"model truncated: {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after model")
    flat = np.frombuffer(data, dtype="<f4", offset=_MODEL_HEADER.size).astype(np.float64)
    books = flat.reshape(n_groups, n_levels, size, group_dim)
    groups = [RvqQuantizer([Codebook(books[g, lv]) for lv in range(n_levels)]) for g in range(n_groups)]
    q = groups[0] if n_groups == 1 else GrvqQuantizer(groups)
    return SpectralCodec(q, sample_rate, window, hop, n_mels, fmin, fmax, gl_iterations)


def save_stream(stream: EncodedStream) -> bytes:
    header = _STREAM_HEADER.pack(STREAM_MAGIC, FORMAT_VERSION, stream.sample_rate, stream.hop, stream.window,
                                 stream.n_mels, stream.codebook_size, stream.n_levels, stream.n_levels_used,
                                 stream.n_groups, stream.n_frames)
    payload = np.ascontiguousarray(stream.codes.transpose(0, 2, 1)).astype("<u2").tobytes()
    return header + payload


def load_stream(data: bytes) -> EncodedStream:
    (_, _, sample_rate, hop, window, n_mels, size, n_levels, used, n_groups,
     n_frames) = _unpack_header(_STREAM_HEADER, data, STREAM_MAGIC, "stream")
    expected = _STREAM_HEADER.size + 2 * n_frames * used * n_groups
    if len(data) < expected:
        raise TruncatedData(f"stream truncated: {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after stream")
    if n_groups < 1 or hop < 1:
        raise FormatError("inconsistent stream header")
    codes = np.frombuffer(data, dtype="<u2", offset=_STREAM_HEADER.size).astype(np.int64)
    codes = codes.reshape(n_frames, used, n_groups).transpose(0, 2, 1)
    try:
        return EncodedStream(sample_rate, hop, window, n_mels, size, n_levels, n_groups, codes)
    except ValueError as exc:
        raise FormatError(f"corrupt stream: {exc}") from exc


# --- development-set probe --------------------------------------------------

def training_report(codec: SpectralCodec, heldout, levels=None,
                    scales: ScaleSet = ScaleSet(), norm: NormKind | str = NormKind.L1) -> dict:
    """Per-level residual energy plus commitment and multi-scale mel loss at chosen level counts.

    ``residual_energy[i]`` is the mean squared residual left after ``i + 1`` levels.
    Files shorter than the largest mel scale are left out of ``mel_loss`` (None if all are).
    """
    heldout = list(heldout)
    if not heldout:
        raise ValueError("held-out set is empty")
    levels = (1, codec.n_levels) if levels is None else levels
    levels = sorted(set(int(n) for n in levels))
    E = [codec.analyze(a) for a in heldout]
    pooled = np.concatenate(E, axis=0)
    parts = np.split(pooled, codec.n_groups, axis=1)
    chains = [residual_chain(g, p, codec.n_levels) for g, p in zip(codec.groups(), parts)]
    energy = [float(np.mean(np.concatenate([c.residuals[i + 1] for c in chains], axis=1) ** 2))
              for i in range(codec.n_levels)]
    rows = []
    for n in levels:
        commit = [commitment_loss(e, codec.quantizer, n, norm) for e in E]
        mel = []
        for audio, e in zip(heldout, E):
            if len(audio) < max(scales.window_sizes):
                continue  # too short for the largest mel scale
            codes, _ = codec.quantize(e, n)
            rebuilt = codec.synthesize(codec.dequantize(codes))
            rebuilt = AudioBuffer(rebuilt.samples[:len(audio)], audio.sample_rate)
            mel.append(multi_scale_mel_loss(audio, rebuilt, scales, norm))
        rows.append({"n_levels": n, "bitrate": codec.frame_rate * n * codec.n_groups * math.log2(codec.codebook_size),
                     "commitment_loss": float(np.mean(commit)), "mel_loss": float(np.mean(mel)) if mel else None})
    return {"n_frames": int(pooled.shape[0]), "residual_energy": energy, "levels": rows}
