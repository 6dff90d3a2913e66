"""Mono float audio buffers, RIFF/WAVE I/O and band-limited resampling."""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import upfirdn

PCM16_SCALE = 32768.0
KAISER_BETA = 8.6
TAPS_PER_PHASE = 64

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Base class for malformed or unsupported WAVE input."""


class UnsupportedWavFormat(WavError):
    pass


class TruncatedWav(WavError):
    pass


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """A mono signal.

    ``samples`` is stored as a read-only float64 array. Values are nominally in
    [-1, 1]; out-of-range values are allowed in memory and clamped on PCM16 write.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    def __eq__(self, other):
        if not isinstance(other, AudioBuffer):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _read_chunks(data: bytes):
    if len(data) < 12:
        raise TruncatedWav("file shorter than RIFF header")
    riff, _, wave = struct.unpack("<4sI4s", data[:12])
    if riff != b"RIFF" or wave != b"WAVE":
        raise UnsupportedWavFormat("not a RIFF/WAVE container")
    pos = 12
    chunks = {}
    while pos + 8 <= len(data):
        cid, size = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise TruncatedWav(f"chunk {cid!r} declares {size} bytes, {len(body)} present")
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    return chunks


def read_wav(path) -> AudioBuffer:
    """Read a PCM16 or float32 WAVE file, averaging channels to mono."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    chunks = _read_chunks(path.read_bytes())
    if b"fmt " not in chunks:
        raise TruncatedWav("missing fmt chunk")
    if b"data" not in chunks:
        raise TruncatedWav("missing data chunk")
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise TruncatedWav("fmt chunk too short")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise TruncatedWav("extensible fmt chunk too short")
        tag = struct.unpack("<H", fmt[24:26])[0]
    if channels < 1:
        raise UnsupportedWavFormat("zero channels")
    if tag == _FORMAT_PCM and bits == 16:
        dtype = np.dtype("<i2")
    elif tag == _FORMAT_FLOAT and bits == 32:
        dtype = np.dtype("<f4")
    else:
        raise UnsupportedWavFormat(f"unsupported encoding: format tag {tag:#06x}, {bits} bits")
    raw = chunks[b"data"]
    frame_bytes = dtype.itemsize * channels
    if len(raw) % frame_bytes:
        raise TruncatedWav("data chunk ends mid-frame")
    x = np.frombuffer(raw, dtype=dtype).reshape(-1, channels).astype(np.float64)
    if dtype.kind == "i":
        x /= PCM16_SCALE
    return AudioBuffer(x.mean(axis=1), rate)


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def wav_bytes(buffer: AudioBuffer, encoding: str = "pcm16") -> bytes:
    if len(buffer) == 0:
        raise ValueError("cannot write an empty buffer")
    if encoding == "pcm16":
        x = np.clip(buffer.samples, -1.0, 1.0 - 1.0 / PCM16_SCALE)
        payload = np.round(x * PCM16_SCALE).astype("<i2").tobytes()
        tag, bits = _FORMAT_PCM, 16
    elif encoding == "float32":
        payload = buffer.samples.astype("<f4").tobytes()
        tag, bits = _FORMAT_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, buffer.sample_rate, buffer.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(buffer: AudioBuffer, path, encoding: str = "pcm16") -> None:
    """Write ``buffer`` as a mono WAVE file (``pcm16`` or ``float32``).

    The file appears atomically; a failed write leaves no partial output.
    """
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {path.parent}")
    _atomic_write(path, wav_bytes(buffer, encoding))


def _kaiser_sinc(up: int, down: int) -> tuple[np.ndarray, int]:
    max_rate = max(up, down)
    # half length rounded up to a multiple of ``down`` keeps the group delay on the output grid
    half = math.ceil(TAPS_PER_PHASE // 2 * max_rate / down) * down
    t = np.arange(-half, half + 1, dtype=np.float64)
    h = np.sinc(t / max_rate) * np.kaiser(2 * half + 1, KAISER_BETA)
    h *= up / h.sum()
    return h, half


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Polyphase windowed-sinc rate conversion.

    The output has ``round(len * target / source)`` samples and is aligned with
    the input (the filter delay is compensated).
    """
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise ValueError(f"target_rate must be a positive integer, got {target_rate}")
    target_rate = int(target_rate)
    src = buffer.sample_rate
    if target_rate == src:
        return buffer
    g = math.gcd(src, target_rate)
    up, down = target_rate // g, src // g
    n_out = int(math.floor(len(buffer) * up / down + 0.5))
    if len(buffer) == 0 or n_out == 0:
        return AudioBuffer(np.zeros(n_out), target_rate)
    h, half = _kaiser_sinc(up, down)
    offset = half // down
    # zero tail so the filter's full support is available for the last outputs
    x = np.concatenate([buffer.samples, np.zeros(len(h) // up + 1)])
    y = upfirdn(h, x, up, down)
    return AudioBuffer(y[offset:offset + n_out], target_rate)


def peak_normalize(buffer: AudioBuffer, target_peak: float = 1.0) -> AudioBuffer:
    if not 0.0 < target_peak <= 1.0:
        raise ValueError("target_peak must be in (0, 1]")
    peak = np.max(np.abs(buffer.samples)) if len(buffer) else 0.0
    if peak == 0.0:
        return buffer
    return AudioBuffer(buffer.samples * (target_peak / peak), buffer.sample_rate)
