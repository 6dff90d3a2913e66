"""Residual-VQ spectral codec kernel and intrusive audio evaluation toolkit."""

from codeckit.audio_io import AudioBuffer, peak_normalize, read_wav, resample, write_wav

__all__ = ["AudioBuffer", "peak_normalize", "read_wav", "resample", "write_wav"]

__version__ = "0.1.0"
