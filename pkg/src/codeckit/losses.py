"""Codec training objectives as pure functions.

Every norm is mean-reduced over elements. Adversarial terms take discriminator
outputs supplied by the caller; hinges act on each discriminator's mean score.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from codeckit.audio_io import AudioBuffer
from codeckit.dsp import StftConfig, mel_spectrogram
from codeckit.quantizer import GrvqQuantizer, RvqQuantizer, residual_chain

DEFAULT_WINDOWS = tuple(2 ** k for k in range(5, 12))


class NormKind(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"
    L1_PLUS_L2 = "l1_plus_l2"


def mean_norm(diff, norm: NormKind | str = NormKind.L1) -> float:
    """Mean absolute error, mean squared error, or their sum."""
    norm = NormKind(norm)
    diff = np.asarray(diff, dtype=np.float64)
    if diff.size == 0:
        return 0.0
    l1 = float(np.mean(np.abs(diff)))
    if norm is NormKind.L1:
        return l1
    l2 = float(np.mean(diff * diff))
    return l2 if norm is NormKind.L2 else l1 + l2


@dataclass(frozen=True)
class ScaleSet:
    window_sizes: tuple[int, ...] = DEFAULT_WINDOWS

    def __post_init__(self):
        sizes = tuple(int(w) for w in self.window_sizes)
        if not sizes:
            raise ValueError("at least one scale is required")
        for w in sizes:
            if w < 32 or w & (w - 1):
                raise ValueError(f"window sizes must be powers of two >= 32, got {w}")
        object.__setattr__(self, "window_sizes", sizes)

    def configs(self) -> list[StftConfig]:
        return [StftConfig(w, w // 4) for w in self.window_sizes]


@dataclass
class DiscriminatorOutput:
    """Outputs of K discriminators for one signal: a score array and per-layer features each."""

    scores: list[np.ndarray]
    features: list[list[np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if not self.scores:
            raise ValueError("need at least one discriminator")
        self.scores = [np.asarray(s, dtype=np.float64) for s in self.scores]
        if not self.features:
            self.features = [[] for _ in self.scores]
        if len(self.features) != len(self.scores):
            raise ValueError("features must be given per discriminator")


def _check_pair(s: AudioBuffer, s_hat: AudioBuffer) -> None:
    if s.sample_rate != s_hat.sample_rate:
        raise ValueError(f"sample rates differ: {s.sample_rate} vs {s_hat.sample_rate}")
    if len(s) != len(s_hat):
        raise ValueError(f"lengths differ: {len(s)} vs {len(s_hat)}")


def time_domain_loss(s: AudioBuffer, s_hat: AudioBuffer, norm: NormKind | str = NormKind.L1) -> float:
    _check_pair(s, s_hat)
    return mean_norm(s.samples - s_hat.samples, norm)


def multi_scale_mel_loss(s: AudioBuffer, s_hat: AudioBuffer, scales: ScaleSet = ScaleSet(),
                         norm: NormKind | str = NormKind.L1) -> float:
    """Average over scales of the log-mel distance (hop = window / 4 at each scale)."""
    _check_pair(s, s_hat)
    if len(s) < max(scales.window_sizes):
        raise ValueError(f"signal of {len(s)} samples is shorter than the largest window "
                         f"{max(scales.window_sizes)}")
    total = 0.0
    for cfg in scales.configs():
        a = mel_spectrogram(s, cfg, log=True).frames
        b = mel_spectrogram(s_hat, cfg, log=True).frames
        total += mean_norm(a - b, norm)
    return total / len(scales.window_sizes)


def reconstruction_loss(s: AudioBuffer, s_hat: AudioBuffer, scales: ScaleSet = ScaleSet(),
                        norm: NormKind | str = NormKind.L1) -> float:
    return time_domain_loss(s, s_hat, norm) + multi_scale_mel_loss(s, s_hat, scales, norm)


def generator_adversarial_loss(fake_scores: Sequence) -> float:
    if len(fake_scores) == 0:
        raise ValueError("need at least one discriminator score")
    return float(np.mean([max(0.0, 1.0 - float(np.mean(d))) for d in fake_scores]))


def feature_matching_loss(real_feats: Sequence[Sequence], fake_feats: Sequence[Sequence]) -> float:
    """Sum of per-layer mean L1 distances divided by K * R."""
    if len(real_feats) != len(fake_feats):
        raise ValueError("discriminator counts differ")
    total, count = 0.0, 0
    for real_layers, fake_layers in zip(real_feats, fake_feats):
        if len(real_layers) != len(fake_layers):
            raise ValueError("layer counts differ")
        for r, f in zip(real_layers, fake_layers):
            r, f = np.asarray(r, dtype=np.float64), np.asarray(f, dtype=np.float64)
            if r.shape != f.shape:
                raise ValueError(f"feature shapes differ: {r.shape} vs {f.shape}")
            total += float(np.mean(np.abs(r - f)))
            count += 1
    if count == 0:
        return 0.0
    return total / count  # count == K * R


def generator_loss(real: DiscriminatorOutput, fake: DiscriminatorOutput) -> float:
    return generator_adversarial_loss(fake.scores) + feature_matching_loss(real.features, fake.features)


def discriminator_loss(real_scores: Sequence, fake_scores: Sequence) -> float:
    if len(real_scores) != len(fake_scores):
        raise ValueError(f"got {len(real_scores)} real and {len(fake_scores)} fake discriminator outputs")
    if len(real_scores) == 0:
        raise ValueError("need at least one discriminator")
    terms = [max(0.0, 1.0 + float(np.mean(f))) + max(0.0, 1.0 - float(np.mean(r)))
             for r, f in zip(real_scores, fake_scores)]
    return float(np.mean(terms))


def commitment_loss(E, q: RvqQuantizer | GrvqQuantizer, n_levels: int | None = None,
                    norm: NormKind | str = NormKind.L1) -> float:
    """Global L1 between ``E`` and its reconstruction plus the mean per-level residual error.

    For a grouped quantizer the per-level residuals of all groups are concatenated
    along the feature axis before the norm is taken.
    """
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    if E.shape[1] != q.dim:
        raise ValueError(f"dimension mismatch: E has {E.shape[1]}, quantizer has {q.dim}")
    n_levels = q.n_levels if n_levels is None else n_levels
    groups = q.groups if isinstance(q, GrvqQuantizer) else [q]
    parts = np.split(E, len(groups), axis=1)
    chains = [residual_chain(g, part, n_levels) for g, part in zip(groups, parts)]
    recon = np.concatenate([c.reconstruction for c in chains], axis=1)
    per_level = sum(
        mean_norm(np.concatenate([c.residuals[i + 1] for c in chains], axis=1), norm)
        for i in range(n_levels))
    return mean_norm(E - recon, NormKind.L1) + per_level / n_levels


def composite_generator_loss(weights: Mapping[str, float],
                             terms: Mapping[str, float]) -> tuple[float, dict[str, float]]:
    """Weighted sum of named loss terms; returns the total and the weighted breakdown.

    Terms without a weight get weight 1.0.
    """
    for name, w in weights.items():
        if w < 0:
            raise ValueError(f"weight for {name!r} is negative")
        if name not in terms:
            raise KeyError(f"weight given for unknown term {name!r}")
    breakdown = {name: float(weights.get(name, 1.0)) * float(v) for name, v in terms.items()}
    return float(sum(breakdown.values())), breakdown
