"""Vector, residual and group-residual quantization with EMA codebook learning.

Nearest-code search is exact: distances are first screened with the fast
``|x|^2 - 2 x.c + |c|^2`` expansion, then every code within rounding distance
of the screened minimum is re-scored with explicit squared differences and the
lowest index among the exact minima wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DECAY = 0.99
DEFAULT_EPSILON = 1e-5
DEAD_CODE_THRESHOLD = 1.0
KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-4

_CHUNK_ELEMENTS = 1 << 22


@dataclass(eq=False)
class Codebook:
    codes: np.ndarray  # (B, D)

    def __post_init__(self):
        self.codes = np.array(self.codes, dtype=np.float64)
        if self.codes.ndim != 2 or min(self.codes.shape) < 1:
            raise ValueError(f"codebook must be a non-empty B x D matrix, got shape {self.codes.shape}")
        if not np.all(np.isfinite(self.codes)):
            raise ValueError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]


@dataclass(eq=False)
class EmaState:
    cluster_size: np.ndarray  # (B,)
    embed_sum: np.ndarray  # (B, D)
    decay: float = DEFAULT_DECAY
    epsilon: float = DEFAULT_EPSILON

    def smoothed_size(self) -> np.ndarray:
        """Laplace-smoothed cluster sizes; they keep the same total mass."""
        n = self.cluster_size.sum()
        k = self.cluster_size.shape[0]
        return (self.cluster_size + self.epsilon) / (n + k * self.epsilon) * n

    @classmethod
    def from_assignments(cls, codebook: Codebook, counts: np.ndarray, **kw) -> "EmaState":
        counts = np.asarray(counts, dtype=np.float64)
        return cls(counts.copy(), codebook.codes * counts[:, None], **kw)


@dataclass(eq=False)
class RvqQuantizer:
    levels: list[Codebook]
    states: list[EmaState | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.levels:
            raise ValueError("an RVQ needs at least one level")
        dims = {cb.dim for cb in self.levels}
        if len(dims) != 1:
            raise ValueError(f"all levels must share one dimension, got {sorted(dims)}")
        if len({cb.size for cb in self.levels}) != 1:
            raise ValueError("all levels must have the same number of codes")
        if not self.states:
            self.states = [None] * len(self.levels)

    @property
    def dim(self) -> int:
        return self.levels[0].dim

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        return self.levels[0].size


@dataclass(eq=False)
class GrvqQuantizer:
    groups: list[RvqQuantizer]

    def __post_init__(self):
        if not self.groups:
            raise ValueError("a GRVQ needs at least one group")
        if len({g.n_levels for g in self.groups}) != 1:
            raise ValueError("every group must have the same number of levels")
        if len({g.dim for g in self.groups}) != 1:
            raise ValueError("every group must have the same dimension")

    @property
    def dim(self) -> int:
        return sum(g.dim for g in self.groups)

    @property
    def n_levels(self) -> int:
        return self.groups[0].n_levels

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def codebook_size(self) -> int:
        return self.groups[0].codebook_size


@dataclass(eq=False)
class CodeSequence:
    """Code indices, ``(T, n_levels)`` for RVQ or ``(T, G, n_levels)`` for GRVQ."""

    codes: np.ndarray
    codebook_size: int
    frame_rate: float = 0.0

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim not in (2, 3):
            raise ValueError(f"codes must be 2-D or 3-D, got shape {self.codes.shape}")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.codebook_size):
            raise ValueError(f"code index out of range [0, {self.codebook_size})")

    @property
    def n_frames(self) -> int:
        return self.codes.shape[0]

    @property
    def n_levels_used(self) -> int:
        return self.codes.shape[-1]

    @property
    def n_groups(self) -> int:
        return 1 if self.codes.ndim == 2 else self.codes.shape[1]

    def __eq__(self, other):
        if not isinstance(other, CodeSequence):
            return NotImplemented
        return (self.codebook_size == other.codebook_size and self.frame_rate == other.frame_rate
                and np.array_equal(self.codes, other.codes))


# --- nearest neighbour ------------------------------------------------------

def nearest(codes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Index of the nearest code (squared Euclidean) for each row of ``x``; ties -> lowest index."""
    codes = np.asarray(codes, dtype=np.float64)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != codes.shape[1]:
        raise ValueError(f"dimension mismatch: vectors have {x.shape[1]}, codes have {codes.shape[1]}")
    c2 = np.einsum("ij,ij->i", codes, codes)
    out = np.empty(x.shape[0], dtype=np.int64)
    step = max(1, _CHUNK_ELEMENTS // max(1, codes.shape[0]))
    for lo in range(0, x.shape[0], step):
        xs = x[lo:lo + step]
        x2 = np.einsum("ij,ij->i", xs, xs)
        approx = x2[:, None] - 2.0 * xs @ codes.T + c2[None, :]
        slack = 1e-9 * (x2 + c2.max()) + 1e-300
        close = approx <= (approx.min(axis=1) + slack)[:, None]
        out[lo:lo + len(xs)] = np.argmax(close, axis=1)
        for r in np.flatnonzero(close.sum(axis=1) > 1):
            cand = np.flatnonzero(close[r])
            exact = ((codes[cand] - xs[r]) ** 2).sum(axis=1)
            out[lo + r] = cand[np.flatnonzero(exact == exact.min())[0]]
    return out


def vq_encode(codebook: Codebook, vector) -> int:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (codebook.dim,):
        raise ValueError(f"expected a {codebook.dim}-dim vector, got shape {vector.shape}")
    return int(nearest(codebook.codes, vector[None, :])[0])


def vq_decode(codebook: Codebook, index: int) -> np.ndarray:
    if not 0 <= index < codebook.size:
        raise IndexError(f"code index {index} out of range [0, {codebook.size})")
    return codebook.codes[index].copy()


# --- residual chains --------------------------------------------------------

@dataclass
class ResidualChain:
    codes: np.ndarray  # (T, n_levels)
    quantized: list[np.ndarray]  # VQ_i(Q_{i-1}) per level
    residuals: list[np.ndarray]  # Q_0 .. Q_n

    @property
    def reconstruction(self) -> np.ndarray:
        out = np.zeros_like(self.residuals[0])
        for chosen in self.quantized:
            out = out + chosen
        return out


def residual_chain(q: RvqQuantizer, frames: np.ndarray, n_levels: int) -> ResidualChain:
    """Run the greedy residual chain ``Q_i = Q_{i-1} - VQ_i(Q_{i-1})`` for ``n_levels`` levels."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] != q.dim:
        raise ValueError(f"dimension mismatch: frames have {frames.shape[1]}, quantizer has {q.dim}")
    if not 1 <= n_levels <= q.n_levels:
        raise ValueError(f"n_levels must be in [1, {q.n_levels}], got {n_levels}")
    residual = frames.copy()
    residuals, quantized, codes = [residual], [], []
    for cb in q.levels[:n_levels]:
        idx = nearest(cb.codes, residual)
        chosen = cb.codes[idx]
        residual = residual - chosen
        codes.append(idx)
        quantized.append(chosen)
        residuals.append(residual)
    return ResidualChain(np.stack(codes, axis=1), quantized, residuals)


def _sum_levels(q: RvqQuantizer, codes: np.ndarray) -> np.ndarray:
    out = np.zeros((codes.shape[0], q.dim))
    for level, cb in enumerate(q.levels[:codes.shape[1]]):
        out = out + cb.codes[codes[:, level]]
    return out


def rvq_encode(q: RvqQuantizer, frames, n_levels: int | None = None,
               frame_rate: float = 0.0) -> tuple[CodeSequence, np.ndarray]:
    n_levels = q.n_levels if n_levels is None else n_levels
    chain = residual_chain(q, frames, n_levels)
    return CodeSequence(chain.codes, q.codebook_size, frame_rate), chain.reconstruction


def rvq_decode(q: RvqQuantizer, codes: CodeSequence) -> np.ndarray:
    c = codes.codes
    if c.ndim != 2:
        raise ValueError("RVQ decode expects (T, n_levels) codes")
    if not 1 <= c.shape[1] <= q.n_levels:
        raise ValueError(f"n_levels_used must be in [1, {q.n_levels}], got {c.shape[1]}")
    if c.size and (c.min() < 0 or c.max() >= q.codebook_size):
        raise IndexError("code index out of range")
    return _sum_levels(q, c)


def _split_groups(q: GrvqQuantizer, frames) -> list[np.ndarray]:
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] != q.dim:
        raise ValueError(f"dimension mismatch: frames have {frames.shape[1]}, quantizer has {q.dim}")
    return np.split(frames, q.n_groups, axis=1)


def grvq_encode(q: GrvqQuantizer, frames, n_levels: int | None = None,
                frame_rate: float = 0.0) -> tuple[CodeSequence, np.ndarray]:
    """Quantize each contiguous ``D/G`` slice with its own RVQ."""
    parts = [rvq_encode(g, part, n_levels, frame_rate) for g, part in zip(q.groups, _split_groups(q, frames))]
    codes = np.stack([p[0].codes for p in parts], axis=1)
    recon = np.concatenate([p[1] for p in parts], axis=1)
    return CodeSequence(codes, q.codebook_size, frame_rate), recon


def grvq_decode(q: GrvqQuantizer, codes: CodeSequence) -> np.ndarray:
    c = codes.codes
    if c.ndim != 3 or c.shape[1] != q.n_groups:
        raise ValueError(f"GRVQ decode expects (T, {q.n_groups}, n_levels) codes")
    return np.concatenate(
        [rvq_decode(g, CodeSequence(c[:, i], codes.codebook_size)) for i, g in enumerate(q.groups)], axis=1)


# --- learning ---------------------------------------------------------------

def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    x2 = np.einsum("ij,ij->i", x, x)

    def dist2(i):
        return np.maximum(x2 - 2.0 * (x @ x[i]) + x2[i], 0.0)

    chosen = [int(rng.integers(n))]
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    d2 = dist2(chosen[0])
    d2[taken] = 0.0
    for _ in range(1, k):
        cum = np.cumsum(d2)
        if cum[-1] > 0:
            i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            i = min(i, n - 1)
        else:
            # every remaining point duplicates a chosen center
            i = int(rng.choice(np.flatnonzero(~taken)))
        chosen.append(i)
        taken[i] = True
        d2 = np.minimum(d2, dist2(i))
        d2[taken] = 0.0
    return x[chosen].copy()


def kmeans_init(frames, n_codes: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER,
                tol: float = KMEANS_TOL) -> Codebook:
    """k-means++ seeding followed by Lloyd iterations."""
    x = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if x.shape[0] < n_codes:
        raise ValueError(f"need at least {n_codes} frames, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, n_codes, rng)
    prev = None
    for _ in range(max_iter):
        assign = nearest(centers, x)
        inertia = ((x - centers[assign]) ** 2).sum()
        counts = np.bincount(assign, minlength=n_codes)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        live = counts > 0
        centers[live] = sums[live] / counts[live, None]
        if prev is not None and (prev - inertia) <= tol * max(prev, 1e-300):
            break
        prev = inertia
    return Codebook(centers)


def ema_update(codebook: Codebook, state: EmaState, batch, assignments) -> None:
    """One EMA step; codes become smoothed ``embed_sum / cluster_size`` ratios."""
    batch = np.asarray(batch, dtype=np.float64).reshape(-1, codebook.dim)
    assignments = np.asarray(assignments, dtype=np.int64).reshape(-1)
    if assignments.shape[0] != batch.shape[0]:
        raise ValueError("one assignment per batch vector required")
    if assignments.size and (assignments.min() < 0 or assignments.max() >= codebook.size):
        raise IndexError("assignment out of range")
    g = state.decay
    counts = np.bincount(assignments, minlength=codebook.size).astype(np.float64)
    sums = np.zeros_like(state.embed_sum)
    np.add.at(sums, assignments, batch)
    state.cluster_size = g * state.cluster_size + (1.0 - g) * counts
    state.embed_sum = g * state.embed_sum + (1.0 - g) * sums
    _sync_codes(codebook, state)


def _sync_codes(codebook: Codebook, state: EmaState) -> None:
    size = state.smoothed_size()
    live = size > 0
    codebook.codes[live] = state.embed_sum[live] / size[live, None]


def _reseed_dead(codebook: Codebook, state: EmaState, data: np.ndarray,
                 rng: np.random.Generator, threshold: float) -> int:
    dead = np.flatnonzero(state.cluster_size < threshold)
    if dead.size == 0:
        return 0
    picks = data[rng.integers(data.shape[0], size=dead.size)]
    state.cluster_size[dead] = threshold
    state.embed_sum[dead] = picks * threshold
    _sync_codes(codebook, state)
    return int(dead.size)


def train_level(data: np.ndarray, n_codes: int, epochs: int, rng: np.random.Generator,
                decay: float = DEFAULT_DECAY, epsilon: float = DEFAULT_EPSILON,
                dead_threshold: float = DEAD_CODE_THRESHOLD) -> tuple[Codebook, EmaState]:
    cb = kmeans_init(data, n_codes, seed=int(rng.integers(2**63)))
    counts = np.bincount(nearest(cb.codes, data), minlength=n_codes)
    state = EmaState.from_assignments(cb, counts, decay=decay, epsilon=epsilon)
    _reseed_dead(cb, state, data, rng, dead_threshold)
    for _ in range(epochs):
        ema_update(cb, state, data, nearest(cb.codes, data))
        _reseed_dead(cb, state, data, rng, dead_threshold)
    return cb, state


def train_rvq(frames, n_levels: int, n_codes: int, epochs: int = 10, seed: int = 0,
              decay: float = DEFAULT_DECAY, epsilon: float = DEFAULT_EPSILON,
              dead_threshold: float = DEAD_CODE_THRESHOLD) -> RvqQuantizer:
    """Train an RVQ level by level on the running residuals.

    Each level is k-means initialized on the current residuals, refined with
    ``epochs`` full-batch EMA passes, then frozen before the next level starts.
    """
    x = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    if x.shape[0] < n_codes:
        raise ValueError(f"need at least {n_codes} frames to train {n_codes} codes, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    levels, states = [], []
    for _ in range(n_levels):
        cb, state = train_level(residual, n_codes, epochs, rng, decay, epsilon, dead_threshold)
        levels.append(cb)
        states.append(state)
        residual = residual - cb.codes[nearest(cb.codes, residual)]
    return RvqQuantizer(levels, states)


def train_grvq(frames, n_groups: int, n_levels: int, n_codes: int, epochs: int = 10,
               seed: int = 0, **kw) -> GrvqQuantizer:
    x = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if n_groups < 1 or x.shape[1] % n_groups:
        raise ValueError(f"dimension {x.shape[1]} is not divisible into {n_groups} groups")
    seeds = np.random.SeedSequence(seed).generate_state(n_groups)
    return GrvqQuantizer([train_rvq(part, n_levels, n_codes, epochs, int(s), **kw)
                          for part, s in zip(np.split(x, n_groups, axis=1), seeds)])


# --- bitrate control --------------------------------------------------------

def levels_for_bitrate(target: float, codebook_size: int, frame_rate: float,
                       max_levels: int = 32, n_groups: int = 1) -> int:
    """Levels whose payload ``frame_rate * levels * groups * log2(B)`` best matches ``target``."""
    if target <= 0:
        raise ValueError("target bitrate must be positive")
    bits_per_level = math.log2(codebook_size) * frame_rate * n_groups
    levels = int(math.floor(target / bits_per_level + 0.5))
    return min(max(levels, 1), max_levels)


def sample_bitrate(choices, rng: np.random.Generator) -> int:
    choices = sorted(choices)
    if not choices:
        raise ValueError("no bitrates to choose from")
    return choices[int(rng.integers(len(choices)))]
