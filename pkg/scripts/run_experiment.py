#!/usr/bin/env python3
"""Train a small codec on synthetic harmonic tones and tabulate metrics against bitrate.

Absolute values reflect the Griffin-Lim decoder, not a neural one; the trend
over levels is what this is meant to show.
"""

import argparse
import json
import time

import numpy as np

from codeckit import AudioBuffer
from codeckit.codec import CodecConfig, decode, encode, train_codec, training_report
from codeckit.metrics import EvalConfig, evaluate_pair


def harmonic_tone(f0: float, sr: int, seconds: float, rng: np.random.Generator) -> AudioBuffer:
    t = np.arange(int(sr * seconds)) / sr
    vib = f0 * (1 + 0.02 * np.sin(2 * np.pi * 5 * t))
    phase = 2 * np.pi * np.cumsum(vib) / sr
    x = sum(np.sin(k * phase) / k for k in range(1, 6))
    x = 0.3 * x / np.max(np.abs(x)) + 1e-3 * rng.standard_normal(len(t))
    return AudioBuffer(x, sr)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--levels", type=int, default=8)
    p.add_argument("--codebook-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--train-files", type=int, default=20)
    p.add_argument("--test-files", type=int, default=5)
    p.add_argument("--seconds", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="print rows as JSON lines")
    args = p.parse_args()

    cfg = CodecConfig(n_levels=args.levels, codebook_size=args.codebook_size, epochs=args.epochs)
    rng = np.random.default_rng(args.seed)
    train = [harmonic_tone(f, cfg.sample_rate, args.seconds, rng)
             for f in rng.uniform(100, 300, args.train_files)]
    test = [harmonic_tone(f, cfg.sample_rate, args.seconds, rng)
            for f in rng.uniform(100, 300, args.test_files)]

    start = time.perf_counter()
    codec = train_codec(train, cfg, seed=args.seed)
    print(f"trained L={cfg.n_levels} B={cfg.codebook_size} in {time.perf_counter() - start:.1f} s")
    energy = training_report(codec, test, ())["residual_energy"]
    print("held-out residual energy per level: " + " ".join(f"{e:.4f}" for e in energy))

    metrics = ("mcd", "si_snr", "stoi", "f0_rmse")
    eval_cfg = EvalConfig(metrics)
    bits = codec.frame_rate * np.log2(cfg.codebook_size)
    rows = []
    for n in sorted({1, 2, cfg.n_levels // 2, cfg.n_levels} - {0}):
        scores = {m: [] for m in metrics}
        for audio in test:
            y = decode(codec, encode(codec, audio, n * bits))
            y = AudioBuffer(y.samples[:len(audio)], y.sample_rate)
            for m, v in evaluate_pair(audio, y, eval_cfg).metrics.items():
                if v is not None:
                    scores[m].append(v)
        rows.append({"levels": n, "bps": n * bits,
                     **{m: float(np.mean(v)) if v else None for m, v in scores.items()}})

    if args.json:
        for row in rows:
            print(json.dumps(row))
        return
    print(f"{'levels':>6} {'bps':>7} " + " ".join(f"{m:>8}" for m in metrics))
    for row in rows:
        cells = " ".join("     n/a" if row[m] is None else f"{row[m]:8.3f}" for m in metrics)
        print(f"{row['levels']:>6} {row['bps']:>7.0f} {cells}")


if __name__ == "__main__":
    main()
