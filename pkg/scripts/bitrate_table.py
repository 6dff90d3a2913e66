#!/usr/bin/env python3
"""Print the level count and achieved bitrate for a range of target bitrates."""

import argparse
import math

from codeckit.quantizer import levels_for_bitrate


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--codebook-size", type=int, default=1024)
    p.add_argument("--frame-rate", type=float, default=50.0)
    p.add_argument("--max-levels", type=int, default=32)
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("bitrates", nargs="*", type=float, default=[1000, 2000, 4000, 6000, 8000, 12000, 16000, 24000])
    args = p.parse_args()

    bits = math.log2(args.codebook_size) * args.frame_rate * args.groups
    print(f"{'target bps':>10}  {'levels':>6}  {'achieved bps':>12}  clamped")
    for target in args.bitrates:
        n = levels_for_bitrate(target, args.codebook_size, args.frame_rate, args.max_levels, args.groups)
        clamped = n != math.floor(target / bits + 0.5)
        print(f"{target:>10.0f}  {n:>6d}  {n * bits:>12.0f}  {'yes' if clamped else 'no'}")


if __name__ == "__main__":
    main()
