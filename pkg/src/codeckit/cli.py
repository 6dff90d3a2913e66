"""Command-line interface: ``codeckit {train,encode,decode,eval,losses}``.

Exit codes: 0 success, 1 validation/usage error, 2 data or format error.
Every command can read a JSON config file (``--config``) whose keys mirror
the flag names; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from codeckit.audio_io import AudioBuffer, WavError, _atomic_write, read_wav, resample, write_wav
from codeckit.codec import (CodecConfig, FormatError, HeaderMismatch, decode, encode, load_model,
                            load_stream, save_model, save_stream, train_codec, training_report)
from codeckit.losses import DEFAULT_WINDOWS, NormKind, ScaleSet, multi_scale_mel_loss, time_domain_loss
from codeckit.metrics import ALL_METRICS, RESAMPLE_POLICIES, EvalConfig, evaluate_pair
from codeckit.quantizer import sample_bitrate

log = logging.getLogger("codeckit")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
JOBS_ENV = "CODECKIT_JOBS"
DEFAULT_RANDOM_BITRATES = "2000,4000,8000,16000"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _name_list(text: str) -> list[str]:
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="codeckit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a spectral RVQ codec on a WAV corpus")
    t.add_argument("--config", type=Path)
    t.add_argument("--corpus", type=Path)
    t.add_argument("--out", type=Path)
    t.add_argument("--levels", type=int, default=32)
    t.add_argument("--codebook-size", type=int, default=1024)
    t.add_argument("--groups", type=int, default=1)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--sample-rate", type=int, default=16000)
    t.add_argument("--window", type=int, default=1024)
    t.add_argument("--hop", type=int, default=320)
    t.add_argument("--n-mels", type=int, default=80)
    t.add_argument("--gl-iterations", type=int, default=60)
    t.add_argument("--report-levels", type=_int_list, default=None,
                   help="level counts probed in the printed report (default: 1 and --levels)")

    e = sub.add_parser("encode", help="encode a WAV file into a code stream")
    e.add_argument("--config", type=Path)
    e.add_argument("--model", type=Path)
    e.add_argument("--in", dest="input", type=Path)
    e.add_argument("--out", type=Path)
    rate = e.add_mutually_exclusive_group()
    rate.add_argument("--bitrate", type=float)
    rate.add_argument("--random-bitrate", type=_int_list, nargs="?", const=_int_list(DEFAULT_RANDOM_BITRATES))
    e.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("decode", help="decode a code stream to WAV")
    d.add_argument("--config", type=Path)
    d.add_argument("--model", type=Path)
    d.add_argument("--in", dest="input", type=Path)
    d.add_argument("--out", type=Path)
    d.add_argument("--encoding", choices=("pcm16", "float32"), default="pcm16")

    v = sub.add_parser("eval", help="score reference/degraded pairs")
    v.add_argument("--config", type=Path)
    v.add_argument("--ref", type=Path)
    v.add_argument("--deg", type=Path)
    v.add_argument("--metrics", type=_name_list, default=list(ALL_METRICS))
    v.add_argument("--out", type=Path)
    v.add_argument("--jobs", type=int, default=_default_jobs())
    v.add_argument("--resample", choices=RESAMPLE_POLICIES, default="to-min")
    v.add_argument("--mcd-order", type=int, default=24)
    v.add_argument("--f0-min", type=float, default=70.0)
    v.add_argument("--f0-max", type=float, default=400.0)
    v.add_argument("--ci-sdr-taps", type=int, default=512)

    s = sub.add_parser("losses", help="reconstruction losses between two WAV files")
    s.add_argument("--config", type=Path)
    s.add_argument("--ref", type=Path)
    s.add_argument("--deg", type=Path)
    s.add_argument("--scales", type=_int_list, default=list(DEFAULT_WINDOWS))
    s.add_argument("--norm", choices=[k.value for k in NormKind], default="l1")
    s.add_argument("--trim", action="store_true", help="trim both signals to the shorter length")
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        dest = "input" if dest == "in" else dest
        if dest not in known or dest == "config":
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        action = next(a for a in sub._actions if a.dest == dest)
        if action.type is not None and isinstance(value, str):
            value = action.type(value)
        elif action.type is Path and value is not None:
            value = Path(value)
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + ("in" if n == "input" else n.replace("_", "-")) for n in missing)
        raise UsageError(f"missing required option(s): {flags}")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _load_wav(path: Path) -> AudioBuffer:
    try:
        return read_wav(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc))
    except WavError as exc:
        raise DataError(f"{path}: {exc}")


def _read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")


def _check_out_dir(path: Path) -> None:
    if not Path(path).parent.is_dir():
        raise UsageError(f"output directory does not exist: {Path(path).parent}")


# --- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    _require(args, "corpus", "out")
    try:
        config = CodecConfig(sample_rate=args.sample_rate, window=args.window, hop=args.hop,
                             n_mels=args.n_mels, n_levels=args.levels, codebook_size=args.codebook_size,
                             n_groups=args.groups, epochs=args.epochs, gl_iterations=args.gl_iterations)
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.sample_rate <= 0:
        raise UsageError("--sample-rate must be positive")
    _check_out_dir(args.out)
    if not args.corpus.is_dir():
        raise DataError(f"corpus directory not found: {args.corpus}")
    files = sorted(p for p in args.corpus.rglob("*.wav") if p.is_file())
    if not files:
        raise DataError(f"no .wav files under {args.corpus}")
    corpus = []
    for f in files:
        audio = _load_wav(f)
        if audio.sample_rate != config.sample_rate:
            log.warning("%s: resampling %d -> %d Hz", f, audio.sample_rate, config.sample_rate)
            audio = resample(audio, config.sample_rate)
        corpus.append(audio)
    try:
        codec = train_codec(corpus, config, seed=args.seed)
    except ValueError as exc:
        raise DataError(str(exc))
    _atomic_write(args.out, save_model(codec))
    levels = args.report_levels or (1, codec.n_levels)
    if any(not 1 <= n <= codec.n_levels for n in levels):
        raise UsageError(f"--report-levels must lie in [1, {codec.n_levels}]")
    report = training_report(codec, corpus, levels)
    _emit({"model": str(args.out), "n_files": len(files), "sample_rate": codec.sample_rate,
           "frame_rate": codec.frame_rate, "n_levels": codec.n_levels,
           "codebook_size": codec.codebook_size, "n_groups": codec.n_groups, "seed": args.seed,
           "report": report})
    return EXIT_OK


def cmd_encode(args) -> int:
    _require(args, "model", "input", "out")
    if args.bitrate is None and args.random_bitrate is None:
        raise UsageError("one of --bitrate or --random-bitrate is required")
    if args.bitrate is not None and args.bitrate <= 0:
        raise UsageError("--bitrate must be positive")
    if args.random_bitrate is not None and any(b <= 0 for b in args.random_bitrate):
        raise UsageError("--random-bitrate values must be positive")
    _check_out_dir(args.out)
    try:
        codec = load_model(_read_bytes(args.model))
    except FormatError as exc:
        raise DataError(f"{args.model}: {exc}")
    audio = _load_wav(args.input)
    resampled = audio.sample_rate != codec.sample_rate
    if resampled:
        log.warning("%s: resampling %d -> %d Hz to match the model", args.input, audio.sample_rate,
                    codec.sample_rate)
        audio = resample(audio, codec.sample_rate)
    if args.bitrate is not None:
        bitrate = args.bitrate
    else:
        bitrate = sample_bitrate(args.random_bitrate, np.random.default_rng(args.seed))
    stream = encode(codec, audio, bitrate)
    if stream.clamped:
        log.warning("requested %g bps is outside the codec's range; using %d levels", bitrate,
                    stream.n_levels_used)
    _atomic_write(args.out, save_stream(stream))
    _emit({"in": str(args.input), "out": str(args.out), "requested_bitrate": bitrate,
           "n_levels": stream.n_levels_used, "n_frames": stream.n_frames,
           "achieved_bitrate": stream.bitrate, "clamped": stream.clamped, "resampled": resampled})
    return EXIT_OK


def cmd_decode(args) -> int:
    _require(args, "model", "input", "out")
    _check_out_dir(args.out)
    try:
        codec = load_model(_read_bytes(args.model))
    except FormatError as exc:
        raise DataError(f"{args.model}: {exc}")
    try:
        stream = load_stream(_read_bytes(args.input))
        audio = decode(codec, stream)
    except (FormatError, HeaderMismatch) as exc:
        raise DataError(f"{args.input}: {exc}")
    write_wav(audio, args.out, args.encoding)
    _emit({"in": str(args.input), "out": str(args.out), "n_samples": len(audio),
           "duration": audio.duration})
    return EXIT_OK


def _pairs(ref: Path, deg: Path) -> tuple[list[tuple[Path, Path]], list[str]]:
    if ref.is_file() and deg.is_file():
        return [(ref, deg)], []
    if ref.is_dir() and deg.is_dir():
        refs = {p.relative_to(ref): p for p in ref.rglob("*.wav") if p.is_file()}
        degs = {p.relative_to(deg): p for p in deg.rglob("*.wav") if p.is_file()}
        pairs = [(refs[k], degs[k]) for k in sorted(refs) if k in degs]
        unpaired = [str(refs[k]) for k in sorted(refs) if k not in degs]
        unpaired += [str(degs[k]) for k in sorted(degs) if k not in refs]
        return pairs, unpaired
    raise DataError("--ref and --deg must both be files or both be directories, and exist")


def _eval_one(job):
    ref_path, deg_path, config = job
    try:
        ref, deg = read_wav(ref_path), read_wav(deg_path)
    except (OSError, WavError) as exc:
        return None, f"{ref_path} / {deg_path}: {exc}"
    report = evaluate_pair(ref, deg, config)
    return json.dumps(report.to_json(str(ref_path), str(deg_path))), None


def cmd_eval(args) -> int:
    _require(args, "ref", "deg")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    try:
        config = EvalConfig(tuple(args.metrics), args.mcd_order, args.f0_min, args.f0_max,
                            args.ci_sdr_taps, args.resample)
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.out is not None:
        _check_out_dir(args.out)
    pairs, unpaired = _pairs(args.ref, args.deg)
    for path in unpaired:
        log.warning("unpaired file skipped: %s", path)
    jobs = [(r, d, config) for r, d in pairs]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_eval_one, jobs))
    else:
        results = [_eval_one(j) for j in jobs]
    lines = []
    for line, err in results:
        if err:
            log.error("%s", err)
        else:
            lines.append(line)
    if not lines:
        raise DataError("no pair could be evaluated")
    text = "".join(line + "\n" for line in lines)
    if args.out is not None:
        _atomic_write(args.out, text.encode())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_losses(args) -> int:
    _require(args, "ref", "deg")
    try:
        scales = ScaleSet(tuple(args.scales))
    except ValueError as exc:
        raise UsageError(str(exc))
    ref, deg = _load_wav(args.ref), _load_wav(args.deg)
    if ref.sample_rate != deg.sample_rate:
        raise DataError(f"sample rates differ: {ref.sample_rate} vs {deg.sample_rate}")
    if args.trim:
        n = min(len(ref), len(deg))
        ref, deg = AudioBuffer(ref.samples[:n], ref.sample_rate), AudioBuffer(deg.samples[:n], deg.sample_rate)
    try:
        td = time_domain_loss(ref, deg, args.norm)
        mel = multi_scale_mel_loss(ref, deg, scales, args.norm)
    except ValueError as exc:
        raise DataError(str(exc))
    _emit({"ref": str(args.ref), "deg": str(args.deg), "norm": args.norm, "scales": list(scales.window_sizes),
           "time_domain": td, "multi_scale_mel": mel, "reconstruction": td + mel})
    return EXIT_OK


def _setup_logging(verbose: bool) -> None:
    # own handler bound to the current stderr; diagnostics never go to stdout
    for h in list(log.handlers):
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("codeckit: %(levelname)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO if verbose else logging.WARNING)
    log.propagate = False


COMMANDS = {"train": cmd_train, "encode": cmd_encode, "decode": cmd_decode, "eval": cmd_eval,
            "losses": cmd_losses}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"codeckit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"codeckit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"codeckit: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
