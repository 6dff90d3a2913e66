import json
import subprocess
import sys

import numpy as np
import pytest

from codeckit import AudioBuffer, read_wav, write_wav
from codeckit.cli import JOBS_ENV, build_parser, main, parse_args
from codeckit.codec import SpectralCodec, load_stream, save_model
from codeckit.quantizer import Codebook, RvqQuantizer
from oracles import speechlike, tone_arrays


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    for i, (x, sr) in enumerate(tone_arrays(np.linspace(150, 600, 6))):
        write_wav(AudioBuffer(x, sr), d / f"tone{i}.wav")
    return d


@pytest.fixture(scope="module")
def model(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("model") / "m.espk"
    assert main(["train", "--corpus", str(corpus_dir), "--out", str(out), "--levels", "4",
                 "--codebook-size", "16", "--epochs", "2"]) == 0
    return out


@pytest.fixture(scope="module")
def full_model(tmp_path_factory):
    # B = 1024, L = 32 at 50 Hz; random codebooks keep it cheap
    rng = np.random.default_rng(0)
    q = RvqQuantizer([Codebook(rng.standard_normal((1024, 80))) for _ in range(32)])
    path = tmp_path_factory.mktemp("full") / "p.espk"
    path.write_bytes(save_model(SpectralCodec(q, gl_iterations=2)))
    return path


def test_train_defaults_are_32_by_1024():
    args = parse_args(["train", "--corpus", "c", "--out", "m"])
    assert (args.levels, args.codebook_size, args.groups) == (32, 1024, 1)


def test_train_writes_model_and_report(capsys, corpus_dir, tmp_path):
    out = tmp_path / "m.espk"
    code, stdout, _ = run(capsys, "train", "--corpus", corpus_dir, "--out", out, "--levels", "3",
                          "--codebook-size", "8", "--epochs", "1")
    assert code == 0
    report = json.loads(stdout)
    assert report["n_levels"] == 3 and report["codebook_size"] == 8
    assert [row["n_levels"] for row in report["report"]["levels"]] == [1, 3]
    assert out.read_bytes()[:4] == b"ESPK"


def test_train_is_deterministic(capsys, corpus_dir, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "train", "--corpus", corpus_dir, "--out", tmp_path / name, "--levels", "2",
                   "--codebook-size", "8", "--epochs", "1", "--seed", "4")[0] == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_train_validation_happens_first(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--corpus", tmp_path / "does-not-exist", "--out", tmp_path / "m",
                       "--levels", "0")
    assert code == 1 and "n_levels" in err
    assert not (tmp_path / "m").exists()


def test_train_empty_corpus(capsys, tmp_path):
    (tmp_path / "empty").mkdir()
    code, _, err = run(capsys, "train", "--corpus", tmp_path / "empty", "--out", tmp_path / "m")
    assert code == 2 and "no .wav" in err


def test_missing_required_flag(capsys):
    code, _, err = run(capsys, "train", "--out", "m")
    assert code == 1 and "--corpus" in err


def test_unknown_flag_is_usage_error(capsys):
    assert run(capsys, "encode", "--frobnicate")[0] == 1


def test_encode_4000_gives_8_levels(capsys, full_model, corpus_dir, tmp_path):
    code, out, _ = run(capsys, "encode", "--model", full_model, "--in", corpus_dir / "tone0.wav",
                       "--out", tmp_path / "s.espc", "--bitrate", "4000")
    assert code == 0
    info = json.loads(out)
    assert info["n_levels"] == 8 and info["achieved_bitrate"] == 4000.0
    assert load_stream((tmp_path / "s.espc").read_bytes()).n_levels_used == 8


def test_random_bitrate_draws_from_set(capsys, full_model, corpus_dir, tmp_path):
    seen = set()
    for seed in range(12):
        code, out, _ = run(capsys, "encode", "--model", full_model, "--in", corpus_dir / "tone0.wav",
                           "--out", tmp_path / "s.espc", "--random-bitrate", "2000,4000,8000,16000",
                           "--seed", seed)
        assert code == 0
        info = json.loads(out)
        assert info["requested_bitrate"] in (2000, 4000, 8000, 16000)
        assert info["n_levels"] == info["requested_bitrate"] // 500
        seen.add(info["requested_bitrate"])
    assert len(seen) > 1


def test_bitrate_flags_are_exclusive(capsys, model, corpus_dir, tmp_path):
    code, _, _ = run(capsys, "encode", "--model", model, "--in", corpus_dir / "tone0.wav", "--out",
                     tmp_path / "s", "--bitrate", "400", "--random-bitrate", "2000,4000")
    assert code == 1
    assert run(capsys, "encode", "--model", model, "--in", corpus_dir / "tone0.wav", "--out",
               tmp_path / "s")[0] == 1


def test_encode_resamples_with_warning(capsys, model, tmp_path):
    src = tmp_path / "in48.wav"
    write_wav(AudioBuffer(0.3 * np.sin(2 * np.pi * 300 * np.arange(48000) / 48000), 48000), src)
    code, out, err = run(capsys, "encode", "--model", model, "--in", src, "--out", tmp_path / "s", "--bitrate", "400")
    assert code == 0 and "resampling" in err
    assert json.loads(out)["resampled"] is True


def test_decode_roundtrip(capsys, model, corpus_dir, tmp_path):
    stream = tmp_path / "s.espc"
    assert run(capsys, "encode", "--model", model, "--in", corpus_dir / "tone1.wav", "--out", stream,
               "--bitrate", "800")[0] == 0
    for name in ("a.wav", "b.wav"):
        code, out, _ = run(capsys, "decode", "--model", model, "--in", stream, "--out", tmp_path / name)
        assert code == 0
    s = load_stream(stream.read_bytes())
    buf = read_wav(tmp_path / "a.wav")
    assert buf.duration == s.n_frames * s.hop / s.sample_rate
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_decode_bad_magic(capsys, model, corpus_dir, tmp_path):
    stream = tmp_path / "s.espc"
    run(capsys, "encode", "--model", model, "--in", corpus_dir / "tone1.wav", "--out", stream, "--bitrate", "400")
    stream.write_bytes(b"JUNK" + stream.read_bytes()[4:])
    code, _, err = run(capsys, "decode", "--model", model, "--in", stream, "--out", tmp_path / "o.wav")
    assert code == 2 and "bad magic" in err
    assert not (tmp_path / "o.wav").exists()


def test_decode_header_mismatch(capsys, model, full_model, corpus_dir, tmp_path):
    stream = tmp_path / "s.espc"
    run(capsys, "encode", "--model", model, "--in", corpus_dir / "tone1.wav", "--out", stream, "--bitrate", "400")
    code, _, err = run(capsys, "decode", "--model", full_model, "--in", stream, "--out", tmp_path / "o.wav")
    assert code == 2 and "does not match" in err


def test_eval_identical_file(capsys, tmp_path):
    p = tmp_path / "v.wav"
    write_wav(AudioBuffer(speechlike(0, sr=16000), 16000), p, "float32")
    code, out, _ = run(capsys, "eval", "--ref", p, "--deg", p)
    assert code == 0
    line = json.loads(out)
    assert line["metrics"]["mcd"] == 0.0
    assert line["metrics"]["si_snr"] == 60.0
    assert line["metrics"]["stoi"] == pytest.approx(1.0, abs=1e-6)


def _pair_dirs(tmp_path, n=5):
    ref, deg = tmp_path / "ref", tmp_path / "deg"
    for d in (ref, deg):
        (d / "sub").mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(n):
        x = speechlike(i, sr=16000, seconds=1.0)
        rel = f"sub/f{i}.wav" if i % 2 else f"f{i}.wav"
        write_wav(AudioBuffer(x, 16000), ref / rel)
        write_wav(AudioBuffer(x + 0.05 * rng.standard_normal(len(x)), 16000), deg / rel)
    return ref, deg


def test_eval_dir_mode_selection_and_order(capsys, tmp_path):
    ref, deg = _pair_dirs(tmp_path)
    write_wav(AudioBuffer(np.zeros(100), 16000), ref / "orphan.wav")
    code, _, err = run(capsys, "eval", "--ref", ref, "--deg", deg, "--metrics", "si_snr",
                       "--out", tmp_path / "r.jsonl")
    assert code == 0 and "orphan.wav" in err
    lines = [json.loads(l) for l in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(lines) == 5
    assert all(list(l["metrics"]) == ["si_snr"] for l in lines)
    rels = [l["ref"].split("ref/")[1] for l in lines]
    assert rels == sorted(rels)


def test_eval_jobs_do_not_change_output(capsys, tmp_path):
    ref, deg = _pair_dirs(tmp_path)
    for jobs in (1, 4):
        assert run(capsys, "eval", "--ref", ref, "--deg", deg, "--metrics", "si_snr,ci_sdr,mcd",
                   "--jobs", jobs, "--out", tmp_path / f"r{jobs}.jsonl")[0] == 0
    assert (tmp_path / "r1.jsonl").read_bytes() == (tmp_path / "r4.jsonl").read_bytes()


def test_eval_all_unpaired_fails(capsys, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    write_wav(AudioBuffer(np.zeros(100), 16000), tmp_path / "a" / "x.wav")
    write_wav(AudioBuffer(np.zeros(100), 16000), tmp_path / "b" / "y.wav")
    code, _, err = run(capsys, "eval", "--ref", tmp_path / "a", "--deg", tmp_path / "b")
    assert code == 2


def test_eval_bad_metric(capsys, tmp_path):
    assert run(capsys, "eval", "--ref", tmp_path, "--deg", tmp_path, "--metrics", "visqol")[0] == 1


def test_jobs_default_from_environment(monkeypatch):
    monkeypatch.setenv(JOBS_ENV, "3")
    assert build_parser().parse_args(["eval"]).jobs == 3


def test_losses(capsys, tmp_path):
    rng = np.random.default_rng(0)
    a, b = tmp_path / "a.wav", tmp_path / "b.wav"
    write_wav(AudioBuffer(rng.uniform(-0.5, 0.5, 8000), 16000), a, "float32")
    write_wav(AudioBuffer(rng.uniform(-0.5, 0.5, 8000), 16000), b, "float32")
    code, out, _ = run(capsys, "losses", "--ref", a, "--deg", a)
    same = json.loads(out)
    assert code == 0 and same["time_domain"] == 0.0 and same["multi_scale_mel"] == 0.0
    assert same["scales"] == [32, 64, 128, 256, 512, 1024, 2048]
    vals = {}
    for norm in ("l1", "l2", "l1_plus_l2"):
        vals[norm] = json.loads(run(capsys, "losses", "--ref", a, "--deg", b, "--norm", norm)[1])
    for key in ("time_domain", "multi_scale_mel"):
        assert vals["l1_plus_l2"][key] == pytest.approx(vals["l1"][key] + vals["l2"][key], rel=1e-12)


def test_losses_length_mismatch(capsys, tmp_path):
    write_wav(AudioBuffer(np.zeros(4000), 16000), tmp_path / "a.wav")
    write_wav(AudioBuffer(np.zeros(3000), 16000), tmp_path / "b.wav")
    assert run(capsys, "losses", "--ref", tmp_path / "a.wav", "--deg", tmp_path / "b.wav")[0] == 2
    code, _, _ = run(capsys, "losses", "--ref", tmp_path / "a.wav", "--deg", tmp_path / "b.wav", "--trim")
    assert code == 0


def test_config_file_and_flag_override(capsys, tmp_path):
    rng = np.random.default_rng(1)
    a, b = tmp_path / "a.wav", tmp_path / "b.wav"
    write_wav(AudioBuffer(rng.uniform(-0.5, 0.5, 4096), 16000), a, "float32")
    write_wav(AudioBuffer(rng.uniform(-0.5, 0.5, 4096), 16000), b, "float32")
    cfg = tmp_path / "job.json"
    cfg.write_text(json.dumps({"ref": str(a), "deg": str(b), "norm": "l2", "scales": "64,256"}))
    from_file = json.loads(run(capsys, "losses", "--config", cfg)[1])
    assert from_file["norm"] == "l2" and from_file["scales"] == [64, 256]
    overridden = json.loads(run(capsys, "losses", "--config", cfg, "--norm", "l1")[1])
    assert overridden["norm"] == "l1" and overridden["scales"] == [64, 256]
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "losses", "--config", cfg)[0] == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "codeckit", "decode", "--model", str(tmp_path / "none"),
                           "--in", str(tmp_path / "none"), "--out", str(tmp_path / "o.wav")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stdout == ""
