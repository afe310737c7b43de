#!/usr/bin/env python3
"""
End-to-end tests of the run_codec.py command line
"""

import contextlib
import io
import json
import tempfile
from pathlib import Path

import numpy as np
import soundfile as sf
import torch

from omnicodec.checkpoint import save_codec
from omnicodec.codec import build_codec
from omnicodec.config import preset
from omnicodec.models import PcmBuffer, TokenMatrix
from omnicodec.token_io import load_tokens, save_tokens, wav_write
from run_codec import main


CONFIG_DIR = Path(__file__).parent / "configs"
RATE = 24000


def run(*argv):
    """(exit code, stdout, stderr) of one CLI invocation"""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = main([str(a) for a in argv])
        except SystemExit as e:
            code = e.code
    return code, out.getvalue(), err.getvalue()


@contextlib.contextmanager
def workspace(config=None):
    """Temp dir holding a desk-tiny checkpoint and a short test clip"""
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        save_codec(build_codec(config or preset("desk-tiny")), root / "codec.ckpt")
        t = np.arange(int(0.1 * RATE)) / RATE
        clip = 0.4 * np.sin(2 * np.pi * 330 * t) + 0.1 * np.sin(2 * np.pi * 1250 * t)
        wav_write(root / "clip.wav", PcmBuffer(torch.from_numpy(clip.astype(np.float32)), RATE))
        yield root


def test_encode_chunked_matches_unchunked():
    with workspace() as root:
        code, _, _ = run("encode", "--ckpt", root / "codec.ckpt", "--in", root / "clip.wav",
                         "--out", root / "whole.tok")
        assert code == 0
        code, _, _ = run("encode", "--ckpt", root / "codec.ckpt", "--in", root / "clip.wav",
                         "--out", root / "chunked.tok", "--chunk-ms", 7)
        assert code == 0
        assert (root / "whole.tok").read_bytes() == (root / "chunked.tok").read_bytes()

        tokens = load_tokens(root / "whole.tok")
        assert tokens.header.frame_count == 100
        assert tokens.header.streams == 5
        assert tokens.header.has_semantic


def test_encode_fewer_acoustic_streams():
    with workspace() as root:
        code, _, _ = run("encode", "--ckpt", root / "codec.ckpt", "--in", root / "clip.wav",
                         "--out", root / "two.tok", "--n-acoustic", 2)
        assert code == 0
        assert load_tokens(root / "two.tok").header.streams == 3

        code, _, err = run("encode", "--ckpt", root / "codec.ckpt", "--in", root / "clip.wav",
                           "--out", root / "bad.tok", "--n-acoustic", 9)
        assert code == 3
        assert "n_acoustic" in err


def test_decode_length():
    with workspace() as root:
        run("encode", "--ckpt", root / "codec.ckpt", "--in", root / "clip.wav", "--out", root / "clip.tok")
        code, _, _ = run("decode", "--ckpt", root / "codec.ckpt", "--in", root / "clip.tok",
                         "--out", root / "recon.wav")
        assert code == 0
        info = sf.info(str(root / "recon.wav"))
        assert info.frames == 100 * 24
        assert info.samplerate == RATE
        assert info.subtype == "PCM_16"


def test_decode_empty_token_file():
    with workspace() as root:
        empty = TokenMatrix(np.zeros((0, 5), dtype=np.int64), has_semantic=True, codebook_size=64,
                            semantic_codebook_size=64)
        save_tokens(root / "empty.tok", empty, RATE, 24)
        code, _, _ = run("decode", "--ckpt", root / "codec.ckpt", "--in", root / "empty.tok",
                         "--out", root / "empty.wav")
        assert code == 0
        assert sf.info(str(root / "empty.wav")).frames == 0


def test_decode_rejects_foreign_tokens():
    with workspace() as root:
        foreign = TokenMatrix(np.zeros((3, 16), dtype=np.int64), has_semantic=True, codebook_size=2048,
                              semantic_codebook_size=2048)
        save_tokens(root / "foreign.tok", foreign, RATE, 1920)
        code, _, err = run("decode", "--ckpt", root / "codec.ckpt", "--in", root / "foreign.tok",
                           "--out", root / "x.wav")
        assert code == 3
        assert "hop" in err
        assert not (root / "x.wav").exists()


def test_semantic_off_codec_writes_acoustic_only():
    with workspace(preset("desk-tiny", semantic_branch=False)) as root:
        code, _, _ = run("encode", "--ckpt", root / "codec.ckpt", "--in", root / "clip.wav",
                         "--out", root / "clip.tok")
        assert code == 0
        header = load_tokens(root / "clip.tok").header
        assert not header.has_semantic
        assert header.streams == 4


def test_info_token_file():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "sixteen.tok"
        tokens = TokenMatrix(np.zeros((25, 16), dtype=np.int64), has_semantic=True, codebook_size=2048,
                             semantic_codebook_size=2048)
        save_tokens(path, tokens, RATE, 1920)
        code, out, _ = run("info", "--in", path)
    assert code == 0
    lines = out.splitlines()
    assert "tps=12.5×16" in lines
    assert "nominal_bitrate_bps=2200" in lines
    assert "frames=25" in lines
    assert "duration_seconds=2" in lines
    # 2 bytes per token
    assert "on_disk_bitrate_bps=3200" in lines


def test_info_checkpoint():
    with workspace() as root:
        code, out, _ = run("info", "--in", root / "codec.ckpt")
    assert code == 0
    assert "kind=checkpoint" in out
    assert "tps=1000×5" in out
    assert "parameter_count=" in out
    assert "config.acoustic_stages=4" in out


def test_info_unknown_file():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "notes.txt"
        path.write_text("hello")
        code, out, _ = run("info", "--in", path)
    assert code == 3
    assert out == ""


def test_missing_checkpoint_is_io_error():
    with workspace() as root:
        missing = root / "nope.ckpt"
        code, _, err = run("encode", "--ckpt", missing, "--in", root / "clip.wav", "--out", root / "x.tok")
    assert code == 2
    assert str(missing) in err


def test_usage_errors():
    code, _, _ = run("encode", "--ckpt", "codec.ckpt")
    assert code == 1
    code, _, _ = run("transmogrify")
    assert code == 1
    code, _, _ = run()
    assert code == 1

    with workspace() as root:
        code, _, err = run("encode", "--ckpt", root / "codec.ckpt", "--in", root / "clip.wav",
                           "--out", root / "x.tok", "--chunk-ms", 0)
    assert code == 1
    assert "chunk" in err


def test_eval_recon_command():
    with workspace() as root:
        summary = root / "summary.json"
        code, _, err = run("eval-recon", "--ckpt", root / "codec.ckpt", "--wavs", root, "--summary", summary)
        assert code == 0
        result = json.loads(summary.read_text())
    assert len(result["files"]) == 1
    assert result["streams"] == 5
    assert "RECONSTRUCTION REPORT" in err


def test_eval_ppl_command():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        rng = np.random.default_rng(0)
        for split in ("train", "eval"):
            for i in range(2):
                values = rng.integers(0, 64, size=(40, 5))
                tokens = TokenMatrix(values, has_semantic=True, codebook_size=64, semantic_codebook_size=64)
                save_tokens(root / split / f"{i}.tok", tokens, RATE, 24)
        out = root / "ppl.json"
        code, _, _ = run("eval-ppl", "--tokens-train", root / "train", "--tokens-eval", root / "eval",
                         "--mode", "ppl0", "--lm-steps", 1, "--out", out)
        assert code == 0
        result = json.loads(out.read_text())
        assert result["mode"] == "ppl0"
        assert result["ppl"] > 1.0

        code, _, _ = run("eval-ppl", "--tokens-train", root / "train", "--tokens-eval", root / "eval",
                         "--mode", "ppl8", "--lm-steps", 1)
        assert code == 3


def test_train_command():
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "run"
        code, _, _ = run("train", "--config", CONFIG_DIR / "desk-tiny.cfg", "--data", "synthetic",
                         "--steps", 1, "--batch-size", 1, "--out", out)
        assert code == 0
        assert (out / "final.ckpt").exists()
        assert len((out / "train.log").read_text().splitlines()) == 1

        code, _, _ = run("train", "--data", Path(tmp) / "missing", "--out", out)
        assert code == 2


def main_tests():
    tests = [v for k, v in globals().items() if k.startswith("test_") and callable(v)]
    for test in tests:
        test()
        print(f"✓ {test.__name__}")
    print(f"\n✓ {len(tests)} command line tests passed")


if __name__ == "__main__":
    main_tests()
