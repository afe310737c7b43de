#!/usr/bin/env python3
"""
Tests for the token file format and WAV I/O
"""

import struct
import tempfile
from pathlib import Path

import numpy as np
import soundfile as sf
import torch

from omnicodec.errors import BadMagic, IoError, TokenOutOfRange, TruncatedPayload, UnsupportedVersion, UnsupportedWavEncoding
from omnicodec.models import INACTIVE, PcmBuffer, TokenMatrix
from omnicodec.token_io import (
    HEADER_SIZE,
    INACTIVE_ON_DISK,
    load_tokens,
    quantize_pcm16,
    read_header,
    read_tokens,
    save_tokens,
    wav_read,
    wav_write,
    write_tokens,
)


RATE = 24000
HOP = 1920


def test_empty_token_file_is_header_only():
    tokens = TokenMatrix(np.zeros((0, 16), dtype=np.int64), has_semantic=True, codebook_size=2048,
                         semantic_codebook_size=2048)
    blob = write_tokens(tokens, RATE, HOP)
    assert HEADER_SIZE == 24
    assert len(blob) == 24

    parsed = read_tokens(blob)
    assert parsed.tokens.frames == 0
    assert parsed.header.streams == 16
    assert parsed.header.has_semantic


def test_one_frame_size_and_header_fields():
    values = np.arange(17)[None]
    tokens = TokenMatrix(values, has_semantic=True, codebook_size=2048, semantic_codebook_size=2048)
    blob = write_tokens(tokens, RATE, HOP)
    assert len(blob) == 24 + 2 * 17

    header = read_header(blob)
    assert header.sample_rate_hz == RATE
    assert header.hop == HOP
    assert header.bits_per_code == 11
    assert header.frame_count == 1
    assert header.frame_rate_hz == 12.5
    assert header.payload_bytes == 34


def test_round_trip_with_inactive_stages():
    rng = np.random.default_rng(0)
    for trial in range(100):
        frames = int(rng.integers(0, 20))
        streams = int(rng.integers(1, 33))
        values = rng.integers(0, 2048, size=(frames, streams))
        if frames and streams > 2:
            cut = int(rng.integers(2, streams))
            values[frames // 2:, cut:] = INACTIVE
        tokens = TokenMatrix(values, has_semantic=bool(trial % 2), codebook_size=2048,
                             semantic_codebook_size=2048)
        parsed = read_tokens(write_tokens(tokens, RATE, HOP)).tokens
        assert np.array_equal(parsed.values, values), trial
        assert parsed.has_semantic == tokens.has_semantic


def test_inactive_is_stored_as_ffff():
    tokens = TokenMatrix(np.array([[3, INACTIVE]]), has_semantic=False, codebook_size=8)
    blob = write_tokens(tokens, RATE, HOP)
    assert struct.unpack("<HH", blob[24:]) == (3, INACTIVE_ON_DISK)


def test_semantic_codebook_widens_bits():
    tokens = TokenMatrix(np.array([[4000, 1]]), has_semantic=True, codebook_size=2048,
                         semantic_codebook_size=4096)
    header = read_header(write_tokens(tokens, RATE, HOP))
    assert header.bits_per_code == 12


def test_bad_magic_and_version():
    tokens = TokenMatrix(np.ones((2, 3), dtype=np.int64), has_semantic=False, codebook_size=4)
    blob = write_tokens(tokens, RATE, HOP)

    try:
        read_tokens(b"X" + blob[1:])
    except BadMagic:
        pass
    else:
        raise AssertionError("flipped magic should raise")

    try:
        read_tokens(blob[:4] + struct.pack("<H", 7) + blob[6:])
    except UnsupportedVersion:
        pass
    else:
        raise AssertionError("unknown version should raise")

    try:
        read_tokens(b"RIFF....")
    except BadMagic:
        pass
    else:
        raise AssertionError("short foreign file should raise BadMagic")


def test_truncated_and_padded_payloads():
    tokens = TokenMatrix(np.ones((2, 3), dtype=np.int64), has_semantic=False, codebook_size=4)
    blob = write_tokens(tokens, RATE, HOP)
    for broken in (blob[:-2], blob + b"\x00\x00", blob[:10]):
        try:
            read_tokens(broken)
        except TruncatedPayload:
            pass
        else:
            raise AssertionError(f"{len(broken)}-byte file should raise")


def test_out_of_range_tokens():
    try:
        TokenMatrix(np.array([[8]]), has_semantic=False, codebook_size=8)
    except TokenOutOfRange:
        pass
    else:
        raise AssertionError("code 8 in a size-8 codebook should raise")

    try:
        write_tokens(TokenMatrix(np.array([[0]]), has_semantic=False, codebook_size=1 << 17), RATE, HOP)
    except TokenOutOfRange:
        pass
    else:
        raise AssertionError("17-bit codebook should not fit the file")

    # 2 bits on disk: the value 5 cannot be valid
    blob = bytearray(write_tokens(TokenMatrix(np.array([[1]]), has_semantic=False, codebook_size=4), RATE, HOP))
    blob[24:26] = struct.pack("<H", 5)
    try:
        read_tokens(bytes(blob))
    except TokenOutOfRange:
        pass
    else:
        raise AssertionError("value past 2^bits should raise")


def test_token_file_paths():
    tokens = TokenMatrix(np.zeros((3, 2), dtype=np.int64), has_semantic=False, codebook_size=4)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "sub" / "clip.tok"
        save_tokens(path, tokens, RATE, HOP)
        assert path.stat().st_size == 24 + 2 * 6
        assert load_tokens(path).tokens.frames == 3
        try:
            load_tokens(Path(tmp) / "missing.tok")
        except IoError:
            pass
        else:
            raise AssertionError("missing file should raise")


# =========================================================================
# WAV
# =========================================================================

def test_wav_ramp_round_trip():
    ramp = np.linspace(-1.0, 1.0, 4001)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ramp.wav"
        wav_write(path, PcmBuffer(torch.from_numpy(ramp.astype(np.float32)), RATE))
        back = wav_read(path)
    assert back.sample_rate_hz == RATE
    assert len(back) == len(ramp)
    assert np.abs(back.samples.numpy().astype(np.float64) - ramp).max() <= 1.0 / 32768 + 1e-9


def test_quantize_pcm16_rounding():
    values = np.array([0.5 / 32768, -0.5 / 32768, 1.5 / 32768, 2.0, -2.0, 0.0])
    assert quantize_pcm16(values).tolist() == [1, -1, 2, 32767, -32768, 0]


def test_wav_empty_buffer():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "empty.wav"
        wav_write(path, PcmBuffer.empty(RATE))
        back = wav_read(path)
    assert len(back) == 0
    assert back.sample_rate_hz == RATE


def test_wav_stereo_is_averaged():
    left = np.full(100, 0.5)
    right = np.full(100, -0.25)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "stereo.wav"
        sf.write(str(path), np.stack([left, right], axis=1), RATE, subtype="FLOAT")
        back = wav_read(path)
    assert np.allclose(back.samples.numpy(), 0.125)


def test_wav_resamples_to_expected_rate():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "tone16k.wav"
        t = np.arange(16000) / 16000
        sf.write(str(path), 0.5 * np.sin(2 * np.pi * 440 * t), 16000, subtype="FLOAT")
        back = wav_read(path, expected_rate_hz=RATE)
    assert back.sample_rate_hz == RATE
    assert len(back) == RATE


def test_wav_rejects_24_bit():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "deep.wav"
        sf.write(str(path), np.zeros(10), RATE, subtype="PCM_24")
        try:
            wav_read(path)
        except UnsupportedWavEncoding:
            pass
        else:
            raise AssertionError("24-bit PCM should raise")


def test_wav_unreadable():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "junk.wav"
        path.write_bytes(b"not audio at all")
        for target in (path, Path(tmp) / "missing.wav"):
            try:
                wav_read(target)
            except IoError:
                pass
            else:
                raise AssertionError(f"{target.name} should raise")


def main():
    tests = [v for k, v in globals().items() if k.startswith("test_") and callable(v)]
    for test in tests:
        test()
        print(f"✓ {test.__name__}")
    print(f"\n✓ {len(tests)} token and WAV I/O tests passed")


if __name__ == "__main__":
    main()
