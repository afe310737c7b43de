"""
Token files and WAV I/O

Token file layout, little-endian:

    magic          4s   b"OMNC"
    version        u16  1
    flags          u16  bit0 = stream 0 is semantic
    sample_rate    u32
    hop            u32
    streams        u16
    bits_per_code  u8
    reserved       u8
    frame_count    u32
    payload        frame-major u16 per token, 0xFFFF = inactive stage

24-byte header, so a file is 24 + 2 * frames * streams bytes.
"""

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

import numpy as np
import soundfile as sf
import torch
from scipy import signal

from .config import bits_per_code as code_bits
from .errors import (
    BadMagic,
    IoError,
    TokenOutOfRange,
    TruncatedPayload,
    UnsupportedVersion,
    UnsupportedWavEncoding,
)
from .models import INACTIVE, PcmBuffer, TokenMatrix


TOKEN_MAGIC = b"OMNC"
TOKEN_VERSION = 1
INACTIVE_ON_DISK = 0xFFFF

_HEADER = struct.Struct("<4sHHIIHBBI")
HEADER_SIZE = _HEADER.size  # 24

FLAG_SEMANTIC = 0x1


@dataclass(frozen=True)
class TokenFileHeader:
    sample_rate_hz: int
    hop: int
    streams: int
    bits_per_code: int
    frame_count: int
    has_semantic: bool
    version: int = TOKEN_VERSION

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate_hz / self.hop if self.hop else 0.0

    @property
    def duration_seconds(self) -> float:
        return self.frame_count * self.hop / self.sample_rate_hz if self.sample_rate_hz else 0.0

    @property
    def payload_bytes(self) -> int:
        return 2 * self.frame_count * self.streams


@dataclass
class TokenFile:
    header: TokenFileHeader
    tokens: TokenMatrix


# =========================================================================
# Token files
# =========================================================================

def write_tokens(tokens: TokenMatrix, sample_rate_hz: int, hop: int) -> bytes:
    """
    Serialize a token matrix

    Raises:
        TokenOutOfRange: if a value does not fit its stream or in 16 bits
    """
    tokens.check_range()
    bits = code_bits(int(tokens.limits().max(initial=tokens.codebook_size)))
    if bits > 16:
        raise TokenOutOfRange(f"codes need {bits} bits, the token file stores 16")

    header = _HEADER.pack(
        TOKEN_MAGIC,
        TOKEN_VERSION,
        FLAG_SEMANTIC if tokens.has_semantic else 0,
        sample_rate_hz,
        hop,
        tokens.streams,
        bits,
        0,
        tokens.frames,
    )
    values = np.where(tokens.values == INACTIVE, INACTIVE_ON_DISK, tokens.values)
    return header + values.astype("<u2").tobytes(order="C")


def read_header(blob: bytes) -> TokenFileHeader:
    if len(blob) < HEADER_SIZE:
        if blob[:len(TOKEN_MAGIC)] != TOKEN_MAGIC[:len(blob)]:
            raise BadMagic(f"not a token file (magic {bytes(blob[:4])!r})")
        raise TruncatedPayload(f"token file is {len(blob)} bytes, header needs {HEADER_SIZE}")

    magic, version, flags, sample_rate, hop, streams, bits, _, frames = _HEADER.unpack_from(blob)
    if magic != TOKEN_MAGIC:
        raise BadMagic(f"not a token file (magic {magic!r})")
    if version != TOKEN_VERSION:
        raise UnsupportedVersion(f"token file version {version}, this build reads {TOKEN_VERSION}")
    return TokenFileHeader(
        sample_rate_hz=sample_rate,
        hop=hop,
        streams=streams,
        bits_per_code=bits,
        frame_count=frames,
        has_semantic=bool(flags & FLAG_SEMANTIC),
        version=version,
    )


def read_tokens(blob: bytes) -> TokenFile:
    """
    Parse a token file

    Values are range-checked against 2^bits_per_code; the codec checks
    them against its real codebook sizes on decode.

    Raises:
        BadMagic, UnsupportedVersion, TruncatedPayload, TokenOutOfRange
    """
    header = read_header(blob)
    payload = blob[HEADER_SIZE:]
    if len(payload) != header.payload_bytes:
        raise TruncatedPayload(
            f"header promises {header.frame_count} frames x {header.streams} streams "
            f"({header.payload_bytes} bytes), payload has {len(payload)}"
        )

    raw = np.frombuffer(payload, dtype="<u2").astype(np.int64)
    values = np.where(raw == INACTIVE_ON_DISK, INACTIVE, raw).reshape(header.frame_count, header.streams)
    tokens = TokenMatrix(
        values=values,
        has_semantic=header.has_semantic,
        codebook_size=2 ** header.bits_per_code,
    )
    return TokenFile(header=header, tokens=tokens)


def save_tokens(path: Union[str, Path], tokens: TokenMatrix, sample_rate_hz: int, hop: int) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(write_tokens(tokens, sample_rate_hz, hop))
    except OSError as e:
        raise IoError(f"cannot write token file {path}: {e}") from e


def load_tokens(path: Union[str, Path]) -> TokenFile:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise IoError(f"cannot read token file {path}: {e}") from e
    return read_tokens(blob)


# =========================================================================
# WAV
# =========================================================================

_SUPPORTED_SUBTYPES = {"PCM_16", "FLOAT"}


def wav_read(path: Union[str, Path], expected_rate_hz: Optional[int] = None) -> PcmBuffer:
    """
    Read a 16-bit PCM or 32-bit float WAV as mono floats

    Stereo is averaged to mono. 16-bit samples are scaled by 1/32768.

    Args:
        path: WAV file
        expected_rate_hz: If given, resample to this rate

    Raises:
        IoError: unreadable file
        UnsupportedWavEncoding: any other sample format
    """
    path = Path(path)
    try:
        info = sf.info(str(path))
    except (OSError, RuntimeError) as e:
        raise IoError(f"cannot read WAV {path}: {e}") from e

    if info.format not in ("WAV", "WAVEX") or info.subtype not in _SUPPORTED_SUBTYPES:
        raise UnsupportedWavEncoding(f"{path}: {info.format}/{info.subtype} (need PCM_16 or FLOAT WAV)")

    try:
        if info.subtype == "PCM_16":
            raw, rate = sf.read(str(path), dtype="int16", always_2d=True)
            data = raw.astype(np.float64) / 32768.0
        else:
            data, rate = sf.read(str(path), dtype="float32", always_2d=True)
    except (OSError, RuntimeError) as e:
        raise IoError(f"cannot read WAV {path}: {e}") from e

    mono = data.mean(axis=1) if data.shape[1] else np.zeros(data.shape[0])
    pcm = PcmBuffer(torch.from_numpy(np.asarray(mono, dtype=np.float32)), int(rate))
    if expected_rate_hz is not None and pcm.sample_rate_hz != expected_rate_hz:
        pcm = resample_pcm(pcm, expected_rate_hz)
    return pcm


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Float samples -> int16 with round-half-away-from-zero and clipping"""
    scaled = np.asarray(samples, dtype=np.float64) * 32768.0
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, -32768, 32767).astype(np.int16)


def wav_write(path: Union[str, Path], pcm: PcmBuffer) -> None:
    """Write a mono 16-bit PCM WAV"""
    path = Path(path)
    data = quantize_pcm16(pcm.samples.detach().cpu().numpy())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        sf.write(str(path), data, pcm.sample_rate_hz, subtype="PCM_16", format="WAV")
    except (OSError, RuntimeError) as e:
        raise IoError(f"cannot write WAV {path}: {e}") from e


def resample_pcm(pcm: PcmBuffer, target_rate_hz: int) -> PcmBuffer:
    """Offline polyphase resampling (ingestion only; the model path is causal)"""
    ratio = Fraction(target_rate_hz, pcm.sample_rate_hz)
    samples = pcm.samples.numpy().astype(np.float64)
    if samples.size:
        samples = signal.resample_poly(samples, ratio.numerator, ratio.denominator)
    return PcmBuffer(torch.from_numpy(samples.astype(np.float32)), target_rate_hz)
