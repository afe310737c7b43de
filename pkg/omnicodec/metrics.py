"""
Objective reconstruction metrics and codebook utilization.
"""

import math
from functools import lru_cache
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.fft import dct
from torch import Tensor

from .errors import SampleRateMismatch, TokenOutOfRange
from .losses import LOG_EPS, mel_filterbank, mel_spectrogram
from .models import INACTIVE, PcmBuffer, TokenMatrix
from .reports import UtilizationReport


METRIC_WINDOW = 1024
METRIC_HOP = 256
METRIC_MELS = 80
MCD_COEFFICIENTS = 13

# 10 / ln(10) * sqrt(2)
MCD_SCALE = 10.0 / math.log(10.0) * math.sqrt(2.0)


@lru_cache(maxsize=8)
def _analysis(sample_rate_hz: int) -> Tuple[Tensor, Tensor]:
    window = torch.hann_window(METRIC_WINDOW, periodic=True, dtype=torch.float64)
    fbank = mel_filterbank(METRIC_WINDOW, METRIC_MELS, sample_rate_hz, dtype=torch.float64)
    return window, fbank


def _aligned(x: PcmBuffer, y: PcmBuffer) -> Tuple[Tensor, Tensor]:
    if x.sample_rate_hz != y.sample_rate_hz:
        raise SampleRateMismatch(f"{x.sample_rate_hz} Hz vs {y.sample_rate_hz} Hz")
    n = min(len(x), len(y))
    return x.samples[:n].to(torch.float64), y.samples[:n].to(torch.float64)


def log_mel(samples: Tensor, sample_rate_hz: int) -> Tensor:
    """[T] -> [frames, 80] natural-log mel spectrogram (window 1024, hop 256)"""
    window, fbank = _analysis(sample_rate_hz)
    return torch.log(mel_spectrogram(samples.to(torch.float64), window, METRIC_HOP, fbank) + LOG_EPS)


def mel_distance(x: PcmBuffer, y: PcmBuffer) -> float:
    """Mean L1 distance between log-mel spectrograms; lengths truncated to the shorter"""
    a, b = _aligned(x, y)
    return float((log_mel(a, x.sample_rate_hz) - log_mel(b, y.sample_rate_hz)).abs().mean())


def mel_cepstra(samples: Tensor, sample_rate_hz: int) -> np.ndarray:
    """Orthonormal DCT-II of the log-mel spectrogram, [frames, 80]"""
    return dct(log_mel(samples, sample_rate_hz).numpy(), type=2, norm="ortho", axis=-1)


def mcd_from_cepstra(c: np.ndarray, c_ref: np.ndarray) -> float:
    """
    Frame-aligned mel-cepstral distance in dB

    Uses coefficients 1..13 (c0 excluded), averaged over frames.
    """
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    c_ref = np.atleast_2d(np.asarray(c_ref, dtype=np.float64))
    frames = min(c.shape[0], c_ref.shape[0])
    if frames == 0:
        return 0.0
    diff = c[:frames, 1:MCD_COEFFICIENTS + 1] - c_ref[:frames, 1:MCD_COEFFICIENTS + 1]
    return float(np.mean(MCD_SCALE * np.sqrt((diff ** 2).sum(axis=1))))


def mcd(x: PcmBuffer, y: PcmBuffer) -> float:
    """Mel-cepstral distance between two buffers, no time warping"""
    a, b = _aligned(x, y)
    return mcd_from_cepstra(mel_cepstra(a, x.sample_rate_hz), mel_cepstra(b, y.sample_rate_hz))


def codebook_utilization(tokens: Union[TokenMatrix, Iterable[TokenMatrix]],
                         codebook_size: Union[int, Sequence[int], None] = None) -> UtilizationReport:
    """
    Distinct codes used per stream over one matrix or a corpus

    Args:
        tokens: One TokenMatrix or several with the same stream layout
        codebook_size: K for every stream, one K per stream, or None to
            take each stream's limit from the tokens

    Raises:
        TokenOutOfRange: if any code is >= K
    """
    matrices: List[TokenMatrix] = [tokens] if isinstance(tokens, TokenMatrix) else list(tokens)
    if not matrices:
        return UtilizationReport(codebook_size=[], used_codes=[], utilization=[])

    streams = matrices[0].streams
    if codebook_size is None:
        sizes = [int(k) for k in matrices[0].limits()]
    elif isinstance(codebook_size, int):
        sizes = [codebook_size] * streams
    else:
        sizes = [int(k) for k in codebook_size]

    values = np.concatenate([m.values for m in matrices], axis=0) if matrices else np.zeros((0, streams))
    used = []
    for s, k in enumerate(sizes):
        column = values[:, s]
        column = column[column != INACTIVE]
        if column.size and (column.min() < 0 or column.max() >= k):
            raise TokenOutOfRange(f"stream {s} holds code {int(column.max())}, codebook size {k}")
        used.append(int(np.unique(column).size))

    return UtilizationReport(
        codebook_size=sizes,
        used_codes=used,
        utilization=[u / k for u, k in zip(used, sizes)],
    )
