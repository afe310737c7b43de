"""
Training data

Synthetic audio families, a WAV directory source and a single-clip source,
all served through a step-indexed sampler so that the batch drawn at step k
is a pure function of (seed, k). Resuming at step k therefore sees the
same data an uninterrupted run would.
"""

from pathlib import Path
from typing import Iterator, List, Literal, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from scipy import signal
from torch.utils.data import DataLoader, Dataset, Sampler

from .errors import IoError
from .models import PcmBuffer


Family = Literal["sweep", "harmonic", "noise", "chirp"]
ALL_FAMILIES: Tuple[str, ...] = ("sweep", "harmonic", "noise", "chirp")

PEAK = 0.95


class SyntheticSpec(BaseModel):
    """Which generator families a synthetic corpus mixes"""

    model_config = ConfigDict(frozen=True)

    families: List[Family] = Field(default_factory=lambda: list(ALL_FAMILIES))
    max_components: int = Field(default=2, ge=1)
    f0_range_hz: Tuple[float, float] = (100.0, 400.0)


# =========================================================================
# Generators
# =========================================================================

def _sweep(rng: np.random.Generator, t: np.ndarray, sr: int) -> np.ndarray:
    f_start = rng.uniform(80.0, 2000.0)
    f_end = rng.uniform(80.0, min(8000.0, 0.45 * sr))
    return signal.chirp(t, f0=f_start, t1=t[-1] if len(t) > 1 else 1.0, f1=f_end,
                        method="logarithmic", phi=rng.uniform(0, 360))


def _harmonic(rng: np.random.Generator, t: np.ndarray, sr: int,
              f0_range: Tuple[float, float] = (100.0, 400.0)) -> np.ndarray:
    f0 = rng.uniform(*f0_range)
    n_harmonics = max(1, min(20, int(0.45 * sr / f0)))
    out = np.zeros_like(t)
    for k in range(1, n_harmonics + 1):
        out += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k
    return out


def _noise(rng: np.random.Generator, t: np.ndarray, sr: int) -> np.ndarray:
    nyquist = sr / 2
    low = rng.uniform(100.0, 0.3 * nyquist)
    high = min(low * rng.uniform(1.5, 4.0), 0.95 * nyquist)
    sos = signal.butter(4, [low, high], btype="bandpass", fs=sr, output="sos")
    burst = signal.sosfilt(sos, rng.standard_normal(len(t)))

    # One burst with a raised-cosine envelope
    length = max(1, int(len(t) * rng.uniform(0.2, 0.8)))
    start = int(rng.integers(0, max(1, len(t) - length + 1)))
    envelope = np.zeros_like(t)
    envelope[start:start + length] = signal.windows.hann(length, sym=False) if length > 1 else 1.0
    return burst * envelope


def _chirp(rng: np.random.Generator, t: np.ndarray, sr: int) -> np.ndarray:
    carrier = signal.chirp(t, f0=rng.uniform(200.0, 1000.0), t1=t[-1] if len(t) > 1 else 1.0,
                           f1=rng.uniform(1000.0, min(6000.0, 0.45 * sr)), method="linear")
    modulation = 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(2.0, 12.0) * t))
    return carrier * modulation


def synthesize(spec: SyntheticSpec, seed: int, seconds: float, sample_rate_hz: int) -> np.ndarray:
    """
    One synthetic example

    A mixture of 1..max_components generators drawn from spec.families,
    normalized to a random peak no higher than 0.95.

    Args:
        spec: Families to draw from
        seed: Per-example seed
        seconds: Duration
        sample_rate_hz: Output rate

    Returns:
        float32 samples
    """
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate_hz))
    if n == 0:
        return np.zeros(0, dtype=np.float32)
    t = np.arange(n) / sample_rate_hz

    out = np.zeros(n)
    for _ in range(int(rng.integers(1, spec.max_components + 1))):
        family = spec.families[int(rng.integers(0, len(spec.families)))]
        if family == "sweep":
            out += _sweep(rng, t, sample_rate_hz)
        elif family == "harmonic":
            out += _harmonic(rng, t, sample_rate_hz, spec.f0_range_hz)
        elif family == "noise":
            out += _noise(rng, t, sample_rate_hz)
        else:
            out += _chirp(rng, t, sample_rate_hz)

    peak = np.abs(out).max()
    if peak > 0:
        out *= rng.uniform(0.3, PEAK) / peak
    return out.astype(np.float32)


def harmonic_clip(seconds: float, sample_rate_hz: int, f0_hz: float = 220.0,
                  harmonics: int = 8) -> PcmBuffer:
    """Deterministic harmonic stack used as the single-clip overfit target"""
    t = np.arange(int(round(seconds * sample_rate_hz))) / sample_rate_hz
    out = sum(np.sin(2 * np.pi * k * f0_hz * t) / k for k in range(1, harmonics + 1))
    out = np.asarray(out, dtype=np.float64)
    if out.size:
        out *= 0.8 / np.abs(out).max()
    return PcmBuffer(torch.from_numpy(out.astype(np.float32)), sample_rate_hz)


# =========================================================================
# Datasets
# =========================================================================

def fit_segment(samples: np.ndarray, segment_samples: int) -> np.ndarray:
    """Truncate (never split) or zero-pad to exactly segment_samples"""
    out = np.zeros(segment_samples, dtype=np.float32)
    n = min(len(samples), segment_samples)
    out[:n] = samples[:n]
    return out


class SyntheticDataset(Dataset):
    """Endless synthetic corpus; example i is seeded with seed + i"""

    def __init__(self, spec: SyntheticSpec, segment_seconds: float, sample_rate_hz: int, seed: int = 0):
        self.spec = spec
        self.segment_seconds = segment_seconds
        self.sample_rate_hz = sample_rate_hz
        self.seed = seed

    def __len__(self) -> int:
        return 2 ** 31 - 1

    def __getitem__(self, index: int) -> torch.Tensor:
        samples = synthesize(self.spec, self.seed + index, self.segment_seconds, self.sample_rate_hz)
        return torch.from_numpy(samples)


class WavDirDataset(Dataset):
    """Every *.wav file under a directory, one segment per file"""

    def __init__(self, directory, segment_seconds: float, sample_rate_hz: int):
        from .token_io import wav_read

        self.directory = Path(directory)
        self.files = sorted(self.directory.rglob("*.wav"))
        if not self.files:
            raise IoError(f"no .wav files under {self.directory}")
        self.segment_samples = int(round(segment_seconds * sample_rate_hz))
        self.sample_rate_hz = sample_rate_hz
        self._read = wav_read

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, index: int) -> torch.Tensor:
        pcm = self._read(self.files[index], expected_rate_hz=self.sample_rate_hz)
        return torch.from_numpy(fit_segment(pcm.samples.numpy(), self.segment_samples))


class SingleClipDataset(Dataset):
    """The same clip at every index"""

    def __init__(self, clip: PcmBuffer):
        self.clip = clip.samples.to(torch.float32)

    def __len__(self) -> int:
        return 1

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.clip


# =========================================================================
# Sampling
# =========================================================================

class StepBatchSampler(Sampler):
    """
    Batches of dataset indices keyed by optimizer step

    Finite datasets are walked in a seeded permutation per epoch; the
    infinite synthetic corpus is walked in order.
    """

    def __init__(self, dataset_size: int, batch_size: int, start_step: int = 0,
                 steps: Optional[int] = None, seed: int = 0):
        self.dataset_size = dataset_size
        self.batch_size = batch_size
        self.start_step = start_step
        self.steps = steps
        self.seed = seed

    def batch_indices(self, step: int) -> List[int]:
        first = step * self.batch_size
        positions = range(first, first + self.batch_size)
        if self.dataset_size >= 2 ** 31 - 1:
            return list(positions)
        out = []
        for pos in positions:
            epoch, offset = divmod(pos, self.dataset_size)
            order = np.random.default_rng([self.seed, epoch]).permutation(self.dataset_size)
            out.append(int(order[offset]))
        return out

    def __iter__(self) -> Iterator[List[int]]:
        step = self.start_step
        while self.steps is None or step < self.start_step + self.steps:
            yield self.batch_indices(step)
            step += 1

    def __len__(self) -> int:
        if self.steps is None:
            raise TypeError("unbounded sampler has no length")
        return self.steps


def make_loader(dataset: Dataset, batch_size: int, start_step: int = 0,
                steps: Optional[int] = None, seed: int = 0, num_workers: int = 0) -> DataLoader:
    """DataLoader yielding [batch, samples] tensors, one batch per step"""
    sampler = StepBatchSampler(len(dataset), batch_size, start_step, steps, seed)
    return DataLoader(dataset, batch_sampler=sampler, num_workers=num_workers)


def build_dataset(source: str, sample_rate_hz: int, segment_seconds: float,
                  data_path: Optional[str] = None, seed: int = 0,
                  spec: Optional[SyntheticSpec] = None) -> Dataset:
    """
    Dataset for one data_source

    Args:
        source: synthetic, wav_dir or single_clip
        data_path: Directory (wav_dir) or WAV file (single_clip)
    """
    if source == "synthetic":
        return SyntheticDataset(spec or SyntheticSpec(), segment_seconds, sample_rate_hz, seed)
    if source == "wav_dir":
        return WavDirDataset(data_path, segment_seconds, sample_rate_hz)
    if source == "single_clip":
        from .token_io import wav_read

        if data_path is None:
            clip = harmonic_clip(min(segment_seconds, 1.0), sample_rate_hz)
        else:
            clip = wav_read(data_path, expected_rate_hz=sample_rate_hz)
        segment = int(round(segment_seconds * sample_rate_hz))
        if len(clip) > segment:
            clip = PcmBuffer(clip.samples[:segment], clip.sample_rate_hz)
        return SingleClipDataset(clip)
    raise ValueError(f"Unknown data source '{source}'")
