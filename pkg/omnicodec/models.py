"""
Value types passed between the codec modules.

Tensor-carrying records are dataclasses; typed reports live in reports.py.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import TokenOutOfRange


# In-memory marker for an RVQ stage that was not active for a frame
INACTIVE = -1


@dataclass
class PcmBuffer:
    """Mono audio samples, nominally in [-1, 1]"""
    samples: torch.Tensor  # [n] float32
    sample_rate_hz: int

    def __post_init__(self):
        if not isinstance(self.samples, torch.Tensor):
            self.samples = torch.as_tensor(np.asarray(self.samples), dtype=torch.float32)
        if self.samples.dim() != 1:
            raise ValueError(f"PcmBuffer expects 1-D samples, got shape {tuple(self.samples.shape)}")

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_seconds(self) -> float:
        return len(self) / self.sample_rate_hz

    @classmethod
    def empty(cls, sample_rate_hz: int) -> "PcmBuffer":
        return cls(torch.zeros(0), sample_rate_hz)


@dataclass
class LatentSequence:
    """A [frames × dim] feature matrix at a declared frame rate"""
    data: torch.Tensor  # [frames, dim]
    frame_rate_hz: float

    def __post_init__(self):
        if self.data.dim() != 2:
            raise ValueError(f"LatentSequence expects [frames, dim], got shape {tuple(self.data.shape)}")

    @property
    def frames(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.data).all())


@dataclass
class TokenMatrix:
    """
    [frames × streams] code indices

    Stream 0 is the semantic stream when has_semantic is set; the rest are
    RVQ stages in order. INACTIVE marks stages that were not used.
    """
    values: np.ndarray  # [frames, streams] int64
    has_semantic: bool
    codebook_size: int
    semantic_codebook_size: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.values.ndim != 2:
            raise ValueError(f"TokenMatrix expects [frames, streams], got shape {self.values.shape}")
        self.check_range()

    @property
    def frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def streams(self) -> int:
        return int(self.values.shape[1])

    @property
    def acoustic(self) -> np.ndarray:
        return self.values[:, 1:] if self.has_semantic else self.values

    @property
    def semantic(self) -> Optional[np.ndarray]:
        return self.values[:, 0] if self.has_semantic else None

    def limits(self) -> np.ndarray:
        """Exclusive upper bound of every stream"""
        limits = np.full(self.streams, self.codebook_size, dtype=np.int64)
        if self.has_semantic and self.streams > 0:
            limits[0] = self.semantic_codebook_size or self.codebook_size
        return limits

    def check_range(self) -> None:
        if self.values.size == 0:
            return
        bad = (self.values < INACTIVE) | (self.values >= self.limits()[None, :])
        if bad.any():
            frame, stream = np.argwhere(bad)[0]
            raise TokenOutOfRange(
                f"token {self.values[frame, stream]} at frame {frame}, stream {stream} "
                f"outside [0, {self.limits()[stream]})"
            )


@dataclass
class QuantResult:
    """Output of the residual quantizer"""
    indices: torch.Tensor                    # [..., frames, stages], INACTIVE where off
    quantized: torch.Tensor                  # [..., frames, code_dim]
    commit_loss: torch.Tensor                # scalar
    residual_energy_per_stage: torch.Tensor  # [stages]
    stage_inputs: list = field(default_factory=list)  # residual entering each stage


@dataclass
class HiddenPair:
    """Decoder-side transformer outputs for the continuous and quantized paths"""
    h_e: torch.Tensor
    h_q: torch.Tensor
