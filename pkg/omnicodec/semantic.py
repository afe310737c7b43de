"""
Semantic branch of the codec.

A frozen teacher turns audio into semantic features at the semantic frame
rate; a single codebook quantizes them; an adapter maps the quantized
features into the acoustic hidden space, where they are subtracted before
the residual quantizer and added back before the decoder.

Teachers:
    - DeskTeacher: log-mel frontend plus a fixed random projection
    - FileTeacher: features served from per-utterance files by an external
      process (the documented exchange format, see write_teacher_features)
"""

import hashlib
import math
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torchaudio
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import firwin, get_window, resample_poly, upfirdn
from torch import Tensor, nn
from torch.nn import functional as F

from .config import CodecConfig, ValidatedConfig, validate
from .errors import DimMismatch, FrameMisalignment, IoError, SampleRateMismatch, ShapeMismatch, TruncatedPayload
from .models import LatentSequence, PcmBuffer
from .quantize import Codebook


# =========================================================================
# Resampling
# =========================================================================

class CausalResampler:
    """
    Polyphase windowed-sinc resampler with fixed taps

    Taps: firwin(20 * max(up, down) + 1, 1 / max(up, down), kaiser beta 5) * up,
    the same design scipy's resample_poly uses. Applied with upfirdn over
    windows that end at a frame boundary, so every output depends only on
    samples up to that boundary.
    """

    def __init__(self, source_rate_hz: int, target_rate_hz: int):
        ratio = Fraction(target_rate_hz, source_rate_hz)
        self.up = ratio.numerator
        self.down = ratio.denominator
        self.source_rate_hz = source_rate_hz
        self.target_rate_hz = target_rate_hz

        if self.up == self.down == 1:
            self.taps = np.ones(1)
        else:
            max_rate = max(self.up, self.down)
            self.taps = firwin(20 * max_rate + 1, 1.0 / max_rate, window=("kaiser", 5.0)) * self.up

    def source_window(self, target_samples: int) -> int:
        """Source samples needed so the last target_samples outputs see no edge"""
        margin = math.ceil((len(self.taps) - 1) / self.down)
        outputs = math.ceil((target_samples + margin) / self.up) * self.up
        return outputs * self.down // self.up

    def resample_windows(self, windows: np.ndarray, target_samples: int) -> np.ndarray:
        """[n, source_window] -> [n, target_samples], the last outputs of each window"""
        if self.up == self.down == 1:
            return windows[:, -target_samples:]
        end = windows.shape[-1] * self.up // self.down
        out = upfirdn(self.taps, windows, self.up, self.down, axis=-1)
        return out[:, end - target_samples:end]

    def resample(self, samples: np.ndarray) -> np.ndarray:
        """Whole-signal resampling, for teachers that cannot work per window"""
        if self.up == self.down == 1:
            return samples
        return resample_poly(samples, self.up, self.down, window=("kaiser", 5.0))


# =========================================================================
# Teachers
# =========================================================================

class SemanticTeacher(ABC):
    """
    Frozen source of semantic features

    Consumes audio at sample_rate_hz, emits one dim-sized vector every
    frame_hop samples. Teachers that set window_samples can also evaluate
    single frames from a trailing window, which streaming encode requires.
    """

    sample_rate_hz: int
    frame_hop: int
    dim: int
    window_samples: Optional[int] = None

    @abstractmethod
    def extract(self, pcm: PcmBuffer) -> LatentSequence:
        """Features of a whole utterance, floor(len / frame_hop) frames"""

    def features_from_windows(self, windows: np.ndarray) -> Tensor:
        """[n, window_samples] trailing windows -> [n, dim] features"""
        raise NotImplementedError(f"{type(self).__name__} cannot evaluate single frames")

    @abstractmethod
    def parameter_hash(self) -> str:
        """Digest of everything that determines the teacher's output"""


class DeskTeacher(SemanticTeacher):
    """
    80-bin log-mel frontend (25 ms window) and a seeded random linear map

    Each semantic frame averages the mel frames falling inside it: 8 mel
    frames per semantic frame when the frame hop allows it (10 ms mel hop at
    12.5 Hz), one otherwise.
    """

    def __init__(self, dim: int, sample_rate_hz: int = 16000, frame_hop: int = 1280,
                 seed: int = 0, n_mels: int = 80, window_ms: float = 25.0):
        self.dim = dim
        self.sample_rate_hz = sample_rate_hz
        self.frame_hop = frame_hop
        self.seed = seed
        self.n_mels = n_mels

        self.n_fft = int(round(sample_rate_hz * window_ms / 1000.0))
        self.mel_frames = 8 if frame_hop % 8 == 0 else 1
        self.mel_hop = frame_hop // self.mel_frames
        self.window_samples = frame_hop + self.n_fft - self.mel_hop

        self.window = get_window("hann", self.n_fft)
        self.fbank = torchaudio.functional.melscale_fbanks(
            self.n_fft // 2 + 1, 0.0, sample_rate_hz / 2.0, n_mels, sample_rate_hz,
        ).numpy().astype(np.float64)

        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((n_mels, dim)) / math.sqrt(n_mels)

    @classmethod
    def for_config(cls, config: Union[CodecConfig, ValidatedConfig]) -> "DeskTeacher":
        vc = validate(config)
        return cls(vc.config.semantic_dim, vc.config.teacher_sample_rate_hz, vc.teacher_hop,
                   seed=vc.config.seed)

    def features_from_windows(self, windows: np.ndarray) -> Tensor:
        windows = np.asarray(windows, dtype=np.float64)
        frames = sliding_window_view(windows, self.n_fft, axis=-1)[:, ::self.mel_hop]
        spectrum = np.abs(np.fft.rfft(frames * self.window, axis=-1))
        log_mel = np.log(spectrum @ self.fbank + 1e-5)
        features = log_mel.mean(axis=1) @ self.projection
        return torch.from_numpy(features.astype(np.float32))

    def extract(self, pcm: PcmBuffer) -> LatentSequence:
        if pcm.sample_rate_hz != self.sample_rate_hz:
            raise SampleRateMismatch(
                f"teacher expects {self.sample_rate_hz} Hz, got {pcm.sample_rate_hz} Hz"
            )
        n_frames = len(pcm) // self.frame_hop
        if n_frames == 0:
            return LatentSequence(torch.zeros(0, self.dim), self.sample_rate_hz / self.frame_hop)

        samples = pcm.samples.numpy().astype(np.float64)
        padded = np.concatenate([np.zeros(self.window_samples - self.frame_hop), samples])
        windows = sliding_window_view(padded, self.window_samples)[::self.frame_hop][:n_frames]
        return LatentSequence(self.features_from_windows(windows), self.sample_rate_hz / self.frame_hop)

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(f"desk:{self.sample_rate_hz}:{self.frame_hop}:{self.n_fft}:{self.seed}".encode())
        digest.update(self.fbank.tobytes())
        digest.update(self.projection.tobytes())
        return digest.hexdigest()


# Feature file: u32 frames, u32 dim, then frames × dim little-endian float32
_FEATURE_HEADER = struct.Struct("<II")


def write_teacher_features(path: Union[str, Path], features: Union[Tensor, np.ndarray]) -> None:
    """Write a [frames, dim] feature matrix in the teacher exchange format"""
    data = np.ascontiguousarray(np.asarray(features, dtype="<f4"))
    if data.ndim != 2:
        raise ShapeMismatch(f"expected [frames, dim] features, got shape {data.shape}")
    try:
        with open(path, "wb") as f:
            f.write(_FEATURE_HEADER.pack(*data.shape))
            f.write(data.tobytes())
    except OSError as e:
        raise IoError(f"Cannot write teacher features to {path}: {e}") from e


def read_teacher_features(path: Union[str, Path]) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"Cannot read teacher features from {path}: {e}") from e
    if len(raw) < _FEATURE_HEADER.size:
        raise TruncatedPayload(f"{path}: feature header is {len(raw)} bytes")
    frames, dim = _FEATURE_HEADER.unpack_from(raw)
    expected = _FEATURE_HEADER.size + 4 * frames * dim
    if len(raw) < expected:
        raise TruncatedPayload(f"{path}: expected {expected} bytes, got {len(raw)}")
    payload = np.frombuffer(raw, dtype="<f4", count=frames * dim, offset=_FEATURE_HEADER.size)
    return payload.reshape(frames, dim).astype(np.float32)


class FileTeacher(SemanticTeacher):
    """Serves one utterance's precomputed features from an exchange file"""

    def __init__(self, path: Union[str, Path], sample_rate_hz: int = 16000, frame_hop: int = 1280):
        self.path = Path(path)
        self.sample_rate_hz = sample_rate_hz
        self.frame_hop = frame_hop
        self.features = read_teacher_features(self.path)
        self.dim = self.features.shape[1]

    def extract(self, pcm: PcmBuffer) -> LatentSequence:
        n_frames = len(pcm) // self.frame_hop
        stored = self.features.shape[0]
        if stored + 1 < n_frames:
            raise FrameMisalignment(
                f"{self.path} holds {stored} frames, audio needs {n_frames}"
            )
        data = torch.from_numpy(self.features[:n_frames].copy())
        if data.shape[0] < n_frames:
            data = torch.cat([data, data[-1:]])
        return LatentSequence(data, self.sample_rate_hz / self.frame_hop)

    def parameter_hash(self) -> str:
        return hashlib.sha256(self.features.tobytes()).hexdigest()


# =========================================================================
# Frontend: codec-rate audio -> teacher features
# =========================================================================

class SemanticFrontend:
    """
    Feeds codec-rate audio to a teacher

    Windowed teachers get one trailing window per teacher frame, resampled
    causally; the same window layout serves training (all frames at once)
    and streaming (one codec frame at a time).
    """

    def __init__(self, config: ValidatedConfig, teacher: SemanticTeacher):
        self.vc = validate(config)
        self.teacher = teacher
        self.stride = self.vc.semantic_stride
        self.source_hop = self.vc.hop // self.stride
        self.resampler = CausalResampler(self.vc.config.sample_rate_hz, teacher.sample_rate_hz)

        if teacher.dim != self.vc.config.semantic_dim:
            raise DimMismatch(f"teacher emits dim {teacher.dim}, config wants {self.vc.config.semantic_dim}")

        self.windowed = teacher.window_samples is not None
        if self.windowed:
            self.source_window = max(self.resampler.source_window(teacher.window_samples), self.source_hop)
            self.history = self.source_window + (self.stride - 1) * self.source_hop

    def _from_windows(self, windows: np.ndarray) -> Tensor:
        teacher_windows = self.resampler.resample_windows(windows, self.teacher.window_samples)
        return self.teacher.features_from_windows(teacher_windows)

    @torch.no_grad()
    def features(self, wav: Tensor) -> Tensor:
        """[B, T] codec-rate audio (T a whole number of hops) -> [B, T / source_hop, dim]"""
        B, T = wav.shape
        n_frames = T // self.source_hop
        samples = wav.detach().to(torch.float64).numpy()

        if not self.windowed:
            rows = []
            for row in samples:
                resampled = self.resampler.resample(row)
                rows.append(self.teacher.extract(
                    PcmBuffer(torch.from_numpy(resampled.astype(np.float32)), self.teacher.sample_rate_hz)
                ).data[:n_frames])
            return torch.stack(rows)

        if B * n_frames == 0:
            return torch.zeros(B, n_frames, self.teacher.dim)

        padded = np.concatenate([np.zeros((B, self.source_window - self.source_hop)), samples], axis=1)
        windows = sliding_window_view(padded, self.source_window, axis=1)[:, ::self.source_hop][:, :n_frames]
        flat = windows.reshape(B * n_frames, self.source_window)
        return self._from_windows(flat).view(B, n_frames, -1)

    def init_state(self) -> np.ndarray:
        return np.zeros(self.history)

    def step(self, state: np.ndarray, hop_samples: Tensor) -> Tuple[Tensor, np.ndarray]:
        """One codec hop -> [stride, dim] teacher features for that codec frame"""
        if not self.windowed:
            raise NotImplementedError(f"{type(self.teacher).__name__} does not support streaming")
        history = np.concatenate([state, hop_samples.detach().to(torch.float64).numpy()])[-self.history:]
        ends = [self.history - (self.stride - 1 - k) * self.source_hop for k in range(self.stride)]
        windows = np.stack([history[end - self.source_window:end] for end in ends])
        return self._from_windows(windows), history


# =========================================================================
# Adapters
# =========================================================================

def pool_frames(features: Tensor, stride: int) -> Tensor:
    """Average-pool [..., J, D] over time by stride (J truncated to a multiple)"""
    if stride == 1:
        return features
    frames = features.shape[-2] // stride
    features = features[..., :frames * stride, :]
    return features.reshape(*features.shape[:-2], frames, stride, features.shape[-1]).mean(-2)


class Adapter1(nn.Module):
    """Learned affine map semantic_dim -> hidden_dim"""

    def __init__(self, semantic_dim: int, hidden_dim: int, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.hidden_dim = hidden_dim
        self.proj = nn.Linear(semantic_dim, hidden_dim)

    def pool(self, teacher_features: Tensor) -> Tensor:
        return pool_frames(teacher_features, self.stride)

    def forward(self, s_q: Tensor) -> Tensor:
        return self.proj(s_q)


class FixedSliceAdapter(nn.Module):
    """Parameter-free stand-in: first hidden_dim dims of s_q, zero-padded if short"""

    def __init__(self, semantic_dim: int, hidden_dim: int, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.semantic_dim = semantic_dim
        self.hidden_dim = hidden_dim

    def pool(self, teacher_features: Tensor) -> Tensor:
        return pool_frames(teacher_features, self.stride)

    def forward(self, s_q: Tensor) -> Tensor:
        if self.semantic_dim >= self.hidden_dim:
            return s_q[..., :self.hidden_dim]
        return F.pad(s_q, (0, self.hidden_dim - self.semantic_dim))


Adapter = Union[Adapter1, FixedSliceAdapter]


# =========================================================================
# Semantic quantization and decoupling
# =========================================================================

def _data(x: Union[LatentSequence, Tensor]) -> Tensor:
    return x.data if isinstance(x, LatentSequence) else x


def _wrap(like: Union[LatentSequence, Tensor], data: Tensor) -> Union[LatentSequence, Tensor]:
    return LatentSequence(data, like.frame_rate_hz) if isinstance(like, LatentSequence) else data


def semantic_quantize(teacher_out: Union[LatentSequence, Tensor],
                      codebook: Codebook) -> Tuple[Tensor, Union[LatentSequence, Tensor]]:
    """
    Nearest-codeword quantization of teacher features

    Args:
        teacher_out: [..., frames, semantic_dim]
        codebook: Semantic codebook

    Returns:
        (tokens [..., frames], s_q with the selected codewords)
    """
    data = _data(teacher_out)
    if data.shape[-1] != codebook.dim:
        raise DimMismatch(f"semantic features have dim {data.shape[-1]}, codebook {codebook.dim}")
    flat = data.reshape(-1, codebook.dim)
    tokens = codebook.nearest(flat)
    s_q = codebook.lookup(tokens).to(data.dtype)
    return tokens.view(data.shape[:-1]), _wrap(teacher_out, s_q.view(data.shape))


def align_frames(a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    """Truncate both [..., frames, D] to the shorter; more than one frame apart is an error"""
    fa, fb = a.shape[-2], b.shape[-2]
    if abs(fa - fb) > 1:
        raise FrameMisalignment(f"frame counts differ by more than one: {fa} vs {fb}")
    n = min(fa, fb)
    return a[..., :n, :], b[..., :n, :]


def decouple_subtract(acoustic_hidden: Union[LatentSequence, Tensor], s_q: Union[LatentSequence, Tensor],
                      adapter: Adapter) -> Union[LatentSequence, Tensor]:
    """acoustic_hidden - adapter(s_q)"""
    a, s = align_frames(_data(acoustic_hidden), _data(s_q))
    return _wrap(acoustic_hidden, a - adapter(s))


def decouple_recombine(a_q: Union[LatentSequence, Tensor], s_q: Union[LatentSequence, Tensor],
                       adapter: Adapter) -> Union[LatentSequence, Tensor]:
    """a_q + adapter(s_q), the decoder-side transformer input"""
    a, s = align_frames(_data(a_q), _data(s_q))
    return _wrap(a_q, a + adapter(s))


def semantic_recon_loss(s_q: Union[LatentSequence, Tensor],
                        teacher_out: Union[LatentSequence, Tensor]) -> Tensor:
    """
    Mean over frames and dims of (s_q - sg(teacher_out))^2

    Gradient flows into s_q only. In the codec s_q is the straight-through
    copy of the frozen teacher output, so the value is reported but trains
    nothing.
    """
    s, t = _data(s_q), _data(teacher_out)
    if s.shape != t.shape:
        raise ShapeMismatch(f"semantic recon inputs differ: {tuple(s.shape)} vs {tuple(t.shape)}")
    if s.numel() == 0:
        return s.new_zeros(())
    return ((s - t.detach()) ** 2).mean()


# =========================================================================
# Branch wiring
# =========================================================================

@dataclass(frozen=True)
class BranchWiring:
    """Which optional paths the codec runs with"""
    semantic_branch: bool
    adapter: str
    self_guidance: bool

    def build_adapter(self, vc: ValidatedConfig) -> Optional[Adapter]:
        if not self.semantic_branch:
            return None
        c = vc.config
        if self.adapter == "fixed_slice":
            return FixedSliceAdapter(c.semantic_dim, c.hidden_dim, vc.semantic_stride)
        return Adapter1(c.semantic_dim, c.hidden_dim, vc.semantic_stride)


def ablation_switches(config: Union[CodecConfig, ValidatedConfig]) -> BranchWiring:
    """Branch wiring selected by the semantic_branch / adapter / self_guidance switches"""
    c = config.config if isinstance(config, ValidatedConfig) else config
    return BranchWiring(
        semantic_branch=c.semantic_branch,
        adapter=c.adapter,
        self_guidance=c.self_guidance,
    )
