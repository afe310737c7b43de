"""
Training objectives.

Multiscale mel reconstruction, the self-guidance loss, the hinge
adversarial losses with feature matching over a bank of STFT
discriminators, and the weighted combination of every term.
"""

import warnings
from contextlib import contextmanager
from functools import lru_cache
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import math
import torch
import torchaudio
from torch import Tensor, nn
from torch.nn import functional as F

from .config import LossWeights
from .errors import LengthMismatch, NonFiniteLoss, SampleRateMismatch, ShapeMismatch
from .models import HiddenPair, PcmBuffer


LOG_EPS = 1e-5

# Generator terms in the order they are summed
GENERATOR_TERMS = ("ac_recon", "se_recon", "commit", "self_guidance", "gen", "fm")


# =========================================================================
# Spectrograms
# =========================================================================

def mel_filterbank(n_fft: int, n_mels: int, sample_rate: int, dtype=torch.float32) -> Tensor:
    """[n_fft/2 + 1, n_mels] HTK-scale triangular filters, 0 Hz to Nyquist"""
    with warnings.catch_warnings():
        # Small FFTs leave some high mel bands empty
        warnings.simplefilter("ignore")
        fbank = torchaudio.functional.melscale_fbanks(
            n_fft // 2 + 1, 0.0, sample_rate / 2.0, n_mels, sample_rate)
    return fbank.to(dtype)


def magnitude_frames(x: Tensor, window: Tensor, hop: int) -> Tensor:
    """
    |STFT| without centering

    Args:
        x: [..., T] signal, zero-padded to one window if shorter
        window: [W] analysis window
        hop: Frame step

    Returns:
        [..., frames, W/2 + 1] magnitudes
    """
    size = window.shape[0]
    if x.shape[-1] < size:
        x = F.pad(x, (0, size - x.shape[-1]))
    frames = x.unfold(-1, size, hop)
    return torch.fft.rfft(frames * window, dim=-1).abs()


def mel_spectrogram(x: Tensor, window: Tensor, hop: int, fbank: Tensor) -> Tensor:
    """[..., T] -> [..., frames, n_mels] linear-magnitude mel spectrogram"""
    return magnitude_frames(x, window, hop) @ fbank


# =========================================================================
# Reconstruction
# =========================================================================

class MultiScaleMelLoss(nn.Module):
    """
    L1 on mel magnitudes plus L2 on log mels, averaged over window sizes

    Windows 2^6 .. 2^11 with hop window/4, 64 mel bins, periodic Hann.
    """

    def __init__(self, sample_rate: int, n_mels: int = 64,
                 windows: Sequence[int] = tuple(2 ** i for i in range(6, 12))):
        super().__init__()
        self.sample_rate = sample_rate
        self.windows = list(windows)
        for size in self.windows:
            self.register_buffer(f"window_{size}", torch.hann_window(size, periodic=True))
            self.register_buffer(f"fbank_{size}", mel_filterbank(size, n_mels, sample_rate))

    def forward(self, x: Tensor, x_hat: Tensor, tolerance: Optional[int] = None) -> Tensor:
        length_gap = abs(x.shape[-1] - x_hat.shape[-1])
        if tolerance is not None and length_gap > tolerance:
            raise LengthMismatch(f"signal lengths differ by {length_gap} samples (> {tolerance})")
        n = min(x.shape[-1], x_hat.shape[-1])
        x, x_hat = x[..., :n], x_hat[..., :n]

        total = x.new_zeros(())
        for size in self.windows:
            window = getattr(self, f"window_{size}")
            fbank = getattr(self, f"fbank_{size}")
            mel = mel_spectrogram(x, window, size // 4, fbank)
            mel_hat = mel_spectrogram(x_hat, window, size // 4, fbank)
            l1 = (mel - mel_hat).abs().mean()
            l2 = ((torch.log(mel + LOG_EPS) - torch.log(mel_hat + LOG_EPS)) ** 2).mean()
            total = total + l1 + l2
        return total / len(self.windows)


@lru_cache(maxsize=4)
def _mel_loss_module(sample_rate: int) -> MultiScaleMelLoss:
    return MultiScaleMelLoss(sample_rate)


def multiscale_mel_loss(x: PcmBuffer, x_hat: PcmBuffer, hop: Optional[int] = None) -> float:
    """
    Multiscale mel distance between two buffers

    Args:
        x: Reference audio
        x_hat: Reconstruction
        hop: Largest tolerated length difference; None truncates silently

    Raises:
        LengthMismatch: lengths differ by more than hop
    """
    if x.sample_rate_hz != x_hat.sample_rate_hz:
        raise SampleRateMismatch(f"{x.sample_rate_hz} Hz vs {x_hat.sample_rate_hz} Hz")
    module = _mel_loss_module(x.sample_rate_hz)
    with torch.no_grad():
        return float(module(x.samples, x_hat.samples, tolerance=hop))


def self_guidance_loss(pair: HiddenPair) -> Tensor:
    """Mean over frames of ||sg(h_e) - h_q||^2; only h_q receives gradient"""
    if pair.h_e.shape != pair.h_q.shape:
        raise ShapeMismatch(
            f"self-guidance inputs differ: {tuple(pair.h_e.shape)} vs {tuple(pair.h_q.shape)}"
        )
    if pair.h_q.numel() == 0:
        return pair.h_q.new_zeros(())
    return ((pair.h_e.detach() - pair.h_q) ** 2).sum(-1).mean()


# =========================================================================
# Discriminators
# =========================================================================

class STFTDiscriminator(nn.Module):
    """2-D conv stack over one STFT resolution's magnitude spectrogram"""

    def __init__(self, window_size: int, channels: int = 32):
        super().__init__()
        self.window_size = window_size
        self.hop = window_size // 4
        self.register_buffer("window", torch.hann_window(window_size, periodic=True))

        self.convs = nn.ModuleList([
            nn.Conv2d(1, channels, (3, 9), padding=(1, 4)),
            nn.Conv2d(channels, channels, (3, 9), stride=(1, 2), padding=(1, 4)),
            nn.Conv2d(channels, channels, (3, 9), stride=(1, 2), padding=(1, 4)),
            nn.Conv2d(channels, channels, (3, 9), stride=(1, 2), padding=(1, 4)),
            nn.Conv2d(channels, channels, (3, 3), padding=(1, 1)),
        ])
        self.conv_post = nn.Conv2d(channels, 1, (3, 3), padding=(1, 1))
        self.activation = nn.LeakyReLU(0.2)

    def forward(self, x: Tensor) -> Tuple[Tensor, List[Tensor]]:
        """[B, T] -> (logits [B, 1, frames, bins'], feature maps)"""
        h = magnitude_frames(x, self.window, self.hop)[:, None]
        fmaps = []
        for conv in self.convs:
            h = self.activation(conv(h))
            fmaps.append(h)
        return self.conv_post(h), fmaps


class DiscriminatorBank(nn.Module):
    """
    Sub-discriminators judged together

    Any module mapping [B, T] to (logits, feature maps) can be added.
    """

    def __init__(self, windows: Sequence[int] = (512, 1024, 2048), channels: int = 32):
        super().__init__()
        self.members = nn.ModuleList([STFTDiscriminator(w, channels) for w in windows])

    def add(self, member: nn.Module) -> None:
        self.members.append(member)

    def zero_heads(self) -> None:
        """Zero every output layer, so D(x) == 0 for all x"""
        with torch.no_grad():
            for member in self.members:
                head = getattr(member, "conv_post", None)
                if head is not None:
                    head.weight.zero_()
                    head.bias.zero_()

    def forward(self, x: Tensor) -> List[Tuple[Tensor, List[Tensor]]]:
        return [member(x) for member in self.members]


@contextmanager
def frozen(module: nn.Module) -> Iterator[None]:
    """Temporarily stop gradients from reaching a module's parameters"""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def _samples(x: Union[PcmBuffer, Tensor]) -> Tensor:
    data = x.samples if isinstance(x, PcmBuffer) else x
    return data[None] if data.dim() == 1 else data


def adversarial_losses(disc: DiscriminatorBank, x: Union[PcmBuffer, Tensor],
                       x_hat: Union[PcmBuffer, Tensor]) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Hinge losses and normalized feature matching

    l_dis only reaches the discriminator (x_hat detached); l_gen and l_fm
    only reach the generator (discriminator frozen, real features detached).

    Returns:
        (l_dis, l_gen, l_fm), each averaged over sub-discriminators
    """
    real, fake = _samples(x), _samples(x_hat)
    if real.shape[-1] != fake.shape[-1]:
        raise LengthMismatch(f"adversarial inputs differ in length: {real.shape[-1]} vs {fake.shape[-1]}")

    real_out = disc(real)
    fake_detached = disc(fake.detach())
    with frozen(disc):
        fake_out = disc(fake)

    n = len(real_out)
    l_dis = sum(F.relu(1 - r).mean() + F.relu(1 + f).mean()
                for (r, _), (f, _) in zip(real_out, fake_detached)) / n
    l_gen = sum(-f.mean() for f, _ in fake_out) / n

    fm_terms = []
    for (_, real_maps), (_, fake_maps) in zip(real_out, fake_out):
        for real_map, fake_map in zip(real_maps, fake_maps):
            real_map = real_map.detach()
            fm_terms.append((real_map - fake_map).abs().mean() / (real_map.abs().mean() + 1e-8))
    l_fm = sum(fm_terms) / len(fm_terms) if fm_terms else real.new_zeros(())

    return l_dis, l_gen, l_fm


# =========================================================================
# Total
# =========================================================================

LossValue = Union[float, Tensor]


def _finite(term: str, value: LossValue) -> None:
    scalar = float(value.detach()) if isinstance(value, Tensor) else float(value)
    if not math.isfinite(scalar):
        raise NonFiniteLoss(term, scalar)


def total_loss(parts: Mapping[str, Optional[LossValue]],
               weights: LossWeights) -> Tuple[LossValue, LossValue]:
    """
    Weighted generator and discriminator objectives

    generator_total = 15 ac_recon + se_recon + commit + 0.1 self_guidance + gen + fm
    discriminator_total = dis
    (default weights). Absent or None parts count as zero.

    Raises:
        NonFiniteLoss: naming the first non-finite part
    """
    for term, value in parts.items():
        if value is not None:
            _finite(term, value)

    generator_total: LossValue = 0.0
    for term in GENERATOR_TERMS:
        value = parts.get(term)
        if value is not None:
            generator_total = generator_total + getattr(weights, term) * value

    discriminator_total: LossValue = 0.0
    if parts.get("dis") is not None:
        discriminator_total = weights.dis * parts["dis"]

    return generator_total, discriminator_total
