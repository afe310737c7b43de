"""
The learnable signal path of the codec.

SEANet-style causal convolutional encoder/decoder around two causal
transformers (encoder side and decoder side, separate weights), plus the
linear bridge between the hidden size and the RVQ code size.

Two ways to run it:
    - batch (training): encode_batch / transformer_pass / synthesize over
      [B, T] waveforms and [B, F, hidden] latents
    - streaming (inference): encode / decode with an explicit StreamState,
      advancing exactly one hop (one frame) at a time, so the result does not
      depend on how the caller chunks its input
"""

import math
from dataclasses import dataclass, field, replace
from typing import List, Literal, Optional, Tuple

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .config import ValidatedConfig, validate
from .errors import DimMismatch, SampleRateMismatch
from .models import LatentSequence, PcmBuffer
from .streaming import (
    SEANetResnetBlock,
    StreamableConv1d,
    StreamableConvTranspose1d,
    StreamingSequential,
)
from .transformer import CausalTransformer, TransformerState


Side = Literal["encoder_side", "decoder_side"]


# =========================================================================
# SEANet encoder / decoder
# =========================================================================

class SEANetEncoder(nn.Module):
    """Waveform [B, 1, T] -> hidden [B, hidden_dim, T / prod(ratios)]"""

    def __init__(self, ratios: List[int], n_filters: int, hidden_dim: int,
                 kernel_size: int = 7, residual_kernel_size: int = 7):
        super().__init__()
        layers: List[nn.Module] = [StreamableConv1d(1, n_filters, kernel_size)]
        channels = n_filters

        # Smallest stride first
        for ratio in reversed(ratios):
            layers += [
                SEANetResnetBlock(channels, residual_kernel_size),
                nn.ELU(),
                StreamableConv1d(channels, channels * 2, kernel_size=2 * ratio, stride=ratio),
            ]
            channels *= 2

        layers += [nn.ELU(), StreamableConv1d(channels, hidden_dim, kernel_size)]
        self.model = StreamingSequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.model(x)


class SEANetDecoder(nn.Module):
    """Hidden [B, hidden_dim, F] -> waveform [B, 1, F * prod(ratios)]"""

    def __init__(self, ratios: List[int], n_filters: int, hidden_dim: int,
                 kernel_size: int = 7, residual_kernel_size: int = 7):
        super().__init__()
        channels = n_filters * 2 ** len(ratios)
        layers: List[nn.Module] = [StreamableConv1d(hidden_dim, channels, kernel_size)]

        for ratio in ratios:
            layers += [
                nn.ELU(),
                StreamableConvTranspose1d(channels, channels // 2, kernel_size=2 * ratio, stride=ratio),
                SEANetResnetBlock(channels // 2, residual_kernel_size),
            ]
            channels //= 2

        layers += [nn.ELU(), StreamableConv1d(channels, 1, kernel_size)]
        self.model = StreamingSequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.model(x)


# =========================================================================
# Streaming state
# =========================================================================

@dataclass
class StreamState:
    """
    Per-stream causal buffers of one direction (encode or decode)

    conv holds the state of every stateful convolution, transformer the KV
    caches, pending the input samples still short of a full hop (encode only).
    """
    conv: List[object]
    transformer: TransformerState
    pending: Tensor = field(default_factory=lambda: torch.zeros(0))
    frames_emitted: int = 0


# =========================================================================
# Graph
# =========================================================================

class CodecGraph(nn.Module):
    """All graph weights: encoder, decoder, both transformers and the code bridge"""

    def __init__(self, config: ValidatedConfig):
        super().__init__()
        vc = validate(config)
        c = vc.config
        self.vc = vc
        self.hop = vc.hop
        self.sample_rate_hz = c.sample_rate_hz
        self.hidden_dim = c.hidden_dim

        self.encoder = SEANetEncoder(c.seanet_ratios, c.n_filters, c.hidden_dim,
                                     residual_kernel_size=c.residual_kernel_size)
        self.downsample = StreamingSequential(
            nn.ELU(),
            StreamableConv1d(c.hidden_dim, c.hidden_dim,
                             kernel_size=2 * c.extra_downsample, stride=c.extra_downsample),
        )
        self.encoder_transformer = CausalTransformer(
            c.hidden_dim, c.transformer_heads, c.transformer_layers, c.transformer_ff_dim)

        self.decoder_transformer = CausalTransformer(
            c.hidden_dim, c.transformer_heads, c.transformer_layers, c.transformer_ff_dim)
        self.upsample = StreamingSequential(
            StreamableConvTranspose1d(c.hidden_dim, c.hidden_dim,
                                      kernel_size=2 * c.extra_downsample, stride=c.extra_downsample),
            nn.ELU(),
        )
        self.decoder = SEANetDecoder(c.seanet_ratios, c.n_filters, c.hidden_dim,
                                     residual_kernel_size=c.residual_kernel_size)

        self.to_code = nn.Linear(c.hidden_dim, c.acoustic_code_dim)
        self.from_code = nn.Linear(c.acoustic_code_dim, c.hidden_dim)

    # ---------------------------------------------------------------------
    # Batch path
    # ---------------------------------------------------------------------

    def pad_to_hop(self, wav: Tensor) -> Tensor:
        """Zero-pad [B, T] on the right to a whole number of hops"""
        remainder = wav.shape[-1] % self.hop
        if remainder:
            wav = F.pad(wav, (0, self.hop - remainder))
        return wav

    def encode_batch(self, wav: Tensor) -> Tensor:
        """[B, T] waveform -> [B, F, hidden] acoustic hidden features"""
        x = self.pad_to_hop(wav)[:, None, :]
        h = self.downsample(self.encoder(x)).transpose(1, 2)
        return self.encoder_transformer(h)

    def transformer(self, side: Side) -> CausalTransformer:
        if side == "encoder_side":
            return self.encoder_transformer
        if side == "decoder_side":
            return self.decoder_transformer
        raise ValueError(f"Unknown transformer side '{side}'")

    def synthesize(self, h: Tensor) -> Tensor:
        """[B, F, hidden] decoder-transformer output -> [B, F * hop] waveform"""
        x = self.upsample(h.transpose(1, 2))
        return self.decoder(x)[:, 0, :]

    def decode_batch(self, latents: Tensor) -> Tensor:
        """[B, F, hidden] recombined latents -> [B, F * hop] waveform"""
        return self.synthesize(self.decoder_transformer(latents))

    # ---------------------------------------------------------------------
    # Streaming path
    # ---------------------------------------------------------------------

    def init_encode_state(self) -> StreamState:
        return StreamState(
            conv=[self.encoder.model.init_state(1), self.downsample.init_state(1)],
            transformer=self.encoder_transformer.init_state(),
            pending=torch.zeros(0),
        )

    def init_decode_state(self) -> StreamState:
        return StreamState(
            conv=[self.upsample.init_state(1), self.decoder.model.init_state(1)],
            transformer=self.decoder_transformer.init_state(),
        )

    def _encode_frame(self, samples: Tensor, state: StreamState) -> Tuple[Tensor, StreamState]:
        x = samples.view(1, 1, self.hop)
        x, enc_state = self.encoder.model.step(x, state.conv[0])
        x, down_state = self.downsample.step(x, state.conv[1])
        h, tr_state = self.encoder_transformer.step(x.transpose(1, 2), state.transformer)
        new_state = StreamState(
            conv=[enc_state, down_state],
            transformer=tr_state,
            pending=state.pending,
            frames_emitted=state.frames_emitted + 1,
        )
        return h[0, 0], new_state

    @torch.no_grad()
    def encode(self, state: StreamState, pcm: PcmBuffer) -> Tuple[StreamState, LatentSequence]:
        """
        Consume samples and emit every frame whose hop is now complete

        Args:
            state: Encode state from init_encode_state or a previous call
            pcm: New samples at the codec sample rate

        Returns:
            (new state, frames emitted by this call)

        Raises:
            SampleRateMismatch: if pcm is not at the codec sample rate
        """
        if pcm.sample_rate_hz != self.sample_rate_hz:
            raise SampleRateMismatch(
                f"expected {self.sample_rate_hz} Hz audio, got {pcm.sample_rate_hz} Hz"
            )

        pending = torch.cat([state.pending, pcm.samples.to(torch.float32)])
        n_frames = pending.shape[0] // self.hop

        frames = []
        for i in range(n_frames):
            h, state = self._encode_frame(pending[i * self.hop:(i + 1) * self.hop], state)
            frames.append(h)

        state = replace(state, pending=pending[n_frames * self.hop:])
        data = torch.stack(frames) if frames else torch.zeros(0, self.hidden_dim)
        return state, LatentSequence(data, self.vc.frame_rate_hz)

    def flush(self, state: StreamState) -> Tuple[StreamState, LatentSequence]:
        """Zero-pad a pending partial hop and emit its frame"""
        remainder = state.pending.shape[0]
        if remainder == 0:
            return state, LatentSequence(torch.zeros(0, self.hidden_dim), self.vc.frame_rate_hz)
        padding = PcmBuffer(torch.zeros(self.hop - remainder), self.sample_rate_hz)
        return self.encode(state, padding)

    @torch.no_grad()
    def decode(self, state: StreamState, latents: LatentSequence) -> Tuple[StreamState, PcmBuffer]:
        """
        Turn recombined latent frames into hop samples each

        Raises:
            DimMismatch: if latents.dim != hidden_dim
        """
        if latents.dim != self.hidden_dim:
            raise DimMismatch(f"expected latent dim {self.hidden_dim}, got {latents.dim}")

        chunks = []
        for frame in latents.data.to(torch.float32):
            h, tr_state = self.decoder_transformer.step(frame.view(1, 1, -1), state.transformer)
            x, up_state = self.upsample.step(h.transpose(1, 2), state.conv[0])
            x, dec_state = self.decoder.model.step(x, state.conv[1])
            state = StreamState(
                conv=[up_state, dec_state],
                transformer=tr_state,
                frames_emitted=state.frames_emitted + 1,
            )
            chunks.append(x[0, 0])

        samples = torch.cat(chunks) if chunks else torch.zeros(0)
        return state, PcmBuffer(samples, self.sample_rate_hz)


# =========================================================================
# Functional entry points
# =========================================================================

def transformer_pass(latents: LatentSequence, graph: CodecGraph, side: Side) -> LatentSequence:
    """
    Run one of the two causal transformers over a whole sequence

    Output frame t depends only on input frames <= t.
    """
    if latents.dim != graph.hidden_dim:
        raise DimMismatch(f"expected latent dim {graph.hidden_dim}, got {latents.dim}")
    out = graph.transformer(side)(latents.data[None].to(torch.float32))[0]
    return LatentSequence(out, latents.frame_rate_hz)


def initialize_module(module: nn.Module, generator: torch.Generator) -> None:
    """
    Deterministic initialization driven by one generator

    Convolutions: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    Linear and attention projections: normal(0, 1/sqrt(in_features)), zero bias.
    LayerNorm: ones / zeros. Embeddings: normal(0, 1).
    """
    for sub in module.modules():
        if isinstance(sub, (nn.Conv1d, nn.ConvTranspose1d, nn.Conv2d)):
            fan_in = sub.weight.shape[1] * math.prod(sub.kernel_size)
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                sub.weight.uniform_(-bound, bound, generator=generator)
                if sub.bias is not None:
                    sub.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(sub, nn.Linear):
            with torch.no_grad():
                sub.weight.normal_(0.0, 1.0 / math.sqrt(sub.in_features), generator=generator)
                if sub.bias is not None:
                    sub.bias.zero_()
        elif isinstance(sub, nn.LayerNorm):
            with torch.no_grad():
                sub.weight.fill_(1.0)
                sub.bias.zero_()
        elif isinstance(sub, nn.Embedding):
            with torch.no_grad():
                sub.weight.normal_(0.0, 1.0, generator=generator)


def init_params(config: ValidatedConfig, seed: int) -> CodecGraph:
    """
    Build a CodecGraph with deterministic weights

    Args:
        config: Validated codec config
        seed: Initialization seed; same seed gives bit-identical weights

    Returns:
        CodecGraph
    """
    generator = torch.Generator().manual_seed(seed)
    graph = CodecGraph(config)
    initialize_module(graph, generator)
    return graph
