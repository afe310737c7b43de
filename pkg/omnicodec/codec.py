"""
The full codec model.

OmniCodec wires the graph, the semantic branch and the quantizers
together. forward() is the batch training path; encode_pcm / decode_tokens
(and their step-wise session forms) are the streaming inference path that
the CLI and the evaluation harness use.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch import Tensor, nn

from .config import CodecConfig, ValidatedConfig, validate
from .errors import ConfigHashMismatch, InvalidStageCount, SampleRateMismatch
from .models import HiddenPair, LatentSequence, PcmBuffer, TokenMatrix
from .losses import self_guidance_loss
from .nn_graph import CodecGraph, StreamState, initialize_module
from .quantize import Codebook, ResidualVQ, commitment_loss, ema_update
from .semantic import (
    DeskTeacher,
    SemanticFrontend,
    SemanticTeacher,
    ablation_switches,
    align_frames,
    decouple_recombine,
    decouple_subtract,
    semantic_quantize,
    semantic_recon_loss,
)


@dataclass
class CodecOutput:
    """Everything one training forward produces"""
    x_hat: Tensor                         # [B, F * hop]
    target: Tensor                        # [B, F * hop] input padded to whole hops
    parts: Dict[str, Tensor]              # se_recon, commit, self_guidance (when enabled)
    acoustic_indices: Tensor              # [B, F, stages]
    semantic_tokens: Optional[Tensor]     # [B, F]
    stage_inputs: List[Tensor]            # residual rows entering each RVQ stage
    semantic_inputs: Optional[Tensor]     # [N, semantic_dim] rows fed to the semantic VQ
    hidden: Optional[HiddenPair] = None


@dataclass
class EncodeSession:
    """Streaming encode state: graph buffers, teacher history and a partial hop"""
    graph: StreamState
    teacher: Optional[np.ndarray]
    pending: Tensor = field(default_factory=lambda: torch.zeros(0))


class OmniCodec(nn.Module):
    """Encoder, semantic branch, residual quantizer and decoder"""

    def __init__(self, config: Union[CodecConfig, ValidatedConfig],
                 teacher: Optional[SemanticTeacher] = None, seed: Optional[int] = None):
        super().__init__()
        vc = validate(config)
        c = vc.config
        self.vc = vc
        self.wiring = ablation_switches(vc)
        self.seed = c.seed if seed is None else seed

        generator = torch.Generator().manual_seed(self.seed)
        self.graph = CodecGraph(vc)
        self.rvq = ResidualVQ(c.acoustic_stages, c.acoustic_codebook_size, c.acoustic_code_dim,
                              c.codebook_decay, c.codebook_epsilon, generator=generator)

        self.semantic_codebook: Optional[Codebook] = None
        self.adapter = None
        self.frontend: Optional[SemanticFrontend] = None
        if self.wiring.semantic_branch:
            self.semantic_codebook = Codebook(c.semantic_codebook_size, c.semantic_dim,
                                              c.codebook_decay, c.codebook_epsilon, generator=generator)
            self.adapter = self.wiring.build_adapter(vc)
            self.frontend = SemanticFrontend(vc, teacher or DeskTeacher.for_config(vc))

        initialize_module(self, generator)
        # Continues into codebook initialization on the first training batch
        self.init_generator = generator

    @property
    def teacher(self) -> Optional[SemanticTeacher]:
        return self.frontend.teacher if self.frontend is not None else None

    def parameter_count(self) -> int:
        """Trainable weights plus codebook entries"""
        weights = sum(p.numel() for p in self.parameters())
        codes = sum(cb.vectors.numel() for cb in self.codebooks())
        return weights + codes

    def codebooks(self) -> List[Codebook]:
        books = list(self.rvq.stages)
        if self.semantic_codebook is not None:
            books.append(self.semantic_codebook)
        return books

    # ---------------------------------------------------------------------
    # Training path
    # ---------------------------------------------------------------------

    def forward(self, wav: Tensor, n_active: Union[int, Tensor, None] = None) -> CodecOutput:
        """
        One batch through the whole codec

        With a frozen teacher and an EMA-maintained semantic codebook, se_recon
        and the semantic share of commit are monitor-only: neither carries a
        gradient. The adapter learns through the subtract / recombine path,
        i.e. from the reconstruction and self-guidance terms.

        Args:
            wav: [B, T] audio at the codec sample rate
            n_active: Active RVQ stages, one int or one per example

        Returns:
            CodecOutput with the reconstruction and the non-adversarial parts
        """
        graph = self.graph
        wav = graph.pad_to_hop(wav)
        hidden = graph.encode_batch(wav)
        parts: Dict[str, Tensor] = {}

        s_q = None
        semantic_tokens = None
        semantic_inputs = None
        semantic_commit = None
        if self.wiring.semantic_branch:
            teacher_out = self.adapter.pool(self.frontend.features(wav))
            hidden, teacher_out = align_frames(hidden, teacher_out)
            semantic_inputs = teacher_out.reshape(-1, teacher_out.shape[-1])

            if self.training:
                self.semantic_codebook.init_from_batch(semantic_inputs, self.init_generator)
            semantic_tokens, s_q = semantic_quantize(teacher_out, self.semantic_codebook)
            if self.training and semantic_inputs.shape[0]:
                ema_update(self.semantic_codebook, semantic_inputs, semantic_tokens.reshape(-1))

            s_q_st = teacher_out + (s_q - teacher_out).detach()
            parts["se_recon"] = semantic_recon_loss(s_q_st, teacher_out)
            semantic_commit = commitment_loss(teacher_out, s_q)
            residual = decouple_subtract(hidden, s_q, self.adapter)
        else:
            residual = hidden

        z_e = graph.to_code(residual)
        quant = self.rvq(z_e, n_active)
        z_q = z_e + (quant.quantized.to(z_e.dtype) - z_e).detach()

        commit = quant.commit_loss
        if semantic_commit is not None:
            commit = commit + semantic_commit
        parts["commit"] = commit

        h_q = graph.decoder_transformer(self._recombine(graph.from_code(z_q), s_q))
        x_hat = graph.synthesize(h_q)

        pair = None
        if self.wiring.self_guidance:
            with torch.no_grad():
                h_e = graph.decoder_transformer(self._recombine(graph.from_code(z_e), s_q))
            pair = HiddenPair(h_e, h_q)
            parts["self_guidance"] = self_guidance_loss(pair)

        return CodecOutput(
            x_hat=x_hat,
            target=wav,
            parts=parts,
            acoustic_indices=quant.indices,
            semantic_tokens=semantic_tokens,
            stage_inputs=quant.stage_inputs,
            semantic_inputs=semantic_inputs,
            hidden=pair,
        )

    def _recombine(self, a_q: Tensor, s_q: Optional[Tensor]) -> Tensor:
        if s_q is None:
            return a_q
        return decouple_recombine(a_q, s_q, self.adapter)

    # ---------------------------------------------------------------------
    # Streaming encode
    # ---------------------------------------------------------------------

    def init_encode_session(self) -> EncodeSession:
        teacher_state = self.frontend.init_state() if self.frontend is not None else None
        return EncodeSession(graph=self.graph.init_encode_state(), teacher=teacher_state)

    def _check_streams(self, n_acoustic: Optional[int]) -> int:
        stages = self.rvq.num_stages
        n = stages if n_acoustic is None else n_acoustic
        if not 1 <= n <= stages:
            raise InvalidStageCount(f"n_acoustic must be in 1..{stages}, got {n}")
        return n

    @torch.no_grad()
    def _encode_frame(self, session: EncodeSession, hop_samples: Tensor,
                      n_acoustic: int) -> Tuple[EncodeSession, np.ndarray]:
        graph_state, latent = self.graph.encode(
            session.graph, PcmBuffer(hop_samples, self.vc.config.sample_rate_hz))
        hidden = latent.data  # [1, hidden]

        row = []
        teacher_state = session.teacher
        if self.wiring.semantic_branch:
            features, teacher_state = self.frontend.step(session.teacher, hop_samples)
            features = self.adapter.pool(features[None])[0]  # [1, semantic_dim]
            token, s_q = semantic_quantize(features, self.semantic_codebook)
            hidden = decouple_subtract(hidden, s_q, self.adapter)
            row.append(int(token[0]))

        z_e = self.graph.to_code(hidden)
        indices = self.rvq(z_e, n_acoustic).indices[0, :n_acoustic]
        row.extend(int(i) for i in indices)

        return replace(session, graph=graph_state, teacher=teacher_state), np.asarray(row, dtype=np.int64)

    def encode_step(self, session: EncodeSession, pcm: PcmBuffer,
                    n_acoustic: Optional[int] = None) -> Tuple[EncodeSession, np.ndarray]:
        """
        Consume samples; emit token rows for every completed hop

        Returns:
            (new session, [frames, streams] token rows)
        """
        if pcm.sample_rate_hz != self.vc.config.sample_rate_hz:
            raise SampleRateMismatch(
                f"expected {self.vc.config.sample_rate_hz} Hz audio, got {pcm.sample_rate_hz} Hz"
            )
        n_acoustic = self._check_streams(n_acoustic)
        hop = self.vc.hop

        pending = torch.cat([session.pending, pcm.samples.to(torch.float32)])
        n_frames = pending.shape[0] // hop
        rows = []
        for i in range(n_frames):
            session, row = self._encode_frame(session, pending[i * hop:(i + 1) * hop], n_acoustic)
            rows.append(row)

        session = replace(session, pending=pending[n_frames * hop:])
        streams = n_acoustic + (1 if self.wiring.semantic_branch else 0)
        tokens = np.stack(rows) if rows else np.zeros((0, streams), dtype=np.int64)
        return session, tokens

    def flush(self, session: EncodeSession,
              n_acoustic: Optional[int] = None) -> Tuple[EncodeSession, np.ndarray]:
        """Zero-pad the pending partial hop and emit its frame"""
        remainder = session.pending.shape[0]
        streams = self._check_streams(n_acoustic) + (1 if self.wiring.semantic_branch else 0)
        if remainder == 0:
            return session, np.zeros((0, streams), dtype=np.int64)
        padding = PcmBuffer(torch.zeros(self.vc.hop - remainder), self.vc.config.sample_rate_hz)
        return self.encode_step(session, padding, n_acoustic)

    def encode_pcm(self, pcm: PcmBuffer, n_acoustic: Optional[int] = None,
                   chunk_samples: Optional[int] = None) -> TokenMatrix:
        """
        Encode a whole buffer through the streaming path

        Args:
            pcm: Audio at the codec sample rate
            n_acoustic: Keep only the first N RVQ stages
            chunk_samples: Feed the audio in chunks of this size (output is
                identical for any chunking)

        Returns:
            TokenMatrix of ceil(len / hop) frames
        """
        was_training = self.training
        self.eval()
        try:
            session = self.init_encode_session()
            step = chunk_samples or max(len(pcm), 1)
            rows = []
            for start in range(0, len(pcm), step):
                chunk = PcmBuffer(pcm.samples[start:start + step], pcm.sample_rate_hz)
                session, tokens = self.encode_step(session, chunk, n_acoustic)
                rows.append(tokens)
            session, tokens = self.flush(session, n_acoustic)
            rows.append(tokens)
        finally:
            self.train(was_training)

        return TokenMatrix(
            values=np.concatenate(rows, axis=0),
            has_semantic=self.wiring.semantic_branch,
            codebook_size=self.vc.config.acoustic_codebook_size,
            semantic_codebook_size=self.vc.config.semantic_codebook_size,
        )

    # ---------------------------------------------------------------------
    # Streaming decode
    # ---------------------------------------------------------------------

    @property
    def file_bits_per_code(self) -> int:
        """Bits per code a token file written by this codec declares"""
        if self.wiring.semantic_branch:
            return max(self.vc.bits_per_code, self.vc.semantic_bits_per_code)
        return self.vc.bits_per_code

    def check_tokens(self, tokens: TokenMatrix, sample_rate_hz: Optional[int] = None,
                     hop: Optional[int] = None, bits: Optional[int] = None) -> TokenMatrix:
        """
        Check a token matrix (and its file header fields) against this codec

        Returns:
            The tokens re-ranged against the codec's real codebook sizes

        Raises:
            ConfigHashMismatch: if the tokens cannot come from this codec
            TokenOutOfRange: if a code exceeds its codebook
        """
        c = self.vc.config
        if sample_rate_hz is not None and sample_rate_hz != c.sample_rate_hz:
            raise ConfigHashMismatch(f"tokens at {sample_rate_hz} Hz, codec runs at {c.sample_rate_hz} Hz")
        if hop is not None and hop != self.vc.hop:
            raise ConfigHashMismatch(f"token hop {hop}, codec hop {self.vc.hop}")
        if bits is not None and bits != self.file_bits_per_code:
            raise ConfigHashMismatch(f"{bits} bits per code, codec uses {self.file_bits_per_code}")
        if tokens.has_semantic != self.wiring.semantic_branch:
            raise ConfigHashMismatch(
                f"token semantic stream flag {tokens.has_semantic} vs codec {self.wiring.semantic_branch}"
            )

        acoustic = tokens.streams - (1 if tokens.has_semantic else 0)
        if tokens.frames and (acoustic < 1 or acoustic > self.rvq.num_stages):
            raise ConfigHashMismatch(
                f"{acoustic} acoustic streams, codec has {self.rvq.num_stages} stages"
            )
        return TokenMatrix(
            values=tokens.values,
            has_semantic=tokens.has_semantic,
            codebook_size=c.acoustic_codebook_size,
            semantic_codebook_size=c.semantic_codebook_size,
        )

    def init_decode_state(self) -> StreamState:
        return self.graph.init_decode_state()

    @torch.no_grad()
    def decode_step(self, state: StreamState, rows: np.ndarray,
                    has_semantic: Optional[bool] = None) -> Tuple[StreamState, PcmBuffer]:
        """Decode [frames, streams] token rows, one frame at a time"""
        has_semantic = self.wiring.semantic_branch if has_semantic is None else has_semantic
        chunks = []
        for row in np.asarray(rows, dtype=np.int64):
            row = torch.from_numpy(row)
            acoustic = row[1:] if has_semantic else row
            latent = self.graph.from_code(self.rvq.decode(acoustic[None]).to(torch.float32))
            if has_semantic:
                s_q = self.semantic_codebook.lookup(row[:1]).to(torch.float32)
                latent = decouple_recombine(latent, s_q, self.adapter)
            state, pcm = self.graph.decode(state, LatentSequence(latent, self.vc.frame_rate_hz))
            chunks.append(pcm.samples)
        samples = torch.cat(chunks) if chunks else torch.zeros(0)
        return state, PcmBuffer(samples, self.vc.config.sample_rate_hz)

    def decode_tokens(self, tokens: TokenMatrix) -> PcmBuffer:
        """Decode a whole token matrix to frames * hop samples"""
        tokens = self.check_tokens(tokens)
        was_training = self.training
        self.eval()
        try:
            _, pcm = self.decode_step(self.init_decode_state(), tokens.values, tokens.has_semantic)
        finally:
            self.train(was_training)
        return pcm


def build_codec(config: Union[CodecConfig, ValidatedConfig],
                teacher: Optional[SemanticTeacher] = None) -> OmniCodec:
    """Codec with deterministic weights from config.seed"""
    return OmniCodec(config, teacher=teacher)
