"""
Vector quantization primitives.

Codebooks are maintained by exponential moving averages (no gradient ever
reaches a codeword). The residual stack quantizes x stage by stage, each
stage taking what the previous ones left over.
"""

from typing import List, Optional, Tuple, Union

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .errors import DimMismatch, EmptyBatch, InvalidStageCount, NotInTrainingMode, ShapeMismatch
from .models import INACTIVE, LatentSequence, QuantResult


# Rows × codewords × dims processed per distance chunk
_DISTANCE_CHUNK = 1 << 22


class Codebook(nn.Module):
    """
    K code vectors of size D with their EMA statistics

    All state lives in buffers so it travels with state_dict() into
    checkpoints. `initialized` flips once the first training batch has
    replaced the random start vectors.
    """

    def __init__(self, codebook_size: int, dim: int, decay: float = 0.99, epsilon: float = 1e-5,
                 generator: Optional[torch.Generator] = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        if not 0.0 < decay < 1.0 and decay != 0.0:
            raise ValueError(f"decay must be in [0, 1), got {decay}")
        self.codebook_size = codebook_size
        self.dim = dim
        self.decay = decay
        self.epsilon = epsilon

        vectors = torch.randn(codebook_size, dim, generator=generator, dtype=dtype)
        self.register_buffer("vectors", vectors)
        self.register_buffer("ema_cluster_size", torch.ones(codebook_size, dtype=dtype))
        self.register_buffer("ema_vector_sum", vectors.clone())
        self.register_buffer("initialized", torch.tensor(False))

    def distances(self, x: Tensor) -> Tensor:
        """Squared euclidean distances [N, K], computed as explicit differences"""
        vectors = self.vectors.to(torch.float64)
        x = x.to(torch.float64)
        rows = max(1, _DISTANCE_CHUNK // max(1, self.codebook_size * self.dim))
        parts = [
            ((chunk[:, None, :] - vectors[None, :, :]) ** 2).sum(-1)
            for chunk in x.split(rows)
        ]
        if not parts:
            return x.new_zeros(0, self.codebook_size)
        return torch.cat(parts)

    @torch.no_grad()
    def nearest(self, x: Tensor) -> Tensor:
        """Index of the closest codeword per row of [N, D]; ties go to the smaller index"""
        if x.shape[-1] != self.dim:
            raise DimMismatch(f"expected vectors of dim {self.dim}, got {x.shape[-1]}")
        if x.shape[0] == 0:
            return torch.zeros(0, dtype=torch.long, device=x.device)
        return self.distances(x).argmin(dim=-1)

    def lookup(self, indices: Tensor) -> Tensor:
        return F.embedding(indices, self.vectors)

    @torch.no_grad()
    def init_from_batch(self, x: Tensor, generator: Optional[torch.Generator] = None) -> None:
        """
        Seed every codeword from the batch the first time training sees data

        Rows are drawn with `generator`; None falls back to the global torch RNG.
        """
        if bool(self.initialized) or x.shape[0] == 0:
            return
        n = x.shape[0]
        if n >= self.codebook_size:
            picks = torch.randperm(n, generator=generator)[:self.codebook_size]
        else:
            picks = torch.randint(0, n, (self.codebook_size,), generator=generator)
        chosen = x[picks].to(self.vectors.dtype)
        self.vectors.copy_(chosen)
        self.ema_vector_sum.copy_(chosen)
        self.ema_cluster_size.fill_(1.0)
        self.initialized.fill_(True)


def vq_nearest(codebook: Codebook, x: Tensor) -> Tuple[int, Tensor]:
    """
    Nearest codeword of a single vector

    Args:
        codebook: Codebook to search
        x: [D] vector

    Returns:
        (index, codeword)
    """
    index = int(codebook.nearest(x.reshape(1, -1))[0])
    return index, codebook.vectors[index]


@torch.no_grad()
def ema_update(codebook: Codebook, vectors: Tensor, indices: Tensor) -> Codebook:
    """
    One EMA step from a batch of assignments

    cluster_size <- decay * cluster_size + (1 - decay) * count
    vector_sum   <- decay * vector_sum + (1 - decay) * sum
    vectors      <- vector_sum / laplace(cluster_size)

    where laplace(c)_k = (c_k + eps) / (n + K * eps) * n and n = sum(c).

    Args:
        codebook: Codebook in training mode, updated in place
        vectors: [N, D] assigned vectors
        indices: [N] codeword index of each vector

    Raises:
        NotInTrainingMode: if the codebook is in eval mode
    """
    if not codebook.training:
        raise NotInTrainingMode("EMA codebook updates require training mode")

    dtype = codebook.vectors.dtype
    K = codebook.codebook_size
    decay = codebook.decay

    counts = torch.bincount(indices, minlength=K).to(dtype)
    sums = torch.zeros_like(codebook.ema_vector_sum).index_add_(0, indices, vectors.to(dtype))

    cluster_size = decay * codebook.ema_cluster_size + (1 - decay) * counts
    vector_sum = decay * codebook.ema_vector_sum + (1 - decay) * sums

    n = cluster_size.sum()
    smoothed = (cluster_size + codebook.epsilon) / (n + K * codebook.epsilon) * n

    codebook.ema_cluster_size.copy_(cluster_size)
    codebook.ema_vector_sum.copy_(vector_sum)
    codebook.vectors.copy_(vector_sum / smoothed[:, None])
    return codebook


def quantizer_dropout_schedule(rng, stages: int) -> int:
    """
    Number of active RVQ stages for one training example

    Half the time all stages; otherwise uniform over 1..stages.

    Args:
        rng: numpy Generator (anything with random() and integers())
        stages: Total stages in the stack
    """
    if stages < 1:
        raise InvalidStageCount(f"stack must have at least one stage, got {stages}")
    if rng.random() < 0.5:
        return stages
    return int(rng.integers(1, stages + 1))


def commitment_loss(x: Tensor, quantized: Tensor) -> Tensor:
    """Mean over frames of the squared distance to sg(quantized), summed over dims"""
    if x.shape != quantized.shape:
        raise ShapeMismatch(f"commitment inputs differ: {tuple(x.shape)} vs {tuple(quantized.shape)}")
    if x.numel() == 0:
        return x.new_zeros(())
    return ((x - quantized.detach()) ** 2).sum(-1).mean()


@torch.no_grad()
def dead_code_reseed(codebook: Codebook, batch: Tensor, threshold: float,
                     rng: np.random.Generator) -> Codebook:
    """
    Replace codes whose EMA cluster size fell below threshold

    Each dead code becomes a batch vector drawn by rng; its cluster size is
    reset to 1 and its vector sum to the new vector.

    Raises:
        NotInTrainingMode: if the codebook is in eval mode
        EmptyBatch: if codes are dead but the batch has no vectors
    """
    if not codebook.training:
        raise NotInTrainingMode("dead-code reseeding requires training mode")

    dead = torch.nonzero(codebook.ema_cluster_size < threshold).flatten()
    if dead.numel() == 0:
        return codebook
    if batch.shape[0] == 0:
        raise EmptyBatch(f"{dead.numel()} dead codes but no batch vectors to reseed from")

    picks = torch.as_tensor(rng.integers(0, batch.shape[0], size=dead.numel()), dtype=torch.long)
    new_vectors = batch[picks].to(codebook.vectors.dtype)
    codebook.vectors[dead] = new_vectors
    codebook.ema_vector_sum[dead] = new_vectors
    codebook.ema_cluster_size[dead] = 1.0
    return codebook


class ResidualVQ(nn.Module):
    """Stack of EMA codebooks sharing K and D"""

    def __init__(self, stages: int, codebook_size: int, dim: int, decay: float = 0.99,
                 epsilon: float = 1e-5, generator: Optional[torch.Generator] = None):
        super().__init__()
        if stages < 1:
            raise InvalidStageCount(f"stack must have at least one stage, got {stages}")
        self.code_dim = dim
        self.codebook_size = codebook_size
        self.generator = generator
        self.stages = nn.ModuleList([
            Codebook(codebook_size, dim, decay, epsilon, generator=generator)
            for _ in range(stages)
        ])

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def _active_counts(self, n_active: Union[int, Tensor], batch: int) -> Tensor:
        counts = torch.as_tensor(n_active, dtype=torch.long)
        if counts.dim() == 0:
            counts = counts.expand(batch)
        if counts.numel() and (int(counts.min()) < 1 or int(counts.max()) > self.num_stages):
            raise InvalidStageCount(
                f"active stages must be in 1..{self.num_stages}, got {counts.tolist()}"
            )
        return counts

    @torch.no_grad()
    def _quantize(self, x: Tensor, n_active: Union[int, Tensor]):
        B, T, D = x.shape
        counts = self._active_counts(n_active, B)

        residual = x.detach().clone()
        quantized = torch.zeros_like(residual)
        indices = torch.full((B, T, self.num_stages), INACTIVE, dtype=torch.long)
        energies = []
        stage_inputs = []

        for s, codebook in enumerate(self.stages):
            active = (counts > s)[:, None].expand(B, T)
            rows = residual[active]
            stage_inputs.append(rows)

            if rows.shape[0]:
                if self.training:
                    codebook.init_from_batch(rows, self.generator)
                idx = codebook.nearest(rows)
                q = codebook.lookup(idx).to(residual.dtype)
                if self.training:
                    ema_update(codebook, rows, idx)
                indices[:, :, s][active] = idx
                stage_q = torch.zeros_like(residual)
                stage_q[active] = q
                residual = residual - stage_q
                quantized = quantized + stage_q

            energies.append((residual ** 2).sum(-1).mean() if T else residual.new_zeros(()))

        energy = torch.stack(energies) if energies else x.new_zeros(0)
        return indices, quantized, energy, stage_inputs

    def forward(self, x: Tensor, n_active: Union[int, Tensor, None] = None) -> QuantResult:
        """
        Quantize [B, T, D] (or [T, D]) latents

        Args:
            x: Latents in code space
            n_active: Active stages, one int or one per batch row; None = all

        Returns:
            QuantResult; `quantized` carries no gradient, apply the
            straight-through estimator at the call site
        """
        if x.shape[-1] != self.code_dim:
            raise DimMismatch(f"expected code dim {self.code_dim}, got {x.shape[-1]}")
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        if n_active is None:
            n_active = self.num_stages

        indices, quantized, energy, stage_inputs = self._quantize(x, n_active)
        commit = commitment_loss(x, quantized)

        if squeeze:
            indices, quantized = indices[0], quantized[0]
        return QuantResult(indices, quantized, commit, energy, stage_inputs)

    def decode(self, indices: Tensor) -> Tensor:
        """Sum of the codewords selected by [..., S] indices; INACTIVE entries add nothing"""
        if indices.shape[-1] > self.num_stages:
            raise InvalidStageCount(
                f"{indices.shape[-1]} stages given, stack has {self.num_stages}"
            )
        out = torch.zeros(*indices.shape[:-1], self.code_dim, dtype=self.stages[0].vectors.dtype)
        for s in range(indices.shape[-1]):
            idx = indices[..., s]
            active = idx != INACTIVE
            q = self.stages[s].lookup(idx.clamp(min=0))
            out = out + q * active[..., None].to(q.dtype)
        return out


def rvq_quantize(stack: ResidualVQ, x: Union[LatentSequence, Tensor], n_active: int) -> QuantResult:
    """Quantize one latent sequence [frames, code_dim] with the first n_active stages"""
    data = x.data if isinstance(x, LatentSequence) else x
    if not 1 <= n_active <= stack.num_stages:
        raise InvalidStageCount(f"n_active must be in 1..{stack.num_stages}, got {n_active}")
    return stack(data, n_active)
