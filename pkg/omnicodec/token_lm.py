"""
Token language model and the perplexity protocol.

A small decoder-only model predicts one token stream from its own
history. ppl0 scores stream 0 (semantic when present); ppl_mean_8 trains
one model per acoustic stream for the first eight and averages.
"""

import math
import sys
from typing import List, Literal, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor, nn
from torch.nn import functional as F

from .errors import EmptyCorpus, InsufficientStreams
from .models import INACTIVE, TokenMatrix
from .transformer import CausalTransformer


PplMode = Literal["ppl0", "ppl_mean_8"]
MEAN_STREAMS = 8
IGNORE = -100


class TokenLmConfig(BaseModel):
    """Token LM size and training knobs"""

    model_config = ConfigDict(frozen=True)

    layers: int = Field(default=4, gt=0)
    dim: int = Field(default=256, gt=0)
    heads: int = Field(default=4, gt=0)
    ff_dim: int = Field(default=1024, gt=0)
    context: int = Field(default=256, gt=0)

    steps: int = Field(default=500, ge=0)
    batch_size: int = Field(default=16, gt=0)
    lr: float = Field(default=3e-4, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    seed: int = 0
    log_every: int = Field(default=0, ge=0)


class TokenLM(nn.Module):
    """
    Decoder-only model over one stream's codes

    The vocabulary is the codebook plus a begin-of-sequence symbol (index K).
    The output head starts at zero, so an untrained model predicts uniformly.
    """

    def __init__(self, vocab_size: int, config: TokenLmConfig):
        super().__init__()
        self.vocab_size = vocab_size
        self.bos = vocab_size
        self.embed = nn.Embedding(vocab_size + 1, config.dim)
        self.transformer = CausalTransformer(config.dim, config.heads, config.layers, config.ff_dim)
        self.norm = nn.LayerNorm(config.dim)
        self.head = nn.Linear(config.dim, vocab_size)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, tokens: Tensor) -> Tensor:
        """[B, T] token ids (BOS allowed) -> [B, T, vocab] next-token logits"""
        return self.head(self.norm(self.transformer(self.embed(tokens))))


def _stream_sequences(corpus: Sequence[TokenMatrix], stream: int) -> List[np.ndarray]:
    out = []
    for matrix in corpus:
        column = matrix.values[:, stream]
        column = column[column != INACTIVE]
        if column.size:
            out.append(column.astype(np.int64))
    return out


def _with_bos(targets: np.ndarray, bos: int) -> np.ndarray:
    return np.concatenate([[bos], targets[:-1]])


def _training_batch(sequences: List[np.ndarray], batch_size: int, context: int, bos: int,
                    rng: np.random.Generator):
    lengths = np.array([len(s) for s in sequences], dtype=np.float64)
    picks = rng.choice(len(sequences), size=batch_size, p=lengths / lengths.sum())

    inputs = np.zeros((batch_size, context), dtype=np.int64)
    targets = np.full((batch_size, context), IGNORE, dtype=np.int64)
    for row, pick in enumerate(picks):
        seq = sequences[pick]
        n = min(context, len(seq))
        start = int(rng.integers(0, len(seq) - n + 1))
        window = seq[start:start + n]
        inputs[row, :n] = _with_bos(window, bos)
        targets[row, :n] = window
    return torch.from_numpy(inputs), torch.from_numpy(targets)


def train_token_lm(sequences: List[np.ndarray], vocab_size: int, config: TokenLmConfig) -> TokenLM:
    """
    Fit a TokenLM on token sequences

    Raises:
        EmptyCorpus: if there is nothing to train on
    """
    if not sequences:
        raise EmptyCorpus("no training tokens")

    torch.manual_seed(config.seed)
    model = TokenLM(vocab_size, config)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    model.train()
    for step in range(config.steps):
        inputs, targets = _training_batch(sequences, config.batch_size, config.context, model.bos, rng)
        logits = model(inputs)
        loss = F.cross_entropy(logits.reshape(-1, vocab_size), targets.reshape(-1), ignore_index=IGNORE)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if config.log_every and (step + 1) % config.log_every == 0:
            print(f"  token-lm step {step + 1}/{config.steps}: nll={loss.item():.4f}", file=sys.stderr)

    model.eval()
    return model


@torch.no_grad()
def evaluate_ppl(model: TokenLM, sequences: List[np.ndarray], context: int) -> float:
    """
    exp(mean negative log-likelihood) over every token

    Each sequence is scored in consecutive windows of `context` tokens, each
    window starting from BOS.

    Raises:
        EmptyCorpus: if there is nothing to score
    """
    total_nll = 0.0
    count = 0
    for seq in sequences:
        for start in range(0, len(seq), context):
            window = seq[start:start + context]
            inputs = torch.from_numpy(_with_bos(window, model.bos))[None]
            logits = model(inputs)[0].to(torch.float64)
            total_nll += float(F.cross_entropy(logits, torch.from_numpy(window), reduction="sum"))
            count += len(window)
    if count == 0:
        raise EmptyCorpus("no evaluation tokens")
    return math.exp(total_nll / count)


def stream_ppl(train: Sequence[TokenMatrix], eval_corpus: Sequence[TokenMatrix], stream: int,
               vocab_size: int, config: TokenLmConfig) -> float:
    """Train on one stream of the training corpus, score the same stream of the eval corpus"""
    train_sequences = _stream_sequences(train, stream)
    eval_sequences = _stream_sequences(eval_corpus, stream)
    if not train_sequences:
        raise EmptyCorpus(f"training corpus has no tokens in stream {stream}")
    if not eval_sequences:
        raise EmptyCorpus(f"evaluation corpus has no tokens in stream {stream}")
    model = train_token_lm(train_sequences, vocab_size, config)
    return evaluate_ppl(model, eval_sequences, config.context)


def token_ppl(train: Sequence[TokenMatrix], eval_corpus: Sequence[TokenMatrix],
              mode: PplMode = "ppl0", config: TokenLmConfig = TokenLmConfig()) -> float:
    """
    Perplexity of a token corpus under the chosen protocol

    Args:
        train: Token matrices the LM trains on
        eval_corpus: Disjoint token matrices it is scored on
        mode: ppl0 (stream 0) or ppl_mean_8 (first eight acoustic streams)
        config: LM size and training knobs

    Raises:
        EmptyCorpus: if either corpus has no frames
        InsufficientStreams: ppl_mean_8 with fewer than eight acoustic streams
    """
    train, eval_corpus = list(train), list(eval_corpus)
    if not any(m.frames for m in train):
        raise EmptyCorpus("training corpus is empty")
    if not any(m.frames for m in eval_corpus):
        raise EmptyCorpus("evaluation corpus is empty")

    reference = train[0]
    limits = reference.limits()

    if mode == "ppl0":
        return stream_ppl(train, eval_corpus, 0, int(limits[0]), config)

    if mode != "ppl_mean_8":
        raise ValueError(f"Unknown perplexity mode '{mode}'")

    first = 1 if reference.has_semantic else 0
    acoustic = reference.streams - first
    if acoustic < MEAN_STREAMS:
        raise InsufficientStreams(f"ppl_mean_8 needs {MEAN_STREAMS} acoustic streams, corpus has {acoustic}")

    values = [
        stream_ppl(train, eval_corpus, first + s, int(limits[first + s]), config)
        for s in range(MEAN_STREAMS)
    ]
    return float(np.mean(values))
