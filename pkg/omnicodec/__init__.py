"""
OmniCodec: streaming neural audio codec with a decoupled semantic stream

Signal path:
1. Causal SEANet encoder + causal transformer -> acoustic hidden frames
2. Semantic teacher features -> semantic VQ (stream 0), subtracted via the adapter
3. Residual VQ over what remains (streams 1..N)
4. Recombine, causal transformer + SEANet decoder -> waveform

Everything streams one frame at a time with explicit state.
"""

# Configuration
from .config import (
    CodecConfig,
    LossWeights,
    ValidatedConfig,
    PRESETS,
    preset,
    validate,
    bitrate_bps,
    bits_per_code,
    tokens_per_second_label,
    config_hash,
    load_config,
    save_config,
    apply_env_overrides,
)
from .errors import CodecError

# Value types and reports
from .models import INACTIVE, PcmBuffer, LatentSequence, TokenMatrix, QuantResult, HiddenPair
from .reports import (
    LossReport,
    UtilizationReport,
    ReconFileResult,
    ReconReport,
    format_recon_report,
)

# Model
from .nn_graph import CodecGraph, StreamState, init_params, transformer_pass
from .quantize import Codebook, ResidualVQ, vq_nearest, rvq_quantize, ema_update
from .semantic import DeskTeacher, FileTeacher, SemanticTeacher, ablation_switches
from .codec import OmniCodec, build_codec

# Training
from .checkpoint import load_checkpoint, save_checkpoint, load_codec, save_codec
from .data import SyntheticSpec, synthesize, harmonic_clip
from .train import TrainConfig, Trainer, lr_schedule, overfit_single_clip, run_training

# Evaluation and I/O
from .metrics import mel_distance, mcd, codebook_utilization
from .token_lm import TokenLmConfig, token_ppl
from .evaluation import eval_recon, load_token_corpus
from .token_io import read_tokens, write_tokens, load_tokens, save_tokens, wav_read, wav_write

__version__ = "0.1.0"

__all__ = [
    # Configuration
    "CodecConfig",
    "LossWeights",
    "ValidatedConfig",
    "PRESETS",
    "preset",
    "validate",
    "bitrate_bps",
    "bits_per_code",
    "tokens_per_second_label",
    "config_hash",
    "load_config",
    "save_config",
    "apply_env_overrides",
    "CodecError",
    # Types
    "INACTIVE",
    "PcmBuffer",
    "LatentSequence",
    "TokenMatrix",
    "QuantResult",
    "HiddenPair",
    "LossReport",
    "UtilizationReport",
    "ReconFileResult",
    "ReconReport",
    "format_recon_report",
    # Model
    "CodecGraph",
    "StreamState",
    "init_params",
    "transformer_pass",
    "Codebook",
    "ResidualVQ",
    "vq_nearest",
    "rvq_quantize",
    "ema_update",
    "DeskTeacher",
    "FileTeacher",
    "SemanticTeacher",
    "ablation_switches",
    "OmniCodec",
    "build_codec",
    # Training
    "load_checkpoint",
    "save_checkpoint",
    "load_codec",
    "save_codec",
    "SyntheticSpec",
    "synthesize",
    "harmonic_clip",
    "TrainConfig",
    "Trainer",
    "lr_schedule",
    "overfit_single_clip",
    "run_training",
    # Evaluation and I/O
    "mel_distance",
    "mcd",
    "codebook_utilization",
    "TokenLmConfig",
    "token_ppl",
    "eval_recon",
    "load_token_corpus",
    "read_tokens",
    "write_tokens",
    "load_tokens",
    "save_tokens",
    "wav_read",
    "wav_write",
]
