"""
Codec configuration

Owns the configuration schema, its validation, the flat key=value file
format, the named presets and all frame-rate / bitrate arithmetic.
"""

import hashlib
import json
import math
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

# Load environment variables from .env file
try:
    from dotenv import load_dotenv
    env_path = Path(__file__).parent.parent / '.env'
    load_dotenv(dotenv_path=env_path)
except ImportError:
    # python-dotenv not installed, will fall back to system env vars
    pass

from .errors import NonIntegerHop, ParseError


SEED_ENV_VAR = "OMNICODEC_SEED"


class LossWeights(BaseModel):
    """Weights of every term of the total training objective"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    ac_recon: float = Field(default=15.0, ge=0.0, allow_inf_nan=False)
    se_recon: float = Field(default=1.0, ge=0.0, allow_inf_nan=False)
    commit: float = Field(default=1.0, ge=0.0, allow_inf_nan=False)
    dis: float = Field(default=1.0, ge=0.0, allow_inf_nan=False)
    gen: float = Field(default=1.0, ge=0.0, allow_inf_nan=False)
    fm: float = Field(default=1.0, ge=0.0, allow_inf_nan=False)
    self_guidance: float = Field(default=0.1, ge=0.0, allow_inf_nan=False)


class CodecConfig(BaseModel):
    """Every architectural hyperparameter of the codec"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    # Audio
    sample_rate_hz: int = Field(default=24000, gt=0)
    teacher_sample_rate_hz: int = Field(default=16000, gt=0)
    semantic_frame_rate_hz: float = Field(default=12.5, gt=0.0)

    # SEANet backbone
    seanet_ratios: List[int] = Field(default_factory=lambda: [8, 6, 5, 4])
    extra_downsample: int = Field(default=2, gt=0)
    n_filters: int = Field(default=32, gt=0)
    residual_kernel_size: int = Field(default=7, gt=0)
    hidden_dim: int = Field(default=512, gt=0)

    # Causal transformer
    transformer_layers: int = Field(default=8, gt=0)
    transformer_heads: int = Field(default=8, gt=0)
    transformer_ff_dim: int = Field(default=2048, gt=0)

    # Quantizers
    semantic_codebook_size: int = Field(default=2048, gt=0)
    semantic_dim: int = Field(default=1024, gt=0)
    acoustic_stages: int = Field(default=31, gt=0)
    acoustic_codebook_size: int = Field(default=2048, gt=0)
    acoustic_code_dim: int = Field(default=256, gt=0)
    quantizer_dropout: bool = True
    codebook_decay: float = Field(default=0.99, gt=0.0, lt=1.0)
    codebook_epsilon: float = Field(default=1e-5, gt=0.0)
    dead_code_threshold: float = Field(default=0.1, ge=0.0)

    # Branch wiring (ablation switches)
    semantic_branch: bool = True
    adapter: Literal["learned", "fixed_slice"] = "learned"
    self_guidance: bool = True

    # Discriminator bank
    discriminator_windows: List[int] = Field(default_factory=lambda: [512, 1024, 2048])
    discriminator_channels: int = Field(default=32, gt=0)

    loss_weights: LossWeights = Field(default_factory=LossWeights)
    seed: int = 0

    @field_validator("seanet_ratios", "discriminator_windows")
    @classmethod
    def _positive_list(cls, value: List[int]) -> List[int]:
        if not value or any(v <= 0 for v in value):
            raise ValueError("must be a non-empty list of positive integers")
        return value


class ValidatedConfig(BaseModel):
    """A config plus its derived fields; immutable and shareable"""

    model_config = ConfigDict(frozen=True)

    config: CodecConfig
    hop: int
    frame_rate_hz: float
    bits_per_code: int
    semantic_bits_per_code: int
    total_streams: int
    semantic_stride: int   # teacher frames pooled into one codec frame
    teacher_hop: int       # teacher-rate samples per codec frame

    @property
    def acoustic_streams(self) -> int:
        return self.config.acoustic_stages

    @property
    def has_semantic(self) -> bool:
        return self.config.semantic_branch


# =========================================================================
# Arithmetic
# =========================================================================

def bits_per_code(codebook_size: int) -> int:
    """ceil(log2(K)), never below one bit"""
    if codebook_size <= 0:
        raise ValueError(f"codebook size must be positive, got {codebook_size}")
    return max(1, (codebook_size - 1).bit_length())


def bitrate_bps(frame_rate_hz: float, total_streams: int, bits_per_code: int) -> float:
    """
    Nominal bitrate of a token stream

    Args:
        frame_rate_hz: Frames per second per stream
        total_streams: Number of parallel token streams
        bits_per_code: Bits needed per token

    Returns:
        frame_rate × streams × bits, unrounded
    """
    if frame_rate_hz < 0 or total_streams < 0 or bits_per_code < 0:
        raise ValueError("bitrate arguments must be non-negative")
    return frame_rate_hz * total_streams * bits_per_code


def tokens_per_second_label(frame_rate_hz: float, total_streams: int) -> str:
    """TPS as printed in reports, e.g. '12.5×16'"""
    return f"{frame_rate_hz:g}×{total_streams}"


def validate(config: Union[CodecConfig, ValidatedConfig]) -> ValidatedConfig:
    """
    Validate a config and populate its derived fields

    Args:
        config: Raw or already validated config

    Returns:
        ValidatedConfig with hop, frame rate and bits per code filled in

    Raises:
        NonIntegerHop: if the hop does not yield an exact frame rate, or the
            semantic teacher frames cannot be aligned to codec frames
    """
    if isinstance(config, ValidatedConfig):
        config = config.config

    hop = math.prod(config.seanet_ratios) * config.extra_downsample

    # Frame rate must be exact to 0.01 Hz (12.5 and 6.25 Hz pass, 14.2857… fails)
    if (config.sample_rate_hz * 100) % hop != 0:
        raise NonIntegerHop(
            f"hop {hop} (ratios {config.seanet_ratios} × {config.extra_downsample}) "
            f"does not give an exact frame rate at {config.sample_rate_hz} Hz"
        )
    frame_rate = config.sample_rate_hz / hop

    if config.hidden_dim % config.transformer_heads != 0:
        raise ValueError(
            f"hidden_dim {config.hidden_dim} not divisible by "
            f"{config.transformer_heads} attention heads"
        )

    semantic_stride = 1
    teacher_hop = 0
    if config.semantic_branch:
        teacher_frame = Fraction(config.sample_rate_hz) / Fraction(str(config.semantic_frame_rate_hz))
        stride = Fraction(hop) / teacher_frame
        if stride.denominator != 1 or stride < 1:
            raise NonIntegerHop(
                f"codec hop {hop} is not a whole number of semantic frames "
                f"({float(teacher_frame):g} samples each)"
            )
        semantic_stride = int(stride)
        teacher_samples = Fraction(hop, semantic_stride) * config.teacher_sample_rate_hz / config.sample_rate_hz
        if teacher_samples.denominator != 1:
            raise NonIntegerHop(
                f"semantic frame is not a whole number of samples at "
                f"{config.teacher_sample_rate_hz} Hz"
            )
        teacher_hop = int(teacher_samples)

    return ValidatedConfig(
        config=config,
        hop=hop,
        frame_rate_hz=frame_rate,
        bits_per_code=bits_per_code(config.acoustic_codebook_size),
        semantic_bits_per_code=bits_per_code(config.semantic_codebook_size),
        total_streams=config.acoustic_stages + (1 if config.semantic_branch else 0),
        semantic_stride=semantic_stride,
        teacher_hop=teacher_hop,
    )


def config_hash(config: Union[CodecConfig, ValidatedConfig]) -> str:
    """sha256 of the architecture-defining fields (weights and seed excluded)"""
    if isinstance(config, ValidatedConfig):
        config = config.config
    payload = config.model_dump(exclude={"loss_weights", "seed"})
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def count_summary(vc: ValidatedConfig) -> Dict[str, object]:
    """Key derived numbers for display"""
    return {
        'frame_rate_hz': vc.frame_rate_hz,
        'hop': vc.hop,
        'streams': vc.total_streams,
        'tps': tokens_per_second_label(vc.frame_rate_hz, vc.total_streams),
        'bitrate_bps': bitrate_bps(vc.frame_rate_hz, vc.total_streams, vc.bits_per_code),
    }


# =========================================================================
# Presets
# =========================================================================

PRESETS: Dict[str, Dict[str, object]] = {
    # 12.5 Hz family
    "omnicodec-32l": {"acoustic_stages": 31},
    "omnicodec-16l": {"acoustic_stages": 15},
    "omnicodec-8l": {"acoustic_stages": 7},
    # 6.25 Hz (flash) family
    "omnicodec-f-32l": {"seanet_ratios": [12, 8, 5, 4], "acoustic_stages": 31},
    "omnicodec-f-16l": {"seanet_ratios": [12, 8, 5, 4], "acoustic_stages": 15},
    # CPU-seconds scale, for tests and smoke runs
    "desk-tiny": {
        "seanet_ratios": [4, 3],
        "semantic_frame_rate_hz": 1000.0,
        "n_filters": 4,
        "hidden_dim": 32,
        "transformer_layers": 1,
        "transformer_heads": 2,
        "transformer_ff_dim": 64,
        "semantic_codebook_size": 64,
        "semantic_dim": 32,
        "acoustic_stages": 4,
        "acoustic_codebook_size": 64,
        "acoustic_code_dim": 16,
        "discriminator_windows": [64, 128, 256],
        "discriminator_channels": 8,
    },
}


def preset(name: str, **overrides) -> CodecConfig:
    """
    Build a config from a named preset

    Args:
        name: One of PRESETS
        **overrides: Extra field values applied on top

    Returns:
        CodecConfig
    """
    if name not in PRESETS:
        raise ValueError(f"Unknown preset '{name}'. Available: {', '.join(sorted(PRESETS))}")
    values = dict(PRESETS[name])
    values.update(overrides)
    return CodecConfig(**values)


# =========================================================================
# key=value file format
# =========================================================================

_LIST_FIELDS = {"seanet_ratios", "discriminator_windows"}


def read_key_values(path: Union[str, Path]) -> List[Tuple[str, str, int]]:
    """
    Parse a flat key=value file

    Args:
        path: Config file path

    Returns:
        List of (key, raw value, line number)

    Raises:
        ParseError: on a line without '=', an empty key or an empty value
    """
    entries = []
    text = Path(path).read_text(encoding="utf-8")

    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue

        if "=" not in line:
            raise ParseError("Expected 'key = value'", line_no, 1)

        eq = line.index("=")
        key = line[:eq].strip()
        value = line[eq + 1:].strip()

        if not key:
            raise ParseError("Missing key before '='", line_no, 1)
        if not value:
            raise ParseError(f"Missing value for '{key}'", line_no, eq + 2)

        entries.append((key, value, line_no))

    return entries


def _convert(field: str, value: str) -> object:
    if field in _LIST_FIELDS:
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def config_from_entries(entries: List[Tuple[str, str, int]]) -> CodecConfig:
    """Build a CodecConfig from parsed entries; unknown keys are warned about"""
    base: Dict[str, object] = {}
    weights: Dict[str, object] = {}
    lines: Dict[str, int] = {}

    for key, value, line_no in entries:
        if key == "preset":
            if value not in PRESETS:
                raise ParseError(f"Unknown preset '{value}'", line_no, 1)
            base = {**dict(PRESETS[value]), **base}
            continue

        if key.startswith("train."):
            # Belongs to TrainConfig
            continue

        if key.startswith("loss_weights."):
            name = key.split(".", 1)[1]
            if name not in LossWeights.model_fields:
                print(f"⚠️  Unknown config key '{key}' (line {line_no}) ignored", file=sys.stderr)
                continue
            weights[name] = value
            lines["loss_weights"] = line_no
            continue

        if key not in CodecConfig.model_fields or key == "loss_weights":
            print(f"⚠️  Unknown config key '{key}' (line {line_no}) ignored", file=sys.stderr)
            continue

        base[key] = _convert(key, value)
        lines[key] = line_no

    if weights:
        base["loss_weights"] = weights

    try:
        return CodecConfig(**base)
    except ValidationError as e:
        error = e.errors()[0]
        field = str(error["loc"][0]) if error["loc"] else ""
        raise ParseError(
            f"Invalid value for '{field}': {error['msg']}",
            lines.get(field, 0),
            1,
        ) from e


def load_config(path: Union[str, Path]) -> CodecConfig:
    """
    Load a config file; absent keys take their defaults

    Args:
        path: Path to a key=value config file

    Returns:
        CodecConfig (not validated)
    """
    return config_from_entries(read_key_values(path))


def apply_env_overrides(config: CodecConfig) -> CodecConfig:
    """Apply OMNICODEC_SEED from the environment (or .env) if set"""
    seed = os.getenv(SEED_ENV_VAR)
    if seed is None or not seed.strip():
        return config
    try:
        return config.model_copy(update={"seed": int(seed)})
    except ValueError:
        raise ValueError(f"{SEED_ENV_VAR} must be an integer, got '{seed}'")


def save_config(config: CodecConfig, path: Union[str, Path]) -> None:
    """Write a config in the key=value format (round-trips through load_config)"""
    lines = ["# omnicodec configuration"]
    for name, value in config.model_dump().items():
        if name == "loss_weights":
            for w_name, w_value in value.items():
                lines.append(f"loss_weights.{w_name} = {w_value!r}")
        elif isinstance(value, list):
            lines.append(f"{name} = {','.join(str(v) for v in value)}")
        elif isinstance(value, bool):
            lines.append(f"{name} = {'true' if value else 'false'}")
        else:
            lines.append(f"{name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
