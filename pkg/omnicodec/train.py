"""
Training harness

Trainer owns the codec, the discriminator bank, both AdamW optimizers and
the random state. One train_step is one generator update plus (once the
adversarial phase has started) one discriminator update, followed by
dead-code reseeding of every codebook.
"""

import math
import sys
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor

from .checkpoint import Checkpoint, codec_tensors, load_checkpoint, save_checkpoint
from .codec import OmniCodec
from .config import CodecConfig, ValidatedConfig, read_key_values, validate
from .data import SyntheticSpec, build_dataset, make_loader
from .errors import ClipTooShort, EmptyBatch, IoError
from .losses import GENERATOR_TERMS, DiscriminatorBank, MultiScaleMelLoss, adversarial_losses, total_loss
from .models import PcmBuffer
from .nn_graph import initialize_module
from .quantize import dead_code_reseed, quantizer_dropout_schedule
from .reports import LossReport
from .semantic import SemanticTeacher


DataSource = Literal["synthetic", "wav_dir", "single_clip"]

MIN_CLIP_SECONDS = 0.5
MAX_SEGMENT_SECONDS = 10.0


class TrainConfig(BaseModel):
    """Optimization and data settings (desk-scale defaults)"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    steps: int = Field(default=1000, ge=0)
    batch_size: int = Field(default=4, gt=0)
    segment_seconds: float = Field(default=2.0, gt=0.0, le=MAX_SEGMENT_SECONDS)

    lr_peak: float = Field(default=1e-4, ge=0.0)
    warmup_steps: int = Field(default=250, ge=0)
    decay_steps: int = Field(default=5000, ge=0)
    betas: List[float] = Field(default_factory=lambda: [0.9, 0.99])
    weight_decay: float = Field(default=0.01, ge=0.0)
    grad_accum: int = Field(default=1, gt=0)

    adversarial_start: int = Field(default=500, ge=0)
    reseed_dead_codes: bool = True

    checkpoint_every: int = Field(default=500, ge=0)
    log_every: int = Field(default=50, ge=0)

    data_source: DataSource = "synthetic"
    data_path: Optional[str] = None
    families: List[str] = Field(default_factory=lambda: list(SyntheticSpec().families))
    num_workers: int = Field(default=0, ge=0)


def load_train_config(path: Union[str, Path], **overrides) -> TrainConfig:
    """
    Read the train.* keys of a config file

    Args:
        path: key=value config file (the same file the codec config lives in)
        **overrides: Values that win over the file (CLI flags)
    """
    values: Dict[str, object] = {}
    for key, value, line_no in read_key_values(path):
        if not key.startswith("train."):
            continue
        name = key.split(".", 1)[1]
        if name not in TrainConfig.model_fields:
            print(f"⚠️  Unknown config key '{key}' (line {line_no}) ignored", file=sys.stderr)
            continue
        if name in ("betas", "families"):
            values[name] = [item.strip() for item in value.split(",") if item.strip()]
        else:
            values[name] = value
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """
    Linear warmup to lr_peak, cosine decay to 0, then 0

    lr(warmup_steps) == lr_peak; lr(warmup_steps + decay_steps / 2) == lr_peak / 2.
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    t = step - cfg.warmup_steps
    if cfg.decay_steps == 0:
        return cfg.lr_peak if t == 0 else 0.0
    if t >= cfg.decay_steps:
        return 0.0
    return cfg.lr_peak * (1 + math.cos(math.pi * t / cfg.decay_steps)) / 2


# =========================================================================
# Trainer
# =========================================================================

def _as_batch(batch: Union[Tensor, Sequence[PcmBuffer]]) -> Tensor:
    if isinstance(batch, Tensor):
        return batch[None] if batch.dim() == 1 else batch
    clips = [b.samples.to(torch.float32) for b in batch]
    length = max((len(c) for c in clips), default=0)
    out = torch.zeros(len(clips), length)
    for row, clip in enumerate(clips):
        out[row, :len(clip)] = clip
    return out


class Trainer:
    """Mutable training state: model, discriminators, optimizers, RNGs, step"""

    def __init__(self, config: Union[CodecConfig, ValidatedConfig], train_config: TrainConfig = TrainConfig(),
                 teacher: Optional[SemanticTeacher] = None):
        self.vc = validate(config)
        self.config = self.vc.config
        self.train_config = train_config
        self.weights = self.config.loss_weights

        torch.manual_seed(self.config.seed)
        self.codec = OmniCodec(self.vc, teacher=teacher)
        self.disc = DiscriminatorBank(self.config.discriminator_windows, self.config.discriminator_channels)
        initialize_module(self.disc, torch.Generator().manual_seed(self.config.seed + 1))
        self.mel_loss = MultiScaleMelLoss(self.config.sample_rate_hz)

        betas = tuple(float(b) for b in train_config.betas)
        self.opt_g = torch.optim.AdamW(self.codec.parameters(), lr=0.0, betas=betas,
                                       weight_decay=train_config.weight_decay)
        self.opt_d = torch.optim.AdamW(self.disc.parameters(), lr=0.0, betas=betas,
                                       weight_decay=train_config.weight_decay)
        self.rng = np.random.default_rng(self.config.seed)
        self.step = 0

        self.codec.train()
        self.disc.train()

    # ---------------------------------------------------------------------

    def adversarial_active(self, step: Optional[int] = None) -> bool:
        step = self.step if step is None else step
        weighted = self.weights.gen > 0 or self.weights.fm > 0 or self.weights.dis > 0
        return weighted and step >= self.train_config.adversarial_start

    def _active_stages(self, rows: int) -> Optional[Tensor]:
        if not self.config.quantizer_dropout:
            return None
        stages = self.codec.rvq.num_stages
        return torch.tensor([quantizer_dropout_schedule(self.rng, stages) for _ in range(rows)])

    def _set_lr(self, lr: float) -> None:
        for optimizer in (self.opt_g, self.opt_d):
            for group in optimizer.param_groups:
                group["lr"] = lr

    def train_step(self, batch: Union[Tensor, Sequence[PcmBuffer]]) -> LossReport:
        """
        One generator update and, in the adversarial phase, one discriminator update

        Args:
            batch: [B, T] audio or a list of PcmBuffers

        Returns:
            LossReport for this step

        Raises:
            NonFiniteLoss: naming the first non-finite term
        """
        wav = _as_batch(batch).to(torch.float32)
        lr = lr_schedule(self.step, self.train_config)
        self._set_lr(lr)
        adversarial = self.adversarial_active()
        accum = min(self.train_config.grad_accum, max(1, wav.shape[0]))

        self.codec.train()
        self.opt_g.zero_grad()
        self.opt_d.zero_grad()

        sums: Dict[str, float] = {}
        generator_total = 0.0
        discriminator_total = 0.0
        stage_rows: List[List[Tensor]] = [[] for _ in range(self.codec.rvq.num_stages)]
        semantic_rows: List[Tensor] = []

        for micro in torch.chunk(wav, accum):
            out = self.codec(micro, self._active_stages(micro.shape[0]))

            parts = dict(out.parts)
            parts["ac_recon"] = self.mel_loss(out.target, out.x_hat, tolerance=self.codec.vc.hop)
            if adversarial:
                parts["dis"], parts["gen"], parts["fm"] = adversarial_losses(self.disc, out.target, out.x_hat)

            gen_loss, dis_loss = total_loss(parts, self.weights)
            if isinstance(gen_loss, Tensor) and gen_loss.requires_grad:
                (gen_loss / accum).backward()
            if adversarial and isinstance(dis_loss, Tensor) and dis_loss.requires_grad:
                (dis_loss / accum).backward()

            for name, value in parts.items():
                sums[name] = sums.get(name, 0.0) + float(value) / accum
            generator_total += float(gen_loss) / accum
            discriminator_total += float(dis_loss) / accum

            for s, rows in enumerate(out.stage_inputs):
                stage_rows[s].append(rows)
            if out.semantic_inputs is not None:
                semantic_rows.append(out.semantic_inputs)

        self.opt_g.step()
        if adversarial:
            self.opt_d.step()

        if self.train_config.reseed_dead_codes:
            self._reseed(stage_rows, semantic_rows)

        order = [t for t in GENERATOR_TERMS if t in sums] + (["dis"] if "dis" in sums else [])
        wiring = self.codec.wiring
        report = LossReport(
            step=self.step,
            lr=lr,
            terms={name: sums[name] for name in order},
            generator_total=generator_total,
            discriminator_total=discriminator_total,
            semantic_branch=wiring.semantic_branch,
            adapter=wiring.adapter,
            self_guidance=wiring.self_guidance,
        )
        self.step += 1
        return report

    def _reseed(self, stage_rows: List[List[Tensor]], semantic_rows: List[Tensor]) -> None:
        threshold = self.config.dead_code_threshold
        pairs = [(cb, torch.cat(rows)) for cb, rows in zip(self.codec.rvq.stages, stage_rows) if rows]
        if self.codec.semantic_codebook is not None and semantic_rows:
            pairs.append((self.codec.semantic_codebook, torch.cat(semantic_rows)))
        for codebook, batch in pairs:
            try:
                dead_code_reseed(codebook, batch, threshold, self.rng)
            except EmptyBatch:
                # Stage inactive for the whole batch under quantizer dropout
                continue

    # ---------------------------------------------------------------------
    # Checkpointing
    # ---------------------------------------------------------------------

    def state_tensors(self) -> Dict[str, Tensor]:
        tensors = codec_tensors(self.codec)
        tensors.update({f"disc/{name}": t for name, t in self.disc.state_dict().items()})
        for prefix, optimizer in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for index, state in optimizer.state_dict()["state"].items():
                for key, value in state.items():
                    tensors[f"{prefix}/{index}/{key}"] = torch.as_tensor(value)
        tensors["rng/torch"] = torch.get_rng_state()
        tensors["rng/codebook_init"] = self.codec.init_generator.get_state()
        return tensors

    def save(self, path: Union[str, Path]) -> None:
        """Write the full training state"""
        teacher = self.codec.teacher
        meta = {
            "step": self.step,
            "kind": "train_state",
            "train_config": self.train_config.model_dump(),
            "teacher_hash": teacher.parameter_hash() if teacher is not None else None,
            "parameter_count": self.codec.parameter_count(),
            "numpy_rng": self.rng.bit_generator.state,
            "opt_g_groups": self.opt_g.state_dict()["param_groups"],
            "opt_d_groups": self.opt_d.state_dict()["param_groups"],
        }
        save_checkpoint(path, self.config, self.state_tensors(), meta)

    @staticmethod
    def _optimizer_state(checkpoint: Checkpoint, prefix: str, groups: list) -> dict:
        state: Dict[int, Dict[str, Tensor]] = {}
        for name, tensor in checkpoint.section(prefix).items():
            index, key = name.split("/", 1)
            state.setdefault(int(index), {})[key] = tensor
        return {"state": state, "param_groups": groups}

    @classmethod
    def from_checkpoint(cls, checkpoint: Union[str, Path, Checkpoint],
                        train_config: Optional[TrainConfig] = None,
                        teacher: Optional[SemanticTeacher] = None) -> "Trainer":
        """
        Rebuild a Trainer exactly as it was saved

        Raises:
            IoError, BadMagic, VersionMismatch, ConfigHashMismatch
        """
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = load_checkpoint(checkpoint)
        if checkpoint.meta.get("kind") != "train_state":
            raise IoError("checkpoint holds codec weights only, not a training state")

        train_config = train_config or TrainConfig(**checkpoint.meta["train_config"])
        trainer = cls(checkpoint.config, train_config, teacher=teacher)
        trainer.codec.load_state_dict(checkpoint.section("model"))
        trainer.disc.load_state_dict(checkpoint.section("disc"))
        trainer.opt_g.load_state_dict(cls._optimizer_state(checkpoint, "opt_g", checkpoint.meta["opt_g_groups"]))
        trainer.opt_d.load_state_dict(cls._optimizer_state(checkpoint, "opt_d", checkpoint.meta["opt_d_groups"]))
        trainer.rng.bit_generator.state = checkpoint.meta["numpy_rng"]
        torch.set_rng_state(checkpoint.tensors["rng/torch"])
        trainer.codec.init_generator.set_state(checkpoint.tensors["rng/codebook_init"])
        trainer.step = checkpoint.step
        return trainer


def train_step(trainer: Trainer, batch: Union[Tensor, Sequence[PcmBuffer]]):
    """Functional form: (trainer, batch) -> (trainer, LossReport)"""
    report = trainer.train_step(batch)
    return trainer, report


def checkpoint_roundtrip(trainer: Trainer, path: Union[str, Path]) -> Trainer:
    """Save a training state and load it back"""
    trainer.save(path)
    return Trainer.from_checkpoint(path, trainer.train_config, teacher=trainer.codec.teacher)


# =========================================================================
# Logging and loops
# =========================================================================

class TrainingLog:
    """Line-structured training log, one key=value line per step"""

    def __init__(self, path: Union[str, Path], append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "a" if append else "w", encoding="utf-8")

    def write(self, report: LossReport) -> None:
        self._file.write(report.to_log_line() + "\n")
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "TrainingLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def overfit_single_clip(clip: PcmBuffer, steps: int, config: Union[CodecConfig, ValidatedConfig],
                        train_config: Optional[TrainConfig] = None,
                        teacher: Optional[SemanticTeacher] = None) -> List[float]:
    """
    Train on one clip only

    Returns:
        Multiscale mel loss of every step (the loss curve)

    Raises:
        ClipTooShort: clip under 0.5 s
    """
    if clip.duration_seconds < MIN_CLIP_SECONDS:
        raise ClipTooShort(f"clip is {clip.duration_seconds:.3f} s, need at least {MIN_CLIP_SECONDS} s")
    if clip.duration_seconds > MAX_SEGMENT_SECONDS:
        raise ValueError(f"clip is {clip.duration_seconds:.3f} s, at most {MAX_SEGMENT_SECONDS} s allowed")

    train_config = train_config or TrainConfig(batch_size=1, warmup_steps=0, decay_steps=max(steps, 1),
                                               lr_peak=1e-3, data_source="single_clip", log_every=0)
    trainer = Trainer(config, train_config, teacher=teacher)
    batch = clip.samples.to(torch.float32)[None]

    curve = []
    for _ in range(steps):
        report = trainer.train_step(batch)
        curve.append(report.terms["ac_recon"])
    return curve


def run_training(config: Union[CodecConfig, ValidatedConfig], train_config: TrainConfig,
                 out_dir: Union[str, Path], teacher: Optional[SemanticTeacher] = None,
                 resume: Optional[Union[str, Path]] = None) -> Trainer:
    """
    Full training loop with periodic checkpoints and the log file

    Writes out_dir/train.log, out_dir/step_<n>.ckpt every checkpoint_every
    steps and out_dir/final.ckpt at the end.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, train_config, teacher=teacher)
        print(f"✓ Resumed from {resume} at step {trainer.step}", file=sys.stderr)
    else:
        trainer = Trainer(config, train_config, teacher=teacher)

    vc = trainer.vc
    dataset = build_dataset(
        train_config.data_source,
        vc.config.sample_rate_hz,
        train_config.segment_seconds,
        data_path=train_config.data_path,
        seed=vc.config.seed,
        spec=SyntheticSpec(families=train_config.families),
    )
    remaining = max(0, train_config.steps - trainer.step)
    loader = make_loader(dataset, train_config.batch_size, start_step=trainer.step, steps=remaining,
                         seed=vc.config.seed, num_workers=train_config.num_workers)

    print("=" * 80, file=sys.stderr)
    print(f"TRAINING: {remaining} steps, batch {train_config.batch_size}, "
          f"{vc.frame_rate_hz:g} Hz x {vc.total_streams} streams", file=sys.stderr)
    print("=" * 80, file=sys.stderr)

    with TrainingLog(out_dir / "train.log", append=resume is not None) as log:
        for batch in loader:
            report = trainer.train_step(batch)
            log.write(report)

            done = trainer.step
            if train_config.log_every and done % train_config.log_every == 0:
                print(f"  step {done}/{train_config.steps}: "
                      f"generator={report.generator_total:.4f} "
                      f"ac_recon={report.terms.get('ac_recon', 0.0):.4f}", file=sys.stderr)
            if train_config.checkpoint_every and done % train_config.checkpoint_every == 0:
                trainer.save(out_dir / f"step_{done}.ckpt")

    trainer.save(out_dir / "final.ckpt")
    print(f"✓ Training finished at step {trainer.step}", file=sys.stderr)
    return trainer
