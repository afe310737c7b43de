"""
Report models for training and evaluation output.

These are the typed, serializable results the trainer and the evaluation
harness hand back to callers and write to disk.
"""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class LossReport(BaseModel):
    """Per-step loss breakdown; disabled terms are absent from `terms`"""

    step: int
    lr: float
    terms: Dict[str, float] = Field(default_factory=dict)
    generator_total: float
    discriminator_total: float

    # Branch wiring the step ran with
    semantic_branch: bool = True
    adapter: str = "learned"
    self_guidance: bool = True

    def to_log_line(self) -> str:
        """One key=value line for the training log file"""
        fields = [f"step={self.step}", f"lr={self.lr:.6g}"]
        fields += [f"{name}={value:.6g}" for name, value in self.terms.items()]
        fields.append(f"generator_total={self.generator_total:.6g}")
        fields.append(f"discriminator_total={self.discriminator_total:.6g}")
        return ", ".join(fields)


class UtilizationReport(BaseModel):
    """Distinct codes used per stage over a corpus"""

    codebook_size: List[int]
    used_codes: List[int]
    utilization: List[float]

    @property
    def aggregate(self) -> float:
        if not self.utilization:
            return 0.0
        return sum(self.utilization) / len(self.utilization)


class ReconFileResult(BaseModel):
    """Reconstruction metrics for one evaluated WAV file"""

    file: str
    duration_seconds: float
    frames: int
    mel_distance: float
    mcd_db: float
    utilization: List[float] = Field(default_factory=list)   # per stream, semantic first
    bitrate_bps: float = 0.0


class ReconReport(BaseModel):
    """Per-file and aggregate reconstruction results"""

    files: List[ReconFileResult] = Field(default_factory=list)
    skipped: List[str] = Field(default_factory=list)

    mean_mel_distance: Optional[float] = None
    mean_mcd_db: Optional[float] = None
    mean_utilization: Optional[List[float]] = None
    mean_bitrate_bps: Optional[float] = None
    utilization: Optional[UtilizationReport] = None   # distinct codes over the whole corpus

    frame_rate_hz: float
    streams: int
    nominal_bitrate_bps: float


def _join(values: List[float]) -> str:
    return ",".join(f"{v:.4f}" for v in values)


def format_recon_report(report: ReconReport) -> str:
    """Line-structured text form of a reconstruction report"""

    lines = []
    lines.append("=" * 80)
    lines.append("RECONSTRUCTION REPORT")
    lines.append("=" * 80)

    for result in report.files:
        lines.append(
            f"file={result.file} duration={result.duration_seconds:.3f} frames={result.frames} "
            f"mel_distance={result.mel_distance:.6f} mcd_db={result.mcd_db:.6f} "
            f"utilization={_join(result.utilization)} bitrate_bps={result.bitrate_bps:g}"
        )
    for name in report.skipped:
        lines.append(f"skipped={name}")

    lines.append("")
    lines.append(f"files={len(report.files)}")
    if report.mean_mel_distance is not None:
        lines.append(f"mean_mel_distance={report.mean_mel_distance:.6f}")
        lines.append(f"mean_mcd_db={report.mean_mcd_db:.6f}")
        lines.append(f"mean_utilization={_join(report.mean_utilization)}")
        lines.append(f"mean_bitrate_bps={report.mean_bitrate_bps:g}")
    if report.utilization is not None:
        lines.append(f"utilization={report.utilization.aggregate:.6f}")
    lines.append(f"frame_rate_hz={report.frame_rate_hz:g}")
    lines.append(f"streams={report.streams}")
    lines.append(f"nominal_bitrate_bps={report.nominal_bitrate_bps:g}")
    lines.append("=" * 80)

    return "\n".join(lines)
