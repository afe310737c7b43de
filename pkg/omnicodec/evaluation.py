"""
Evaluation harness

eval_recon runs every WAV in a directory through encode and decode and
reports mel distance, MCD, codebook utilization and bitrate, per file and
aggregated. load_token_corpus gathers token files for the perplexity
protocol.
"""

import json
import sys
from pathlib import Path
from typing import List, Optional, Protocol, Union

import pandas as pd

from .config import ValidatedConfig, bitrate_bps
from .errors import CodecError, IoError
from .metrics import codebook_utilization, mcd, mel_distance
from .models import PcmBuffer, TokenMatrix
from .reports import ReconFileResult, ReconReport
from .token_io import load_tokens, wav_read


TOKEN_SUFFIX = ".tok"


class ReconCodec(Protocol):
    """What eval_recon needs from a codec"""

    vc: ValidatedConfig

    def encode_pcm(self, pcm: PcmBuffer, n_acoustic: Optional[int] = None) -> TokenMatrix:
        ...

    def decode_tokens(self, tokens: TokenMatrix) -> PcmBuffer:
        ...


def eval_recon(codec: ReconCodec, wav_dir: Union[str, Path], n_acoustic: Optional[int] = None,
               summary_path: Optional[Union[str, Path]] = None,
               csv_path: Optional[Union[str, Path]] = None) -> ReconReport:
    """
    Reconstruction metrics over a directory of WAV files

    Unreadable files are skipped with a warning; the aggregate covers the
    rest.

    Args:
        codec: Trained codec (or anything with encode_pcm / decode_tokens)
        wav_dir: Directory searched recursively for *.wav
        n_acoustic: Evaluate with only the first N RVQ stages
        summary_path: Where to write the JSON summary
        csv_path: Where to write the per-file table

    Returns:
        ReconReport
    """
    wav_dir = Path(wav_dir)
    if not wav_dir.is_dir():
        raise IoError(f"not a directory: {wav_dir}")

    vc = codec.vc
    rate = vc.config.sample_rate_hz
    streams = (n_acoustic or vc.config.acoustic_stages) + (1 if vc.config.semantic_branch else 0)

    results: List[ReconFileResult] = []
    skipped: List[str] = []
    token_sets: List[TokenMatrix] = []

    files = sorted(wav_dir.rglob("*.wav"))
    print(f"Evaluating {len(files)} files from {wav_dir}...", file=sys.stderr)

    for path in files:
        name = str(path.relative_to(wav_dir))
        try:
            pcm = wav_read(path, expected_rate_hz=rate)
        except CodecError as e:
            print(f"  ⚠️  Skipping {name}: {e}", file=sys.stderr)
            skipped.append(name)
            continue

        tokens = codec.encode_pcm(pcm, n_acoustic)
        recon = codec.decode_tokens(tokens)
        token_sets.append(tokens)

        results.append(ReconFileResult(
            file=name,
            duration_seconds=pcm.duration_seconds,
            frames=tokens.frames,
            mel_distance=mel_distance(pcm, recon),
            mcd_db=mcd(pcm, recon),
            utilization=codebook_utilization(tokens).utilization,
            bitrate_bps=bitrate_bps(vc.frame_rate_hz, tokens.streams, vc.bits_per_code),
        ))

    report = ReconReport(
        files=results,
        skipped=skipped,
        frame_rate_hz=vc.frame_rate_hz,
        streams=streams,
        nominal_bitrate_bps=bitrate_bps(vc.frame_rate_hz, streams, vc.bits_per_code),
    )

    if results:
        df = results_table(results)
        report.mean_mel_distance = float(df["mel_distance"].mean())
        report.mean_mcd_db = float(df["mcd_db"].mean())
        report.mean_bitrate_bps = float(df["bitrate_bps"].mean())
        report.mean_utilization = [float(df[c].mean()) for c in df.columns if c.startswith("utilization_")]
        report.utilization = codebook_utilization(token_sets)
        if csv_path is not None:
            df.to_csv(csv_path, index=False)
            print(f"  💾 Exported {len(df)} rows to {csv_path}", file=sys.stderr)

    if summary_path is not None:
        write_summary(report, summary_path)

    return report


def results_table(results: List[ReconFileResult]) -> pd.DataFrame:
    """One row per file; per-stream utilization spread over utilization_<stream> columns"""
    df = pd.DataFrame([r.model_dump(exclude={"utilization"}) for r in results])
    streams = pd.DataFrame([r.utilization for r in results]).add_prefix("utilization_")
    return pd.concat([df, streams], axis=1)


def write_summary(report: ReconReport, path: Union[str, Path]) -> None:
    """Machine-readable JSON summary of a report"""
    path = Path(path)
    summary = report.model_dump()
    summary["utilization_aggregate"] = report.utilization.aggregate if report.utilization else None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(summary, f, indent=2)
    except OSError as e:
        raise IoError(f"cannot write summary {path}: {e}") from e
    print(f"  💾 Saved summary to {path}", file=sys.stderr)


def load_token_corpus(directory: Union[str, Path]) -> List[TokenMatrix]:
    """
    Every token file under a directory, in sorted order

    Raises:
        IoError: if the directory does not exist
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise IoError(f"not a directory: {directory}")
    return [load_tokens(path).tokens for path in sorted(directory.rglob(f"*{TOKEN_SUFFIX}"))]
