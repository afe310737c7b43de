#!/usr/bin/env python3
"""
OmniCodec command line

Subcommands:
    train       Train a codec and write checkpoints
    encode      WAV -> token file
    decode      Token file -> WAV
    eval-recon  Reconstruction metrics over a WAV directory
    eval-ppl    Token LM perplexity of a token corpus
    info        Summarize a token file or checkpoint (the only stdout output)

Usage:
    # Train the small CPU preset on synthetic audio
    python run_codec.py train --preset desk-tiny --data synthetic --steps 200 --out runs/tiny

    # Encode in 80 ms chunks (same tokens as unchunked)
    python run_codec.py encode --ckpt runs/tiny/final.ckpt --in speech.wav --out speech.tok --chunk-ms 80

    # Decode back to audio
    python run_codec.py decode --ckpt runs/tiny/final.ckpt --in speech.tok --out speech_recon.wav

    # Bitrate and stream summary
    python run_codec.py info --in speech.tok

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 data/format error,
4 numeric failure.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from omnicodec.checkpoint import CHECKPOINT_MAGIC, load_checkpoint, load_codec
from omnicodec.config import (
    CodecConfig,
    apply_env_overrides,
    bitrate_bps,
    count_summary,
    load_config,
    preset,
    tokens_per_second_label,
    validate,
)
from omnicodec.errors import CodecError, IoError
from omnicodec.evaluation import eval_recon, load_token_corpus
from omnicodec.reports import format_recon_report
from omnicodec.token_io import TOKEN_MAGIC, load_tokens, save_tokens, wav_read, wav_write
from omnicodec.token_lm import TokenLmConfig, token_ppl
from omnicodec.train import load_train_config, run_training, TrainConfig


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DATA = 3

PPL_MODES = {"ppl0": "ppl0", "ppl8": "ppl_mean_8", "ppl_mean_8": "ppl_mean_8"}


class UsageError(Exception):
    pass


class CodecArgumentParser(argparse.ArgumentParser):
    """argparse with the usage-error exit code of this tool"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def status(message: str) -> None:
    print(message, file=sys.stderr)


def print_header(title: str) -> None:
    status("=" * 80)
    status(f"  {title}")
    status("=" * 80)


# =========================================================================
# Subcommands
# =========================================================================

def resolve_config(config_path: Optional[str], preset_name: Optional[str]) -> CodecConfig:
    if config_path:
        config = load_config(config_path)
    else:
        config = preset(preset_name or "desk-tiny")
    return apply_env_overrides(config)


def cmd_train(args) -> int:
    config = resolve_config(args.config, args.preset)
    vc = validate(config)

    data = args.data
    if data == "synthetic":
        source, data_path = "synthetic", None
    elif Path(data).is_dir():
        source, data_path = "wav_dir", data
    elif Path(data).is_file():
        source, data_path = "single_clip", data
    else:
        raise IoError(f"data source not found: {data}")

    overrides = {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "data_source": source,
        "data_path": data_path,
    }
    if args.config:
        train_config = load_train_config(args.config, **overrides)
    else:
        train_config = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})

    print_header(f"TRAIN {vc.frame_rate_hz:g} Hz x {vc.total_streams} streams -> {args.out}")
    run_training(vc, train_config, args.out, resume=args.resume)
    return EXIT_OK


def cmd_encode(args) -> int:
    codec = load_codec(args.ckpt)
    rate = codec.vc.config.sample_rate_hz
    pcm = wav_read(args.input, expected_rate_hz=rate)

    chunk_samples = None
    if args.chunk_ms is not None:
        if args.chunk_ms <= 0:
            raise UsageError("--chunk-ms must be positive")
        chunk_samples = max(1, int(round(args.chunk_ms * rate / 1000)))

    tokens = codec.encode_pcm(pcm, n_acoustic=args.n_acoustic, chunk_samples=chunk_samples)
    save_tokens(args.output, tokens, rate, codec.vc.hop)
    status(f"✓ Encoded {pcm.duration_seconds:.3f} s into {tokens.frames} frames x "
           f"{tokens.streams} streams -> {args.output}")
    return EXIT_OK


def cmd_decode(args) -> int:
    codec = load_codec(args.ckpt)
    token_file = load_tokens(args.input)
    header = token_file.header
    tokens = codec.check_tokens(token_file.tokens, header.sample_rate_hz, header.hop, header.bits_per_code)

    pcm = codec.decode_tokens(tokens)
    wav_write(args.output, pcm)
    status(f"✓ Decoded {tokens.frames} frames into {len(pcm)} samples -> {args.output}")
    return EXIT_OK


def cmd_eval_recon(args) -> int:
    codec = load_codec(args.ckpt)
    report = eval_recon(codec, args.wavs, n_acoustic=args.n_acoustic,
                        summary_path=args.summary, csv_path=args.csv)
    status(format_recon_report(report))
    return EXIT_OK


def cmd_eval_ppl(args) -> int:
    train = load_token_corpus(args.tokens_train)
    evaluation = load_token_corpus(args.tokens_eval)
    lm_config = TokenLmConfig(steps=args.lm_steps, seed=args.seed, log_every=args.log_every)

    mode = PPL_MODES[args.mode]
    status(f"Training token LM(s) for {mode} on {len(train)} files, scoring {len(evaluation)} files...")
    ppl = token_ppl(train, evaluation, mode=mode, config=lm_config)
    status(f"✓ {args.mode}={ppl:.4f}")

    if args.out:
        with open(args.out, "w") as f:
            json.dump({"mode": mode, "ppl": ppl, "train_files": len(train),
                       "eval_files": len(evaluation)}, f, indent=2)
        status(f"  💾 Saved result to {args.out}")
    return EXIT_OK


def describe_token_file(path: str) -> List[str]:
    header = load_tokens(path).header
    streams = header.streams
    frame_rate = header.frame_rate_hz
    duration = header.duration_seconds
    on_disk = (8 * header.payload_bytes / duration) if duration else 0.0
    return [
        f"file={path}",
        "kind=tokens",
        f"frame_rate_hz={frame_rate:g}",
        f"streams={streams}",
        f"semantic_stream={'yes' if header.has_semantic else 'no'}",
        f"tps={tokens_per_second_label(frame_rate, streams)}",
        f"bits_per_code={header.bits_per_code}",
        f"nominal_bitrate_bps={bitrate_bps(frame_rate, streams, header.bits_per_code):g}",
        f"on_disk_bitrate_bps={on_disk:g}",
        f"frames={header.frame_count}",
        f"duration_seconds={duration:g}",
    ]


def describe_checkpoint(path: str) -> List[str]:
    checkpoint = load_checkpoint(path)
    vc = validate(checkpoint.config)
    summary = count_summary(vc)
    lines = [f"file={path}", "kind=checkpoint", f"step={checkpoint.step}"]
    lines += [f"{key}={value:g}" if isinstance(value, float) else f"{key}={value}"
              for key, value in summary.items()]
    lines.append(f"parameter_count={checkpoint.meta.get('parameter_count', 'unknown')}")
    for name, value in checkpoint.config.model_dump().items():
        if name != "loss_weights":
            lines.append(f"config.{name}={value}")
    return lines


def cmd_info(args) -> int:
    path = Path(args.input)
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e

    if magic == TOKEN_MAGIC:
        lines = describe_token_file(args.input)
    elif magic == CHECKPOINT_MAGIC:
        lines = describe_checkpoint(args.input)
    else:
        raise CodecError(f"{path} is neither a token file nor a checkpoint")

    print("\n".join(lines))
    return EXIT_OK


# =========================================================================
# Entry point
# =========================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = CodecArgumentParser(
        prog="run_codec.py",
        description="Streaming neural audio codec",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", parser_class=CodecArgumentParser)
    sub.required = True

    p = sub.add_parser("train", help="Train a codec")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", help="Named preset when no --config is given (default: desk-tiny)")
    p.add_argument("--data", required=True, help="'synthetic', a WAV directory, or one WAV clip")
    p.add_argument("--steps", type=int, help="Total optimizer steps")
    p.add_argument("--batch-size", type=int, help="Examples per step")
    p.add_argument("--out", required=True, help="Checkpoint/log directory")
    p.add_argument("--resume", help="Training checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("encode", help="WAV -> token file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--chunk-ms", type=float, help="Stream the audio in chunks of this many ms")
    p.add_argument("--n-acoustic", type=int, help="Keep only the first N acoustic streams")
    p.set_defaults(handler=cmd_encode)

    p = sub.add_parser("decode", help="Token file -> WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser("eval-recon", help="Reconstruction metrics over a WAV directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wavs", required=True)
    p.add_argument("--summary", default="recon_summary.json", help="JSON summary path")
    p.add_argument("--csv", help="Per-file CSV export")
    p.add_argument("--n-acoustic", type=int)
    p.set_defaults(handler=cmd_eval_recon)

    p = sub.add_parser("eval-ppl", help="Token LM perplexity")
    p.add_argument("--tokens-train", required=True)
    p.add_argument("--tokens-eval", required=True)
    p.add_argument("--mode", choices=sorted(PPL_MODES), default="ppl0")
    p.add_argument("--lm-steps", type=int, default=TokenLmConfig().steps)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--out", help="JSON result path")
    p.set_defaults(handler=cmd_eval_ppl)

    p = sub.add_parser("info", help="Summarize a token file or checkpoint")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(handler=cmd_info)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        return args.handler(args)
    except UsageError as e:
        status(f"❌ Usage error: {e}")
        return EXIT_USAGE
    except CodecError as e:
        status(f"❌ Error: {e}")
        return e.exit_code
    except OSError as e:
        status(f"❌ I/O error: {e}")
        return EXIT_IO
    except ValueError as e:
        status(f"❌ Error: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
