"""
Checkpoint container

Layout (all little-endian):

    magic        4 bytes  b"OMCK"
    version      u16      1
    reserved     u16
    config hash  32 bytes sha256 digest of the architecture fields
    meta length  u32
    meta         UTF-8 JSON: config, step, tensor table, anything else
    payload      every tensor back to back, row-major

Float tensors are stored as 32-bit floats; the tensor table records name,
shape, dtype and byte offset of each entry.
"""

import json
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
from torch import Tensor

from .config import CodecConfig, config_hash
from .errors import BadMagic, ConfigHashMismatch, IoError, TruncatedPayload, VersionMismatch


CHECKPOINT_MAGIC = b"OMCK"
CHECKPOINT_VERSION = 1

_HEADER = struct.Struct("<4sHH32sI")

# torch dtype name -> numpy little-endian dtype
_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
    "bool": "|b1",
}


@dataclass
class Checkpoint:
    """A decoded checkpoint file"""
    config: CodecConfig
    tensors: Dict[str, Tensor]
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def section(self, prefix: str) -> Dict[str, Tensor]:
        """Tensors under 'prefix/', with the prefix stripped"""
        head = prefix + "/"
        return {name[len(head):]: t for name, t in self.tensors.items() if name.startswith(head)}


def _dtype_name(t: Tensor) -> str:
    name = str(t.dtype).replace("torch.", "")
    if name not in _DTYPES:
        raise ValueError(f"Cannot store tensors of dtype {t.dtype}")
    return name


def encode_checkpoint(config: CodecConfig, tensors: Dict[str, Tensor],
                      meta: Optional[Dict[str, object]] = None) -> bytes:
    """Serialize config, named tensors and JSON-able metadata"""
    table = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        dtype = _dtype_name(tensor)
        data = tensor.detach().cpu().contiguous().numpy().astype(_DTYPES[dtype], copy=False).tobytes()
        table.append({"name": name, "shape": list(tensor.shape), "dtype": dtype,
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)

    body = dict(meta or {})
    body["config"] = config.model_dump()
    body["tensors"] = table
    meta_bytes = json.dumps(body, sort_keys=True).encode("utf-8")

    digest = bytes.fromhex(config_hash(config))
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 0, digest, len(meta_bytes))
    return header + meta_bytes + b"".join(chunks)


def decode_checkpoint(blob: bytes, expected_hash: Optional[str] = None) -> Checkpoint:
    """
    Parse checkpoint bytes

    Args:
        blob: File contents
        expected_hash: If given, the config hash the caller requires

    Raises:
        BadMagic, VersionMismatch, ConfigHashMismatch, TruncatedPayload
    """
    if len(blob) < _HEADER.size:
        raise TruncatedPayload(f"checkpoint is {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, _, digest, meta_len = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagic(f"not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")

    start = _HEADER.size
    if len(blob) < start + meta_len:
        raise TruncatedPayload("checkpoint metadata is cut short")
    meta = json.loads(blob[start:start + meta_len].decode("utf-8"))
    payload = memoryview(blob)[start + meta_len:]

    config = CodecConfig(**meta.pop("config"))
    stored_hash = digest.hex()
    if config_hash(config) != stored_hash:
        raise ConfigHashMismatch("checkpoint config does not match its stored hash")
    if expected_hash is not None and expected_hash != stored_hash:
        raise ConfigHashMismatch(
            f"checkpoint config hash {stored_hash[:12]} differs from expected {expected_hash[:12]}"
        )

    tensors = {}
    for entry in meta.pop("tensors"):
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise TruncatedPayload(f"tensor '{entry['name']}' runs past the end of the file")
        array = np.frombuffer(payload[entry["offset"]:end], dtype=_DTYPES[entry["dtype"]])
        tensors[entry["name"]] = torch.from_numpy(array.copy()).reshape(entry["shape"])

    return Checkpoint(config=config, tensors=tensors, meta=meta)


def save_checkpoint(path: Union[str, Path], config: CodecConfig, tensors: Dict[str, Tensor],
                    meta: Optional[Dict[str, object]] = None) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(config, tensors, meta))
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e
    print(f"  💾 Saved checkpoint to {path}", file=sys.stderr)


def load_checkpoint(path: Union[str, Path], expected_hash: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(blob, expected_hash)


# =========================================================================
# Codec parameters
# =========================================================================

def codec_tensors(codec) -> Dict[str, Tensor]:
    """Model state (weights and EMA buffers) under the 'model/' prefix"""
    return {f"model/{name}": t for name, t in codec.state_dict().items()}


def save_codec(codec, path: Union[str, Path], meta: Optional[Dict[str, object]] = None) -> None:
    """Write an inference checkpoint: weights, codebooks and the teacher hash"""
    body = dict(meta or {})
    teacher = codec.teacher
    body.setdefault("teacher_hash", teacher.parameter_hash() if teacher is not None else None)
    body.setdefault("parameter_count", codec.parameter_count())
    save_checkpoint(path, codec.vc.config, codec_tensors(codec), body)


def restore_codec(checkpoint: Checkpoint, teacher=None):
    """Build an OmniCodec from a decoded checkpoint"""
    from .codec import OmniCodec

    codec = OmniCodec(checkpoint.config, teacher=teacher)
    codec.load_state_dict(checkpoint.section("model"))

    stored = checkpoint.meta.get("teacher_hash")
    if stored and codec.teacher is not None and codec.teacher.parameter_hash() != stored:
        print("  ⚠️  Semantic teacher differs from the one this checkpoint was trained with",
              file=sys.stderr)
    return codec


def load_codec(path: Union[str, Path], teacher=None, expected_hash: Optional[str] = None):
    """Load an OmniCodec ready for inference"""
    codec = restore_codec(load_checkpoint(path, expected_hash), teacher)
    codec.eval()
    print(f"  ✓ Loaded codec from {path}", file=sys.stderr)
    return codec
