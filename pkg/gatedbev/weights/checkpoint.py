"""
Detector Checkpoints

Binary layout of a `gatedbev-ckpt/1` file:
1. 8-byte little-endian unsigned header length
2. UTF-8 JSON header: schema, variant, channel counts, class table, grid,
   and a tensor table (name -> shape, offset, count)
3. Little-endian float32 tensor blobs, in tensor-table order

Usage:
    python -m gatedbev.weights.checkpoint runs/independent/ckpt.bin
"""

import json
import logging
import struct
import sys
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, ValidationError

from gatedbev.errors import CheckpointError
from gatedbev.perception.fusion import GatedFusionDetector
from gatedbev.perception.geometry import BEVGridSpec

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "gatedbev-ckpt/1"
CHECKPOINT_NAME = "ckpt.bin"


class TensorEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    shape: List[int]
    offset: int  # bytes from the start of the data section
    count: int


class CheckpointHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: str
    variant: str
    c1: int
    c2: int
    c_out: int
    class_names: List[str]
    grid: BEVGridSpec
    tensors: Dict[str, TensorEntry]


def save_checkpoint(model: GatedFusionDetector, path: Union[str, Path], class_names: List[str],
                    grid: BEVGridSpec) -> Path:
    path = Path(path)
    if len(class_names) != model.num_classes:
        raise CheckpointError(f"{len(class_names)} class names for a {model.num_classes}-class head")

    tensors: Dict[str, TensorEntry] = {}
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        data = tensor.detach().cpu().numpy().astype("<f4")
        tensors[name] = TensorEntry(shape=list(data.shape), offset=offset, count=int(data.size))
        blobs.append(data.tobytes())
        offset += data.nbytes

    header = CheckpointHeader(
        schema_version=CHECKPOINT_SCHEMA,
        variant=model.variant,
        c1=model.c1,
        c2=model.c2,
        c_out=model.c_out,
        class_names=list(class_names),
        grid=grid,
        tensors=tensors,
    )
    header_bytes = json.dumps(header.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for blob in blobs:
                fh.write(blob)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}")
    logger.info(f"Saved {model.variant} checkpoint ({len(tensors)} tensors) to {path}")
    return path


def read_header(path: Union[str, Path]) -> Tuple[CheckpointHeader, bytes]:
    """Parse the header; returns it with the raw data section."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint not found: {path}")
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    if len(raw) < 8:
        raise CheckpointError(f"Checkpoint {path} is truncated")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise CheckpointError(f"Checkpoint {path} header overruns the file")
    try:
        payload = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Checkpoint {path} has a corrupt header: {e}")
    if not isinstance(payload, dict) or payload.get("schema_version") != CHECKPOINT_SCHEMA:
        found = payload.get("schema_version") if isinstance(payload, dict) else None
        raise CheckpointError(f"Checkpoint {path} has schema {found!r}, expected {CHECKPOINT_SCHEMA!r}")
    try:
        header = CheckpointHeader.model_validate(payload)
    except ValidationError as e:
        raise CheckpointError(f"Checkpoint {path} header is invalid: {e}")
    return header, raw[8 + header_len:]


def load_checkpoint(path: Union[str, Path]) -> Tuple[GatedFusionDetector, CheckpointHeader]:
    header, data = read_header(path)
    model = GatedFusionDetector(
        c1=header.c1, c2=header.c2, num_classes=len(header.class_names),
        c_out=header.c_out, variant=header.variant,
    )
    expected = model.state_dict()
    if set(expected) != set(header.tensors):
        missing = sorted(set(expected) - set(header.tensors))
        extra = sorted(set(header.tensors) - set(expected))
        raise CheckpointError(f"Checkpoint {path} tensor set mismatch (missing {missing}, unexpected {extra})")

    state = {}
    for name, entry in header.tensors.items():
        if list(expected[name].shape) != entry.shape or int(np.prod(entry.shape)) != entry.count:
            raise CheckpointError(
                f"Checkpoint {path}: tensor {name} has shape {entry.shape}, "
                f"model expects {list(expected[name].shape)}"
            )
        end = entry.offset + 4 * entry.count
        if entry.offset < 0 or end > len(data):
            raise CheckpointError(f"Checkpoint {path}: tensor {name} runs past the end of the file")
        values = np.frombuffer(data[entry.offset:end], dtype="<f4").reshape(entry.shape)
        state[name] = torch.from_numpy(values.astype(np.float64))
    model.load_state_dict(state)
    logger.info(f"Loaded {header.variant} checkpoint from {path}")
    return model, header


def check_checkpoint(path: Union[str, Path]) -> bool:
    """Print a short summary of a checkpoint file."""
    try:
        header, data = read_header(path)
    except CheckpointError as e:
        print(f"✗ {e}")
        return False
    size_kb = (8 + len(data)) / 1024
    print(f"✓ Checkpoint found: {path}")
    print(f"  Variant: {header.variant}  Classes: {', '.join(header.class_names)}")
    print(f"  Channels: lidar {header.c1}, camera {header.c2}, fused {header.c_out}")
    print(f"  Tensors: {len(header.tensors)}  Data: {size_kb:.1f} KB")
    return True


if __name__ == "__main__":
    ok = all(check_checkpoint(p) for p in sys.argv[1:]) if len(sys.argv) > 1 else check_checkpoint(CHECKPOINT_NAME)
    sys.exit(0 if ok else 1)
