"""Versioned binary checkpoints of parameters, optimizer moments and rng state.

Layout (all integers little-endian)::

    b"CAFT" | u32 version | u64 model-config digest
    u32 header length | header JSON (model config, train config, vocabulary)
    u64 step
    3 x (u32 record count | records)      parameters, first moments, second moments
    u32 rng length | rng state JSON

A record is ``u16 name length | name | u8 rank | rank x u32 extents | float64 values``.
"""

import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Tuple

import numpy as np

from .config import ModelConfig, RunConfig, TrainConfig, config_digest
from .model import CaftModel
from .tensor import Tensor
from .training import TrainState

logger = logging.getLogger(__name__)

MAGIC = b"CAFT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Raised when a checkpoint is truncated, foreign, or incompatible."""

    pass


@dataclass
class Checkpoint:
    run_config: RunConfig
    vocab: List[str]
    state: TrainState


def _dump_json(value) -> bytes:
    return json.dumps(value, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_records(out: BinaryIO, arrays: Dict[str, np.ndarray]) -> None:
    out.write(struct.pack("<I", len(arrays)))
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", array.ndim))
        out.write(struct.pack(f"<{array.ndim}I", *array.shape))
        out.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def checkpoint_save(
    path: str, state: TrainState, run_config: RunConfig, vocab: List[str]
) -> None:
    """Serialize to a temporary file and rename it into place."""
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<IQ", FORMAT_VERSION, config_digest(run_config.model)))
    header = _dump_json(
        {
            "model": run_config.model.model_dump(mode="json"),
            "train": run_config.train.model_dump(mode="json"),
            "vocab": list(vocab),
        }
    )
    buffer.write(struct.pack("<I", len(header)))
    buffer.write(header)
    buffer.write(struct.pack("<Q", state.step))
    _write_records(buffer, {n: p.data for n, p in state.params.items()})
    _write_records(buffer, state.first_moment)
    _write_records(buffer, state.second_moment)
    rng = _dump_json(state.rng_state)
    buffer.write(struct.pack("<I", len(rng)))
    buffer.write(rng)

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(dir=target.parent, prefix=f".tmp_{target.stem}_")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buffer.getvalue())
        os.replace(temp_path, target)
    except OSError:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise
    logger.info(f"Saved checkpoint at step {state.step} to {target}")


class _Reader:
    def __init__(self, payload: bytes, path: str):
        self.payload = payload
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.payload):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.payload[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def records(self) -> Dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        arrays = {}
        for _ in range(count):
            (name_length,) = self.unpack("<H")
            name = self.take(name_length).decode("utf-8")
            (rank,) = self.unpack("<B")
            shape = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(self.take(8 * size), dtype="<f8")
            arrays[name] = values.astype(np.float64).reshape(shape)
        return arrays


def checkpoint_load(path: str, expected_digest: Optional[int] = None) -> Checkpoint:
    """Read a checkpoint, checking magic, version and (optionally) config digest."""
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    reader = _Reader(payload, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, digest = reader.unpack("<IQ")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    (header_length,) = reader.unpack("<I")
    try:
        header = json.loads(reader.take(header_length))
        run_config = RunConfig(
            model=ModelConfig(**header["model"]), train=TrainConfig(**header["train"])
        )
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}")
    if config_digest(run_config.model) != digest:
        raise CheckpointError(f"{path}: header does not match its config digest")
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError(
            f"{path}: model configuration differs from the requested one"
        )
    (step,) = reader.unpack("<Q")
    params = reader.records()
    first = reader.records()
    second = reader.records()
    (rng_length,) = reader.unpack("<I")
    try:
        rng_state = json.loads(reader.take(rng_length))
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt rng state: {e}")
    if reader.pos != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint")
    if set(first) != set(params) or set(second) != set(params):
        raise CheckpointError(f"{path}: moment records do not match parameters")

    state = TrainState(
        step=step,
        params={n: Tensor(v, requires_grad=True, name=n) for n, v in params.items()},
        first_moment=first,
        second_moment=second,
        rng_state=rng_state,
    )
    return Checkpoint(run_config=run_config, vocab=header["vocab"], state=state)


def restore_model(
    checkpoint: Checkpoint, run_config: Optional[RunConfig] = None
) -> Tuple[CaftModel, TrainState]:
    """Rebuild the model a checkpoint was written from and bind its state to it.

    ``run_config`` may change training settings such as the variant, but its
    model configuration must hash to the checkpoint's digest.
    """
    run_config = run_config or checkpoint.run_config
    if config_digest(run_config.model) != config_digest(checkpoint.run_config.model):
        raise CheckpointError("model configuration differs from the checkpoint's")
    train = run_config.train
    model = CaftModel(run_config.model, train.seed, train.variant)
    model.load_parameters({n: t.data for n, t in checkpoint.state.params.items()})
    state = TrainState(
        step=checkpoint.state.step,
        params=model.parameters(),
        first_moment=checkpoint.state.first_moment,
        second_moment=checkpoint.state.second_moment,
        rng_state=checkpoint.state.rng_state,
    )
    return model, state
