"""Versioned checkpoint container.

Layout (all integers little-endian)::

    b"IRSRCKPT"            8-byte magic
    uint32                 format version
    uint64                 header length N
    N bytes                UTF-8 JSON header (CheckpointHeader)
    payload                raw tensor blobs, in header order

Tensors are stored C-contiguous in their numpy dtype string (``<f4`` for
parameters and optimizer moments). The header lists every blob's name,
dtype, shape, offset and size, plus a SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ValidationError
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from irsr.config import DiscriminatorConfig, GeneratorConfig, TrainingSchedule
from irsr.data_pipeline import StreamPosition
from irsr.discriminator import Discriminator, build_discriminator
from irsr.errors import CheckpointError
from irsr.generator import Generator, build_generator

MAGIC = b"IRSRCKPT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "|u1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class SchedulePosition(BaseModel):
    """Where training stands; iterations count generator updates."""

    phase: Literal[1, 2] = 1
    iteration: int = 0
    g_updates: int = 0
    d_updates: int = 0
    phase1_complete: bool = False


class TensorEntry(BaseModel):
    name: str
    dtype: str
    shape: list[int]
    offset: int
    nbytes: int


class CheckpointHeader(BaseModel):
    format_version: int = FORMAT_VERSION
    generator: GeneratorConfig
    discriminator: DiscriminatorConfig | None = None
    schedule: TrainingSchedule | None = None
    position: SchedulePosition = SchedulePosition()
    stream: StreamPosition | None = None
    seed: int = 0
    optimizer_groups: dict[str, list[dict[str, Any]]] = {}
    tensors: list[TensorEntry] = []
    payload_sha256: str = ""


@dataclass
class TrainingState:
    """Everything needed to resume training or run inference."""

    generator: Generator
    discriminator: Discriminator | None = None
    g_optimizer: dict[str, Any] | None = None
    d_optimizer: dict[str, Any] | None = None
    schedule: TrainingSchedule | None = None
    position: SchedulePosition = field(default_factory=SchedulePosition)
    stream: StreamPosition | None = None
    seed: int = 0
    torch_rng: torch.Tensor | None = None


def _optimizer_tensors(prefix: str, state_dict: dict[str, Any]) -> dict[str, torch.Tensor]:
    tensors = {}
    for index, slots in state_dict["state"].items():
        for key, value in slots.items():
            if not isinstance(value, torch.Tensor):
                raise CheckpointError(f"{prefix}: non-tensor optimizer state {key!r}")
            tensors[f"{prefix}/{index}/{key}"] = value
    return tensors


def _optimizer_from(prefix: str, groups: list[dict[str, Any]], tensors: dict[str, torch.Tensor]) -> dict[str, Any]:
    state: dict[int, dict[str, torch.Tensor]] = {}
    for name, value in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, index, key = name.split("/", 2)
        state.setdefault(int(index), {})[key] = value
    param_groups = []
    for group in groups:
        group = dict(group)
        if "betas" in group:
            group["betas"] = tuple(group["betas"])
        param_groups.append(group)
    return {"state": state, "param_groups": param_groups}


def _collect(state: TrainingState) -> tuple[CheckpointHeader, dict[str, torch.Tensor]]:
    tensors: dict[str, torch.Tensor] = {}
    for key, value in state.generator.state_dict().items():
        tensors[f"generator/{key}"] = value
    if state.discriminator is not None:
        for key, value in state.discriminator.state_dict().items():
            tensors[f"discriminator/{key}"] = value

    groups: dict[str, list[dict[str, Any]]] = {}
    for prefix, opt in (("g_opt", state.g_optimizer), ("d_opt", state.d_optimizer)):
        if opt is not None:
            tensors.update(_optimizer_tensors(prefix, opt))
            groups[prefix] = opt["param_groups"]
    if state.torch_rng is not None:
        tensors["rng/torch"] = state.torch_rng

    header = CheckpointHeader(
        generator=state.generator.cfg,
        discriminator=state.discriminator.cfg if state.discriminator is not None else None,
        schedule=state.schedule,
        position=state.position,
        stream=state.stream,
        seed=state.seed,
        optimizer_groups=groups,
    )
    return header, tensors


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.5, min=0.5, max=4),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)
def atomic_write(path: Path, data: bytes) -> None:
    """Write via a temporary sibling and rename into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def checkpoint_save(state: TrainingState, path: Path) -> Path:
    header, tensors = _collect(state)

    blobs = []
    entries = []
    offset = 0
    for name, tensor in tensors.items():
        tensor = tensor.detach().cpu().contiguous()
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {tensor.dtype}")
        dtype = _DTYPES[tensor.dtype]
        blob = tensor.numpy().astype(dtype, copy=False).tobytes(order="C")
        entries.append(
            TensorEntry(name=name, dtype=dtype, shape=list(tensor.shape), offset=offset, nbytes=len(blob))
        )
        blobs.append(blob)
        offset += len(blob)

    payload = b"".join(blobs)
    header = header.model_copy(
        update={"tensors": entries, "payload_sha256": hashlib.sha256(payload).hexdigest()}
    )
    header_bytes = header.model_dump_json().encode("utf-8")
    atomic_write(path, _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + payload)
    logger.debug(f"Saved checkpoint ({len(entries)} tensors, {len(payload):,} bytes) to {path}")
    return path


def read_header(data: bytes, source: Path | str = "<bytes>") -> tuple[CheckpointHeader, memoryview]:
    if len(data) < _PREAMBLE.size:
        raise CheckpointError(f"{source}: truncated preamble ({len(data)} bytes)")
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{source}: format version {version}, this build reads version {FORMAT_VERSION}"
        )
    start = _PREAMBLE.size
    if len(data) < start + header_len:
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = CheckpointHeader.model_validate(json.loads(data[start : start + header_len]))
    except (json.JSONDecodeError, UnicodeDecodeError, ValidationError) as e:
        raise CheckpointError(f"{source}: malformed header: {e}") from e

    payload = memoryview(data)[start + header_len :]
    expected = sum(entry.nbytes for entry in header.tensors)
    if len(payload) != expected:
        raise CheckpointError(f"{source}: payload holds {len(payload)} bytes, header lists {expected}")
    if hashlib.sha256(payload).hexdigest() != header.payload_sha256:
        raise CheckpointError(f"{source}: payload checksum mismatch")
    return header, payload


def checkpoint_load(path: Path) -> TrainingState:
    """Rebuild a TrainingState; nothing is returned unless every part loads."""
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    header, payload = read_header(path.read_bytes(), path)

    tensors: dict[str, torch.Tensor] = {}
    for entry in header.tensors:
        if entry.dtype not in _TORCH_DTYPES:
            raise CheckpointError(f"{path}: {entry.name} has unknown dtype {entry.dtype}")
        arr = np.frombuffer(payload[entry.offset : entry.offset + entry.nbytes], dtype=entry.dtype)
        tensors[entry.name] = torch.from_numpy(arr.reshape(entry.shape).copy())

    def section(prefix: str) -> dict[str, torch.Tensor]:
        return {k.removeprefix(prefix): v for k, v in tensors.items() if k.startswith(prefix)}

    try:
        generator = build_generator(header.generator)
        generator.load_state_dict(section("generator/"), strict=True)
        discriminator = None
        if header.discriminator is not None:
            discriminator = build_discriminator(header.discriminator)
            discriminator.load_state_dict(section("discriminator/"), strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not match the stored architecture: {e}") from e

    groups = header.optimizer_groups
    return TrainingState(
        generator=generator,
        discriminator=discriminator,
        g_optimizer=_optimizer_from("g_opt", groups["g_opt"], tensors) if "g_opt" in groups else None,
        d_optimizer=_optimizer_from("d_opt", groups["d_opt"], tensors) if "d_opt" in groups else None,
        schedule=header.schedule,
        position=header.position,
        stream=header.stream,
        seed=header.seed,
        torch_rng=tensors.get("rng/torch"),
    )


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
