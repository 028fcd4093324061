"""Binary checkpoints: magic, version, JSON metadata and a named float64 tensor table.

Layout (all integers little-endian)::

    b"GZMV" | u32 version | u64 meta_len | meta (UTF-8 JSON) | u32 n_tensors
    then per tensor: u16 name_len | name | u8 rank | u64 dims[rank] | f64 payload
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .generator import GeneratorConfig, MotionGenerator
from .vqvae import MotionVqVae, VqVaeConfig

MAGIC = b"GZMV"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = view[pos: pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    (meta_len,) = struct.unpack("<Q", take(8))
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (n,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(bytes(take(8 * count)), dtype="<f8").reshape(dims)
        tensors[name] = arr.astype(np.float64)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after tensor table")
    return tensors, meta


def write(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def read(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


# ------------------------------------------------------------- model sections


def save_models(path: str | Path, vq: MotionVqVae | None = None, gen: MotionGenerator | None = None,
                meta: dict | None = None) -> None:
    from dataclasses import asdict

    tensors: dict[str, np.ndarray] = {}
    info = dict(meta or {})
    if vq is not None:
        tensors.update({f"vqvae/{k}": v for k, v in vq.state_dict().items()})
        info["vqvae"] = asdict(vq.config)
    if gen is not None:
        tensors.update({f"generator/{k}": v for k, v in gen.state_dict().items()})
        tensors["generator/buffer.codebook"] = gen.codebook
        info["generator"] = asdict(gen.config)
    write(path, tensors, info)


def _section(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_vqvae(path: str | Path) -> MotionVqVae:
    tensors, meta = read(path)
    if "vqvae" not in meta:
        raise CheckpointError(f"{path}: no vqvae section")
    model = MotionVqVae(VqVaeConfig(**meta["vqvae"]))
    model.load_state_dict(_section(tensors, "vqvae/"))
    model.freeze()
    return model


def load_generator(path: str | Path) -> MotionGenerator:
    tensors, meta = read(path)
    if "generator" not in meta:
        raise CheckpointError(f"{path}: no generator section")
    section = _section(tensors, "generator/")
    gen = MotionGenerator(section.pop("buffer.codebook"), GeneratorConfig(**meta["generator"]))
    gen.load_state_dict(section)
    gen.freeze()
    return gen
