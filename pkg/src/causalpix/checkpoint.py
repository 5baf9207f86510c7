"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CPIX"
    u32   format version
    u64   length of the JSON header, then the UTF-8 JSON header
    per tensor:
        u32   name length, then the UTF-8 name
        u32   rank
        u64   extent, repeated rank times
        f32   payload, row-major
    u32   CRC32 of every byte after the magic

The JSON header holds the model config, optimizer scalars, RNG state and the
tensor count. Tensors are named ``param/<name>`` plus, when an optimizer is
saved, ``adam_m/<name>``, ``adam_v/<name>`` and ``ema/<name>``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .network import Model, ModelConfig
from .training import OptimState

MAGIC = b"CPIX"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    optim: OptimState | None = None
    rng_state: dict | None = None
    version: int = VERSION
    extra: dict = field(default_factory=dict)

    def build_model(self) -> Model:
        model = Model(self.config, seed=0)
        model.set_params(self.params)
        return model

    def rng(self) -> np.random.Generator | None:
        if self.rng_state is None:
            return None
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng


def _tensors(model: Model, optim: OptimState | None):
    out = [(f"param/{k}", v.data) for k, v in model.params.items()]
    if optim is not None:
        for prefix, store in (("adam_m", optim.m), ("adam_v", optim.v), ("ema", optim.ema)):
            out.extend((f"{prefix}/{k}", store[k]) for k in model.params)
    return out


def save_checkpoint(path, model: Model, optim: OptimState | None = None, rng: np.random.Generator | None = None,
                    extra: dict | None = None) -> None:
    """Write ``model`` (and optionally optimizer and RNG state) to ``path``."""
    tensors = _tensors(model, optim)
    header = {
        "model": model.config.to_dict(),
        "optim": None if optim is None else optim.scalars(),
        "rng": None if rng is None else rng.bit_generator.state,
        "n_tensors": len(tensors),
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", VERSION), struct.pack("<Q", len(hb)), hb]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    """Read and fully verify a checkpoint; nothing is returned on any error."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 + 8 + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    body, (crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    r = _Reader(body)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {VERSION})")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header") from exc
    if not isinstance(header, dict) or not isinstance(header.get("n_tensors"), int) or "model" not in header:
        raise CheckpointError(f"{path}: malformed header")
    tensors = {}
    for _ in range(header["n_tensors"]):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after the last tensor")

    try:
        config = ModelConfig.from_dict(header["model"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config ({exc})") from exc
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    optim = None
    if header.get("optim") is not None:
        optim = OptimState(**header["optim"])
        for prefix, store in (("adam_m/", optim.m), ("adam_v/", optim.v), ("ema/", optim.ema)):
            store.update({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    return Checkpoint(config, params, optim, header.get("rng"), version, header.get("extra", {}))
