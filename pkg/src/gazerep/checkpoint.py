"""Binary checkpoints: model parameters, batch-norm buffers and Adam state.

Layout (little-endian):

    b"GZAE" | u32 version | u32 header_len | header (UTF-8 JSON: model config,
    training metadata) | u32 n_entries | entries... | u32 CRC32

Each entry is ``u32 name_len | name | u32 rank | u32 dims[rank] | f32 data``.
The CRC covers every byte before it. Entries are written in registry order:
parameters, buffers, then ``adam.m.<name>`` / ``adam.v.<name>``.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Autoencoder, ModelConfig
from .train import AdamState

MAGIC = b"GZAE"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Autoencoder
    adam: AdamState
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def _write_entry(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def dumps(model: Autoencoder, adam: AdamState | None = None, epoch: int = 0, extra: dict | None = None) -> bytes:
    adam = adam or AdamState()
    header = {
        "model_config": model.config.to_dict(),
        "train": {"epoch": epoch, "adam_t": adam.t, "lr": adam.lr, "beta1": adam.beta1,
                  "beta2": adam.beta2, "eps": adam.eps},
        "extra": extra or {},
    }
    entries = list(model.state_dict().items())
    for name, _ in model.named_parameters():
        if name in adam.m:
            entries.append((f"adam.m.{name}", adam.m[name]))
            entries.append((f"adam.v.{name}", adam.v[name]))
    buf = io.BytesIO()
    buf.write(MAGIC)
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", VERSION, len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        _write_entry(buf, name, arr)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path: str | Path, model: Autoencoder, adam: AdamState | None = None, epoch: int = 0,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(model, adam, epoch, extra))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def loads(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last entry")
    model = Autoencoder(ModelConfig.from_dict(header["model_config"]))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    tr = header["train"]
    adam = AdamState(lr=tr["lr"], beta1=tr["beta1"], beta2=tr["beta2"], eps=tr["eps"], t=tr["adam_t"])
    for k, v in tensors.items():
        if k.startswith("adam.m."):
            adam.m[k[len("adam.m."):]] = v
        elif k.startswith("adam.v."):
            adam.v[k[len("adam.v."):]] = v
    return Checkpoint(model, adam, int(tr["epoch"]), header.get("extra", {}))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
