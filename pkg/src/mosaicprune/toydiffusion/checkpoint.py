"""Checkpoint file: text header plus raw little-endian float32 payload.

Layout::

    mosaicprune-checkpoint 1
    arch.<field>=<value>          one line per ModelConfig field
    meta.<key>=<value>            optional free-form metadata
    tensor <name> <d0,d1,...> <byte offset> <byte length>
    ...
    end-header
    <payload bytes>

Offsets are relative to the first payload byte and tile the payload in
manifest order, row-major.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import Denoiser, ModelConfig

MAGIC = "mosaicprune-checkpoint 1"
END = "end-header"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arch: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def header(self) -> bytes:
        lines = [MAGIC]
        for f in dataclasses.fields(ModelConfig):
            lines.append(f"arch.{f.name}={getattr(self.arch, f.name)}")
        for k, v in self.meta.items():
            if "\n" in str(v) or "=" in k:
                raise CheckpointError(f"bad metadata entry {k!r}")
            lines.append(f"meta.{k}={v}")
        offset = 0
        for name, arr in self.tensors.items():
            shape = ",".join(str(s) for s in arr.shape) or "scalar"
            nbytes = arr.size * 4
            lines.append(f"tensor {name} {shape} {offset} {nbytes}")
            offset += nbytes
        lines.append(END)
        return ("\n".join(lines) + "\n").encode("ascii")

    def to_bytes(self) -> bytes:
        payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.tensors.values())
        return self.header() + payload

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        marker = ("\n" + END + "\n").encode("ascii")
        cut = data.find(marker)
        if not data.startswith(MAGIC.encode("ascii")) or cut < 0:
            raise CheckpointError("not a mosaicprune checkpoint")
        header = data[:cut].decode("ascii").split("\n")
        payload = data[cut + len(marker):]
        arch, meta, tensors = {}, {}, {}
        types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
        expected = 0
        for line in header[1:]:
            if line.startswith("arch."):
                k, _, v = line[5:].partition("=")
                if k not in types:
                    raise CheckpointError(f"unknown architecture field {k!r}")
                arch[k] = int(v)
            elif line.startswith("meta."):
                k, _, v = line[5:].partition("=")
                meta[k] = v
            elif line.startswith("tensor "):
                _, name, shape, off, nbytes = line.split(" ")
                off, nbytes = int(off), int(nbytes)
                if off != expected:
                    raise CheckpointError(f"tensor {name} starts at {off}, expected {expected}")
                dims = () if shape == "scalar" else tuple(int(s) for s in shape.split(","))
                if int(np.prod(dims)) * 4 != nbytes:
                    raise CheckpointError(f"tensor {name} byte length does not match its shape")
                if off + nbytes > len(payload):
                    raise CheckpointError(f"payload truncated inside tensor {name}")
                tensors[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims).copy()
                expected = off + nbytes
            elif line:
                raise CheckpointError(f"unrecognized header line {line!r}")
        if expected != len(payload):
            raise CheckpointError(f"manifest covers {expected} bytes but payload has {len(payload)}")
        return cls(ModelConfig(**arch), tensors, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_model(cls, model: Denoiser, meta: dict | None = None) -> "Checkpoint":
        tensors = {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.cfg, tensors, dict(meta or {}))

    def to_model(self) -> Denoiser:
        model = Denoiser(self.arch)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}
        model.load_state_dict(state)
        model.eval()
        return model


def save_model(model: Denoiser, path, meta: dict | None = None) -> None:
    Checkpoint.from_model(model, meta).save(path)


def load_model(path) -> Denoiser:
    return Checkpoint.load(path).to_model()
