"""Binary checkpoint container (``.ivck``).

Layout, all integers little-endian u32::

    b"IVCK" | version=1 | len(hyper) | hyper (canonical JSON, UTF-8)
    | parameters as little-endian float32, in FlowModel.parameters() order
    | len(meta) | meta (canonical JSON, UTF-8)

Per block the parameter order is actnorm scale, actnorm bias, the 1x1 mix
W row-major, then subnets s1, t1, s2, t2, each conv layer weight-then-bias.
"Canonical JSON" means sorted keys, no whitespace, ``repr`` floats, so the
same model and metadata always serialize to the same bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .data import Normalizer
from .errors import ContractError
from .flow import FlowConfig, FlowModel

MAGIC = b"IVCK"
VERSION = 1


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


@dataclass
class Checkpoint:
    model: FlowModel
    image_size: tuple
    normalizer: Normalizer = field(default_factory=Normalizer.identity)
    metadata: dict = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {
            "flow": self.model.config.to_dict(),
            "image_size": [int(s) for s in self.image_size],
            "normalizer": self.normalizer.to_dict(),
        }


def to_bytes(ckpt: Checkpoint) -> bytes:
    hyper = canonical_json(ckpt.hyperparameters())
    params = [p for _, p in ckpt.model.parameters()]
    payload = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in params)
    meta = canonical_json(ckpt.metadata)
    return b"".join(
        [
            MAGIC,
            struct.pack("<II", VERSION, len(hyper)),
            hyper,
            payload,
            struct.pack("<I", len(meta)),
            meta,
        ]
    )


def from_bytes(buf: bytes) -> Checkpoint:
    try:
        return _parse(buf)
    except (struct.error, KeyError, TypeError, UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ContractError(f"malformed checkpoint: {err}") from None


def _parse(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ContractError("not an IVCK checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    off = 12
    hyper = json.loads(buf[off : off + hlen].decode("utf-8"))
    off += hlen
    config = FlowConfig(**hyper["flow"])
    model = FlowModel(config, init="identity")
    for _, p in model.parameters():
        n = p.size * 4
        if off + n > len(buf):
            raise ContractError("checkpoint truncated inside parameter payload")
        p[...] = np.frombuffer(buf, dtype="<f4", count=p.size, offset=off).reshape(p.shape)
        off += n
    if off + 4 > len(buf):
        raise ContractError("checkpoint truncated before metadata")
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off : off + mlen].decode("utf-8"))
    if off + mlen != len(buf):
        raise ContractError("trailing bytes after checkpoint metadata")
    model.check_invertible()
    return Checkpoint(
        model=model,
        image_size=tuple(hyper["image_size"]),
        normalizer=Normalizer.from_dict(hyper["normalizer"]),
        metadata=meta,
    )


def save(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: Union[str, Path]) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
