"""Binary checkpoint format.

Layout::

    b"CRACKNEX" | u32 format_version | u64 header length | JSON header | tensor bytes | sha256

The header carries the configuration, the iteration counter and a table of
tensors (name, dtype, shape, byte offset). The trailing SHA-256 covers every
preceding byte so truncation or corruption is detected on load.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import TrainConfig
from .model import CrackNex

MAGIC = b"CRACKNEX"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    format_version: int = FORMAT_VERSION

    @property
    def temperature(self) -> float:
        return self.config.temperature

    def fingerprint(self) -> str:
        """Hash over parameter names and raw bytes, for mutation checks."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.asarray(self.params[name], order="C").tobytes())
        return h.hexdigest()


def checkpoint_from_model(model: CrackNex, iteration: int = 0,
                          optimizer: Optional[torch.optim.Optimizer] = None) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    momentum = {}
    if optimizer is not None:
        for name, p in model.named_parameters():
            buf = optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                momentum[name] = buf.detach().cpu().numpy().copy()
    return Checkpoint(model.config, params, momentum, iteration)


def model_from_checkpoint(cp: Checkpoint) -> CrackNex:
    model = CrackNex(cp.config)
    state = {k: torch.from_numpy(v.copy()) for k, v in cp.params.items()}
    model.load_state_dict(state, strict=True)
    return model


def _tensor_table(cp: Checkpoint):
    entries, chunks, offset = [], [], 0
    for group, table in (("params", cp.params), ("momentum", cp.momentum)):
        for name in sorted(table):
            arr = np.asarray(table[name], order="C")
            raw = arr.tobytes()
            entries.append({"group": group, "name": name, "dtype": arr.dtype.str,
                            "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    return entries, b"".join(chunks)


def dumps_checkpoint(cp: Checkpoint) -> bytes:
    entries, payload = _tensor_table(cp)
    header = json.dumps({"config": cp.config.to_dict(), "iteration": cp.iteration,
                         "temperature": cp.temperature, "tensors": entries},
                        sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, cp.format_version, len(header)) + header + payload
    return body + hashlib.sha256(body).digest()


def loads_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size + _DIGEST:
        raise CheckpointError("corrupt checkpoint: file too short")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("corrupt checkpoint: checksum mismatch")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + header_len])
        config = TrainConfig.from_dict({**header["config"],
                                        "image_size": tuple(header["config"]["image_size"])})
        payload = body[start + header_len:]
        tables = {"params": {}, "momentum": {}}
        for e in header["tensors"]:
            raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
            tables[e["group"]][e["name"]] = arr
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return Checkpoint(config, tables["params"], tables["momentum"], header["iteration"], version)


def save_checkpoint(cp: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_checkpoint(cp))


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads_checkpoint(blob)
