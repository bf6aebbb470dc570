"""
Checkpoint files.

Layout (all integers little-endian)::

    RFCNET-CHECKPOINT\\n
    version=1\\n
    <key>=<value>\\n          one line per RfcConfig field
    tensors=<count>\\n
    end\\n
    then <count> records of:
      u16 name length | name (utf-8) | u8 ndim | u32 dim * ndim | float32 data

Tensors are written in the model's ``named_parameters`` order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointFormatError, ConfigError
from .net import RfcConfig, RfcModel, build_rfc_net

MAGIC = b"RFCNET-CHECKPOINT\n"
VERSION = 1


def dumps(model: RfcModel) -> bytes:
    params = list(model.named_parameters())
    header = [f"version={VERSION}"]
    header += [f"{k}={v}" for k, v in model.config.to_items()]
    header += [f"tensors={len(params)}", "end"]
    parts = [MAGIC, ("\n".join(header) + "\n").encode("ascii")]
    for name, p in params:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: RfcModel, path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(
                f"truncated checkpoint: needed {n} bytes for {what} at byte offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def line(self) -> str:
        end = self.buf.find(b"\n", self.pos)
        if end < 0:
            raise CheckpointFormatError(f"unterminated header line at byte offset {self.pos}")
        raw = self.buf[self.pos:end]
        start, self.pos = self.pos, end + 1
        try:
            return raw.decode("ascii")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"non-ascii header line at byte offset {start}") from None


def loads(buf: bytes, expected: Optional[RfcConfig] = None) -> RfcModel:
    if not buf:
        raise CheckpointFormatError("empty checkpoint (0 bytes) at byte offset 0")
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic at byte offset 0: not an RFC-Net checkpoint")
    items = {}
    while True:
        offset = r.pos
        line = r.line()
        if line == "end":
            break
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"malformed header line {line!r} at byte offset {offset}")
        items[key] = value
    version = items.pop("version", None)
    if version != str(VERSION):
        raise CheckpointFormatError(f"unsupported checkpoint version {version!r} (expected {VERSION})")
    try:
        count = int(items.pop("tensors"))
    except (KeyError, ValueError):
        raise CheckpointFormatError("header lacks a valid 'tensors' count") from None

    config = RfcConfig.from_items(items)
    if expected is not None and expected != config:
        raise ConfigError(f"checkpoint config {config} does not match expected {expected}")

    state = {}
    for _ in range(count):
        start = r.pos
        (name_len,) = struct.unpack("<H", r.take(2, "name length"))
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"undecodable tensor name at byte offset {start + 2}") from None
        (ndim,) = struct.unpack("<B", r.take(1, f"{name} rank"))
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} shape"))
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(4 * n, f"{name} data"), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes at byte offset {r.pos}")

    model = build_rfc_net(config)
    expected_names = [n for n, _ in model.named_parameters()]
    if sorted(expected_names) != sorted(state):
        raise CheckpointFormatError("tensor names in checkpoint do not match the configured network")
    for name, p in model.named_parameters():
        if state[name].shape != p.shape:
            raise CheckpointFormatError(f"{name}: stored shape {state[name].shape} != expected {p.shape}")
    model.load_state_dict(state)
    return model


def load_checkpoint(path, expected: Optional[RfcConfig] = None) -> RfcModel:
    return loads(Path(path).read_bytes(), expected)
