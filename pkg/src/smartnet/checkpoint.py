"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"SMRT" | u32 version | u32 record_count | record*

    record := u8 kind | u16 name_len | name (utf-8) | body
    kind 1 (tensor): u8 dtype | u8 ndim | u64 dims[ndim] | raw values
    kind 2 (mask):   u8 ndim | u64 dims[ndim] | u64 n_words | u64 words[n_words]
    kind 3 (json):   u64 length | utf-8 JSON text

Mask words use bit ``i % 64`` of word ``i // 64`` for flattened element ``i``.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np

from smartnet.errors import CheckpointVersionError, ParseError
from smartnet.layers import ConditionalConv2d
from smartnet.masks import MaskPlan, SparsityMask
from smartnet.model import ResNet

MAGIC = b"SMRT"
VERSION = 1
KIND_TENSOR, KIND_MASK, KIND_JSON = 1, 2, 3
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
DTYPE_CODES = {v.newbyteorder("="): k for k, v in DTYPES.items()}


class Writer:
    def __init__(self):
        self.records: list[bytes] = []

    def _head(self, kind: int, name: str) -> bytes:
        raw = name.encode()
        return struct.pack("<BH", kind, len(raw)) + raw

    def tensor(self, name: str, arr: np.ndarray) -> None:
        arr = np.asarray(arr)
        code = DTYPE_CODES.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise TypeError(f"cannot store dtype {arr.dtype}")
        body = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        self.records.append(self._head(KIND_TENSOR, name) + body + arr.astype(DTYPES[code]).tobytes())

    def mask(self, name: str, mask: SparsityMask) -> None:
        words = mask.words
        body = struct.pack("<B", len(mask.shape)) + struct.pack(f"<{len(mask.shape)}Q", *mask.shape)
        body += struct.pack("<Q", words.size) + words.astype("<u8").tobytes()
        self.records.append(self._head(KIND_MASK, name) + body)

    def json(self, name: str, obj: Any) -> None:
        raw = json.dumps(obj, sort_keys=True).encode()
        self.records.append(self._head(KIND_JSON, name) + struct.pack("<Q", len(raw)) + raw)

    def dump(self, fh: BinaryIO) -> None:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(self.records)))
        for rec in self.records:
            fh.write(rec)


def read_records(fh: BinaryIO) -> dict[str, Any]:
    data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointVersionError(f"not a checkpoint (magic {data[:4]!r})")
    if len(data) < 12:
        raise ParseError("truncated checkpoint header", len(data))
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    pos = 12
    out: dict[str, Any] = {}

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ParseError("truncated checkpoint record", pos)
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    def take_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ParseError("truncated checkpoint payload", pos)
        raw = data[pos : pos + n]
        pos += n
        return raw

    for _ in range(count):
        kind, name_len = take("<BH")
        name = take_bytes(name_len).decode()
        if kind == KIND_TENSOR:
            code, ndim = take("<BB")
            shape = take(f"<{ndim}Q")
            dtype = DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(take_bytes(n * dtype.itemsize), dtype=dtype).reshape(shape)
            out[name] = arr.astype(dtype.newbyteorder("="))
        elif kind == KIND_MASK:
            (ndim,) = take("<B")
            shape = take(f"<{ndim}Q")
            (nwords,) = take("<Q")
            words = np.frombuffer(take_bytes(8 * nwords), dtype="<u8")
            out[name] = SparsityMask(shape, words)
        elif kind == KIND_JSON:
            (length,) = take("<Q")
            out[name] = json.loads(take_bytes(length).decode())
        else:
            raise ParseError(f"unknown record kind {kind}", pos)
    return out


def _model_writer(model: ResNet, epoch: int, extra: dict | None) -> Writer:
    w = Writer()
    w.json("meta", {"model": model.config(), "epoch": int(epoch), **(extra or {})})
    for name, arr in model.state_arrays():
        w.tensor(name, arr)
    for name, mc, ma in model.masks():
        w.mask(f"{name}.mask_clean", mc)
        w.mask(f"{name}.mask_adv", ma)
    if model.conditional:
        w.json("rng.noise", model.noise_rng_states())
    return w


def save_checkpoint(path, model: ResNet, epoch: int = 0, extra: dict | None = None) -> None:
    buf = io.BytesIO()
    _model_writer(model, epoch, extra).dump(buf)
    Path(path).write_bytes(buf.getvalue())


def model_from_config(cfg: dict) -> ResNet:
    return ResNet(
        widths=cfg["widths"],
        in_channels=cfg["in_channels"],
        num_classes=cfg["num_classes"],
        input_hw=tuple(cfg["input_hw"]),
        conditional=cfg["conditional"],
        plan=MaskPlan.from_dict(cfg["plan"]),
        seed=cfg["seed"],
        dtype=np.dtype(cfg["dtype"]),
    )


def load_checkpoint(path) -> tuple[ResNet, dict]:
    with open(path, "rb") as fh:
        recs = read_records(fh)
    meta = recs["meta"]
    model = model_from_config(meta["model"])
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, p in params.items():
        p.data = recs[name].astype(p.dtype).reshape(p.shape).copy()
    for name, buf in buffers.items():
        buf[...] = recs[name]
    for name, conv in model.convs():
        if isinstance(conv, ConditionalConv2d):
            conv.mask_clean = recs[f"{name}.mask_clean"]
            conv.mask_adv = recs[f"{name}.mask_adv"]
    if model.conditional and "rng.noise" in recs:
        model.set_noise_rng_states(recs["rng.noise"])
    model.eval()
    return model, meta


def save_masks(path, masks: list[tuple[str, SparsityMask, SparsityMask]], meta: dict) -> None:
    w = Writer()
    w.json("meta", meta)
    for name, mc, ma in masks:
        w.mask(f"{name}.mask_clean", mc)
        w.mask(f"{name}.mask_adv", ma)
    with open(path, "wb") as fh:
        w.dump(fh)


def load_records(path) -> dict[str, Any]:
    with open(path, "rb") as fh:
        return read_records(fh)
