"""``.vckpt`` checkpoint container.

Layout (little-endian):

    offset  size  field
    0       8     magic b"VITAECKP"
    8       4     version (u32, currently 1)
    12      4     J: length of the JSON block (u32)
    16      4     N: number of tensors (u32)
    20      12    reserved, zero
    32      J     JSON block: {"config": <resolved config text>, "epoch", "step", "optimizer": {...}, "meta": {...}}
    32+J    ...   tensor table, N entries of
                    u16 name length L, L bytes UTF-8 name, u8 dtype code (0 f32, 1 f64),
                    u8 ndim, ndim x u32 shape, u64 payload offset, u64 payload bytes
    ...     ...   payloads, concatenated in table order; offsets are relative to the first payload byte
    end-4   4     CRC32 of every preceding byte

Parameter tensors are stored as ``param/<name>``; AdamW moments as
``adam_m/<name>`` and ``adam_v/<name>``.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamWState

MAGIC = b"VITAECKP"
VERSION = 1
HEADER = struct.Struct("<8sIII12x")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    params: dict[str, np.ndarray]
    opt_state: AdamWState | None = None
    epoch: int = 0  # completed epochs
    step: int = 0  # completed optimizer steps
    meta: dict = field(default_factory=dict)

    def run_config(self):
        from .config import RunConfig

        return RunConfig.from_text(self.config_text)


def checkpoint_to_bytes(ck: Checkpoint) -> bytes:
    tensors = [(f"param/{k}", v) for k, v in ck.params.items()]
    opt = None
    if ck.opt_state is not None:
        st = ck.opt_state
        opt = dict(t=st.t, **st.hyper())
        tensors += [(f"adam_m/{k}", v) for k, v in st.m.items()]
        tensors += [(f"adam_v/{k}", v) for k, v in st.v.items()]
    doc = {"config": ck.config_text, "epoch": ck.epoch, "step": ck.step, "optimizer": opt, "meta": ck.meta}
    js = json.dumps(doc, sort_keys=True).encode()
    table, payloads, offset = [], [], 0
    for name, arr in tensors:
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        nb = name.encode()
        table.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<QQ", offset, len(raw)))
        payloads.append(raw)
        offset += len(raw)
    body = HEADER.pack(MAGIC, VERSION, len(js), len(tensors)) + js + b"".join(table) + b"".join(payloads)
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < HEADER.size + 4:
        raise CheckpointError(f"file truncated: {len(buf)} bytes is shorter than the {HEADER.size}-byte header")
    magic, version, jlen, n = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic at offset 0: {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 8")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError(f"CRC mismatch at offset {len(buf) - 4}")
    pos = HEADER.size
    try:
        doc = json.loads(buf[pos : pos + jlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad JSON block at offset {pos}: {exc}") from None
    pos += jlen
    entries = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2 : pos + 2 + ln].decode()
        pos += 2 + ln
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        off, nbytes = struct.unpack_from("<QQ", buf, pos)
        pos += 16
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
        entries.append((name, _DTYPES[code], shape, off, nbytes))
    base = pos
    params, m, v = {}, {}, {}
    for name, dt, shape, off, nbytes in entries:
        start = base + off
        if start + nbytes > len(buf) - 4:
            raise CheckpointError(f"tensor {name} payload at offset {start} runs past the end of the file")
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=start).reshape(shape)
        arr = arr.astype(dt.newbyteorder("="))
        kind, key = name.split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v}[kind][key] = arr
    opt = doc.get("optimizer")
    state = None
    if opt is not None:
        state = AdamWState(m, v, opt["t"], opt["beta1"], opt["beta2"], opt["eps"], opt["weight_decay"])
    return Checkpoint(doc["config"], params, state, doc["epoch"], doc["step"], doc.get("meta", {}))


def save_checkpoint(path, ck: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_to_bytes(ck))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def describe(ck: Checkpoint) -> dict:
    """Summary used by ``inspect-checkpoint``."""
    n = sum(int(a.size) for a in ck.params.values())
    dtypes = sorted({str(a.dtype) for a in ck.params.values()})
    return {
        "epoch": ck.epoch,
        "step": ck.step,
        "tensors": len(ck.params),
        "parameters": n,
        "dtypes": dtypes,
        "optimizer_steps": ck.opt_state.t if ck.opt_state else None,
        "meta": ck.meta,
    }
