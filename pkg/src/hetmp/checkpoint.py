"""Versioned binary checkpoints.

Layout (little-endian)::

    b"HGCK" | u32 version | u32 blob count
    per blob: u16 name length | name (utf-8) | u8 dtype code | u32 rows | u32 cols | data
    u32 CRC-32 of everything above
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .layers import LayerParams
from .tensor import Tensor
from .train import AdamW, TrainState

MAGIC = b"HGCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


class CheckpointError(ValueError):
    pass


def _blob(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim == 0:
        arr = arr.reshape(1, 1)
    code = {"f4": 0, "f8": 1, "i8": 2, "u1": 3, "b1": 3}.get(f"{arr.dtype.kind}{arr.dtype.itemsize}")
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
    raw = name.encode()
    body = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return struct.pack("<H", len(raw)) + raw + struct.pack("<BII", code, *arr.shape) + body


def _text(name: str, text: str) -> bytes:
    return _blob(name, np.frombuffer(text.encode(), dtype=np.uint8))


def checkpoint_save(state: TrainState, path) -> None:
    blobs = []
    for name, t in state.named_parameters():
        blobs.append(_blob(f"param/{name}", t.data))
    opt = state.optimizer
    for name in sorted(opt.m):
        blobs.append(_blob(f"adam_m/{name}", opt.m[name]))
        blobs.append(_blob(f"adam_v/{name}", opt.v[name]))
    if state.best_snapshot is not None:
        for name, arr in state.best_snapshot.items():
            blobs.append(_blob(f"best/{name}", arr))
    ints = np.array([state.seed, state.epoch, state.best_epoch, state.bad_epochs, opt.t], dtype=np.int64)
    blobs.append(_blob("meta/counters", ints))
    hyper = np.array([state.best_valid, opt.lr, opt.weight_decay, opt.beta1, opt.beta2, opt.eps])
    blobs.append(_blob("meta/floats", hyper))
    trainable = np.array([t.requires_grad for _, t in state.named_parameters()], dtype=np.uint8)
    blobs.append(_blob("meta/trainable", trainable))
    blobs.append(_text("meta/config", state.config_text))
    blobs.append(_text("meta/history", json.dumps(state.meta.get("history", []), sort_keys=True)))
    head = MAGIC + struct.pack("<II", VERSION, len(blobs))
    payload = head + b"".join(blobs)
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def _read_blobs(raw: bytes, path) -> dict[str, np.ndarray]:
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError(f"{path}: corrupt or truncated (checksum mismatch)")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode()
            pos += n
            code, rows, cols = struct.unpack_from("<BII", raw, pos)
            pos += 9
            dt = _DTYPES[code]
            size = rows * cols * dt.itemsize
            if pos + size > len(raw) - 4:
                raise CheckpointError(f"{path}: blob {name!r} runs past the end")
            out[name] = np.frombuffer(raw, dtype=dt, count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if pos != len(raw) - 4:
        raise CheckpointError(f"{path}: trailing bytes after the last blob")
    return out


def _as_native(arr: np.ndarray) -> np.ndarray:
    return arr.astype(arr.dtype.newbyteorder("="))


def checkpoint_load(path) -> TrainState:
    raw = Path(path).read_bytes()
    blobs = _read_blobs(raw, path)
    trainable = iter(blobs["meta/trainable"].reshape(-1).astype(bool))
    layers: dict[int, LayerParams] = {}
    embeddings = {}
    for name, arr in blobs.items():
        if not name.startswith("param/"):
            continue
        parts = name.split("/")[1:]
        t = Tensor(_as_native(arr), requires_grad=bool(next(trainable)), name="/".join(parts[1:]))
        if parts[0] == "emb":
            embeddings[parts[1]] = t
            continue
        lp = layers.setdefault(int(parts[0][len("layer"):]), LayerParams())
        group, key = parts[1], parts[2]
        if group in ("ln_out", "ln_in"):
            pair = getattr(lp, group).get(key, (None, None))
            pair = (t, pair[1]) if parts[3] == "gamma" else (pair[0], t)
            getattr(lp, group)[key] = pair
        elif group == "msgnorm":
            lp.msg_scale[key] = t
        else:
            getattr(lp, group)[key] = t
    seed, epoch, best_epoch, bad, steps = (int(v) for v in blobs["meta/counters"].reshape(-1))
    best_valid, lr, wd, b1, b2, eps = (float(v) for v in blobs["meta/floats"].reshape(-1))
    opt = AdamW(lr, wd, (b1, b2), eps)
    opt.t = steps
    for name, arr in blobs.items():
        if name.startswith("adam_m/"):
            opt.m[name[7:]] = _as_native(arr)
        elif name.startswith("adam_v/"):
            opt.v[name[7:]] = _as_native(arr)
    best = {name[5:]: _as_native(arr) for name, arr in blobs.items() if name.startswith("best/")}
    state = TrainState(
        params=[layers[i] for i in sorted(layers)],
        embeddings=embeddings,
        optimizer=opt,
        seed=seed,
        epoch=epoch,
        best_valid=best_valid,
        best_epoch=best_epoch,
        bad_epochs=bad,
        best_snapshot=best or None,
        config_text=blobs["meta/config"].tobytes().decode(),
    )
    state.meta["history"] = json.loads(blobs["meta/history"].tobytes().decode())
    return state
