"""Binary checkpoints for detector states, with an optional distillation-target section.

Layout (all little-endian):
    b"IFSDCKPT" | u32 version | u32 d_in, d_feat, hidden, d_obj, n_classes | i64 seed
    | i64 class ids | f64 parameters in PARAM_ORDER | u8 has_store
    [ b"KDSTORE\\0" | f64 temperature | u8 include_background | u32 n_old | i64 old ids
      | u32 n_entries | (i64 scene_id, i64 instance, f64 * width) per entry, sorted by key ]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .detector import PARAM_ORDER, DetectorState
from .losses import DistillTargetStore

MAGIC = b"IFSDCKPT"
STORE_MAGIC = b"KDSTORE\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _shapes(d_in, d_feat, hidden, d_obj, n_cls):
    rows = n_cls + 1
    return {
        "agnostic.W": (d_in, d_feat),
        "cse.W1": (d_feat, hidden), "cse.b1": (hidden,),
        "cse.W2": (hidden, d_obj), "cse.b2": (d_obj,),
        "objectness.w": (d_obj,), "objectness.b": (1,),
        "cls.W": (rows, d_obj), "cls.b": (rows,),
        "box.W": (d_obj, 4), "box.b": (4,),
    }


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _i64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<i8").tobytes()


def checkpoint_bytes(state: DetectorState, store: DistillTargetStore | None = None) -> bytes:
    d_in, d_feat, hidden, d_obj = state.dims
    out = [MAGIC, struct.pack("<I", VERSION),
           struct.pack("<5I", d_in, d_feat, hidden, d_obj, state.num_classes),
           struct.pack("<q", state.seed), _i64(list(state.classes))]
    shapes = _shapes(d_in, d_feat, hidden, d_obj, state.num_classes)
    for k in PARAM_ORDER:
        if state.params[k].shape != shapes[k]:
            raise CheckpointError(f"{k} has shape {state.params[k].shape}, expected {shapes[k]}")
        out.append(_f64(state.params[k]))
    out.append(struct.pack("<B", store is not None))
    if store is not None:
        out += [STORE_MAGIC, struct.pack("<d", store.temperature), struct.pack("<B", store.include_background),
                struct.pack("<I", len(store.old_classes)), _i64(list(store.old_classes)),
                struct.pack("<I", len(store))]
        for key in sorted(store.targets):
            vec = np.asarray(store.targets[key])
            if vec.shape != (store.width,):
                raise CheckpointError(f"target {key} has width {vec.shape}, expected {store.width}")
            out += [_i64(list(key)), _f64(vec)]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype=dtype).astype(dtype[1:]).copy()


def checkpoint_from_bytes(buf: bytes) -> tuple[DetectorState, DistillTargetStore | None]:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a detector checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    d_in, d_feat, hidden, d_obj, n_cls = r.unpack("<5I")
    (seed,) = r.unpack("<q")
    classes = tuple(int(c) for c in r.array("<i8", n_cls))
    params = {}
    for k, shape in _shapes(d_in, d_feat, hidden, d_obj, n_cls).items():
        params[k] = r.array("<f8", int(np.prod(shape))).reshape(shape)
    state = DetectorState({k: params[k] for k in PARAM_ORDER}, classes, seed)
    (has_store,) = r.unpack("<B")
    store = None
    if has_store:
        if r.take(len(STORE_MAGIC)) != STORE_MAGIC:
            raise CheckpointError("corrupt distillation section")
        (T,) = r.unpack("<d")
        (bg,) = r.unpack("<B")
        (n_old,) = r.unpack("<I")
        old = tuple(int(c) for c in r.array("<i8", n_old))
        (n,) = r.unpack("<I")
        width = n_old + bg
        targets = {}
        for _ in range(n):
            sid, inst = (int(v) for v in r.array("<i8", 2))
            targets[(sid, inst)] = r.array("<f8", width)
        store = DistillTargetStore(targets, T, old, bool(bg))
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    return state, store


def save_checkpoint(path: str | Path, state: DetectorState, store: DistillTargetStore | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(state, store))


def load_checkpoint(path: str | Path) -> tuple[DetectorState, DistillTargetStore | None]:
    return checkpoint_from_bytes(Path(path).read_bytes())
