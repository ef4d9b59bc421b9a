import struct

import numpy as np
import pytest

from ifsdlab.checkpoint import (
    MAGIC,
    STORE_MAGIC,
    VERSION,
    CheckpointError,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
    save_checkpoint,
)
from ifsdlab.detector import PARAM_ORDER, init_detector, register_classes
from ifsdlab.losses import precompute_distill_targets


@pytest.fixture
def state():
    s = init_detector(8, [0, 1, 2], seed=9)
    rng = np.random.default_rng(1)
    for k in s.params:
        s.params[k] = s.params[k] + rng.normal(size=s.params[k].shape)
    return register_classes(s, [7])


def same_state(a, b):
    return a.classes == b.classes and a.seed == b.seed and all(
        a.params[k].dtype == b.params[k].dtype and np.array_equal(a.params[k], b.params[k]) for k in PARAM_ORDER)


def test_roundtrip_without_store(state, tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, state)
    back, store = load_checkpoint(path)
    assert store is None and same_state(state, back)
    assert checkpoint_bytes(back) == path.read_bytes()


def test_header_layout(state):
    buf = checkpoint_bytes(state)
    assert buf[:8] == MAGIC
    assert struct.unpack("<I", buf[8:12])[0] == VERSION
    d_in, d_feat, hidden, d_obj, n = struct.unpack("<5I", buf[12:32])
    assert (d_in, d_feat, hidden, d_obj) == state.dims and n == 4
    assert struct.unpack("<q", buf[32:40])[0] == 9
    assert list(np.frombuffer(buf[40:72], "<i8")) == [0, 1, 2, 7]
    n_params = sum(state.params[k].size for k in PARAM_ORDER)
    assert len(buf) == 72 + 8 * n_params + 1 and buf[-1] == 0


def test_store_section_roundtrip(state, small_world):
    store = precompute_distill_targets(state, small_world.base, 20.0)
    buf = checkpoint_bytes(state, store)
    assert STORE_MAGIC in buf
    back, back_store = checkpoint_from_bytes(buf)
    assert same_state(state, back)
    assert back_store.old_classes == store.old_classes and back_store.temperature == 20.0
    assert back_store.include_background and back_store.targets.keys() == store.targets.keys()
    assert all(np.array_equal(store.targets[k], back_store.targets[k]) for k in store.targets)
    # targets recomputed from the restored model are bit-identical
    again = precompute_distill_targets(back, small_world.base, 20.0)
    assert checkpoint_bytes(back, again) == buf
    no_bg = precompute_distill_targets(state, small_world.base, 20.0, include_background=False)
    assert checkpoint_from_bytes(checkpoint_bytes(state, no_bg))[1].width == 4


def test_rejects_corrupt_input(state):
    buf = checkpoint_bytes(state)
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_from_bytes(b"NOTACKPT" + buf[8:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_from_bytes(buf[:8] + struct.pack("<I", 99) + buf[12:])
    for cut in (4, 30, 100, len(buf) - 1):
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint_from_bytes(buf[:cut])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint_from_bytes(buf + b"\0")


def test_rejects_mismatched_shapes(state):
    bad = state.copy()
    bad.params["cls.b"] = np.zeros(2)
    with pytest.raises(CheckpointError):
        checkpoint_bytes(bad)
