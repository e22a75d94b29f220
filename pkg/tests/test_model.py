import json
import struct

import numpy as np
import pytest

from losa.adapters import Adapter
from losa.errors import CheckpointError, ShapeError
from losa.masks import Mask
from losa.model import (
    CalibBatch,
    LayerStack,
    encode_checkpoint,
    forward_capture,
    load_calib,
    load_checkpoint,
    make_calib,
    make_synthetic,
    save_checkpoint,
)


def test_forward_identity_layer(rng):
    batch = CalibBatch(rng.standard_normal((5, 3)))
    maps = forward_capture(LayerStack([np.eye(3)]), batch)
    np.testing.assert_array_equal(maps.outputs[0], batch.inputs)
    np.testing.assert_array_equal(maps.inputs[0], batch.inputs)


def test_forward_zero_weights(rng):
    stack = make_synthetic(3, [4, 5, 5, 2], seed=0, sigma=0.0)
    maps = forward_capture(stack, CalibBatch(rng.standard_normal((6, 4))))
    assert all(np.all(y == 0.0) for y in maps.outputs)
    assert all(np.all(x == 0.0) for x in maps.inputs[1:])


def test_forward_matches_hand_composition(rng):
    stack = make_synthetic(3, [4, 6, 5, 3], seed=11)
    x = rng.standard_normal((9, 4))
    maps = forward_capture(stack, CalibBatch(x))
    w1, w2, w3 = stack.weights
    y1 = np.array([[sum(x[s, k] * w1[o, k] for k in range(4)) for o in range(6)] for s in range(9)])
    h1 = np.where(y1 > 0, y1, 0.0)
    y2 = h1 @ w2.T
    h2 = np.where(y2 > 0, y2, 0.0)
    y3 = h2 @ w3.T
    for got, ref in zip(maps.outputs, (y1, y2, y3)):
        assert np.max(np.abs(got - ref)) < 1e-12
    maps.check()
    assert maps.samples == 9


def test_forward_identity_activation(rng):
    stack = make_synthetic(2, [3, 4, 2], seed=1)
    x = rng.standard_normal((5, 3))
    maps = forward_capture(stack, CalibBatch(x), activation="identity")
    np.testing.assert_allclose(maps.outputs[1], x @ stack.weights[0].T @ stack.weights[1].T, atol=1e-12)


def test_forward_does_not_mutate(rng, small_stack, small_calib):
    before = [w.copy() for w in small_stack.weights]
    forward_capture(small_stack, small_calib)
    for a, b in zip(before, small_stack.weights):
        np.testing.assert_array_equal(a, b)


def test_forward_shape_mismatch(small_stack):
    with pytest.raises(ShapeError):
        forward_capture(small_stack, CalibBatch(np.ones((4, 7))))


def test_make_synthetic_shapes_and_determinism():
    stack = make_synthetic(2, [8, 16, 8], seed=3, sigma=0.1)
    assert [w.shape for w in stack.weights] == [(16, 8), (8, 16)]
    again = make_synthetic(2, [8, 16, 8], seed=3, sigma=0.1)
    for a, b in zip(stack.weights, again.weights):
        np.testing.assert_array_equal(a, b)
    assert all(np.all(w == 0.0) for w in make_synthetic(2, [8, 16, 8], 3, 0.0).weights)
    with pytest.raises(ShapeError):
        make_synthetic(3, [8, 16, 8], seed=3)


def test_stack_rejects_broken_chain():
    with pytest.raises(ShapeError):
        LayerStack([np.ones((4, 3)), np.ones((2, 5))])


def test_calib_needs_two_samples():
    with pytest.raises(ShapeError):
        CalibBatch(np.ones((1, 3)))


def test_load_calib_formats(tmp_path, rng):
    x = rng.standard_normal((4, 3))
    np.save(tmp_path / "c.npy", x)
    np.testing.assert_array_equal(load_calib(tmp_path / "c.npy").inputs, x)
    np.savetxt(tmp_path / "c.csv", x, delimiter=",")
    np.testing.assert_allclose(load_calib(tmp_path / "c.csv").inputs, x, rtol=1e-15)
    assert make_calib(5, 3, 0).inputs.shape == (5, 3)


def _full_checkpoint(rng):
    stack = make_synthetic(2, [4, 6, 3], seed=2)
    adapters = [Adapter(rng.standard_normal((6, 2)), rng.standard_normal((2, 4))),
                Adapter(np.zeros((3, 0)), np.zeros((0, 6)))]
    masks = [Mask(rng.random((6, 4)) > 0.5), Mask(rng.random((3, 6)) > 0.5)]
    return stack, adapters, masks


def test_checkpoint_round_trip_is_byte_stable(tmp_path, rng):
    stack, adapters, masks = _full_checkpoint(rng)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, stack, adapters, masks, meta={"mode": "losa"})
    ck = load_checkpoint(p1)
    save_checkpoint(p2, ck.stack, ck.adapters, ck.masks, meta=ck.meta)
    assert p1.read_bytes() == p2.read_bytes()
    for w, w2 in zip(stack.weights, ck.stack.weights):
        # widened f32 values stay within one f32 ulp of the f64 originals
        assert np.all(np.abs(w - w2) <= np.spacing(np.abs(w).astype(np.float32)).astype(np.float64))
    for m, m2 in zip(masks, ck.masks):
        np.testing.assert_array_equal(m.bits, m2.bits)
    assert ck.adapters[1].rank == 0
    assert ck.meta == {"mode": "losa"}


def test_checkpoint_exact_for_f32_values(tmp_path, rng):
    ws = [rng.standard_normal((5, 3)).astype(np.float32).astype(np.float64),
          rng.standard_normal((2, 5)).astype(np.float32).astype(np.float64)]
    save_checkpoint(tmp_path / "m.ckpt", LayerStack(ws, ["first", "second"]))
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.stack.names == ["first", "second"]
    assert ck.adapters is None and ck.masks is None
    for a, b in zip(ws, ck.stack.weights):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_layout(rng):
    stack, _, _ = _full_checkpoint(rng)
    raw = encode_checkpoint(stack)
    assert raw[:8] == b"LOSACKPT"
    (n,) = struct.unpack("<I", raw[8:12])
    manifest = json.loads(raw[12 : 12 + n])
    first = manifest["tensors"][0]
    assert first == {"name": "layer0.W", "shape": [6, 4], "dtype": "f32", "offset": 0, "nbytes": 96}
    blob = raw[12 + n :]
    np.testing.assert_array_equal(
        np.frombuffer(blob[:96], "<f4").reshape(6, 4), stack.weights[0].astype(np.float32)
    )


def test_checkpoint_truncated(tmp_path, rng):
    stack, adapters, masks = _full_checkpoint(rng)
    raw = encode_checkpoint(stack, adapters, masks)
    (tmp_path / "t.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "m.ckpt")
    (tmp_path / "h.ckpt").write_bytes(raw[:20])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "h.ckpt")


def test_checkpoint_manifest_inconsistency(tmp_path, rng):
    stack, _, _ = _full_checkpoint(rng)
    raw = encode_checkpoint(stack)
    (n,) = struct.unpack("<I", raw[8:12])
    manifest = json.loads(raw[12 : 12 + n])
    manifest["tensors"][0]["shape"] = [5, 4]
    head = json.dumps(manifest).encode()
    (tmp_path / "bad.ckpt").write_bytes(raw[:8] + struct.pack("<I", len(head)) + head + raw[12 + n :])
    with pytest.raises(CheckpointError, match="nbytes"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "nope.ckpt")
