from __future__ import annotations

import numpy as np
import pytest

from stcnet.data import (
    BlobSpec,
    NpyFormatError,
    advance_with_rebound,
    generate_moving_blobs,
    load_npy,
    save_npy,
)


# ---------------------------------------------------------------------------
# generator


def test_same_seed_bit_identical():
    spec = BlobSpec(seed=123)
    a = generate_moving_blobs(spec)
    b = generate_moving_blobs(spec)
    np.testing.assert_array_equal(a.frames, b.frames)


def test_different_seed_differs():
    a = generate_moving_blobs(BlobSpec(seed=1))
    b = generate_moving_blobs(BlobSpec(seed=2))
    assert not np.array_equal(a.frames, b.frames)


def test_shapes_and_value_set():
    spec = BlobSpec(canvas=(16, 16), n_objects=2, object_size=3, t_total=8,
                    seed=5, intensity=0.75, n_train=3, n_test=1)
    batch = generate_moving_blobs(spec)
    assert batch.frames.shape == (4, 8, 1, 16, 16)
    assert set(np.unique(batch.frames)) <= {0.0, 0.75}
    assert batch.train.shape[0] == 3 and batch.test.shape[0] == 1


def test_rebound_reflects_velocity_component():
    # object at x=0 moving at -2: next position +2, velocity flipped to +2
    pos, vel = advance_with_rebound(np.array([[0.0, 5.0]]), np.array([[-2.0, 0.0]]),
                                    np.array([10.0, 10.0]))
    np.testing.assert_array_equal(pos, [[2.0, 5.0]])
    np.testing.assert_array_equal(vel, [[2.0, 0.0]])


def test_rebound_preserves_speed_and_bounds(rng):
    limits = np.array([13.0, 13.0])
    pos = rng.uniform(0, 13, size=(6, 2))
    vel = rng.normal(0, 1.5, size=(6, 2))
    speed = np.linalg.norm(vel, axis=1)
    for _ in range(200):
        pos, vel = advance_with_rebound(pos, vel, limits)
        assert np.all(pos >= 0.0) and np.all(pos <= limits)
        np.testing.assert_allclose(np.linalg.norm(vel, axis=1), speed, rtol=1e-12)


def test_objects_never_leave_canvas():
    spec = BlobSpec(canvas=(16, 16), object_size=3, t_total=64,
                    speed_range=(1.0, 3.0), seed=9, n_train=8, n_test=0)
    batch = generate_moving_blobs(spec)
    # a lit pixel outside the canvas would have thrown an indexing error; also
    # every frame must contain at least one full object
    per_frame = batch.frames.sum(axis=(2, 3, 4))
    assert np.all(per_frame >= spec.object_size ** 2)


def test_oversized_object_rejected():
    with pytest.raises(ValueError, match="fit"):
        BlobSpec(canvas=(8, 8), object_size=9)


# ---------------------------------------------------------------------------
# NPY I/O


@pytest.mark.parametrize("dtype", [np.float64, np.float32, np.uint8])
def test_npy_roundtrip(tmp_path, rng, dtype):
    arr = (rng.uniform(0, 255, size=(3, 4, 5))).astype(dtype)
    path = tmp_path / "a.npy"
    save_npy(path, arr)
    back = load_npy(path)
    assert back.dtype == arr.dtype
    np.testing.assert_array_equal(back, arr)


def test_npy_interop_with_numpy(tmp_path, rng):
    arr = rng.normal(size=(2, 3, 4))
    ours = tmp_path / "ours.npy"
    save_npy(ours, arr)
    np.testing.assert_array_equal(np.load(ours), arr)

    theirs = tmp_path / "theirs.npy"
    np.save(theirs, arr)
    np.testing.assert_array_equal(load_npy(theirs), arr)


def test_npy_uint8_scaling(tmp_path):
    path = tmp_path / "u.npy"
    save_npy(path, np.array([0, 128, 255], dtype=np.uint8))
    scaled = load_npy(path, scale_uint8=True)
    assert scaled.dtype == np.float64
    np.testing.assert_allclose(scaled, [0.0, 128 / 255, 1.0])


def test_npy_truncation_names_missing_bytes(tmp_path, rng):
    path = tmp_path / "t.npy"
    save_npy(path, rng.normal(size=(4, 4)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(NpyFormatError, match="16 missing"):
        load_npy(path)


def test_npy_bad_magic(tmp_path):
    path = tmp_path / "b.npy"
    path.write_bytes(b"garbage-not-npy")
    with pytest.raises(NpyFormatError, match="magic"):
        load_npy(path)


def test_npy_unsupported_dtype(tmp_path):
    path = tmp_path / "c.npy"
    np.save(path, np.arange(4, dtype=np.int32))
    with pytest.raises(NpyFormatError, match="dtype"):
        load_npy(path)


def test_npy_fortran_order_rejected(tmp_path):
    path = tmp_path / "f.npy"
    np.save(path, np.asfortranarray(np.ones((3, 3))))
    with pytest.raises(NpyFormatError, match="fortran"):
        load_npy(path)


def test_npy_rank_limit(tmp_path):
    path = tmp_path / "r.npy"
    np.save(path, np.zeros((1, 1, 1, 1, 1, 1)))
    with pytest.raises(NpyFormatError, match="rank"):
        load_npy(path)
    with pytest.raises(NpyFormatError, match="rank"):
        save_npy(path, np.zeros((1, 1, 1, 1, 1, 1)))
