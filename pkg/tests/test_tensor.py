import io

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from ccdc.tensor import (
    MAGIC, ShapeError, as_tensor, deserialize, elementwise, load, make_rng, rand_normal,
    rand_uniform, resize_backward, resize_to, save, serialize, split_seed,
)

finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)
shapes = hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5)


def test_elementwise_examples():
    np.testing.assert_array_equal(elementwise(np.array([1.0, 2]), np.array([3.0, 4]), "add"), [4, 6])
    np.testing.assert_array_equal(elementwise(np.array([2.0, 3]), np.array([0.5, -1]), "mul"), [1, -3])
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(elementwise(x, x, "sub"), np.zeros((2, 3)))


def test_elementwise_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        elementwise(np.zeros(2), np.zeros(3), "add")
    with pytest.raises(ValueError, match="unknown op"):
        elementwise(np.zeros(2), np.zeros(2), "div")


@given(st.data(), shapes)
def test_elementwise_shape_preserving_and_commutative(data, shape):
    a = data.draw(hnp.arrays(np.float32, shape, elements=finite32))
    b = data.draw(hnp.arrays(np.float32, shape, elements=finite32))
    for op in ("add", "mul"):
        r = elementwise(a, b, op)
        assert r.shape == shape
        np.testing.assert_array_equal(r, elementwise(b, a, op))


def test_as_tensor_rejects_empty_dims():
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((2, 0)))
    assert as_tensor([[1, 2]]).dtype == np.float32


def test_resize_examples():
    np.testing.assert_array_equal(resize_to(np.ones((1, 1, 4, 4)), 2, 2), np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(resize_to(np.array([[[[1.0, 3], [5, 7]]]]), 1, 1), [[[[4.0]]]])


def test_resize_matches_brute_force_block_mean(rng):
    x = rng.normal(size=(1, 1, 128, 128))
    y = resize_to(x, 32, 32)
    ref = np.empty((32, 32))
    for i in range(32):
        for j in range(32):
            ref[i, j] = x[0, 0, 4 * i:4 * i + 4, 4 * j:4 * j + 4].mean()
    np.testing.assert_allclose(y[0, 0], ref, rtol=1e-12)


def test_resize_identity_and_errors(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    assert resize_to(x, 8, 8) is x
    with pytest.raises(ShapeError):
        resize_to(x, 3, 3)


def test_resize_backward_is_adjoint(rng):
    x = rng.normal(size=(2, 3, 8, 12))
    dy = rng.normal(size=(2, 3, 2, 3))
    lhs = np.sum(resize_to(x, 2, 3) * dy)
    rhs = np.sum(x * resize_backward(dy, 8, 12))
    assert abs(lhs - rhs) < 1e-12


def test_rng_determinism_and_statistics():
    a = rand_normal(make_rng(7), (100,), 0, 1)
    b = rand_normal(make_rng(7), (100,), 0, 1)
    np.testing.assert_array_equal(a, b)
    u = rand_uniform(make_rng(1), [10_000], 0, 1)
    assert abs(u.mean() - 0.5) < 0.02 and u.min() >= 0 and u.max() < 1
    n = rand_normal(make_rng(1), [10_000], 0, 1)
    assert abs(n.std() - 1.0) < 0.05


def test_rng_preconditions():
    with pytest.raises(ValueError):
        rand_uniform(make_rng(0), (3,), 1, 1)
    with pytest.raises(ValueError):
        rand_normal(make_rng(0), (3,), 0, 0)


def test_split_seed_streams_are_independent_of_siblings():
    a = split_seed(5, ["init", "aug"])
    b = split_seed(5, ["aug", "data_train", "init"])
    assert a["init"] == b["init"] and a["aug"] == b["aug"]
    assert a["init"] != a["aug"]
    assert split_seed(6, ["init"])["init"] != a["init"]


@given(hnp.arrays(np.float32, shapes, elements=finite32))
def test_serialize_round_trip_bit_identical(t):
    back = deserialize(serialize(t))
    assert back.shape == t.shape
    assert back.tobytes() == np.ascontiguousarray(t).tobytes()


def test_file_format_layout(tmp_path):
    t = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = serialize(t)
    assert blob[:7] == MAGIC
    assert np.frombuffer(blob[7:11], "<u4")[0] == 2
    assert list(np.frombuffer(blob[11:19], "<u4")) == [2, 3]
    assert np.frombuffer(blob[19:], "<f4").tolist() == list(range(6))
    save(tmp_path / "t.t", t)
    np.testing.assert_array_equal(load(tmp_path / "t.t"), t)


def test_bad_magic_and_truncation():
    with pytest.raises(ValueError, match="magic"):
        deserialize(b"XXXXXXX" + bytes(8))
    with pytest.raises(ValueError, match="truncated"):
        deserialize(serialize(np.ones((4,), np.float32))[:-2])
    with pytest.raises(ValueError):
        deserialize(io.BytesIO().getvalue() + MAGIC[:3])
