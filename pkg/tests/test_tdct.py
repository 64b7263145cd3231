import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from tuckerconv.tdct import TensorFileError, from_bytes, read_tensor, to_bytes, write_tensor


@given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=1, max_dims=4),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_bit_identical(a):
    b = from_bytes(to_bytes(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_header_layout():
    buf = to_bytes(np.zeros((2, 3), dtype=np.float32))
    assert buf[:4] == b"TDCT" and buf[4] == 1 and buf[5] == 1 and buf[6] == 2
    assert int.from_bytes(buf[7:15], "little") == 2
    assert len(buf) == 7 + 16 + 24


def test_file_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    write_tensor(a, tmp_path / "a.tdct")
    np.testing.assert_array_equal(read_tensor(tmp_path / "a.tdct"), a)
    assert not list(tmp_path.glob("*.part"))


def test_f32_widening_exact(tmp_path):
    a = np.random.default_rng(1).standard_normal(10).astype(np.float32)
    write_tensor(a, tmp_path / "a.tdct")
    b = read_tensor(tmp_path / "a.tdct", dtype=np.float64)
    assert b.dtype == np.float64
    np.testing.assert_array_equal(b.astype(np.float32), a)


def test_truncated_payload(tmp_path):
    buf = to_bytes(np.ones((4, 4)))
    (tmp_path / "t.tdct").write_bytes(buf[:-3])
    with pytest.raises(TensorFileError, match="payload"):
        read_tensor(tmp_path / "t.tdct")


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XDCT" + b[4:], "magic"),
    (lambda b: b[:4] + bytes([2]) + b[5:], "version"),
    (lambda b: b[:5] + bytes([9]) + b[6:], "dtype"),
    (lambda b: b[:9], "header"),
])
def test_malformed_headers(mutate, msg):
    with pytest.raises(TensorFileError, match=msg):
        from_bytes(mutate(to_bytes(np.ones((3, 3)))))


def test_unsupported_dtype():
    with pytest.raises(TensorFileError):
        to_bytes(np.ones(3, dtype=np.int32))
