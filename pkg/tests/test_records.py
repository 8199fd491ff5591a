import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from glamseg import records
from glamseg.errors import ContractError

DTYPES = [np.float32, np.float64, np.int64, np.uint8]


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(DTYPES).flatmap(
    lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5))))
def test_roundtrip_bit_exact(arr):
    back = records.decode(records.encode({"x": arr}))["x"]
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_header_layout():
    buf = records.encode({"ab": np.array([1.5], dtype=np.float64)})
    assert buf[:8] == b"GLAMCKPT"
    assert struct.unpack_from("<II", buf, 8) == (1, 1)
    assert struct.unpack_from("<I", buf, 16) == (2,)
    assert buf[20:22] == b"ab"
    assert struct.unpack_from("<BIQ", buf, 22) == (2, 1, 1)
    assert struct.unpack_from("<d", buf, 35) == (1.5,)
    assert len(buf) == 43


def test_order_and_unicode_names_preserved():
    d = {"z": np.zeros(1), "é.a": np.ones((2, 1)), "a": np.arange(3)}
    assert list(records.decode(records.encode(d))) == ["z", "é.a", "a"]


def test_bad_magic():
    with pytest.raises(ContractError, match="magic"):
        records.decode(b"NOTACKPT" + bytes(8))


def test_bad_version():
    with pytest.raises(ContractError, match="version"):
        records.decode(b"GLAMCKPT" + struct.pack("<II", 9, 0))


def test_truncated():
    buf = records.encode({"w": np.ones((4, 4))})
    with pytest.raises(ContractError):
        records.decode(buf[:-8])
    with pytest.raises(ContractError):
        records.decode(buf[:18])


def test_unsupported_dtype():
    with pytest.raises(ContractError):
        records.encode({"c": np.ones(2, dtype=np.complex128)})


def test_file_roundtrip(tmp_path):
    d = {"a": np.arange(6, dtype=np.int64).reshape(2, 3)}
    records.save(tmp_path / "r.bin", d)
    assert np.array_equal(records.load(tmp_path / "r.bin")["a"], d["a"])
