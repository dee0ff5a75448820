from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from l2i.errors import FormatError, IoError, SerializationError
from l2i.numerics import (MAGIC, SeededRng, TensorBlob, array_digest, load_blobs, load_container,
                          save_blobs)

GOLDEN = Path(__file__).parent / "data" / "rng_seed42_first1000.txt"

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


def test_roundtrip_zeros(tmp_path):
    blob = TensorBlob.from_array("z", np.zeros((2, 3)))
    save_blobs([blob], tmp_path / "z.l2im")
    assert load_blobs(tmp_path / "z.l2im") == [blob]


def test_empty_list(tmp_path):
    save_blobs([], tmp_path / "e.l2im")
    assert load_blobs(tmp_path / "e.l2im") == []


def test_shape_mismatch_rejected(tmp_path):
    with pytest.raises(SerializationError):
        save_blobs([TensorBlob("bad", (2, 2), np.zeros(3))], tmp_path / "b.l2im")


def test_non_finite_rejected(tmp_path):
    with pytest.raises(SerializationError):
        save_blobs([TensorBlob.from_array("n", np.array([1.0, np.nan]))], tmp_path / "n.l2im")


def test_too_many_dims_rejected(tmp_path):
    with pytest.raises(SerializationError):
        save_blobs([TensorBlob.from_array("d", np.zeros((1, 1, 1, 1, 1)))], tmp_path / "d.l2im")


def test_wrong_magic(tmp_path):
    path = tmp_path / "m.l2im"
    save_blobs([TensorBlob.from_array("a", np.ones(4))], path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_blobs(path)


def test_wrong_version(tmp_path):
    path = tmp_path / "v.l2im"
    save_blobs([TensorBlob.from_array("a", np.ones(4))], path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_blobs(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.l2im"
    save_blobs([TensorBlob.from_array("a", np.arange(10.0))], path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_blobs(path)


def test_manifest_length_past_end(tmp_path):
    path = tmp_path / "l.l2im"
    path.write_bytes(MAGIC + bytes([1]) + (10_000).to_bytes(8, "little") + b"{}")
    with pytest.raises(FormatError):
        load_blobs(path)


def test_missing_file(tmp_path):
    with pytest.raises(IoError):
        load_blobs(tmp_path / "absent.l2im")


def test_unwritable(tmp_path):
    with pytest.raises(IoError):
        save_blobs([], tmp_path / "no" / "such" / "dir.l2im")


def test_meta_survives(tmp_path):
    save_blobs([], tmp_path / "m.l2im", {"kind": "x", "k": [1, 2]})
    assert load_container(tmp_path / "m.l2im")[1] == {"kind": "x", "k": [1, 2]}


def test_payload_layout_is_row_major_le(tmp_path):
    a = np.arange(6.0).reshape(2, 3)
    path = tmp_path / "r.l2im"
    save_blobs([TensorBlob.from_array("a", a)], path)
    assert path.read_bytes()[-48:] == a.astype("<f8").tobytes()


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5), elements=finite))
def test_roundtrip_bit_exact(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("rt") / "a.l2im"
    save_blobs([TensorBlob.from_array("a", a), TensorBlob.from_array("b", -a)], path)
    out = load_blobs(path)
    assert out[0].array().tobytes() == a.tobytes()
    assert out[1].array().shape == a.shape


def test_golden_stream():
    lines = [ln for ln in GOLDEN.read_text().splitlines() if not ln.startswith("#")]
    expected = np.array([float.fromhex(v) for v in lines])
    assert expected.size == 1000
    assert np.array_equal(SeededRng(42).random(1000), expected)


def test_child_streams_differ():
    a = SeededRng(42).child(1).random(5)
    b = SeededRng(42).child(2).random(5)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, SeededRng(42, 1).random(5))


def test_uniform_open0_excludes_zero():
    u = SeededRng(3).uniform_open0(10_000)
    assert u.min() > 0 and u.max() <= 1


def test_digest_order_independent():
    a, b = np.ones(3), np.zeros((2, 2))
    assert array_digest({"a": a, "b": b}) == array_digest({"b": b, "a": a})
    assert array_digest({"a": a}) != array_digest({"a": a + 1e-12})
