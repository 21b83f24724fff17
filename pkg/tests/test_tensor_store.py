import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from extsub.errors import IoFailure, MalformedHeader, OffsetOverlap, ShapeUnsupported, UnknownDtype
from extsub.tensor_store import (
    DType,
    TensorEntry,
    TensorStore,
    deserialize,
    encode,
    load,
    save,
    serialize,
    to_compute,
)

from helpers import bf16_round_reference, bf16_table, lora_store


def _raw_file(header: dict, data: bytes = b"") -> bytes:
    raw = json.dumps(header).encode()
    return struct.pack("<Q", len(raw)) + raw + data


def test_dtype_widths():
    assert [DType.F64.width, DType.F32.width, DType.F16.width, DType.BF16.width] == [8, 4, 2, 2]


def test_identity_matrix_roundtrip(tmp_path):
    path = tmp_path / "w.safetensors"
    path.write_bytes(
        _raw_file(
            {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}},
            np.array([1, 0, 0, 1], "<f4").tobytes(),
        )
    )
    store = load(path)
    assert store.names() == ["w"]
    assert store["w"].shape == (2, 2)
    np.testing.assert_array_equal(to_compute(store["w"]), np.eye(2))


def test_header_length_beyond_file(tmp_path):
    path = tmp_path / "bad.safetensors"
    path.write_bytes(struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(MalformedHeader):
        load(path)


@pytest.mark.parametrize(
    "blob",
    [
        b"\x01\x00",
        struct.pack("<Q", 3) + b"{x}",
        struct.pack("<Q", 2) + b"[]",
        _raw_file({"__metadata__": {"a": 1}}),
        _raw_file({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}, b"\0" * 4),
        _raw_file({"w": {"dtype": "F32", "shape": [-1], "data_offsets": [0, 4]}}, b"\0" * 4),
    ],
)
def test_malformed_headers(blob):
    with pytest.raises(MalformedHeader):
        deserialize(blob)


def test_offsets_past_end():
    with pytest.raises(OffsetOverlap):
        deserialize(_raw_file({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, b"\0" * 4))


def test_overlapping_offsets():
    header = {
        "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
        "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
    }
    with pytest.raises(OffsetOverlap):
        deserialize(_raw_file(header, b"\0" * 12))


@pytest.mark.parametrize("tag", ["F8_E4M3", "I64", "U8"])
def test_unknown_dtype(tag):
    with pytest.raises(UnknownDtype):
        deserialize(_raw_file({"w": {"dtype": tag, "shape": [1], "data_offsets": [0, 1]}}, b"\0"))


def test_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load(tmp_path / "nope.safetensors")


def test_save_to_unwritable_path(tmp_path):
    with pytest.raises(IoFailure):
        save(TensorStore(), tmp_path / "missing-dir" / "x.safetensors")


def test_empty_store(tmp_path):
    path = tmp_path / "empty.safetensors"
    save(TensorStore(), path)
    assert path.read_bytes() == struct.pack("<Q", 2) + b"{}"
    assert len(load(path)) == 0


def test_offsets_back_to_back(rng):
    store = TensorStore.from_entries(
        [encode("b", rng.standard_normal((3, 2)), DType.F32), encode("a", rng.standard_normal(4), DType.F16)]
    )
    blob = serialize(store)
    (n,) = struct.unpack_from("<Q", blob)
    header = json.loads(blob[8 : 8 + n])
    assert list(header) == ["a", "b"]
    assert header["a"]["data_offsets"] == [0, 8]
    assert header["b"]["data_offsets"] == [8, 32]
    assert len(blob) == 8 + n + 32


def test_save_deterministic(tmp_path, rng):
    store = lora_store(rng, metadata={"lora_alpha": "32"})
    save(store, tmp_path / "a")
    save(store, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_roundtrip_bytes_and_metadata(tmp_path, rng):
    store = lora_store(rng, dtype=DType.BF16, metadata={"format": "pt", "lora_alpha": "16"})
    save(store, tmp_path / "x")
    back = load(tmp_path / "x")
    assert back.metadata == store.metadata
    assert back.names() == store.names()
    for name in store.names():
        assert back[name].data == store[name].data
        assert back[name].dtype is store[name].dtype
        assert back[name].shape == store[name].shape


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.text(min_size=1, max_size=12).filter(lambda s: s != "__metadata__"),
            st.sampled_from(list(DType)),
            st.lists(st.integers(0, 4), max_size=3),
        ),
        max_size=5,
        unique_by=lambda t: t[0],
    ),
    st.dictionaries(st.text(max_size=8), st.text(max_size=8), max_size=3),
    st.randoms(use_true_random=False),
)
def test_roundtrip_property(specs, metadata, rnd):
    entries = []
    for name, dtype, shape in specs:
        size = int(np.prod(shape)) * dtype.width
        entries.append(TensorEntry(name, dtype, tuple(shape), rnd.randbytes(size)))
    store = TensorStore.from_entries(entries, metadata)
    blob = serialize(store)
    back = deserialize(blob)
    assert back.metadata == store.metadata
    assert {n: (e.dtype, e.shape, e.data) for n, e in back.entries.items()} == {
        n: (e.dtype, e.shape, e.data) for n, e in store.entries.items()
    }
    assert serialize(back) == blob


def test_entry_length_checked():
    with pytest.raises(MalformedHeader):
        TensorEntry("w", DType.F32, (2,), b"\0" * 4)


# -- conversion ------------------------------------------------------------


def test_f16_upcast_exact():
    entry = encode("h", np.array([1.0, -2.5, 65504.0]), DType.F16)
    np.testing.assert_array_equal(to_compute(entry, DType.F32), np.array([[1.0, -2.5, 65504.0]], np.float32))


def test_bf16_bits_decode():
    # 0x3F80: sign 0, biased exponent 127, mantissa 0 -> 2**0
    entry = TensorEntry("b", DType.BF16, (1,), bytes([0x80, 0x3F]))
    assert to_compute(entry)[0, 0] == 1.0
    sign, exp, mant = 0x3F80 >> 15, (0x3F80 >> 7) & 0xFF, 0x3F80 & 0x7F
    assert (-1) ** sign * 2.0 ** (exp - 127) * (1 + mant / 128) == 1.0


def test_f32_to_f64_keeps_digits():
    x = np.float32(3.1415927)
    entry = encode("p", np.array([x]), DType.F32)
    assert to_compute(entry, DType.F64)[0, 0] == float(x)


def test_rank_handling():
    assert to_compute(encode("v", np.arange(3.0), DType.F64)).shape == (1, 3)
    assert to_compute(encode("s", np.array(2.0), DType.F64)).shape == (1, 1)
    with pytest.raises(ShapeUnsupported):
        to_compute(encode("t", np.zeros((2, 2, 2)), DType.F64))


def test_f64_to_f32_nearest_even():
    # 1 + 2**-24 is exactly halfway between 1 and the next float32: ties to even gives 1
    x = np.array([1 + 2.0**-24, 1 + 3 * 2.0**-24])
    got = np.frombuffer(encode("x", x, DType.F32).data, "<f4")
    assert got[0] == 1.0 and got[1] == np.float32(1 + 2.0**-22)


_TABLE = bf16_table()


@pytest.mark.parametrize(
    "x",
    [1.0, 1 + 2.0**-8, 1 + 3 * 2.0**-8, 1 + 2.0**-8 + 2.0**-40, -3.3895313892515355e38, 3.39e38, 1e-45, -1e-300, 0.0],
)
def test_bf16_rounding_cases(x):
    entry = encode("x", np.array([x]), DType.BF16)
    assert int(np.frombuffer(entry.data, "<u2")[0]) == bf16_round_reference(x, _TABLE)


@settings(max_examples=300, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False, width=64))
def test_bf16_rounding_matches_exhaustive_reference(x):
    entry = encode("x", np.array([x]), DType.BF16)
    assert int(np.frombuffer(entry.data, "<u2")[0]) == bf16_round_reference(x, _TABLE)


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False, width=32))
def test_bf16_from_f32_matches_reference(x):
    entry = encode("x", np.array([x], np.float32), DType.BF16)
    assert int(np.frombuffer(entry.data, "<u2")[0]) == bf16_round_reference(float(x), _TABLE)


def test_bf16_nan_stays_nan():
    entry = encode("x", np.array([np.nan, np.inf, -np.inf]), DType.BF16)
    out = to_compute(entry)[0]
    assert np.isnan(out[0]) and out[1] == np.inf and out[2] == -np.inf
