import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from crosscloud import codec
from crosscloud.codec import (
    FP16,
    IDENTITY,
    INT8,
    CodecSchedule,
    CompressedPayload,
    CorruptPayloadError,
    Fp16OverflowError,
    HEADER_SIZE,
    Nested,
    ProtocolError,
    Svd,
    TokenIds,
    decode,
    encode,
    nested,
    parse_method,
    select_method,
    sweep_schedules,
)
from crosscloud.matrix import compression_ratio

finite = st.floats(-1e4, 1e4, allow_nan=False, allow_subnormal=False)
matrices = arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 20)), elements=finite)
# singular values stay below the half-precision maximum for these
modest = arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 20)),
                elements=st.floats(-100, 100, allow_nan=False, allow_subnormal=False))


def test_header_layout():
    X = np.arange(6.0).reshape(2, 3)
    raw = encode(X, FP16, step=7).to_bytes()
    assert HEADER_SIZE == 38
    assert raw[:4] == b"NBL1" and raw[4] == 1 and raw[5] == 0x01
    assert int.from_bytes(raw[6:10], "little") == 2 and int.from_bytes(raw[10:14], "little") == 3
    assert int.from_bytes(raw[18:26], "little") == 7
    assert int.from_bytes(raw[26:34], "little") == 12
    p = CompressedPayload.from_bytes(raw)
    assert p.shape == (2, 3) and p.step == 7 and np.array_equal(decode(p), X)


def test_fp16_examples():
    assert decode(encode([[0.5]], FP16))[0, 0] == 0.5
    third = decode(encode([[1 / 3]], FP16))[0, 0]
    assert abs(third - 1 / 3) <= 2**-11 * (1 / 3)
    p = encode(np.random.default_rng(0).normal(size=(100, 100)), FP16)
    assert p.byte_count == 20000 and p.wire_bytes == 20000 + HEADER_SIZE and p.ratio == 0.5


def test_fp16_overflow_names_magnitude():
    with pytest.raises(Fp16OverflowError, match="70000"):
        encode([[1.0, -70000.0]], FP16)


def test_fp16_factor_overflow_is_reported():
    # entries fit in half precision but the leading singular value does not
    with pytest.raises(Fp16OverflowError, match="exceeds"):
        encode(np.full((20, 20), 5000.0), Nested(FP16, Svd(0.5)))


def test_fp16_reencode_is_lossless():
    X = np.random.default_rng(1).normal(size=(9, 7))
    once = decode(encode(X, FP16))
    assert np.array_equal(decode(encode(once, FP16)), once)


def test_int8_examples():
    assert np.array_equal(decode(encode(np.zeros((3, 3)), INT8)), np.zeros((3, 3)))
    assert np.array_equal(decode(encode([[-1.0, 1.0]], INT8)), [[-1.0, 1.0]])
    X = np.random.default_rng(2).uniform(-1, 1, (50, 50))
    p = encode(X, INT8)
    assert p.byte_count == 2500 + 8 and p.ratio == 0.25
    assert np.max(np.abs(decode(p) - X)) <= (np.max(np.abs(X)) / 127) / 2 + 1e-15


def test_svd_codec():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(12, 5))
    assert np.linalg.norm(decode(encode(X, Svd(1.0))) - X) <= 1e-8 * np.linalg.norm(X)
    A = rng.normal(size=(512, 48))
    p = encode(A, Svd(0.6))
    assert p.rank == 29 and p.nominal_ratio == 16269 / 24576
    R2 = np.outer(rng.normal(size=10), rng.normal(size=8)) + np.outer(rng.normal(size=10), rng.normal(size=8))
    p = encode(R2, Svd(0.25))
    assert p.rank == 2 and np.allclose(decode(p), R2, atol=1e-12)


@pytest.mark.parametrize("rho,lo,hi", [(0.6, 0.29, 0.34), (0.2, 0.09, 0.12)])
def test_nested_fp16_svd_on_tall_matrix(rho, lo, hi):
    X = np.random.default_rng(4).normal(size=(480, 48))
    p = encode(X, Nested(FP16, Svd(rho)))
    assert lo <= p.ratio <= hi
    assert p.ratio == 0.5 * compression_ratio(480, 48, p.rank)


def test_nested_int8_svd_roundtrip():
    X = np.random.default_rng(5).normal(size=(40, 6))
    p = encode(X, Nested(INT8, Svd(1.0)))
    assert p.method_id == 0x23 and p.overhead_bytes == HEADER_SIZE + 24
    assert np.linalg.norm(decode(p) - X) < 0.1 * np.linalg.norm(X)


def test_identity_bit_exact_and_unit_of_nesting():
    X = np.random.default_rng(6).normal(size=(10, 10))
    assert decode(encode(X, IDENTITY)).tobytes() == X.tobytes()
    assert nested(IDENTITY, Svd(0.5)) == Svd(0.5) and nested(FP16, IDENTITY) == FP16
    assert nested(FP16, Svd(0.5)) == Nested(FP16, Svd(0.5))
    with pytest.raises(ValueError):
        Nested(Svd(0.5), FP16)


def test_token_ids():
    ids = np.array([[0, 5, 63], [1, 2, 3]])
    p = encode(ids, TokenIds())
    assert p.byte_count == 12 and np.array_equal(decode(p), ids)
    with pytest.raises(ValueError):
        codec.encode_token_ids([[-1]])


def test_corruption_detected():
    raw = bytearray(encode(np.ones((4, 4)), FP16).to_bytes())
    raw[-1] ^= 0x01
    with pytest.raises(CorruptPayloadError):
        decode(CompressedPayload.from_bytes(bytes(raw)))


def test_unknown_method_and_truncation():
    raw = bytearray(encode(np.ones((2, 2)), FP16).to_bytes())
    raw[5] = 0x7F
    with pytest.raises(ProtocolError, match="0x7f"):
        CompressedPayload.from_bytes(bytes(raw))
    with pytest.raises(ProtocolError):
        CompressedPayload.from_bytes(b"NBL1")


def test_method_names_roundtrip():
    for m in [IDENTITY, FP16, INT8, Svd(0.6), Nested(FP16, Svd(0.6)), Nested(INT8, Svd(0.2)), TokenIds()]:
        assert parse_method(m.name) == m
    assert Nested(FP16, Svd(0.6)).name == "FP16(SVD(0.6))"
    with pytest.raises(ValueError):
        parse_method("ZIP")


def test_select_method_boundaries():
    s = CodecSchedule(Nested(FP16, Svd(0.6)), INT8, 2000)
    assert select_method(s, 1999, "forward") == IDENTITY
    assert select_method(s, 2000, "forward") == Nested(FP16, Svd(0.6))
    assert select_method(s, 2000, "backward") == INT8
    always = CodecSchedule(FP16, INT8, 0)
    assert all(select_method(always, k, "forward") == FP16 for k in (0, 1, 10**6))
    with pytest.raises(ValueError):
        CodecSchedule(start_step=-1)


def test_sweep_rows():
    rows = sweep_schedules()
    labels = [r.label for r in rows]
    assert labels[:3] == ["baseline", "FP16+INT8", "FP16(SVD(0.9))+INT8"] and labels[-1] == "FP16(SVD(0.2))+INT8"
    assert len(set(labels)) == 10


@given(matrices)
def test_property_fp16_bound(X):
    Y = decode(encode(X, FP16))
    assert np.all(np.abs(Y - X) <= 2**-11 * np.maximum(np.abs(X), 2**-14))


@given(matrices)
def test_property_int8_bound(X):
    p = encode(X, INT8)
    scale = np.max(np.abs(X)) / 127 if np.any(X) else 1.0
    assert np.max(np.abs(decode(p) - X)) <= scale / 2 * (1 + 1e-12) + 1e-300


@given(modest)
def test_property_ratio_is_measured_bytes(X):
    for method in (IDENTITY, FP16, INT8, Nested(FP16, Svd(0.5))):
        p = encode(X, method)
        assert p.ratio == p.value_bytes / (4 * X.size)
        assert p.accounted_bytes == p.value_bytes + p.overhead_bytes


def test_bulk_roundtrip_bounds():
    """10,000 seeded matrices per quantizer."""
    rng = np.random.default_rng(10)
    for _ in range(10000):
        X = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 6)))) * 10 ** rng.uniform(-3, 3)
        Y = decode(encode(X, FP16))
        assert np.all(np.abs(Y - X) <= 2**-11 * np.maximum(np.abs(X), 2**-14))
        Z = decode(encode(X, INT8))
        assert np.max(np.abs(Z - X)) <= np.max(np.abs(X)) / 254 * (1 + 1e-12)
