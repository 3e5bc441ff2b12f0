import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnndense.exceptions import FormatError, ShapeError
from bnndense.tensorcore import (
    BitPlane, binary_conv2d, check_float, dump_btf, hadamard_scale, load_btf, nn_upsample,
    pack_signs, read_btf, save_btf, unpack, xnor_popcount_dot,
)

import oracles


def test_pack_examples():
    assert pack_signs([0.5, -0.3, 0.0]).to_bools().tolist() == [True, False, True]
    assert not pack_signs(-np.ones(70)).to_bools().any()
    assert pack_signs(-np.ones(70)).words.tolist() == [0, 0]


def test_pack_random_matches_sign(rng):
    x = rng.standard_normal(1000)
    assert np.array_equal(unpack(pack_signs(x)), oracles.sign(x))


def test_word_count_and_pad_bits():
    for n in (0, 1, 63, 64, 65, 200):
        b = pack_signs(np.ones(n))
        assert b.words.shape == (-(-n // 64),)
        if n % 64:
            assert int(b.words[-1]) >> (n % 64) == 0


def test_little_endian_bit_order():
    x = -np.ones(64)
    x[0] = 1
    x[9] = 1
    assert int(pack_signs(x).words[0]) == (1 << 0) | (1 << 9)
    assert pack_signs(x).tobytes()[:2] == bytes([0x01, 0x02])


def test_noncanonical_words_rejected():
    with pytest.raises(ShapeError):
        BitPlane((3,), np.array([0b1000], dtype=np.uint64), 3)
    with pytest.raises(ShapeError):
        BitPlane((3,), np.zeros(2, dtype=np.uint64), 3)


def test_unpack_examples():
    b = BitPlane.from_bools([True, False, True])
    assert unpack(b).tolist() == [1.0, -1.0, 1.0]
    assert unpack(pack_signs(np.zeros((0,)))).shape == (0,)


def test_roundtrip_random_planes(rng):
    for _ in range(1000):
        n = int(rng.integers(0, 130))
        b = BitPlane.from_bools(rng.random(n) < 0.5)
        assert pack_signs(unpack(b)) == b


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        pack_signs([1.0, np.nan])
    with pytest.raises(ValueError):
        check_float([np.inf])


def test_equality_is_bytewise():
    a = pack_signs(np.array([1.0, -2.0, 3.0]))
    b = BitPlane.from_bools(np.array([True, False, True]))
    assert a == b and hash(a) == hash(b)
    assert a != pack_signs(np.array([1.0, 2.0, 3.0]))


def test_xnor_examples():
    a, b = pack_signs([1, -1, 1]), pack_signs([1, 1, -1])
    assert xnor_popcount_dot(a, b) == -1
    c = pack_signs(np.ones(64))
    assert xnor_popcount_dot(c, c) == 64
    d = pack_signs(np.r_[np.ones(40), -np.ones(37)])
    assert xnor_popcount_dot(d, pack_signs(-unpack(d))) == -77


def test_xnor_length_mismatch():
    with pytest.raises(ShapeError):
        xnor_popcount_dot(pack_signs(np.ones(3)), pack_signs(np.ones(4)))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=300), st.integers(0, 2**32 - 1))
def test_xnor_matches_dot(bits, seed):
    other = np.random.default_rng(seed).random(len(bits)) < 0.5
    a, b = BitPlane.from_bools(bits), BitPlane.from_bools(other)
    assert xnor_popcount_dot(a, b) == oracles.pm1_dot(unpack(a), unpack(b))


def test_conv_trivial():
    out = binary_conv2d(pack_signs(np.ones((1, 3, 3))), pack_signs(np.ones((1, 1, 1, 1))))
    assert out.tolist() == np.ones((1, 3, 3), dtype=int).tolist()


def test_conv_corner_uses_minus_one_padding():
    out = binary_conv2d(pack_signs(np.ones((1, 3, 3))), pack_signs(np.ones((1, 1, 3, 3))), pad=1)
    assert out[0, 0, 0] == 4 - 5
    assert out[0, 1, 1] == 9
    assert out[0, 0, 1] == 6 - 3


def test_conv_plus_one_padding():
    out = binary_conv2d(pack_signs(np.ones((1, 3, 3))), pack_signs(np.ones((1, 1, 3, 3))), pad=1, pad_value=1)
    assert np.all(out == 9)


def test_conv_against_loop_oracle(rng):
    """Bit-exact equality with the loop-nest float convolution, including strides and pads."""
    for _ in range(60):
        c, o = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        k = int(rng.integers(1, 4))
        pad, stride = int(rng.integers(0, 3)), int(rng.integers(1, 3))
        if k > min(h, w) + 2 * pad:
            continue
        x, wt = oracles.sign(rng.standard_normal((c, h, w))), oracles.sign(rng.standard_normal((o, c, k, k)))
        got = binary_conv2d(pack_signs(x), pack_signs(wt), stride, pad)
        want = oracles.naive_conv(x, wt, stride, pad, -1.0)
        assert got.dtype == np.int32
        assert np.array_equal(got, want.astype(np.int32))
        assert np.abs(got).max() <= c * k * k


def test_conv_shape_errors():
    x = pack_signs(np.ones((2, 3, 3)))
    with pytest.raises(ShapeError):
        binary_conv2d(x, pack_signs(np.ones((1, 2, 5, 5))))
    with pytest.raises(ShapeError):
        binary_conv2d(x, pack_signs(np.ones((1, 3, 1, 1))))
    with pytest.raises(ShapeError):
        binary_conv2d(pack_signs(np.ones((3, 3))), pack_signs(np.ones((1, 1, 1, 1))))


def test_conv_reduction_limit():
    x = pack_signs(np.ones((4000, 3, 3)))
    with pytest.raises(ShapeError):
        binary_conv2d(x, pack_signs(np.ones((1, 4000, 3, 3))))


def test_upsample_examples(rng):
    assert nn_upsample(np.array([[1, -1]]), 2).tolist() == [[1, 1, -1, -1], [1, 1, -1, -1]]
    x = rng.standard_normal((2, 3, 4))
    assert np.array_equal(nn_upsample(x, 1), x)
    b = pack_signs(rng.standard_normal((3, 5, 4)))
    up = nn_upsample(b, 3)
    assert up.dims == (3, 15, 12)
    assert BitPlane.from_bools(up.to_bools()[:, ::3, ::3]) == b


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
def test_upsample_then_subsample_identity(c, h, w, f, seed):
    x = np.random.default_rng(seed).integers(-50, 50, (c, h, w))
    assert np.array_equal(nn_upsample(x, f)[..., ::f, ::f], x)


def test_hadamard_scale(rng):
    t = rng.integers(-9, 10, (3, 4, 5)).astype(np.int32)
    assert np.array_equal(hadamard_scale(t, np.ones(3)), t.astype(float))
    assert not hadamard_scale(t, np.zeros(3)).any()
    s = rng.random(3)
    want = np.array([[[s[c] * t[c, i, j] for j in range(5)] for i in range(4)] for c in range(3)])
    assert np.array_equal(hadamard_scale(t, s), want)
    with pytest.raises(ShapeError):
        hadamard_scale(t, np.ones(2))
    with pytest.raises(ValueError):
        hadamard_scale(t, [1.0, np.nan, 1.0])


def test_btf_header_layout():
    blob = dump_btf(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert blob[:4] == bytes([0x42, 0x54, 0x46, 0x31])
    assert blob[4] == 0 and blob[5] == 2
    assert blob[6:14] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert blob[14:] == np.arange(6, dtype="<f4").tobytes()
    ib = dump_btf(np.array([-1, 2], dtype=np.int64))
    assert ib[4] == 2 and ib[10:] == np.array([-1, 2], dtype="<i4").tobytes()
    bb = dump_btf(pack_signs(np.ones(3)))
    assert bb[4] == 1 and bb[10:] == bytes([0b111]) + bytes(7)


def test_btf_roundtrip(tmp_path, rng):
    for t in (rng.standard_normal((2, 3, 4)).astype(np.float32), rng.integers(-5, 5, (7,)).astype(np.int32),
              pack_signs(rng.standard_normal((3, 70)))):
        back = load_btf(dump_btf(t))
        if isinstance(t, BitPlane):
            assert back == t
        else:
            assert back.dtype == t.dtype and np.array_equal(back, t)
        save_btf(tmp_path / "t.btf", t)
        assert dump_btf(read_btf(tmp_path / "t.btf")) == dump_btf(t)


def test_btf_rejects_corruption():
    blob = dump_btf(np.ones(4, dtype=np.float32))
    with pytest.raises(FormatError):
        load_btf(b"XTF1" + blob[4:])
    with pytest.raises(FormatError):
        load_btf(blob[:-1])
    with pytest.raises(FormatError):
        load_btf(blob[:4] + bytes([9]) + blob[5:])
    bits = bytearray(dump_btf(pack_signs(np.ones(3))))
    bits[10] = 0xFF
    with pytest.raises(FormatError):
        load_btf(bytes(bits))
