import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from groupbnn.tensor_core import BitTensor, pack_bool, sign_binarize, sign_values, unpack, words_for

shapes = st.tuples(*(st.integers(1, 5) for _ in range(4)))
finite = st.floats(-1e6, 1e6, allow_nan=False, width=32)


def test_sign_examples():
    b = sign_binarize(np.array([-0.5, 0.0, 3.2], dtype=np.float32).reshape(1, 3, 1, 1))
    assert unpack(b).ravel().tolist() == [-1.0, 1.0, 1.0]


def test_zero_and_negative_zero_map_to_plus_one():
    x = np.array([0.0, -0.0], dtype=np.float32).reshape(1, 2, 1, 1)
    assert unpack(sign_binarize(x)).ravel().tolist() == [1.0, 1.0]
    assert sign_values(x).ravel().tolist() == [1.0, 1.0]


def test_all_zeros_all_plus():
    assert np.all(unpack(sign_binarize(np.zeros((2, 3, 4, 5), np.float32))) == 1)


def test_unpack_bit_order():
    # bits 0b101 over 3 elements: element 0 is the least significant bit
    b = BitTensor((1, 3, 1, 1), np.array([0b101], dtype=np.uint64))
    assert unpack(b).ravel().tolist() == [1.0, -1.0, 1.0]


def test_padding_bits_must_be_zero():
    with pytest.raises(ValueError):
        BitTensor((1, 3, 1, 1), np.array([0b1101], dtype=np.uint64))


def test_word_count():
    assert [words_for(n) for n in (1, 63, 64, 65, 128, 129)] == [1, 1, 1, 2, 2, 3]


@given(arrays(np.float32, shapes, elements=finite))
def test_sign_matches_definition(x):
    b = sign_binarize(x)
    assert b.shape == x.shape
    out = unpack(b)
    assert out.shape == x.shape and out.dtype == np.float32
    np.testing.assert_array_equal(out, np.where(x >= 0, 1.0, -1.0))
    np.testing.assert_array_equal(sign_values(x), out)


@given(shapes, st.data())
def test_round_trip_is_bit_exact(shape, data):
    bits = data.draw(arrays(np.bool_, shape))
    b = BitTensor.from_bool(bits)
    again = sign_binarize(unpack(b))
    assert again.shape == b.shape
    np.testing.assert_array_equal(again.words, b.words)


@given(arrays(np.bool_, st.integers(1, 300)))
def test_pack_padding_is_zero(bits):
    words = pack_bool(bits)
    tail = len(bits) % 64
    if tail:
        assert int(words[-1]) >> tail == 0
    assert int(np.bitwise_count(words).sum()) == int(bits.sum())
