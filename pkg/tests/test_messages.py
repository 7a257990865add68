"""Payload representation and accuracy-metric contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semimark.errors import InvalidInputError
from semimark.messages import (
    MESSAGE_BITS,
    SoftMessage,
    WatermarkMessage,
    acc,
    harden,
    hex_to_message,
    message_to_hex,
    random_message,
    soften,
)

bit_vectors = st.lists(st.integers(0, 1), min_size=1, max_size=64).map(np.array)


class TestTypes:
    def test_message_rejects_non_bits(self):
        with pytest.raises(InvalidInputError):
            WatermarkMessage(bits=np.array([0, 2, 1]))
        with pytest.raises(InvalidInputError):
            WatermarkMessage(bits=np.array([0.5, 0.5]))

    def test_soft_rejects_out_of_range(self):
        with pytest.raises(InvalidInputError):
            SoftMessage(probs=np.array([0.1, 1.2]))
        with pytest.raises(InvalidInputError):
            SoftMessage(probs=np.array([-0.01]))

    def test_lengths(self):
        assert len(WatermarkMessage(bits=np.zeros(16, dtype=int))) == 16
        assert len(SoftMessage(probs=np.full(16, 0.5))) == 16


class TestHarden:
    def test_basic(self):
        m = harden(SoftMessage(probs=np.array([0.9, 0.1])))
        np.testing.assert_array_equal(m.bits, [1, 0])

    def test_tie_goes_to_one(self):
        m = harden(SoftMessage(probs=np.array([0.5, 0.4999])))
        np.testing.assert_array_equal(m.bits, [1, 0])

    def test_sigmoid_sign_oracle(self):
        rng = np.random.Generator(np.random.PCG64(4))
        logits = rng.standard_normal(500)
        probs = 1.0 / (1.0 + np.exp(-logits))
        hardened = harden(SoftMessage(probs=probs))
        np.testing.assert_array_equal(hardened.bits, (logits >= 0).astype(int))

    @given(bit_vectors)
    def test_harden_soften_identity(self, bits):
        m = WatermarkMessage(bits=bits)
        np.testing.assert_array_equal(harden(soften(m)).bits, m.bits)


class TestAcc:
    def test_identical_is_one(self):
        m = random_message(seed=1)
        assert acc(m, m) == 1.0

    def test_complement_is_zero(self):
        m = random_message(seed=2)
        flipped = WatermarkMessage(bits=1 - m.bits)
        assert acc(m, flipped) == 0.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            acc(random_message(16, 0), random_message(8, 0))

    @given(bit_vectors)
    def test_self_and_complement_extremes(self, bits):
        m = WatermarkMessage(bits=bits)
        assert acc(m, m) == 1.0
        assert acc(m, WatermarkMessage(bits=1 - bits)) == 0.0

    @given(bit_vectors, st.randoms())
    def test_symmetry(self, bits, rnd):
        other = np.array([rnd.randint(0, 1) for _ in bits])
        a = WatermarkMessage(bits=bits)
        b = WatermarkMessage(bits=other)
        assert acc(a, b) == acc(b, a)

    def test_random_decoded_bits_average_half(self):
        # Monte-Carlo oracle: random guesses match any fixed truth on half
        # the positions in expectation.
        truth = random_message(seed=10)
        total = 0.0
        trials = 10_000 // MESSAGE_BITS + 1
        for i in range(trials):
            total += acc(truth, random_message(seed=1000 + i))
        assert abs(total / trials - 0.5) < 0.02


class TestRandomMessage:
    def test_deterministic(self):
        a = random_message(16, seed=42)
        b = random_message(16, seed=42)
        np.testing.assert_array_equal(a.bits, b.bits)

    def test_seed_sensitivity(self):
        assert not np.array_equal(random_message(16, 1).bits,
                                  random_message(16, 2).bits)

    def test_length_one(self):
        assert len(random_message(1, seed=0)) == 1

    def test_mean_bit_value(self):
        draws = [random_message(16, seed=s).bits.mean() for s in range(700)]
        assert abs(float(np.mean(draws)) - 0.5) < 0.02


class TestHexSerialization:
    def test_known_value(self):
        m = WatermarkMessage(bits=np.array([0, 0, 0, 1, 1, 0, 1, 0,
                                            0, 0, 1, 0, 1, 0, 1, 1]))
        assert message_to_hex(m) == "1a2b"

    def test_zero_and_full(self):
        assert message_to_hex(WatermarkMessage(bits=np.zeros(16, dtype=int))) == "0000"
        assert message_to_hex(WatermarkMessage(bits=np.ones(16, dtype=int))) == "ffff"

    @given(st.integers(0, 0xFFFF))
    def test_roundtrip(self, value):
        text = f"{value:04x}"
        m = hex_to_message(text)
        assert message_to_hex(m) == text

    def test_case_insensitive(self):
        np.testing.assert_array_equal(hex_to_message("AB12").bits,
                                      hex_to_message("ab12").bits)

    def test_rejects_bad_digits(self):
        with pytest.raises(InvalidInputError):
            hex_to_message("zz")
        with pytest.raises(InvalidInputError):
            hex_to_message("12345")
        with pytest.raises(InvalidInputError):
            hex_to_message("")
