"""Watermark payload representation and the bit-accuracy metric.

A payload is a fixed-length bit vector (16 bits by default). The decoder
produces a soft form (per-bit probabilities) that is hardened by
thresholding at 0.5, ties rounding up to 1. Losses are computed on the soft
probabilities against {0,1} bit values.

CLI and report surfaces serialize 16-bit messages as 4 hex digits, most
significant bit first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

MESSAGE_BITS = 16


@dataclass(frozen=True)
class WatermarkMessage:
    """Hard bit vector, entries in {0, 1}."""

    bits: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.bits)
        if raw.ndim != 1 or raw.size < 1:
            raise InvalidInputError(f"bits must be a non-empty 1-D vector, got shape {raw.shape}")
        # Check before any integer cast so 0.5 is rejected, not truncated.
        if not np.isin(raw, (0, 1)).all():
            raise InvalidInputError("bits must all be 0 or 1")
        object.__setattr__(self, "bits", raw.astype(np.int64))

    def __len__(self) -> int:
        return self.bits.size


@dataclass(frozen=True)
class SoftMessage:
    """Per-bit probabilities in [0, 1], as produced by the decoder."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise InvalidInputError(f"probs must be a non-empty 1-D vector, got shape {arr.shape}")
        if np.isnan(arr).any() or (arr < 0).any() or (arr > 1).any():
            raise InvalidInputError("probs must lie in [0, 1]")
        object.__setattr__(self, "probs", arr)

    def __len__(self) -> int:
        return self.probs.size


def harden(m: SoftMessage) -> WatermarkMessage:
    """Threshold probabilities at 0.5; a tie (exactly 0.5) hardens to 1."""
    return WatermarkMessage(bits=(m.probs >= 0.5).astype(np.int64))


def soften(m: WatermarkMessage) -> SoftMessage:
    """Embed hard bits as degenerate probabilities {0.0, 1.0}."""
    return SoftMessage(probs=m.bits.astype(np.float64))


def acc(truth: WatermarkMessage, decoded: WatermarkMessage) -> float:
    """Fraction of matching bit positions, in [0, 1]."""
    if len(truth) != len(decoded):
        raise InvalidInputError(
            f"message lengths differ: {len(truth)} vs {len(decoded)}"
        )
    return float(np.mean(truth.bits == decoded.bits))


def random_message(length: int = MESSAGE_BITS, seed: int = 0) -> WatermarkMessage:
    """Uniform random bits; deterministic for a given seed."""
    if length < 1:
        raise InvalidInputError(f"length must be >= 1, got {length}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return WatermarkMessage(bits=rng.integers(0, 2, size=length))


def message_to_hex(m: WatermarkMessage) -> str:
    """Serialize bits to hex, MSB first. 16 bits become 4 hex digits."""
    if len(m) % 4 != 0:
        raise InvalidInputError(f"hex form needs a multiple of 4 bits, got {len(m)}")
    value = 0
    for b in m.bits:
        value = (value << 1) | int(b)
    return format(value, f"0{len(m) // 4}x")


def hex_to_message(text: str, length: int = MESSAGE_BITS) -> WatermarkMessage:
    """Parse a hex payload string back into bits; validates length and digits."""
    text = text.strip().lower()
    expected_digits = length // 4
    if length % 4 != 0:
        raise InvalidInputError(f"hex form needs a multiple of 4 bits, got {length}")
    if len(text) != expected_digits:
        raise InvalidInputError(
            f"message must be exactly {expected_digits} hex digits, got {text!r}"
        )
    try:
        value = int(text, 16)
    except ValueError as exc:
        raise InvalidInputError(f"invalid hex message {text!r}") from exc
    bits = [(value >> (length - 1 - i)) & 1 for i in range(length)]
    return WatermarkMessage(bits=np.array(bits, dtype=np.int64))
