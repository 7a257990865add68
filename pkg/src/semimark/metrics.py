"""Objective quality and recovery metrics.

SNR and bit accuracy are computed natively. PESQ and speaker-similarity
(SECS) depend on standardized external artifacts, so they are pluggable
adapters: when no backend is registered the functions return a typed
``Unavailable`` result and reports render the column as missing instead of
fabricating a number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dsp import Waveform
from .errors import InvalidInputError

SNR_CAP_DB = 120.0


def snr(ref: Waveform, test: Waveform) -> float:
    """10*log10(sum(ref^2) / sum((ref - test)^2)), capped at 120 dB.

    Identical signals return the cap. Requires equal lengths and rates and
    a non-silent reference.
    """
    if ref.sample_rate != test.sample_rate:
        raise InvalidInputError(
            f"sample rates differ: {ref.sample_rate} vs {test.sample_rate}"
        )
    if len(ref) != len(test):
        raise InvalidInputError(f"lengths differ: {len(ref)} vs {len(test)}")
    r = ref.samples.astype(np.float64)
    t = test.samples.astype(np.float64)
    signal_power = float(np.sum(r * r))
    if signal_power == 0.0:
        raise InvalidInputError("reference signal is all zeros; SNR undefined")
    noise_power = float(np.sum((r - t) ** 2))
    if noise_power == 0.0:
        return SNR_CAP_DB
    return min(10.0 * math.log10(signal_power / noise_power), SNR_CAP_DB)


@dataclass(frozen=True)
class Unavailable:
    """Typed stand-in for a metric whose backend is not registered."""

    metric: str
    reason: str

    def __bool__(self) -> bool:
        return False


MetricFn = Callable[[Waveform, Waveform], float]

_ADAPTERS: dict[str, MetricFn] = {}


def register_metric_adapter(name: str, fn: MetricFn) -> None:
    """Register a backend for an adapter-based metric ("pesq" or "secs")."""
    _ADAPTERS[name] = fn


def unregister_metric_adapter(name: str) -> None:
    _ADAPTERS.pop(name, None)


def registered_adapters() -> tuple[str, ...]:
    return tuple(sorted(_ADAPTERS))


def _run_adapter(name: str, ref: Waveform, test: Waveform) -> float | Unavailable:
    fn = _ADAPTERS.get(name)
    if fn is None:
        return Unavailable(metric=name, reason=f"no {name!r} adapter registered")
    return float(fn(ref, test))


def pesq_adapter(ref: Waveform, test: Waveform) -> float | Unavailable:
    """Wideband PESQ through the registered backend, or Unavailable."""
    return _run_adapter("pesq", ref, test)


def secs_adapter(ref: Waveform, test: Waveform) -> float | Unavailable:
    """Speaker-embedding cosine similarity through the registered backend."""
    return _run_adapter("secs", ref, test)


def _register_default_pesq() -> None:
    # The reference PESQ implementation ships as the optional "pesq"
    # package; register it automatically when importable.
    try:
        from pesq import pesq as _pesq  # type: ignore
    except ImportError:
        return

    def backend(ref: Waveform, test: Waveform) -> float:
        mode = "wb" if ref.sample_rate >= 16_000 else "nb"
        return float(_pesq(ref.sample_rate, ref.samples, test.samples, mode))

    register_metric_adapter("pesq", backend)


_register_default_pesq()


@dataclass(frozen=True)
class MetricReport:
    """Aggregate quality/recovery numbers over a batch of items."""

    snr_db: float
    acc: float
    n_items: int
    pesq: float | None = None
    secs: float | None = None

    @staticmethod
    def aggregate(snr_values: list[float], acc_values: list[float],
                  pesq_values: list[float] | None = None,
                  secs_values: list[float] | None = None) -> "MetricReport":
        if not acc_values:
            raise InvalidInputError("cannot aggregate an empty batch")
        if len(snr_values) != len(acc_values):
            raise InvalidInputError("snr and acc lists must be the same length")

        def mean_or_none(values):
            return float(np.mean(values)) if values else None

        return MetricReport(
            snr_db=float(np.mean(snr_values)),
            acc=float(np.mean(acc_values)),
            n_items=len(acc_values),
            pesq=mean_or_none(pesq_values),
            secs=mean_or_none(secs_values),
        )


def binomial_interval(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson 95 percent interval for a bit-accuracy estimate."""
    if trials <= 0:
        raise InvalidInputError("trials must be positive")
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials))
    return (max(0.0, center - half), min(1.0, center + half))
