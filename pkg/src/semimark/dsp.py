"""Deterministic, differentiable signal-processing primitives.

Everything the watermarking pipeline needs from classic DSP lives here:
short-time Fourier analysis/synthesis, sample-rate conversion, and PCM WAV
file I/O. The transform functions exist in two flavors:

* tensor functions (``stft_tensor`` and friends) operate on ``torch.Tensor``
  values, support batching, keep autograd intact, and are what the neural
  pipeline calls.
* typed functions (``stft``, ``istft``, ``resample``) operate on the
  :class:`Waveform` / :class:`ComplexSpectrogram` value types in float64 and
  are the reference surface for scripting and verification.

All operations are pure functions with no shared mutable state.
"""

from __future__ import annotations

import io
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import signal as sps

from .errors import ConfigurationError, InvalidInputError

DEFAULT_SAMPLE_RATE = 16_000

_WINDOW_BUILDERS = {
    "hann": torch.hann_window,
    "hamming": torch.hamming_window,
    "rect": lambda n, dtype: torch.ones(n, dtype=dtype),
}


@dataclass(frozen=True)
class FrameParams:
    """STFT framing configuration.

    Defaults (1024-point FFT, 256 hop, periodic Hann, centered frames with
    reflect padding) are standard for 16 kHz speech and satisfy the
    overlap-add invertibility condition.
    """

    fft_size: int = 1024
    hop: int = 256
    window: str = "hann"
    center: bool = True
    pad_mode: str = "reflect"

    def __post_init__(self):
        if self.fft_size <= 0 or self.hop <= 0:
            raise ConfigurationError(
                f"fft_size and hop must be positive, got {self.fft_size}, {self.hop}"
            )
        if self.hop > self.fft_size:
            raise ConfigurationError(
                f"hop ({self.hop}) larger than fft_size ({self.fft_size})"
            )
        if self.window not in _WINDOW_BUILDERS:
            raise ConfigurationError(
                f"unknown window {self.window!r}; choose from {sorted(_WINDOW_BUILDERS)}"
            )

    @property
    def freq_bins(self) -> int:
        """Number of one-sided spectrum rows (fft_size/2 + 1)."""
        return self.fft_size // 2 + 1

    def window_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        win = _WINDOW_BUILDERS[self.window](self.fft_size, dtype=torch.float64)
        return win.to(dtype=dtype, device=device)

    def num_frames(self, n_samples: int) -> int:
        """Frame count produced for an input of ``n_samples`` samples."""
        if self.center:
            return 1 + n_samples // self.hop
        return 1 + (n_samples - self.fft_size) // self.hop

    def validate_invertible(self) -> None:
        """Raise ConfigurationError unless overlap-add synthesis can invert.

        Uses the nonzero-overlap-add criterion, the exact requirement of
        windowed overlap-add resynthesis with envelope normalization.
        """
        win = self.window_tensor(torch.float64).numpy()
        if not sps.check_NOLA(win, self.fft_size, self.fft_size - self.hop):
            raise ConfigurationError(
                f"window {self.window!r} with fft_size={self.fft_size}, "
                f"hop={self.hop} violates the overlap-add condition; "
                "reduce the hop or change the window"
            )


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples)
        if arr.ndim != 1:
            raise InvalidInputError(f"waveform must be 1-D, got shape {arr.shape}")
        if int(self.sample_rate) <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    """One-sided complex STFT stored as parallel real/imag arrays [F, T]."""

    real: np.ndarray
    imag: np.ndarray
    frame_params: FrameParams = field(default_factory=FrameParams)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        r, i = np.asarray(self.real), np.asarray(self.imag)
        if r.shape != i.shape:
            raise InvalidInputError(
                f"real/imag shapes differ: {r.shape} vs {i.shape}"
            )
        if r.ndim != 2:
            raise InvalidInputError(f"spectrogram arrays must be 2-D, got {r.shape}")
        if r.shape[0] != self.frame_params.freq_bins:
            raise InvalidInputError(
                f"expected {self.frame_params.freq_bins} frequency rows for "
                f"fft_size={self.frame_params.fft_size}, got {r.shape[0]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.real.shape


def stft_tensor(x: torch.Tensor, params: FrameParams) -> tuple[torch.Tensor, torch.Tensor]:
    """One-sided STFT of a [T] or [B, T] tensor; returns (real, imag).

    Differentiable with respect to ``x``. Output shape [F, frames] or
    [B, F, frames].
    """
    n = x.shape[-1]
    if n < params.fft_size:
        raise InvalidInputError(
            f"input of {n} samples is shorter than one frame ({params.fft_size})"
        )
    win = params.window_tensor(dtype=x.dtype, device=x.device)
    spec = torch.stft(
        x,
        n_fft=params.fft_size,
        hop_length=params.hop,
        window=win,
        center=params.center,
        pad_mode=params.pad_mode,
        onesided=True,
        return_complex=True,
    )
    return spec.real, spec.imag


def istft_tensor(
    real: torch.Tensor,
    imag: torch.Tensor,
    params: FrameParams,
    length: int | None = None,
) -> torch.Tensor:
    """Inverse STFT back to [T] or [B, T]; differentiable.

    ``length`` trims/pads the synthesis to an exact sample count, which is
    how the embedding path guarantees output duration equals input duration.
    """
    params.validate_invertible()
    if real.shape != imag.shape:
        raise InvalidInputError(f"real/imag shapes differ: {real.shape} vs {imag.shape}")
    win = params.window_tensor(dtype=real.dtype, device=real.device)
    spec = torch.complex(real, imag)
    return torch.istft(
        spec,
        n_fft=params.fft_size,
        hop_length=params.hop,
        window=win,
        center=params.center,
        length=length,
    )


def stft(x: Waveform, params: FrameParams | None = None) -> ComplexSpectrogram:
    """Typed STFT wrapper; computes in float64."""
    params = params or FrameParams()
    xt = torch.from_numpy(np.ascontiguousarray(x.samples, dtype=np.float64))
    real, imag = stft_tensor(xt, params)
    return ComplexSpectrogram(
        real=real.numpy(), imag=imag.numpy(), frame_params=params, sample_rate=x.sample_rate
    )


def istft(s: ComplexSpectrogram, length: int | None = None) -> Waveform:
    """Typed inverse STFT wrapper; computes in float64."""
    real = torch.from_numpy(np.ascontiguousarray(s.real, dtype=np.float64))
    imag = torch.from_numpy(np.ascontiguousarray(s.imag, dtype=np.float64))
    y = istft_tensor(real, imag, s.frame_params, length=length)
    return Waveform(samples=y.numpy(), sample_rate=s.sample_rate)


def resampled_length(n: int, source_rate: int, target_rate: int) -> int:
    """Output length contract shared by every resampling path."""
    return int(round(n * target_rate / source_rate))


def resample_linear_tensor(
    x: torch.Tensor, source_rate: int, target_rate: int
) -> torch.Tensor:
    """Linear-interpolation resampling of a [T] tensor; differentiable.

    Cheap gradients for the in-training path; use the polyphase variant for
    evaluation-quality conversion.
    """
    if target_rate <= 0 or source_rate <= 0:
        raise InvalidInputError("sample rates must be positive")
    if target_rate == source_rate:
        return x
    n_in = x.shape[-1]
    n_out = resampled_length(n_in, source_rate, target_rate)
    pos = torch.arange(n_out, dtype=x.dtype, device=x.device) * (source_rate / target_rate)
    pos = pos.clamp(max=n_in - 1)
    lo = pos.floor().long().clamp(max=n_in - 2)
    frac = pos - lo.to(x.dtype)
    return x[..., lo] * (1.0 - frac) + x[..., lo + 1] * frac


def resample(x: Waveform, target_rate: int, method: str = "polyphase") -> Waveform:
    """Resample a waveform to ``target_rate``.

    ``method`` is ``"polyphase"`` (windowed-sinc, evaluation quality) or
    ``"linear"`` (matches the differentiable training path). Output length is
    ``round(len(x) * target_rate / source_rate)`` for both.
    """
    if target_rate <= 0:
        raise InvalidInputError(f"target_rate must be positive, got {target_rate}")
    if target_rate == x.sample_rate:
        return Waveform(samples=x.samples.copy(), sample_rate=x.sample_rate)
    n_out = resampled_length(len(x), x.sample_rate, target_rate)
    if method == "polyphase":
        g = math.gcd(int(target_rate), int(x.sample_rate))
        up, down = target_rate // g, x.sample_rate // g
        y = sps.resample_poly(x.samples.astype(np.float64), up, down)
        if len(y) > n_out:
            y = y[:n_out]
        elif len(y) < n_out:
            y = np.pad(y, (0, n_out - len(y)))
    elif method == "linear":
        xt = torch.from_numpy(np.ascontiguousarray(x.samples, dtype=np.float64))
        y = resample_linear_tensor(xt, x.sample_rate, target_rate).numpy()
    else:
        raise InvalidInputError(f"unknown resample method {method!r}")
    return Waveform(samples=y, sample_rate=target_rate)


def _read_wav_stream(stream, origin: str) -> Waveform:
    try:
        with wave.open(stream, "rb") as f:
            n_channels = f.getnchannels()
            sampwidth = f.getsampwidth()
            comptype = f.getcomptype()
            rate = f.getframerate()
            n_frames = f.getnframes()
            raw = f.readframes(n_frames)
    except (wave.Error, EOFError) as exc:
        raise InvalidInputError(f"{origin}: not a readable WAV file ({exc})") from exc
    if comptype != "NONE":
        raise InvalidInputError(f"{origin}: compressed WAV ({comptype}) not supported, need PCM")
    if n_channels != 1:
        raise InvalidInputError(f"{origin}: {n_channels} channels, only mono is supported")
    if sampwidth != 2:
        raise InvalidInputError(f"{origin}: {8 * sampwidth}-bit samples, only 16-bit PCM is supported")
    ints = np.frombuffer(raw, dtype="<i2")
    return Waveform(samples=ints.astype(np.float64) / 32768.0, sample_rate=rate)


def read_wav(path: str | Path) -> Waveform:
    """Read a mono 16-bit PCM WAV file; samples map to [-1, 1) via /32768.

    Anything that is not mono 16-bit PCM is rejected with
    :class:`InvalidInputError`.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        return _read_wav_stream(fh, str(path))


def wav_bytes_to_waveform(data: bytes) -> Waveform:
    """Decode an in-memory WAV file (same contract as :func:`read_wav`)."""
    return _read_wav_stream(io.BytesIO(data), "<bytes>")


def _write_wav_stream(stream, x: Waveform) -> None:
    ints = np.clip(np.round(x.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(stream, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(x.sample_rate)
        f.writeframes(ints.tobytes())


def write_wav(path: str | Path, x: Waveform) -> None:
    """Write a waveform as mono 16-bit PCM, clipping samples to [-1, 1)."""
    with open(path, "wb") as fh:
        _write_wav_stream(fh, x)


def waveform_to_wav_bytes(x: Waveform) -> bytes:
    """Encode as an in-memory WAV file (same contract as :func:`write_wav`)."""
    buf = io.BytesIO()
    _write_wav_stream(buf, x)
    return buf.getvalue()
