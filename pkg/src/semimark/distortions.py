"""Dual-path distortion layer: benign and malicious signal transformations.

Training draws one transformation per sample per step from one of two sets:

* the benign set (cropping, Gaussian noise, resampling chains, lowpass
  filtering, requantization, identity) approximates ordinary recording,
  transmission, and storage conversions the watermark must survive;
* the malicious set (pitch shifting) is a differentiable stand-in for
  voice-identity tampering, which the watermark must NOT survive.

Every training-path transformation is differentiable with respect to the
input samples (requantization through a straight-through estimator). Codec
round-trips (MP3, Opus) are evaluation-only attacks that shell out to
external encoder/decoder executables; they never appear on a gradient path.
"""

from __future__ import annotations

import functools
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import signal as sps

from .dsp import Waveform, resample, resample_linear_tensor, resampled_length, read_wav, write_wav
from .errors import AdapterMissingError, ContractViolationError, InvalidInputError

BENIGN = "benign"
MALICIOUS = "malicious"
EVAL_ONLY = "eval_only"

BENIGN_KINDS = ("crop", "gaussian_noise", "resample_chain", "lowpass_filter",
                "requantize", "identity")
MALICIOUS_KINDS = ("pitch_shift",)
EVAL_ONLY_KINDS = ("codec_mp3", "codec_opus")

_KIND_CLASS = {k: BENIGN for k in BENIGN_KINDS}
_KIND_CLASS.update({k: MALICIOUS for k in MALICIOUS_KINDS})
_KIND_CLASS.update({k: EVAL_ONLY for k in EVAL_ONLY_KINDS})


@dataclass(frozen=True)
class DistortionSpec:
    """One concrete transformation: kind plus kind-specific parameters."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _KIND_CLASS:
            raise InvalidInputError(
                f"unknown distortion kind {self.kind!r}; choose from {sorted(_KIND_CLASS)}"
            )

    @property
    def category(self) -> str:
        """benign / malicious / eval_only, fixed by the kind."""
        return _KIND_CLASS[self.kind]

    @property
    def differentiable(self) -> bool:
        return self.category != EVAL_ONLY

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @staticmethod
    def from_dict(d: dict) -> "DistortionSpec":
        return DistortionSpec(kind=d["kind"], params=dict(d.get("params", {})))


@dataclass(frozen=True)
class DistortionRanges:
    """Parameter ranges the training-time sampler draws from.

    Defaults bracket the evaluation conditions: crops up to 70 percent,
    noise between 15 and 40 dB SNR, resampling through 8 or 12 kHz,
    lowpass cutoffs between 3 and 7 kHz, 8 to 12 bit requantization, and
    pitch shifts of 1 to 4 semitones either way.
    """

    crop_fraction: tuple[float, float] = (0.1, 0.7)
    noise_snr_db: tuple[float, float] = (15.0, 40.0)
    resample_intermediate_hz: tuple[int, ...] = (8_000, 12_000)
    lowpass_cutoff_hz: tuple[float, float] = (3_000.0, 7_000.0)
    requantize_bits: tuple[int, ...] = (8, 10, 12)
    pitch_semitones: tuple[float, float] = (1.0, 4.0)


def sample_distortion(category: str, rng_seed: int,
                      ranges: DistortionRanges | None = None) -> DistortionSpec:
    """Draw a concrete spec uniformly over the category's kinds.

    Deterministic for a given seed; parameters are drawn from ``ranges``.
    """
    ranges = ranges or DistortionRanges()
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    if category == BENIGN:
        kind = BENIGN_KINDS[rng.integers(len(BENIGN_KINDS))]
        if kind == "crop":
            lo, hi = ranges.crop_fraction
            return DistortionSpec("crop", {"fraction": float(rng.uniform(lo, hi))})
        if kind == "gaussian_noise":
            lo, hi = ranges.noise_snr_db
            return DistortionSpec("gaussian_noise", {"snr_db": float(rng.uniform(lo, hi))})
        if kind == "resample_chain":
            mid = int(rng.choice(ranges.resample_intermediate_hz))
            return DistortionSpec("resample_chain", {"intermediate_hz": mid})
        if kind == "lowpass_filter":
            lo, hi = ranges.lowpass_cutoff_hz
            return DistortionSpec("lowpass_filter", {"cutoff_hz": float(rng.uniform(lo, hi))})
        if kind == "requantize":
            return DistortionSpec("requantize", {"bits": int(rng.choice(ranges.requantize_bits))})
        return DistortionSpec("identity")
    if category == MALICIOUS:
        lo, hi = ranges.pitch_semitones
        magnitude = float(rng.uniform(lo, hi))
        sign = 1.0 if rng.integers(2) else -1.0
        return DistortionSpec("pitch_shift", {"semitones": sign * magnitude})
    raise InvalidInputError(f"can only sample benign or malicious specs, got {category!r}")


# -- differentiable tensor implementations ------------------------------


@functools.lru_cache(maxsize=64)
def _lowpass_kernel(cutoff_hz: float, sample_rate: int, order: int = 6,
                    n_taps: int = 129) -> np.ndarray:
    """Zero-phase FIR approximation of a Butterworth lowpass.

    Truncated impulse response convolved with its own reversal, matching a
    forward-backward IIR pass closely enough for training while staying a
    plain convolution for gradient purposes.
    """
    sos = sps.butter(order, cutoff_hz, btype="low", fs=sample_rate, output="sos")
    impulse = np.zeros(n_taps)
    impulse[0] = 1.0
    h = sps.sosfilt(sos, impulse)
    return np.convolve(h, h[::-1])


def lowpass_tensor(x: torch.Tensor, cutoff_hz: float, sample_rate: int) -> torch.Tensor:
    kernel = _lowpass_kernel(float(cutoff_hz), int(sample_rate))
    k = torch.from_numpy(kernel).to(x.dtype).flip(0).view(1, 1, -1)
    n_taps = (kernel.shape[0] + 1) // 2
    y = F.conv1d(x.view(1, 1, -1), k, padding=n_taps - 1)
    return y.view(-1)


def requantize_tensor(x: torch.Tensor, bits: int) -> torch.Tensor:
    """Snap samples to 2**bits uniform levels over [-1, 1).

    The backward pass is the identity (straight-through), so the operation
    can sit on a training path.
    """
    if not 2 <= bits <= 16:
        raise InvalidInputError(f"bits must be in [2, 16], got {bits}")
    scale = float(2 ** (bits - 1))
    q = torch.clamp(torch.round(x * scale), -scale, scale - 1) / scale
    return x + (q - x).detach()


def pitch_shift_tensor(x: torch.Tensor, semitones: float) -> torch.Tensor:
    """Scale dominant frequencies by 2**(semitones/12); length-preserving.

    Implemented as interpolation resampling (reads the input at a stretched
    time base), so tempo changes alongside pitch; the result is cropped or
    zero-padded back to the input length. Exactly differentiable.
    """
    if abs(semitones) > 6:
        raise InvalidInputError(f"|semitones| must be <= 6, got {semitones}")
    n = x.shape[-1]
    factor = 2.0 ** (semitones / 12.0)
    if semitones == 0:
        return x
    n_out = int(round(n / factor))
    pos = torch.arange(n_out, dtype=x.dtype, device=x.device) * factor
    pos = pos.clamp(max=n - 1)
    lo = pos.floor().long().clamp(max=n - 2)
    frac = pos - lo.to(x.dtype)
    y = x[..., lo] * (1.0 - frac) + x[..., lo + 1] * frac
    if n_out >= n:
        return y[..., :n]
    return F.pad(y, (0, n - n_out))


def apply_tensor(x: torch.Tensor, spec: DistortionSpec,
                 rng: np.random.Generator) -> torch.Tensor:
    """Apply one distortion to a 1-D tensor; the training entry point.

    Raises ContractViolationError for non-differentiable (codec) specs.
    Crop returns a shorter tensor; every other kind preserves length.
    """
    if not spec.differentiable:
        raise ContractViolationError(
            f"{spec.kind} is an evaluation-only attack and cannot sit on a training path"
        )
    if x.dim() != 1:
        raise InvalidInputError(f"apply_tensor expects a 1-D tensor, got shape {tuple(x.shape)}")
    p = spec.params
    if spec.kind == "identity":
        return x
    if spec.kind == "crop":
        fraction = float(p["fraction"])
        if not 0.0 <= fraction < 1.0:
            raise InvalidInputError(f"crop fraction must be in [0, 1), got {fraction}")
        n = x.shape[-1]
        n_keep = max(1, int(round(n * (1.0 - fraction))))
        start = int(rng.integers(0, n - n_keep + 1))
        return x[start:start + n_keep]
    if spec.kind == "gaussian_noise":
        target = float(p["snr_db"])
        noise = torch.from_numpy(rng.standard_normal(x.shape[-1])).to(x.dtype)
        # Scale so the realized SNR equals the target exactly.
        gain = x.norm() * (10.0 ** (-target / 20.0)) / noise.norm().clamp(min=1e-30)
        return x + gain * noise
    if spec.kind == "resample_chain":
        rate = int(p.get("rate_hz", 16_000))
        mid = int(p["intermediate_hz"])
        down = resample_linear_tensor(x, rate, mid)
        up = resample_linear_tensor(down, mid, rate)
        n = x.shape[-1]
        if up.shape[-1] >= n:
            return up[..., :n]
        return F.pad(up, (0, n - up.shape[-1]))
    if spec.kind == "lowpass_filter":
        return lowpass_tensor(x, float(p["cutoff_hz"]), int(p.get("rate_hz", 16_000)))
    if spec.kind == "requantize":
        return requantize_tensor(x, int(p["bits"]))
    if spec.kind == "pitch_shift":
        return pitch_shift_tensor(x, float(p["semitones"]))
    raise InvalidInputError(f"unhandled distortion kind {spec.kind!r}")


def apply(x: Waveform, spec: DistortionSpec, rng_seed: int = 0,
          adapters: dict | None = None) -> Waveform:
    """Apply any distortion (codecs included) to a typed waveform."""
    if spec.kind == "codec_mp3":
        return codec_roundtrip(x, "mp3", spec.params, adapters)
    if spec.kind == "codec_opus":
        return codec_roundtrip(x, "opus", spec.params, adapters)
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    params = dict(spec.params)
    if spec.kind in ("resample_chain", "lowpass_filter"):
        params.setdefault("rate_hz", x.sample_rate)
    xt = torch.from_numpy(np.ascontiguousarray(x.samples, dtype=np.float64))
    y = apply_tensor(xt, DistortionSpec(spec.kind, params), rng)
    return Waveform(samples=y.numpy(), sample_rate=x.sample_rate)


def pitch_shift(x: Waveform, semitones: float) -> Waveform:
    """Typed pitch shift; see pitch_shift_tensor."""
    xt = torch.from_numpy(np.ascontiguousarray(x.samples, dtype=np.float64))
    return Waveform(samples=pitch_shift_tensor(xt, semitones).numpy(),
                    sample_rate=x.sample_rate)


def requantize(x: Waveform, bits: int) -> Waveform:
    """Typed requantization; see requantize_tensor."""
    xt = torch.from_numpy(np.ascontiguousarray(x.samples, dtype=np.float64))
    return Waveform(samples=requantize_tensor(xt, bits).numpy(), sample_rate=x.sample_rate)


# -- codec adapters (evaluation-only attacks) ----------------------------


@dataclass(frozen=True)
class CodecAdapter:
    """External encoder/decoder pair invoked through temp files.

    ``encode_args`` and ``decode_args`` are argument templates; the
    placeholders {in}, {out}, {bitrate_kbps}, {frame_ms}, {rate} are filled
    per call. The decode step must yield PCM WAV.
    """

    codec: str
    encode_args: tuple[str, ...]
    decode_args: tuple[str, ...]
    suffix: str

    def run(self, x: Waveform, params: dict) -> Waveform:
        fields = {
            "bitrate_kbps": params.get("bitrate_kbps", 64),
            "frame_ms": params.get("frame_ms", 20),
            "rate": x.sample_rate,
        }
        with tempfile.TemporaryDirectory(prefix="semimark_codec_") as tmp:
            src = Path(tmp) / "in.wav"
            enc = Path(tmp) / f"mid{self.suffix}"
            dst = Path(tmp) / "out.wav"
            write_wav(src, x)
            for args in (self.encode_args, self.decode_args):
                cmd = [a.format(**fields, **{"in": str(src), "out": str(enc)})
                       if args is self.encode_args else
                       a.format(**fields, **{"in": str(enc), "out": str(dst)})
                       for a in args]
                proc = subprocess.run(cmd, capture_output=True, text=True)
                if proc.returncode != 0:
                    raise AdapterMissingError(
                        f"{self.codec} adapter command failed ({' '.join(cmd)}): "
                        f"{proc.stderr.strip()[:500]}"
                    )
            return read_wav(dst)


def _ffmpeg_adapters() -> dict[str, CodecAdapter]:
    if shutil.which("ffmpeg") is None:
        return {}
    return {
        "mp3": CodecAdapter(
            codec="mp3",
            encode_args=("ffmpeg", "-y", "-loglevel", "error", "-i", "{in}",
                         "-b:a", "{bitrate_kbps}k", "{out}"),
            decode_args=("ffmpeg", "-y", "-loglevel", "error", "-i", "{in}",
                         "-ar", "{rate}", "-ac", "1", "{out}"),
            suffix=".mp3",
        ),
        "opus": CodecAdapter(
            codec="opus",
            encode_args=("ffmpeg", "-y", "-loglevel", "error", "-i", "{in}",
                         "-c:a", "libopus", "-b:a", "{bitrate_kbps}k",
                         "-frame_duration", "{frame_ms}", "{out}"),
            decode_args=("ffmpeg", "-y", "-loglevel", "error", "-i", "{in}",
                         "-ar", "{rate}", "-ac", "1", "{out}"),
            suffix=".opus",
        ),
    }


_REGISTERED_ADAPTERS: dict[str, CodecAdapter] = {}


def register_codec(adapter: CodecAdapter) -> None:
    _REGISTERED_ADAPTERS[adapter.codec] = adapter


def available_codecs() -> dict[str, CodecAdapter]:
    """Registered adapters, with PATH-probed ffmpeg defaults as fallback."""
    found = _ffmpeg_adapters()
    found.update(_REGISTERED_ADAPTERS)
    return found


def codec_roundtrip(x: Waveform, codec: str, params: dict | None = None,
                    adapters: dict[str, CodecAdapter] | None = None) -> Waveform:
    """Encode-decode through an external codec; length-aligned to the input.

    Raises AdapterMissingError with install guidance when no adapter for
    ``codec`` is registered or discoverable. Never silently skips.
    """
    adapters = adapters if adapters is not None else available_codecs()
    if codec not in adapters:
        raise AdapterMissingError(
            f"no {codec!r} codec adapter available: install ffmpeg on PATH or "
            f"register one via semimark.distortions.register_codec()"
        )
    y = adapters[codec].run(x, params or {})
    if y.sample_rate != x.sample_rate:
        y = resample(y, x.sample_rate)
    samples = y.samples
    if len(samples) > len(x):
        samples = samples[:len(x)]
    elif len(samples) < len(x):
        samples = np.pad(samples, (0, len(x) - len(samples)))
    return Waveform(samples=samples, sample_rate=x.sample_rate)
