"""Neural networks for complex-spectrogram watermark embedding and recovery.

The model is a bundle of small fully-convolutional 2-D networks operating on
the real and imaginary STFT components:

* real/imag encoders turn each component into a watermark carrier feature map;
* a message encoder lifts the payload bits to a dense embedding which is
  projected across frequency and tiled over time as one extra input channel;
* real/imag embedders emit bounded additive perturbations for each component;
* an extractor plus a two-stage affine decoder recovers per-bit probabilities
  from a possibly distorted signal, with average pooling across time so the
  output shape is independent of input duration, and optionally a fixed bank
  of wide log-spaced frequency bands between the two so the readout tolerates
  small multiplicative rescales of the spectrum;
* a strided-conv discriminator scores whether audio carries a watermark.

Every network is built from the same fundamental unit, a skip gated block:
``skip(h) + conv_a(h) * sigmoid(conv_b(h))`` where the skip path is the
identity when channel counts match and a 1x1 convolution otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .dsp import FrameParams, Waveform, istft_tensor, stft_tensor
from .errors import InvalidInputError
from .messages import SoftMessage, WatermarkMessage

N_BLOCKS = 6


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters shaping every subnetwork.

    The default widths (32 channels for blocks 1-2, 64 for blocks 3-6,
    3x3 kernels, stride 1) put the embedding side near a 0.9 M parameter
    budget. ``desk()`` is a slimmed profile for CPU-only training runs.
    """

    sample_rate: int = 16_000
    frame: FrameParams = field(default_factory=FrameParams)
    message_bits: int = 16
    early_channels: int = 32
    late_channels: int = 64
    carrier_channels: int = 32
    message_embed_size: int = 512
    decoder_hidden: int = 512
    embed_gain_init: float = 0.1
    leaky_slope: float = 0.2
    extractor_freq_strides: tuple[int, ...] = (1, 1, 1, 1, 1, 1)
    readout_log_bands: int = 0
    disc_channels: tuple[int, ...] = (16, 32, 32, 32)

    @staticmethod
    def desk() -> "ModelConfig":
        """Small profile sized for single-core CPU training."""
        return ModelConfig(
            frame=FrameParams(fft_size=512, hop=256),
            early_channels=4,
            late_channels=8,
            carrier_channels=4,
            message_embed_size=64,
            decoder_hidden=256,
            extractor_freq_strides=(2, 2, 2, 1, 1, 1),
            disc_channels=(4, 8, 8, 8),
        )

    @property
    def freq_bins(self) -> int:
        return self.frame.freq_bins

    @property
    def input_scale(self) -> float:
        # Brings raw spectrogram values of speech-level audio to O(1) for
        # the convolutional stacks; purely an internal conditioning factor.
        return 16.0 / self.frame.fft_size

    def block_widths(self, out_channels: int | None = None) -> list[int]:
        """Output channels of the six blocks; the last may be overridden."""
        widths = [self.early_channels] * 2 + [self.late_channels] * 4
        if out_channels is not None:
            widths[-1] = out_channels
        return widths

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extractor_freq_strides"] = list(self.extractor_freq_strides)
        d["disc_channels"] = list(self.disc_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["frame"] = FrameParams(**d["frame"])
        d["extractor_freq_strides"] = tuple(d["extractor_freq_strides"])
        d["disc_channels"] = tuple(d["disc_channels"])
        return ModelConfig(**d)


class SkipGatedBlock(nn.Module):
    """skip(h) + conv_a(h) * sigmoid(conv_b(h)).

    The skip path is the identity when the channel counts match and the
    stride is 1, otherwise a 1x1 convolution with the same stride.
    """

    def __init__(self, in_channels: int, out_channels: int,
                 kernel: tuple[int, int] = (3, 3), stride: tuple[int, int] = (1, 1)):
        super().__init__()
        if min(in_channels, out_channels, *kernel, *stride) < 1:
            raise InvalidInputError("block dimensions must all be >= 1")
        padding = (kernel[0] // 2, kernel[1] // 2)
        self.conv_a = nn.Conv2d(in_channels, out_channels, kernel, stride, padding)
        self.conv_b = nn.Conv2d(in_channels, out_channels, kernel, stride, padding)
        if in_channels == out_channels and stride == (1, 1):
            self.skip = nn.Identity()
        else:
            self.skip = nn.Conv2d(in_channels, out_channels, 1, stride)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[1] != self.conv_a.in_channels:
            raise InvalidInputError(
                f"expected {self.conv_a.in_channels} input channels, got {h.shape[1]}"
            )
        return self.skip(h) + self.conv_a(h) * torch.sigmoid(self.conv_b(h))


def log_band_matrix(n_cells: int, n_bands: int) -> torch.Tensor:
    """[n_cells, n_bands] triangular analysis bands, geometric center spacing.

    Adjacent bands overlap at half height, so content displaced by a small
    multiplicative rescale of the frequency axis drifts smoothly between
    neighboring band outputs instead of jumping across hard cell edges.
    Each column is normalized to sum to one.
    """
    if n_bands < 2 or n_cells < 3:
        raise InvalidInputError("log bands need >= 2 bands over >= 3 cells")
    centers = np.log(np.geomspace(1.0, n_cells - 1.0, n_bands))
    step = float(np.diff(centers).mean())
    lower = np.concatenate([[centers[0] - step], centers[:-1]])
    upper = np.concatenate([centers[1:], [centers[-1] + step]])
    cells = np.log(np.maximum(np.arange(n_cells, dtype=np.float64), 0.5))
    weights = np.zeros((n_cells, n_bands))
    for k in range(n_bands):
        rising = (cells - lower[k]) / (centers[k] - lower[k])
        falling = (upper[k] - cells) / (upper[k] - centers[k])
        weights[:, k] = np.clip(np.minimum(rising, falling), 0.0, None)
        if weights[:, k].sum() == 0.0:
            # Band narrower than the local cell spacing: pin it to the
            # nearest cell instead of leaving a zero column.
            weights[int(np.abs(cells - centers[k]).argmin()), k] = 1.0
    weights /= weights.sum(axis=0, keepdims=True)
    return torch.from_numpy(weights.astype(np.float32))


def gated_stack(in_channels: int, widths: list[int],
                freq_strides: tuple[int, ...] | None = None) -> nn.Sequential:
    """Six skip gated blocks with the given output widths."""
    if len(widths) != N_BLOCKS:
        raise InvalidInputError(f"expected {N_BLOCKS} block widths, got {len(widths)}")
    strides = freq_strides or (1,) * N_BLOCKS
    blocks, prev = [], in_channels
    for w, s in zip(widths, strides):
        blocks.append(SkipGatedBlock(prev, w, stride=(s, 1)))
        prev = w
    return nn.Sequential(*blocks)


class Discriminator(nn.Module):
    """Strided conv classifier on the magnitude spectrogram.

    Outputs one logit per clip; the final affine starts near zero so the
    initial watermarked-probability is close to 0.5.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers, prev = [], 1
        for ch in cfg.disc_channels:
            layers.append(nn.Conv2d(prev, ch, 3, stride=2, padding=1))
            layers.append(nn.LeakyReLU(cfg.leaky_slope))
            prev = ch
        self.convs = nn.Sequential(*layers)
        self.head = nn.Linear(prev, 1)
        nn.init.normal_(self.head.weight, std=1e-3)
        nn.init.zeros_(self.head.bias)

    def forward(self, magnitude: torch.Tensor) -> torch.Tensor:
        h = self.convs(magnitude)
        h = h.mean(dim=(2, 3))
        return self.head(h).squeeze(-1)


class WatermarkModel(nn.Module):
    """The full parameter bundle plus embed/extract/discriminate passes."""

    FORMAT_VERSION = 1

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        c = self.cfg
        carrier = c.carrier_channels

        self.real_encoder = gated_stack(1, c.block_widths(carrier))
        self.imag_encoder = gated_stack(1, c.block_widths(carrier))
        self.message_encoder = nn.Sequential(
            nn.Linear(c.message_bits, c.message_embed_size),
            nn.LeakyReLU(c.leaky_slope),
        )
        self.message_project = nn.Linear(c.message_embed_size, c.freq_bins)
        self.real_embedder = gated_stack(carrier + 1, c.block_widths(1))
        self.imag_embedder = gated_stack(carrier + 1, c.block_widths(1))
        self.embed_gain = nn.Parameter(torch.tensor(float(c.embed_gain_init)))

        self.extractor = gated_stack(3, c.block_widths(), c.extractor_freq_strides)
        pooled_bins = c.freq_bins
        for s in c.extractor_freq_strides:
            pooled_bins = (pooled_bins - 1) // s + 1
        if c.readout_log_bands < 0:
            raise InvalidInputError("readout_log_bands must be >= 0")
        if c.readout_log_bands:
            self.register_buffer(
                "band_matrix", log_band_matrix(pooled_bins, c.readout_log_bands))
            readout_width = c.late_channels * c.readout_log_bands
        else:
            self.band_matrix = None
            readout_width = c.late_channels * pooled_bins
        self.decoder = nn.Sequential(
            nn.Linear(readout_width, c.decoder_hidden),
            nn.Linear(c.decoder_hidden, c.message_bits),
        )
        self.discriminator = Discriminator(c)

    # -- tensor passes -------------------------------------------------

    def _check_audio(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 1:
            x = x.unsqueeze(0)
        if x.dim() != 2:
            raise InvalidInputError(f"expected [T] or [B, T] audio, got shape {tuple(x.shape)}")
        if x.shape[-1] < self.cfg.frame.fft_size:
            raise InvalidInputError(
                f"audio of {x.shape[-1]} samples is shorter than one STFT frame "
                f"({self.cfg.frame.fft_size})"
            )
        return x

    def embed_tensor(self, x: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        """Watermark a [B, T] batch with [B, L] bit rows; length-preserving."""
        x = self._check_audio(x)
        if bits.dim() == 1:
            bits = bits.unsqueeze(0)
        if bits.shape != (x.shape[0], self.cfg.message_bits):
            raise InvalidInputError(
                f"expected bits of shape {(x.shape[0], self.cfg.message_bits)}, "
                f"got {tuple(bits.shape)}"
            )
        n = x.shape[-1]
        real, imag = stft_tensor(x, self.cfg.frame)
        scale = self.cfg.input_scale
        r_in = (real * scale).unsqueeze(1)
        i_in = (imag * scale).unsqueeze(1)

        carrier_r = self.real_encoder(r_in)
        carrier_i = self.imag_encoder(i_in)

        msg = self.message_encoder(bits.to(x.dtype))
        msg_plane = self.message_project(msg)[:, None, :, None]
        msg_plane = msg_plane.expand(-1, 1, -1, real.shape[-1])

        eps_r = torch.tanh(self.real_embedder(torch.cat([carrier_r, msg_plane], dim=1)))
        eps_i = torch.tanh(self.imag_embedder(torch.cat([carrier_i, msg_plane], dim=1)))

        # Additive perturbation of both complex components, in raw
        # spectrogram units (the embedders see scaled inputs).
        gain = self.embed_gain / scale
        wm_real = real + gain * eps_r.squeeze(1)
        wm_imag = imag + gain * eps_i.squeeze(1)
        return istft_tensor(wm_real, wm_imag, self.cfg.frame, length=n)

    def frame_mask(self, lengths: torch.Tensor, n_frames: int) -> torch.Tensor:
        """[B, T] validity mask: frame f of item b is valid iff f < 1 + len_b // hop."""
        valid = 1 + torch.div(lengths, self.cfg.frame.hop, rounding_mode="floor")
        idx = torch.arange(n_frames, device=lengths.device)
        return (idx.unsqueeze(0) < valid.unsqueeze(1))

    def extract_tensor(self, y: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Per-bit probabilities [B, L] from a [B, T] batch.

        ``lengths`` marks the valid sample count per item when short signals
        were zero-padded to a common batch length; padding frames are
        excluded from the time pooling.
        """
        y = self._check_audio(y)
        real, imag = stft_tensor(y, self.cfg.frame)
        scale = self.cfg.input_scale
        # The magnitude channel survives sub-hop time offsets (cropping),
        # which rotate the complex components' phases arbitrarily.
        magnitude = torch.sqrt(real * real + imag * imag + 1e-12)
        s_in = torch.stack([real * scale, imag * scale, magnitude * scale], dim=1)
        h = self.extractor(s_in)
        if lengths is None:
            pooled = h.mean(dim=3)
        else:
            mask = self.frame_mask(lengths.to(y.device), h.shape[-1]).to(h.dtype)
            weights = mask / mask.sum(dim=1, keepdim=True).clamp(min=1.0)
            pooled = torch.einsum("bcft,bt->bcf", h, weights)
        if self.band_matrix is not None:
            pooled = torch.einsum("bcf,fk->bck", pooled, self.band_matrix)
        flat = pooled.flatten(start_dim=1)
        return torch.sigmoid(self.decoder(flat))

    def discriminate_logit_tensor(self, y: torch.Tensor) -> torch.Tensor:
        y = self._check_audio(y)
        real, imag = stft_tensor(y, self.cfg.frame)
        magnitude = torch.sqrt(real * real + imag * imag + 1e-12) * self.cfg.input_scale
        return self.discriminator(magnitude.unsqueeze(1))

    # -- parameter accounting ------------------------------------------

    def parameter_report(self) -> dict:
        """Per-subnetwork parameter counts plus the embedding-side total."""
        def count(module: nn.Module) -> int:
            return sum(p.numel() for p in module.parameters())

        report = {
            "real_encoder": count(self.real_encoder),
            "imag_encoder": count(self.imag_encoder),
            "message_encoder": count(self.message_encoder),
            "message_project": count(self.message_project),
            "real_embedder": count(self.real_embedder),
            "imag_embedder": count(self.imag_embedder),
            "extractor": count(self.extractor),
            "decoder": count(self.decoder),
            "discriminator": count(self.discriminator),
        }
        report["embedding_side"] = (
            report["real_encoder"] + report["imag_encoder"]
            + report["real_embedder"] + report["imag_embedder"]
            + report["message_encoder"]
        )
        report["total"] = sum(p.numel() for p in self.parameters())
        return report


# -- typed single-clip wrappers -----------------------------------------


def _to_model_dtype(model: WatermarkModel, x: np.ndarray) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def embed(x: Waveform, m: WatermarkMessage, model: WatermarkModel) -> Waveform:
    """Watermark one waveform; output has identical length and sample rate."""
    if x.sample_rate != model.cfg.sample_rate:
        raise InvalidInputError(
            f"waveform rate {x.sample_rate} != model rate {model.cfg.sample_rate}; resample first"
        )
    if len(m) != model.cfg.message_bits:
        raise InvalidInputError(
            f"message has {len(m)} bits, model expects {model.cfg.message_bits}"
        )
    xt = _to_model_dtype(model, x.samples)
    bits = _to_model_dtype(model, m.bits.astype(np.float64))
    with torch.no_grad():
        y = model.embed_tensor(xt.unsqueeze(0), bits.unsqueeze(0))
    return Waveform(samples=y.squeeze(0).numpy().astype(np.float64), sample_rate=x.sample_rate)


def extract(y: Waveform, model: WatermarkModel) -> SoftMessage:
    """Decode per-bit probabilities from one waveform of any duration."""
    if y.sample_rate != model.cfg.sample_rate:
        raise InvalidInputError(
            f"waveform rate {y.sample_rate} != model rate {model.cfg.sample_rate}; resample first"
        )
    yt = _to_model_dtype(model, y.samples)
    with torch.no_grad():
        probs = model.extract_tensor(yt.unsqueeze(0))
    return SoftMessage(probs=probs.squeeze(0).numpy().astype(np.float64).clip(0.0, 1.0))


def discriminate(y: Waveform, model: WatermarkModel) -> float:
    """Probability that the input carries a watermark."""
    yt = _to_model_dtype(model, y.samples)
    with torch.no_grad():
        logit = model.discriminate_logit_tensor(yt.unsqueeze(0))
    return float(torch.sigmoid(logit).squeeze(0))
