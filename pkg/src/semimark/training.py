"""Adversarial training loop for the selectively fragile watermark.

Each step alternates a discriminator update with a generator update. The
generator objective rewards recovering the payload after semantics
preserving edits and penalizes recovering it after semantics altering
ones, so the mark survives the first family and breaks under the second.

All randomness is derived statelessly from (master seed, step, stream),
which makes runs reproducible and lets a resumed run continue the exact
seed schedule without serializing RNG state.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoints import load_checkpoint, save_checkpoint
from .data import CorpusCache, CorpusIndex, sample_clip_batch
from .distortions import (
    BENIGN,
    MALICIOUS,
    DistortionRanges,
    DistortionSpec,
    apply_tensor,
    sample_distortion,
)
from .dsp import Waveform
from .errors import CheckpointError, ConfigurationError, TrainingDivergedError
from .metrics import snr
from .nets import ModelConfig, WatermarkModel

# Stream labels for per-step seed derivation.
STREAM_BATCH = 0
STREAM_BITS = 1
STREAM_BENIGN_SPEC = 2
STREAM_MALICIOUS_SPEC = 3
STREAM_APPLY = 4
STREAM_FRAGILITY_GATE = 5
STREAM_INIT = 101
STREAM_PROBE = 102


def derive_seed(master_seed: int, *path: int) -> int:
    """Collision-resistant child seed for (master, step, stream, ...)."""
    ss = np.random.SeedSequence([int(master_seed), *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class LossWeights:
    """Scale factors for the four generator loss terms."""

    imperceptibility: float = 0.01
    adversarial: float = 0.01
    robustness: float = 1.0
    fragility: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    ranges: DistortionRanges = field(default_factory=DistortionRanges)
    learning_rate: float = 2e-4
    adam_beta1: float = 0.94
    adam_beta2: float = 0.98
    batch_size: int = 16
    steps: int = 2000
    clip_seconds: float = 2.0
    seed: int = 0
    fragility_cap: float = 0.25
    grad_clip_norm: float = 5.0
    # 1.0 evaluates the fragility branch every step; r > 1 evaluates it on
    # roughly every r-th step, for sweeps over the robust/fragile balance.
    benign_malicious_ratio: float = 1.0
    # Geometric ramp of the imperceptibility weight from weights.imperceptibility
    # up to ramp_to over the first ramp_steps steps. A mark trained quiet from
    # step 0 never becomes decodable; ramping lets the embedder/extractor pair
    # lock on while loud, then track the mark down in amplitude. 0 disables.
    imperceptibility_ramp_steps: int = 0
    imperceptibility_ramp_to: float = 0.0
    checkpoint_every: int = 500
    probe_every: int = 0
    probe_clips: int = 8

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ConfigurationError("steps and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 <= b < 1.0:
                raise ConfigurationError(f"Adam betas must lie in [0, 1), got {b}")
        if self.fragility_cap <= 0:
            raise ConfigurationError("fragility_cap must be positive")
        if self.grad_clip_norm <= 0:
            raise ConfigurationError("grad_clip_norm must be positive")
        if self.benign_malicious_ratio < 1.0:
            raise ConfigurationError("benign_malicious_ratio must be >= 1")
        if self.imperceptibility_ramp_steps < 0:
            raise ConfigurationError("imperceptibility_ramp_steps must be >= 0")
        if self.imperceptibility_ramp_steps > 0 and self.imperceptibility_ramp_to <= 0:
            raise ConfigurationError(
                "imperceptibility_ramp_to must be positive when the ramp is enabled"
            )
        n = int(round(self.clip_seconds * 16_000))
        if n < self.model.frame.fft_size:
            raise ConfigurationError(
                f"clip_seconds={self.clip_seconds} yields {n} samples, shorter than "
                f"one analysis frame ({self.model.frame.fft_size})"
            )

    @staticmethod
    def desk() -> "TrainConfig":
        """Small profile that trains in minutes on one CPU core."""
        return TrainConfig(
            model=ModelConfig.desk(),
            batch_size=8,
            steps=600,
            clip_seconds=1.0,
            checkpoint_every=200,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["weights"] = LossWeights(**d["weights"])
        ranges = {k: tuple(v) if isinstance(v, (list, tuple)) else v
                  for k, v in d["ranges"].items()}
        d["ranges"] = DistortionRanges(**ranges)
        return TrainConfig(**d)


def generator_parameters(model: WatermarkModel) -> list[torch.nn.Parameter]:
    return [p for n, p in model.named_parameters() if not n.startswith("discriminator.")]


def discriminator_parameters(model: WatermarkModel) -> list[torch.nn.Parameter]:
    return [p for n, p in model.named_parameters() if n.startswith("discriminator.")]


def make_optimizers(model: WatermarkModel, cfg: TrainConfig) -> tuple[torch.optim.Adam, torch.optim.Adam]:
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.Adam(generator_parameters(model), lr=cfg.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(discriminator_parameters(model), lr=cfg.learning_rate, betas=betas)
    return opt_g, opt_d


def apply_batch(x: torch.Tensor, spec: DistortionSpec, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Distort each row of [B, T] with its own derived RNG.

    Rows that come back shorter (crop) are zero padded to the longest row;
    the returned lengths tensor records each row's valid sample count.
    """
    rows = []
    for b in range(x.shape[0]):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, b)))
        rows.append(apply_tensor(x[b], spec, rng))
    lengths = torch.tensor([r.shape[-1] for r in rows], dtype=torch.long)
    longest = int(lengths.max())
    padded = [F.pad(r, (0, longest - r.shape[-1])) if r.shape[-1] < longest else r
              for r in rows]
    return torch.stack(padded), lengths


def _bit_accuracy(probs: torch.Tensor, bits: torch.Tensor) -> float:
    hard = (probs >= 0.5).to(bits.dtype)
    return float((hard == bits).to(torch.float64).mean())


@dataclass(eq=False)
class CompositeLoss:
    """One generator-objective evaluation.

    ``total`` is recomposed from the float ``components`` as
    ``wi*imperceptibility + wd*adversarial + wr*robustness - wf*fragility``
    evaluated left to right in IEEE double, so callers can verify the
    arithmetic exactly. ``total_tensor`` is the same expression over
    tensors and carries the gradient graph.
    """

    total: float
    total_tensor: torch.Tensor
    components: dict[str, float]
    benign_acc: float
    malicious_acc: float | None
    watermarked: torch.Tensor
    benign_spec: DistortionSpec
    malicious_spec: DistortionSpec


def composite_loss(model: WatermarkModel, x: torch.Tensor, bits: torch.Tensor,
                   benign_spec: DistortionSpec, malicious_spec: DistortionSpec,
                   *, weights: LossWeights | None = None, fragility_cap: float = 0.25,
                   seed: int = 0, include_fragility: bool = True,
                   watermarked: torch.Tensor | None = None) -> CompositeLoss:
    """Evaluate the four-term generator objective on one batch.

    The robustness term pulls recovered probabilities toward the payload
    after a benign edit; the fragility term pushes them away after a
    malicious edit, clamped at ``fragility_cap`` so a fully broken mark
    stops contributing gradient.
    """
    w = weights or LossWeights()
    y = model.embed_tensor(x, bits) if watermarked is None else watermarked

    loss_i = F.mse_loss(y, x)
    logit_wm = model.discriminate_logit_tensor(y)
    # Generator wants marked audio scored as unmarked.
    loss_d = F.binary_cross_entropy_with_logits(logit_wm, torch.zeros_like(logit_wm))

    y_benign, lengths_b = apply_batch(y, benign_spec, derive_seed(seed, 0))
    probs_b = model.extract_tensor(y_benign, lengths_b)
    loss_r = F.mse_loss(probs_b, bits)
    benign_acc = _bit_accuracy(probs_b, bits)

    malicious_acc: float | None = None
    if include_fragility:
        y_mal, lengths_m = apply_batch(y, malicious_spec, derive_seed(seed, 1))
        probs_m = model.extract_tensor(y_mal, lengths_m)
        fragility_raw_t = F.mse_loss(probs_m, bits)
        loss_f = torch.clamp(fragility_raw_t, max=fragility_cap)
        malicious_acc = _bit_accuracy(probs_m, bits)
        fragility_raw = float(fragility_raw_t.detach())
    else:
        loss_f = torch.zeros((), dtype=loss_r.dtype)
        fragility_raw = 0.0

    total_tensor = (w.imperceptibility * loss_i + w.adversarial * loss_d
                    + w.robustness * loss_r - w.fragility * loss_f)
    components = {
        "imperceptibility": float(loss_i.detach()),
        "adversarial": float(loss_d.detach()),
        "robustness": float(loss_r.detach()),
        "fragility": float(loss_f.detach()),
        "fragility_raw": fragility_raw,
    }
    total = (w.imperceptibility * components["imperceptibility"]
             + w.adversarial * components["adversarial"]
             + w.robustness * components["robustness"]
             - w.fragility * components["fragility"])
    return CompositeLoss(total=total, total_tensor=total_tensor, components=components,
                         benign_acc=benign_acc, malicious_acc=malicious_acc,
                         watermarked=y, benign_spec=benign_spec, malicious_spec=malicious_spec)


def discriminator_step(model: WatermarkModel, x: torch.Tensor, watermarked: torch.Tensor,
                       opt_d: torch.optim.Optimizer, grad_clip_norm: float) -> tuple[float, float]:
    """One discriminator update; touches no generator parameter.

    Returns (loss, pre-clip gradient norm).
    """
    opt_d.zero_grad(set_to_none=True)
    logit_marked = model.discriminate_logit_tensor(watermarked.detach())
    logit_clean = model.discriminate_logit_tensor(x)
    loss = 0.5 * (
        F.binary_cross_entropy_with_logits(logit_marked, torch.ones_like(logit_marked))
        + F.binary_cross_entropy_with_logits(logit_clean, torch.zeros_like(logit_clean))
    )
    loss.backward()
    norm = torch.nn.utils.clip_grad_norm_(discriminator_parameters(model), grad_clip_norm)
    opt_d.step()
    return float(loss.detach()), float(norm)


def generator_step(model: WatermarkModel, comp: CompositeLoss,
                   opt_g: torch.optim.Optimizer, grad_clip_norm: float) -> float:
    """Apply one generator update from a prepared objective evaluation.

    The adversarial branch also deposits gradients on discriminator
    parameters; those are discarded (the discriminator optimizer never
    sees them and they are zeroed on its next step).
    """
    opt_g.zero_grad(set_to_none=True)
    comp.total_tensor.backward()
    norm = torch.nn.utils.clip_grad_norm_(generator_parameters(model), grad_clip_norm)
    opt_g.step()
    return float(norm)


def effective_weights(cfg: TrainConfig, step: int) -> LossWeights:
    """Loss weights at a given step.

    A pure function of the config and step number so resumed runs rebuild
    the exact schedule without extra state. With the ramp enabled the
    imperceptibility weight moves geometrically from its configured value
    to ``imperceptibility_ramp_to`` over the first ``ramp_steps`` steps.
    """
    w = cfg.weights
    if cfg.imperceptibility_ramp_steps <= 0:
        return w
    frac = min(max(step, 0) / cfg.imperceptibility_ramp_steps, 1.0)
    ramped = w.imperceptibility * (cfg.imperceptibility_ramp_to / w.imperceptibility) ** frac
    return LossWeights(
        imperceptibility=ramped,
        adversarial=w.adversarial,
        robustness=w.robustness,
        fragility=w.fragility,
    )


def train_step(model: WatermarkModel, x: torch.Tensor, bits: torch.Tensor,
               benign_spec: DistortionSpec, malicious_spec: DistortionSpec,
               opt_g: torch.optim.Optimizer, opt_d: torch.optim.Optimizer,
               cfg: TrainConfig, step: int) -> dict:
    """One full alternation: discriminator update, then generator update."""
    apply_seed = derive_seed(cfg.seed, step, STREAM_APPLY)
    include_fragility = True
    if cfg.benign_malicious_ratio > 1.0:
        gate = np.random.Generator(np.random.PCG64(
            derive_seed(cfg.seed, step, STREAM_FRAGILITY_GATE)))
        include_fragility = bool(gate.uniform() < 1.0 / cfg.benign_malicious_ratio)

    weights = effective_weights(cfg, step)
    watermarked = model.embed_tensor(x, bits)
    d_loss, d_norm = discriminator_step(model, x, watermarked, opt_d, cfg.grad_clip_norm)
    comp = composite_loss(
        model, x, bits, benign_spec, malicious_spec,
        weights=weights, fragility_cap=cfg.fragility_cap,
        seed=apply_seed, include_fragility=include_fragility, watermarked=watermarked,
    )
    if not (math.isfinite(comp.total) and math.isfinite(d_loss)):
        err = TrainingDivergedError(f"non-finite loss at step {step}")
        err.diagnostics = {
            "step": step,
            "loss_total": comp.total,
            "loss_discriminator": d_loss,
            "components": comp.components,
            "benign_spec": benign_spec.to_dict(),
            "malicious_spec": malicious_spec.to_dict(),
            "config": cfg.to_dict(),
        }
        raise err
    g_norm = generator_step(model, comp, opt_g, cfg.grad_clip_norm)

    return {
        "loss_total": comp.total,
        "loss_imperceptibility": comp.components["imperceptibility"],
        "loss_adversarial": comp.components["adversarial"],
        "loss_robustness": comp.components["robustness"],
        "loss_fragility": comp.components["fragility"],
        "loss_fragility_raw": comp.components["fragility_raw"],
        "loss_discriminator": d_loss,
        "acc_benign": comp.benign_acc,
        "acc_malicious": comp.malicious_acc,
        "grad_norm_generator": g_norm,
        "grad_norm_discriminator": d_norm,
        "weight_imperceptibility": weights.imperceptibility,
        "benign_kind": benign_spec.kind,
        "malicious_kind": malicious_spec.kind,
    }


def probe(model: WatermarkModel, clips: torch.Tensor, seed: int) -> dict:
    """Quick no-gradient health check: clean recovery accuracy and SNR."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            rng = np.random.Generator(np.random.PCG64(seed))
            bits = torch.from_numpy(
                rng.integers(0, 2, size=(clips.shape[0], model.cfg.message_bits))
            ).to(clips.dtype)
            marked = model.embed_tensor(clips, bits)
            probs = model.extract_tensor(marked)
            acc = _bit_accuracy(probs, bits)
            rate = 16_000
            snrs = [snr(Waveform(clips[b].numpy().astype(np.float64), rate),
                        Waveform(marked[b].numpy().astype(np.float64), rate))
                    for b in range(clips.shape[0])]
    finally:
        if was_training:
            model.train()
    return {"probe_acc_clean": acc, "probe_snr_db": float(np.mean(snrs))}


@dataclass
class TrainResult:
    model: WatermarkModel
    checkpoint_path: str
    log_path: str
    steps_completed: int
    last_metrics: dict


def _checkpoint_extra(cfg: TrainConfig, step: int,
                      opt_g: torch.optim.Optimizer, opt_d: torch.optim.Optimizer) -> dict:
    return {
        "step": step,
        "train_config": cfg.to_dict(),
        "optimizer_g": opt_g.state_dict(),
        "optimizer_d": opt_d.state_dict(),
    }


def fit(index: CorpusIndex, cfg: TrainConfig, out_dir: str | Path,
        resume_from: str | Path | None = None,
        on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Train to ``cfg.steps``, logging JSONL and checkpointing periodically.

    ``resume_from`` restarts mid-run from a checkpoint written by this
    function; because the seed schedule is stateless in the step index,
    the resumed trajectory matches an uninterrupted one exactly.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"

    if resume_from is not None:
        model, payload = load_checkpoint(resume_from)
        stored = TrainConfig.from_dict(payload["train_config"])
        if stored.model.to_dict() != cfg.model.to_dict():
            raise CheckpointError(
                "checkpoint was trained with a different model configuration"
            )
        model.train()
        opt_g, opt_d = make_optimizers(model, cfg)
        opt_g.load_state_dict(payload["optimizer_g"])
        opt_d.load_state_dict(payload["optimizer_d"])
        start_step = payload["step"] + 1
        log_mode = "a"
    else:
        torch.manual_seed(derive_seed(cfg.seed, STREAM_INIT))
        model = WatermarkModel(cfg.model)
        model.train()
        opt_g, opt_d = make_optimizers(model, cfg)
        start_step = 0
        log_mode = "w"

    cache = CorpusCache()
    probe_clips: torch.Tensor | None = None
    if cfg.probe_every > 0:
        probe_np = sample_clip_batch(index, "val", cfg.clip_seconds, cfg.probe_clips,
                                     derive_seed(cfg.seed, STREAM_PROBE), cache)
        probe_clips = torch.from_numpy(probe_np)

    last_metrics: dict = {}
    last_checkpoint = out / "checkpoint_last.pt"
    with open(log_path, log_mode) as log:
        log.write(json.dumps({"event": "config", "start_step": start_step,
                              "config": cfg.to_dict()}, sort_keys=True) + "\n")
        for step in range(start_step, cfg.steps):
            t0 = time.monotonic()
            x_np = sample_clip_batch(index, "train", cfg.clip_seconds, cfg.batch_size,
                                     derive_seed(cfg.seed, step, STREAM_BATCH), cache)
            x = torch.from_numpy(x_np)
            bits_rng = np.random.Generator(np.random.PCG64(
                derive_seed(cfg.seed, step, STREAM_BITS)))
            bits = torch.from_numpy(
                bits_rng.integers(0, 2, size=(cfg.batch_size, cfg.model.message_bits))
            ).to(x.dtype)
            benign_spec = sample_distortion(
                BENIGN, derive_seed(cfg.seed, step, STREAM_BENIGN_SPEC), cfg.ranges)
            malicious_spec = sample_distortion(
                MALICIOUS, derive_seed(cfg.seed, step, STREAM_MALICIOUS_SPEC), cfg.ranges)

            try:
                metrics = train_step(model, x, bits, benign_spec, malicious_spec,
                                     opt_g, opt_d, cfg, step)
            except TrainingDivergedError as err:
                dump = out / f"divergence_step{step:06d}.json"
                dump.write_text(json.dumps(getattr(err, "diagnostics", {}),
                                           indent=2, sort_keys=True))
                log.write(json.dumps({"event": "diverged", "step": step,
                                      "dump": str(dump)}) + "\n")
                raise

            metrics["step_seconds"] = round(time.monotonic() - t0, 4)
            if cfg.probe_every > 0 and (step + 1) % cfg.probe_every == 0:
                metrics.update(probe(model, probe_clips,
                                     derive_seed(cfg.seed, step, STREAM_PROBE)))
            log.write(json.dumps({"event": "step", "step": step, **metrics},
                                 sort_keys=True) + "\n")
            log.flush()
            last_metrics = metrics
            if on_step is not None:
                on_step(step, metrics)

            if cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
                extra = _checkpoint_extra(cfg, step, opt_g, opt_d)
                save_checkpoint(out / f"checkpoint_step{step + 1:06d}.pt", model, extra)
                save_checkpoint(last_checkpoint, model, extra)

    save_checkpoint(last_checkpoint, model,
                    _checkpoint_extra(cfg, cfg.steps - 1, opt_g, opt_d))
    model.eval()
    return TrainResult(model=model, checkpoint_path=str(last_checkpoint),
                       log_path=str(log_path), steps_completed=cfg.steps,
                       last_metrics=last_metrics)
