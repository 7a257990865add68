"""End-to-end acceptance: one test per shipped guarantee.

The trained-model tests synthesize a half-hour corpus and run the desk
training profile once, then cache the run directory next to this file
keyed by the exact training config, so repeat invocations reuse it.
Delete tests/.acceptance_cache to force a retrain.
"""

import dataclasses
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import semimark.distortions as dist
from semimark.benchmark import (
    render_report,
    rows_from_manifest,
    run_manifest,
    run_test_set_a,
)
from semimark.checkpoints import load_checkpoint
from semimark.data import CorpusCache, build_index, sample_clip_batch, synthesize_corpus
from semimark.distortions import DistortionSpec
from semimark.dsp import FrameParams, Waveform, istft, stft, write_wav
from semimark.messages import harden, random_message
from semimark.metrics import binomial_interval
from semimark.metrics import snr as snr_metric
from semimark.nets import ModelConfig, WatermarkModel
from semimark.nets import embed as embed_wave
from semimark.nets import extract as extract_wave
from semimark.training import (
    TrainConfig,
    composite_loss,
    derive_seed,
    fit,
)

CACHE = Path(__file__).parent / ".acceptance_cache"
TRAIN_BUDGET_SECONDS = 4 * 3600

TINY_MODEL = ModelConfig(
    frame=FrameParams(fft_size=64, hop=16),
    early_channels=2,
    late_channels=3,
    carrier_channels=2,
    message_embed_size=8,
    decoder_hidden=8,
    extractor_freq_strides=(2, 2, 1, 1, 1, 1),
    disc_channels=(2, 2, 2, 2),
)


# -- shared trained-model fixtures -------------------------------------------


@pytest.fixture(scope="session")
def corpus_index():
    root = CACHE / "corpus31"
    if not (root.exists() and any(root.glob("*.wav"))):
        synthesize_corpus(root, minutes=31.0, seed=0)
    return build_index(root, seed=0)


def _cached_run(index, cfg: TrainConfig):
    key = hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    run_dir = CACHE / f"run_{key}"
    marker = run_dir / "train_seconds.json"
    if not marker.exists():
        t0 = time.time()
        fit(index, cfg, run_dir)
        marker.write_text(json.dumps({"train_seconds": time.time() - t0}))
    model, _ = load_checkpoint(run_dir / "checkpoint_last.pt")
    seconds = json.loads(marker.read_text())["train_seconds"]
    return model, seconds


@pytest.fixture(scope="session")
def desk_run(corpus_index):
    return _cached_run(corpus_index, TrainConfig.desk())


@pytest.fixture(scope="session")
def ablated_run(corpus_index):
    cfg = TrainConfig.desk()
    cfg = dataclasses.replace(
        cfg, weights=dataclasses.replace(cfg.weights, fragility=0.0))
    return _cached_run(corpus_index, cfg)


EVAL_SPECS = (
    ("clean", DistortionSpec("identity", {})),
    ("noise20", DistortionSpec("gaussian_noise", {"snr_db": 20.0})),
    ("crop30", DistortionSpec("crop", {"fraction": 0.3})),
    ("pitch_up", DistortionSpec("pitch_shift", {"semitones": 2.0})),
    ("pitch_down", DistortionSpec("pitch_shift", {"semitones": -2.0})),
)


def _evaluate(model, index, n_clips=32, clip_seconds=2.0, seed=303):
    model.eval()
    clips = sample_clip_batch(index, "val", clip_seconds, n_clips,
                              seed=seed, cache=CorpusCache())
    accs = {name: [] for name, _ in EVAL_SPECS}
    snrs = []
    with torch.no_grad():
        for i, row in enumerate(clips):
            x = Waveform(row.astype(np.float64))
            msg = random_message(seed=derive_seed(seed, 7, i))
            y = embed_wave(x, msg, model)
            snrs.append(snr_metric(x, y))
            for name, spec in EVAL_SPECS:
                z = dist.apply(y, spec, rng_seed=derive_seed(seed, 8, i))
                got = harden(extract_wave(z, model))
                accs[name].append(float((got.bits == msg.bits).mean()))
    return ({k: float(np.mean(v)) for k, v in accs.items()},
            float(np.mean(snrs)))


# -- fast, model-free guarantees ----------------------------------------------


def test_transform_roundtrip_precision_and_speed():
    rng = np.random.default_rng(1)
    t0 = time.time()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2048, 64000))
        x = Waveform(rng.uniform(-1.0, 1.0, n))
        y = istft(stft(x), length=n)
        worst = max(worst, float(np.abs(y.samples - x.samples).max()))
    elapsed = time.time() - t0
    assert worst < 1e-6
    assert elapsed < 10.0


def test_gradient_integrity_finite_difference():
    torch.manual_seed(5)
    model = WatermarkModel(TINY_MODEL).double()
    n_params = sum(p.numel() for p in model.parameters())
    assert n_params <= 10_000

    rng = np.random.default_rng(2)
    x = torch.tensor(rng.uniform(-0.5, 0.5, (2, 640)), dtype=torch.float64)
    bits = torch.tensor(rng.integers(0, 2, (2, 16)), dtype=torch.float64)
    benign = DistortionSpec("gaussian_noise", {"snr_db": 25.0})
    malicious = DistortionSpec("pitch_shift", {"semitones": 2.0})

    def loss_value():
        return composite_loss(model, x, bits, benign, malicious, seed=0).total_tensor

    loss_value().backward()
    grads = {n: p.grad.clone() for n, p in model.named_parameters()}
    assert all(g.abs().sum() > 0 for g in grads.values())

    flat = torch.cat([g.flatten() for g in grads.values()])
    order = flat.abs().argsort(descending=True)[:3]
    names = []
    for n, p in model.named_parameters():
        names.extend((n, i) for i in range(p.numel()))
    eps = 1e-5
    params = dict(model.named_parameters())
    for idx in order.tolist():
        name, offset = names[idx]
        param = params[name]
        with torch.no_grad():
            param.flatten()[offset] += eps
        up = loss_value().detach().item()
        with torch.no_grad():
            param.flatten()[offset] -= 2 * eps
        down = loss_value().detach().item()
        with torch.no_grad():
            param.flatten()[offset] += eps
        fd = (up - down) / (2 * eps)
        ref = grads[name].flatten()[offset].item()
        rel = abs(fd - ref) / max(abs(fd), abs(ref), 1e-9)
        assert rel < 1e-3, f"{name}[{offset}]: fd {fd} vs grad {ref}"


def test_loss_recomposition_and_cap_gradient():
    torch.manual_seed(6)
    model = WatermarkModel(TINY_MODEL)
    rng = np.random.default_rng(3)
    x = torch.tensor(rng.uniform(-0.5, 0.5, (2, 640)), dtype=torch.float32)
    bits = torch.tensor(rng.integers(0, 2, (2, 16)), dtype=torch.float32)
    cfg = TrainConfig(model=TINY_MODEL)

    for seed in range(5):
        benign = dist.sample_distortion(dist.BENIGN, derive_seed(seed, 0))
        malicious = dist.sample_distortion(dist.MALICIOUS, derive_seed(seed, 1))
        out = composite_loss(model, x, bits, benign, malicious,
                             weights=cfg.weights, fragility_cap=0.25, seed=seed)
        c = out.components
        expected = (cfg.weights.imperceptibility * c["imperceptibility"]
                    + cfg.weights.adversarial * c["adversarial"]
                    + cfg.weights.robustness * c["robustness"]
                    - cfg.weights.fragility * c["fragility"])
        assert out.total == expected
        assert c["fragility"] <= 0.25

    benign = DistortionSpec("gaussian_noise", {"snr_db": 25.0})
    malicious = DistortionSpec("pitch_shift", {"semitones": 2.0})

    def grads_with(**kw):
        torch.manual_seed(7)
        m = WatermarkModel(TINY_MODEL)
        out = composite_loss(m, x, bits, benign, malicious, seed=11, **kw)
        out.total_tensor.backward()
        return [p.grad.clone() for p in m.parameters() if p.grad is not None]

    capped = grads_with(fragility_cap=1e-9)
    without = grads_with(include_fragility=False)
    assert all(torch.equal(a, b) for a, b in zip(capped, without))


def test_distortion_oracles():
    t0 = time.time()
    rng = np.random.default_rng(4)
    x = torch.tensor(rng.uniform(-0.5, 0.5, 16000), dtype=torch.float64)

    noisy = dist.apply_tensor(
        x, DistortionSpec("gaussian_noise", {"snr_db": 20.0}),
        np.random.Generator(np.random.PCG64(3)))
    realized = 10 * torch.log10(x.square().sum() / (noisy - x).square().sum())
    assert abs(realized.item() - 20.0) < 0.1

    sr = 16000
    t = np.arange(sr) / sr
    win = np.hanning(sr)
    bin_hz = sr / sr  # full-length measurement FFT
    for s in (-4, -3, -2, -1, 1, 2, 3, 4):
        tone = torch.tensor(np.sin(2 * np.pi * 440.0 * t))
        shifted = dist.pitch_shift_tensor(tone, float(s))
        spectrum = np.abs(np.fft.rfft(shifted.numpy() * win))
        peak_hz = np.fft.rfftfreq(sr, 1 / sr)[int(np.argmax(spectrum))]
        want = 440.0 * 2 ** (s / 12)
        assert abs(peak_hz - want) <= bin_hz + 0.01, (s, peak_hz, want)

    for bits in (4, 8, 12):
        q = dist.requantize_tensor(x, bits=bits)
        assert (q - x).abs().max().item() <= 2 ** (1 - bits) / 2

    marked = torch.arange(8000, dtype=torch.float64)
    cropped = dist.apply_tensor(
        marked, DistortionSpec("crop", {"fraction": 0.4}),
        np.random.Generator(np.random.PCG64(9)))
    start = int(cropped[0].item())
    assert torch.equal(cropped, marked[start:start + len(cropped)])
    assert time.time() - t0 < 60.0


# -- trained-model guarantees --------------------------------------------------


def test_desk_training_meets_semifragility_gates(desk_run, corpus_index):
    model, train_seconds = desk_run
    assert train_seconds < TRAIN_BUDGET_SECONDS
    accs, snr_db = _evaluate(model, corpus_index)
    assert accs["clean"] >= 0.95, accs
    assert accs["noise20"] >= 0.90, accs
    assert accs["crop30"] >= 0.90, accs
    assert accs["pitch_up"] <= 0.65, accs
    assert accs["pitch_down"] <= 0.65, accs
    assert snr_db >= 15.0, snr_db


def test_fragility_term_causes_the_malicious_gap(ablated_run, corpus_index):
    model, train_seconds = ablated_run
    assert train_seconds < TRAIN_BUDGET_SECONDS
    accs, _ = _evaluate(model, corpus_index)
    benign = np.mean([accs["noise20"], accs["crop30"]])
    malicious = np.mean([accs["pitch_up"], accs["pitch_down"]])
    assert abs(malicious - benign) <= 0.1, accs


def test_ingestion_suite_verdicts_and_deterministic_rendering(
        desk_run, corpus_index, tmp_path):
    model, _ = desk_run
    clips = sample_clip_batch(corpus_index, "val", 2.0, 12,
                              seed=404, cache=CorpusCache())
    items = []
    root = tmp_path / "pairs"
    for label, cls, semitones in (("copy", dist.BENIGN, None),
                                  ("pitched", dist.MALICIOUS, 2.0)):
        odir = root / label / "original"
        cdir = root / label / "converted"
        odir.mkdir(parents=True)
        cdir.mkdir(parents=True)
        for i, row in enumerate(clips):
            x = Waveform(row.astype(np.float64))
            msg = random_message(seed=derive_seed(404, 1, i))
            y = embed_wave(x, msg, model)
            z = y if semitones is None else dist.pitch_shift(y, semitones)
            write_wav(odir / f"{i}.wav", y)
            write_wav(cdir / f"{i}.wav", z)
            items.append({
                "original": str(odir / f"{i}.wav"),
                "converted": str(cdir / f"{i}.wav"),
                "label": label,
                "class": cls,
                "message_hex": msg.hex,
            })
    manifest = {"name": "synthetic-pairs", "items": items}

    report = run_manifest(model, manifest)
    assert report.row("copy").expectation == "robust"
    assert report.row("copy").verdict == "pass"
    assert report.row("pitched").expectation == "fragile"
    assert report.row("pitched").verdict == "pass"

    again = run_manifest(model, manifest)
    for fmt in ("table", "csv", "json"):
        assert render_report(report, fmt) == render_report(again, fmt)


def test_malicious_interval_reported_and_below_threshold(desk_run, corpus_index):
    model, _ = desk_run
    clips = [Waveform(row.astype(np.float64)) for row in sample_clip_batch(
        corpus_index, "val", 2.0, 100, seed=505, cache=CorpusCache())]
    rows = rows_from_manifest([
        {"name": "pitch_up_2st", "category": "malicious",
         "kind": "pitch_shift", "params": {"semitones": 2.0}},
        {"name": "pitch_down_2st", "category": "malicious",
         "kind": "pitch_shift", "params": {"semitones": -2.0}},
    ])
    report = run_test_set_a(model, clips, seed=505, rows=rows)
    for name in ("pitch_up_2st", "pitch_down_2st"):
        row = report.row(name)
        assert row.trials == 100 * 16
        assert (row.ci_low, row.ci_high) == binomial_interval(
            round(row.acc * row.trials), row.trials)
        assert row.ci_low <= 0.65, (name, row.acc, row.ci_low)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    root = tmp_path / "c"
    synthesize_corpus(root, minutes=0.4, seed=2, clip_seconds=3.0)
    index = build_index(root, seed=0, split_spec=(0.7, 0.3, 0.0))
    cfg = TrainConfig(model=TINY_MODEL, batch_size=2, steps=6,
                      clip_seconds=0.05, checkpoint_every=3, seed=5)

    full = fit(index, cfg, tmp_path / "full")
    half = fit(index, dataclasses.replace(cfg, steps=3), tmp_path / "half")
    resumed = fit(index, cfg, tmp_path / "resumed",
                  resume_from=half.checkpoint_path)

    a = full.model.state_dict()
    b = resumed.model.state_dict()
    assert set(a) == set(b)
    assert all(torch.equal(a[k], b[k]) for k in a)
