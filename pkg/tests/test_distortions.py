"""Distortion layer: category contracts, oracles, codec adapters."""

import sys
import textwrap

import numpy as np
import pytest
import torch

from semimark import distortions as dist
from semimark.distortions import (
    BENIGN_KINDS,
    CodecAdapter,
    DistortionRanges,
    DistortionSpec,
    apply,
    apply_tensor,
    available_codecs,
    codec_roundtrip,
    pitch_shift,
    register_codec,
    requantize_tensor,
    sample_distortion,
)
from semimark.dsp import Waveform
from semimark.errors import (
    AdapterMissingError,
    ContractViolationError,
    InvalidInputError,
)

RATE = 16_000


def _rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def _sine(freq, seconds=1.0, rate=RATE, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


def _peak_hz(samples, rate=RATE):
    spectrum = np.abs(np.fft.rfft(samples * np.hanning(len(samples))))
    return np.fft.rfftfreq(len(samples), 1 / rate)[int(np.argmax(spectrum))]


class TestSpec:
    def test_category_mapping(self):
        assert DistortionSpec("crop", {"fraction": 0.3}).category == "benign"
        assert DistortionSpec("pitch_shift", {"semitones": 2}).category == "malicious"
        assert DistortionSpec("codec_mp3").category == "eval_only"

    def test_differentiable_flag(self):
        assert DistortionSpec("requantize", {"bits": 8}).differentiable
        assert not DistortionSpec("codec_opus").differentiable

    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidInputError):
            DistortionSpec("reverb")

    def test_dict_roundtrip(self):
        spec = DistortionSpec("gaussian_noise", {"snr_db": 22.5})
        again = DistortionSpec.from_dict(spec.to_dict())
        assert again == spec


class TestSampling:
    def test_deterministic_per_seed(self):
        a = sample_distortion("benign", 42)
        b = sample_distortion("benign", 42)
        assert a == b
        assert sample_distortion("malicious", 7) == sample_distortion("malicious", 7)

    def test_benign_covers_all_kinds(self):
        seen = {sample_distortion("benign", s).kind for s in range(200)}
        assert seen == set(BENIGN_KINDS)

    def test_parameters_respect_ranges(self):
        ranges = DistortionRanges()
        for s in range(100):
            spec = sample_distortion("benign", s, ranges)
            if spec.kind == "crop":
                assert 0.1 <= spec.params["fraction"] <= 0.7
            elif spec.kind == "gaussian_noise":
                assert 15.0 <= spec.params["snr_db"] <= 40.0
            elif spec.kind == "resample_chain":
                assert spec.params["intermediate_hz"] in (8_000, 12_000)
            elif spec.kind == "lowpass_filter":
                assert 3_000.0 <= spec.params["cutoff_hz"] <= 7_000.0
            elif spec.kind == "requantize":
                assert spec.params["bits"] in (8, 10, 12)

    def test_malicious_is_pitch_with_both_signs(self):
        semis = [sample_distortion("malicious", s).params["semitones"]
                 for s in range(60)]
        assert all(1.0 <= abs(v) <= 4.0 for v in semis)
        assert any(v > 0 for v in semis) and any(v < 0 for v in semis)

    def test_eval_only_not_samplable(self):
        with pytest.raises(InvalidInputError):
            sample_distortion("eval_only", 0)


class TestApplyTensor:
    def test_identity_is_bitwise(self):
        x = torch.from_numpy(_rng(0).uniform(-1, 1, 4000))
        y = apply_tensor(x, DistortionSpec("identity"), _rng(1))
        assert torch.equal(y, x)

    def test_crop_is_a_contiguous_slice(self):
        x = torch.arange(10_000, dtype=torch.float64)
        spec = DistortionSpec("crop", {"fraction": 0.3})
        y = apply_tensor(x, spec, _rng(5))
        assert y.shape[-1] == 7000
        start = int(y[0])
        assert torch.equal(y, x[start:start + 7000])

    def test_crop_length_rule(self):
        x = torch.zeros(1000)
        for fraction, kept in ((0.0, 1000), (0.5, 500), (0.999, 1)):
            y = apply_tensor(x, DistortionSpec("crop", {"fraction": fraction}), _rng(0))
            assert y.shape[-1] == kept

    def test_crop_fraction_validation(self):
        x = torch.zeros(100)
        with pytest.raises(InvalidInputError):
            apply_tensor(x, DistortionSpec("crop", {"fraction": 1.0}), _rng(0))
        with pytest.raises(InvalidInputError):
            apply_tensor(x, DistortionSpec("crop", {"fraction": -0.1}), _rng(0))

    def test_noise_hits_target_snr_exactly(self):
        x = torch.from_numpy(_sine(300.0))
        for target in (10.0, 20.0, 35.0):
            spec = DistortionSpec("gaussian_noise", {"snr_db": target})
            y = apply_tensor(x, spec, _rng(3))
            noise = y - x
            realized = 10 * torch.log10(x.square().sum() / noise.square().sum())
            assert abs(float(realized) - target) < 1e-6

    def test_noise_differs_across_rngs(self):
        x = torch.from_numpy(_sine(300.0))
        spec = DistortionSpec("gaussian_noise", {"snr_db": 20.0})
        y1 = apply_tensor(x, spec, _rng(1))
        y2 = apply_tensor(x, spec, _rng(2))
        assert not torch.equal(y1, y2)
        assert torch.equal(apply_tensor(x, spec, _rng(1)), y1)

    def test_resample_chain_preserves_length_and_band(self):
        x = torch.from_numpy(_sine(440.0))
        spec = DistortionSpec("resample_chain", {"intermediate_hz": 8_000})
        y = apply_tensor(x, spec, _rng(0))
        assert y.shape == x.shape
        # A 440 Hz tone sits far below the 4 kHz fold, so it must survive.
        assert abs(_peak_hz(y.numpy()) - 440.0) < 4.0
        kept = float(y.square().sum() / x.square().sum())
        assert 0.8 < kept < 1.2

    def test_lowpass_splits_the_band(self):
        low = torch.from_numpy(_sine(1000.0))
        high = torch.from_numpy(_sine(7000.0))
        spec = DistortionSpec("lowpass_filter", {"cutoff_hz": 3500.0, "rate_hz": RATE})
        passed = apply_tensor(low, spec, _rng(0))
        blocked = apply_tensor(high, spec, _rng(0))
        assert passed.shape == low.shape
        assert float(passed.square().sum() / low.square().sum()) > 0.9
        assert float(blocked.square().sum() / high.square().sum()) < 0.05

    def test_requantize_known_value(self):
        y = requantize_tensor(torch.tensor([0.30]), 8)
        assert float(y[0]) == pytest.approx(0.296875, abs=0)

    def test_requantize_error_bound(self):
        x = torch.from_numpy(_rng(4).uniform(-0.999, 0.992, 5000))
        for bits in (8, 10, 12):
            y = requantize_tensor(x, bits)
            assert float((y - x).abs().max()) <= 2.0 ** (1 - bits) / 2 + 1e-12

    def test_requantize_idempotent(self):
        x = torch.from_numpy(_rng(5).uniform(-0.99, 0.99, 2000))
        once = requantize_tensor(x, 10)
        twice = requantize_tensor(once, 10)
        assert torch.equal(once, twice)

    def test_requantize_straight_through_gradient(self):
        x = torch.from_numpy(_rng(6).uniform(-0.9, 0.9, 64)).requires_grad_(True)
        requantize_tensor(x, 8).sum().backward()
        assert torch.equal(x.grad, torch.ones_like(x))

    def test_requantize_bits_validation(self):
        with pytest.raises(InvalidInputError):
            requantize_tensor(torch.zeros(10), 1)
        with pytest.raises(InvalidInputError):
            requantize_tensor(torch.zeros(10), 17)

    def test_pitch_shift_zero_is_identity(self):
        x = torch.from_numpy(_sine(440.0))
        y = apply_tensor(x, DistortionSpec("pitch_shift", {"semitones": 0.0}), _rng(0))
        assert torch.equal(y, x)

    def test_pitch_shift_moves_the_peak(self):
        # FFT-peak oracle: up 2 semitones maps 440 Hz onto 493.88 Hz.
        x = torch.from_numpy(_sine(440.0, seconds=2.0))
        bin_hz = RATE / x.shape[-1]
        for semis, src, dst in ((2.0, 440.0, 493.88), (-2.0, 440.0, 391.99),
                                (-6.0, 880.0, 622.25), (6.0, 440.0, 622.25)):
            x_src = torch.from_numpy(_sine(src, seconds=2.0))
            y = apply_tensor(x_src, DistortionSpec("pitch_shift", {"semitones": semis}),
                             _rng(0))
            assert y.shape == x_src.shape
            assert abs(_peak_hz(y.numpy()) - dst) <= bin_hz + 0.01

    def test_pitch_shift_range_validation(self):
        x = torch.zeros(100)
        with pytest.raises(InvalidInputError):
            apply_tensor(x, DistortionSpec("pitch_shift", {"semitones": 6.5}), _rng(0))
        with pytest.raises(InvalidInputError):
            pitch_shift(Waveform(_sine(440.0)), -12.0)

    def test_pitch_shift_gradient_flows(self):
        x = torch.from_numpy(_sine(440.0)).requires_grad_(True)
        y = apply_tensor(x, DistortionSpec("pitch_shift", {"semitones": 2.0}), _rng(0))
        y.square().sum().backward()
        assert float(x.grad.abs().sum()) > 0

    def test_codec_rejected_on_training_path(self):
        x = torch.zeros(1000)
        with pytest.raises(ContractViolationError):
            apply_tensor(x, DistortionSpec("codec_mp3"), _rng(0))

    def test_rejects_batched_input(self):
        with pytest.raises(InvalidInputError):
            apply_tensor(torch.zeros(2, 100), DistortionSpec("identity"), _rng(0))


class TestApplyTyped:
    def test_preserves_rate_and_uses_waveform_rate(self):
        w = Waveform(_sine(1000.0, rate=8000), sample_rate=8000)
        y = apply(w, DistortionSpec("lowpass_filter", {"cutoff_hz": 3000.0}), rng_seed=1)
        assert y.sample_rate == 8000 and len(y) == len(w)

    def test_crop_shortens_waveform(self):
        w = Waveform(_sine(440.0))
        y = apply(w, DistortionSpec("crop", {"fraction": 0.5}), rng_seed=2)
        assert len(y) == len(w) // 2

    def test_seed_determinism(self):
        w = Waveform(_sine(200.0))
        spec = DistortionSpec("gaussian_noise", {"snr_db": 18.0})
        y1 = apply(w, spec, rng_seed=9)
        y2 = apply(w, spec, rng_seed=9)
        assert np.array_equal(y1.samples, y2.samples)

    def test_typed_pitch_shift_oracle(self):
        y = pitch_shift(Waveform(_sine(440.0, seconds=2.0)), 2.0)
        assert abs(_peak_hz(y.samples) - 493.88) < 1.0


@pytest.fixture
def fake_codec(tmp_path):
    """A subprocess codec: encode copies the WAV, decode truncates 100 frames."""
    script = tmp_path / "fakecodec.py"
    script.write_text(textwrap.dedent("""\
        import shutil, sys, wave
        mode, src, dst = sys.argv[1:4]
        if mode == "enc":
            shutil.copy(src, dst)
        elif mode == "fail":
            sys.stderr.write("boom: codec exploded")
            sys.exit(1)
        else:
            with wave.open(src, "rb") as r:
                params = r.getparams()
                frames = r.readframes(params.nframes)
            with wave.open(dst, "wb") as w:
                w.setparams(params._replace(nframes=0))
                w.writeframes(frames[:max(0, len(frames) - 200)])
        """))

    def make(decode_mode="dec"):
        return CodecAdapter(
            codec="fake",
            encode_args=(sys.executable, str(script), "enc", "{in}", "{out}"),
            decode_args=(sys.executable, str(script), decode_mode, "{in}", "{out}"),
            suffix=".fake",
        )

    return make


class TestCodecAdapters:
    def test_missing_adapter_raises_with_guidance(self):
        w = Waveform(_sine(440.0))
        with pytest.raises(AdapterMissingError, match="register"):
            codec_roundtrip(w, "mp3", adapters={})

    def test_fake_roundtrip_realigns_length(self, fake_codec):
        w = Waveform(_sine(440.0))
        y = codec_roundtrip(w, "fake", adapters={"fake": fake_codec()})
        assert len(y) == len(w) and y.sample_rate == w.sample_rate
        # Triangle through 16-bit quantization: tail padded, head intact.
        assert np.allclose(y.samples[:1000], w.samples[:1000], atol=1 / 32768)
        assert np.allclose(y.samples[-100:], 0.0)

    def test_failing_command_surfaces_stderr(self, fake_codec):
        w = Waveform(_sine(440.0))
        with pytest.raises(AdapterMissingError, match="boom"):
            codec_roundtrip(w, "fake", adapters={"fake": fake_codec("fail")})

    def test_apply_routes_codec_specs(self, fake_codec):
        register_codec(fake_codec())
        try:
            assert "fake" in available_codecs()
            w = Waveform(_sine(440.0))
            y = codec_roundtrip(w, "fake")
            assert len(y) == len(w)
        finally:
            dist._REGISTERED_ADAPTERS.pop("fake", None)

    def test_apply_typed_codec_missing(self):
        w = Waveform(_sine(440.0))
        with pytest.raises(AdapterMissingError):
            apply(w, DistortionSpec("codec_opus", {"bitrate_kbps": 24}), adapters={})
