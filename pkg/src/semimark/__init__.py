"""Semi-fragile audio watermarking.

Embeds a short payload into speech by perturbing both components of the
complex spectrogram. The mark is trained to survive everyday benign
processing (noise, cropping, resampling, filtering, requantization) while
breaking under voice-content tampering, so a failed extraction is itself
the tamper signal.
"""

__version__ = "0.1.0"

from .errors import (
    AdapterMissingError,
    CheckpointError,
    ConfigurationError,
    ContractViolationError,
    CorpusError,
    InvalidInputError,
    SemimarkError,
    TrainingDivergedError,
)
from .dsp import (
    DEFAULT_SAMPLE_RATE,
    ComplexSpectrogram,
    FrameParams,
    Waveform,
    istft,
    read_wav,
    resample,
    stft,
    wav_bytes_to_waveform,
    waveform_to_wav_bytes,
    write_wav,
)
from .messages import (
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
from .nets import ModelConfig, WatermarkModel, discriminate, embed, extract
from .checkpoints import checkpoint_hash, load_checkpoint, save_checkpoint
from .distortions import (
    BENIGN,
    MALICIOUS,
    CodecAdapter,
    DistortionRanges,
    DistortionSpec,
    apply,
    available_codecs,
    codec_roundtrip,
    pitch_shift,
    register_codec,
    requantize,
    sample_distortion,
)
from .metrics import (
    MetricReport,
    Unavailable,
    binomial_interval,
    pesq_adapter,
    register_metric_adapter,
    secs_adapter,
    snr,
    unregister_metric_adapter,
)
from .training import (
    CompositeLoss,
    LossWeights,
    TrainConfig,
    TrainResult,
    composite_loss,
    derive_seed,
    fit,
    train_step,
)
from .data import (
    CorpusIndex,
    build_index,
    build_testset_b_manifest,
    clip_sampler,
    sample_clip_batch,
    synthesize_corpus,
)
from .benchmark import (
    FRAGILE_THRESHOLD,
    ROBUST_THRESHOLD,
    AttackRow,
    BenchReport,
    RowResult,
    default_rows,
    render_report,
    run_manifest,
    run_test_set_a,
    run_test_set_b,
)
from .client import ServiceClient, ServiceError

__all__ = [name for name in dir() if not name.startswith("_")]
