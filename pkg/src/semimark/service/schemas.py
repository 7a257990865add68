"""Request/response models for the HTTP service.

Audio crosses the wire as base64-encoded mono 16-bit PCM WAV file bytes
(the same format the library reads and writes on disk), so any client
that can produce a WAV file can talk to the service.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str
    model_loaded: bool


class LoadRequest(BaseModel):
    checkpoint_path: str = Field(description="Server-side path to a checkpoint file")


class ModelInfoResponse(BaseModel):
    checkpoint_path: str
    checkpoint_hash: str
    message_bits: int
    parameters: dict[str, int]
    config: dict


class EmbedRequest(BaseModel):
    wav_b64: str = Field(description="Base64 of a mono 16-bit PCM WAV file")
    message_hex: str = Field(description="Payload as hex digits, 4 for 16 bits")


class EmbedResponse(BaseModel):
    wav_b64: str
    message_hex: str
    snr_db: float
    duration_s: float
    checkpoint_hash: str


class ExtractRequest(BaseModel):
    wav_b64: str


class ExtractResponse(BaseModel):
    message_hex: str
    confidences: list[float]
    checkpoint_hash: str


class AttackRequest(BaseModel):
    wav_b64: str
    kind: str = Field(description="Distortion kind, e.g. gaussian_noise or pitch_shift")
    params: dict = Field(default_factory=dict)
    seed: int = 0


class AttackResponse(BaseModel):
    wav_b64: str
    kind: str
    category: str
    params: dict


class SnrRequest(BaseModel):
    ref_b64: str
    test_b64: str


class SnrResponse(BaseModel):
    snr_db: float


class BenchRequest(BaseModel):
    manifest: dict = Field(description="Benchmark suite manifest document")
    format: str = "table"
    info: dict = Field(default_factory=dict,
                       description="Extra provenance merged into the report")


class BenchResponse(BaseModel):
    report: dict
    rendered: str
    passed: bool
