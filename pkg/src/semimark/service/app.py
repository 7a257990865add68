"""HTTP service exposing the watermark pipeline.

One process loads a checkpoint once and serves embed/extract/attack/bench
to any number of clients. The command-line tool talks to this same app
in-process, so both surfaces run identical code paths.

Run standalone with, for example:

    uvicorn --factory 'semimark.service:app_factory' --port 8752
"""

from __future__ import annotations

import base64
import binascii
import os

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..benchmark import render_report, run_manifest
from ..checkpoints import checkpoint_hash, load_checkpoint
from ..distortions import DistortionSpec, apply
from ..dsp import Waveform, wav_bytes_to_waveform, waveform_to_wav_bytes
from ..errors import (
    AdapterMissingError,
    CheckpointError,
    ConfigurationError,
    ContractViolationError,
    CorpusError,
    InvalidInputError,
)
from ..messages import hex_to_message, message_to_hex, harden
from ..metrics import snr
from ..nets import WatermarkModel, embed, extract
from . import schemas


class ServiceState:
    """Model slot shared by all endpoints of one app instance."""

    def __init__(self) -> None:
        self.model: WatermarkModel | None = None
        self.checkpoint_path: str = ""
        self.checkpoint_hash: str = ""

    def load(self, path: str) -> None:
        model, _ = load_checkpoint(path)
        self.model = model
        self.checkpoint_path = str(path)
        self.checkpoint_hash = checkpoint_hash(path)

    def require_model(self) -> WatermarkModel:
        if self.model is None:
            raise HTTPException(
                status_code=409,
                detail="no model loaded; POST /model/load with a checkpoint path first")
        return self.model


def _decode_audio(b64: str, field: str) -> Waveform:
    try:
        raw = base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise InvalidInputError(f"{field}: not valid base64 ({exc})") from exc
    return wav_bytes_to_waveform(raw)


def _encode_audio(w: Waveform) -> str:
    return base64.b64encode(waveform_to_wav_bytes(w)).decode("ascii")


def create_app(checkpoint: str | None = None) -> FastAPI:
    """Build the service; optionally preload a checkpoint."""
    app = FastAPI(title="semimark", version=__version__)
    state = ServiceState()
    app.state.semimark = state
    if checkpoint:
        state.load(checkpoint)

    @app.exception_handler(InvalidInputError)
    @app.exception_handler(ContractViolationError)
    @app.exception_handler(CheckpointError)
    @app.exception_handler(ConfigurationError)
    @app.exception_handler(CorpusError)
    async def _domain_error(request, exc):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(AdapterMissingError)
    async def _adapter_error(request, exc):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=503, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__,
                                      model_loaded=state.model is not None)

    @app.post("/model/load", response_model=schemas.ModelInfoResponse)
    def model_load(req: schemas.LoadRequest) -> schemas.ModelInfoResponse:
        if not os.path.exists(req.checkpoint_path):
            raise HTTPException(status_code=400,
                                detail=f"checkpoint {req.checkpoint_path} does not exist")
        state.load(req.checkpoint_path)
        return model_info()

    @app.get("/model/info", response_model=schemas.ModelInfoResponse)
    def model_info() -> schemas.ModelInfoResponse:
        model = state.require_model()
        return schemas.ModelInfoResponse(
            checkpoint_path=state.checkpoint_path,
            checkpoint_hash=state.checkpoint_hash,
            message_bits=model.cfg.message_bits,
            parameters=model.parameter_report(),
            config=model.cfg.to_dict(),
        )

    @app.post("/embed", response_model=schemas.EmbedResponse)
    def embed_endpoint(req: schemas.EmbedRequest) -> schemas.EmbedResponse:
        model = state.require_model()
        x = _decode_audio(req.wav_b64, "wav_b64")
        message = hex_to_message(req.message_hex, model.cfg.message_bits)
        y = embed(x, message, model)
        return schemas.EmbedResponse(
            wav_b64=_encode_audio(y),
            message_hex=req.message_hex.lower(),
            snr_db=snr(x, y),
            duration_s=y.duration_s,
            checkpoint_hash=state.checkpoint_hash,
        )

    @app.post("/extract", response_model=schemas.ExtractResponse)
    def extract_endpoint(req: schemas.ExtractRequest) -> schemas.ExtractResponse:
        model = state.require_model()
        y = _decode_audio(req.wav_b64, "wav_b64")
        soft = extract(y, model)
        return schemas.ExtractResponse(
            message_hex=message_to_hex(harden(soft)),
            confidences=[float(v) for v in soft.probs],
            checkpoint_hash=state.checkpoint_hash,
        )

    @app.post("/attack", response_model=schemas.AttackResponse)
    def attack_endpoint(req: schemas.AttackRequest) -> schemas.AttackResponse:
        x = _decode_audio(req.wav_b64, "wav_b64")
        spec = DistortionSpec(req.kind, dict(req.params))
        attacked = apply(x, spec, rng_seed=req.seed)
        return schemas.AttackResponse(
            wav_b64=_encode_audio(attacked),
            kind=spec.kind,
            category=spec.category,
            params=dict(spec.params),
        )

    @app.post("/metrics/snr", response_model=schemas.SnrResponse)
    def snr_endpoint(req: schemas.SnrRequest) -> schemas.SnrResponse:
        ref = _decode_audio(req.ref_b64, "ref_b64")
        test = _decode_audio(req.test_b64, "test_b64")
        return schemas.SnrResponse(snr_db=snr(ref, test))

    @app.post("/bench", response_model=schemas.BenchResponse)
    def bench_endpoint(req: schemas.BenchRequest) -> schemas.BenchResponse:
        model = state.require_model()
        info = {**req.info,
                "checkpoint_hash": state.checkpoint_hash,
                "checkpoint_path": state.checkpoint_path}
        report = run_manifest(model, req.manifest, info=info)
        rendered = render_report(report, req.format)
        return schemas.BenchResponse(report=report.to_dict(), rendered=rendered,
                                     passed=report.passed)

    return app


def app_factory() -> FastAPI:
    """Uvicorn entry point; honors SEMIMARK_CHECKPOINT for preloading."""
    return create_app(checkpoint=os.environ.get("SEMIMARK_CHECKPOINT"))
