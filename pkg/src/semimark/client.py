"""Client for the watermark service.

By default the client mounts the FastAPI app in-process over ASGI, so
command-line use needs no running server; pass ``base_url`` to talk to a
remote instance instead. Either way the code path through the service is
identical.
"""

from __future__ import annotations

import base64
import warnings

import httpx

from .dsp import Waveform, wav_bytes_to_waveform, waveform_to_wav_bytes
from .errors import SemimarkError


class ServiceError(SemimarkError):
    """Non-2xx response from the service, with the transported detail."""

    def __init__(self, status_code: int, detail: str):
        super().__init__(f"service returned {status_code}: {detail}")
        self.status_code = status_code
        self.detail = detail


def _b64(w: Waveform) -> str:
    return base64.b64encode(waveform_to_wav_bytes(w)).decode("ascii")


def _unb64(b64: str) -> Waveform:
    return wav_bytes_to_waveform(base64.b64decode(b64))


class ServiceClient:
    """Typed wrapper over the HTTP endpoints."""

    def __init__(self, base_url: str | None = None, checkpoint: str | None = None,
                 timeout: float = 600.0):
        if base_url:
            self._client = httpx.Client(base_url=base_url, timeout=timeout)
        else:
            # httpx's own ASGI transport is async-only; starlette's test
            # client drives the app from sync code through a portal. Its
            # import-time deprecation chatter is not actionable by CLI users.
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service import create_app

            app = create_app(checkpoint=checkpoint)
            self._client = TestClient(app, base_url="http://semimark.local")
            checkpoint = None  # already loaded by the app factory
        if checkpoint:
            self.load_model(checkpoint)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "ServiceClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _post(self, path: str, payload: dict) -> dict:
        resp = self._client.post(path, json=payload)
        if resp.status_code >= 300:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise ServiceError(resp.status_code, str(detail))
        return resp.json()

    def _get(self, path: str) -> dict:
        resp = self._client.get(path)
        if resp.status_code >= 300:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise ServiceError(resp.status_code, str(detail))
        return resp.json()

    # -- endpoints ------------------------------------------------------

    def health(self) -> dict:
        return self._get("/health")

    def model_info(self) -> dict:
        return self._get("/model/info")

    def load_model(self, checkpoint_path: str) -> dict:
        return self._post("/model/load", {"checkpoint_path": str(checkpoint_path)})

    def embed(self, x: Waveform, message_hex: str) -> tuple[Waveform, dict]:
        doc = self._post("/embed", {"wav_b64": _b64(x), "message_hex": message_hex})
        return _unb64(doc["wav_b64"]), doc

    def extract(self, y: Waveform) -> dict:
        return self._post("/extract", {"wav_b64": _b64(y)})

    def attack(self, x: Waveform, kind: str, params: dict | None = None,
               seed: int = 0) -> tuple[Waveform, dict]:
        doc = self._post("/attack", {"wav_b64": _b64(x), "kind": kind,
                                     "params": params or {}, "seed": seed})
        return _unb64(doc["wav_b64"]), doc

    def snr(self, ref: Waveform, test: Waveform) -> float:
        return float(self._post("/metrics/snr", {"ref_b64": _b64(ref),
                                                 "test_b64": _b64(test)})["snr_db"])

    def bench(self, manifest: dict, fmt: str = "table", info: dict | None = None) -> dict:
        return self._post("/bench", {"manifest": manifest, "format": fmt,
                                     "info": info or {}})
