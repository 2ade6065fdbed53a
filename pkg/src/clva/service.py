"""HTTP stylization service.

Stateless API over one loaded checkpoint: concurrent requests read a
shared immutable model snapshot; `/reload` swaps the snapshot atomically
so in-flight requests finish on the old one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import torch
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from . import imageops
from .checkpoint import CheckpointError, load_checkpoint
from .models import CLVAModel


@dataclass(frozen=True)
class ModelSnapshot:
    model_id: str
    model: CLVAModel


class ModelRegistry:
    """Holds the current snapshot. Python reference assignment is atomic,
    so readers either see the old snapshot or the new one, never a mix."""

    def __init__(self):
        self._snapshot: ModelSnapshot | None = None
        self.status = "loading"
        self.message = ""
        self.started_at = time.time()

    def load(self, checkpoint_path: str) -> ModelSnapshot:
        bundle = load_checkpoint(checkpoint_path)
        bundle.model.eval()
        snap = ModelSnapshot(model_id=bundle.model_id, model=bundle.model)
        self._snapshot = snap
        self.status = "ready"
        self.message = ""
        return snap

    def fail(self, message: str) -> None:
        if self._snapshot is None:
            self.status = "error"
            self.message = message

    def current(self) -> ModelSnapshot | None:
        return self._snapshot


class ReloadRequest(BaseModel):
    checkpoint_path: str


def create_app(checkpoint_path: str | None = None, registry: ModelRegistry | None = None) -> FastAPI:
    # single-threaded math keeps concurrent responses byte-identical
    torch.set_num_threads(1)
    app = FastAPI(title="clva-stylize")
    reg = registry or ModelRegistry()
    app.state.registry = reg
    if checkpoint_path is not None:
        try:
            reg.load(checkpoint_path)
        except CheckpointError as exc:
            reg.fail(str(exc))

    @app.get("/health")
    def health():
        snap = reg.current()
        doc = {
            "status": reg.status,
            "model_id": snap.model_id if snap else None,
            "uptime_s": time.time() - reg.started_at,
        }
        if reg.message:
            doc["message"] = reg.message
        return doc

    @app.post("/stylize")
    async def stylize(
        content_image: UploadFile = File(...),
        instruction: str = Form(...),
        output_size: str | None = Form(None),
    ):
        snap = reg.current()
        if snap is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        if not instruction.strip():
            raise HTTPException(status_code=400, detail="instruction must be non-empty")
        raw = await content_image.read()
        try:
            img = imageops.decode_bytes(raw)
        except Exception:
            raise HTTPException(status_code=400, detail="cannot decode content image")
        if output_size:
            try:
                w, h = (int(v) for v in output_size.lower().split("x"))
            except ValueError:
                raise HTTPException(status_code=400, detail="output_size must look like 512x384")
            if w % 16 or h % 16 or w < 16 or h < 16:
                raise HTTPException(status_code=400, detail="output_size must be divisible by 16")
        else:
            # nearest /16-divisible size, keeping the aspect ratio
            ih, iw = img.shape[:2]
            w, h = imageops.nearest_divisible(iw), imageops.nearest_divisible(ih)
        if img.shape[:2] != (h, w):
            img = imageops.decode_bytes(raw, target_size=(w, h))

        t0 = time.perf_counter()
        result = snap.model.stylize(img, instruction)
        latency_ms = (time.perf_counter() - t0) * 1000.0
        return Response(
            content=imageops.encode_png(result),
            media_type="image/png",
            headers={
                "X-Model-Id": snap.model_id,
                "X-Latency-Ms": f"{latency_ms:.3f}",
            },
        )

    @app.post("/reload")
    def reload(req: ReloadRequest):
        old = reg.current()
        try:
            snap = reg.load(req.checkpoint_path)
        except CheckpointError as exc:
            # keep serving the old snapshot
            return JSONResponse(
                status_code=422,
                content={
                    "status": "error",
                    "detail": str(exc),
                    "model_id": old.model_id if old else None,
                },
            )
        return {"status": "ready", "model_id": snap.model_id}

    return app
