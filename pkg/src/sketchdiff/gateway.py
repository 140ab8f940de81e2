"""Local HTTP service exposing generation and scoring over frozen
checkpoints. Requests carry a sketch as PNG bytes or a stroke list — never a
caption; inference is prompt-free by construction of the schema."""

from __future__ import annotations

import base64
import io
import threading
import time
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import GenerationError, StateError
from .service import SketchToImage, load_bundle
from .synthdata import RESOLUTION, rasterize_strokes


class Stroke(BaseModel):
    model_config = ConfigDict(extra="forbid")
    points: list[tuple[float, float]]
    width: float = 0.9


class GenerateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    sketch_png: str | None = None          # base64 PNG
    strokes: list[Stroke] | None = None
    seed: int = 0
    steps: int = Field(default=50, ge=1)
    eta: float = Field(default=0.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _exactly_one_sketch(self):
        if (self.sketch_png is None) == (self.strokes is None):
            raise ValueError("exactly one of sketch_png / strokes must be present")
        return self


class ScoreRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    sketch_png: str | None = None
    strokes: list[Stroke] | None = None

    @model_validator(mode="after")
    def _exactly_one_sketch(self):
        if (self.sketch_png is None) == (self.strokes is None):
            raise ValueError("exactly one of sketch_png / strokes must be present")
        return self


def strokes_to_raster(strokes: list[Stroke]) -> torch.Tensor:
    """Normalized-[0,1]^2 polylines -> [1, 32, 32] sketch tensor."""
    pts = [np.asarray(s.points, dtype=np.float64) * RESOLUTION for s in strokes if len(s.points) >= 2]
    widths = [s.width for s in strokes if len(s.points) >= 2]
    if not pts:
        return torch.ones(1, RESOLUTION, RESOLUTION)
    # each stroke carries its own width, so rasterize one layer per stroke
    field = np.ones((RESOLUTION, RESOLUTION), dtype=np.float32)
    for p, w in zip(pts, widths):
        layer = rasterize_strokes([p], width=w)
        field = np.minimum(field, layer)
    return torch.from_numpy(field).unsqueeze(0)


def png_to_sketch(b64: str) -> torch.Tensor:
    raw = base64.b64decode(b64)
    img = Image.open(io.BytesIO(raw)).convert("L")
    if img.size != (RESOLUTION, RESOLUTION):
        img = img.resize((RESOLUTION, RESOLUTION), Image.LANCZOS)
    return torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).unsqueeze(0)


def image_to_png_b64(image: torch.Tensor) -> str:
    arr = ((image.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8).permute(1, 2, 0).numpy()
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _sketch_from(req) -> torch.Tensor:
    if req.sketch_png is not None:
        return png_to_sketch(req.sketch_png)
    return strokes_to_raster(req.strokes)


def create_app(checkpoint_dir=None, bundle: SketchToImage | None = None,
               queue_limit: int = 8) -> FastAPI:
    """App factory; pass a checkpoint directory, a prebuilt bundle, or
    neither (the service then reports empty state and returns 409)."""
    app = FastAPI(title="sketchdiff gateway")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    state: dict = {"bundle": bundle, "error": None}
    if checkpoint_dir is not None and bundle is None:
        try:
            state["bundle"] = load_bundle(checkpoint_dir)
        except Exception as exc:  # degraded state surfaces via /health and 409s
            state["error"] = str(exc)

    slots = threading.BoundedSemaphore(queue_limit)
    infer_lock = threading.Lock()

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    def _require_bundle() -> SketchToImage:
        if state["bundle"] is None:
            raise StateError(state["error"] or "checkpoints not loaded")
        return state["bundle"]

    @app.get("/health")
    def health():
        b = state["bundle"]
        if b is None:
            status = "empty"
        elif b.fg is None:
            status = "partial"
        else:
            status = "full"
        return {
            "status": status,
            "config_hash": b.stack_hash if b else None,
            "checkpoints": sorted(b.config_hashes) if b else [],
        }

    @app.post("/score")
    def score(req: ScoreRequest):
        try:
            b = _require_bundle()
        except StateError as exc:
            return JSONResponse(status_code=409, content={"detail": str(exc)})
        s = b.score(_sketch_from(req))
        return {"a": s.a, "omega": s.omega, "magnitude": s.magnitude}

    @app.post("/generate")
    def generate(req: GenerateRequest):
        try:
            b = _require_bundle()
        except StateError as exc:
            return JSONResponse(status_code=409, content={"detail": str(exc)})
        if req.steps > b.sched.T:
            return JSONResponse(status_code=400,
                                content={"detail": f"steps must lie in [1, {b.sched.T}]"})
        if not slots.acquire(blocking=False):
            return JSONResponse(status_code=503, content={"detail": "inference queue full"})
        try:
            t0 = time.perf_counter()
            sketch = _sketch_from(req)
            with infer_lock:
                try:
                    image = b.generate_from_sketch(sketch, seed=req.seed, steps=req.steps,
                                                   eta=req.eta)
                except GenerationError as exc:
                    return JSONResponse(status_code=500, content={"detail": str(exc)})
            s = b.score(sketch)
            toy = b.toy_fgm(sketch, image) if b.fg is not None else None
            return {
                "image_png": image_to_png_b64(image),
                "a": s.a,
                "omega": s.omega,
                "toy_fgm": toy,
                "config_hash": b.stack_hash,
                "elapsed_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            }
        finally:
            slots.release()

    return app


def main(checkpoint_dir: str, host: str = "127.0.0.1", port: int = 8008) -> None:
    import uvicorn
    uvicorn.run(create_app(checkpoint_dir), host=host, port=port)
