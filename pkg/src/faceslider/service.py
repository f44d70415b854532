"""HTTP inference service for the slider console.

Endpoints:
  GET  /model/info   model dimensions, parameter labels and scales
  POST /edit         edit/transfer/interpolate/neutralize an image
  POST /regress      recover parameters from an image

Images travel as base64 PNG inside JSON.  Uploads that do not match the
model's native resolution are resized with bilinear interpolation and
flagged ``resized`` in the response.  Requests are stateless; responses
are deterministic functions of (checkpoint, request).
"""
from __future__ import annotations

import base64
import io
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from .blendshape import ParameterVector, clamp_normalized, interpolate_parameters
from .engine import InferenceEngine
from .synth import image_to_png_bytes, load_png_image

MODES = ("edit", "transfer", "interpolate", "neutralize")


class EditRequest(BaseModel):
    image_b64: Optional[str] = None
    dataset_index: Optional[int] = None
    params: Optional[list] = None
    mode: str = "edit"
    target_image_b64: Optional[str] = None
    a: Optional[float] = None


class RegressRequest(BaseModel):
    image_b64: Optional[str] = None
    dataset_index: Optional[int] = None


def _decode_image(b64: str, size: int) -> tuple[np.ndarray, bool]:
    try:
        raw = base64.b64decode(b64, validate=True)
        pil = Image.open(io.BytesIO(raw)).convert("RGB")
    except Exception:
        raise HTTPException(status_code=400, detail="image_b64 is not a decodable PNG")
    resized = False
    if pil.size != (size, size):
        pil = pil.resize((size, size), Image.BILINEAR)
        resized = True
    arr = np.asarray(pil, dtype=np.float32) / 255.0 * 2.0 - 1.0
    return arr, resized


def _encode_image(image: np.ndarray) -> str:
    return base64.b64encode(image_to_png_bytes(image)).decode("ascii")


def create_app(
    engine: InferenceEngine,
    dataset_manifest=None,
    ui_dir=None,
) -> FastAPI:
    app = FastAPI(title="faceslider service")
    dataset_records = None
    if dataset_manifest is not None:
        from .synth import load_manifest

        _, dataset_records = load_manifest(dataset_manifest)

    @app.exception_handler(RequestValidationError)
    async def validation_as_400(request: Request, exc: RequestValidationError):
        details = [
            {"field": ".".join(str(p) for p in err["loc"]), "message": err["msg"]}
            for err in exc.errors()
        ]
        return JSONResponse(status_code=400, content={"errors": details})

    def fetch_image(image_b64, dataset_index) -> tuple[np.ndarray, bool]:
        if image_b64 is not None:
            return _decode_image(image_b64, engine.image_size)
        if dataset_index is not None:
            if dataset_records is None:
                raise HTTPException(status_code=400, detail="no dataset mounted")
            if not 0 <= dataset_index < len(dataset_records):
                raise HTTPException(status_code=400, detail="dataset_index out of range")
            return load_png_image(dataset_records[dataset_index].image_path), False
        raise HTTPException(status_code=400, detail="provide image_b64 or dataset_index")

    def parse_params(values) -> np.ndarray:
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.size != engine.n_params:
            raise HTTPException(
                status_code=422,
                detail=f"expected {engine.n_params} parameters, got {arr.size}",
            )
        if not np.all(np.isfinite(arr)):
            raise HTTPException(status_code=400, detail="parameters must be finite")
        return clamp_normalized(ParameterVector(arr)).values

    @app.get("/model/info")
    def model_info():
        return {
            "n_params": engine.n_params,
            "basis_kind": engine.basis.basis_kind,
            "image_size": engine.image_size,
            "labels": engine.parameter_labels,
            "scales": [float(s) for s in engine.basis.scales],
        }

    @app.post("/edit")
    def edit(req: EditRequest):
        if req.mode not in MODES:
            raise HTTPException(status_code=400, detail=f"unknown mode {req.mode!r}")
        image, resized = fetch_image(req.image_b64, req.dataset_index)
        if req.mode == "neutralize":
            vec = np.zeros(engine.n_params)
        elif req.mode == "edit":
            if req.params is None:
                raise HTTPException(status_code=400, detail="edit mode requires params")
            vec = parse_params(req.params)
        elif req.mode in ("transfer", "interpolate"):
            if req.target_image_b64 is None:
                raise HTTPException(
                    status_code=400, detail=f"{req.mode} mode requires target_image_b64"
                )
            target, _ = _decode_image(req.target_image_b64, engine.image_size)
            p_trg = clamp_normalized(ParameterVector(engine.regress(target)))
            if req.mode == "transfer":
                vec = p_trg.values
            else:
                if req.a is None or not 0.0 <= req.a <= 1.0:
                    raise HTTPException(
                        status_code=400, detail="interpolate mode requires a in [0, 1]"
                    )
                if req.params is None:
                    raise HTTPException(
                        status_code=400, detail="interpolate mode requires source params"
                    )
                p_src = ParameterVector(parse_params(req.params))
                vec = interpolate_parameters(p_src, p_trg, req.a).values
        result = engine.edit(image, vec)
        return {
            "image_b64": _encode_image(result.image),
            "p_est": [float(v) for v in result.p_est],
            "applied_params": [float(v) for v in vec],
            "resized": resized,
        }

    @app.post("/regress")
    def regress(req: RegressRequest):
        image, resized = fetch_image(req.image_b64, req.dataset_index)
        params = engine.regress(image)
        return {"params": [float(v) for v in params], "resized": resized}

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
