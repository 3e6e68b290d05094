"""Session-oriented interactive inpainting API.

The loop: POST /sessions with a damaged image and its mask -> coarse result
plus an editable pseudo-color semantic mask; POST /sessions/{id}/refine with
an edited mask (any number of times) -> fine results. Bottleneck features
are computed exactly once per session and cached on disk, so refinement
never re-runs stage 1.

Sessions live under a session directory (inputs, cached features, history,
manifest) and survive process restarts. Images travel as base64 PNG fields;
errors are JSON {code, message, detail}.
"""

import base64
import io
import json
import threading
import time
import uuid
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image as PILImage
from pydantic import BaseModel

from .errors import EspaintError, SessionNotFoundError, UnknownColorError
from .imaging import (
    composite,
    labels_to_pseudocolor,
    pseudocolor_to_labels,
    resize_image,
    resize_mask,
    save_image_png,
    save_mask_png,
    load_image_png,
    load_mask_png,
)

DEFAULT_TTL_SECONDS = 24 * 3600


class CreateSessionRequest(BaseModel):
    image: str  # base64 PNG, RGB
    mask: str  # base64 PNG, grayscale; >= 128 marks damage


class RefineRequest(BaseModel):
    mask: str  # base64 PNG of the edited pseudo-color mask


class ServiceError(EspaintError):
    def __init__(self, status, code, message, detail=None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.detail = detail


def _decode_png(b64, mode):
    try:
        raw = base64.b64decode(b64, validate=True)
        with PILImage.open(io.BytesIO(raw)) as im:
            arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
    except Exception as exc:
        raise ServiceError(400, "bad_image", f"cannot decode PNG payload: {exc}") from exc
    if mode == "RGB":
        return np.transpose(arr, (2, 0, 1))
    return (arr >= 128.0 / 255.0).astype(np.float32)[None]


def _encode_png(image):
    arr = np.round(np.clip(np.transpose(image, (1, 2, 0)), 0, 1) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _resize_nearest(image, size):
    arr = np.round(np.clip(np.transpose(image, (1, 2, 0)), 0, 1) * 255.0).astype(np.uint8)
    im = PILImage.fromarray(arr, mode="RGB").resize((size, size), PILImage.NEAREST)
    return np.transpose(np.asarray(im, dtype=np.float32) / 255.0, (2, 0, 1))


class SessionStore:
    """Disk-backed session state with per-session write serialization."""

    def __init__(self, root, ttl_seconds=DEFAULT_TTL_SECONDS):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.ttl = ttl_seconds
        self._locks = {}
        self._locks_guard = threading.Lock()

    def lock(self, session_id):
        with self._locks_guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def path(self, session_id):
        return self.root / session_id

    def create(self, manifest, arrays, features):
        sid = manifest["id"]
        d = self.path(sid)
        d.mkdir(parents=True)
        (d / "history").mkdir()
        for name, (kind, arr) in arrays.items():
            if kind == "image":
                save_image_png(arr, d / f"{name}.png")
            else:
                save_mask_png(arr, d / f"{name}.png")
        torch.save(features, d / "features.pt")
        self._write_manifest(sid, manifest)

    def _write_manifest(self, sid, manifest):
        tmp = self.path(sid) / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        tmp.replace(self.path(sid) / "manifest.json")

    def manifest(self, session_id):
        path = self.path(session_id) / "manifest.json"
        if not path.exists():
            raise SessionNotFoundError(f"no session {session_id}")
        manifest = json.loads(path.read_text(encoding="utf-8"))
        if self.ttl and time.time() - manifest["created"] > self.ttl:
            raise SessionNotFoundError(f"session {session_id} expired")
        return manifest

    def features(self, session_id):
        return torch.load(self.path(session_id) / "features.pt", weights_only=True)

    def image(self, session_id, name):
        return load_image_png(self.path(session_id) / f"{name}.png")

    def mask(self, session_id, name):
        return load_mask_png(self.path(session_id) / f"{name}.png")

    def append_history(self, session_id, mask_image, result):
        manifest = self.manifest(session_id)
        index = len(manifest["history"])
        d = self.path(session_id) / "history"
        save_image_png(mask_image, d / f"{index:04d}_mask.png")
        save_image_png(result, d / f"{index:04d}_result.png")
        manifest["history"].append({"index": index, "submitted_at": time.time()})
        self._write_manifest(session_id, manifest)
        return manifest

    def history_image(self, session_id, index, which):
        return load_image_png(self.path(session_id) / "history" / f"{index:04d}_{which}.png")


def create_app(engine, palette, store):
    app = FastAPI(title="espaint interactive inpainting")

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status,
            content={"code": exc.code, "message": str(exc), "detail": exc.detail},
        )

    @app.exception_handler(EspaintError)
    async def _domain_error(request: Request, exc: EspaintError):
        if isinstance(exc, SessionNotFoundError):
            return JSONResponse(
                status_code=404,
                content={"code": "session_not_found", "message": str(exc), "detail": None},
            )
        if isinstance(exc, UnknownColorError):
            return JSONResponse(
                status_code=400,
                content={
                    "code": "unknown_color",
                    "message": str(exc),
                    "detail": {"coordinates": exc.coordinates},
                },
            )
        return JSONResponse(
            status_code=400, content={"code": "bad_request", "message": str(exc), "detail": None}
        )

    def palette_doc():
        return [{"id": e.id, "name": e.name, "rgb": list(e.rgb)} for e in palette.entries]

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/palette")
    def get_palette():
        return {"palette": palette_doc()}

    @app.post("/sessions")
    def create_session(body: CreateSessionRequest):
        image = _decode_png(body.image, "RGB")
        mask = _decode_png(body.mask, "L")
        original_size = list(image.shape[1:])
        size = engine.image_size
        image = resize_image(image, size)
        mask = resize_mask(mask, size)
        coarse, f_c = engine.coarse_and_features(image, mask)
        coarse_comp = composite(coarse, image, mask)
        labels = engine.segment_labels(coarse_comp)
        pseudo = labels_to_pseudocolor(labels, palette)
        sid = uuid.uuid4().hex
        manifest = {
            "id": sid,
            "created": time.time(),
            "size": size,
            "original_size": original_size,
            "history": [],
        }
        store.create(
            manifest,
            {
                "input": ("image", image),
                "mask": ("mask", mask),
                "coarse": ("image", coarse_comp),
                "semantic": ("image", pseudo),
            },
            f_c,
        )
        return {
            "id": sid,
            "coarse": _encode_png(coarse_comp),
            "semantic_mask": _encode_png(pseudo),
            "palette": palette_doc(),
        }

    @app.post("/sessions/{session_id}/refine")
    def refine(session_id: str, body: RefineRequest):
        with store.lock(session_id):
            store.manifest(session_id)  # 404/expiry before any work
            mask_image = _decode_png(body.mask, "RGB")
            if mask_image.shape[1] != engine.image_size:
                # label imagery resizes nearest-neighbor; interpolation would
                # blend palette colors into unknown ones
                mask_image = _resize_nearest(mask_image, engine.image_size)
            labels = pseudocolor_to_labels(mask_image, palette)
            f_c = store.features(session_id)
            fine = engine.refine(f_c, labels)
            original = store.image(session_id, "input")
            damage = store.mask(session_id, "mask")
            result = composite(fine, original, damage)
            store.append_history(session_id, mask_image, result)
            return {"id": session_id, "result": _encode_png(result)}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        manifest = store.manifest(session_id)
        history = []
        for entry in manifest["history"]:
            history.append(
                {
                    "index": entry["index"],
                    "submitted_at": entry["submitted_at"],
                    "mask": _encode_png(store.history_image(session_id, entry["index"], "mask")),
                    "result": _encode_png(
                        store.history_image(session_id, entry["index"], "result")
                    ),
                }
            )
        return {
            "id": manifest["id"],
            "created": manifest["created"],
            "size": manifest["size"],
            "original_size": manifest["original_size"],
            "input": _encode_png(store.image(session_id, "input")),
            "mask": _encode_png(np.repeat(store.mask(session_id, "mask"), 3, axis=0)),
            "coarse": _encode_png(store.image(session_id, "coarse")),
            "semantic_mask": _encode_png(store.image(session_id, "semantic")),
            "history": history,
        }

    return app
