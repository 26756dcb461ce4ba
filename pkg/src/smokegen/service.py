"""Localhost annotation service: serves generated images and persists human
scores to an append-only JSONL store with fsync acknowledgement."""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .corpus import Manifest, resolve_path
from .filtering import ScoreRecord

log = logging.getLogger(__name__)


class ScoreIn(BaseModel):
    id: str
    color: float = Field(ge=0, le=10)
    visibility: float = Field(ge=0, le=10)
    translucency: float = Field(ge=0, le=10)


class AnnotationStore:
    """Append-only JSONL store; reads take the last record per id."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.records: dict[str, ScoreRecord] = {}
        self.conflicts: list[str] = []
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        rec = ScoreRecord.from_json(json.loads(line))
                        self.records[rec.sample_id] = rec

    def put(self, rec: ScoreRecord) -> None:
        if rec.sample_id in self.records:
            self.conflicts.append(rec.sample_id)
            log.warning("re-score of %s: overwriting the earlier record", rec.sample_id)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec.to_json()) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self.records[rec.sample_id] = rec

    def scored_ids(self) -> set[str]:
        return set(self.records)


def create_app(
    manifest_path: str | Path,
    annotations_path: str | Path,
    root: str | Path | None = None,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    manifest = Manifest.load(manifest_path)
    root = Path(root) if root is not None else Path(manifest_path).parent
    store = AnnotationStore(annotations_path)
    app = FastAPI(title="smokegen annotation service")
    app.state.store = store

    by_id = {r.id: r for r in manifest.records}

    @app.get("/api/queue")
    def queue(n: int = 10):
        pending = []
        scored = store.scored_ids()
        for rec in manifest.records:
            if rec.id in scored:
                continue
            pending.append(
                {
                    "id": rec.id,
                    "image_url": f"/images/{rec.id}",
                    "mask_url": f"/masks/{rec.id}" if rec.mask_path else None,
                }
            )
            if len(pending) >= n:
                break
        return pending

    @app.get("/images/{sample_id}")
    def image(sample_id: str):
        rec = by_id.get(sample_id)
        if rec is None:
            raise HTTPException(404, f"unknown sample {sample_id}")
        path = resolve_path(root, rec.image_path)
        if not path.is_file():
            raise HTTPException(404, f"image file missing for {sample_id}")
        return FileResponse(path)

    @app.get("/masks/{sample_id}")
    def mask(sample_id: str):
        rec = by_id.get(sample_id)
        if rec is None or rec.mask_path is None:
            raise HTTPException(404, f"no mask for {sample_id}")
        path = resolve_path(root, rec.mask_path)
        if not path.is_file():
            raise HTTPException(404, f"mask file missing for {sample_id}")
        return FileResponse(path)

    @app.post("/api/score", status_code=201)
    def score(body: ScoreIn):
        if body.id not in by_id:
            raise HTTPException(404, f"unknown sample {body.id}")
        store.put(
            ScoreRecord(
                sample_id=body.id,
                color=body.color,
                visibility=body.visibility,
                translucency=body.translucency,
                scorer="human",
            )
        )
        return JSONResponse({"status": "ok", "id": body.id}, status_code=201)

    @app.get("/api/progress")
    def progress():
        scored = len(store.scored_ids() & set(by_id))
        return {"scored": scored, "total": len(manifest.records)}

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app


def serve(
    manifest_path: str | Path,
    annotations_path: str | Path,
    root: str | Path | None = None,
    ui_dir: str | Path | None = None,
    host: str = "127.0.0.1",
    port: int = 8008,
) -> None:
    import uvicorn

    app = create_app(manifest_path, annotations_path, root, ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
