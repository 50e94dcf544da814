"""Session-oriented annotation service over HTTP+JSON.

One model instance, one adapting session at a time; read-only (mode "off")
sessions may run concurrently. All parameter mutations funnel through a
single lock, updates are copy-on-write tensor replacements, and finished
adapting sessions persist a new versioned checkpoint atomically, so a killed
server restarts from the last finished version with no half-applied state.

Masks travel as run-length encodings of the row-major binary mask:
{"counts": [...], "size": [height, width]}, counts alternating runs of 0s
and 1s and starting with a (possibly zero-length) run of 0s.
"""

from __future__ import annotations

import io
import os
import re
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
import yaml
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from . import adapter, netcore
from .adapter import AdaptConfig
from .guidance import NEGATIVE, POSITIVE, Click
from .losses import LossConfig
from .netcore import ModelConfig
from .raster import MIN_SIDE, binarize

ENV_PREFIX = "CLICKFORGE_"

_CKPT_RE = re.compile(r"^ckpt-(\d{5})\.cfck$")


# --- mask wire encoding -----------------------------------------------------

def mask_to_rle(mask) -> dict:
    arr = np.asarray(mask.data if hasattr(mask, "data") else mask, dtype=np.uint8)
    h, w = arr.shape
    flat = arr.ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"counts": counts, "size": [int(h), int(w)]}


def rle_to_mask(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=np.uint8)
    pos, val = 0, 0
    for run in rle["counts"]:
        if val:
            flat[pos:pos + run] = 1
        pos += run
        val = 1 - val
    if pos != h * w:
        raise ValueError(f"RLE covers {pos} pixels, expected {h * w}")
    return flat.reshape(h, w)


# --- configuration ----------------------------------------------------------

@dataclass
class ServeConfig:
    checkpoint: str = ""          # initial checkpoint (version 0)
    state_dir: str = "clickforge-state"
    host: str = "127.0.0.1"
    port: int = 8711
    mode: str = "local"
    lr_adm: float = 1e-4
    lr_bsm: float = 1e-6
    steps_per_click: int = 3
    lambda_sparse: float = 1.0
    lambda_dense: float = 10.0
    lambda_anchor: float = 5e-3
    dense_activation_clicks: int = 4
    max_undo: int = 50
    seed: int = 0                 # fallback init when no checkpoint exists
    ui_dir: str = ""

    def adapt_config(self, mode=None) -> AdaptConfig:
        return AdaptConfig(
            mode=mode if mode is not None else self.mode,
            lr_adm=self.lr_adm, lr_bsm=self.lr_bsm,
            steps_per_click=self.steps_per_click,
            loss=LossConfig(lambda_sparse=self.lambda_sparse,
                            lambda_dense=self.lambda_dense,
                            lambda_anchor=self.lambda_anchor,
                            dense_activation_clicks=self.dense_activation_clicks))


def load_config(path=None, env=None) -> ServeConfig:
    """Key-value YAML file plus CLICKFORGE_* environment overrides."""
    cfg = ServeConfig()
    values = {}
    if path:
        with open(path) as f:
            values.update(yaml.safe_load(f) or {})
    env = os.environ if env is None else env
    for key in list(vars(cfg)):
        env_key = ENV_PREFIX + key.upper()
        if env_key in env:
            values[key] = env[env_key]
    for key, raw in values.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        if isinstance(current, bool):
            raw = str(raw).lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            raw = int(raw)
        elif isinstance(current, float):
            raw = float(raw)
        setattr(cfg, key, raw)
    return cfg


# --- wire schemas -----------------------------------------------------------

class RleMask(BaseModel):
    counts: list[int]
    size: list[int]


class ClickBody(BaseModel):
    row: int
    col: int
    polarity: str
    ordinal: int


class StepLoss(BaseModel):
    click_ordinal: int
    step_index: int
    l_sparse: float
    l_dense: float
    l_anchor: float
    l_total: float
    aborted: bool


class ConfidenceSummary(BaseModel):
    mean: float
    min: float
    max: float
    foreground_fraction: float


class CreateSessionResponse(BaseModel):
    session_id: str
    mode: str
    height: int
    width: int
    checkpoint_version: int


class ClickResponse(BaseModel):
    session_id: str
    ordinal: int
    mask: RleMask
    confidence: ConfidenceSummary
    iou: float | None = None
    steps: list[StepLoss]


class UndoResponse(BaseModel):
    session_id: str
    n_clicks: int
    mask: RleMask
    iou: float | None = None


class SessionStateResponse(BaseModel):
    session_id: str
    mode: str
    finished: bool
    n_clicks: int
    clicks: list[ClickBody]
    mask: RleMask
    iou: float | None = None
    undo_available: bool
    height: int
    width: int
    created_at: str
    finished_at: str | None = None


class FinishResponse(BaseModel):
    session_id: str
    mask: RleMask
    mask_path: str
    checkpoint_version: int


class HealthResponse(BaseModel):
    status: str
    checkpoint_version: int
    active_adapting_session: str | None = None


class CheckpointsResponse(BaseModel):
    versions: list[int]
    latest: int


# --- server state -----------------------------------------------------------

@dataclass(eq=False)
class ServerSession:
    id: str
    session: adapter.Session
    mode: str
    gt: np.ndarray | None
    created_at: str
    finished_at: str | None = None
    undo_stack: list = field(default_factory=list)
    mask_path: str = ""


class ModelStore:
    """Owns the live parameters, the version counter, and all sessions."""

    def __init__(self, cfg: ServeConfig, model_config: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.model_config = model_config
        self.lock = threading.Lock()
        self.sessions: dict[str, ServerSession] = {}
        self.active_adapting: str | None = None
        os.makedirs(self.ckpt_dir, exist_ok=True)
        os.makedirs(self.mask_dir, exist_ok=True)
        self.version, self.params = self._load_latest()

    @property
    def ckpt_dir(self):
        return os.path.join(self.cfg.state_dir, "checkpoints")

    @property
    def mask_dir(self):
        return os.path.join(self.cfg.state_dir, "masks")

    def versions(self):
        out = []
        for name in os.listdir(self.ckpt_dir):
            m = _CKPT_RE.match(name)
            if m:
                out.append(int(m.group(1)))
        return sorted(out)

    def _ckpt_path(self, version):
        return os.path.join(self.ckpt_dir, f"ckpt-{version:05d}.cfck")

    def _load_latest(self):
        versions = self.versions()
        if versions:
            v = versions[-1]
            return v, netcore.load_checkpoint(self._ckpt_path(v), self.model_config)
        if self.cfg.checkpoint:
            params = netcore.load_checkpoint(self.cfg.checkpoint, self.model_config)
        else:
            params = netcore.init_params(self.model_config, self.cfg.seed)
        netcore.save_checkpoint(params, self._ckpt_path(0))
        return 0, params

    def commit(self) -> int:
        """Persist the live parameters as the next checkpoint version."""
        self.version += 1
        netcore.save_checkpoint(self.params, self._ckpt_path(self.version))
        return self.version


def _now():
    return datetime.now(timezone.utc).isoformat()


def _decode_png(data: bytes, what: str):
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            return im
    except Exception as exc:
        raise HTTPException(400, f"could not decode {what} as an image: {exc}")


def _session_mask_rle(srv: ServerSession) -> dict:
    return mask_to_rle(binarize(srv.session.refined))


def _session_iou(srv: ServerSession):
    if srv.gt is None:
        return None
    from .raster import iou as _iou
    return _iou(binarize(srv.session.refined), srv.gt)


def _steps_for_click(srv: ServerSession, n_before: int):
    return [StepLoss(click_ordinal=r.click_ordinal, step_index=r.step_index,
                     l_sparse=r.l_sparse, l_dense=r.l_dense,
                     l_anchor=r.l_anchor, l_total=r.l_total, aborted=r.aborted)
            for r in srv.session.step_log[n_before:]]


def create_app(cfg: ServeConfig | None = None,
               model_config: ModelConfig = ModelConfig()) -> FastAPI:
    cfg = cfg or ServeConfig()
    store = ModelStore(cfg, model_config)
    app = FastAPI(title="clickforge annotation service")
    app.state.store = store

    def get_session(session_id: str) -> ServerSession:
        srv = store.sessions.get(session_id)
        if srv is None:
            raise HTTPException(404, f"unknown session {session_id!r}")
        return srv

    @app.post("/sessions", response_model=CreateSessionResponse, status_code=201)
    async def create_session(image: UploadFile = File(...),
                             gt: UploadFile | None = File(None),
                             mode: str = Form(cfg.mode)):
        if mode not in adapter.MODES:
            raise HTTPException(422, f"mode must be one of {adapter.MODES}")
        im = _decode_png(await image.read(), "image")
        arr = (np.asarray(im.convert("RGB"), dtype=np.uint8) / 255.0).astype(np.float32)
        if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
            raise HTTPException(422, f"image sides must be >= {MIN_SIDE}")
        gt_mask = None
        if gt is not None:
            gim = _decode_png(await gt.read(), "ground truth")
            gt_arr = np.asarray(gim.convert("L"), dtype=np.uint8)
            if gt_arr.shape != arr.shape[:2]:
                raise HTTPException(422, "ground truth dimensions do not match image")
            vals = np.unique(gt_arr)
            if not np.all(np.isin(vals, (0, 255))):
                raise HTTPException(422, "ground truth mask must be 0/255 binary")
            gt_mask = (gt_arr == 255).astype(np.uint8)
        with store.lock:
            if mode != "off" and store.active_adapting is not None:
                return JSONResponse(
                    status_code=409, headers={"Retry-After": "2"},
                    content={"detail": "an adapting session is already active; "
                                       "retry later"})
            session = adapter.begin_session(arr, store.params,
                                            cfg.adapt_config(mode),
                                            store.model_config)
            sid = uuid.uuid4().hex[:12]
            srv = ServerSession(sid, session, mode, gt_mask, _now())
            store.sessions[sid] = srv
            if mode != "off":
                store.active_adapting = sid
        return CreateSessionResponse(
            session_id=sid, mode=mode, height=session.height,
            width=session.width, checkpoint_version=store.version)

    @app.post("/sessions/{session_id}/clicks", response_model=ClickResponse)
    def post_click(session_id: str, body: ClickBody):
        srv = get_session(session_id)
        if srv.session.finished:
            raise HTTPException(409, "session is finished")
        if body.polarity not in (POSITIVE, NEGATIVE):
            raise HTTPException(422, "polarity must be positive|negative")
        expected = len(srv.session.clicks) + 1
        if body.ordinal != expected:
            raise HTTPException(409, f"click ordinal {body.ordinal} out of "
                                     f"order (expected {expected})")
        if not (0 <= body.row < srv.session.height
                and 0 <= body.col < srv.session.width):
            raise HTTPException(422, "click coordinates out of bounds")
        click = Click(body.row, body.col, body.polarity, body.ordinal)
        with store.lock:
            snap = adapter.snapshot_click_state(srv.session)
            srv.undo_stack.append(snap)
            if len(srv.undo_stack) > cfg.max_undo:
                srv.undo_stack.pop(0)
            n_steps = snap["n_steps"]
            refined = adapter.process_click(srv.session, click)
        probs = refined.data
        return ClickResponse(
            session_id=session_id, ordinal=body.ordinal,
            mask=RleMask(**_session_mask_rle(srv)),
            confidence=ConfidenceSummary(
                mean=float(probs.mean()), min=float(probs.min()),
                max=float(probs.max()),
                foreground_fraction=float((probs > 0.5).mean())),
            iou=_session_iou(srv),
            steps=_steps_for_click(srv, n_steps))

    @app.post("/sessions/{session_id}/undo", response_model=UndoResponse)
    def undo(session_id: str):
        srv = get_session(session_id)
        if srv.session.finished:
            raise HTTPException(409, "session is finished")
        if not srv.undo_stack:
            raise HTTPException(409, "nothing to undo")
        with store.lock:
            adapter.restore_click_state(srv.session, srv.undo_stack.pop())
        return UndoResponse(session_id=session_id,
                            n_clicks=len(srv.session.clicks),
                            mask=RleMask(**_session_mask_rle(srv)),
                            iou=_session_iou(srv))

    @app.post("/sessions/{session_id}/finish", response_model=FinishResponse)
    def finish(session_id: str):
        srv = get_session(session_id)
        if srv.session.finished:
            raise HTTPException(409, "session already finished")
        if not srv.session.clicks:
            raise HTTPException(409, "cannot finish a session with zero clicks")
        with store.lock:
            mask, _params = adapter.end_session(srv.session)
            srv.finished_at = _now()
            srv.undo_stack.clear()
            srv.mask_path = os.path.join(store.mask_dir, f"{session_id}.png")
            Image.fromarray((mask.data * 255).astype(np.uint8), mode="L") \
                .save(srv.mask_path)
            version = store.version
            if srv.mode != "off":
                version = store.commit()
                store.active_adapting = None
        return FinishResponse(session_id=session_id, mask=RleMask(**mask_to_rle(mask)),
                              mask_path=srv.mask_path, checkpoint_version=version)

    @app.get("/sessions/{session_id}", response_model=SessionStateResponse)
    def session_state(session_id: str):
        srv = get_session(session_id)
        return SessionStateResponse(
            session_id=session_id, mode=srv.mode, finished=srv.session.finished,
            n_clicks=len(srv.session.clicks),
            clicks=[ClickBody(row=c.row, col=c.col, polarity=c.polarity,
                              ordinal=c.ordinal) for c in srv.session.clicks],
            mask=RleMask(**_session_mask_rle(srv)), iou=_session_iou(srv),
            undo_available=bool(srv.undo_stack) and not srv.session.finished,
            height=srv.session.height, width=srv.session.width,
            created_at=srv.created_at, finished_at=srv.finished_at)

    @app.get("/healthz", response_model=HealthResponse)
    def healthz():
        return HealthResponse(status="ok", checkpoint_version=store.version,
                              active_adapting_session=store.active_adapting)

    @app.get("/checkpoints", response_model=CheckpointsResponse)
    def checkpoints():
        versions = store.versions()
        return CheckpointsResponse(versions=versions, latest=versions[-1])

    ui_dir = cfg.ui_dir
    if ui_dir and os.path.isdir(ui_dir):
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def serve(cfg: ServeConfig):
    import uvicorn
    uvicorn.run(create_app(cfg), host=cfg.host, port=cfg.port, log_level="info")
