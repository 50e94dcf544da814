"""Test-time continual adaptation: per-click optimization of the refinement
head (local mode) or of the whole model with the backbone at one percent of
the head's learning rate (global mode).

A session owns the click history, the latest coarse/refined maps, and an
anchor snapshot of the adaptation-scope parameters taken at session start.
Each click triggers a configurable number of gradient steps on the weighted
sum of the sparse click loss, the dense pseudo-label loss (active once the
session has enough clicks), and the anchor regularizer. Sessions mutate the
live ParamSet in place, so parameters evolved in one session seed the next
session's anchor.

A model instance admits one adapting session at a time; mode-off sessions
are read-only and may run concurrently.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import netcore
from .guidance import render_disks
from .losses import (LossConfig, anchor_regularizer, normalized_focal_loss,
                     sparse_click_loss, total_adaptation_loss)
from .netcore import TAG_ADM, TAG_BSM, ModelConfig, ParamSet
from .raster import Mask, ProbMap, _as_array, binarize

MODES = ("off", "local", "global")

GLOBAL_LR_RATIO = 0.01  # backbone learning rate relative to the head's


@dataclass(frozen=True)
class AdaptConfig:
    mode: str = "local"
    lr_adm: float = 1e-4
    lr_bsm: float = 1e-6
    steps_per_click: int = 3
    loss: LossConfig = field(default_factory=LossConfig)
    anchor_cadence: str = "per-session"
    use_adm: bool = True  # ablation hook: serve the coarse map when False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps_per_click < 1:
            raise ValueError("steps_per_click must be >= 1")
        if self.anchor_cadence != "per-session":
            raise ValueError("only per-session anchor cadence is supported")
        if self.mode == "global" and not np.isclose(
                self.lr_bsm, GLOBAL_LR_RATIO * self.lr_adm, rtol=1e-6):
            warnings.warn(
                f"global mode expects lr_bsm == {GLOBAL_LR_RATIO} * lr_adm "
                f"(got {self.lr_bsm} vs {GLOBAL_LR_RATIO * self.lr_adm}); "
                "proceeding with the override", stacklevel=2)

    def scope(self):
        return {"off": None, "local": TAG_ADM, "global": "all"}[self.mode]


@dataclass(eq=False)
class AnchorSnapshot:
    """Deep copy of the adaptation-scope parameters at session start."""

    tensors: dict
    scope: str


@dataclass(eq=False)
class StepRecord:
    click_ordinal: int
    step_index: int
    l_sparse: float
    l_dense: float
    l_anchor: float
    l_total: float
    aborted: bool = False


@dataclass(eq=False)
class Session:
    image: np.ndarray
    params: ParamSet
    cfg: AdaptConfig
    model_config: ModelConfig
    anchor: AnchorSnapshot | None
    clicks: list = field(default_factory=list)
    guidance: object = None
    coarse: ProbMap | None = None
    refined: ProbMap | None = None
    step_log: list = field(default_factory=list)
    finished: bool = False
    _tape: netcore.ForwardTape | None = None

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


def begin_session(image, params: ParamSet, cfg: AdaptConfig,
                  model_config: ModelConfig = ModelConfig()) -> Session:
    """Open a session; snapshots the adaptation scope unless mode is off."""
    arr = np.asarray(_as_array(image))
    anchor = None
    if cfg.mode != "off":
        scope = cfg.scope()
        anchor = AnchorSnapshot(
            {n: params.get(n).detach().clone() for n in params.scope_names(scope)},
            scope)
    session = Session(arr, params, cfg, model_config, anchor)
    session.guidance = render_disks([], session.height, session.width)
    _forward(session)
    return session


def _forward(session: Session):
    """Refresh coarse/refined maps and the gradient tape."""
    cfg = session.cfg
    needs_grad = cfg.mode != "off"
    chain = cfg.mode == "global"
    coarse, bsm_tape = netcore.bsm_forward(
        session.image, session.guidance, session.params, session.model_config)
    session.coarse = coarse
    if not cfg.use_adm:
        session.refined = coarse
        session._tape = bsm_tape if needs_grad else None
        return
    refined, adm_tape = netcore.adm_forward(
        session.image, session.guidance,
        bsm_tape if chain else coarse, session.params, session.model_config)
    session.refined = refined
    session._tape = adm_tape if needs_grad else None


def process_click(session: Session, click) -> ProbMap:
    """Apply one click: re-render disks, forward, then adapt if enabled."""
    if session.finished:
        raise ValueError("session is finished")
    if not (0 <= click.row < session.height and 0 <= click.col < session.width):
        raise ValueError(f"click at ({click.row}, {click.col}) is outside the "
                         f"{session.height}x{session.width} image")
    expected = len(session.clicks) + 1
    if click.ordinal != expected:
        raise ValueError(f"click ordinal {click.ordinal} out of order "
                         f"(expected {expected})")
    session.clicks.append(click)
    session.guidance = render_disks(session.clicks, session.height, session.width)
    _forward(session)
    if session.cfg.mode != "off":
        for _ in range(session.cfg.steps_per_click):
            adaptation_step(session)
    return session.refined


def adaptation_step(session: Session, cfg: AdaptConfig | None = None) -> StepRecord:
    """One gradient step on the total adaptation loss.

    Computes the sparse click loss always, the dense pseudo-label loss once
    the click count reaches its activation threshold, and the anchor drift
    over the adaptation scope. A non-finite loss or gradient aborts the step
    with parameters unchanged.
    """
    cfg = cfg or session.cfg
    if not session.clicks:
        raise ValueError("adaptation needs at least one click")
    params = session.params
    lcfg = cfg.loss
    scope_names = params.scope_names(cfg.scope())
    p = session.refined.data

    l_sparse, g_sparse = sparse_click_loss(p, session.guidance, return_grad=True)
    if len(session.clicks) >= lcfg.dense_activation_clicks:
        pseudo = p > 0.5  # current prediction as a frozen pseudo-label
        l_dense, g_dense = normalized_focal_loss(p, pseudo, lcfg.gamma,
                                                 lcfg.eps, return_grad=True)
    else:
        l_dense, g_dense = 0.0, None
    l_anchor, g_anchor = anchor_regularizer(params, session.anchor,
                                            scope_names, return_grad=True)

    record = StepRecord(
        click_ordinal=session.clicks[-1].ordinal,
        step_index=len(session.step_log) + 1,
        l_sparse=l_sparse, l_dense=l_dense, l_anchor=l_anchor,
        l_total=(lcfg.lambda_sparse * l_sparse + lcfg.lambda_dense * l_dense
                 + lcfg.lambda_anchor * l_anchor))
    if not np.isfinite(record.l_total):
        record.aborted = True
        session.step_log.append(record)
        return record
    # validated finite; recompute through the shared helper for the log
    record.l_total = total_adaptation_loss(l_sparse, l_dense, l_anchor, lcfg)

    dl_dp = lcfg.lambda_sparse * g_sparse
    if g_dense is not None:
        dl_dp = dl_dp + lcfg.lambda_dense * g_dense
    tape_grads = netcore.backward(session._tape, dl_dp)

    updates = {}
    for name in scope_names:
        g = tape_grads.get(name)
        total = None if g is None else g.astype(np.float64)
        a = g_anchor.get(name)
        if a is not None and lcfg.lambda_anchor != 0.0:
            total = lcfg.lambda_anchor * a if total is None \
                else total + lcfg.lambda_anchor * a
        if total is None:
            continue
        if not np.all(np.isfinite(total)):
            record.aborted = True
            session.step_log.append(record)
            _forward(session)
            return record
        lr = cfg.lr_adm if params.tag(name) == TAG_ADM else cfg.lr_bsm
        old = params.get(name)
        updates[name] = old - torch.from_numpy(total).to(old.dtype) * lr

    pre_step = {name: params.get(name) for name in updates}
    for name, tensor in updates.items():
        params.set_(name, tensor)
    try:
        _forward(session)
    except ValueError:
        # diverged update produced a non-finite map; roll the step back
        for name, tensor in pre_step.items():
            params.set_(name, tensor)
        record.aborted = True
        _forward(session)
    session.step_log.append(record)
    return record


def end_session(session: Session):
    """Close the session: final mask plus the (possibly adapted) parameters."""
    if not session.clicks:
        raise ValueError("cannot finish a session with zero clicks")
    session.finished = True
    return binarize(session.refined), session.params


# --- one-click rollback support (used by the annotation service) -----------

def snapshot_click_state(session: Session):
    """Cheap pre-click snapshot; parameter updates are copy-on-write so the
    tensor references stay valid."""
    scope = session.cfg.scope()
    names = session.params.scope_names(scope) if scope is not None else []
    return {
        "params": {n: session.params.get(n) for n in names},
        "n_clicks": len(session.clicks),
        "n_steps": len(session.step_log),
        "coarse": session.coarse,
        "refined": session.refined,
        "guidance": session.guidance,
    }


def restore_click_state(session: Session, snap):
    for name, tensor in snap["params"].items():
        session.params.set_(name, tensor)
    del session.clicks[snap["n_clicks"]:]
    del session.step_log[snap["n_steps"]:]
    session.coarse = snap["coarse"]
    session.refined = snap["refined"]
    session.guidance = snap["guidance"]
    session._tape = None
