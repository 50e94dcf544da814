"""Quantitative evaluation: NoC@target, mIoU-per-click curves, forgetting
decay, and the ADM x Optim ablation grid.

The click protocol is the standard robot-annotator loop: start from an empty
prediction, click the interior of the largest error region, stop when the
target IoU is reached or the click cap is hit (capped images count as cap
clicks). With adaptation enabled the engine carries its parameters across
images in dataset order, so ordering is part of the protocol; with
adaptation off the per-image results are order-invariant.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import adapter
from .guidance import next_robot_click
from .netcore import ModelConfig, ParamSet
from .raster import _as_array, iou

DEFAULT_TARGETS = (0.85, 0.90)
DEFAULT_CAP = 20


def _tkey(target: float) -> str:
    return str(int(round(target * 100)))


class AdapterEngine:
    """Click engine over the real model; parameters persist across images."""

    def __init__(self, params: ParamSet, cfg: adapter.AdaptConfig,
                 model_config: ModelConfig = ModelConfig()):
        self.params = params
        self.cfg = cfg
        self.model_config = model_config

    def open(self, image, gt=None):
        session = adapter.begin_session(image, self.params, self.cfg,
                                        self.model_config)
        return _LiveSession(session)


class _LiveSession:
    def __init__(self, session):
        self.session = session

    def apply(self, click) -> np.ndarray:
        return adapter.process_click(self.session, click).data

    def close(self):
        if self.session.clicks and not self.session.finished:
            adapter.end_session(self.session)


@dataclass(eq=False)
class NoCReport:
    targets: tuple
    cap: int
    mode: str
    n_images: int
    mean_noc: dict           # target key -> float
    per_image: dict          # target key -> list[int]
    trajectories: list       # per image, IoU after each click

    def to_dict(self):
        return {
            "targets": list(self.targets),
            "cap": self.cap,
            "mode": self.mode,
            "n_images": self.n_images,
            "mean_noc": self.mean_noc,
            "per_image": self.per_image,
            "iou_trajectories": self.trajectories,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"


def _run_image(live, gt, cap, stop_iou):
    """Robot-click one image; returns the IoU trajectory (len == clicks)."""
    g = _as_array(gt).astype(bool)
    pred = np.zeros_like(g)
    trajectory = []
    for k in range(1, cap + 1):
        if np.array_equal(pred, g):
            break
        click = next_robot_click(pred, g, ordinal=k)
        probs = live.apply(click)
        pred = probs > 0.5
        trajectory.append(iou(pred, g))
        if trajectory[-1] >= stop_iou:
            break
    return trajectory


def _clicks_to_target(trajectory, target, cap):
    for k, v in enumerate(trajectory, start=1):
        if v >= target:
            return k
    return cap


def noc_eval(params: ParamSet, dataset, cfg: adapter.AdaptConfig,
             targets=DEFAULT_TARGETS, cap: int = DEFAULT_CAP,
             engine=None, model_config: ModelConfig = ModelConfig()) -> NoCReport:
    """Mean number of clicks to reach each target IoU over a dataset."""
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    targets = tuple(sorted(targets))
    if engine is None:
        engine = AdapterEngine(params.clone(), cfg, model_config)
    trajectories = []
    for image, gt in dataset:
        live = engine.open(image, gt)
        trajectories.append(_run_image(live, gt, cap, max(targets)))
        live.close()
    per_image = {
        _tkey(t): [_clicks_to_target(traj, t, cap) for traj in trajectories]
        for t in targets}
    mean_noc = {k: float(np.mean(v)) for k, v in per_image.items()}
    return NoCReport(targets, cap, cfg.mode, len(dataset),
                     mean_noc, per_image, trajectories)


def miou_curve(params: ParamSet, dataset, cfg: adapter.AdaptConfig,
               k_max: int = DEFAULT_CAP, engine=None,
               model_config: ModelConfig = ModelConfig()):
    """Mean IoU after exactly k clicks, k = 1..k_max.

    Once a prediction matches the ground truth no further click exists; the
    final IoU carries forward for the remaining entries.
    """
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    if engine is None:
        engine = AdapterEngine(params.clone(), cfg, model_config)
    curves = np.zeros((len(dataset), k_max))
    for i, (image, gt) in enumerate(dataset):
        live = engine.open(image, gt)
        traj = _run_image(live, gt, k_max, stop_iou=2.0)  # never stop early
        live.close()
        padded = traj + [traj[-1]] * (k_max - len(traj)) if traj else [0.0] * k_max
        curves[i] = padded[:k_max]
    return [float(v) for v in curves.mean(axis=0)]


def decay(base_noc: float, post_noc: float) -> float:
    """Forgetting decay as a percentage of the baseline NoC."""
    if base_noc <= 0:
        raise ValueError("baseline NoC must be > 0")
    return 100.0 * (post_noc - base_noc) / base_noc


@dataclass(eq=False)
class DecayReport:
    targets: tuple
    mode: str
    baseline: dict        # variant ("frozen"|"adapted") -> {tkey: noc}
    post: dict
    decay_percent: dict   # variant -> {tkey: percent}
    adapt_noc: dict       # step-B numbers on the adaptation set

    def to_dict(self):
        return {
            "targets": list(self.targets),
            "mode": self.mode,
            "baseline_noc": self.baseline,
            "post_noc": self.post,
            "decay_percent": self.decay_percent,
            "adapt_set_noc": self.adapt_noc,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"


def forgetting_protocol(params: ParamSet, adapt_set, eval_set,
                        cfg: adapter.AdaptConfig, targets=DEFAULT_TARGETS,
                        cap: int = DEFAULT_CAP,
                        model_config: ModelConfig = ModelConfig()) -> DecayReport:
    """Baseline on eval_set, adapt across adapt_set, re-evaluate on eval_set.

    The post-adaptation evaluation runs both with adaptation re-enabled
    (deployment-faithful, "adapted") and with it off (pure forgetting
    measurement, "frozen"); decay is reported for each pairing.
    """
    off = replace(cfg, mode="off")
    base_frozen = noc_eval(params, eval_set, off, targets, cap,
                           model_config=model_config)
    evolved = params.clone()
    if cfg.mode != "off":
        base_adapted = noc_eval(params, eval_set, cfg, targets, cap,
                                model_config=model_config)
        engine = AdapterEngine(evolved, cfg, model_config)
        adapt_report = noc_eval(evolved, adapt_set, cfg, targets, cap,
                                engine=engine, model_config=model_config)
    else:
        base_adapted = base_frozen
        adapt_report = noc_eval(evolved, adapt_set, off, targets, cap,
                                model_config=model_config)
    post_frozen = noc_eval(evolved, eval_set, off, targets, cap,
                           model_config=model_config)
    post_adapted = post_frozen if cfg.mode == "off" else \
        noc_eval(evolved, eval_set, cfg, targets, cap, model_config=model_config)

    baseline = {"frozen": base_frozen.mean_noc, "adapted": base_adapted.mean_noc}
    post = {"frozen": post_frozen.mean_noc, "adapted": post_adapted.mean_noc}
    decay_percent = {
        variant: {k: decay(baseline[variant][k], post[variant][k])
                  for k in baseline[variant]}
        for variant in baseline}
    return DecayReport(tuple(sorted(targets)), cfg.mode, baseline, post,
                       decay_percent, adapt_report.mean_noc)


GRID_CELLS = ("adm_on_optim_on", "adm_on_optim_off",
              "adm_off_optim_on", "adm_off_optim_off")


def ablation_grid(params: ParamSet, dataset, cfg: adapter.AdaptConfig,
                  targets=DEFAULT_TARGETS, cap: int = DEFAULT_CAP,
                  model_config: ModelConfig = ModelConfig()):
    """Four NoC runs over {ADM on/off} x {Optim on/off}.

    ADM off serves the coarse map directly; Optim on without the ADM updates
    the backbone at the head's learning rate (the classic full-model
    on-the-fly baseline).
    """
    if cfg.mode == "off":
        raise ValueError("ablation grid needs an adapting base config")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # intentional lr-ratio override
        cells = {
            "adm_on_optim_on": cfg,
            "adm_on_optim_off": replace(cfg, mode="off"),
            "adm_off_optim_on": replace(cfg, mode="global", use_adm=False,
                                        lr_bsm=cfg.lr_adm),
            "adm_off_optim_off": replace(cfg, mode="off", use_adm=False),
        }
    return {name: noc_eval(params, dataset, cell_cfg, targets, cap,
                           model_config=model_config).mean_noc
            for name, cell_cfg in cells.items()}


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["clicks", "miou"])
        for k, v in enumerate(curve, start=1):
            writer.writerow([k, f"{v:.6f}"])
