"""Offline two-phase training.

Phase 1 optimizes the backbone alone against ground truth with the
normalized focal loss; phase 2 freezes the backbone bit-for-bit and trains
the refinement head with the two-term (ground truth + binarized coarse mask)
supervision. Clicks are sampled fresh every step, and with a fixed
probability a corrective click derived from the model's own current
prediction is appended, approximating iterative training.

Runs are deterministic functions of (dataset, TrainConfig).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import netcore
from .guidance import next_robot_click, render_disks, sample_training_clicks
from .losses import LossConfig, normalized_focal_loss, training_loss
from .netcore import TAG_ADM, TAG_BSM, ModelConfig, ParamSet
from .raster import _as_array


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr_bsm: float = 1e-3
    lr_adm: float = 5e-4
    optimizer: str = "sgd"  # "sgd" | "adam"
    seed: int = 0
    iterative_click_prob: float = 0.3
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr_bsm <= 0 or self.lr_adm <= 0:
            raise ValueError("learning rates must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class _Optimizer:
    """Plain SGD by default, with an adaptive-moment option."""

    def __init__(self, kind, lr):
        self.kind = kind
        self.lr = lr
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: ParamSet, grads):
        self.t += 1
        for name, g in grads.items():
            old = params.get(name)
            g_t = torch.from_numpy(g).to(old.dtype)
            if self.kind == "sgd":
                new = old - self.lr * g_t
            else:
                b1, b2, eps = 0.9, 0.999, 1e-8
                m = self.m.get(name, torch.zeros_like(old))
                v = self.v.get(name, torch.zeros_like(old))
                m = b1 * m + (1 - b1) * g_t
                v = b2 * v + (1 - b2) * g_t * g_t
                self.m[name], self.v[name] = m, v
                m_hat = m / (1 - b1 ** self.t)
                v_hat = v / (1 - b2 ** self.t)
                new = old - self.lr * m_hat / (torch.sqrt(v_hat) + eps)
            params.set_(name, new)


def _sample_clicks(image, gt, params, cfg, model_config, epoch, idx, phase,
                   refine):
    """Sampled clicks plus, sometimes, a corrective click against the
    model's current prediction (iterative-training approximation)."""
    clicks = sample_training_clicks(gt, [cfg.seed, epoch, idx, phase])
    rng = np.random.default_rng([cfg.seed, epoch, idx, phase, 1])
    if rng.random() < cfg.iterative_click_prob:
        arr = _as_array(gt)
        g = render_disks(clicks, arr.shape[0], arr.shape[1])
        with torch.no_grad():
            coarse, refined, _at, _bt = netcore.forward_batch(
                [image], [g], params, model_config, chain=False)
        pred = (refined[0] if refine else coarse[0]) > 0.5
        if not np.array_equal(pred, arr.astype(bool)):
            clicks = clicks + [next_robot_click(pred, arr, len(clicks) + 1)]
    return clicks


def _epoch_batches(n, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch, 99]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _group_by_shape(dataset, indices):
    groups = {}
    for i in indices:
        shape = _as_array(dataset[i][1]).shape
        groups.setdefault(shape, []).append(int(i))
    return groups.values()


def train_bsm(dataset, cfg: TrainConfig,
              model_config: ModelConfig = ModelConfig(),
              init: ParamSet | None = None, on_epoch=None) -> ParamSet:
    """Phase 1: optimize backbone parameters only; the refinement head keeps
    its initialization."""
    if not dataset:
        raise ValueError("training dataset is empty")
    params = init.clone() if init is not None else \
        netcore.init_params(model_config, cfg.seed)
    opt = _Optimizer(cfg.optimizer, cfg.lr_bsm)
    gamma, eps = cfg.loss.gamma, cfg.loss.eps
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for batch in _epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            for idxs in _group_by_shape(dataset, batch):
                images = [dataset[i][0] for i in idxs]
                gts = [dataset[i][1] for i in idxs]
                guidances = [
                    render_disks(
                        _sample_clicks(img, gt, params, cfg, model_config,
                                       epoch, i, phase=1, refine=False),
                        gt.height, gt.width)
                    for img, gt, i in zip(images, gts, idxs)]
                coarse, tape = netcore.bsm_forward_batch(images, guidances,
                                                         params, model_config)
                b = len(idxs)
                grad_stack = np.zeros_like(coarse)
                for k in range(b):
                    loss, g = normalized_focal_loss(coarse[k], gts[k].data,
                                                    gamma, eps, return_grad=True)
                    if not np.isfinite(loss):
                        raise RuntimeError(
                            f"phase-1 loss diverged at epoch {epoch}, image "
                            f"{idxs[k]}: {loss}")
                    grad_stack[k] = g / b
                    total += loss
                    count += 1
                grads = netcore.backward(tape, grad_stack)
                opt.step(params, {n: g for n, g in grads.items()
                                  if params.tag(n) == TAG_BSM})
        if on_epoch:
            on_epoch(epoch, total / count, time.perf_counter() - t0)
    return params


def train_adm(dataset, bsm_params: ParamSet, cfg: TrainConfig,
              model_config: ModelConfig = ModelConfig(), on_epoch=None) -> ParamSet:
    """Phase 2: freeze the backbone, train the refinement head with the
    ground-truth + coarse-mask supervision."""
    if not dataset:
        raise ValueError("training dataset is empty")
    params = bsm_params.clone()
    opt = _Optimizer(cfg.optimizer, cfg.lr_adm)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for batch in _epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            for idxs in _group_by_shape(dataset, batch):
                images = [dataset[i][0] for i in idxs]
                gts = [dataset[i][1] for i in idxs]
                guidances = [
                    render_disks(
                        _sample_clicks(img, gt, params, cfg, model_config,
                                       epoch, i, phase=2, refine=True),
                        gt.height, gt.width)
                    for img, gt, i in zip(images, gts, idxs)]
                coarse, refined, tape, _bt = netcore.forward_batch(
                    images, guidances, params, model_config,
                    chain=False, bsm_grad=False)
                b = len(idxs)
                grad_stack = np.zeros_like(refined)
                for k in range(b):
                    loss, g = training_loss(refined[k], gts[k].data, coarse[k],
                                            cfg.loss, return_grad=True)
                    if not np.isfinite(loss):
                        raise RuntimeError(
                            f"phase-2 loss diverged at epoch {epoch}, image "
                            f"{idxs[k]}: {loss}")
                    grad_stack[k] = g / b
                    total += loss
                    count += 1
                grads = netcore.backward(tape, grad_stack)
                opt.step(params, {n: g for n, g in grads.items()
                                  if params.tag(n) == TAG_ADM})
        if on_epoch:
            on_epoch(epoch, total / count, time.perf_counter() - t0)
    return params
