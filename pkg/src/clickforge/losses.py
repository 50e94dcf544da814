"""Objective functions: normalized focal loss, sparse click loss, anchor
regularizer, total adaptation loss, and the two-term training loss.

Every pixel-wise loss can return its analytic gradient with respect to the
probability map; parameter-space gradients then come from the network's
reverse pass. The independent check for all of this is central finite
differences (see the test suite), so the gradients here are derived by
hand rather than taken from an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import PROB_EPS, _as_array


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    eps: float = PROB_EPS
    lambda_sparse: float = 1.0    # weight on the click-consistency term
    lambda_dense: float = 10.0    # weight on the dense pseudo-label term
    lambda_anchor: float = 5e-3   # weight on the parameter anchor
    gt_weight: float = 1.0
    coarse_weight: float = 0.4
    dense_activation_clicks: int = 4

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if min(self.lambda_sparse, self.lambda_dense, self.lambda_anchor) < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if self.dense_activation_clicks < 0:
            raise ValueError("dense_activation_clicks must be >= 0")


def normalized_focal_loss(p, y, gamma: float = 2.0, eps: float = PROB_EPS,
                          return_grad: bool = False):
    """Focal loss normalized by the total modulating weight.

    With w = (1 - p_t)^gamma and p_t the predicted confidence of the true
    class, the loss is sum(w * -log p_t) / sum(w). The normalizer makes the
    value invariant to duplicating the image.
    """
    p_raw = np.asarray(_as_array(p), dtype=np.float64)
    yb = _as_array(y).astype(bool)
    if p_raw.shape != yb.shape:
        raise ValueError(f"shapes differ: {p_raw.shape} vs {yb.shape}")
    inside = (p_raw > eps) & (p_raw < 1.0 - eps)
    pc = np.clip(p_raw, eps, 1.0 - eps)
    pt = np.where(yb, pc, 1.0 - pc)
    one_minus = 1.0 - pt
    w = one_minus ** gamma
    log_pt = np.log(pt)
    num = float(np.sum(w * -log_pt))
    den = float(np.sum(w))
    loss = num / den if den > 0 else 0.0
    if not return_grad:
        return loss
    if den > 0:
        if gamma == 0.0:
            dw = np.zeros_like(pt)
        else:
            dw = gamma * one_minus ** (gamma - 1.0)  # = -d w / d p_t
        dnum = -dw * -log_pt - w / pt   # d num / d p_t
        dden = -dw                       # d den / d p_t
        dl_dpt = (dnum * den - num * dden) / (den * den)
    else:
        dl_dpt = np.zeros_like(pt)
    grad = np.where(yb, dl_dpt, -dl_dpt)
    grad = np.where(inside, grad, 0.0)  # clamped pixels are flat
    return loss, grad


def sparse_click_loss(p, guidance, return_grad: bool = False):
    """Click-consistency loss over the rendered disks.

    sum(((1-p) * c_f)^2) / |c_f| + sum((p * c_b)^2) / |c_b|; a polarity with
    no clicks contributes zero.
    """
    pa = np.asarray(_as_array(p), dtype=np.float64)
    cf = np.asarray(guidance.positive, dtype=bool)
    cb = np.asarray(guidance.negative, dtype=bool)
    if pa.shape != cf.shape or pa.shape != cb.shape:
        raise ValueError(f"shapes differ: {pa.shape} vs {cf.shape}/{cb.shape}")
    nf = int(cf.sum())
    nb = int(cb.sum())
    loss = 0.0
    grad = np.zeros_like(pa) if return_grad else None
    if nf:
        miss = np.where(cf, 1.0 - pa, 0.0)
        loss += float(np.sum(miss ** 2)) / nf
        if return_grad:
            grad -= 2.0 * miss / nf
    if nb:
        spill = np.where(cb, pa, 0.0)
        loss += float(np.sum(spill ** 2)) / nb
        if return_grad:
            grad += 2.0 * spill / nb
    if return_grad:
        return loss, grad
    return loss


def _scoped_items(params, scope):
    """Resolve a partition selector into (name, tensor) pairs.

    scope may be None/"all", "BSM"/"ADM", or an iterable of names; params may
    be a ParamSet or a plain name->array mapping.
    """
    if hasattr(params, "tensors"):
        items = params.tensors
        tags = {n: params.tag(n) for n in items}
    else:
        items = dict(params)
        tags = {}
    if scope is None or scope == "all":
        names = list(items)
    elif isinstance(scope, str):
        if not tags:
            raise ValueError("partition scope needs tagged parameters")
        names = [n for n in items if tags[n] == scope]
    else:
        names = list(scope)
    return [(n, items[n]) for n in names]


def _to_numpy(t):
    return t.detach().cpu().numpy() if hasattr(t, "detach") else np.asarray(t)


def anchor_regularizer(params, anchor, scope=None, return_grad: bool = False):
    """Mean squared drift of the scoped parameters from their anchor."""
    cur = _scoped_items(params, scope)
    anchor_map = anchor.tensors if hasattr(anchor, "tensors") else dict(anchor)
    total = 0
    sq = 0.0
    diffs = {}
    for name, tensor in cur:
        if name not in anchor_map:
            raise ValueError(f"anchor is missing tensor {name!r}")
        a = _to_numpy(anchor_map[name]).astype(np.float64)
        t = _to_numpy(tensor).astype(np.float64)
        if a.shape != t.shape:
            raise ValueError(f"anchor shape mismatch for {name!r}: "
                             f"{a.shape} vs {t.shape}")
        d = t - a
        sq += float(np.sum(d * d))
        total += d.size
        if return_grad:
            diffs[name] = d
    if total == 0:
        return (0.0, {}) if return_grad else 0.0
    loss = sq / total
    if not return_grad:
        return loss
    grads = {name: 2.0 * d / total for name, d in diffs.items()}
    return loss, grads


def total_adaptation_loss(l_sparse, l_dense, l_anchor, cfg: LossConfig) -> float:
    """Weighted sum of the three test-time terms."""
    parts = (l_sparse, l_dense, l_anchor)
    if not all(np.isfinite(parts)):
        raise ValueError(f"non-finite loss components: {parts}")
    return (cfg.lambda_sparse * l_sparse
            + cfg.lambda_dense * l_dense
            + cfg.lambda_anchor * l_anchor)


def training_loss(p_adm, gt, coarse, cfg: LossConfig, return_grad: bool = False):
    """Two-term supervision for the refinement head.

    gt_weight * NFL(p, gt) + coarse_weight * NFL(p, coarse > 0.5). The coarse
    map acts as a binarized auxiliary target.
    """
    coarse_target = np.asarray(_as_array(coarse)) > 0.5
    if return_grad:
        l1, g1 = normalized_focal_loss(p_adm, gt, cfg.gamma, cfg.eps, True)
        l2, g2 = normalized_focal_loss(p_adm, coarse_target, cfg.gamma, cfg.eps, True)
        return (cfg.gt_weight * l1 + cfg.coarse_weight * l2,
                cfg.gt_weight * g1 + cfg.coarse_weight * g2)
    l1 = normalized_focal_loss(p_adm, gt, cfg.gamma, cfg.eps)
    l2 = normalized_focal_loss(p_adm, coarse_target, cfg.gamma, cfg.eps)
    return cfg.gt_weight * l1 + cfg.coarse_weight * l2
