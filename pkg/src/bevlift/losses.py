"""Detection and foreground losses and their fixed-weight total.

total = focal + 2 * smooth_l1 + 0.2 * dir + sum_l alpha_l * foreground_l
The 2 and 0.2 weights are constants, deliberately not configurable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

SMOOTH_L1_WEIGHT = 2.0
DIR_WEIGHT = 0.2


@dataclass
class LossReport:
    focal: float
    smooth_l1: float
    dir: float
    foreground: list
    total: float

    def row(self):
        return [self.focal, self.smooth_l1, self.dir, *self.foreground, self.total]


def focal_loss(logits, targets, alpha=0.25, gamma=2.0, normalizer=None):
    """Sigmoid focal loss, summed then divided by max(1, #positives).

    targets is a constant 0/1 ndarray of the same shape as logits.
    """
    y = np.asarray(targets, dtype=np.float32)
    if y.size == 0:
        raise ValueError("empty target map")
    if y.shape != logits.data.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {logits.data.shape}")
    p = T.sigmoid(logits)
    # -log p = softplus(-z);  -log(1-p) = softplus(z)
    pos_ce = T.softplus(-logits)
    neg_ce = T.softplus(logits)
    one_minus_p = p.scale(-1.0).add_const(1.0)
    pos_term = one_minus_p.pow_const(gamma) * pos_ce
    neg_term = p.pow_const(gamma) * neg_ce
    loss = T.masked_sum(pos_term, alpha * y) + T.masked_sum(neg_term, (1.0 - alpha) * (1.0 - y))
    if normalizer is None:
        normalizer = max(1.0, float(y.sum()))
    return loss.scale(1.0 / normalizer)


def smooth_l1_loss(pred, target, pos_mask, beta=1.0):
    """Huber over positive cells only, summed over channels, / #positives.

    pred: Tensor (5,H,W); target: ndarray (5,H,W); pos_mask: ndarray (H,W) 0/1.
    """
    m = np.asarray(pos_mask, dtype=np.float32)
    npos = float(m.sum())
    if npos == 0:
        raise ValueError("no positive cells for regression loss")
    diff = pred - T.Tensor(np.asarray(target, dtype=np.float32))
    return T.masked_sum(T.smooth_l1(diff, beta=beta), m[None]).scale(1.0 / npos)


def direction_loss(dir_logits, target_bins, pos_mask):
    """2-class softmax cross-entropy over positive cells.

    dir_logits: Tensor (2,H,W); target_bins: ndarray (H,W) in {0,1};
    pos_mask: ndarray (H,W) 0/1. CE for 2 classes reduces to
    softplus(-(z_t - z_other)).
    """
    m = np.asarray(pos_mask, dtype=np.float32)
    npos = float(m.sum())
    if npos == 0:
        raise ValueError("no positive cells for direction loss")
    bins = np.asarray(target_bins, dtype=np.float32)
    sign = (2.0 * bins - 1.0)[None]  # +1 where target bin is 1, -1 where 0
    delta = T.slice_channels(dir_logits, 1, 2) - T.slice_channels(dir_logits, 0, 1)
    ce = T.softplus(delta.scale(-sign))
    return T.masked_sum(ce, m[None]).scale(1.0 / npos)


def foreground_loss(occ_logits, mask):
    """Per-scale foreground supervision: focal loss of each agent's occupancy
    logits against the scale mask, summed over agents.

    occ_logits: list of Tensors (1,h_l,w_l); mask: ndarray (1,h_l,w_l).
    """
    m = np.asarray(mask, dtype=np.float32)
    total = None
    for occ in occ_logits:
        if occ.data.shape != m.shape:
            raise ValueError(f"scale mismatch: logits {occ.data.shape} vs mask {m.shape}")
        term = focal_loss(occ, m)
        total = term if total is None else total + term
    return total


def total_loss(focal, sl1, dirn, foreground, alphas):
    """Weighted sum as a Tensor plus a float LossReport."""
    total = focal + sl1.scale(SMOOTH_L1_WEIGHT) + dirn.scale(DIR_WEIGHT)
    for a, fg in zip(alphas, foreground):
        total = total + fg.scale(float(a))
    fg_items = [f.item() for f in foreground]
    # The report total is recomputed from the logged components in float64 so
    # the published decomposition is exact; the f32 graph total drives backward.
    report = LossReport(
        focal=focal.item(),
        smooth_l1=sl1.item(),
        dir=dirn.item(),
        foreground=fg_items,
        total=focal.item() + SMOOTH_L1_WEIGHT * sl1.item() + DIR_WEIGHT * dirn.item()
              + sum(float(a) * f for a, f in zip(alphas, fg_items)),
    )
    if not np.isfinite(report.total):
        raise T.NumericError("non-finite training loss")
    return total, report
