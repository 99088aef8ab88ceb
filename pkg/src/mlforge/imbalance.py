"""Imbalance-aware loss machinery.

Three pieces work together against the two kinds of label imbalance in a
large multi-label corpus (rare vs frequent categories, and few positives vs
many negatives per image):

* a weighted cross entropy whose positive terms carry an extra cost factor
  eta,
* an adaptive per-category weight that decays while a category's mini-batch
  status (has-positives vs all-negative) stays unchanged and resets when it
  flips, and
* per-category negative down-sampling that keeps at most a fixed multiple of
  negatives per positive and skips all-negative columns most of the time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

_MOD = "imbalance"

WEIGHT_FLOOR = 0.01
_POS_OFFSET = 0.01
_NEG_OFFSET = 8.0


def r_positive(t):
    """Adaptive weight on positive labels after t same-status batches.

    max(0.01, log10(10 / (0.01 + t))), in [0.01, 1) for t >= 1.
    """
    t = np.asarray(t, dtype=float)
    return np.maximum(WEIGHT_FLOOR, np.log10(10.0 / (_POS_OFFSET + t)))


def r_negative(t):
    """Adaptive weight on negative labels after t same-status batches.

    max(0.01, log10(10 / (8 + t))), in [0.01, 0.1) for t >= 1.
    """
    t = np.asarray(t, dtype=float)
    return np.maximum(WEIGHT_FLOOR, np.log10(10.0 / (_NEG_OFFSET + t)))


@dataclass
class AdaptiveWeightState:
    """Per-category status machine driving the adaptive weights.

    For each category, t counts consecutive mini-batches with the same
    status (1 = at least one positive image, 0 = none). A status flip resets
    t to 1. The very first batch also gets t = 1 (prev status "none").
    Single-writer per training run.
    """

    m: int
    prev_status: np.ndarray = field(default=None)  # -1 none, else 0/1
    t: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.prev_status is None:
            self.prev_status = np.full(self.m, -1, dtype=np.int64)
        if self.t is None:
            self.t = np.zeros(self.m, dtype=np.int64)

    def update(self, j: int, has_positive: int) -> tuple[float, float]:
        """Advance category j for one mini-batch; return (r_pos, r_neg)."""
        if not 0 <= j < self.m:
            raise DataError(_MOD, "shape-mismatch", f"category {j} outside 0..{self.m - 1}")
        status = 1 if has_positive else 0
        if self.prev_status[j] == status:
            self.t[j] += 1
        else:
            self.t[j] = 1
        self.prev_status[j] = status
        return float(r_positive(self.t[j])), float(r_negative(self.t[j]))

    def update_batch(self, has_positive: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Advance all m categories at once; returns (r_pos, r_neg) vectors."""
        status = np.where(np.asarray(has_positive, dtype=bool), 1, 0)
        if status.shape != (self.m,):
            raise DataError(
                _MOD, "shape-mismatch", f"status shape {status.shape} != ({self.m},)"
            )
        same = self.prev_status == status
        self.t = np.where(same, self.t + 1, 1)
        self.prev_status = status.astype(np.int64)
        return r_positive(self.t), r_negative(self.t)


@dataclass(frozen=True)
class LossConfig:
    eta: float = 12.0  # extra cost on positive labels
    m: int | None = None
    neg_ratio: int = 5
    skip_prob: float = 0.1
    clamp_eps: float = 1e-7

    def __post_init__(self):
        if self.eta < 1.0:
            raise DataError(_MOD, "shape-mismatch", f"eta must be >= 1, got {self.eta}")
        if self.neg_ratio < 1:
            raise DataError(_MOD, "shape-mismatch", f"neg_ratio must be >= 1, got {self.neg_ratio}")
        if not 0.0 <= self.skip_prob <= 1.0:
            raise DataError(_MOD, "shape-mismatch", f"skip_prob {self.skip_prob} outside [0,1]")


@dataclass
class BatchLabels:
    """Binary labels Y and probabilities P for one mini-batch.

    P is clamped into the open interval so logs stay finite.
    """

    Y: np.ndarray
    P: np.ndarray
    clamp_eps: float = 1e-7

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        if self.Y.shape != self.P.shape or self.Y.ndim != 2:
            raise DataError(
                _MOD, "shape-mismatch", f"Y {self.Y.shape} and P {self.P.shape} must be equal n x m"
            )
        self.P = np.clip(self.P, self.clamp_eps, 1.0 - self.clamp_eps)


def assemble_weights(Y: np.ndarray, r_pos: np.ndarray, r_neg: np.ndarray) -> np.ndarray:
    """Per-entry weight matrix: r_pos[j] where y=1, r_neg[j] where y=0."""
    Y = np.asarray(Y, dtype=bool)
    return np.where(Y, np.asarray(r_pos)[None, :], np.asarray(r_neg)[None, :])


def bce_terms_raw(
    Y: np.ndarray, P: np.ndarray, weights: np.ndarray, eta: float, mask: np.ndarray
) -> tuple[float, np.ndarray, int]:
    """Unnormalized weighted cross entropy pieces.

    Returns (sum of per-entry losses over active entries, per-entry gradient
    wrt the pre-sigmoid logits without normalization, active entry count).
    Shared by the public loss and the sharded data-parallel path so both
    compute identical per-entry terms.
    """
    terms = weights * (-eta * Y * np.log(P) - (1.0 - Y) * np.log(1.0 - P)) * mask
    grad = weights * (eta * Y * (P - 1.0) + (1.0 - Y) * P) * mask
    return float(terms.sum()), grad, int(np.count_nonzero(mask))


def weighted_bce(
    batch: BatchLabels,
    weights: np.ndarray,
    config: LossConfig,
    active_mask: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Weighted cross entropy over the active entries of a mini-batch.

    loss = mean over active (i,j) of w_ij * [-eta y log p - (1-y) log(1-p)]
    (natural log). Also returns the gradient with respect to the pre-sigmoid
    logits, under the same mean normalization. Dividing by the ACTIVE entry
    count rather than n*m keeps gradient magnitude stable under
    down-sampling while reducing to the plain 1/m-per-image form on a full
    mask.
    """
    n, m = batch.Y.shape
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n, m):
        raise DataError(_MOD, "shape-mismatch", f"weights shape {weights.shape} != {(n, m)}")
    if active_mask is None:
        active_mask = np.ones((n, m))
    active_mask = np.asarray(active_mask, dtype=float)
    if active_mask.shape != (n, m):
        raise DataError(_MOD, "shape-mismatch", f"mask shape {active_mask.shape} != {(n, m)}")
    loss_sum, grad_raw, n_active = bce_terms_raw(
        batch.Y, batch.P, weights, config.eta, active_mask
    )
    if n_active == 0:
        return 0.0, np.zeros((n, m))
    return loss_sum / n_active, grad_raw / n_active


def downsample_batch(
    Y: np.ndarray,
    ratio: int = 5,
    skip_prob: float = 0.1,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-category negative down-sampling mask.

    For each category column with at least one positive: keep every positive
    plus min(ratio * #pos, #neg) negatives sampled uniformly without
    replacement. Columns with no positive are activated whole with
    probability ``skip_prob`` and otherwise contribute nothing. Deterministic
    given the generator (columns are visited in index order).
    """
    if rng is None:
        rng = np.random.default_rng()
    Y = np.asarray(Y)
    if Y.ndim != 2:
        raise DataError(_MOD, "shape-mismatch", f"Y must be n x m, got {Y.shape}")
    n, m = Y.shape
    mask = np.zeros((n, m), dtype=float)
    for j in range(m):
        col = Y[:, j] > 0
        pos_idx = np.flatnonzero(col)
        if pos_idx.size == 0:
            if rng.random() < skip_prob:
                mask[:, j] = 1.0
            continue
        neg_idx = np.flatnonzero(~col)
        mask[pos_idx, j] = 1.0
        keep = min(ratio * pos_idx.size, neg_idx.size)
        if keep:
            chosen = rng.choice(neg_idx, size=keep, replace=False)
            mask[chosen, j] = 1.0
    return mask
