"""Negative handling: calibrated similarity matrix, curriculum-scheduled
quantile masking, and the masked debiased contrastive objective.

Row i of the similarity matrix scores query i against all B in-batch
targets (columns 0..B-1, diagonal = its own positive) and its K
dataset-provided hard negatives (columns B..B+K-1). The mask keeps only
the hardest fraction of each row's negatives; the debiased loss then
subtracts a gamma_plus-scaled copy of the positive term from the
negative mass to counter false negatives, flooring at epsilon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation
from .calibration import UNIT_NORM_TOL

# Guard against floor((1-rho)*n) landing one ulp under an exact integer.
_FLOOR_NUDGE = 1e-9


@dataclass(frozen=True)
class SimilarityMatrix:
    """Calibrated logits, shape (B, B+K); entry (i, i) is query i's positive."""

    values: np.ndarray
    batch_size: int
    num_hard_negatives: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        b, k = self.batch_size, self.num_hard_negatives
        if b < 1 or k < 0:
            raise ContractViolation(f"invalid sizes B={b}, K={k}")
        if v.shape != (b, b + k):
            raise ContractViolation(
                f"values must have shape ({b}, {b + k}), got {v.shape}"
            )
        if v.size and not np.all(np.isfinite(v)):
            raise ContractViolation("similarity matrix contains non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def num_columns(self) -> int:
        return self.batch_size + self.num_hard_negatives


def build_similarity_matrix(
    query_embeddings,
    target_embeddings,
    hard_negative_embeddings,
    query_temps,
    target_temps,
    hard_negative_temps,
) -> SimilarityMatrix:
    """Score every query against all in-batch targets and its own hard negatives.

    Shapes: embeddings (B, D), (B, D), (B, K, D); temperatures (B,), (B,),
    (B, K). Every embedding row must be unit-norm; every temperature must
    be positive (instance temperatures are floored upstream). Entry (i, j)
    for j < B is sim(q_i, p_j) / ((tau_i + tau_j) / 2); columns B.. use
    query i's own hard negatives the same way.
    """
    q = np.asarray(query_embeddings, dtype=np.float64)
    p = np.asarray(target_embeddings, dtype=np.float64)
    n = np.asarray(hard_negative_embeddings, dtype=np.float64)
    tq = np.asarray(query_temps, dtype=np.float64)
    tp = np.asarray(target_temps, dtype=np.float64)
    tn = np.asarray(hard_negative_temps, dtype=np.float64)

    if q.ndim != 2 or q.shape[0] < 2:
        raise ContractViolation(f"need a (B>=2, D) query matrix, got shape {q.shape}")
    batch, dim = q.shape
    if p.shape != (batch, dim):
        raise ContractViolation(f"target shape {p.shape} != query shape {q.shape}")
    if n.ndim != 3 or n.shape[0] != batch or n.shape[2] != dim:
        raise ContractViolation(
            f"hard negatives must have shape ({batch}, K, {dim}), got {n.shape}"
        )
    num_hard = n.shape[1]
    if tq.shape != (batch,) or tp.shape != (batch,) or tn.shape != (batch, num_hard):
        raise ContractViolation("temperature shapes do not match embedding shapes")
    for arr, name in ((tq, "query"), (tp, "target"), (tn, "hard-negative")):
        if arr.size and (not np.all(np.isfinite(arr)) or np.any(arr <= 0)):
            raise ContractViolation(f"{name} temperatures must be positive and finite")
    for arr, name in ((q, "query"), (p, "target"), (n.reshape(-1, dim), "hard-negative")):
        if arr.size and not np.all(np.isfinite(arr)):
            raise ContractViolation(f"{name} embeddings contain non-finite entries")
        norms = np.linalg.norm(arr, axis=-1)
        if arr.size and np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ContractViolation(f"{name} embeddings must be unit-norm rows")

    pair_in = (tq[:, None] + tp[None, :]) / 2.0
    sims_in = q @ p.T
    if num_hard:
        pair_hn = (tq[:, None] + tn) / 2.0
        sims_hn = np.einsum("bd,bkd->bk", q, n)
        values = np.concatenate([sims_in / pair_in, sims_hn / pair_hn], axis=1)
    else:
        values = sims_in / pair_in
    return SimilarityMatrix(values, batch, num_hard)


@dataclass(frozen=True)
class CurriculumSchedule:
    """Linear ramp of the masked fraction from rho_init to rho_final.

    The ramp starts at step t0 and ends at total_steps; before t0 the
    ratio is exactly rho_init, after total_steps exactly rho_final.
    """

    total_steps: int
    rho_init: float = 0.1
    rho_final: float = 0.5
    t0: int = 4000

    def __post_init__(self):
        if not (0.0 <= self.rho_init < 1.0 and 0.0 <= self.rho_final < 1.0):
            raise ContractViolation("mask ratios must lie in [0, 1)")
        if not 0 <= self.t0 < self.total_steps:
            raise ContractViolation(
                f"need 0 <= t0 < total_steps, got t0={self.t0}, total={self.total_steps}"
            )


def curriculum_ratio(step: int, schedule: CurriculumSchedule) -> float:
    """Masked fraction at a given optimizer step.

    Endpoints are returned exactly (no float drift from the ramp formula).
    """
    if step < 0:
        raise ContractViolation(f"step must be non-negative, got {step}")
    if step <= schedule.t0:
        return schedule.rho_init
    if step >= schedule.total_steps:
        return schedule.rho_final
    progress = (step - schedule.t0) / (schedule.total_steps - schedule.t0)
    return schedule.rho_init + (schedule.rho_final - schedule.rho_init) * progress


def mask_keep_count(num_columns: int, mask_ratio: float) -> int:
    """How many negatives each row keeps: floor((1-rho) * (columns-1)), min 1."""
    candidates = num_columns - 1  # everything in the row except the positive
    return max(1, math.floor((1.0 - mask_ratio) * candidates + _FLOOR_NUDGE))


def negative_mask(matrix: SimilarityMatrix, mask_ratio: float) -> np.ndarray:
    """Boolean mask of the kept (hardest) negatives per row.

    Keeps the mask_keep_count largest entries of each row excluding the
    diagonal positive; ties go to the lower column index. The diagonal is
    always False.
    """
    if not 0.0 <= mask_ratio < 1.0:
        raise ContractViolation(f"mask ratio must lie in [0, 1), got {mask_ratio}")
    if matrix.num_columns < 2:
        raise ContractViolation("matrix has no negative entries to mask")
    keep = mask_keep_count(matrix.num_columns, mask_ratio)
    vals = matrix.values.copy()
    rows = np.arange(matrix.batch_size)
    vals[rows, rows] = -np.inf  # positives never compete for a slot
    # Stable argsort on the negated values: descending by value, ascending
    # column index within ties.
    order = np.argsort(-vals, axis=1, kind="stable")
    mask = np.zeros(vals.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :keep], True, axis=1)
    return mask


class DclResult(NamedTuple):
    loss: float
    grad: np.ndarray  # d loss / d similarity-matrix entries, same shape
    clamped_rows: int  # rows where the epsilon floor on the negative mass bound


def dcl_loss(
    matrix: SimilarityMatrix,
    mask: np.ndarray,
    gamma_plus: float,
    epsilon: float = 1e-8,
) -> DclResult:
    """Masked debiased contrastive loss and its gradient.

    Per row i with positive s = S[i, i] and kept negatives S[i, j]:

        negative_mass = max(sum_j exp(S[i, j]) - gamma_plus * exp(s), epsilon)
        row_loss      = -log(exp(s) / (exp(s) + negative_mass))

    and the loss is the mean row loss. All exponentials are evaluated
    under a per-row max shift, so large logits stay finite. When the
    epsilon floor binds, the floored branch is treated as constant in the
    negatives (their gradient is exactly zero) while the positive keeps
    its direct pathway. The mask is a constant of the backward pass.
    """
    if not 0.0 <= gamma_plus < 1.0:
        raise ContractViolation(f"gamma_plus must lie in [0, 1), got {gamma_plus}")
    if epsilon <= 0:
        raise ContractViolation(f"epsilon must be positive, got {epsilon}")
    m = np.asarray(mask)
    if m.dtype != np.bool_ or m.shape != matrix.values.shape:
        raise ContractViolation("mask must be a boolean array matching the matrix")
    batch = matrix.batch_size
    rows = np.arange(batch)
    if np.any(m[rows, rows]):
        raise ContractViolation("mask must exclude the diagonal positives")
    if np.any(m.sum(axis=1) < 1):
        raise ContractViolation("every row must keep at least one negative")

    vals = matrix.values
    pos = vals[rows, rows]
    kept = np.where(m, vals, -np.inf)
    shift = np.maximum(pos, kept.max(axis=1))
    # exp(-inf) underflows to exactly 0, so dropped columns vanish here.
    with np.errstate(over="ignore"):
        scaled = np.exp(kept - shift[:, None])
    neg_mass_scaled = scaled.sum(axis=1)  # sum over kept negatives, times e^-shift
    pos_scaled = np.exp(pos - shift)
    raw = neg_mass_scaled - gamma_plus * pos_scaled  # still scaled by e^-shift

    log_eps = math.log(epsilon)
    positive_raw = raw > 0.0
    unshifted_log = np.full(batch, -np.inf)
    unshifted_log[positive_raw] = shift[positive_raw] + np.log(raw[positive_raw])
    clamped = ~positive_raw | (unshifted_log <= log_eps)

    loss_rows = np.empty(batch)
    grad = np.zeros_like(vals)

    free = ~clamped
    if np.any(free):
        # row loss = -s + shift + log(Z), Z = (1-gamma) exp(s-shift) + sum exp(neg-shift)
        z = (1.0 - gamma_plus) * pos_scaled[free] + neg_mass_scaled[free]
        loss_rows[free] = -pos[free] + shift[free] + np.log(z)
        coeff = scaled[free] / z[:, None]
        grad[free] = coeff / batch
        grad[rows[free], rows[free]] = (
            -1.0 + (1.0 - gamma_plus) * pos_scaled[free] / z
        ) / batch

    if np.any(clamped):
        # Negative mass pinned at epsilon: loss = log(exp(s) + eps) - s.
        s = pos[clamped]
        small = np.empty(s.shape)
        big = s >= 0.0
        small[big] = np.log1p(epsilon * np.exp(-s[big]))
        small[~big] = np.log(np.exp(s[~big]) + epsilon) - s[~big]
        loss_rows[clamped] = small
        idx = rows[clamped]
        # d/ds [log(exp(s) + eps) - s] = -eps / (exp(s) + eps); the argument
        # clip only matters once the true value has underflowed to zero.
        denom = np.exp(np.minimum(s, 700.0)) + epsilon
        grad[idx, idx] = (-epsilon / denom) / batch

    return DclResult(float(loss_rows.mean()), grad, int(clamped.sum()))
