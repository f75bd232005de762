"""Training loop for the alignment recipe.

One optimizer step encodes a batch of (query, positive, hard negatives)
tuples, scores everything through the calibrated similarity matrix,
applies the curriculum negative mask, evaluates the debiased
contrastive loss plus the whitened covariance-alignment penalty, and
backpropagates through every stage by hand (no autodiff). Updates use
Adam with a linear learning-rate warmup. Each of the four recipe
components can be toggled off independently for ablations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from .calibration import MODALITIES, TEMPERATURE_FLOOR, indicator_weights
from .errors import ContractViolation, NumericalFailureError
from .geometry import (
    WhiteningTransform,
    apply_whitening,
    centroid_gap,
    coral_loss,
    covariance_gap,
    fit_whitening,
)
from .negatives import CurriculumSchedule, build_similarity_matrix, curriculum_ratio, dcl_loss, negative_mask
from .numerics import make_rng
from .synth import (
    Dataset,
    ModelParams,
    ParamGrads,
    TrainingTuple,
    encode_batch,
    encode_batch_backward,
    init_params,
)

CHECKPOINT_FORMAT = "omni-ckpt/1"

_STREAM_BATCHES = 3
_STREAM_GRADCHECK = 4


@dataclass(frozen=True)
class Toggles:
    """Independent switches for the four recipe components."""

    calibration: bool = True
    curriculum: bool = True
    dcl: bool = True
    whitening_coral: bool = True


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    t0: int = 400  # curriculum ramp start, in optimizer steps
    batch_size: int = 16
    hard_negatives: int = 2
    learning_rate: float = 3e-3
    accumulation: int = 1
    gamma_plus: float = 0.1
    epsilon: float = 1e-8
    rho_init: float = 0.1
    rho_final: float = 0.5
    fixed_rho: float = 0.3  # mask ratio used when the curriculum toggle is off
    lambda_coral: float = 0.05
    jitter: float = 1e-4
    tau_init: float = 0.02
    whiten_groups: int = 1
    warmup_fraction: float = 0.005
    toggles: Toggles = field(default_factory=Toggles)
    seed: int = 42

    def __post_init__(self):
        if self.total_steps < 0:
            raise ContractViolation("total_steps must be non-negative")
        if self.t0 < 0:
            raise ContractViolation("t0 must be non-negative")
        if self.toggles.curriculum and self.total_steps > 0 and self.t0 >= self.total_steps:
            raise ContractViolation(
                f"need t0 < total_steps for the curriculum ramp, got {self.t0} >= {self.total_steps}"
            )
        if self.batch_size < 2:
            raise ContractViolation("batch_size must be at least 2")
        if self.hard_negatives < 0:
            raise ContractViolation("hard_negatives must be non-negative")
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        if self.accumulation < 1:
            raise ContractViolation("accumulation must be at least 1")
        if not 0.0 <= self.gamma_plus < 1.0:
            raise ContractViolation("gamma_plus must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ContractViolation("epsilon must be positive")
        for name in ("rho_init", "rho_final", "fixed_rho"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1)")
        if self.lambda_coral < 0:
            raise ContractViolation("lambda_coral must be non-negative")
        if self.jitter < 0:
            raise ContractViolation("jitter must be non-negative")
        if self.tau_init <= 0:
            raise ContractViolation("tau_init must be positive")
        if self.whiten_groups < 1:
            raise ContractViolation("whiten_groups must be positive")
        if not 0.0 < self.warmup_fraction <= 1.0:
            raise ContractViolation("warmup_fraction must lie in (0, 1]")

    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(
            total_steps=self.total_steps,
            rho_init=self.rho_init,
            rho_final=self.rho_final,
            t0=self.t0,
        )


@dataclass
class FrozenPipeline:
    """Data-dependent pieces held fixed while differentiating the loss.

    The negative mask and the whitening transform are both functions of
    the batch; the analytic gradient treats them as constants, so the
    finite-difference probe must reuse the ones captured at the base
    point.
    """

    mask: np.ndarray
    whitening: WhiteningTransform | None


@dataclass
class BatchStats:
    loss_total: float
    loss_dcl: float
    loss_coral: float
    mask_ratio: float
    temperature_floor_clamps: int
    negative_floor_clamps: int
    centroid_gap: float
    covariance_gap: float
    frozen: FrozenPipeline


def total_loss(
    batch: Sequence[TrainingTuple],
    params: ModelParams,
    step: int,
    config: TrainConfig,
    frozen: FrozenPipeline | None = None,
) -> tuple[BatchStats, ParamGrads]:
    """Loss, telemetry, and full analytic parameter gradient for one batch.

    Toggle semantics: calibration off pins every instance temperature at
    tau_init; curriculum off uses the fixed_rho mask ratio; dcl off sets
    gamma_plus to zero (plain masked InfoNCE); whitening/coral off drops
    the covariance penalty entirely. Passing `frozen` reuses a
    previously captured mask and whitening transform instead of
    recomputing them from this batch.
    """
    batch_size = len(batch)
    if batch_size < 2:
        raise ContractViolation(f"need a batch of at least 2 tuples, got {batch_size}")
    num_hard = config.hard_negatives
    for tup in batch:
        if len(tup.hard_negatives) != num_hard:
            raise ContractViolation(
                f"every tuple must carry {num_hard} hard negatives, got {len(tup.hard_negatives)}"
            )

    items = [t.query for t in batch] + [t.positive for t in batch]
    for t in batch:
        items.extend(t.hard_negatives)
    # Layout: queries [0, B), positives [B, 2B), then B*K hard negatives.
    embeddings, cache = encode_batch(params, items)
    dim = embeddings.shape[1]
    emb_q = embeddings[:batch_size]
    emb_p = embeddings[batch_size : 2 * batch_size]
    emb_n = embeddings[2 * batch_size :].reshape(batch_size, num_hard, dim)

    weights = np.stack([indicator_weights(it.composition) for it in items])
    if config.toggles.calibration:
        raw_temps = weights @ params.tau
        floored = raw_temps < TEMPERATURE_FLOOR
        temps = np.where(floored, TEMPERATURE_FLOOR, raw_temps)
    else:
        temps = np.full(len(items), config.tau_init)
        floored = np.zeros(len(items), dtype=bool)
    temps_q = temps[:batch_size]
    temps_p = temps[batch_size : 2 * batch_size]
    temps_n = temps[2 * batch_size :].reshape(batch_size, num_hard)

    matrix = build_similarity_matrix(emb_q, emb_p, emb_n, temps_q, temps_p, temps_n)

    if config.toggles.curriculum:
        mask_ratio = curriculum_ratio(step, config.schedule())
    else:
        mask_ratio = config.fixed_rho
    if frozen is not None:
        mask = frozen.mask
    else:
        mask = negative_mask(matrix, mask_ratio)

    gamma = config.gamma_plus if config.toggles.dcl else 0.0
    loss_dcl, grad_matrix, clamped_rows = dcl_loss(matrix, mask, gamma, config.epsilon)

    grads = ParamGrads.zeros_like(params)
    grad_emb = np.zeros_like(embeddings)

    # Chain rule through the calibrated logits S = sim / pair_temp.
    pair_temps = np.concatenate(
        [
            (temps_q[:, None] + temps_p[None, :]) / 2.0,
            (temps_q[:, None] + temps_n) / 2.0,
        ],
        axis=1,
    )
    grad_sim = grad_matrix / pair_temps
    grad_emb[:batch_size] = grad_sim[:, :batch_size] @ emb_p
    if num_hard:
        grad_emb[:batch_size] += np.einsum(
            "bk,bkd->bd", grad_sim[:, batch_size:], emb_n
        )
        grad_emb[2 * batch_size :] = (
            grad_sim[:, batch_size:, None] * emb_q[:, None, :]
        ).reshape(batch_size * num_hard, dim)
    grad_emb[batch_size : 2 * batch_size] = grad_sim[:, :batch_size].T @ emb_q

    if config.toggles.calibration:
        # d loss / d pair_temp = grad_matrix * (-S / pair_temp), then each
        # pair temperature splits evenly between its two instances.
        grad_pair = grad_matrix * (-matrix.values / pair_temps)
        grad_temps = np.concatenate(
            [
                0.5 * grad_pair.sum(axis=1),
                0.5 * grad_pair[:, :batch_size].sum(axis=0),
                0.5 * grad_pair[:, batch_size:].ravel(),
            ]
        )
        grad_temps[floored] = 0.0  # the hard floor is flat
        grads.tau += weights.T @ grad_temps

    loss_coral = 0.0
    whitening = None
    if config.toggles.whitening_coral:
        if frozen is not None:
            whitening = frozen.whitening
            if whitening is None:
                raise ContractViolation(
                    "frozen pipeline lacks the whitening transform this config needs"
                )
        else:
            whitening = fit_whitening(
                emb_q, emb_p, config.jitter, groups=config.whiten_groups
            )
        white_q = apply_whitening(whitening, emb_q)
        white_p = apply_whitening(whitening, emb_p)
        coral = coral_loss(white_q, white_p)
        loss_coral = coral.loss
        # The whitening transform is a constant of the backward pass.
        grad_emb[:batch_size] += config.lambda_coral * (
            coral.grad_queries @ whitening.matrix
        )
        grad_emb[batch_size : 2 * batch_size] += config.lambda_coral * (
            coral.grad_targets @ whitening.matrix
        )

    encode_batch_backward(params, cache, grad_emb, grads)

    loss_total = loss_dcl + config.lambda_coral * loss_coral
    stats = BatchStats(
        loss_total=loss_total,
        loss_dcl=loss_dcl,
        loss_coral=loss_coral,
        mask_ratio=mask_ratio,
        temperature_floor_clamps=int(floored.sum()),
        negative_floor_clamps=clamped_rows,
        centroid_gap=centroid_gap(emb_q, emb_p),
        covariance_gap=covariance_gap(emb_q, emb_p),
        frozen=FrozenPipeline(mask=mask, whitening=whitening),
    )
    return stats, grads


# --- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: ParamGrads
    second_moment: ParamGrads
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(ParamGrads.zeros_like(params), ParamGrads.zeros_like(params))


def adam_step(
    params: ModelParams,
    grads: ParamGrads,
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place, tensor by tensor."""
    if learning_rate <= 0:
        raise ContractViolation("learning_rate must be positive")
    state.step += 1
    t = state.step
    corr1 = 1.0 - beta1**t
    corr2 = 1.0 - beta2**t

    def update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray) -> None:
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad**2
        param -= learning_rate * (m / corr1) / (np.sqrt(v / corr2) + eps)

    for mod in MODALITIES:
        update(params.proj[mod], grads.proj[mod], state.first_moment.proj[mod], state.second_moment.proj[mod])
        update(params.bias[mod], grads.bias[mod], state.first_moment.bias[mod], state.second_moment.bias[mod])
    update(params.tau, grads.tau, state.first_moment.tau, state.second_moment.tau)


def warmup_learning_rate(base: float, opt_step: int, total_steps: int, warmup_fraction: float) -> float:
    """Linear ramp from 0 to base over ceil(warmup_fraction * total_steps) steps."""
    warmup = math.ceil(warmup_fraction * total_steps)
    if warmup <= 0:
        return base
    return base * min(1.0, opt_step / warmup)


# --- training loop ---------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    mask_ratio: float
    loss_total: float
    loss_dcl: float
    loss_coral: float
    grad_norm: float
    centroid_gap: float
    covariance_gap: float
    temperature_floor_clamps: int
    negative_floor_clamps: int
    learning_rate: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ModelParams
    records: list[StepRecord]


def _grad_global_norm(grads: ParamGrads) -> float:
    total = float(grads.tau @ grads.tau)
    for mod in MODALITIES:
        total += float((grads.proj[mod] ** 2).sum())
        total += float((grads.bias[mod] ** 2).sum())
    return math.sqrt(total)


def _scale_grads(grads: ParamGrads, factor: float) -> None:
    grads.tau *= factor
    for mod in MODALITIES:
        grads.proj[mod] *= factor
        grads.bias[mod] *= factor


def _accumulate(into: ParamGrads, new: ParamGrads) -> None:
    into.tau += new.tau
    for mod in MODALITIES:
        into.proj[mod] += new.proj[mod]
        into.bias[mod] += new.bias[mod]


def train(
    dataset: Dataset,
    config: TrainConfig,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    """Run the full optimization and return final parameters plus telemetry.

    Deterministic for a fixed (dataset, config): batch order comes from a
    dedicated seeded stream, and every numerical stage is fixed-order
    float64. Gradient accumulation averages the micro-batch gradients
    before the optimizer update; each micro-batch still contrasts only
    against its own rows.
    """
    if config.hard_negatives != dataset.config.hard_negatives:
        raise ContractViolation(
            f"config expects {config.hard_negatives} hard negatives per tuple "
            f"but the dataset provides {dataset.config.hard_negatives}"
        )
    micro = config.batch_size
    need = micro * config.accumulation
    if len(dataset.train) < need:
        raise ContractViolation(
            f"dataset has {len(dataset.train)} training tuples; one optimizer "
            f"step needs {need}"
        )

    params = init_params(dataset.config, config.seed, config.tau_init)
    state = AdamState.zeros_like(params)
    order_rng = make_rng(config.seed, _STREAM_BATCHES)
    records: list[StepRecord] = []

    order = order_rng.permutation(len(dataset.train))
    cursor = 0
    for opt_step in range(1, config.total_steps + 1):
        grads_sum = ParamGrads.zeros_like(params)
        micro_stats: list[BatchStats] = []
        for _ in range(config.accumulation):
            if cursor + micro > len(order):
                order = order_rng.permutation(len(dataset.train))
                cursor = 0
            batch = [dataset.train[i] for i in order[cursor : cursor + micro]]
            cursor += micro
            stats, grads = total_loss(batch, params, opt_step - 1, config)
            if not math.isfinite(stats.loss_total):
                raise NumericalFailureError(
                    f"non-finite loss at optimizer step {opt_step}"
                )
            micro_stats.append(stats)
            _accumulate(grads_sum, grads)
        _scale_grads(grads_sum, 1.0 / config.accumulation)

        lr = warmup_learning_rate(
            config.learning_rate, opt_step, config.total_steps, config.warmup_fraction
        )
        adam_step(params, grads_sum, state, lr)

        mean_dcl = sum(s.loss_dcl for s in micro_stats) / len(micro_stats)
        mean_coral = sum(s.loss_coral for s in micro_stats) / len(micro_stats)
        record = StepRecord(
            step=opt_step,
            mask_ratio=micro_stats[0].mask_ratio,
            loss_total=mean_dcl + config.lambda_coral * mean_coral,
            loss_dcl=mean_dcl,
            loss_coral=mean_coral,
            grad_norm=_grad_global_norm(grads_sum),
            centroid_gap=sum(s.centroid_gap for s in micro_stats) / len(micro_stats),
            covariance_gap=sum(s.covariance_gap for s in micro_stats) / len(micro_stats),
            temperature_floor_clamps=sum(s.temperature_floor_clamps for s in micro_stats),
            negative_floor_clamps=sum(s.negative_floor_clamps for s in micro_stats),
            learning_rate=lr,
        )
        records.append(record)
        if on_step is not None:
            on_step(record)
    return TrainResult(params, records)


# --- gradient verification -------------------------------------------------------


def params_to_vector(params: ModelParams) -> np.ndarray:
    """Flatten in the fixed order: proj (T, I, A, V), bias (T, I, A, V), tau."""
    parts = [params.proj[m].ravel() for m in MODALITIES]
    parts += [params.bias[m] for m in MODALITIES]
    parts.append(params.tau)
    return np.concatenate(parts)


def grads_to_vector(grads: ParamGrads) -> np.ndarray:
    parts = [grads.proj[m].ravel() for m in MODALITIES]
    parts += [grads.bias[m] for m in MODALITIES]
    parts.append(grads.tau)
    return np.concatenate(parts)


def vector_to_params(vector: np.ndarray, template: ModelParams) -> ModelParams:
    out = template.copy()
    offset = 0
    for m in MODALITIES:
        size = out.proj[m].size
        out.proj[m] = vector[offset : offset + size].reshape(out.proj[m].shape).copy()
        offset += size
    for m in MODALITIES:
        size = out.bias[m].size
        out.bias[m] = vector[offset : offset + size].copy()
        offset += size
    out.tau = vector[offset:].copy()
    return out


def central_difference_error(
    fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic_grad: np.ndarray,
    step_size: float,
    indices: Sequence[int],
) -> float:
    """Worst relative error between central differences and an analytic gradient.

    Relative error per coordinate is |fd - analytic| divided by
    max(|fd|, |analytic|, 1e-6); the result is +inf if any probed value
    comes back non-finite.
    """
    if step_size <= 0:
        raise ContractViolation("step_size must be positive")
    if not np.all(np.isfinite(analytic_grad)):
        return math.inf
    worst = 0.0
    for i in indices:
        plus = point.copy()
        plus[i] += step_size
        minus = point.copy()
        minus[i] -= step_size
        f_plus = fn(plus)
        f_minus = fn(minus)
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            return math.inf
        fd = (f_plus - f_minus) / (2.0 * step_size)
        rel = abs(fd - analytic_grad[i]) / max(abs(fd), abs(analytic_grad[i]), 1e-6)
        worst = max(worst, float(rel))
    return worst


def finite_diff_check(
    batch: Sequence[TrainingTuple],
    params: ModelParams,
    step: int,
    config: TrainConfig,
    step_size: float = 1e-4,
    coordinate_fraction: float = 0.05,
    seed: int = 0,
) -> float:
    """Verify the full-pipeline analytic gradient against central differences.

    Probes a random coordinate subsample (default 5%) of the projection
    and bias parameters plus every temperature entry. The negative mask
    and the whitening transform are captured once at the base point and
    held fixed for every probe, matching how the analytic gradient
    treats them.
    """
    if not 0.0 < coordinate_fraction <= 1.0:
        raise ContractViolation("coordinate_fraction must lie in (0, 1]")
    stats, grads = total_loss(batch, params, step, config)
    frozen = stats.frozen
    analytic = grads_to_vector(grads)
    base = params_to_vector(params)
    num_tau = params.tau.size
    num_other = base.size - num_tau
    rng = make_rng(seed, _STREAM_GRADCHECK)
    sample_size = max(1, round(coordinate_fraction * num_other))
    sampled = rng.choice(num_other, size=sample_size, replace=False)
    indices = sorted(set(int(i) for i in sampled) | set(range(num_other, base.size)))

    def objective(vec: np.ndarray) -> float:
        probe = vector_to_params(vec, params)
        probe_stats, _ = total_loss(batch, probe, step, config, frozen=frozen)
        return probe_stats.loss_total

    return central_difference_error(objective, base, analytic, step_size, indices)


# --- checkpoint serialization ------------------------------------------------------


def save_checkpoint(params: ModelParams, path, config_echo: dict, seed: int, config_hash: str = "") -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "seed": seed,
        "config_hash": config_hash,
        "config": config_echo,
        "params": {
            "proj": {m: params.proj[m].tolist() for m in MODALITIES},
            "bias": {m: params.bias[m].tolist() for m in MODALITIES},
            "tau": params.tau.tolist(),
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractViolation(f"unsupported checkpoint format {doc.get('format')!r}")
    raw = doc["params"]
    params = ModelParams(
        {m: np.asarray(raw["proj"][m], dtype=np.float64) for m in MODALITIES},
        {m: np.asarray(raw["bias"][m], dtype=np.float64) for m in MODALITIES},
        np.asarray(raw["tau"], dtype=np.float64),
    )
    return params, doc
