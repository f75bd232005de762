"""Modality-aware temperature calibration.

Each item carries a composition: the subset of the four modalities
(text T, image I, audio A, video V) present in it. The indicator weight
vector spreads unit mass uniformly over the active modalities, the
instance temperature is the weighted average of per-modality learned
temperatures (hard-floored at TEMPERATURE_FLOOR), and a query/target
pair is scored by cosine similarity divided by the mean of the two
instance temperatures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation

MODALITIES = ("T", "I", "A", "V")
NUM_MODALITIES = len(MODALITIES)
TEMPERATURE_FLOOR = 1e-6
UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class ModalityComposition:
    """Subset of active modalities, stored as flags in MODALITIES order."""

    flags: tuple[bool, bool, bool, bool]

    def __post_init__(self):
        if len(self.flags) != NUM_MODALITIES or not all(
            isinstance(f, bool) for f in self.flags
        ):
            raise ContractViolation(
                f"flags must be {NUM_MODALITIES} booleans, got {self.flags!r}"
            )
        if not any(self.flags):
            raise ContractViolation("composition must include at least one modality")

    @classmethod
    def from_string(cls, names: str) -> "ModalityComposition":
        """Parse e.g. 'TA' (order-insensitive, duplicates rejected)."""
        unknown = set(names) - set(MODALITIES)
        if unknown:
            raise ContractViolation(f"unknown modality names: {sorted(unknown)}")
        if len(set(names)) != len(names):
            raise ContractViolation(f"duplicate modality in {names!r}")
        return cls(tuple(m in names for m in MODALITIES))

    @property
    def active(self) -> tuple[str, ...]:
        return tuple(m for m, on in zip(MODALITIES, self.flags) if on)

    @property
    def size(self) -> int:
        return sum(self.flags)

    def to_string(self) -> str:
        """Canonical form: active names in MODALITIES order."""
        return "".join(self.active)


def indicator_weights(composition: ModalityComposition) -> np.ndarray:
    """Uniform weight 1/|m| on each active modality, zero elsewhere.

    The result is a length-4 vector in MODALITIES order summing to one.
    """
    flags = np.asarray(composition.flags, dtype=np.float64)
    total = flags.sum()
    if total == 0.0:
        raise ContractViolation("composition must include at least one modality")
    return flags / total


def check_temperature_vector(tau) -> np.ndarray:
    t = np.asarray(tau, dtype=np.float64)
    if t.shape != (NUM_MODALITIES,):
        raise ContractViolation(
            f"temperature vector must have shape ({NUM_MODALITIES},), got {t.shape}"
        )
    if not np.all(np.isfinite(t)):
        raise ContractViolation("temperature vector contains non-finite entries")
    return t


class InstanceTemperature(NamedTuple):
    value: float
    floored: bool  # True when the hard floor was the binding constraint


def instance_temperature(weights, tau) -> InstanceTemperature:
    """Weighted average of per-modality temperatures with a hard floor.

    Temperatures are stored unconstrained, so the combination can dip to
    or below zero during optimization; the floor keeps downstream
    divisions safe. When the floor binds, the gradient convention is
    zero (the clamp is flat).
    """
    w = np.asarray(weights, dtype=np.float64)
    t = check_temperature_vector(tau)
    if w.shape != (NUM_MODALITIES,):
        raise ContractViolation(
            f"weights must have shape ({NUM_MODALITIES},), got {w.shape}"
        )
    if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-9):
        raise ContractViolation("weights must be non-negative and sum to 1")
    raw = float(w @ t)
    if raw < TEMPERATURE_FLOOR:
        return InstanceTemperature(TEMPERATURE_FLOOR, True)
    return InstanceTemperature(raw, False)


def pair_temperature(tau_query: float, tau_target: float) -> float:
    """Arithmetic mean of two (already floored, hence positive) temperatures."""
    if tau_query <= 0 or tau_target <= 0:
        raise ContractViolation(
            f"pair temperature needs positive inputs, got {tau_query}, {tau_target}"
        )
    return (tau_query + tau_target) / 2.0


def _check_unit(vec, name: str) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if v.ndim != 1:
        raise ContractViolation(f"{name} must be a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ContractViolation(f"{name} contains non-finite entries")
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ContractViolation(f"{name} must be unit-norm, got norm {norm!r}")
    return v


def calibrated_logit(embedding_query, embedding_target, tau_pair: float) -> float:
    """Cosine similarity of two unit vectors divided by the pair temperature."""
    q = _check_unit(embedding_query, "query embedding")
    p = _check_unit(embedding_target, "target embedding")
    if q.shape != p.shape:
        raise ContractViolation(f"embedding shape mismatch: {q.shape} vs {p.shape}")
    if tau_pair <= 0:
        raise ContractViolation(f"pair temperature must be positive, got {tau_pair}")
    return float(q @ p) / tau_pair


class LogitGrads(NamedTuple):
    value: float
    wrt_query: np.ndarray
    wrt_target: np.ndarray
    wrt_temperature: float  # d logit / d tau_pair = -sim / tau_pair^2


def calibrated_logit_grads(embedding_query, embedding_target, tau_pair: float) -> LogitGrads:
    """Calibrated logit plus its partials w.r.t. both embeddings and the temperature."""
    q = _check_unit(embedding_query, "query embedding")
    p = _check_unit(embedding_target, "target embedding")
    if q.shape != p.shape:
        raise ContractViolation(f"embedding shape mismatch: {q.shape} vs {p.shape}")
    if tau_pair <= 0:
        raise ContractViolation(f"pair temperature must be positive, got {tau_pair}")
    sim = float(q @ p)
    return LogitGrads(
        value=sim / tau_pair,
        wrt_query=p / tau_pair,
        wrt_target=q / tau_pair,
        wrt_temperature=-sim / tau_pair**2,
    )
