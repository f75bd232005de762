"""Embedding-space geometry: batch whitening, covariance alignment, and
distribution diagnostics.

Whitening is the zero-phase (symmetric inverse square root) variant
fitted on the concatenation of the query and target batches, so both
sets go through one shared affine map. The covariance-alignment loss
penalizes the squared Frobenius gap between the two whitened batch
covariances. Diagnostics cover centroid/covariance gaps, a shared-basis
two-component PCA overlay with 2-sigma ellipses, and a seeded
random-projection heatmap of the covariance difference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractViolation, DegenerateBatchError, NumericalFailureError
from .numerics import as_matrix, covariance, frobenius_distance, gaussian_matrix, sym_eig

DEFAULT_JITTER = 1e-4


@dataclass(frozen=True)
class WhiteningTransform:
    """Affine map x -> (x - mean) @ matrix.T shared by queries and targets."""

    mean: np.ndarray  # (D,)
    matrix: np.ndarray  # (D, D), symmetric for the zero-phase map

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_whitening(queries, targets, jitter: float = DEFAULT_JITTER, groups: int = 1) -> WhiteningTransform:
    """Fit the shared whitening map on the stacked query/target batch.

    Eigenvalues of the pooled covariance are clipped at zero and shifted
    by the jitter before the inverse square root, so slightly negative
    round-off eigenvalues cannot poison the map. A jitter of zero demands
    a strictly positive spectrum; otherwise the fit is a numerical
    failure. With groups > 1 the features are split into that many
    contiguous equal-width blocks and each block is whitened
    independently (the map is block-diagonal).
    """
    q = as_matrix(queries, "queries")
    p = as_matrix(targets, "targets")
    if q.shape[1] != p.shape[1]:
        raise ContractViolation(f"width mismatch: {q.shape[1]} vs {p.shape[1]}")
    if jitter < 0:
        raise ContractViolation(f"jitter must be non-negative, got {jitter}")
    dim = q.shape[1]
    if groups < 1 or dim % groups != 0:
        raise ContractViolation(
            f"groups must divide the feature width, got {groups} for width {dim}"
        )
    stacked = np.vstack([q, p])
    if stacked.shape[0] < 2:
        raise DegenerateBatchError("whitening needs at least 2 pooled rows")
    mean = stacked.mean(axis=0)
    matrix = np.zeros((dim, dim))
    width = dim // groups
    for g in range(groups):
        sl = slice(g * width, (g + 1) * width)
        block_cov = covariance(stacked[:, sl])
        eigvals, eigvecs = sym_eig(block_cov)
        scale = np.maximum(eigvals, 0.0) + jitter
        if np.any(scale <= 0.0):
            raise NumericalFailureError(
                "pooled covariance is singular and the jitter is zero"
            )
        matrix[sl, sl] = (eigvecs / np.sqrt(scale)) @ eigvecs.T
    return WhiteningTransform(mean, matrix)


def apply_whitening(transform: WhiteningTransform, batch) -> np.ndarray:
    """Apply a fitted whitening map to a row-wise batch."""
    x = as_matrix(batch, "batch")
    if x.shape[1] != transform.dim:
        raise ContractViolation(
            f"batch width {x.shape[1]} != transform width {transform.dim}"
        )
    return (x - transform.mean) @ transform.matrix.T


class CoralResult(NamedTuple):
    loss: float
    grad_queries: np.ndarray
    grad_targets: np.ndarray


def coral_loss(whitened_queries, whitened_targets) -> CoralResult:
    """Squared Frobenius gap of the two batch covariances, scaled by 1/(4 D^2).

    Gradients flow through both covariance estimates; the whitening map
    that produced the inputs is treated as a constant by the caller.
    """
    q = as_matrix(whitened_queries, "whitened queries")
    p = as_matrix(whitened_targets, "whitened targets")
    if q.shape[1] != p.shape[1]:
        raise ContractViolation(f"width mismatch: {q.shape[1]} vs {p.shape[1]}")
    dim = q.shape[1]
    cov_gap = covariance(q) - covariance(p)  # raises DegenerateBatchError on 1-row sets
    loss = float((cov_gap**2).sum()) / (4.0 * dim**2)
    # d loss / d cov_q = cov_gap / (2 D^2); chaining through the unbiased
    # covariance gives centered_rows @ (sym part) / (n - 1).
    grad_q = (q - q.mean(axis=0)) @ cov_gap / (dim**2 * (q.shape[0] - 1))
    grad_p = -(p - p.mean(axis=0)) @ cov_gap / (dim**2 * (p.shape[0] - 1))
    return CoralResult(loss, grad_q, grad_p)


def centroid_gap(queries, targets) -> float:
    """Euclidean distance between the two batch means."""
    q = as_matrix(queries, "queries")
    p = as_matrix(targets, "targets")
    if q.shape[1] != p.shape[1]:
        raise ContractViolation(f"width mismatch: {q.shape[1]} vs {p.shape[1]}")
    if q.shape[0] < 1 or p.shape[0] < 1:
        raise ContractViolation("centroid gap needs non-empty batches")
    return float(np.linalg.norm(q.mean(axis=0) - p.mean(axis=0)))


def covariance_gap(queries, targets) -> float:
    """Frobenius distance between the two batch covariances."""
    return frobenius_distance(covariance(queries), covariance(targets))


@dataclass(frozen=True)
class CovarianceEllipse:
    """2-sigma contour of a projected set: center plus 2x2 covariance."""

    center: np.ndarray
    cov: np.ndarray

    def axes(self) -> tuple[float, float, float]:
        """(major radius, minor radius, angle in degrees) of the 2-sigma contour."""
        eigvals, eigvecs = sym_eig(self.cov)
        major = 2.0 * math.sqrt(max(float(eigvals[1]), 0.0))
        minor = 2.0 * math.sqrt(max(float(eigvals[0]), 0.0))
        angle = math.degrees(math.atan2(float(eigvecs[1, 1]), float(eigvecs[0, 1])))
        return major, minor, angle


@dataclass(frozen=True)
class PcaOverlap:
    """All sets projected onto one shared 2-component PCA basis."""

    basis: np.ndarray  # (D, 2), orthonormal, descending explained variance
    origin: np.ndarray  # (D,) mean of the union used for centering
    labels: tuple[str, ...]
    points: tuple[np.ndarray, ...]  # per set, (n_i, 2)
    ellipses: tuple[CovarianceEllipse, ...]


def pca_overlap(model_runs: Sequence[tuple], labels: Sequence[str] | None = None) -> PcaOverlap:
    """Project several (queries, targets) pairs onto one shared PCA plane.

    The basis comes from the covariance of the union of every set, so
    different runs stay comparable. Each set gets its own 2-sigma
    ellipse. A union whose covariance has rank below 2 cannot define the
    plane and raises a numerical failure.
    """
    if not model_runs:
        raise ContractViolation("need at least one (queries, targets) pair")
    sets: list[np.ndarray] = []
    names: list[str] = []
    for run_index, (q, p) in enumerate(model_runs):
        sets.append(as_matrix(q, f"run {run_index} queries"))
        sets.append(as_matrix(p, f"run {run_index} targets"))
        names.append(f"run{run_index}/query")
        names.append(f"run{run_index}/target")
    if labels is not None:
        if len(labels) != len(sets):
            raise ContractViolation(
                f"need {len(sets)} labels (two per run), got {len(labels)}"
            )
        names = [str(s) for s in labels]
    width = sets[0].shape[1]
    if any(s.shape[1] != width for s in sets):
        raise ContractViolation("all sets must share one feature width")
    union = np.vstack(sets)
    if union.shape[0] < 3:
        raise ContractViolation("need at least 3 pooled rows for a PCA plane")
    origin = union.mean(axis=0)
    eigvals, eigvecs = sym_eig(covariance(union))
    top, second = float(eigvals[-1]), float(eigvals[-2])
    if top <= 0.0 or second <= top * 1e-12:
        raise NumericalFailureError("union covariance has rank below 2")
    basis = eigvecs[:, [-1, -2]].copy()
    # Canonical sign: the largest-magnitude coordinate of each component
    # points positive, so reruns and platforms agree on orientation.
    for col in range(2):
        pivot = int(np.argmax(np.abs(basis[:, col])))
        if basis[pivot, col] < 0:
            basis[:, col] = -basis[:, col]
    points = []
    ellipses = []
    for s in sets:
        proj = (s - origin) @ basis
        points.append(proj)
        ellipses.append(CovarianceEllipse(proj.mean(axis=0), covariance(proj)))
    return PcaOverlap(basis, origin, tuple(names), tuple(points), tuple(ellipses))


class HeatmapResult(NamedTuple):
    heatmap: np.ndarray  # (k, k) entrywise magnitudes
    frobenius: float  # Frobenius norm of the projected (signed) difference


def covdiff_heatmap(
    queries,
    targets,
    projection_dim: int = 32,
    seed: int = 0,
    projection: np.ndarray | None = None,
) -> HeatmapResult:
    """Project the covariance difference into k dimensions and take magnitudes.

    The default projection is a seeded Gaussian matrix scaled by 1/sqrt(k).
    Passing an explicit projection (e.g. the identity) overrides it, which
    gives tests a direct view of |cov(queries) - cov(targets)|.
    """
    q = as_matrix(queries, "queries")
    p = as_matrix(targets, "targets")
    if q.shape[1] != p.shape[1]:
        raise ContractViolation(f"width mismatch: {q.shape[1]} vs {p.shape[1]}")
    diff = covariance(q) - covariance(p)
    dim = q.shape[1]
    if projection is None:
        if projection_dim < 1:
            raise ContractViolation(f"projection dim must be positive, got {projection_dim}")
        projection = gaussian_matrix(dim, projection_dim, seed) / math.sqrt(projection_dim)
    else:
        projection = as_matrix(projection, "projection")
        if projection.shape[0] != dim:
            raise ContractViolation(
                f"projection must have {dim} rows, got {projection.shape[0]}"
            )
    projected = projection.T @ diff @ projection
    return HeatmapResult(np.abs(projected), float(np.linalg.norm(projected)))


# --- plain-text serialization ------------------------------------------------
#
# All artifacts are deterministic: 9 significant digits for CSV numbers,
# no timestamps, and a leading comment line carrying the config hash and
# seed so every file is traceable to the run that wrote it.


def sig9(x: float) -> str:
    return f"{x:.9g}"


def heatmap_to_csv(result: HeatmapResult, config_hash: str, seed: int) -> str:
    lines = [
        f"# config_hash={config_hash} seed={seed} frobenius={sig9(result.frobenius)}"
    ]
    for row in result.heatmap:
        lines.append(",".join(sig9(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def pca_points_to_csv(overlap: PcaOverlap, config_hash: str, seed: int) -> str:
    lines = [f"# config_hash={config_hash} seed={seed}", "set_id,x,y"]
    for label, pts in zip(overlap.labels, overlap.points):
        for x, y in pts:
            lines.append(f"{label},{sig9(float(x))},{sig9(float(y))}")
    return "\n".join(lines) + "\n"


def ellipses_to_json(overlap: PcaOverlap, config_hash: str, seed: int) -> dict:
    entries = []
    for label, ell in zip(overlap.labels, overlap.ellipses):
        major, minor, angle = ell.axes()
        entries.append(
            {
                "set_id": label,
                "center": [float(ell.center[0]), float(ell.center[1])],
                "cov": [[float(ell.cov[i, j]) for j in range(2)] for i in range(2)],
                "major_radius": major,
                "minor_radius": minor,
                "angle_degrees": angle,
            }
        )
    return {"config_hash": config_hash, "seed": seed, "ellipses": entries}


_SVG_COLORS = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#e377c2",
    "#17becf",
)


def overlay_to_svg(overlap: PcaOverlap, config_hash: str, seed: int) -> str:
    """Hand-rolled scatter + ellipse overlay; byte-identical for equal inputs.

    Both axes share one scale factor so the ellipse geometry stays honest
    under the data-to-pixel map.
    """
    size, margin = 640.0, 60.0
    all_pts = np.vstack(overlap.points)
    lo = all_pts.min(axis=0)
    hi = all_pts.max(axis=0)
    for ell in overlap.ellipses:
        major, _minor, _angle = ell.axes()
        lo = np.minimum(lo, ell.center - major)
        hi = np.maximum(hi, ell.center + major)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-12))
    scale = (size - 2 * margin) / span
    center_data = (lo + hi) / 2.0

    def to_px(x: float, y: float) -> tuple[float, float]:
        px = size / 2.0 + (x - center_data[0]) * scale
        py = size / 2.0 - (y - center_data[1]) * scale  # y grows upward
        return px, py

    def fmt(v: float) -> str:
        return f"{v:.3f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(size)}" height="{int(size)}" '
        f'viewBox="0 0 {int(size)} {int(size)}">',
        f"<!-- config_hash={config_hash} seed={seed} -->",
        f'<rect width="{int(size)}" height="{int(size)}" fill="white"/>',
    ]
    for idx, (label, pts, ell) in enumerate(
        zip(overlap.labels, overlap.points, overlap.ellipses)
    ):
        color = _SVG_COLORS[idx % len(_SVG_COLORS)]
        dots = []
        for x, y in pts:
            px, py = to_px(float(x), float(y))
            dots.append(f'<circle cx="{fmt(px)}" cy="{fmt(py)}" r="2.2" fill="{color}" fill-opacity="0.55"/>')
        parts.append(f'<g id="points-{idx}">' + "".join(dots) + "</g>")
        major, minor, angle = ell.axes()
        cx, cy = to_px(float(ell.center[0]), float(ell.center[1]))
        parts.append(
            f'<ellipse cx="0" cy="0" rx="{fmt(major * scale)}" ry="{fmt(minor * scale)}" '
            f'fill="none" stroke="{color}" stroke-width="2" '
            f'transform="translate({fmt(cx)} {fmt(cy)}) rotate({fmt(-angle)})"/>'
        )
        parts.append(
            f'<text x="{fmt(margin / 2)}" y="{fmt(margin / 2 + 18 * idx)}" '
            f'font-family="monospace" font-size="13" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
