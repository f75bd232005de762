"""Synthetic omni-modal world and the small trainable encoder.

Items share a latent semantic vector. Each modality renders the latent
through its own linear map plus Gaussian noise; noise magnitude and the
anisotropy (condition number) of both the map and the noise covariance
are controllable per modality. Hard negatives are rendered from a
correlated latent at a configurable closeness. The encoder projects
each active modality into the shared space, mean-pools, and
L2-normalizes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .calibration import MODALITIES, ModalityComposition
from .errors import ContractViolation, DegenerateEmbeddingError
from .numerics import make_rng, sym_eig

DATASET_FORMAT = "omni-synth/1"
_ZERO_NORM_TOL = 1e-12

# All 15 non-empty modality subsets in canonical (bitmask) order.
COMPOSITIONS = tuple(
    "".join(m for b, m in enumerate(MODALITIES) if mask >> b & 1)
    for mask in range(1, 1 << len(MODALITIES))
)

# RNG stream ids under the dataset seed.
_STREAM_WORLD = 0
_STREAM_DATA = 1
_STREAM_PARAMS = 2


def _uniform_map(value) -> dict[str, float]:
    return {m: float(value) for m in MODALITIES}


@dataclass(frozen=True)
class WorldConfig:
    """Geometry and sampling knobs of the synthetic world."""

    latent_dim: int = 16
    embed_dim: int = 32
    feature_dims: Mapping[str, int] = field(default_factory=lambda: {m: 24 for m in MODALITIES})
    noise_scales: Mapping[str, float] = field(default_factory=lambda: _uniform_map(1.0))
    anisotropy: Mapping[str, float] = field(default_factory=lambda: _uniform_map(1.0))
    hard_negative_closeness: float = 0.7
    pairs: int = 4000
    hard_negatives: int = 2
    eval_fraction: float = 0.1
    composition_weights: Mapping[str, float] = field(
        default_factory=lambda: {c: 1.0 for c in COMPOSITIONS}
    )
    # Optional separate distribution for the target side (positives and their
    # mined negatives). None keeps targets on composition_weights, giving a
    # query/target-symmetric world; setting it skews the two embedding
    # distributions apart so first/second-moment alignment has real work.
    target_composition_weights: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        if self.latent_dim < 1 or self.embed_dim < 1:
            raise ContractViolation("latent_dim and embed_dim must be positive")
        if set(self.feature_dims) != set(MODALITIES):
            raise ContractViolation(f"feature_dims must cover exactly {MODALITIES}")
        if any(int(d) < 1 for d in self.feature_dims.values()):
            raise ContractViolation("feature dims must be positive")
        for name, mapping in (("noise_scales", self.noise_scales), ("anisotropy", self.anisotropy)):
            if set(mapping) != set(MODALITIES):
                raise ContractViolation(f"{name} must cover exactly {MODALITIES}")
        if any(v < 0 for v in self.noise_scales.values()):
            raise ContractViolation("noise scales must be non-negative")
        if any(v < 1.0 for v in self.anisotropy.values()):
            raise ContractViolation("anisotropy (a condition number) must be >= 1")
        if not 0.0 <= self.hard_negative_closeness < 1.0:
            raise ContractViolation("hard_negative_closeness must lie in [0, 1)")
        if self.pairs < 1:
            raise ContractViolation("pairs must be positive")
        if self.hard_negatives < 0:
            raise ContractViolation("hard_negatives must be non-negative")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ContractViolation("eval_fraction must lie in (0, 1)")
        weight_maps = {"composition_weights": self.composition_weights}
        if self.target_composition_weights is not None:
            weight_maps["target_composition_weights"] = self.target_composition_weights
        cleaned = {}
        for name, mapping in weight_maps.items():
            unknown = set(mapping) - set(COMPOSITIONS)
            if unknown:
                raise ContractViolation(
                    f"unknown compositions in {name}: {sorted(unknown)}"
                )
            weights = {c: float(w) for c, w in mapping.items()}
            if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
                raise ContractViolation(
                    f"{name} must be non-negative with positive sum"
                )
            cleaned[name] = weights
        # Normalize the mapping fields to plain dicts with canonical key order.
        object.__setattr__(self, "feature_dims", {m: int(self.feature_dims[m]) for m in MODALITIES})
        object.__setattr__(self, "noise_scales", {m: float(self.noise_scales[m]) for m in MODALITIES})
        object.__setattr__(self, "anisotropy", {m: float(self.anisotropy[m]) for m in MODALITIES})
        for name, weights in cleaned.items():
            object.__setattr__(
                self, name, {c: weights[c] for c in COMPOSITIONS if c in weights}
            )

    def as_dict(self) -> dict:
        target = self.target_composition_weights
        return {
            "latent_dim": self.latent_dim,
            "embed_dim": self.embed_dim,
            "feature_dims": dict(self.feature_dims),
            "noise_scales": dict(self.noise_scales),
            "anisotropy": dict(self.anisotropy),
            "hard_negative_closeness": self.hard_negative_closeness,
            "pairs": self.pairs,
            "hard_negatives": self.hard_negatives,
            "eval_fraction": self.eval_fraction,
            "composition_weights": dict(self.composition_weights),
            "target_composition_weights": None if target is None else dict(target),
        }


@dataclass(frozen=True)
class World:
    """Frozen render maps and noise spectra drawn from a seed."""

    config: WorldConfig
    render_maps: dict[str, np.ndarray]  # (feature_dim, latent_dim) per modality
    noise_stddevs: dict[str, np.ndarray]  # per-feature noise std, condition = anisotropy


def _spread_singular_values(gauss: np.ndarray, condition: float) -> np.ndarray:
    """Rebuild a Gaussian matrix with a prescribed singular-value ladder.

    Targets are log-spaced with ratio `condition` between the largest and
    smallest, normalized so the mean squared singular value is 1 (total
    signal power stays constant while the spread changes).
    """
    rows, cols = gauss.shape
    rank = min(rows, cols)
    gram_vals, gram_vecs = sym_eig(gauss.T @ gauss)
    order = slice(cols - rank, cols)  # keep the strictly positive part
    sing = np.sqrt(np.maximum(gram_vals[order], 0.0))
    if np.any(sing <= 0):
        raise ContractViolation("render map draw was rank-deficient")
    right = gram_vecs[:, order]
    left = gauss @ right / sing
    targets = condition ** np.linspace(-0.5, 0.5, rank)
    targets = targets * np.sqrt(rank / float((targets**2).sum()))
    return (left * targets) @ right.T


def _noise_stddevs(dim: int, condition: float) -> np.ndarray:
    """Diagonal noise stddevs, log-spaced variances with unit mean power."""
    variances = condition ** np.linspace(-0.5, 0.5, dim)
    variances = variances * (dim / float(variances.sum()))
    return np.sqrt(variances)


def build_world(config: WorldConfig, seed: int) -> World:
    rng = make_rng(seed, _STREAM_WORLD)
    render_maps = {}
    noise_stddevs = {}
    for m in MODALITIES:
        fdim = config.feature_dims[m]
        gauss = rng.standard_normal((fdim, config.latent_dim))
        render_maps[m] = _spread_singular_values(gauss, config.anisotropy[m])
        noise_stddevs[m] = _noise_stddevs(fdim, config.anisotropy[m])
    return World(config, render_maps, noise_stddevs)


@dataclass(frozen=True)
class Item:
    """One rendered observation: composition plus per-modality feature vectors."""

    composition: ModalityComposition
    features: dict[str, np.ndarray]

    def __post_init__(self):
        if set(self.features) != set(self.composition.active):
            raise ContractViolation(
                "features must cover exactly the active modalities"
            )


@dataclass(frozen=True)
class TrainingTuple:
    query: Item
    positive: Item
    hard_negatives: tuple[Item, ...]


@dataclass
class Dataset:
    train: list[TrainingTuple]
    eval: list[TrainingTuple]
    config: WorldConfig
    seed: int


def render(world: World, latent: np.ndarray, composition: ModalityComposition, rng: np.random.Generator) -> Item:
    """Render one latent into every active modality.

    Noise is drawn in MODALITIES order regardless of scale, so streams
    stay aligned across configs; a zero noise scale gives a
    deterministic render.
    """
    z = np.asarray(latent, dtype=np.float64)
    if z.shape != (world.config.latent_dim,):
        raise ContractViolation(
            f"latent must have shape ({world.config.latent_dim},), got {z.shape}"
        )
    features = {}
    for m in composition.active:
        noise = world.noise_stddevs[m] * rng.standard_normal(world.config.feature_dims[m])
        features[m] = world.render_maps[m] @ z + world.config.noise_scales[m] * noise
    return Item(composition, features)


def _composition_sampler(weights: Mapping[str, float]):
    names = [c for c, w in weights.items() if w > 0]
    probs = np.array([weights[c] for c in names], dtype=np.float64)
    probs /= probs.sum()
    comps = [ModalityComposition.from_string(c) for c in names]

    def sample(rng: np.random.Generator) -> ModalityComposition:
        return comps[int(rng.choice(len(comps), p=probs))]

    return sample


def generate_dataset(config: WorldConfig, seed: int) -> Dataset:
    """Draw the full tuple corpus and split it into train/eval.

    Every tuple owns a fresh latent; hard negatives are near-duplicates of
    the positive item: same composition, latent perturbed toward
    independence by the configured closeness. Mined negatives in a real
    corpus are the top-scoring wrong candidates, and those are dominated
    by same-composition lookalikes, so the miner reproduces that shape.
    The split by tuple is also a split by latent identity.
    """
    world = build_world(config, seed)
    rng = make_rng(seed, _STREAM_DATA)
    sample_query = _composition_sampler(config.composition_weights)
    target_weights = config.target_composition_weights
    sample_target = (
        sample_query
        if target_weights is None
        else _composition_sampler(target_weights)
    )
    close = config.hard_negative_closeness
    mix = np.sqrt(1.0 - close**2)
    tuples = []
    for _ in range(config.pairs):
        z = rng.standard_normal(config.latent_dim)
        query = render(world, z, sample_query(rng), rng)
        positive = render(world, z, sample_target(rng), rng)
        negs = []
        for _ in range(config.hard_negatives):
            z_neg = close * z + mix * rng.standard_normal(config.latent_dim)
            negs.append(render(world, z_neg, positive.composition, rng))
        tuples.append(TrainingTuple(query, positive, tuple(negs)))
    num_eval = int(round(config.pairs * config.eval_fraction))
    num_eval = min(max(num_eval, 1), config.pairs - 1) if config.pairs > 1 else 0
    split = config.pairs - num_eval
    return Dataset(tuples[:split], tuples[split:], config, seed)


# --- dataset serialization ----------------------------------------------------


def _item_record(item: Item) -> dict:
    return {
        "composition": item.composition.to_string(),
        "features": {m: item.features[m].tolist() for m in item.composition.active},
    }


def _item_from_record(rec: dict) -> Item:
    comp = ModalityComposition.from_string(rec["composition"])
    features = {m: np.asarray(rec["features"][m], dtype=np.float64) for m in comp.active}
    return Item(comp, features)


def save_dataset(dataset: Dataset, path, config_hash: str = "") -> None:
    """Write the JSON-lines dataset file (header line, then one tuple per line)."""
    header = {
        "format": DATASET_FORMAT,
        "seed": dataset.seed,
        "config_hash": config_hash,
        "world": dataset.config.as_dict(),
        "train_count": len(dataset.train),
        "eval_count": len(dataset.eval),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split, rows in (("train", dataset.train), ("eval", dataset.eval)):
            for tup in rows:
                rec = {
                    "split": split,
                    "query": _item_record(tup.query),
                    "positive": _item_record(tup.positive),
                    "hard_negatives": [_item_record(n) for n in tup.hard_negatives],
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ContractViolation(
                f"unsupported dataset format {header.get('format')!r}"
            )
        config = WorldConfig(**header["world"])
        train: list[TrainingTuple] = []
        eval_rows: list[TrainingTuple] = []
        for line in fh:
            rec = json.loads(line)
            tup = TrainingTuple(
                _item_from_record(rec["query"]),
                _item_from_record(rec["positive"]),
                tuple(_item_from_record(n) for n in rec["hard_negatives"]),
            )
            (train if rec["split"] == "train" else eval_rows).append(tup)
    if len(train) != header["train_count"] or len(eval_rows) != header["eval_count"]:
        raise ContractViolation("dataset file row counts do not match its header")
    return Dataset(train, eval_rows, config, int(header["seed"]))


# --- encoder -------------------------------------------------------------------


@dataclass
class ModelParams:
    """Per-modality affine projections plus the learned temperature vector."""

    proj: dict[str, np.ndarray]  # (feature_dim, embed_dim) per modality
    bias: dict[str, np.ndarray]  # (embed_dim,) per modality
    tau: np.ndarray  # (4,) temperatures in MODALITIES order

    @property
    def embed_dim(self) -> int:
        return next(iter(self.bias.values())).shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(
            {m: w.copy() for m, w in self.proj.items()},
            {m: b.copy() for m, b in self.bias.items()},
            self.tau.copy(),
        )


@dataclass
class ParamGrads:
    """Gradient (or moment) buffers mirroring ModelParams."""

    proj: dict[str, np.ndarray]
    bias: dict[str, np.ndarray]
    tau: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "ParamGrads":
        return cls(
            {m: np.zeros_like(w) for m, w in params.proj.items()},
            {m: np.zeros_like(b) for m, b in params.bias.items()},
            np.zeros_like(params.tau),
        )


def init_params(config: WorldConfig, seed: int, tau_init: float = 0.02) -> ModelParams:
    """Gaussian projections scaled by 1/sqrt(fan-in), zero biases, uniform tau."""
    if tau_init <= 0:
        raise ContractViolation(f"tau_init must be positive, got {tau_init}")
    rng = make_rng(seed, _STREAM_PARAMS)
    proj = {}
    bias = {}
    for m in MODALITIES:
        fdim = config.feature_dims[m]
        proj[m] = rng.standard_normal((fdim, config.embed_dim)) / np.sqrt(fdim)
        bias[m] = np.zeros(config.embed_dim)
    return ModelParams(proj, bias, np.full(len(MODALITIES), float(tau_init)))


def encode(params: ModelParams, item: Item) -> np.ndarray:
    """Mean-pool the active modality projections and L2-normalize."""
    active = item.composition.active
    pooled = None
    for m in active:
        part = item.features[m] @ params.proj[m] + params.bias[m]
        pooled = part if pooled is None else pooled + part
    pooled = pooled / len(active)
    norm = float(np.linalg.norm(pooled))
    if norm < _ZERO_NORM_TOL:
        raise DegenerateEmbeddingError("pooled embedding has zero norm")
    return pooled / norm


class EncodeCache(NamedTuple):
    """Everything the encoder backward pass needs from the forward pass."""

    embeddings: np.ndarray  # (n, D) unit rows
    norms: np.ndarray  # (n,) pre-normalization norms
    inv_counts: np.ndarray  # (n,) 1 / number of active modalities
    groups: dict[str, np.ndarray]  # modality -> indices of items using it
    features: dict[str, np.ndarray]  # modality -> stacked feature rows


def encode_batch(params: ModelParams, items: Sequence[Item]) -> tuple[np.ndarray, EncodeCache]:
    """Vectorized encode of many items, grouped per modality."""
    n = len(items)
    if n == 0:
        raise ContractViolation("cannot encode an empty item list")
    dim = params.bias[MODALITIES[0]].shape[0]
    pooled = np.zeros((n, dim))
    counts = np.zeros(n)
    groups: dict[str, np.ndarray] = {}
    features: dict[str, np.ndarray] = {}
    for pos, m in enumerate(MODALITIES):
        idx = np.array(
            [i for i, it in enumerate(items) if it.composition.flags[pos]], dtype=int
        )
        if idx.size == 0:
            continue
        feats = np.stack([items[i].features[m] for i in idx])
        pooled[idx] += feats @ params.proj[m] + params.bias[m]
        counts[idx] += 1.0
        groups[m] = idx
        features[m] = feats
    inv_counts = 1.0 / counts
    pooled *= inv_counts[:, None]
    norms = np.linalg.norm(pooled, axis=1)
    if np.any(norms < _ZERO_NORM_TOL):
        raise DegenerateEmbeddingError("a pooled embedding has zero norm")
    embeddings = pooled / norms[:, None]
    return embeddings, EncodeCache(embeddings, norms, inv_counts, groups, features)


def encode_batch_backward(
    params: ModelParams,
    cache: EncodeCache,
    grad_embeddings: np.ndarray,
    out: ParamGrads,
) -> None:
    """Accumulate d(loss)/d(proj, bias) into `out` given d(loss)/d(embeddings).

    Backpropagates through the L2 normalization (projection onto the
    tangent space of the unit sphere) and the modality mean-pool.
    """
    g = np.asarray(grad_embeddings, dtype=np.float64)
    e = cache.embeddings
    radial = (g * e).sum(axis=1, keepdims=True)
    grad_pooled = (g - e * radial) / cache.norms[:, None]
    grad_pooled *= cache.inv_counts[:, None]
    for m, idx in cache.groups.items():
        rows = grad_pooled[idx]
        out.proj[m] += cache.features[m].T @ rows
        out.bias[m] += rows.sum(axis=0)


def encode_jvp(params: ModelParams, item: Item, tangent: ParamGrads) -> np.ndarray:
    """Directional derivative of encode(params, item) along a parameter tangent."""
    active = item.composition.active
    pooled = np.zeros_like(params.bias[active[0]])
    d_pooled = np.zeros_like(pooled)
    for m in active:
        pooled += item.features[m] @ params.proj[m] + params.bias[m]
        d_pooled += item.features[m] @ tangent.proj[m] + tangent.bias[m]
    pooled /= len(active)
    d_pooled /= len(active)
    norm = float(np.linalg.norm(pooled))
    if norm < _ZERO_NORM_TOL:
        raise DegenerateEmbeddingError("pooled embedding has zero norm")
    unit = pooled / norm
    return (d_pooled - unit * float(unit @ d_pooled)) / norm
