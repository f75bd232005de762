import json

import numpy as np
import pytest

from omnialign.calibration import ModalityComposition
from omnialign.errors import ContractViolation, DegenerateEmbeddingError
from omnialign.numerics import make_rng
from omnialign.synth import (
    COMPOSITIONS,
    DATASET_FORMAT,
    Item,
    ModelParams,
    ParamGrads,
    WorldConfig,
    build_world,
    encode,
    encode_batch,
    encode_batch_backward,
    encode_jvp,
    generate_dataset,
    init_params,
    load_dataset,
    render,
    save_dataset,
)


def _small_config(**overrides):
    defaults = dict(
        latent_dim=6,
        embed_dim=8,
        feature_dims={"T": 10, "I": 9, "A": 8, "V": 7},
        pairs=30,
        hard_negatives=2,
    )
    defaults.update(overrides)
    return WorldConfig(**defaults)


def test_compositions_enumerate_all_subsets_in_bitmask_order():
    assert len(COMPOSITIONS) == 15
    assert COMPOSITIONS[0] == "T"
    assert COMPOSITIONS[1] == "I"
    assert COMPOSITIONS[2] == "TI"
    assert COMPOSITIONS[-1] == "TIAV"
    assert len(set(COMPOSITIONS)) == 15


def test_world_config_validation():
    with pytest.raises(ContractViolation):
        _small_config(latent_dim=0)
    with pytest.raises(ContractViolation):
        _small_config(feature_dims={"T": 10})
    with pytest.raises(ContractViolation):
        _small_config(noise_scales={"T": -1.0, "I": 1.0, "A": 1.0, "V": 1.0})
    with pytest.raises(ContractViolation):
        _small_config(anisotropy={"T": 0.5, "I": 1.0, "A": 1.0, "V": 1.0})
    with pytest.raises(ContractViolation):
        _small_config(hard_negative_closeness=1.0)
    with pytest.raises(ContractViolation):
        _small_config(eval_fraction=0.0)
    with pytest.raises(ContractViolation):
        _small_config(composition_weights={"TX": 1.0})
    with pytest.raises(ContractViolation):
        _small_config(composition_weights={"T": 0.0})
    with pytest.raises(ContractViolation):
        _small_config(hard_negatives=-1)


def test_world_config_normalizes_key_order():
    config = _small_config(
        feature_dims={"V": 7, "A": 8, "I": 9, "T": 10},
        noise_scales={"V": 0.5, "A": 0.5, "I": 0.5, "T": 0.5},
        anisotropy={"V": 2, "A": 2, "I": 2, "T": 2},
    )
    assert list(config.feature_dims) == ["T", "I", "A", "V"]
    assert list(config.noise_scales) == ["T", "I", "A", "V"]
    assert config.as_dict()["feature_dims"] == {"T": 10, "I": 9, "A": 8, "V": 7}


def test_build_world_is_seed_deterministic():
    config = _small_config()
    w1 = build_world(config, 7)
    w2 = build_world(config, 7)
    w3 = build_world(config, 8)
    for m in "TIAV":
        assert np.array_equal(w1.render_maps[m], w2.render_maps[m])
        assert np.array_equal(w1.noise_stddevs[m], w2.noise_stddevs[m])
    assert not np.array_equal(w1.render_maps["T"], w3.render_maps["T"])


def test_render_map_condition_number_matches_anisotropy():
    config = _small_config(anisotropy={"T": 1.0, "I": 4.0, "A": 16.0, "V": 1.0})
    world = build_world(config, 3)
    for m, expected in (("T", 1.0), ("I", 4.0), ("A", 16.0)):
        sing = np.linalg.svd(world.render_maps[m], compute_uv=False)
        assert sing.max() / sing.min() == pytest.approx(expected, rel=1e-8)
        # Total signal power is held fixed while the spread changes.
        assert float((sing**2).mean()) == pytest.approx(1.0, rel=1e-10)


def test_noise_spectrum_condition_matches_anisotropy():
    config = _small_config(anisotropy={"T": 1.0, "I": 9.0, "A": 1.0, "V": 1.0})
    world = build_world(config, 3)
    variances = world.noise_stddevs["I"] ** 2
    assert variances.max() / variances.min() == pytest.approx(9.0, rel=1e-10)
    assert float(variances.mean()) == pytest.approx(1.0, rel=1e-10)
    flat = world.noise_stddevs["T"]
    assert np.allclose(flat, 1.0, atol=1e-12)


def test_render_with_zero_noise_is_the_pure_linear_map():
    config = _small_config(noise_scales={m: 0.0 for m in "TIAV"})
    world = build_world(config, 5)
    rng = make_rng(99)
    z = rng.standard_normal(config.latent_dim)
    comp = ModalityComposition.from_string("TA")
    item1 = render(world, z, comp, make_rng(1))
    item2 = render(world, z, comp, make_rng(2))
    for m in ("T", "A"):
        assert np.array_equal(item1.features[m], item2.features[m])
        assert np.allclose(item1.features[m], world.render_maps[m] @ z, atol=1e-14)


def test_render_rejects_wrong_latent_shape():
    config = _small_config()
    world = build_world(config, 5)
    with pytest.raises(ContractViolation):
        render(world, np.zeros(3), ModalityComposition.from_string("T"), make_rng(0))


def test_item_features_must_match_composition():
    with pytest.raises(ContractViolation):
        Item(ModalityComposition.from_string("TI"), {"T": np.zeros(3)})


def test_generate_dataset_split_and_shapes():
    config = _small_config(pairs=30, eval_fraction=0.1)
    dataset = generate_dataset(config, 11)
    assert len(dataset.train) == 27
    assert len(dataset.eval) == 3
    tup = dataset.train[0]
    assert len(tup.hard_negatives) == 2
    for m in tup.query.composition.active:
        assert tup.query.features[m].shape == (config.feature_dims[m],)


def test_generate_dataset_single_pair_has_no_eval_split():
    dataset = generate_dataset(_small_config(pairs=1), 11)
    assert len(dataset.train) == 1
    assert len(dataset.eval) == 0


def test_generate_dataset_is_seed_deterministic():
    config = _small_config(pairs=12)
    d1 = generate_dataset(config, 17)
    d2 = generate_dataset(config, 17)
    for t1, t2 in zip(d1.train + d1.eval, d2.train + d2.eval):
        assert t1.query.composition == t2.query.composition
        for m in t1.query.composition.active:
            assert np.array_equal(t1.query.features[m], t2.query.features[m])
        for n1, n2 in zip(t1.hard_negatives, t2.hard_negatives):
            for m in n1.composition.active:
                assert np.array_equal(n1.features[m], n2.features[m])
    d3 = generate_dataset(config, 18)
    assert not np.array_equal(
        d1.train[0].query.features[d1.train[0].query.composition.active[0]],
        d3.train[0].query.features[d3.train[0].query.composition.active[0]],
    )


def test_composition_weights_restrict_the_draw():
    config = _small_config(pairs=20, composition_weights={"TA": 1.0})
    dataset = generate_dataset(config, 23)
    for tup in dataset.train + dataset.eval:
        assert tup.query.composition.to_string() == "TA"
        assert tup.positive.composition.to_string() == "TA"


def test_target_weights_split_query_and_target_sides():
    config = _small_config(
        pairs=20,
        composition_weights={"T": 1.0},
        target_composition_weights={"AV": 1.0},
    )
    dataset = generate_dataset(config, 23)
    for tup in dataset.train + dataset.eval:
        assert tup.query.composition.to_string() == "T"
        assert tup.positive.composition.to_string() == "AV"


def test_hard_negatives_share_the_positive_composition():
    dataset = generate_dataset(_small_config(pairs=40), 31)
    for tup in dataset.train + dataset.eval:
        for neg in tup.hard_negatives:
            assert neg.composition.to_string() == tup.positive.composition.to_string()


def test_target_weights_validation_and_roundtrip(tmp_path):
    with pytest.raises(ContractViolation):
        _small_config(target_composition_weights={"TX": 1.0})
    with pytest.raises(ContractViolation):
        _small_config(target_composition_weights={"T": 0.0})
    config = _small_config(pairs=6, target_composition_weights={"I": 2.0, "T": 1.0})
    assert list(config.target_composition_weights) == ["T", "I"]
    dataset = generate_dataset(config, 5)
    path = tmp_path / "data.jsonl"
    save_dataset(dataset, path)
    loaded = load_dataset(path)
    assert loaded.config.target_composition_weights == {"T": 1.0, "I": 2.0}
    assert _small_config().target_composition_weights is None


def _cos(a, b):
    return float(a @ b) / (float(np.linalg.norm(a)) * float(np.linalg.norm(b)))


def test_hard_negatives_are_harder_than_random_pairs():
    # Single modality and zero noise make raw features comparable; the
    # correlated latent must push negatives well above unrelated tuples.
    config = _small_config(
        latent_dim=16,
        pairs=500,
        hard_negatives=1,
        noise_scales={m: 0.0 for m in "TIAV"},
        composition_weights={"T": 1.0},
        hard_negative_closeness=0.7,
    )
    dataset = generate_dataset(config, 29)
    rows = dataset.train + dataset.eval
    hard = np.array(
        [_cos(t.query.features["T"], t.hard_negatives[0].features["T"]) for t in rows]
    )
    rng = make_rng(30)
    perm = rng.permutation(len(rows))
    random_cos = np.array(
        [
            _cos(rows[i].query.features["T"], rows[j].positive.features["T"])
            for i, j in enumerate(perm)
            if i != j
        ]
    )
    assert hard.mean() > random_cos.mean() + 0.05
    assert hard.mean() > 0.4  # closeness 0.7 keeps most of the latent


def test_hard_negative_closeness_is_monotone():
    base = dict(
        latent_dim=16,
        pairs=300,
        hard_negatives=1,
        noise_scales={m: 0.0 for m in "TIAV"},
        composition_weights={"T": 1.0},
    )
    sims = {}
    for close in (0.3, 0.9):
        config = _small_config(**base, hard_negative_closeness=close)
        dataset = generate_dataset(config, 31)
        rows = dataset.train + dataset.eval
        sims[close] = np.mean(
            [_cos(t.query.features["T"], t.hard_negatives[0].features["T"]) for t in rows]
        )
    assert sims[0.9] > sims[0.3] + 0.2


def test_dataset_roundtrip_is_bit_exact(tmp_path):
    config = _small_config(pairs=8)
    dataset = generate_dataset(config, 37)
    path = tmp_path / "data.jsonl"
    save_dataset(dataset, path, config_hash="beefcafe")
    header = json.loads(path.read_text().splitlines()[0])
    assert header["format"] == DATASET_FORMAT
    assert header["config_hash"] == "beefcafe"
    assert header["train_count"] == len(dataset.train)
    loaded = load_dataset(path)
    assert loaded.seed == 37
    assert loaded.config == config
    for a, b in zip(dataset.train + dataset.eval, loaded.train + loaded.eval):
        assert a.query.composition == b.query.composition
        for m in a.query.composition.active:
            assert np.array_equal(a.query.features[m], b.query.features[m])
        for m in a.positive.composition.active:
            assert np.array_equal(a.positive.features[m], b.positive.features[m])
        for na, nb in zip(a.hard_negatives, b.hard_negatives):
            for m in na.composition.active:
                assert np.array_equal(na.features[m], nb.features[m])


def test_load_dataset_rejects_bad_files(tmp_path):
    config = _small_config(pairs=4)
    dataset = generate_dataset(config, 41)
    path = tmp_path / "data.jsonl"
    save_dataset(dataset, path)
    lines = path.read_text().splitlines()

    wrong_format = tmp_path / "fmt.jsonl"
    header = json.loads(lines[0])
    header["format"] = "other/9"
    wrong_format.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(ContractViolation):
        load_dataset(wrong_format)

    truncated = tmp_path / "short.jsonl"
    truncated.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ContractViolation):
        load_dataset(truncated)


# --- encoder -------------------------------------------------------------------


def _one_item(config, seed, comp="TIA"):
    world = build_world(config, seed)
    rng = make_rng(seed, 1)
    z = rng.standard_normal(config.latent_dim)
    return render(world, z, ModalityComposition.from_string(comp), rng)


def test_init_params_shapes_and_determinism():
    config = _small_config()
    params = init_params(config, 43, tau_init=0.05)
    again = init_params(config, 43, tau_init=0.05)
    assert params.embed_dim == config.embed_dim
    for m in "TIAV":
        assert params.proj[m].shape == (config.feature_dims[m], config.embed_dim)
        assert np.array_equal(params.proj[m], again.proj[m])
        assert np.all(params.bias[m] == 0.0)
    assert np.all(params.tau == 0.05)
    # Fan-in scaling keeps projection entries near 1/sqrt(fdim).
    spread = params.proj["T"].std() * np.sqrt(config.feature_dims["T"])
    assert 0.7 < spread < 1.3
    with pytest.raises(ContractViolation):
        init_params(config, 43, tau_init=0.0)


def test_encode_matches_manual_pooling():
    config = _small_config()
    params = init_params(config, 47)
    item = _one_item(config, 47, comp="TIA")
    emb = encode(params, item)
    manual = np.zeros(config.embed_dim)
    for m in ("T", "I", "A"):
        manual += item.features[m] @ params.proj[m] + params.bias[m]
    manual /= 3.0
    manual /= np.linalg.norm(manual)
    assert np.allclose(emb, manual, atol=1e-14)
    assert np.linalg.norm(emb) == pytest.approx(1.0, abs=1e-12)


def test_encode_zero_embedding_is_degenerate():
    config = _small_config()
    params = init_params(config, 53)
    comp = ModalityComposition.from_string("T")
    item = Item(comp, {"T": np.zeros(config.feature_dims["T"])})
    with pytest.raises(DegenerateEmbeddingError):
        encode(params, item)  # zero features and zero bias pool to zero


def test_encode_batch_agrees_with_single_encode():
    config = _small_config()
    params = init_params(config, 59)
    world = build_world(config, 59)
    rng = make_rng(59, 1)
    comps = ("T", "TI", "TIA", "AV", "TIAV", "I")
    items = [
        render(world, rng.standard_normal(config.latent_dim),
               ModalityComposition.from_string(c), rng)
        for c in comps
    ]
    batch, cache = encode_batch(params, items)
    assert batch.shape == (len(items), config.embed_dim)
    for i, item in enumerate(items):
        assert np.allclose(batch[i], encode(params, item), atol=1e-12)
    assert np.allclose(np.linalg.norm(batch, axis=1), 1.0, atol=1e-12)
    # Cache bookkeeping: group indices cover exactly the users of each modality.
    assert sorted(cache.groups["T"]) == [0, 1, 2, 4]
    assert sorted(cache.groups["V"]) == [3, 4]
    assert cache.inv_counts[0] == 1.0
    assert cache.inv_counts[2] == pytest.approx(1.0 / 3.0)
    with pytest.raises(ContractViolation):
        encode_batch(params, [])


def test_encode_jvp_matches_finite_differences():
    config = _small_config()
    params = init_params(config, 61)
    item = _one_item(config, 61, comp="TIV")
    rng = make_rng(62)
    tangent = ParamGrads.zeros_like(params)
    for m in "TIAV":
        tangent.proj[m] += rng.standard_normal(tangent.proj[m].shape)
        tangent.bias[m] += rng.standard_normal(tangent.bias[m].shape)
    jvp = encode_jvp(params, item, tangent)
    h = 1e-6
    plus = params.copy()
    minus = params.copy()
    for m in "TIAV":
        plus.proj[m] += h * tangent.proj[m]
        plus.bias[m] += h * tangent.bias[m]
        minus.proj[m] -= h * tangent.proj[m]
        minus.bias[m] -= h * tangent.bias[m]
    fd = (encode(plus, item) - encode(minus, item)) / (2 * h)
    assert np.allclose(jvp, fd, rtol=1e-6, atol=1e-9)


def test_encode_batch_backward_matches_finite_differences():
    config = _small_config()
    params = init_params(config, 67)
    world = build_world(config, 67)
    rng = make_rng(67, 1)
    items = [
        render(world, rng.standard_normal(config.latent_dim),
               ModalityComposition.from_string(c), rng)
        for c in ("TI", "A", "TIAV")
    ]
    weights = make_rng(68).standard_normal((len(items), config.embed_dim))

    def objective(p):
        batch, _ = encode_batch(p, items)
        return float((weights * batch).sum())

    _, cache = encode_batch(params, items)
    grads = ParamGrads.zeros_like(params)
    encode_batch_backward(params, cache, weights, grads)

    h = 1e-6
    probe = make_rng(69)
    for m in ("T", "A", "V"):
        for _ in range(4):
            i = int(probe.integers(params.proj[m].shape[0]))
            j = int(probe.integers(params.proj[m].shape[1]))
            plus = params.copy()
            plus.proj[m][i, j] += h
            minus = params.copy()
            minus.proj[m][i, j] -= h
            fd = (objective(plus) - objective(minus)) / (2 * h)
            assert grads.proj[m][i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)
        j = int(probe.integers(params.bias[m].shape[0]))
        plus = params.copy()
        plus.bias[m][j] += h
        minus = params.copy()
        minus.bias[m][j] -= h
        fd = (objective(plus) - objective(minus)) / (2 * h)
        assert grads.bias[m][j] == pytest.approx(fd, rel=1e-5, abs=1e-9)
