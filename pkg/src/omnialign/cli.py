"""Command-line interface.

Commands: gen, train, eval, diagnose, gradcheck, ablate, sweep. Every
command takes --config (JSON file), --out (artifact directory), --seed,
and repeatable --set key=value overrides. Artifacts land in fixed
subdirectories of --out (dataset/, ckpt/, logs/, metrics/,
diagnostics/), each embedding the config hash and seed, and reruns with
identical settings produce byte-identical files.

Exit codes: 0 success, 1 gradient check over tolerance, 2 config
errors (including unknown keys), 3 numerical failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import sys
from pathlib import Path

from .config import (
    SWEEPABLE,
    RunConfig,
    config_hash,
    effective_dict,
    load_run_config,
)
from .errors import (
    ConfigError,
    ContractViolation,
    DegenerateBatchError,
    DegenerateEmbeddingError,
    NumericalFailureError,
)
from .evalkit import evaluate
from .geometry import (
    centroid_gap,
    covariance_gap,
    covdiff_heatmap,
    ellipses_to_json,
    heatmap_to_csv,
    overlay_to_svg,
    pca_overlap,
    pca_points_to_csv,
    sig9,
)
from .synth import Dataset, WorldConfig, encode_batch, generate_dataset, load_dataset, save_dataset
from .trainer import (
    Toggles,
    finite_diff_check,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)

LOG_FORMAT = "omni-log/1"
METRICS_FORMAT = "omni-metrics/1"

ABLATION_VARIANTS = (
    ("full", Toggles()),
    ("no_calibration", Toggles(calibration=False)),
    ("no_curriculum", Toggles(curriculum=False)),
    ("no_dcl", Toggles(dcl=False)),
    ("no_whitening_coral", Toggles(whitening_coral=False)),
)

_METRIC_COLUMNS = (
    "hit_at_1",
    "recall_at_1",
    "recall_at_5",
    "ndcg_at_5",
    "centroid_gap",
    "covariance_gap",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="omnialign",
        description="Synthetic omni-modal alignment benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen": "generate the synthetic dataset",
        "train": "train a model on the generated dataset",
        "eval": "score a trained checkpoint on the eval split",
        "diagnose": "write embedding-space diagnostics for a checkpoint",
        "gradcheck": "verify analytic gradients against finite differences",
        "ablate": "train and score the full recipe plus the four single-component ablations",
        "sweep": "grid-search hyperparameters on the validation split",
    }
    for name, help_text in commands.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--out", default="omnialign_out", help="artifact directory")
        sp.add_argument("--seed", type=int, default=None, help="global seed override")
        sp.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="config override by dotted path (repeatable)",
        )
    return parser


class _Paths:
    def __init__(self, out: str):
        self.root = Path(out)
        self.dataset = self.root / "dataset" / "dataset.jsonl"
        self.checkpoint = self.root / "ckpt" / "checkpoint.json"
        self.steps = self.root / "logs" / "steps.jsonl"
        self.metrics_dir = self.root / "metrics"
        self.diagnostics_dir = self.root / "diagnostics"

    def ensure(self, *dirs: Path) -> None:
        for d in dirs:
            d.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _load_dataset_or_fail(paths: _Paths, cfg: RunConfig) -> Dataset:
    if not paths.dataset.exists():
        raise ConfigError(f"no dataset at {paths.dataset}; run `omnialign gen` first")
    dataset = load_dataset(paths.dataset)
    if dataset.config.as_dict() != cfg.world.as_dict():
        raise ConfigError(
            "dataset on disk was generated with a different world config; "
            "regenerate it or restore the config"
        )
    return dataset


def _ensure_dataset(paths: _Paths, cfg: RunConfig) -> Dataset:
    if paths.dataset.exists():
        return _load_dataset_or_fail(paths, cfg)
    paths.ensure(paths.dataset.parent)
    dataset = generate_dataset(cfg.world, cfg.seed)
    save_dataset(dataset, paths.dataset, config_hash(cfg))
    return dataset


def _train_once(dataset: Dataset, cfg: RunConfig, train_cfg, steps_path: Path, ckpt_path: Path):
    digest = config_hash(cfg)
    steps_path.parent.mkdir(parents=True, exist_ok=True)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    with open(steps_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": LOG_FORMAT, "config_hash": digest, "seed": cfg.seed}, sort_keys=True) + "\n")
        result = train(
            dataset,
            train_cfg,
            on_step=lambda rec: fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n"),
        )
    echo = effective_dict(cfg)
    echo["train"] = _train_config_dict(train_cfg)
    save_checkpoint(result.params, ckpt_path, echo, cfg.seed, digest)
    return result


def _train_config_dict(train_cfg) -> dict:
    return dataclasses.asdict(train_cfg)


def _metrics_doc(report: dict, cfg: RunConfig) -> dict:
    return {
        "format": METRICS_FORMAT,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        **report,
    }


def _metrics_row(name: str, report: dict) -> dict:
    row = {"variant": name}
    for col in ("hit_at_1", "recall_at_1", "recall_at_5", "ndcg_at_5"):
        row[col] = report["metrics"][col]
    for col in ("centroid_gap", "covariance_gap"):
        row[col] = report["diagnostics"][col]
    return row


def _rows_to_csv(rows: list[dict], digest: str, seed: int) -> str:
    lines = [f"# config_hash={digest} seed={seed}"]
    columns = list(rows[0].keys())
    lines.append(",".join(columns))
    for row in rows:
        cells = []
        for col in columns:
            value = row[col]
            cells.append(sig9(value) if isinstance(value, float) else str(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# --- commands ---------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, paths: _Paths) -> int:
    paths.ensure(paths.dataset.parent)
    dataset = generate_dataset(cfg.world, cfg.seed)
    save_dataset(dataset, paths.dataset, config_hash(cfg))
    print(
        f"gen: wrote {len(dataset.train)} train / {len(dataset.eval)} eval tuples "
        f"to {paths.dataset}"
    )
    return 0


def cmd_train(cfg: RunConfig, paths: _Paths) -> int:
    dataset = _load_dataset_or_fail(paths, cfg)
    if cfg.train.hard_negatives != dataset.config.hard_negatives:
        raise ConfigError(
            f"train.hard_negatives={cfg.train.hard_negatives} does not match "
            f"the dataset's {dataset.config.hard_negatives}"
        )
    result = _train_once(dataset, cfg, cfg.train, paths.steps, paths.checkpoint)
    final = result.records[-1] if result.records else None
    if final is not None:
        print(
            f"train: {len(result.records)} steps, final loss_total={final.loss_total:.6f} "
            f"(dcl={final.loss_dcl:.6f}, coral={final.loss_coral:.6f})"
        )
    else:
        print("train: 0 steps (total_steps=0), wrote initial parameters")
    print(f"train: checkpoint at {paths.checkpoint}")
    return 0


def cmd_eval(cfg: RunConfig, paths: _Paths) -> int:
    dataset = _load_dataset_or_fail(paths, cfg)
    if not paths.checkpoint.exists():
        raise ConfigError(f"no checkpoint at {paths.checkpoint}; run `omnialign train` first")
    params, _ = load_checkpoint(paths.checkpoint)
    report = evaluate(params, dataset, cfg.eval)
    paths.ensure(paths.metrics_dir)
    _write_json(paths.metrics_dir / "metrics.json", _metrics_doc(report, cfg))
    metrics = report["metrics"]
    print(
        "eval: hit@1={hit_at_1:.4f} recall@5={recall_at_5:.4f} ndcg@5={ndcg_at_5:.4f}".format(
            **metrics
        )
    )
    print(f"eval: metrics at {paths.metrics_dir / 'metrics.json'}")
    return 0


def cmd_diagnose(cfg: RunConfig, paths: _Paths) -> int:
    dataset = _load_dataset_or_fail(paths, cfg)
    if not paths.checkpoint.exists():
        raise ConfigError(f"no checkpoint at {paths.checkpoint}; run `omnialign train` first")
    params, _ = load_checkpoint(paths.checkpoint)
    opts = cfg.diagnose
    rows = dataset.eval[: opts.queries]
    if len(rows) < 2:
        raise ConfigError("diagnose needs at least 2 eval tuples")
    queries = [t.query for t in rows]
    targets = [t.positive for t in rows]
    for t in rows:
        targets.extend(t.hard_negatives)
    targets = targets[: opts.targets]
    query_emb, _ = encode_batch(params, queries)
    target_emb, _ = encode_batch(params, targets)

    runs = [(query_emb, target_emb)]
    labels = ["model/query", "model/target"]
    if opts.compare_checkpoint is not None:
        other_params, _ = load_checkpoint(opts.compare_checkpoint)
        other_q, _ = encode_batch(other_params, queries)
        other_t, _ = encode_batch(other_params, targets)
        runs.append((other_q, other_t))
        labels.extend(["compare/query", "compare/target"])

    overlap = pca_overlap(runs, labels)
    heat = covdiff_heatmap(
        query_emb, target_emb, opts.heatmap_dim, opts.projection_seed
    )
    digest = config_hash(cfg)
    paths.ensure(paths.diagnostics_dir)
    (paths.diagnostics_dir / "pca_points.csv").write_text(
        pca_points_to_csv(overlap, digest, cfg.seed), encoding="utf-8"
    )
    _write_json(paths.diagnostics_dir / "ellipses.json", ellipses_to_json(overlap, digest, cfg.seed))
    (paths.diagnostics_dir / "heatmap.csv").write_text(
        heatmap_to_csv(heat, digest, cfg.seed), encoding="utf-8"
    )
    summary = {
        "config_hash": digest,
        "seed": cfg.seed,
        "num_queries": len(queries),
        "num_targets": len(targets),
        "centroid_gap": centroid_gap(query_emb, target_emb),
        "covariance_gap": covariance_gap(query_emb, target_emb),
        "heatmap_frobenius": heat.frobenius,
    }
    _write_json(paths.diagnostics_dir / "summary.json", summary)
    if opts.svg:
        (paths.diagnostics_dir / "overlay.svg").write_text(
            overlay_to_svg(overlap, digest, cfg.seed), encoding="utf-8"
        )
    print(
        f"diagnose: centroid_gap={summary['centroid_gap']:.6f} "
        f"covariance_gap={summary['covariance_gap']:.6f} "
        f"heatmap_frobenius={summary['heatmap_frobenius']:.6f}"
    )
    print(f"diagnose: artifacts in {paths.diagnostics_dir}")
    return 0


def cmd_gradcheck(cfg: RunConfig, paths: _Paths) -> int:
    opts = cfg.gradcheck
    world = WorldConfig(
        latent_dim=cfg.world.latent_dim,
        embed_dim=opts.embed_dim,
        feature_dims=cfg.world.feature_dims,
        noise_scales=cfg.world.noise_scales,
        anisotropy=cfg.world.anisotropy,
        hard_negative_closeness=cfg.world.hard_negative_closeness,
        pairs=opts.pairs,
        hard_negatives=opts.hard_negatives,
        eval_fraction=cfg.world.eval_fraction,
        composition_weights=cfg.world.composition_weights,
    )
    train_cfg = dataclasses.replace(
        cfg.train,
        batch_size=opts.batch_size,
        hard_negatives=opts.hard_negatives,
        toggles=cfg.train.toggles,
    )
    results = []
    worst = 0.0
    for offset in range(opts.seeds):
        seed = cfg.seed + offset
        dataset = generate_dataset(world, seed)
        params = init_params(world, seed, cfg.train.tau_init)
        batch = dataset.train[: opts.batch_size]
        error = finite_diff_check(
            batch,
            params,
            step=0,
            config=train_cfg,
            step_size=opts.step_size,
            coordinate_fraction=opts.coordinate_fraction,
            seed=seed,
        )
        results.append({"seed": seed, "max_relative_error": error})
        worst = max(worst, error)
        print(f"gradcheck: seed={seed} max_relative_error={error:.3e}")
    passed = worst <= opts.tolerance
    paths.ensure(paths.metrics_dir)
    _write_json(
        paths.metrics_dir / "gradcheck.json",
        {
            "config_hash": config_hash(cfg),
            "seed": cfg.seed,
            "tolerance": opts.tolerance,
            "results": results,
            "max_relative_error": worst,
            "passed": passed,
        },
    )
    print(f"gradcheck: max={worst:.3e} tolerance={opts.tolerance:.1e} -> {'pass' if passed else 'FAIL'}")
    return 0 if passed else 1


def cmd_ablate(cfg: RunConfig, paths: _Paths) -> int:
    dataset = _ensure_dataset(paths, cfg)
    digest = config_hash(cfg)
    rows = []
    for name, toggles in ABLATION_VARIANTS:
        train_cfg = dataclasses.replace(cfg.train, toggles=toggles)
        base = paths.root / "ablate" / name
        result = _train_once(
            dataset,
            cfg,
            train_cfg,
            base / "logs" / "steps.jsonl",
            base / "ckpt" / "checkpoint.json",
        )
        report = evaluate(result.params, dataset, cfg.eval)
        _write_json(base / "metrics.json", _metrics_doc(report, cfg))
        rows.append(_metrics_row(name, report))
        print(
            f"ablate[{name}]: hit@1={report['metrics']['hit_at_1']:.4f} "
            f"covariance_gap={report['diagnostics']['covariance_gap']:.4f}"
        )
    paths.ensure(paths.metrics_dir)
    (paths.metrics_dir / "ablation.csv").write_text(
        _rows_to_csv(rows, digest, cfg.seed), encoding="utf-8"
    )
    _write_json(
        paths.metrics_dir / "ablation.json",
        {"config_hash": digest, "seed": cfg.seed, "rows": rows},
    )
    print(f"ablate: table at {paths.metrics_dir / 'ablation.csv'}")
    return 0


def cmd_sweep(cfg: RunConfig, paths: _Paths) -> int:
    grid = cfg.sweep.grid
    if not grid:
        raise ConfigError(
            f"sweep.grid is empty; provide values for any of {SWEEPABLE}"
        )
    dataset = _ensure_dataset(paths, cfg)
    validation = Dataset(
        dataset.train,
        dataset.eval[: cfg.sweep.validation_tuples],
        dataset.config,
        dataset.seed,
    )
    keys = sorted(grid)
    digest = config_hash(cfg)
    rows = []
    for index, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        assignment = dict(zip(keys, combo))
        typed = {
            k: int(v) if k == "t0" else float(v) for k, v in assignment.items()
        }
        try:
            train_cfg = dataclasses.replace(cfg.train, **typed)
        except ContractViolation as exc:
            raise ConfigError(f"sweep point {assignment} is invalid: {exc}") from exc
        base = paths.root / "sweep" / f"point_{index:03d}"
        result = _train_once(
            validation,
            cfg,
            train_cfg,
            base / "logs" / "steps.jsonl",
            base / "ckpt" / "checkpoint.json",
        )
        report = evaluate(result.params, validation, cfg.eval)
        _write_json(base / "metrics.json", _metrics_doc(report, cfg))
        row = {"point": index}
        row.update({k: assignment[k] for k in keys})
        for col in _METRIC_COLUMNS:
            source = "metrics" if col in report["metrics"] else "diagnostics"
            row[col] = report[source][col]
        rows.append(row)
        print(
            f"sweep[point_{index:03d}] {assignment}: "
            f"hit@1={report['metrics']['hit_at_1']:.4f}"
        )
    paths.ensure(paths.metrics_dir)
    (paths.metrics_dir / "sweep.csv").write_text(
        _rows_to_csv(rows, digest, cfg.seed), encoding="utf-8"
    )
    _write_json(
        paths.metrics_dir / "sweep.json",
        {
            "config_hash": digest,
            "seed": cfg.seed,
            "grid": {k: list(v) for k, v in grid.items()},
            "validation_tuples": len(validation.eval),
            "rows": rows,
        },
    )
    print(f"sweep: {len(rows)} points, table at {paths.metrics_dir / 'sweep.csv'}")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.set, args.seed)
        paths = _Paths(args.out)
        return _COMMANDS[args.command](cfg, paths)
    except (ConfigError, ContractViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalFailureError, DegenerateBatchError, DegenerateEmbeddingError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
