"""Command-line surface: prepare / train / evaluate / sweep.

Every command is driven by a JSON config file with flag overrides taking
precedence; the effective config is written next to the outputs so any
report can be reproduced from that file alone. All randomness flows from
the config's seed list.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .checkpoint import TrainedModel, load_checkpoint, read_container, save_checkpoint, write_container
from .core import DivergenceError, HyperParams, SparseRatings
from .ingest import filter_min_item_ratings, parse_ratings, parse_social, split
from .prior import CovarianceSpec, build_sigma, low_rank_factor

log = logging.getLogger(__name__)

METHODS = ("pmf", "prmf", "prmf-imp", "prmf-exp")
_METHOD_COV_MODE = {
    "pmf": "none",
    "prmf": "none",
    "prmf-imp": "implicit-dense",
    "prmf-exp": "explicit-masked",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    ratings_path: str
    dataset_format: str = "tsv"
    dataset_name: str = ""
    social_path: str | None = None
    method: str = "pmf"
    params: HyperParams = field(default_factory=HyperParams)
    train_fraction: float = 0.8
    validation_fraction: float = 0.1
    min_item_ratings: int = 0
    filter_after_split: bool = False
    seeds: tuple = (0,)
    gamma_grid: tuple = ()
    jobs: int = 1
    output_dir: str = "runs/out"
    min_overlap: int = 2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "prmf-exp" and not self.social_path:
            raise ConfigError("method prmf-exp requires a social edges path")
        if self.method == "prmf" and self.params.beta != 0:
            raise ConfigError("plain prmf forces beta=0; set beta to 0 or use prmf-imp/prmf-exp")
        if self.method in ("prmf-imp", "prmf-exp") and self.params.beta <= 0:
            raise ConfigError(f"method {self.method} requires beta > 0")
        if self.method == "pmf" and self.params.alpha != 0:
            # the coupling weight is inert for the factor-only baseline
            self.params = dataclasses.replace(self.params, alpha=0.0)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if not self.dataset_name:
            self.dataset_name = Path(self.ratings_path).stem

    @property
    def needs_sigma(self):
        return self.method in ("prmf-imp", "prmf-exp")

    def dataset_id(self):
        return f"{self.dataset_name}:{self.dataset_format}"

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["params"] = self.params.to_dict()
        d["seeds"] = list(self.seeds)
        d["gamma_grid"] = list(self.gamma_grid)
        return d


def load_config(path, overrides=None):
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    dataset = raw.get("dataset", {})
    kwargs = {
        "ratings_path": dataset.get("ratings", raw.get("ratings_path")),
        "dataset_format": dataset.get("format", "tsv"),
        "dataset_name": dataset.get("name", ""),
        "social_path": dataset.get("social"),
        "min_item_ratings": dataset.get("min_item_ratings", 0),
        "filter_after_split": dataset.get("filter_after_split", False),
        "method": raw.get("method", "pmf"),
        "train_fraction": raw.get("train_fraction", 0.8),
        "validation_fraction": raw.get("validation_fraction", 0.1),
        "seeds": tuple(raw.get("seeds", [0])),
        "gamma_grid": tuple(raw.get("gamma_grid", [])),
        "jobs": raw.get("jobs", 1),
        "output_dir": raw.get("output_dir", "runs/out"),
        "min_overlap": raw.get("covariance", {}).get("min_overlap", 2),
    }
    hp = dict(raw.get("hyperparams", {}))
    overrides = overrides or {}
    if overrides.get("dataset_format"):
        kwargs["dataset_format"] = overrides["dataset_format"]
    if overrides.get("method"):
        kwargs["method"] = overrides["method"]
    if overrides.get("seed") is not None:
        kwargs["seeds"] = (overrides["seed"],)
    if overrides.get("jobs") is not None:
        kwargs["jobs"] = overrides["jobs"]
    if overrides.get("output_dir"):
        kwargs["output_dir"] = overrides["output_dir"]
    if overrides.get("gamma") is not None:
        hp["gamma"] = overrides["gamma"]
    if kwargs["ratings_path"] is None:
        raise ConfigError(f"{path}: missing dataset.ratings")
    try:
        kwargs["params"] = HyperParams(**hp)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad hyperparams: {exc}") from exc
    return RunConfig(**kwargs)


def _write_effective_config(config, out_dir):
    path = out_dir / "config.effective.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _splits_path(out_dir, seed):
    return out_dir / "prepared" / f"seed{seed}.splits.bin"


def _sigma_path(out_dir, seed):
    return out_dir / "prepared" / f"seed{seed}.sigma.bin"


def _splits_to_arrays(splits):
    arrays = {}
    for name, part in (("train", splits.train), ("val", splits.validation),
                       ("test", splits.test)):
        arrays[f"{name}_users"] = part.users
        arrays[f"{name}_items"] = part.items
        arrays[f"{name}_values"] = part.values
    return arrays


def _ratings_from_arrays(meta, arrays, name):
    return SparseRatings(
        meta["m"], meta["n"],
        arrays[f"{name}_users"], arrays[f"{name}_items"], arrays[f"{name}_values"],
    )


def load_splits(out_dir, seed):
    meta, arrays = read_container(_splits_path(Path(out_dir), seed), kind="splits")
    return (
        _ratings_from_arrays(meta, arrays, "train"),
        _ratings_from_arrays(meta, arrays, "val"),
        _ratings_from_arrays(meta, arrays, "test"),
        meta,
    )


def _drop_items(ratings, keep_mask):
    keep = keep_mask[ratings.items]
    return SparseRatings(
        ratings.num_users, ratings.num_items,
        ratings.users[keep], ratings.items[keep], ratings.values[keep],
    )


def cmd_prepare(config):
    """Parse, filter, split and (for prior-based methods) cache the prior
    covariance and its factor. Idempotent for a fixed config."""
    out_dir = Path(config.output_dir)
    (out_dir / "prepared").mkdir(parents=True, exist_ok=True)
    _write_effective_config(config, out_dir)

    records = parse_ratings(config.ratings_path, config.dataset_format)
    if not config.filter_after_split and config.min_item_ratings > 0:
        records = filter_min_item_ratings(records, config.min_item_ratings)

    prep_key = ev.config_fingerprint(
        config.params, config.dataset_id(),
        extra={
            "train_fraction": config.train_fraction,
            "validation_fraction": config.validation_fraction,
            "min_item_ratings": config.min_item_ratings,
            "filter_after_split": config.filter_after_split,
            "min_overlap": config.min_overlap,
            "method": config.method,
        },
    )

    for seed in config.seeds:
        splits_file = _splits_path(out_dir, seed)
        key = f"{prep_key}:{seed}"
        if splits_file.exists():
            meta, _ = read_container(splits_file, kind="splits")
            if meta.get("key") == key:
                log.info("prepare: reusing cached splits for seed %d", seed)
                _maybe_prepare_sigma(config, out_dir, seed, key, None)
                continue
        splits = split(records, config.train_fraction, config.validation_fraction, seed)
        train, validation, test = splits.train, splits.validation, splits.test
        if config.filter_after_split and config.min_item_ratings > 0:
            counts = np.zeros(len(splits.item_map), dtype=np.int64)
            for part in (train, validation, test):
                np.add.at(counts, part.items, 1)
            keep = counts >= config.min_item_ratings
            train, validation, test = (
                _drop_items(train, keep), _drop_items(validation, keep),
                _drop_items(test, keep),
            )
        meta = {
            "m": train.num_users,
            "n": train.num_items,
            "seed": seed,
            "key": key,
            "user_ids": list(splits.user_map.from_index),
            "item_ids": list(splits.item_map.from_index),
            "sizes": [len(train), len(validation), len(test)],
        }
        arrays = _splits_to_arrays(dataclasses.replace(
            splits, train=train, validation=validation, test=test
        ))
        write_container(splits_file, "splits", meta, arrays)
        log.info("prepare: wrote splits for seed %d: sizes %s", seed, meta["sizes"])
        _maybe_prepare_sigma(config, out_dir, seed, key, (train, splits.user_map))
    return 0


def _maybe_prepare_sigma(config, out_dir, seed, key, train_and_map):
    if not config.needs_sigma:
        return
    sigma_file = _sigma_path(out_dir, seed)
    if sigma_file.exists():
        meta, _ = read_container(sigma_file, kind="sigma")
        if meta.get("key") == key:
            log.info("prepare: reusing cached covariance for seed %d", seed)
            return
    if train_and_map is None:
        train, val, test, meta = load_splits(out_dir, seed)
        user_ids = meta["user_ids"]
    else:
        train, user_map = train_and_map
        user_ids = list(user_map.from_index)
    social = None
    if config.method == "prmf-exp":
        id_map = _IdLookup(user_ids)
        social = parse_social(config.social_path, id_map)
    spec = CovarianceSpec(_METHOD_COV_MODE[config.method], config.min_overlap)
    started = time.perf_counter()
    sigma = build_sigma(train, social, spec)
    x = low_rank_factor(sigma, config.params.d)
    log.info(
        "prepare: built covariance for seed %d in %.1fs (nnz=%d)",
        seed, time.perf_counter() - started, sigma.entry_count,
    )
    write_container(
        sigma_file, "sigma",
        {"m": sigma.size, "seed": seed, "key": key, "d": config.params.d},
        {"rows": sigma.rows, "cols": sigma.cols, "vals": sigma.vals, "x": x},
    )


class _IdLookup:
    """Minimal id-map facade over a stored external-id list."""

    def __init__(self, external_ids):
        self.to_index = {ext: i for i, ext in enumerate(external_ids)}

    def index(self, external_id):
        return self.to_index[external_id]


def _load_sigma_factor(out_dir, seed):
    meta, arrays = read_container(_sigma_path(Path(out_dir), seed), kind="sigma")
    return arrays["x"]


def _train_one_seed(config, out_dir, seed):
    params = dataclasses.replace(config.params, seed=seed)
    if config.method == "pmf":
        params = dataclasses.replace(params, alpha=0.0, beta=0.0, gamma=0.0)
    if config.method == "prmf":
        params = dataclasses.replace(params, beta=0.0)
    train, validation, test, meta = load_splits(out_dir, seed)
    x_factor = _load_sigma_factor(out_dir, seed) if config.needs_sigma else None
    started = time.perf_counter()
    result = ev.train_prmf(
        train, validation if len(validation) else None, None, params,
        dataset_id=config.dataset_id(), x_factor=x_factor,
    )
    wall = time.perf_counter() - started
    report = ev.evaluate_model(result.U, result.V, train, test, params,
                               config.dataset_id())
    model = TrainedModel(
        U=result.U, V=result.V, theta=result.theta,
        user_ids=meta["user_ids"], item_ids=meta["item_ids"],
        params=params, fingerprint=result.fingerprint,
    )
    ckpt = out_dir / "checkpoints" / f"{config.method}-seed{seed}.ckpt"
    save_checkpoint(ckpt, model)
    row = ev.RunRow(
        dataset=config.dataset_name, method=config.method, params=params,
        report=report, theta_sparsity=result.theta.sparsity(), wall_time=wall,
    )
    log.info(
        "train: method=%s seed=%d rmse=%.4f mae=%.4f (%.1fs, best iter %d)",
        config.method, seed, report.rmse, report.mae, wall, result.best_iteration,
    )
    return row


def cmd_train(config):
    """Train one model per seed, writing checkpoints and the report CSV."""
    out_dir = Path(config.output_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    _write_effective_config(config, out_dir)
    seeds = list(config.seeds)
    try:
        if config.jobs > 1:
            with concurrent.futures.ThreadPoolExecutor(config.jobs) as pool:
                rows = list(pool.map(
                    lambda s: _train_one_seed(config, out_dir, s), seeds
                ))
        else:
            rows = [_train_one_seed(config, out_dir, s) for s in seeds]
    except DivergenceError as exc:
        log.error("training diverged (phase=%s, iteration=%s): %s",
                  exc.phase, exc.iteration, exc)
        return 1
    ev.write_report_csv(rows, out_dir / "report.csv")
    with open(out_dir / "timings.txt", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(f"method={row.method} seed={row.params.seed} "
                     f"wall_time={row.wall_time:.3f}s\n")
    return 0


def cmd_evaluate(config, checkpoint_path=None):
    """Re-score saved checkpoints against the test split."""
    out_dir = Path(config.output_dir)
    if checkpoint_path is not None:
        paths = [Path(checkpoint_path)]
    else:
        paths = [out_dir / "checkpoints" / f"{config.method}-seed{s}.ckpt"
                 for s in config.seeds]
    rows = []
    for path in paths:
        model = load_checkpoint(path)
        seed = model.params.seed
        train, validation, test, _meta = load_splits(out_dir, seed)
        report = ev.evaluate_model(model.U, model.V, train, test, model.params,
                                   config.dataset_id())
        rows.append(ev.RunRow(
            dataset=config.dataset_name, method=config.method,
            params=model.params, report=report,
            theta_sparsity=model.theta.sparsity(),
        ))
        print(f"{path.name}: rmse={report.rmse:.6f} mae={report.mae:.6f} "
              f"fallbacks={report.cold_start_fallbacks}")
    ev.write_report_csv(rows, out_dir / "evaluation.csv")
    return 0


def cmd_sweep(config, gamma_grid=None):
    """One training run per sparsity-weight grid point, on the first seed."""
    grid = list(gamma_grid) if gamma_grid is not None else list(config.gamma_grid)
    if not grid:
        raise ConfigError("sweep requires a nonempty gamma grid")
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_effective_config(config, out_dir)
    seed = config.seeds[0]
    params = dataclasses.replace(config.params, seed=seed)
    if config.method == "prmf":
        params = dataclasses.replace(params, beta=0.0)
    train, validation, test, _meta = load_splits(out_dir, seed)
    x_factor = _load_sigma_factor(out_dir, seed) if config.needs_sigma else None
    if config.needs_sigma:
        points = _sweep_with_factor(train, validation, test, x_factor, params,
                                    grid, config)
    else:
        points = ev.gamma_sweep(train, validation if len(validation) else None,
                                test, None, params, grid,
                                dataset_id=config.dataset_id())
    ev.write_sweep_csv(points, out_dir / "sweep.csv", out_dir / "sweep_curve.csv")
    for pt in points:
        status = f"rmse={pt.rmse:.6f} sparsity={pt.sparsity:.4f}" if pt.error is None \
            else f"failed: {pt.error}"
        print(f"gamma={pt.gamma:g}: {status}")
    return 0


def _sweep_with_factor(train, validation, test, x_factor, params, grid, config):
    points = []
    validation = validation if len(validation) else None
    for g in grid:
        point_params = dataclasses.replace(params, gamma=float(g))
        try:
            result = ev.train_prmf(train, validation, None, point_params,
                                   dataset_id=config.dataset_id(), x_factor=x_factor)
            report = ev.evaluate_model(result.U, result.V, train, test,
                                       point_params, config.dataset_id())
            points.append(ev.GammaPoint(float(g), result.theta.sparsity(),
                                        report.rmse, report.mae))
        except (DivergenceError, ValueError) as exc:
            log.warning("sweep point %g failed: %s", g, exc)
            points.append(ev.GammaPoint(float(g), None, None, None, str(exc)))
    return points


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="prmf",
        description="Rating-prediction trainer with a learned sparse "
                    "user-dependency matrix",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("prepare", cmd_prepare), ("train", cmd_train),
                     ("evaluate", cmd_evaluate), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--dataset-format", choices=("tsv", "double-colon"))
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--gamma", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--output-dir")
        if name == "evaluate":
            p.add_argument("--checkpoint")
        if name == "sweep":
            p.add_argument("--gamma-grid", help="comma-separated grid values")
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else
        logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {
        "dataset_format": args.dataset_format,
        "method": args.method,
        "gamma": args.gamma,
        "seed": args.seed,
        "jobs": args.jobs,
        "output_dir": args.output_dir,
    }
    try:
        config = load_config(args.config, overrides)
        if args.func is cmd_evaluate:
            return cmd_evaluate(config, args.checkpoint)
        if args.func is cmd_sweep:
            grid = None
            if getattr(args, "gamma_grid", None):
                grid = [float(x) for x in args.gamma_grid.split(",") if x.strip()]
            return cmd_sweep(config, grid)
        return args.func(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
