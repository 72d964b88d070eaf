"""Held-out metrics, the full alternating training loop, and sweep reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    DivergenceError,
    HyperParams,
    NotPositiveDefiniteError,
    SymmetricSparse,
    latent_objective,
)
from .prior import low_rank_factor
from .precision import theta_phase
from .sgd import EpochSchedule, init_factors, run_latent_phase

log = logging.getLogger(__name__)

_METRIC_SLACK = 1e-12  # rounding guard for the rmse >= mae invariant


def rmse(pairs):
    """Root mean square error over (predicted, actual) pairs."""
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("rmse of an empty pair list")
    return float(np.sqrt(np.mean(np.square(arr[:, 0] - arr[:, 1]))))


def mae(pairs):
    """Mean absolute error over (predicted, actual) pairs."""
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mae of an empty pair list")
    return float(np.mean(np.abs(arr[:, 0] - arr[:, 1])))


def config_fingerprint(params, dataset_id, extra=None):
    """Stable hash of hyperparameters + dataset identity (+ extras)."""
    payload = {"params": params.to_dict(), "dataset": dataset_id}
    if extra:
        payload["extra"] = extra
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    mae: float
    num_test_ratings: int
    cold_start_fallbacks: int
    fingerprint: str = ""

    def __post_init__(self):
        if self.rmse < self.mae - _METRIC_SLACK * (1.0 + self.mae):
            raise ValueError(f"rmse {self.rmse} < mae {self.mae} breaks the power-mean bound")
        if not 0 <= self.cold_start_fallbacks <= self.num_test_ratings:
            raise ValueError("fallback count inconsistent with test size")


def predict_ratings(U, V, users, items, train, bounds):
    """Clamped predictions with global-mean fallback for users/items that
    have no training ratings. Returns (predictions, fallback_count)."""
    users = np.asarray(users)
    items = np.asarray(items)
    preds = np.einsum("ij,ij->i", U[users], V[items])
    trained_user = train.user_counts() > 0
    trained_item = train.item_counts() > 0
    known = trained_user[users] & trained_item[items]
    if not known.all():
        preds = np.where(known, preds, train.global_mean())
    lo, hi = bounds
    return np.clip(preds, lo, hi), int(np.count_nonzero(~known))


def evaluate_model(U, V, train, eval_set, params, dataset_id=""):
    """Score a model on held-out ratings (clamped, cold-start fallback)."""
    if not len(eval_set):
        raise ValueError("empty evaluation set")
    preds, fallbacks = predict_ratings(
        U, V, eval_set.users, eval_set.items, train, params.bounds
    )
    pairs = np.column_stack([preds, eval_set.values])
    return MetricReport(
        rmse=rmse(pairs),
        mae=mae(pairs),
        num_test_ratings=len(eval_set),
        cold_start_fallbacks=fallbacks,
        fingerprint=config_fingerprint(params, dataset_id),
    )


@dataclass
class OuterIteration:
    """Diagnostics for one outer alternation."""

    iteration: int
    objective_before_sgd: float
    objective_after_sgd: float
    val_rmse: float | None
    val_mae: float | None
    theta_sparsity: float
    admm_residual: float | None
    quad_objective_init: float | None
    quad_objective_final: float | None


@dataclass
class TrainResult:
    U: np.ndarray
    V: np.ndarray
    theta: SymmetricSparse
    best_iteration: int
    trace: list
    fingerprint: str


def train_prmf(train, validation, sigma, params, *, dataset_id="", x_factor=None):
    """Alternate the latent-factor phase and the dependency-matrix phase.

    Runs ``max_iter`` outer iterations of T SGD epochs followed by the
    ADMM dependency update, recording validation RMSE after each; the
    returned factors/theta are from the best-validation iteration (the
    final one when no validation ratings are given).

    With ``alpha == 0`` the coupling is inert: the dependency phase is
    skipped and theta is the zero matrix, which reduces training to plain
    factor SGD under the identical epoch protocol.
    """
    m = train.num_users
    if params.beta > 0:
        if x_factor is not None:
            X = x_factor
        elif sigma is not None:
            X = low_rank_factor(sigma, params.d)
        else:
            raise ValueError("beta > 0 requires a prior covariance (or its factor)")
    else:
        if sigma is not None or x_factor is not None:
            raise ValueError("prior covariance given but beta == 0")
        X = None

    U, V = init_factors(m, train.num_items, params.d, params.seed)
    coupled = params.alpha > 0
    theta = SymmetricSparse.identity(m) if coupled else SymmetricSparse(m)

    has_validation = validation is not None and len(validation) > 0
    best = None
    trace = []
    for it in range(params.max_iter):
        obj_before = latent_objective(train, U, V, theta, params)
        schedule = EpochSchedule(params.sgd_epochs, params.learn_rate)
        run_latent_phase(
            train, U, V, theta, params, schedule,
            epoch_offset=it * params.sgd_epochs,
        )
        obj_after = latent_objective(train, U, V, theta, params)

        if coupled:
            theta, diag = theta_phase(U, X, params, theta_init=theta)
            admm_resid = diag.final_residual
            quad_init, quad_final = diag.objective_init, diag.objective_final
        else:
            admm_resid = quad_init = quad_final = None

        if has_validation:
            report = evaluate_model(U, V, train, validation, params, dataset_id)
            val_rmse, val_mae = report.rmse, report.mae
        else:
            val_rmse = val_mae = None

        trace.append(OuterIteration(
            iteration=it,
            objective_before_sgd=obj_before,
            objective_after_sgd=obj_after,
            val_rmse=val_rmse,
            val_mae=val_mae,
            theta_sparsity=theta.sparsity(),
            admm_residual=admm_resid,
            quad_objective_init=quad_init,
            quad_objective_final=quad_final,
        ))
        log.info(
            "outer iter %d: objective %.4f -> %.4f, val rmse %s, theta sparsity %.4f",
            it, obj_before, obj_after,
            f"{val_rmse:.4f}" if val_rmse is not None else "n/a",
            theta.sparsity(),
        )

        if not has_validation or best is None or val_rmse < best[0]:
            best = (val_rmse, it, U.copy(), V.copy(), theta)

    _, best_it, bU, bV, btheta = best
    return TrainResult(
        U=bU, V=bV, theta=btheta, best_iteration=best_it, trace=trace,
        fingerprint=config_fingerprint(params, dataset_id),
    )


@dataclass
class GammaPoint:
    gamma: float
    sparsity: float | None
    rmse: float | None
    mae: float | None
    error: str | None = None


def gamma_sweep(train, validation, test, sigma, params, gamma_grid, *, dataset_id=""):
    """One full training run per grid value, shared seed and splits.

    Individual failures are recorded on their grid point and the sweep
    continues.
    """
    grid = list(gamma_grid)
    if not grid:
        raise ValueError("empty gamma grid")
    points = []
    for g in grid:
        point_params = dataclasses.replace(params, gamma=float(g))
        try:
            result = train_prmf(
                train, validation, sigma, point_params, dataset_id=dataset_id
            )
            report = evaluate_model(
                result.U, result.V, train, test, point_params, dataset_id
            )
            points.append(GammaPoint(
                gamma=float(g),
                sparsity=result.theta.sparsity(),
                rmse=report.rmse,
                mae=report.mae,
            ))
        except (DivergenceError, NotPositiveDefiniteError, ValueError) as exc:
            log.warning("gamma sweep point %g failed: %s", g, exc)
            points.append(GammaPoint(
                gamma=float(g), sparsity=None, rmse=None, mae=None, error=str(exc)
            ))
    return points


REPORT_COLUMNS = [
    "dataset", "method", "seed", "d", "lambda_u", "lambda_v", "alpha", "beta",
    "gamma", "learn_rate", "rho", "sgd_epochs", "admm_iters", "max_iter",
    "rmse", "mae", "theta_sparsity", "cold_start_fallbacks", "num_test_ratings",
]


@dataclass
class RunRow:
    """One training run's report row. Wall time is tracked separately from
    the CSV so reruns stay byte-identical."""

    dataset: str
    method: str
    params: HyperParams
    report: MetricReport
    theta_sparsity: float
    wall_time: float = 0.0

    def as_csv_values(self):
        p = self.params
        return [
            self.dataset, self.method, p.seed, p.d, p.lambda_u, p.lambda_v,
            p.alpha, p.beta, p.gamma, p.learn_rate, p.rho, p.sgd_epochs,
            p.admm_iters, p.max_iter, self.report.rmse, self.report.mae,
            self.theta_sparsity, self.report.cold_start_fallbacks,
            self.report.num_test_ratings,
        ]


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report_csv(rows, path):
    """Deterministic report CSV: fixed column order, repr-formatted floats."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(v) for v in row.as_csv_values()])


def write_sweep_csv(points, path, curve_path=None):
    """Full sweep rows, plus an optional plot-ready gamma/sparsity/rmse CSV."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["gamma", "sparsity", "rmse", "mae", "error"])
        for pt in points:
            writer.writerow([
                _fmt(pt.gamma),
                "" if pt.sparsity is None else _fmt(pt.sparsity),
                "" if pt.rmse is None else _fmt(pt.rmse),
                "" if pt.mae is None else _fmt(pt.mae),
                pt.error or "",
            ])
    if curve_path is not None:
        with open(curve_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["gamma", "sparsity", "rmse"])
            for pt in points:
                if pt.error is None:
                    writer.writerow([_fmt(pt.gamma), _fmt(pt.sparsity), _fmt(pt.rmse)])
