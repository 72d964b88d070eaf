"""Rating prediction by matrix factorization with a jointly learned sparse
user-dependency precision matrix (alternating SGD / ADMM)."""

from .core import (
    DivergenceError,
    HyperParams,
    NotPositiveDefiniteError,
    ParseError,
    SparseRatings,
    SymmetricSparse,
    latent_objective,
    pmf_objective,
    predict,
    prmf_objective,
)
from .evaluate import (
    MetricReport,
    TrainResult,
    evaluate_model,
    gamma_sweep,
    mae,
    rmse,
    train_prmf,
)
from .ingest import IdMap, RawRecord, SocialEdges, filter_min_item_ratings, parse_ratings, parse_social, split
from .precision import admm_solve, soft_threshold, symmetrize, theta_phase, woodbury_apply
from .prior import CovarianceSpec, build_sigma, low_rank_factor, row_covariance
from .sgd import EpochSchedule, init_factors, pmf_train, run_latent_phase, sgd_step

__version__ = "0.1.0"

__all__ = [
    "CovarianceSpec",
    "DivergenceError",
    "EpochSchedule",
    "HyperParams",
    "IdMap",
    "MetricReport",
    "NotPositiveDefiniteError",
    "ParseError",
    "RawRecord",
    "SocialEdges",
    "SparseRatings",
    "SymmetricSparse",
    "TrainResult",
    "admm_solve",
    "build_sigma",
    "evaluate_model",
    "filter_min_item_ratings",
    "gamma_sweep",
    "init_factors",
    "latent_objective",
    "low_rank_factor",
    "mae",
    "parse_ratings",
    "parse_social",
    "pmf_objective",
    "pmf_train",
    "predict",
    "prmf_objective",
    "rmse",
    "row_covariance",
    "run_latent_phase",
    "sgd_step",
    "soft_threshold",
    "split",
    "symmetrize",
    "theta_phase",
    "train_prmf",
    "woodbury_apply",
]
