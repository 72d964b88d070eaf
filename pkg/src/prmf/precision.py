"""Sparse user-dependency estimation: l1-penalized quadratic solved by ADMM.

The quadratic subproblem minimizes tr(Theta^T C Theta) - tr(E Theta) +
tau ||Theta||_1 with C = U_hat U_hat^T a low-rank Gram matrix, E =
I - (lambda_u/alpha) C and tau = gamma/(d+beta). The Z-update's
(C/rho + I)^{-1} application goes through the low-rank inverse identity,
so no m x m inverse is ever formed; working iterates are dense m x m, the
returned matrix is sparse after symmetrization.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .core import DivergenceError, SymmetricSparse

log = logging.getLogger(__name__)


def soft_threshold(a, lam):
    """Entrywise shrink-toward-zero: a-lam above lam, a+lam below -lam,
    exact 0 in the dead zone."""
    if lam < 0:
        raise ValueError("threshold must be >= 0")
    a = np.asarray(a, dtype=np.float64)
    return np.where(a > lam, a - lam, np.where(a < -lam, a + lam, 0.0))


class WoodburyOperator:
    """Applies (U_hat U_hat^T / rho + I)^{-1} using the low-rank identity.

    Only the r x r core (I + U_hat^T U_hat / rho) is factorized, once; each
    apply costs O(m * r * c) for an m x c right-hand side.
    """

    def __init__(self, u_hat, rho):
        if rho <= 0:
            raise ValueError("rho must be > 0")
        u_hat = np.ascontiguousarray(u_hat, dtype=np.float64)
        r = u_hat.shape[1]
        core = np.eye(r) + (u_hat.T @ u_hat) / rho
        try:
            self._core_chol = scipy.linalg.cho_factor(core)
        except scipy.linalg.LinAlgError as exc:
            raise DivergenceError(
                f"low-rank core factorization failed (NaN contamination?): {exc}",
                phase="admm",
            ) from exc
        self.u_hat = u_hat
        self.rho = rho

    def apply(self, M):
        if self.u_hat.shape[1] == 0:
            return np.array(M, dtype=np.float64, copy=True)
        w = self.u_hat.T @ M
        return M - (self.u_hat @ scipy.linalg.cho_solve(self._core_chol, w)) / self.rho


def woodbury_apply(u_hat, rho, M):
    """(U_hat U_hat^T / rho + I)^{-1} @ M without forming any m x m matrix."""
    return WoodburyOperator(u_hat, rho).apply(M)


@dataclass
class AdmmResult:
    theta: np.ndarray          # Theta^K, unsymmetrized working output
    z: np.ndarray
    y: np.ndarray
    primal_residuals: np.ndarray  # ||Theta^t - Z^t||_F per iteration

    @property
    def final_residual(self):
        return float(self.primal_residuals[-1])


def _admm_params_tau(params):
    return params.gamma / (params.d + params.beta)


def admm_solve(u_hat, params, theta_init):
    """Run exactly K ADMM iterations on the l1-penalized quadratic.

    Per iteration: Theta = soft(Z - Y, tau/rho); Z = P(E/rho + Theta + Y)
    through the low-rank inverse; Y += Theta - Z. Z warm-starts from
    ``theta_init`` and Y starts at 0. No residual-based early stop; the
    residual trace is returned and logged.
    """
    m = u_hat.shape[0]
    if theta_init.shape != (m, m):
        raise ValueError("theta_init shape does not match u_hat rows")
    tau = _admm_params_tau(params)
    thresh = tau / params.rho
    wood = WoodburyOperator(u_hat, params.rho)
    E_over_rho = (np.eye(m) - (params.lambda_u / params.alpha) * (u_hat @ u_hat.T)) / params.rho
    Z = np.array(theta_init, dtype=np.float64, copy=True)
    Y = np.zeros((m, m))
    residuals = np.empty(params.admm_iters)
    theta = Z
    for t in range(params.admm_iters):
        theta = soft_threshold(Z - Y, thresh)
        Z = wood.apply(E_over_rho + theta + Y)
        Y = Y + theta - Z
        resid = float(np.linalg.norm(theta - Z))
        if not np.isfinite(resid):
            raise DivergenceError(
                f"non-finite ADMM iterate at iteration {t}", phase="admm", iteration=t
            )
        residuals[t] = resid
        if log.isEnabledFor(logging.DEBUG):
            log.debug(
                "admm iter=%d resid=%.6e l1=%.6e nnz=%d",
                t, resid, np.abs(theta).sum(), int(np.count_nonzero(theta)),
            )
    return AdmmResult(theta, Z, Y, residuals)


def symmetrize(theta_tilde):
    """Per-pair smaller-magnitude selection into canonical symmetric form.

    For every (i, k) the entry with smaller absolute value wins; on ties
    the (i, k) entry with i <= k is kept. Exact zeros are dropped from
    storage.
    """
    a = np.asarray(theta_tilde, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("square matrix required")
    r, c = np.triu_indices(a.shape[0])
    upper = a[r, c]
    lower = a[c, r]
    chosen = np.where(np.abs(upper) <= np.abs(lower), upper, lower)
    return SymmetricSparse(a.shape[0], r, c, chosen)


def clime_objective(theta, u_hat, lambda_ratio, tau):
    """The quadratic the ADMM minimizes: 0.5 tr(Theta^T C Theta) -
    tr(E Theta) + tau ||Theta||_1 with C = U_hat U_hat^T and E =
    I - lambda_ratio * C.

    Its optimality conditions are exactly the solver's fixed point
    (|C Theta - E| <= tau entrywise, with equality and matching sign on the
    support), which at tau=0 reduces to C Theta = E, the relaxed inverse
    relation the estimator targets.
    """
    ut_theta = u_hat.T @ theta
    quad = 0.5 * float(np.square(ut_theta).sum())
    tr_c_theta = float(np.einsum("ij,ij->", theta @ u_hat, u_hat))
    tr_e_theta = float(np.trace(theta)) - lambda_ratio * tr_c_theta
    return quad - tr_e_theta + tau * float(np.abs(theta).sum())


def build_u_hat(U, X, params):
    """Scaled factor stack whose Gram matrix approximates the quadratic's
    C term: U/sqrt(d) when no prior is used, else [U, sqrt(beta)*X] /
    sqrt(d+beta)."""
    if params.beta == 0:
        if X is not None:
            raise ValueError("prior factor X given but beta == 0")
        return U / np.sqrt(params.d)
    if X is None:
        raise ValueError("beta > 0 requires the prior factor X")
    if X.shape != U.shape:
        raise ValueError("prior factor X must be m x d like U")
    return np.hstack([U, np.sqrt(params.beta) * X]) / np.sqrt(params.d + params.beta)


@dataclass
class ThetaDiagnostics:
    primal_residuals: np.ndarray
    nonzero_count: int
    sparsity: float
    min_entry: float
    max_entry: float
    objective_init: float
    objective_final: float

    @property
    def final_residual(self):
        return float(self.primal_residuals[-1])


def theta_phase(U, X, params, theta_init=None):
    """Full dependency-matrix phase: build the scaled factor stack, run
    ADMM from ``theta_init`` (identity by default) and symmetrize.

    Returns (theta, diagnostics) with theta in canonical sparse symmetric
    form.
    """
    m = U.shape[0]
    u_hat = build_u_hat(U, X, params)
    if theta_init is None:
        theta_init = SymmetricSparse.identity(m)
    init_dense = theta_init.to_dense()
    result = admm_solve(u_hat, params, init_dense)
    theta = symmetrize(result.theta)
    tau = _admm_params_tau(params)
    lam_ratio = params.lambda_u / params.alpha
    diag = ThetaDiagnostics(
        primal_residuals=result.primal_residuals,
        nonzero_count=theta.entry_count,
        sparsity=theta.sparsity(),
        min_entry=float(theta.vals.min()) if theta.vals.size else 0.0,
        max_entry=float(theta.vals.max()) if theta.vals.size else 0.0,
        objective_init=clime_objective(init_dense, u_hat, lam_ratio, tau),
        objective_final=clime_objective(result.theta, u_hat, lam_ratio, tau),
    )
    log.info(
        "theta phase done: resid=%.3e sparsity=%.4f nnz=%d range=[%.3e, %.3e]",
        diag.final_residual, diag.sparsity, diag.nonzero_count,
        diag.min_entry, diag.max_entry,
    )
    return theta, diag
