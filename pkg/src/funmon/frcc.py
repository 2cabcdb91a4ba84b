"""Covariate-adjusted monitoring via function-on-function regression.

A functional response is regressed on a vector of functional covariates in
score space (one least-squares ratio per score pair), and the functional
residuals, plain or studentized, are monitored with the standard T2/SPE
machinery.  Studentization divides the residual pointwise by its prediction
standard deviation, which inflates with the covariate leverage, so extreme
but properly explained covariates do not trigger spurious signals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import evaluate_design, project_values
from .errors import DegenerateCovariateDirection, InvalidConfiguration
from .mfpca import (
    FunctionalSample,
    MfpcaModel,
    StandardizationModel,
    fit_mfpca,
    fit_standardization,
    scores,
    select_L,
    standardize,
)
from .monitoring import MonitoringModel, MonitoringOutcome, phase1_from_split, phase2_evaluate, split_indices

__all__ = [
    "FofModel",
    "FrccModel",
    "fit_fof",
    "predict",
    "residual",
    "studentized_residual",
    "frcc_phase1",
    "frcc_phase2",
]


@dataclass
class FofModel:
    """Fitted function-on-function linear model in score space."""

    x_mfpca: MfpcaModel
    y_fpca: MfpcaModel
    b: np.ndarray  # (L, M) score-regression coefficients
    resid_var_coeffs: np.ndarray  # (K_y,) pointwise residual variance on Y basis
    sigma_eps: np.ndarray  # (M, M) covariance of score residuals
    n_train: int
    L: int
    M: int
    var_floor: float


def fit_fof(X: FunctionalSample, Y: FunctionalSample, L=None, M=None,
            variance_fraction: float = 0.8) -> FofModel:
    """Fit the score-space regression of a response sample on a covariate sample.

    Both samples must already be centered and scaled componentwise.  Each
    coefficient is the least-squares ratio sum(sx*sy)/sum(sx^2) of in-sample
    score moments; the residual variance function and the score-residual
    covariance feed the studentized residual.
    """
    if Y.p != 1:
        raise InvalidConfiguration("the response sample must have a single component")
    if X.n != Y.n:
        raise InvalidConfiguration("covariates and response need matching n")

    x_mfpca = fit_mfpca(X)
    y_fpca = fit_mfpca(Y)
    if L is None:
        L = select_L(x_mfpca, variance_fraction)
    if M is None:
        M = select_L(y_fpca, variance_fraction)
    L = min(int(L), x_mfpca.n_components)
    M = min(int(M), y_fpca.n_components)

    sx = scores(X.coeffs, x_mfpca, L)  # (n, L)
    sy = scores(Y.coeffs, y_fpca, M)  # (n, M)
    energy = np.sum(sx * sx, axis=0)
    if np.any(energy <= 0):
        raise DegenerateCovariateDirection("a covariate score direction has zero energy")
    b = (sx.T @ sy) / energy[:, None]

    fitted = (sx @ b) @ y_fpca.eig_coeffs[:, :M].T
    resid = Y.coeffs - fitted
    basis_y = Y.basis
    grid = np.linspace(*basis_y.domain, max(200, 2 * basis_y.K))
    design = evaluate_design(basis_y, grid)
    resid_grid = resid @ design
    var_grid = resid_grid.var(axis=0, ddof=1)
    vmax = float(var_grid.max())
    floor = 1e-10 * vmax if vmax > 0 else 1e-10
    resid_var_coeffs = project_values(basis_y, grid, np.maximum(var_grid, floor))

    eps = sy - sx @ b
    eps_centered = eps - eps.mean(axis=0)
    sigma_eps = eps_centered.T @ eps_centered / (X.n - 1)
    return FofModel(
        x_mfpca=x_mfpca,
        y_fpca=y_fpca,
        b=b,
        resid_var_coeffs=resid_var_coeffs,
        sigma_eps=sigma_eps,
        n_train=X.n,
        L=L,
        M=M,
        var_floor=floor,
    )


def predict(x_row, model: FofModel) -> np.ndarray:
    """Predicted response coefficients for one standardized covariate row."""
    sx = scores(x_row, model.x_mfpca, model.L)
    return (sx @ model.b) @ model.y_fpca.eig_coeffs[:, : model.M].T


def residual(y_row, yhat_row) -> np.ndarray:
    """Plain functional residual, exact in coefficient space."""
    return np.asarray(y_row, dtype=float) - np.asarray(yhat_row, dtype=float)


def studentized_residual(y_row, yhat_row, x_scores, model: FofModel, grid_size: int = 200):
    """Residual scaled pointwise by its prediction standard deviation.

    The denominator combines the residual variance function with the
    regression estimation variance, which grows with the covariate leverage
    sum(sx^2 / eigenvalue); the estimation covariance is sigma_eps / n_train.
    Nonpositive denominators are floored and reported via the second return
    value.
    """
    basis_y = model.y_fpca.basis
    grid = np.linspace(*basis_y.domain, grid_size)
    design = evaluate_design(basis_y, grid)
    e_grid = (np.asarray(y_row, float) - np.asarray(yhat_row, float)) @ design
    var_grid = model.resid_var_coeffs @ design

    sx = np.asarray(x_scores, dtype=float)[: model.L]
    leverage = float(np.sum(sx * sx / model.x_mfpca.eigenvalues[: model.L]))
    psi = model.y_fpca.eig_coeffs[:, : model.M].T @ design  # (M, G)
    est_var = np.einsum("mg,mk,kg->g", psi, model.sigma_eps / model.n_train, psi)
    denom_sq = var_grid + est_var * leverage
    floored = bool(np.any(denom_sq < model.var_floor))
    denom = np.sqrt(np.maximum(denom_sq, model.var_floor))
    return project_values(basis_y, grid, e_grid / denom), floored


@dataclass
class FrccModel:
    """Phase I artifact for residual monitoring."""

    x_std: StandardizationModel
    y_std: StandardizationModel
    fof: FofModel
    monitor: MonitoringModel
    choice: str  # "plain" | "studentized"
    alpha_star: float
    # plumbing for raw-profile evaluation (set by the fitting pipeline)
    lambdas_x: np.ndarray | None = None
    lambdas_y: np.ndarray | None = None
    covariates: list | None = None
    response: str | None = None


def _residual_rows(zx, zy, fof, choice):
    yhat = (scores(zx, fof.x_mfpca, fof.L) @ fof.b) @ fof.y_fpca.eig_coeffs[:, : fof.M].T
    if choice == "plain":
        return zy - yhat
    rows = np.empty_like(zy)
    sx = scores(zx, fof.x_mfpca, fof.L)
    for i in range(zy.shape[0]):
        rows[i], _ = studentized_residual(zy[i], yhat[i], sx[i], fof)
    return rows


def frcc_phase1(
    X: FunctionalSample,
    Y: FunctionalSample,
    split: float = 0.7,
    alpha_star: float = 0.05,
    choice: str | None = None,
    variance_fraction: float = 0.8,
    seed=0,
    grid_size=None,
) -> FrccModel:
    """Fit the regression on the training part and residual limits on the tuning part.

    ``choice`` defaults to the studentized residual when the tuning set is
    small (< 100 observations) and to the plain residual otherwise.
    """
    if X.n != Y.n:
        raise InvalidConfiguration("covariates and response need matching n")
    train_idx, tune_idx = split_indices(X.n, split, seed)
    if choice is None:
        choice = "studentized" if tune_idx.size < 100 else "plain"
    if choice not in ("plain", "studentized"):
        raise InvalidConfiguration(f"unknown residual choice {choice!r}")

    x_std = fit_standardization(
        FunctionalSample(X.coeffs[train_idx], X.p, X.basis), grid_size
    )
    y_std = fit_standardization(
        FunctionalSample(Y.coeffs[train_idx], 1, Y.basis), grid_size
    )
    zx_train = standardize(X.coeffs[train_idx], x_std)
    zy_train = standardize(Y.coeffs[train_idx], y_std)
    fof = fit_fof(
        FunctionalSample(zx_train, X.p, X.basis),
        FunctionalSample(zy_train, 1, Y.basis),
        variance_fraction=variance_fraction,
    )

    zx_tune = standardize(X.coeffs[tune_idx], x_std)
    zy_tune = standardize(Y.coeffs[tune_idx], y_std)
    resid_train = _residual_rows(zx_train, zy_train, fof, choice)
    resid_tune = _residual_rows(zx_tune, zy_tune, fof, choice)
    monitor = phase1_from_split(
        FunctionalSample(resid_train, 1, Y.basis),
        FunctionalSample(resid_tune, 1, Y.basis),
        alpha_star=alpha_star,
        variance_fraction=variance_fraction,
        grid_size=grid_size,
    )
    return FrccModel(
        x_std=x_std,
        y_std=y_std,
        fof=fof,
        monitor=monitor,
        choice=choice,
        alpha_star=alpha_star,
    )


def frcc_phase2(x_row, y_row, model: FrccModel) -> MonitoringOutcome:
    """Residual-chart evaluation of one (covariate, response) pair."""
    zx = standardize(np.asarray(x_row, float), model.x_std)
    zy = standardize(np.asarray(y_row, float), model.y_std)
    resid_row = _residual_rows(zx[None, :], zy[None, :], model.fof, model.choice)[0]
    return phase2_evaluate(resid_row, model.monitor)
