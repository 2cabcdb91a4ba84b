"""Phase I fitting and Phase II evaluation of T2 and SPE control charts.

Phase I splits the reference sample into a training part (standardization,
MFPCA, retained-component selection) and a tuning part (empirical control
and contribution limits, Bonferroni-split across the two charts).  Phase II
scores an incoming observation against the frozen model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .basis import block_gram
from .errors import (
    DegenerateComponent,
    InsufficientSample,
    InvalidConfiguration,
    MissingComponent,
)
from .mfpca import (
    FunctionalSample,
    MfpcaModel,
    StandardizationModel,
    fit_mfpca,
    fit_standardization,
    select_L,
    standardize,
)
from .smoothing import DiscreteProfile, fit_penalized

__all__ = [
    "MonitoringModel",
    "MonitoringOutcome",
    "t2_statistic",
    "spe_statistic",
    "contributions",
    "empirical_limit",
    "split_indices",
    "phase1_fit",
    "phase1_from_split",
    "phase2_evaluate",
    "statistics_for_rows",
]


@dataclass
class MonitoringModel:
    """Frozen Phase I artifact: standardization + MFPCA + limits."""

    standardization: StandardizationModel
    mfpca: MfpcaModel
    cl_t2: float
    cl_spe: float
    contrib_limits_t2: np.ndarray  # (p,)
    contrib_limits_spe: np.ndarray  # (p,)
    alpha_star: float
    lambdas: np.ndarray | None = None  # smoothing weights reused in Phase II
    kind: str = "chart"


@dataclass
class MonitoringOutcome:
    """Chart statistics, signal flags and per-component diagnostics."""

    t2: float
    spe: float
    signal_t2: bool
    signal_spe: bool
    contrib_t2: np.ndarray
    contrib_spe: np.ndarray
    flagged_components: tuple
    obs_id: str | None = None
    context: dict = field(default_factory=dict)

    @property
    def signal(self) -> bool:
        return self.signal_t2 or self.signal_spe


def t2_statistic(score_values, eigenvalues) -> float:
    """Squared Mahalanobis distance of the projected scores."""
    s = np.asarray(score_values, dtype=float)
    e = np.asarray(eigenvalues, dtype=float)[: s.shape[-1]]
    if np.any(e <= 0):
        raise DegenerateComponent("retained eigenvalue is zero; reduce L")
    return float(np.sum(s * s / e, axis=-1))


def spe_statistic(z_row, zl_row, gram) -> float:
    """Integrated squared reconstruction error (metric quadratic form)."""
    diff = np.asarray(z_row, dtype=float) - np.asarray(zl_row, dtype=float)
    return float(diff @ gram @ diff)


def _component_stats(z_rows, model: MfpcaModel, L, blocks=None):
    """Vectorized T2/SPE and contributions; z_rows (n, d).

    ``blocks`` is a list of (slice, sub-metric) pairs; defaults to the p
    equal-width basis blocks of the model.
    """
    z = np.atleast_2d(np.asarray(z_rows, dtype=float))
    evals = model.eigenvalues[:L]
    if np.any(evals <= 0):
        raise DegenerateComponent("retained eigenvalue is zero; reduce L")
    s = z @ model.score_proj[:, :L]  # (n, L)
    t2 = np.sum(s * s / evals, axis=1)
    recon = s @ model.eig_coeffs[:, :L].T
    resid = z - recon
    n = z.shape[0]
    if blocks is None:
        K = model.basis.K
        blocks = [(slice(k * K, (k + 1) * K), model.basis.gram) for k in range(model.p)]
    p = len(blocks)
    c_t2 = np.empty((n, p))
    c_spe = np.empty((n, p))
    ratio = s / evals  # (n, L)
    for k, (sl, sub_metric) in enumerate(blocks):
        partial = z[:, sl] @ model.score_proj[sl, :L]  # per-block score share
        c_t2[:, k] = np.sum(ratio * partial, axis=1)
        rk = np.atleast_2d(resid[:, sl])
        c_spe[:, k] = np.einsum("ni,ij,nj->n", rk, np.atleast_2d(sub_metric), rk)
    spe = c_spe.sum(axis=1)
    return t2, spe, c_t2, c_spe


def contributions(z_row, model: MfpcaModel, L=None):
    """Per-component shares of T2 and SPE; both sum to the statistics."""
    L = model.L if L is None else int(L)
    _, _, c_t2, c_spe = _component_stats(z_row, model, L)
    return c_t2[0], c_spe[0]


def statistics_for_rows(z_rows, model: MfpcaModel, L=None):
    """(t2, spe, contrib_t2, contrib_spe) arrays for a matrix of rows."""
    L = model.L if L is None else int(L)
    return _component_stats(z_rows, model, L)


def empirical_limit(values, alpha: float) -> float:
    """Ceiling-rank empirical (1-alpha)-quantile: order statistic ceil((1-a)m)."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    m = v.size
    if m == 0:
        raise InsufficientSample("no tuning statistics")
    rank = math.ceil((1.0 - alpha) * m - 1e-9 * m)
    rank = min(max(rank, 1), m)
    return float(v[rank - 1])


def split_indices(n: int, split: float, seed):
    """Seeded train/tune partition without replacement; sorted index arrays."""
    if not 0 < split < 1:
        raise InvalidConfiguration("split fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = min(max(int(round(split * n)), 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def phase1_from_split(
    train: FunctionalSample,
    tune: FunctionalSample,
    alpha_star: float = 0.05,
    variance_fraction: float = 0.8,
    grid_size=None,
    min_tune: int = 20,
) -> MonitoringModel:
    """Core Phase I: model from the training part, limits from the tuning part."""
    if not 0 < alpha_star < 1:
        raise InvalidConfiguration("alpha_star must lie in (0, 1)")
    if tune.n < min_tune:
        raise InsufficientSample(f"tuning set has {tune.n} < {min_tune} observations")
    std = fit_standardization(train, grid_size)
    z_train = standardize(train.coeffs, std)
    mf = fit_mfpca(FunctionalSample(z_train, train.p, train.basis))
    mf.L = select_L(mf, variance_fraction)

    z_tune = standardize(tune.coeffs, std)
    t2, spe, c_t2, c_spe = _component_stats(z_tune, mf, mf.L)
    alpha = alpha_star / 2.0  # Bonferroni across the two charts
    model = MonitoringModel(
        standardization=std,
        mfpca=mf,
        cl_t2=empirical_limit(t2, alpha),
        cl_spe=empirical_limit(spe, alpha),
        contrib_limits_t2=np.array([empirical_limit(c_t2[:, k], alpha) for k in range(train.p)]),
        contrib_limits_spe=np.array([empirical_limit(c_spe[:, k], alpha) for k in range(train.p)]),
        alpha_star=alpha_star,
    )
    return model


def phase1_fit(
    reference: FunctionalSample,
    split: float = 0.7,
    alpha_star: float = 0.05,
    variance_fraction: float = 0.8,
    seed=0,
    grid_size=None,
    lambdas=None,
) -> MonitoringModel:
    """Fit a T2/SPE monitoring model on an in-control reference sample."""
    train_idx, tune_idx = split_indices(reference.n, split, seed)
    train = FunctionalSample(reference.coeffs[train_idx], reference.p, reference.basis)
    tune = FunctionalSample(reference.coeffs[tune_idx], reference.p, reference.basis)
    model = phase1_from_split(train, tune, alpha_star, variance_fraction, grid_size)
    if lambdas is not None:
        model.lambdas = np.asarray(lambdas, dtype=float).ravel()
    return model


def _coerce_row(obs, model: MonitoringModel) -> tuple:
    if isinstance(obs, DiscreteProfile):
        if any(t.size == 0 for t in obs.argvals):
            raise MissingComponent("profile lacks data for some component")
        if model.lambdas is None:
            raise InvalidConfiguration(
                "model carries no smoothing parameters; supply a coefficient row"
            )
        fit = fit_penalized(obs, model.standardization.basis, model.lambdas)
        return fit.coeffs.ravel(), obs.obs_id
    row = np.asarray(obs, dtype=float).ravel()
    if np.isnan(row).any():
        raise MissingComponent("coefficient row contains missing blocks")
    return row, None


def phase2_evaluate(obs, model: MonitoringModel) -> MonitoringOutcome:
    """Score one observation and report signals plus flagged components.

    Contribution flags are reported only when the corresponding chart
    signals; diagnosis follows detection.
    """
    row, obs_id = _coerce_row(obs, model)
    z = standardize(row, model.standardization)
    t2, spe, c_t2, c_spe = _component_stats(z, model.mfpca, model.mfpca.L)
    t2, spe = float(t2[0]), float(spe[0])
    c_t2, c_spe = c_t2[0], c_spe[0]
    signal_t2 = t2 > model.cl_t2
    signal_spe = spe > model.cl_spe
    flagged = set()
    if signal_t2:
        flagged.update(np.nonzero(c_t2 > model.contrib_limits_t2)[0].tolist())
    if signal_spe:
        flagged.update(np.nonzero(c_spe > model.contrib_limits_spe)[0].tolist())
    return MonitoringOutcome(
        t2=t2,
        spe=spe,
        signal_t2=signal_t2,
        signal_spe=signal_spe,
        contrib_t2=c_t2,
        contrib_spe=c_spe,
        flagged_components=tuple(sorted(flagged)),
        obs_id=obs_id,
    )
