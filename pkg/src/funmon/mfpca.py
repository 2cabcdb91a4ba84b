"""Standardization and multivariate functional principal component analysis.

All linear algebra happens in coefficient space: with W the block-diagonal
Gram matrix, the L2 geometry of p-vectors of functions is the Euclidean
geometry of W^(1/2)-transformed coefficient rows.  Classical PCA of those
transformed rows yields eigenfunctions (mapped back through W^(-1/2)),
eigenvalues and scores of the covariance operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSystem, block_gram, evaluate_design, project_values
from .errors import (
    DegenerateModel,
    InsufficientSample,
    InvalidConfiguration,
    InvalidData,
)
from .smoothing import DiscreteProfile, fit_penalized, select_lambda

__all__ = [
    "FunctionalSample",
    "StandardizationModel",
    "MfpcaModel",
    "sample_from_profiles",
    "default_grid_size",
    "fit_standardization",
    "standardize",
    "unstandardize",
    "fit_mfpca",
    "mfpca_core",
    "scores",
    "truncate",
    "select_L",
]


@dataclass
class FunctionalSample:
    """n observations of a p-component functional variable.

    ``coeffs`` is n x (p*K); row i concatenates the p coefficient vectors of
    observation i.  NaN entries mark missing components (robust pipeline
    only); everything else requires finite rows.
    """

    coeffs: np.ndarray
    p: int
    basis: BasisSystem

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if self.coeffs.shape[1] != self.p * self.basis.K:
            raise InvalidConfiguration(
                f"coefficient width {self.coeffs.shape[1]} != p*K = {self.p * self.basis.K}"
            )
        if np.isinf(self.coeffs).any():
            raise InvalidData("infinite coefficients")

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    def block(self, k: int) -> np.ndarray:
        K = self.basis.K
        return self.coeffs[:, k * K : (k + 1) * K]


def sample_from_profiles(profiles, basis, lambdas=None, lambda_grid=None):
    """Smooth a list of profiles into a FunctionalSample.

    When ``lambdas`` is None the penalty weights are selected by GCV on the
    first profile and reused for the rest (one configuration per dataset).
    Returns (sample, lambdas).
    """
    profiles = list(profiles)
    if not profiles:
        raise InsufficientSample("no profiles supplied")
    p = profiles[0].p
    if lambdas is None:
        lambdas = select_lambda(profiles[0], basis, lambda_grid)
    lambdas = np.broadcast_to(np.asarray(lambdas, dtype=float).ravel(), (p,)).copy()
    rows = np.empty((len(profiles), p * basis.K))
    for i, prof in enumerate(profiles):
        if prof.p != p:
            raise InvalidConfiguration("profiles disagree on component count")
        rows[i] = fit_penalized(prof, basis, lambdas).coeffs.ravel()
    return FunctionalSample(coeffs=rows, p=p, basis=basis), lambdas


def default_grid_size(basis: BasisSystem) -> int:
    """Default dense-grid resolution: 200 points per unit of domain length."""
    return max(100, int(round(200 * basis.length)))


@dataclass
class StandardizationModel:
    """Mean and variance functions used to center and scale each component.

    The variance functions are estimated pointwise on a dense grid, floored
    at ``floor`` and re-projected onto the basis; the floor keeps the
    pointwise division stable for near-constant components.
    """

    mean_coeffs: np.ndarray  # (p, K)
    var_coeffs: np.ndarray  # (p, K)
    floor: float
    basis: BasisSystem
    grid_size: int

    def grid(self) -> np.ndarray:
        a, b = self.basis.domain
        return np.linspace(a, b, self.grid_size)


def fit_standardization(sample: FunctionalSample, grid_size=None) -> StandardizationModel:
    """Estimate mean and variance functions from a sample.

    Means are exact coefficient averages.  Variances are computed pointwise
    on the dense grid (divisor n-1), floored, projected back onto the basis
    and lifted so the represented function never drops below the floor.
    """
    if sample.n < 2:
        raise InsufficientSample("standardization needs at least 2 observations")
    if np.isnan(sample.coeffs).any():
        raise InvalidData("sample contains missing blocks")
    basis = sample.basis
    if grid_size is None:
        grid_size = default_grid_size(basis)
    a, b = basis.domain
    grid = np.linspace(a, b, grid_size)
    design = evaluate_design(basis, grid)  # (K, G)

    p, K = sample.p, basis.K
    mean_coeffs = np.empty((p, K))
    var_grid = np.empty((p, grid_size))
    data_scale = 1.0
    for k in range(p):
        block = sample.block(k)
        mean_coeffs[k] = block.mean(axis=0)
        values = block @ design
        var_grid[k] = values.var(axis=0, ddof=1)
        data_scale = max(data_scale, float(np.abs(values).max()) ** 2)

    # a sample of identical rows leaves O(eps^2) variance noise; treat it as zero
    vmax = float(var_grid.max())
    if vmax < 1e-24 * data_scale:
        floor = 1e-10 * data_scale
    else:
        floor = 1e-10 * vmax
    var_coeffs = np.empty((p, K))
    for k in range(p):
        var_coeffs[k] = project_values(basis, grid, np.maximum(var_grid[k], floor))
        represented = var_coeffs[k] @ design
        lift = floor - represented.min()
        if lift > 0:
            # constants are exactly representable: partition of unity
            var_coeffs[k] += lift
    return StandardizationModel(
        mean_coeffs=mean_coeffs,
        var_coeffs=var_coeffs,
        floor=floor,
        basis=basis,
        grid_size=grid_size,
    )


def _transform_rows(rows, model, forward):
    basis = model.basis
    grid = model.grid()
    design = evaluate_design(basis, grid)
    rows = np.asarray(rows, dtype=float)
    single = rows.ndim == 1
    flat = np.atleast_2d(rows)
    p, K = model.mean_coeffs.shape
    out = np.empty_like(flat)
    for k in range(p):
        mean_vals = model.mean_coeffs[k] @ design
        scale = np.sqrt(np.maximum(model.var_coeffs[k] @ design, model.floor))
        values = flat[:, k * K : (k + 1) * K] @ design
        if forward:
            transformed = (values - mean_vals) / scale
        else:
            transformed = values * scale + mean_vals
        out[:, k * K : (k + 1) * K] = project_values(basis, grid, transformed)
    return out[0] if single else out


def standardize(rows, model: StandardizationModel):
    """Center and scale coefficient rows: Z = (X - mean) / sqrt(var).

    The pointwise quotient leaves the basis span, so the result is computed
    on the model's dense grid and projected back.
    """
    return _transform_rows(rows, model, forward=True)


def unstandardize(rows, model: StandardizationModel):
    """Inverse of :func:`standardize` (up to projection error)."""
    return _transform_rows(rows, model, forward=False)


@dataclass
class MfpcaModel:
    """Eigenstructure of a functional sample.

    ``eig_coeffs`` holds one coefficient column per eigenfunction; columns
    are orthonormal in the ``metric`` inner product.  ``L`` is the retained
    count used by downstream monitoring (defaults to everything kept).
    """

    basis: BasisSystem
    p: int
    eig_coeffs: np.ndarray  # (d, L_max)
    eigenvalues: np.ndarray  # (L_max,) positive, nonincreasing
    total_variance: float
    L: int
    metric: np.ndarray = field(repr=False)
    score_proj: np.ndarray = field(repr=False)  # metric @ eig_coeffs

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size

    @property
    def explained(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros_like(self.eigenvalues)
        return np.cumsum(self.eigenvalues) / self.total_variance

    def residual_spectrum(self, L=None) -> np.ndarray:
        """Eigenvalues beyond the retained count (for parametric SPE limits)."""
        L = self.L if L is None else L
        return self.eigenvalues[L:]


def mfpca_core(rows: np.ndarray, metric: np.ndarray):
    """PCA of rows under an SPD metric.

    Returns (eigenvalues, eig_coeffs, total_variance).  Eigenvalues are the
    positive covariance eigenvalues (divisor n-1), at most min(n-1, d) of
    them; coefficient columns satisfy b' M b = I; each column is scaled so
    its largest-magnitude entry is positive.
    """
    rows = np.asarray(rows, dtype=float)
    if not np.isfinite(rows).all():
        raise InvalidData("non-finite rows")
    n, d = rows.shape
    if n < 2:
        raise InsufficientSample("PCA needs at least 2 rows")

    mvals, mvecs = np.linalg.eigh(metric)
    if mvals.min() <= 0:
        raise InvalidConfiguration("metric must be positive definite")
    root = np.sqrt(mvals)
    msqrt = (mvecs * root) @ mvecs.T
    minv = (mvecs / root) @ mvecs.T

    transformed = rows @ msqrt
    centered = transformed - transformed.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]

    total = float(evals.sum())
    limit = min(n - 1, d)
    tol = 1e-12 * evals[0] if evals.size and evals[0] > 0 else 0.0
    keep = int(np.sum(evals[:limit] > tol))
    evals = evals[:keep]
    coeffs = minv @ evecs[:, :keep]
    for l in range(keep):
        idx = int(np.argmax(np.abs(coeffs[:, l])))
        if coeffs[idx, l] < 0:
            coeffs[:, l] = -coeffs[:, l]
    return evals, coeffs, total


def fit_mfpca(sample: FunctionalSample) -> MfpcaModel:
    """Eigendecomposition of the sample covariance in the Gram geometry."""
    if np.isnan(sample.coeffs).any():
        raise InvalidData("sample contains missing blocks")
    metric = block_gram(sample.basis, sample.p)
    evals, coeffs, total = mfpca_core(sample.coeffs, metric)
    return MfpcaModel(
        basis=sample.basis,
        p=sample.p,
        eig_coeffs=coeffs,
        eigenvalues=evals,
        total_variance=total,
        L=evals.size,
        metric=metric,
        score_proj=metric @ coeffs,
    )


def scores(row, model: MfpcaModel, L=None) -> np.ndarray:
    """Principal component scores of one coefficient row (or a matrix of rows)."""
    L = model.L if L is None else int(L)
    return np.asarray(row, dtype=float) @ model.score_proj[:, :L]


def truncate(row, model: MfpcaModel, L=None):
    """Reconstruction from the leading L components, in coefficient form."""
    L = model.L if L is None else int(L)
    if not 1 <= L <= model.n_components:
        raise InvalidConfiguration(f"L={L} outside 1..{model.n_components}")
    s = scores(row, model, L)
    return s @ model.eig_coeffs[:, :L].T


def select_L(model: MfpcaModel, fraction: float = 0.8) -> int:
    """Smallest L whose cumulative explained variance reaches ``fraction``."""
    if not 0 < fraction < 1:
        raise InvalidConfiguration("fraction must lie in (0, 1)")
    if model.total_variance <= 0 or model.n_components == 0:
        raise DegenerateModel("zero total variance")
    reached = np.nonzero(model.explained >= fraction - 1e-12)[0]
    return int(reached[0]) + 1 if reached.size else model.n_components
