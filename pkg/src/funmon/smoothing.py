"""Penalized least-squares smoothing of discretely observed profiles.

Each component of a profile is fit independently (the residual weighting
matrices are fixed to the identity, which decouples the joint criterion),
with a second-derivative roughness penalty and GCV-driven selection of the
penalty weight.  The ``distribute_lambda`` rule splits one global penalty
across components inversely to their baseline roughness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .basis import BasisSystem, evaluate_design
from .errors import (
    InvalidConfiguration,
    MissingComponent,
    RankDeficientDesign,
    SelectionFailure,
    UndefinedGcv,
)

__all__ = [
    "DiscreteProfile",
    "SmoothFit",
    "fit_penalized",
    "gcv_score",
    "select_lambda",
    "default_lambda_grid",
    "distribute_lambda",
]


@dataclass
class DiscreteProfile:
    """Noisy discrete observations of one multivariate profile.

    ``argvals[k]`` and ``values[k]`` hold the sorted abscissae and the
    measurements of component k.  An empty component marks missing data;
    only the robust pipeline accepts such profiles.
    """

    argvals: list
    values: list
    obs_id: str | None = None

    def __post_init__(self):
        if not self.argvals or len(self.argvals) != len(self.values):
            raise InvalidConfiguration(
                "profile needs one (argvals, values) pair per component"
            )
        self.argvals = [np.asarray(t, dtype=float).ravel() for t in self.argvals]
        self.values = [np.asarray(y, dtype=float).ravel() for y in self.values]
        for k, (t, y) in enumerate(zip(self.argvals, self.values)):
            if t.shape != y.shape:
                raise InvalidConfiguration(f"component {k}: argvals/values mismatch")
            if t.size and np.any(np.diff(t) < 0):
                raise InvalidConfiguration(f"component {k}: argvals must be sorted")
            if t.size and not (np.isfinite(t).all() and np.isfinite(y).all()):
                raise InvalidConfiguration(f"component {k}: non-finite entries")

    @property
    def p(self) -> int:
        return len(self.argvals)


@dataclass
class SmoothFit:
    """Result of a penalized fit: one coefficient vector per component."""

    coeffs: np.ndarray  # (p, K)
    lambdas: np.ndarray  # (p,)
    gcv: np.ndarray  # (p,), NaN where the criterion is undefined
    effective_df: np.ndarray  # (p,), trace of the hat matrix


def _design_decomposition(basis, t):
    """Demmler-Reinsch pieces for a design grid, cached on the basis.

    Returns (design, back, rotation, gamma) with back = L^-T, L the Cholesky
    factor of T T', rotation the eigenvectors of L^-1 R L^-T and gamma its
    eigenvalues (zeros of the penalty null space snapped to exact zero so
    penalty-free directions are untouched at any lambda).
    """
    key = ("dr", t.tobytes())
    if key not in basis._cache:
        design = evaluate_design(basis, t)  # (K, n)
        normal = design @ design.T
        try:
            low = np.linalg.cholesky(normal)
        except np.linalg.LinAlgError as exc:
            raise RankDeficientDesign(
                "singular normal matrix; the design does not identify the basis"
            ) from exc
        diag = np.diag(low)
        if diag.min() <= 1e-10 * diag.max():
            raise RankDeficientDesign(
                "numerically singular normal matrix; need a richer design"
            )
        low_inv = solve_triangular(low, np.eye(basis.K), lower=True)
        mapped = low_inv @ basis.penalty2 @ low_inv.T
        gamma, rotation = np.linalg.eigh(0.5 * (mapped + mapped.T))
        gamma = np.maximum(gamma, 0.0)
        if gamma.size and gamma.max() > 0:
            gamma[gamma < 1e-10 * gamma.max()] = 0.0
        basis._cache[key] = (design, low_inv.T, rotation, gamma)
    return basis._cache[key]


def _component_solve(basis, t, y, lam):
    """Solve the penalized normal equations for one component.

    Uses the Demmler-Reinsch form c = L^-T U diag(1/(1+lam*gamma)) U' L^-1 T y,
    which is stable across the whole lambda range and reproduces the penalty
    null space exactly for any lambda.
    """
    design, back, rotation, gamma = _design_decomposition(basis, t)
    shrink = 1.0 / (1.0 + lam * gamma)
    rotated = rotation.T @ (back.T @ (design @ y))
    coeffs = back @ (rotation @ (shrink * rotated))
    df = float(shrink.sum())
    sse = float(np.sum((y - design.T @ coeffs) ** 2))
    return coeffs, df, sse


def _gcv_value(sse, df, n, yscale, strict):
    denom = n - df
    if denom <= 1e-8 * n:
        if sse <= 1e-12 * (1.0 + yscale):
            return 0.0  # interpolating fit: zero numerator wins
        if strict:
            raise UndefinedGcv(f"tr(H)={df:.6g} >= n={n} with nonzero residual")
        return np.nan
    return n * sse / denom**2


def fit_penalized(profile: DiscreteProfile, basis: BasisSystem, lambdas) -> SmoothFit:
    """Fit every component of a profile by penalized least squares.

    Parameters
    ----------
    profile : DiscreteProfile
        Observations; every component needs at least K distinct abscissae.
    basis : BasisSystem
        Shared basis for all components.
    lambdas : float or sequence of float
        Nonnegative penalty weight per component (a scalar is broadcast).
    """
    p = profile.p
    lam = np.broadcast_to(np.asarray(lambdas, dtype=float).ravel(), (p,)).copy()
    if np.any(lam < 0) or not np.isfinite(lam).all():
        raise InvalidConfiguration("lambdas must be finite and nonnegative")

    coeffs = np.empty((p, basis.K))
    dfs = np.empty(p)
    gcvs = np.empty(p)
    for k in range(p):
        t, y = profile.argvals[k], profile.values[k]
        if t.size == 0:
            raise MissingComponent(f"component {k} has no observations")
        if np.unique(t).size < basis.K:
            raise InvalidConfiguration(
                f"component {k}: {np.unique(t).size} distinct abscissae < K={basis.K}"
            )
        coeffs[k], dfs[k], sse = _component_solve(basis, t, y, lam[k])
        gcvs[k] = _gcv_value(sse, dfs[k], t.size, float(y @ y), strict=False)
    return SmoothFit(coeffs=coeffs, lambdas=lam, gcv=gcvs, effective_df=dfs)


def gcv_score(
    profile: DiscreteProfile, basis: BasisSystem, lam: float, component: int
) -> float:
    """Generalized cross-validation criterion n*SSE / (n - tr(H))^2.

    Raises
    ------
    UndefinedGcv
        If the hat-matrix trace reaches n while the residual is nonzero.
    """
    if lam < 0:
        raise InvalidConfiguration("lambda must be nonnegative")
    t, y = profile.argvals[component], profile.values[component]
    if t.size == 0:
        raise MissingComponent(f"component {component} has no observations")
    _, df, sse = _component_solve(basis, t, y, float(lam))
    return float(_gcv_value(sse, df, t.size, float(y @ y), strict=True))


def lambda_scale(profile: DiscreteProfile, basis: BasisSystem) -> float:
    """Unit-free penalty scale tr(T T') / tr(R), averaged over components."""
    pen_trace = float(np.trace(basis.penalty2))
    scales = []
    for k in range(profile.p):
        t = profile.argvals[k]
        if t.size == 0 or pen_trace <= 0:
            continue
        design = evaluate_design(basis, t)
        scales.append(np.trace(design @ design.T) / pen_trace)
    return float(np.exp(np.mean(np.log(scales)))) if scales else 1.0


def default_lambda_grid(profile: DiscreteProfile, basis: BasisSystem, size: int = 25):
    """Log-spaced grid in [1e-8, 1e4] scaled by tr(T T')/tr(R) for unit freedom."""
    return np.logspace(-8, 4, size) * lambda_scale(profile, basis)


def select_lambda(profile: DiscreteProfile, basis: BasisSystem, grid=None) -> np.ndarray:
    """Pick, per component, the grid value minimizing GCV.

    Ties (within a small tolerance) are broken toward the larger lambda so
    equally good fits come out smoother.
    """
    if grid is None:
        grid = default_lambda_grid(profile, basis)
    grid = np.sort(np.asarray(grid, dtype=float).ravel())
    if grid.size == 0:
        raise InvalidConfiguration("empty lambda grid")
    if np.any(grid < 0):
        raise InvalidConfiguration("lambda grid must be nonnegative")

    chosen = np.empty(profile.p)
    for k in range(profile.p):
        values = np.full(grid.size, np.inf)
        for i, lam in enumerate(grid):
            try:
                values[i] = gcv_score(profile, basis, lam, k)
            except UndefinedGcv:
                continue
        if not np.isfinite(values).any():
            raise SelectionFailure(f"component {k}: GCV undefined on the whole grid")
        best = values.min()
        tol = 1e-10 * (1.0 + abs(best))
        chosen[k] = grid[values <= best + tol].max()
    return chosen


def distribute_lambda(baseline_fit: SmoothFit, lam: float, basis: BasisSystem) -> np.ndarray:
    """Split a single penalty across components by inverse baseline roughness.

    ``baseline_fit`` must come from a uniform-lambda fit; component k gets
    lambda * w_k / sum(w) with w_k the reciprocal of the fitted roughness
    c_k' R c_k, so rougher components are penalized less.  Zero-roughness
    components inherit the largest finite weight; if every roughness is
    zero the penalty is split uniformly.
    """
    if lam < 0:
        raise InvalidConfiguration("lambda must be nonnegative")
    coeffs = np.asarray(baseline_fit.coeffs, dtype=float)
    p = coeffs.shape[0]
    rough = np.einsum("ki,ij,kj->k", coeffs, basis.penalty2, coeffs)
    rough = np.maximum(rough, 0.0)
    if np.all(rough == 0):
        return np.full(p, lam / p)
    weights = np.empty(p)
    positive = rough > 0
    weights[positive] = 1.0 / rough[positive]
    weights[~positive] = weights[positive].max()
    return lam * weights / weights.sum()
