"""B-spline basis systems on a compact interval.

Every functional object in this package is a coefficient vector in one of
these bases.  The Gram matrix turns coefficient algebra into exact L2
geometry and the second-derivative penalty matrix drives the roughness
penalties used for smoothing.  Both matrices are assembled by per-span
Gauss-Legendre quadrature, which is exact for the piecewise-polynomial
integrands, so they are bit-stable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import BSpline
from scipy.linalg import cho_factor, cho_solve

from .errors import InvalidConfiguration, OutOfDomain

__all__ = [
    "BasisSystem",
    "build_basis",
    "evaluate_design",
    "block_gram",
    "project_values",
    "integral_weights",
]


@dataclass(frozen=True, eq=False)
class BasisSystem:
    """B-spline basis with precomputed integral matrices.

    Attributes
    ----------
    domain : (float, float)
        Closed interval [a, b].
    order : int
        Spline order (polynomial degree + 1); 4 means cubic.
    knots : ndarray
        Full knot vector including boundary multiplicities.
    K : int
        Number of basis functions.
    gram : ndarray, shape (K, K)
        Entries are the integrals of phi_i * phi_j over the domain.
    penalty2 : ndarray, shape (K, K)
        Entries are the integrals of phi_i'' * phi_j''.
    """

    domain: tuple[float, float]
    order: int
    knots: np.ndarray
    K: int
    gram: np.ndarray
    penalty2: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def length(self) -> float:
        return self.domain[1] - self.domain[0]

    def gram_sqrt_pair(self):
        """Symmetric square root of the Gram matrix and its inverse, cached."""
        if "gram_sqrt" not in self._cache:
            vals, vecs = np.linalg.eigh(self.gram)
            if vals.min() <= 0:
                raise InvalidConfiguration("Gram matrix is not positive definite")
            root = np.sqrt(vals)
            self._cache["gram_sqrt"] = (
                (vecs * root) @ vecs.T,
                (vecs / root) @ vecs.T,
            )
        return self._cache["gram_sqrt"]


def _eval_all(knots, degree, x, deriv):
    spline = BSpline(knots, np.eye(len(knots) - degree - 1), degree, extrapolate=False)
    if deriv:
        spline = spline.derivative(deriv)
        # derivative() widens the base interval bookkeeping; clamp manually
        spline.extrapolate = True
    return spline(x)


def build_basis(domain, K: int, order: int = 4) -> BasisSystem:
    """Construct a B-spline basis with equally spaced interior knots.

    Parameters
    ----------
    domain : (float, float)
        Interval [a, b] with a < b.
    K : int
        Basis dimension; must satisfy K >= order.
    order : int
        Spline order (4 = cubic).

    Raises
    ------
    InvalidConfiguration
        If K < order or the interval is degenerate.
    """
    a, b = float(domain[0]), float(domain[1])
    if not (np.isfinite(a) and np.isfinite(b) and b > a):
        raise InvalidConfiguration(f"degenerate domain [{a}, {b}]")
    order = int(order)
    K = int(K)
    if order < 1:
        raise InvalidConfiguration("order must be >= 1")
    if K < order:
        raise InvalidConfiguration(f"K={K} must be at least the order ({order})")

    n_interior = K - order
    breaks = np.linspace(a, b, n_interior + 2)
    knots = np.concatenate([np.full(order - 1, a), breaks, np.full(order - 1, b)])
    degree = order - 1

    # Gauss-Legendre with `order` points per span integrates polynomials of
    # degree 2*order-1, enough for products of two basis functions.
    nodes, weights = leggauss(order)
    mid = 0.5 * (breaks[:-1] + breaks[1:])
    half = 0.5 * np.diff(breaks)
    qx = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    qw = (half[:, None] * weights[None, :]).ravel()

    design = _eval_all(knots, degree, qx, 0)
    gram = design.T @ (design * qw[:, None])
    gram = 0.5 * (gram + gram.T)
    if degree >= 2:
        d2 = _eval_all(knots, degree, qx, 2)
        penalty2 = d2.T @ (d2 * qw[:, None])
        penalty2 = 0.5 * (penalty2 + penalty2.T)
    else:
        penalty2 = np.zeros((K, K))

    return BasisSystem(
        domain=(a, b), order=order, knots=knots, K=K, gram=gram, penalty2=penalty2
    )


def evaluate_design(basis: BasisSystem, grid, deriv: int = 0) -> np.ndarray:
    """Evaluate all basis functions (or a derivative) on a grid.

    Returns a (K, n) matrix whose column j holds phi_1(t_j) .. phi_K(t_j).
    Functions whose support excludes a point contribute exact zeros.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    a, b = basis.domain
    tol = 1e-12 * max(basis.length, 1.0)
    if grid.size and (grid.min() < a - tol or grid.max() > b + tol):
        raise OutOfDomain(
            f"grid points outside [{a}, {b}]: min={grid.min()}, max={grid.max()}"
        )
    grid = np.clip(grid, a, b)
    values = _eval_all(basis.knots, basis.order - 1, grid, deriv)
    return np.ascontiguousarray(values.T)


def block_gram(basis: BasisSystem, p: int) -> np.ndarray:
    """Block-diagonal Gram matrix for p components sharing one basis."""
    K = basis.K
    out = np.zeros((p * K, p * K))
    for k in range(p):
        out[k * K : (k + 1) * K, k * K : (k + 1) * K] = basis.gram
    return out


def integral_weights(basis: BasisSystem) -> np.ndarray:
    """Vector with entries equal to the integral of each basis function."""
    # sum_j phi_j == 1, so integral(phi_i) = sum_j gram[i, j]
    return basis.gram @ np.ones(basis.K)


def project_values(basis: BasisSystem, grid, values) -> np.ndarray:
    """Unpenalized least-squares projection of grid samples onto the basis.

    ``values`` has shape (..., n) matching ``grid``; returns (..., K).
    The normal-equation factorization is cached per grid.
    """
    grid = np.asarray(grid, dtype=float)
    key = ("proj", grid.tobytes())
    if key not in basis._cache:
        design = evaluate_design(basis, grid)
        factor = cho_factor(design @ design.T)
        basis._cache[key] = (design, factor)
    design, factor = basis._cache[key]
    values = np.asarray(values, dtype=float)
    flat = values.reshape(-1, values.shape[-1]) if values.ndim else values[None]
    coeffs = cho_solve(factor, design @ flat.T).T
    if values.ndim == 1:
        return coeffs[0]
    return coeffs.reshape(values.shape[:-1] + (basis.K,))
