"""Seeded synthetic profiles for tests, calibration studies and demos.

Smooth Gaussian-process profiles with optional cross-component correlation,
sustained mean shifts along a chosen direction, casewise or componentwise
contamination, and sinusoidal time warps.  Everything is a deterministic
function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfiguration
from .smoothing import DiscreteProfile

__all__ = ["SimConfig", "SimLabels", "generate"]


@dataclass
class SimConfig:
    """Generator settings; see :func:`generate`."""

    n: int = 100
    p: int = 1
    grid_size: int = 100
    domain: tuple = (0.0, 1.0)
    length_scale: float = 0.25
    amplitude: float = 1.0  # kernel variance
    cross_correlation: float = 0.0
    noise_sd: float = 0.05
    seed: int = 0
    mean: str = "sine"  # "sine" | "zero"
    # sustained shift: direction evaluated on the grid, magnitude, first index
    shift_magnitude: float = 0.0
    shift_onset: int = 0
    shift_components: tuple | None = None
    # contamination
    contamination_fraction: float = 0.0
    contamination_type: str = "casewise"  # "casewise" | "componentwise"
    contamination_magnitude: float = 5.0
    # phase variation: h(t) = t + warp_amplitude * sin(pi t), amplitude drawn
    # uniformly in [-warp_amplitude, warp_amplitude] per observation
    warp_amplitude: float = 0.0

    def __post_init__(self):
        if self.n < 1 or self.p < 1 or self.grid_size < 4:
            raise InvalidConfiguration("n, p, grid_size must be positive (grid >= 4)")
        if self.domain[1] <= self.domain[0]:
            raise InvalidConfiguration("degenerate domain")
        if not 0 <= self.cross_correlation < 1:
            raise InvalidConfiguration("cross correlation must lie in [0, 1)")
        if self.length_scale <= 0 or self.amplitude < 0 or self.noise_sd < 0:
            raise InvalidConfiguration("scales must be positive")
        if not 0 <= self.contamination_fraction <= 1:
            raise InvalidConfiguration("contamination fraction must lie in [0, 1]")
        if self.contamination_type not in ("casewise", "componentwise"):
            raise InvalidConfiguration("unknown contamination type")
        if self.mean not in ("sine", "zero"):
            raise InvalidConfiguration("unknown mean family")


@dataclass
class SimLabels:
    """Ground truth emitted alongside the profiles."""

    shifted: np.ndarray  # (n,) bool
    contaminated_cells: np.ndarray  # (n, p) bool
    warp_coeffs: np.ndarray  # (n,) the per-observation warp amplitude a


def _mean_function(config, grid, component):
    if config.mean == "zero":
        return np.zeros_like(grid)
    a, b = config.domain
    unit = (grid - a) / (b - a)
    return np.sin(2 * np.pi * unit + component) + 0.5 * component


def generate(config: SimConfig):
    """Draw profiles and their ground-truth labels.

    Returns (profiles, labels) where profiles is a list of
    :class:`DiscreteProfile` on the common grid.  Casewise contamination
    shifts whole observations by ``contamination_magnitude`` (in units of
    the pointwise sd); componentwise contamination does the same for
    individual component blocks.
    """
    rng = np.random.default_rng(config.seed)
    a, b = config.domain
    grid = np.linspace(a, b, config.grid_size)
    n, p, g = config.n, config.p, config.grid_size

    if config.amplitude > 0:
        diff = grid[:, None] - grid[None, :]
        kernel = config.amplitude * np.exp(-(diff**2) / (2 * config.length_scale**2))
        chol_t = np.linalg.cholesky(kernel + 1e-12 * config.amplitude * np.eye(g))
        rho = config.cross_correlation
        comp_cov = (1 - rho) * np.eye(p) + rho * np.ones((p, p))
        chol_p = np.linalg.cholesky(comp_cov)
        white = rng.normal(size=(n, p, g))
        smooth = np.einsum("qp,npg,gh->nqh", chol_p, white, chol_t.T)
    else:
        smooth = np.zeros((n, p, g))

    values = np.empty((n, p, g))
    for k in range(p):
        values[:, k] = smooth[:, k] + _mean_function(config, grid, k)

    pointwise_sd = np.sqrt(max(config.amplitude, 1e-300))

    shifted = np.zeros(n, dtype=bool)
    if config.shift_magnitude != 0.0:
        comps = (
            tuple(range(p))
            if config.shift_components is None
            else tuple(config.shift_components)
        )
        direction = np.sin(np.pi * (grid - a) / (b - a))
        shifted[config.shift_onset :] = True
        for k in comps:
            values[shifted, k] += config.shift_magnitude * pointwise_sd * direction

    contaminated = np.zeros((n, p), dtype=bool)
    if config.contamination_fraction > 0:
        mag = config.contamination_magnitude * pointwise_sd
        if config.contamination_type == "casewise":
            count = int(np.ceil(config.contamination_fraction * n))
            rows = rng.choice(n, size=count, replace=False)
            contaminated[rows, :] = True
            values[rows] += mag
        else:
            count = int(np.ceil(config.contamination_fraction * n * p))
            flat = rng.choice(n * p, size=count, replace=False)
            rows, comps = np.unravel_index(flat, (n, p))
            contaminated[rows, comps] = True
            values[rows, comps] += mag

    warp_coeffs = np.zeros(n)
    if config.warp_amplitude > 0:
        warp_coeffs = rng.uniform(-config.warp_amplitude, config.warp_amplitude, size=n)
        unit = (grid - a) / (b - a)
        dense = np.linspace(0, 1, 8 * g)
        for i in range(n):
            h_vals = dense + warp_coeffs[i] * np.sin(np.pi * dense)
            inner = np.interp(unit, h_vals, dense)  # h^{-1} on the unit scale
            for k in range(p):
                values[i, k] = np.interp(inner, unit, values[i, k])

    if config.noise_sd > 0:
        values = values + config.noise_sd * rng.normal(size=values.shape)

    profiles = [
        DiscreteProfile([grid] * p, [values[i, k] for k in range(p)], obs_id=f"obs{i:05d}")
        for i in range(n)
    ]
    labels = SimLabels(
        shifted=shifted, contaminated_cells=contaminated, warp_coeffs=warp_coeffs
    )
    return profiles, labels
