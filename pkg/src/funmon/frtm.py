"""Real-time monitoring of partially observed curves.

A template curve is learned from fully observed reference data (Procrustes
iteration); each incoming curve, observed up to a fraction of its domain,
is aligned to the template by open-end dynamic time warping on a lattice.
The alignment splits every observation into an amplitude part (the aligned
curve), a phase part (the centered log-ratio of the normalized warp slope)
and two boundary numbers (where the warp starts and the log of the span it
covers).  A per-fraction family of mixed principal component models turns
these pieces into T2/SPE charts indexed by how much of the curve has been
seen.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._parallel import parallel_map
from .basis import BasisSystem, build_basis, evaluate_design, integral_weights, project_values
from .errors import (
    InfeasibleWarp,
    InsufficientSample,
    InvalidConfiguration,
    InvalidWarp,
    NotYetMonitorable,
    SelectionFailure,
)
from .mfpca import (
    FunctionalSample,
    MfpcaModel,
    StandardizationModel,
    fit_standardization,
    mfpca_core,
    select_L,
    standardize,
)
from .monitoring import MonitoringOutcome, _component_stats, empirical_limit, split_indices

__all__ = [
    "Curve",
    "FdtwConfig",
    "WarpingFunction",
    "TemplateFit",
    "RtModel",
    "oeb_fdtw",
    "align_curve",
    "select_lambda_acd",
    "procrustes_template",
    "clr_transform",
    "inverse_clr",
    "frtm_phase1",
    "frtm_phase2",
]

BLOCK_NAMES = ("aligned", "warp_clr", "start", "log_span")


@dataclass
class Curve:
    """A univariate curve sampled on sorted abscissae."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.x.size != self.y.size or self.x.size < 2:
            raise InvalidConfiguration("curve needs matching x/y with >= 2 points")
        if np.any(np.diff(self.x) <= 0):
            raise InvalidConfiguration("curve abscissae must be strictly increasing")

    @property
    def domain(self):
        return float(self.x[0]), float(self.x[-1])

    def truncated(self, cutoff: float) -> "Curve":
        keep = self.x <= cutoff + 1e-12
        if keep.sum() < 2:
            raise InvalidConfiguration("truncation leaves fewer than 2 points")
        return Curve(self.x[keep], self.y[keep])


@dataclass
class FdtwConfig:
    """Alignment settings.

    ``s_min``/``s_max`` bound the warp slope; in the per-fraction pipeline
    they are interpreted relative to the compression ratio (observed length
    over template length) and rescaled accordingly.  ``lam`` weighs the
    slope-regularity penalty, ``alpha_grid`` the amplitude/derivative mix
    candidates, ``grid_sizes`` the (template, query) lattice resolution.
    """

    s_min: float = 0.3
    s_max: float = 3.0
    lam: float = 0.1
    alpha_grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    grid_sizes: tuple = (101, 101)

    def __post_init__(self):
        if not 0 < self.s_min < self.s_max:
            raise InvalidConfiguration("need 0 < s_min < s_max")
        if self.lam < 0:
            raise InvalidConfiguration("lam must be nonnegative")

    def scaled(self, ratio: float) -> "FdtwConfig":
        return replace(self, s_min=self.s_min * ratio, s_max=self.s_max * ratio)


@dataclass
class WarpingFunction:
    """Strictly increasing map from template time to query time."""

    grid: np.ndarray  # template-time nodes
    values: np.ndarray  # query-time values, strictly increasing
    F0: float
    F1: float
    alpha: float | None = None
    objective: float | None = None
    amplitude_distance: float | None = None

    def __call__(self, t):
        return np.interp(t, self.grid, self.values)


# the lattice steps realize slopes around 1:1 on matched grids; larger
# template/query jumps approximate flatter/steeper local slopes
_STEPS = ((1, 1), (1, 2), (2, 1), (1, 3), (3, 1))


def _resample(curve: Curve, n: int):
    grid = np.linspace(curve.x[0], curve.x[-1], n)
    return grid, np.interp(grid, curve.x, curve.y)


def _normalized(values, grid):
    deriv = np.gradient(values, grid)
    sup = np.abs(values).max()
    sup_d = np.abs(deriv).max()
    if sup <= 0:
        raise InvalidConfiguration("curve has zero sup-norm")
    vn = values / sup
    dn = deriv / sup_d if sup_d > 0 else np.zeros_like(deriv)
    return vn, dn


def oeb_fdtw(query: Curve, template: Curve, config: FdtwConfig) -> WarpingFunction:
    """Open-begin/open-end alignment of a query curve to a template.

    Dynamic programming over the (template index, query index) lattice with
    step-limited slopes: the path visits every template column, may start
    and end at any query index, and minimizes the average of the amplitude
    plus derivative mismatch and the slope-regularity penalty.  The best
    mixing weight is picked from ``config.alpha_grid``.
    """
    n_t, n_q = config.grid_sizes
    t_grid, y_vals = _resample(template, n_t)
    x_grid, q_vals = _resample(query, n_q)
    dt = t_grid[1] - t_grid[0]
    dx = x_grid[1] - x_grid[0]
    ratio = (x_grid[-1] - x_grid[0]) / (t_grid[-1] - t_grid[0])

    yn, ydn = _normalized(y_vals, t_grid)
    xn, xdn = _normalized(q_vals, x_grid)

    steps = []
    for di, dj in _STEPS:
        slope = (dj * dx) / (di * dt)
        if config.s_min - 1e-12 <= slope <= config.s_max + 1e-12:
            steps.append((di, dj, slope))
    if not steps:
        raise InfeasibleWarp(
            f"no admissible lattice step for slope bounds ({config.s_min}, {config.s_max})"
        )

    amp = (yn[:, None] - xn[None, :]) ** 2  # (n_t, n_q)
    der = [(ydn[:, None] - slope * xdn[None, :]) ** 2 for _, _, slope in steps]
    penalty = [config.lam * (slope - ratio) ** 2 for _, _, slope in steps]

    best_result = None
    for alpha in config.alpha_grid:
        a2, b2 = alpha**2, (1.0 - alpha) ** 2
        integrand = [a2 * amp + b2 * d for d in der]
        cost = np.full((n_t, n_q), np.inf)
        came = np.full((n_t, n_q), -1, dtype=np.int8)
        cost[0] = 0.0
        for i in range(1, n_t):
            row = cost[i]
            for s, (di, dj, slope) in enumerate(steps):
                if di > i:
                    continue
                f = integrand[s]
                seg = di * dt * (
                    0.5 * (f[i - di, : n_q - dj] + f[i, dj:]) + penalty[s]
                )
                cand = cost[i - di, : n_q - dj] + seg
                better = cand < row[dj:]
                row[dj:][better] = cand[better]
                came[i, dj:][better] = s
        end = int(np.argmin(cost[n_t - 1]))
        total = cost[n_t - 1, end]
        if not np.isfinite(total):
            continue
        objective = total / (t_grid[-1] - t_grid[0])
        if best_result is None or objective < best_result[0]:
            best_result = (objective, alpha, came.copy(), end)

    if best_result is None:
        raise InfeasibleWarp("no feasible path reaches the last template column")

    objective, alpha, came, end = best_result
    path = [(n_t - 1, end)]
    i, j = n_t - 1, end
    while i > 0:
        s = came[i, j]
        if s < 0:
            raise InfeasibleWarp("broken backtrack; lattice too coarse")
        di, dj, _ = steps[s]
        i, j = i - di, j - dj
        path.append((i, j))
    path.reverse()
    idx_t = np.array([ij[0] for ij in path])
    idx_q = np.array([ij[1] for ij in path])

    # amplitude mismatch along the path, trapezoid in template time
    amp_path = amp[idx_t, idx_q]
    seg_dt = np.diff(t_grid[idx_t])
    amplitude_distance = float(
        np.sum(seg_dt * 0.5 * (amp_path[:-1] + amp_path[1:])) / (t_grid[-1] - t_grid[0])
    )
    return WarpingFunction(
        grid=t_grid[idx_t],
        values=x_grid[idx_q],
        F0=float(x_grid[idx_q[0]]),
        F1=float(x_grid[idx_q[-1]]),
        alpha=float(alpha),
        objective=float(objective),
        amplitude_distance=amplitude_distance,
    )


def align_curve(query: Curve, template: Curve, config: FdtwConfig):
    """Align and evaluate the warped query on the full template grid.

    Returns (warp, aligned values).  Template-time points mapping outside
    the observed query range take the boundary value of the query (the warp
    cannot leave the observed range, so this only guards interpolation at
    the edges).
    """
    warp = oeb_fdtw(query, template, config)
    t_grid = np.linspace(template.x[0], template.x[-1], config.grid_sizes[0])
    h_vals = warp(t_grid)
    aligned = np.interp(h_vals, query.x, query.y)
    return warp, aligned


def select_lambda_acd(curves, template: Curve, config: FdtwConfig, lambda_grid) -> float:
    """Pick the slope-penalty weight by the average curve distance.

    The ACD of a candidate is the mean amplitude mismatch of the aligned
    curves; the largest candidate within 5% of the minimum wins, favoring
    regular warps at near-equal alignment quality.
    """
    lambda_grid = np.sort(np.asarray(lambda_grid, dtype=float).ravel())
    if lambda_grid.size == 0:
        raise InvalidConfiguration("empty lambda grid")
    acds = np.full(lambda_grid.size, np.inf)
    for idx, lam in enumerate(lambda_grid):
        cfg = replace(config, lam=float(lam))
        try:
            dists = [oeb_fdtw(c, template, cfg).amplitude_distance for c in curves]
        except InfeasibleWarp:
            continue
        acds[idx] = float(np.mean(dists))
    if not np.isfinite(acds).any():
        raise SelectionFailure("alignment infeasible for every candidate")
    best = acds.min()
    admissible = acds <= 1.05 * best + 1e-15
    return float(lambda_grid[admissible].max())


@dataclass
class TemplateFit:
    """Procrustes template with its iteration trace."""

    curve: Curve
    n_iter: int
    acd_trace: list
    coeffs: np.ndarray | None = None


def procrustes_template(curves, config: FdtwConfig, max_iter: int = 10,
                        tol: float = 1e-3, basis: BasisSystem | None = None) -> TemplateFit:
    """Iteratively align all curves and average them until the mean settles.

    Starts from the cross-sectional mean on the common overlap of the
    domains; each sweep re-aligns every curve to the current template and
    replaces the template by the mean of the aligned curves.
    """
    curves = list(curves)
    if len(curves) < 2:
        raise InsufficientSample("template fitting needs at least 2 curves")
    lo = max(c.x[0] for c in curves)
    hi = min(c.x[-1] for c in curves)
    if hi <= lo:
        raise InvalidConfiguration("curves share no common overlap")
    n_t = config.grid_sizes[0]
    grid = np.linspace(lo, hi, n_t)
    template_vals = np.mean([np.interp(grid, c.x, c.y) for c in curves], axis=0)

    trace = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        template = Curve(grid, template_vals)
        results = parallel_map(lambda c: align_curve(c, template, config), curves)
        aligned = np.stack([r[1] for r in results])
        trace.append(float(np.mean([r[0].amplitude_distance for r in results])))
        new_vals = aligned.mean(axis=0)
        change = np.abs(new_vals - template_vals).max()
        scale = np.ptp(template_vals) + 1e-12
        template_vals = new_vals
        if change < tol * scale:
            break
    curve = Curve(grid, template_vals)
    coeffs = project_values(basis, grid, template_vals) if basis is not None else None
    return TemplateFit(curve=curve, n_iter=n_iter, acd_trace=trace, coeffs=coeffs)


def clr_transform(h: WarpingFunction, basis: BasisSystem, grid_size: int = 401):
    """Centered log-ratio of the normalized warp slope, as basis coefficients.

    The warp is rescaled to [0, 1] in its values, the log-slope is centered
    by its integral mean and projected; an exact correction pins the
    integral of the projected function to zero.  Returns
    (coefficients, start value, log of the covered span).
    """
    a, b = basis.domain
    grid = np.linspace(a, b, grid_size)
    span = h.F1 - h.F0
    if span <= 0:
        raise InvalidWarp("warp span must be positive")
    values = (h(grid) - h.F0) / span
    slope = np.gradient(values, grid)
    if slope.min() <= 0:
        raise InvalidWarp("warp slope must stay positive")
    logslope = np.log(slope)
    mean = np.trapezoid(logslope, grid) / (b - a)
    coeffs = project_values(basis, grid, logslope - mean)
    weights = integral_weights(basis)
    coeffs = coeffs - (coeffs @ weights) / (b - a)  # exact zero integral
    return coeffs, float(h.F0), float(np.log(span))


def inverse_clr(v_coeffs, F0: float, F1tilde: float, basis: BasisSystem,
                grid_size: int = 2001) -> WarpingFunction:
    """Rebuild a warp from its centered log-ratio representation."""
    a, b = basis.domain
    grid = np.linspace(a, b, grid_size)
    design = evaluate_design(basis, grid)
    slope = np.exp(np.asarray(v_coeffs, dtype=float) @ design)
    cumulative = np.concatenate(
        [[0.0], np.cumsum(0.5 * (slope[1:] + slope[:-1]) * np.diff(grid))]
    )
    normalized = cumulative / cumulative[-1]
    span = float(np.exp(F1tilde))
    values = F0 + span * normalized
    return WarpingFunction(
        grid=grid, values=values, F0=float(F0), F1=float(F0 + span)
    )


@dataclass
class PerXModel:
    """Chart pieces for one monitored fraction of the domain."""

    x_frac: float
    std_aligned: StandardizationModel
    std_warp: StandardizationModel
    scalar_means: np.ndarray  # (2,) for (start, log_span)
    scalar_sds: np.ndarray
    block_scale: np.ndarray  # (2,) multipliers for the functional blocks
    mfpca: MfpcaModel
    cl_t2: float
    cl_spe: float
    contrib_limits_t2: np.ndarray
    contrib_limits_spe: np.ndarray


@dataclass
class RtModel:
    """Phase I artifact for real-time monitoring."""

    template: Curve
    template_coeffs: np.ndarray
    lam: float
    config: FdtwConfig
    amp_basis: BasisSystem
    warp_basis: BasisSystem
    query_domain: tuple
    monitoring_grid: np.ndarray
    per_x: list
    alpha_star: float
    block_names: tuple = BLOCK_NAMES


def _mixed_blocks(amp_basis, warp_basis):
    ka, kw = amp_basis.K, warp_basis.K
    return [
        (slice(0, ka), amp_basis.gram),
        (slice(ka, ka + kw), warp_basis.gram),
        (slice(ka + kw, ka + kw + 1), np.ones((1, 1))),
        (slice(ka + kw + 1, ka + kw + 2), np.ones((1, 1))),
    ]


def _mixed_metric(amp_basis, warp_basis):
    ka, kw = amp_basis.K, warp_basis.K
    metric = np.zeros((ka + kw + 2, ka + kw + 2))
    metric[:ka, :ka] = amp_basis.gram
    metric[ka : ka + kw, ka : ka + kw] = warp_basis.gram
    metric[ka + kw, ka + kw] = 1.0
    metric[ka + kw + 1, ka + kw + 1] = 1.0
    return metric


def _curve_features(curve, template, config, amp_basis, warp_basis):
    """(aligned coeffs, clr coeffs, start, log span) for one truncated curve."""
    ratio = (curve.x[-1] - curve.x[0]) / (template.x[-1] - template.x[0])
    warp, aligned = align_curve(curve, template, config.scaled(ratio))
    t_grid = np.linspace(template.x[0], template.x[-1], config.grid_sizes[0])
    amp_coeffs = project_values(amp_basis, t_grid, aligned)
    v_coeffs, start, log_span = clr_transform(warp, warp_basis)
    return amp_coeffs, v_coeffs, start, log_span


def _fit_per_x(x_frac, features, train_idx, tune_idx, amp_basis, warp_basis,
               alpha_star, variance_fraction):
    amp_rows = np.stack([f[0] for f in features])
    warp_rows = np.stack([f[1] for f in features])
    scalars = np.array([[f[2], f[3]] for f in features])

    std_aligned = fit_standardization(
        FunctionalSample(amp_rows[train_idx], 1, amp_basis)
    )
    std_warp = fit_standardization(
        FunctionalSample(warp_rows[train_idx], 1, warp_basis)
    )
    means = scalars[train_idx].mean(axis=0)
    sds = scalars[train_idx].std(axis=0, ddof=1)
    scale_ref = np.abs(means) + sds
    sds = np.where(sds > 1e-12 * (scale_ref + 1.0), sds, 1.0)

    block_scale = np.array(
        [1.0 / np.sqrt(amp_basis.length), 1.0 / np.sqrt(warp_basis.length)]
    )

    def mixed_rows(idx):
        z_amp = standardize(amp_rows[idx], std_aligned) * block_scale[0]
        z_warp = standardize(warp_rows[idx], std_warp) * block_scale[1]
        z_scalar = (scalars[idx] - means) / sds
        return np.hstack([z_amp, z_warp, z_scalar])

    metric = _mixed_metric(amp_basis, warp_basis)
    train_rows = mixed_rows(train_idx)
    evals, coeffs, total = mfpca_core(train_rows, metric)
    model = MfpcaModel(
        basis=amp_basis,
        p=4,
        eig_coeffs=coeffs,
        eigenvalues=evals,
        total_variance=total,
        L=evals.size,
        metric=metric,
        score_proj=metric @ coeffs,
    )
    model.L = select_L(model, variance_fraction)

    blocks = _mixed_blocks(amp_basis, warp_basis)
    tune_rows = mixed_rows(tune_idx)
    t2, spe, c_t2, c_spe = _component_stats(tune_rows, model, model.L, blocks)
    alpha = alpha_star / 2.0
    return PerXModel(
        x_frac=float(x_frac),
        std_aligned=std_aligned,
        std_warp=std_warp,
        scalar_means=means,
        scalar_sds=sds,
        block_scale=block_scale,
        mfpca=model,
        cl_t2=empirical_limit(t2, alpha),
        cl_spe=empirical_limit(spe, alpha),
        contrib_limits_t2=np.array([empirical_limit(c_t2[:, k], alpha) for k in range(4)]),
        contrib_limits_spe=np.array([empirical_limit(c_spe[:, k], alpha) for k in range(4)]),
    )


def frtm_phase1(
    curves,
    monitoring_grid=None,
    alpha_star: float = 0.05,
    config: FdtwConfig | None = None,
    lambda_grid=None,
    split: float = 0.7,
    seed=0,
    amp_dim: int = 20,
    warp_dim: int = 12,
    variance_fraction: float = 0.8,
    template_iter: int = 10,
) -> RtModel:
    """Template, penalty weight and per-fraction chart family from full curves."""
    curves = [c if isinstance(c, Curve) else Curve(*c) for c in curves]
    if len(curves) < 30:
        raise InsufficientSample("real-time Phase I needs at least 30 curves")
    config = config or FdtwConfig()
    if monitoring_grid is None:
        monitoring_grid = np.linspace(0.3, 1.0, 20)
    monitoring_grid = np.sort(np.asarray(monitoring_grid, dtype=float).ravel())
    if monitoring_grid.size == 0 or monitoring_grid[0] <= 0 or monitoring_grid[-1] > 1:
        raise InvalidConfiguration("monitoring grid must lie in (0, 1]")

    template_fit = procrustes_template(curves, config, max_iter=template_iter)
    template = template_fit.curve
    if lambda_grid is not None:
        lam = select_lambda_acd(curves, template, config, lambda_grid)
        config = replace(config, lam=lam)

    amp_basis = build_basis(template.domain, K=amp_dim, order=4)
    warp_basis = build_basis(template.domain, K=warp_dim, order=4)
    template_coeffs = project_values(amp_basis, template.x, template.y)

    a = min(c.x[0] for c in curves)
    b = max(c.x[-1] for c in curves)
    train_idx, tune_idx = split_indices(len(curves), split, seed)
    if tune_idx.size < 20:
        raise InsufficientSample("tuning set too small for per-fraction limits")

    def fit_one(x_frac):
        cutoff = a + x_frac * (b - a)
        features = [
            _curve_features(c.truncated(cutoff), template, config, amp_basis, warp_basis)
            for c in curves
        ]
        return _fit_per_x(
            x_frac, features, train_idx, tune_idx, amp_basis, warp_basis,
            alpha_star, variance_fraction,
        )

    per_x = parallel_map(fit_one, monitoring_grid)
    return RtModel(
        template=template,
        template_coeffs=template_coeffs,
        lam=config.lam,
        config=config,
        amp_basis=amp_basis,
        warp_basis=warp_basis,
        query_domain=(float(a), float(b)),
        monitoring_grid=monitoring_grid,
        per_x=per_x,
        alpha_star=alpha_star,
    )


def frtm_phase2(partial_curve, model: RtModel, observed_up_to=None) -> MonitoringOutcome:
    """Chart evaluation of a curve observed up to some fraction of its domain.

    The nearest monitored fraction at or below the observed horizon is
    used; its limits and model apply.  ``observed_up_to`` is the domain
    point the process has reached; it defaults to one median sampling step
    past the last sample (the next sample has not arrived yet).  The
    outcome context carries the fraction.
    """
    curve = partial_curve if isinstance(partial_curve, Curve) else Curve(*partial_curve)
    a, b = model.query_domain
    if observed_up_to is None:
        observed_up_to = curve.x[-1] + float(np.median(np.diff(curve.x)))
    fraction = (observed_up_to - a) / (b - a)
    eligible = model.monitoring_grid[model.monitoring_grid <= fraction + 1e-9]
    if eligible.size == 0:
        raise NotYetMonitorable(
            f"observed fraction {fraction:.3f} below the first monitored point "
            f"{model.monitoring_grid[0]:.3f}"
        )
    x_frac = float(eligible[-1])
    per_x = model.per_x[int(np.searchsorted(model.monitoring_grid, x_frac))]

    cutoff = a + x_frac * (b - a)
    truncated = curve.truncated(cutoff)
    amp_c, v_c, start, log_span = _curve_features(
        truncated, model.template, model.config, model.amp_basis, model.warp_basis
    )
    z_amp = standardize(amp_c, per_x.std_aligned) * per_x.block_scale[0]
    z_warp = standardize(v_c, per_x.std_warp) * per_x.block_scale[1]
    z_scalar = (np.array([start, log_span]) - per_x.scalar_means) / per_x.scalar_sds
    row = np.concatenate([z_amp, z_warp, z_scalar])

    blocks = _mixed_blocks(model.amp_basis, model.warp_basis)
    t2, spe, c_t2, c_spe = _component_stats(row, per_x.mfpca, per_x.mfpca.L, blocks)
    t2, spe = float(t2[0]), float(spe[0])
    c_t2, c_spe = c_t2[0], c_spe[0]
    signal_t2 = t2 > per_x.cl_t2
    signal_spe = spe > per_x.cl_spe
    flagged = set()
    if signal_t2:
        flagged.update(np.nonzero(c_t2 > per_x.contrib_limits_t2)[0].tolist())
    if signal_spe:
        flagged.update(np.nonzero(c_spe > per_x.contrib_limits_spe)[0].tolist())
    return MonitoringOutcome(
        t2=t2,
        spe=spe,
        signal_t2=signal_t2,
        signal_spe=signal_spe,
        contrib_t2=c_t2,
        contrib_spe=c_spe,
        flagged_components=tuple(sorted(flagged)),
        context={"x": x_frac, "blocks": model.block_names},
    )
