"""Outlier-resistant monitoring: robust PCA, filtering and imputation.

The pipeline tolerates two contamination patterns in the reference sample:
whole anomalous observations (casewise) are down-weighted by a
projection-pursuit robust PCA, while contamination confined to single
components (componentwise) is flagged by a per-component functional filter
and rebuilt by a conditional-expectation imputation.  Control limits come
from parametric score-normality approximations instead of empirical
quantiles, which contamination would inflate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from ._parallel import parallel_map
from .basis import block_gram, evaluate_design, project_values
from .errors import (
    CannotInitializeImputation,
    DegenerateModel,
    InsufficientSample,
    InvalidConfiguration,
)
from .mfpca import (
    FunctionalSample,
    MfpcaModel,
    StandardizationModel,
    default_grid_size,
    scores,
    select_L,
    standardize,
    unstandardize,
)
from .monitoring import MonitoringModel, MonitoringOutcome, empirical_limit, phase2_evaluate, statistics_for_rows

__all__ = [
    "RobustPcaModel",
    "FilterReport",
    "fit_robust_standardization",
    "fit_romfpca",
    "functional_filter",
    "apply_filter_mask",
    "impute",
    "romfcc_phase1",
    "romfcc_phase2",
]


@dataclass
class RobustPcaModel(MfpcaModel):
    """MFPCA eigenstructure estimated with outlier resistance.

    ``case_weights`` marks rows kept by the reweighting pass (1) or
    excluded (0); ``outlyingness`` holds the projection-pursuit depth used
    to pick the clean subset; ``location`` is the robust center in
    coefficient space.
    """

    case_weights: np.ndarray = None
    outlyingness: np.ndarray = None
    location: np.ndarray = None


@dataclass
class FilterReport:
    """Componentwise outlier flags produced by the functional filter."""

    flagged: np.ndarray  # (n, p) bool
    distances: np.ndarray  # (n, p)
    d_n: np.ndarray  # (p,) flagged proportions
    L_fil: np.ndarray  # (p,) score-space dimension per component
    alpha_fil: float


def fit_robust_standardization(sample: FunctionalSample, grid_size=None) -> StandardizationModel:
    """Pointwise median / scaled-MAD standardization, projected onto the basis.

    The MAD is scaled by 1.4826 for consistency at the Gaussian model, so
    the variance function matches :func:`fit_standardization` on clean data.
    """
    if sample.n < 2:
        raise InsufficientSample("standardization needs at least 2 observations")
    basis = sample.basis
    if grid_size is None:
        grid_size = default_grid_size(basis)
    grid = np.linspace(*basis.domain, grid_size)
    design = evaluate_design(basis, grid)

    p, K = sample.p, basis.K
    mean_coeffs = np.empty((p, K))
    var_grid = np.empty((p, grid_size))
    data_scale = 1.0
    for k in range(p):
        values = sample.block(k) @ design
        med = np.median(values, axis=0)
        mad = np.median(np.abs(values - med), axis=0)
        mean_coeffs[k] = project_values(basis, grid, med)
        var_grid[k] = (1.4826 * mad) ** 2
        data_scale = max(data_scale, float(np.abs(values).max()) ** 2)

    vmax = float(var_grid.max())
    floor = 1e-10 * vmax if vmax > 1e-24 * data_scale else 1e-10 * data_scale
    var_coeffs = np.empty((p, K))
    for k in range(p):
        var_coeffs[k] = project_values(basis, grid, np.maximum(var_grid[k], floor))
        lift = floor - (var_coeffs[k] @ design).min()
        if lift > 0:
            var_coeffs[k] += lift
    return StandardizationModel(
        mean_coeffs=mean_coeffs,
        var_coeffs=var_coeffs,
        floor=floor,
        basis=basis,
        grid_size=grid_size,
    )


def _consistency_factor(retain_fraction: float, dim: int) -> float:
    """Variance inflation correcting hard trimming of a Gaussian sample."""
    if retain_fraction >= 1.0:
        return 1.0
    quantile = chi2.ppf(retain_fraction, dim)
    return retain_fraction / chi2.cdf(quantile, dim + 2)


def _stahel_donoho(points, n_dirs, rng):
    """Outlyingness via random projection directions through data pairs."""
    n = points.shape[0]
    out = np.zeros(n)
    generated = 0
    attempts = 0
    while generated < n_dirs and attempts < 20 * n_dirs:
        attempts += 1
        i, j = rng.integers(0, n, size=2)
        direction = points[i] - points[j]
        norm = np.linalg.norm(direction)
        if norm < 1e-12:
            continue
        proj = points @ (direction / norm)
        med = np.median(proj)
        mad = 1.4826 * np.median(np.abs(proj - med))
        if mad < 1e-12 * (1.0 + abs(med)):
            continue
        out = np.maximum(out, np.abs(proj - med) / mad)
        generated += 1
    return out


def fit_romfpca(
    sample: FunctionalSample,
    h_fraction: float = 0.75,
    n_dirs: int = 500,
    seed=0,
) -> RobustPcaModel:
    """Projection-pursuit robust PCA of a functional sample.

    Pipeline on the Gram-transformed coefficient rows: (1) reduce to the
    affine span of the data, (2) rank rows by Stahel-Donoho outlyingness
    over a seeded set of directions through data pairs, (3) estimate the
    covariance from the ceil(h_fraction * n) least outlying rows,
    (4) eigendecompose, (5) one reweighting pass keeping rows whose score
    and orthogonal distances sit below Gaussian cutoffs.  Trimming bias is
    undone with chi-squared consistency factors, so eigenvalues are
    comparable to the classical ones on clean data.
    """
    if sample.n < 10:
        raise InsufficientSample("robust PCA needs at least 10 observations")
    if not 0.5 <= h_fraction < 1.0:
        raise InvalidConfiguration("h_fraction must lie in [0.5, 1)")
    if np.isnan(sample.coeffs).any():
        raise InvalidConfiguration("sample has missing blocks; impute first")

    basis, p = sample.basis, sample.p
    metric = block_gram(basis, p)
    gram_sqrt, gram_inv_sqrt = _metric_sqrt_pair(metric)
    rows = sample.coeffs @ gram_sqrt
    n, d = rows.shape

    center0 = rows.mean(axis=0)
    shifted = rows - center0
    u, s, vt = np.linalg.svd(shifted, full_matrices=False)
    # absolute reference guards against identical rows, where the centered
    # matrix is pure rounding noise
    scale = max(float(s[0]) if s.size else 0.0, float(np.abs(rows).max()), 1.0)
    rank = int(np.sum(s > 1e-10 * scale))
    if rank == 0:
        # all rows identical: degenerate spectrum, every weight 1
        return RobustPcaModel(
            basis=basis,
            p=p,
            eig_coeffs=np.zeros((d, 0)),
            eigenvalues=np.zeros(0),
            total_variance=0.0,
            L=0,
            metric=metric,
            score_proj=np.zeros((d, 0)),
            case_weights=np.ones(n),
            outlyingness=np.zeros(n),
            location=gram_inv_sqrt @ center0,
        )
    span = vt[:rank].T  # (d, rank)
    reduced = shifted @ span

    rng = np.random.default_rng(seed)
    outlyingness = _stahel_donoho(reduced, n_dirs, rng)
    h = int(np.ceil(h_fraction * n))
    keep = np.argsort(outlyingness, kind="stable")[:h]
    subset = reduced[keep]
    mu_h = subset.mean(axis=0)
    cov_h = (subset - mu_h).T @ (subset - mu_h) / (h - 1)
    cov_h *= _consistency_factor(h / n, rank)

    evals_h, evecs_h = np.linalg.eigh(cov_h)
    order = np.argsort(evals_h)[::-1]
    evals_h, evecs_h = np.maximum(evals_h[order], 0.0), evecs_h[:, order]
    if evals_h[0] <= 0:
        # degenerate clean subset (duplicated rows); keep it as the estimate
        evals_h = np.full(1, 1e-300)
        evecs_h = evecs_h[:, :1]
    pos = evals_h > 1e-12 * evals_h[0]
    k0 = int(np.sum(np.cumsum(evals_h) / evals_h.sum() < 0.99)) + 1
    k0 = min(max(k0, 1), max(int(pos.sum()), 1))

    # reweighting: score distance inside the k0-dim subspace + orthogonal
    # distance to it; both compared to Gaussian cutoffs
    basis_k = evecs_h[:, :k0]
    centered = reduced - mu_h
    score = centered @ basis_k
    sd = np.sqrt(np.sum(score**2 / evals_h[:k0], axis=1))
    ortho = centered - score @ basis_k.T
    od = np.linalg.norm(ortho, axis=1)
    sd_cut = np.sqrt(chi2.ppf(0.975, k0))
    if od.max() > 1e-12:
        od23 = od ** (2 / 3)
        od_cut = (
            np.median(od23) + 1.4826 * np.median(np.abs(od23 - np.median(od23))) * 2.2414
        ) ** 1.5  # z_0.9875 = 2.2414, Hubert-style orthogonal cutoff
        weights = ((sd <= sd_cut) & (od <= od_cut)).astype(float)
    else:
        weights = (sd <= sd_cut).astype(float)
    if weights.sum() < max(rank + 1, 2):
        weights = np.zeros(n)
        weights[keep] = 1.0

    kept_rows = reduced[weights == 1]
    mu_w = kept_rows.mean(axis=0)
    cov_w = (kept_rows - mu_w).T @ (kept_rows - mu_w) / (kept_rows.shape[0] - 1)
    cov_w *= _consistency_factor(0.975, k0)

    evals, evecs = np.linalg.eigh(cov_w)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]
    total = float(evals.sum())
    limit = min(kept_rows.shape[0] - 1, rank)
    tol = 1e-12 * evals[0] if evals.size and evals[0] > 0 else 0.0
    n_keep = int(np.sum(evals[:limit] > tol))
    evals = evals[:n_keep]

    coeffs = gram_inv_sqrt @ (span @ evecs[:, :n_keep])
    for l in range(n_keep):
        idx = int(np.argmax(np.abs(coeffs[:, l])))
        if coeffs[idx, l] < 0:
            coeffs[:, l] = -coeffs[:, l]
    return RobustPcaModel(
        basis=basis,
        p=p,
        eig_coeffs=coeffs,
        eigenvalues=evals,
        total_variance=total,
        L=n_keep,
        metric=metric,
        score_proj=metric @ coeffs,
        case_weights=weights,
        outlyingness=outlyingness,
        location=gram_inv_sqrt @ (center0 + span @ mu_w),
    )


def _metric_sqrt_pair(metric):
    vals, vecs = np.linalg.eigh(metric)
    root = np.sqrt(np.maximum(vals, 0.0))
    return (vecs * root) @ vecs.T, (vecs / root) @ vecs.T


def _flag_proportion(distances, dof, alpha):
    """Excess upper-tail mass of the distances over the chi-squared reference.

    Computes sup over x >= threshold of (G(x) - G_n(x))+ with G the
    chi-squared CDF and G_n the empirical CDF; the sup is approached at the
    threshold and at the left limits of the empirical jumps.
    """
    n = distances.size
    ordered = np.sort(distances)
    threshold = chi2.ppf(alpha, dof)
    best = chi2.cdf(threshold, dof) - np.searchsorted(ordered, threshold, side="right") / n
    tail = ordered[ordered >= threshold]
    if tail.size:
        below = np.searchsorted(ordered, tail, side="left")
        best = max(best, float(np.max(chi2.cdf(tail, dof) - below / n)))
    return max(best, 0.0)


def functional_filter(
    sample: FunctionalSample,
    L_fil=None,
    alpha_fil: float = 0.95,
    std_model: StandardizationModel | None = None,
    h_fraction: float = 0.75,
    seed=0,
) -> FilterReport:
    """Flag componentwise outliers by per-component robust score distances.

    Each component is standardized robustly and given its own robust PCA;
    the squared score distance over ``L_fil`` components is compared to its
    chi-squared reference and the excess-tail proportion of largest
    distances is flagged.  ``L_fil`` defaults to 99% robust variance
    coverage per component.
    """
    basis, p, n = sample.basis, sample.p, sample.n
    if std_model is None:
        std_model = fit_robust_standardization(sample)

    def run_component(k):
        block = FunctionalSample(sample.block(k), 1, basis)
        comp_std = StandardizationModel(
            mean_coeffs=std_model.mean_coeffs[k : k + 1],
            var_coeffs=std_model.var_coeffs[k : k + 1],
            floor=std_model.floor,
            basis=basis,
            grid_size=std_model.grid_size,
        )
        z = standardize(block.coeffs, comp_std)
        model = fit_romfpca(FunctionalSample(z, 1, basis), h_fraction, seed=seed + k)
        if model.n_components == 0:
            return np.zeros(n), 1
        L_k = L_fil if L_fil is not None else select_L(model, 0.99)
        L_k = min(int(L_k), model.n_components)
        s = scores(z, model, L_k)
        dist = np.sum(s * s / model.eigenvalues[:L_k], axis=1)
        return dist, L_k

    results = parallel_map(run_component, range(p))
    distances = np.column_stack([r[0] for r in results])
    dims = np.array([r[1] for r in results])
    flagged = np.zeros((n, p), dtype=bool)
    d_n = np.zeros(p)
    for k in range(p):
        d_n[k] = _flag_proportion(distances[:, k], dims[k], alpha_fil)
        count = int(np.ceil(n * d_n[k]))
        if count > 0:
            worst = np.argsort(distances[:, k], kind="stable")[::-1][:count]
            flagged[worst, k] = True
    return FilterReport(
        flagged=flagged, distances=distances, d_n=d_n, L_fil=dims, alpha_fil=alpha_fil
    )


def apply_filter_mask(sample: FunctionalSample, flagged) -> FunctionalSample:
    """Replace flagged component blocks with missing markers."""
    K = sample.basis.K
    coeffs = sample.coeffs.copy()
    for k in range(sample.p):
        coeffs[flagged[:, k], k * K : (k + 1) * K] = np.nan
    return FunctionalSample(coeffs, sample.p, sample.basis)


def impute(
    sample: FunctionalSample,
    model: RobustPcaModel,
    L_imp=None,
    noise: bool = True,
    seed=0,
) -> FunctionalSample:
    """Fill missing component blocks from the fitted eigenstructure.

    Rows are processed in increasing missing-count order (ties by row
    index).  Each missing block gets the conditional expectation under the
    rank-``L_imp`` covariance model sum(eigenvalue_l * b_l b_l'), i.e. the
    completion minimizing the Mahalanobis distance of the completed row
    among observations consistent with the observed blocks.  With ``noise``
    on, a Gaussian draw with the conditional covariance (plus the average
    residual variance on the unexplained directions) is added to counter
    deterministic-imputation bias.  The fitted model is never updated
    during the sweep.
    """
    K = sample.basis.K
    p = sample.p
    coeffs = sample.coeffs.copy()
    missing_blocks = np.zeros((sample.n, p), dtype=bool)
    for k in range(p):
        block_nan = np.isnan(coeffs[:, k * K : (k + 1) * K])
        some, whole = block_nan.any(axis=1), block_nan.all(axis=1)
        if np.any(some & ~whole):
            raise InvalidConfiguration("partially missing component block")
        missing_blocks[:, k] = whole
    counts = missing_blocks.sum(axis=1)
    if np.any(counts == p):
        raise CannotInitializeImputation("a row has every component missing")
    if not (counts == 0).any() and counts.max() > 0:
        raise CannotInitializeImputation("no fully observed rows")

    if L_imp is None:
        L_imp = select_L(model, 0.99) if model.n_components else 0
    L_imp = min(int(L_imp), model.n_components)
    if counts.max() == 0:
        return FunctionalSample(coeffs, p, sample.basis)
    if L_imp == 0 or np.any(model.eigenvalues[:L_imp] <= 0):
        raise DegenerateModel("imputation needs positive eigenvalues")

    # rank-L_imp covariance plus the average residual eigenvalue spread as
    # white L2 noise; the regularization keeps the conditioning well-posed
    # when observed blocks carry energy outside the retained span
    B = model.eig_coeffs[:, :L_imp]
    location = model.location if model.location is not None else np.zeros(p * K)
    resid = model.eigenvalues[L_imp:]
    dims = model.eig_coeffs.shape[0]
    noise_scale = float(resid.sum() / max(dims - L_imp, 1))
    ridge = max(noise_scale, 1e-10 * float(model.eigenvalues[0]))
    cov_model = (B * model.eigenvalues[:L_imp]) @ B.T + ridge * np.linalg.inv(
        model.metric
    )

    rng = np.random.default_rng(seed)
    order = np.lexsort((np.arange(sample.n), counts))
    for i in order:
        if counts[i] == 0:
            continue
        miss = np.nonzero(missing_blocks[i])[0]
        obs = np.nonzero(~missing_blocks[i])[0]
        idx_m = np.concatenate([np.arange(k * K, (k + 1) * K) for k in miss])
        idx_o = np.concatenate([np.arange(k * K, (k + 1) * K) for k in obs])
        sigma_oo = cov_model[np.ix_(idx_o, idx_o)]
        sigma_mo = cov_model[np.ix_(idx_m, idx_o)]
        centered_obs = coeffs[i, idx_o] - location[idx_o]
        gain = sigma_mo @ np.linalg.inv(sigma_oo)
        filled = location[idx_m] + gain @ centered_obs
        if noise:
            cond_cov = cov_model[np.ix_(idx_m, idx_m)] - gain @ sigma_mo.T
            cond_cov = 0.5 * (cond_cov + cond_cov.T)
            filled = filled + rng.multivariate_normal(
                np.zeros(filled.size), cond_cov, method="eigh"
            )
        coeffs[i, idx_m] = filled
    return FunctionalSample(coeffs, p, sample.basis)


def romfcc_phase1(
    reference: FunctionalSample,
    alpha_star: float = 0.05,
    variance_fraction: float = 0.8,
    h_fraction: float = 0.75,
    L_fil=None,
    alpha_fil: float = 0.95,
    L_imp=None,
    noise: bool = True,
    seed=0,
    grid_size=None,
) -> MonitoringModel:
    """Robust Phase I: filter, impute, robust PCA, parametric limits.

    T2 limits use the chi-squared quantile with L degrees of freedom;
    SPE limits use the two-moment scaled chi-squared approximation on the
    residual spectrum.  Contribution limits are empirical quantiles over
    the cleaned reference (the reference distribution after filtering and
    imputation).
    """
    if not 0 < alpha_star < 1:
        raise InvalidConfiguration("alpha_star must lie in (0, 1)")
    std_model = fit_robust_standardization(reference, grid_size)
    z = standardize(reference.coeffs, std_model)
    z_sample = FunctionalSample(z, reference.p, reference.basis)

    report = functional_filter(
        z_sample, L_fil=L_fil, alpha_fil=alpha_fil,
        std_model=_identity_standardization(std_model), h_fraction=h_fraction, seed=seed,
    )
    masked = apply_filter_mask(z_sample, report.flagged)
    # rows with every component flagged carry no information: drop them
    usable = ~report.flagged.all(axis=1)
    masked = FunctionalSample(masked.coeffs[usable], reference.p, reference.basis)
    complete_rows = ~np.isnan(masked.coeffs).any(axis=1)
    if complete_rows.sum() < 10:
        raise InsufficientSample("filter left fewer than 10 complete rows")
    imp_model = fit_romfpca(
        FunctionalSample(masked.coeffs[complete_rows], reference.p, reference.basis),
        h_fraction,
        seed=seed + 1000,
    )
    cleaned = impute(masked, imp_model, L_imp=L_imp, noise=noise, seed=seed + 2000)

    main = fit_romfpca(cleaned, h_fraction, seed=seed + 3000)
    if main.n_components == 0:
        raise DegenerateModel("robust spectrum is empty")
    main.L = select_L(main, variance_fraction)

    alpha = alpha_star / 2.0
    cl_t2 = float(chi2.ppf(1 - alpha, main.L))
    tail = main.residual_spectrum()
    theta1, theta2 = float(tail.sum()), float(np.sum(tail**2))
    if theta1 <= 0 or theta2 <= 0:
        raise DegenerateModel("no residual spectrum for the SPE limit")
    g = theta2 / theta1
    h_dof = theta1**2 / theta2
    cl_spe = float(g * chi2.ppf(1 - alpha, h_dof))

    _, _, c_t2, c_spe = statistics_for_rows(cleaned.coeffs, main, main.L)
    model = MonitoringModel(
        standardization=std_model,
        mfpca=main,
        cl_t2=cl_t2,
        cl_spe=cl_spe,
        contrib_limits_t2=np.array(
            [empirical_limit(c_t2[:, k], alpha) for k in range(reference.p)]
        ),
        contrib_limits_spe=np.array(
            [empirical_limit(c_spe[:, k], alpha) for k in range(reference.p)]
        ),
        alpha_star=alpha_star,
        kind="romfcc",
    )
    return model


def _identity_standardization(std_model: StandardizationModel) -> StandardizationModel:
    """No-op standardization matching an already standardized sample."""
    basis = std_model.basis
    grid = np.linspace(*basis.domain, std_model.grid_size)
    ones = project_values(basis, grid, np.ones(grid.size))
    p = std_model.mean_coeffs.shape[0]
    return StandardizationModel(
        mean_coeffs=np.zeros_like(std_model.mean_coeffs),
        var_coeffs=np.tile(ones, (p, 1)),
        floor=1e-12,
        basis=basis,
        grid_size=std_model.grid_size,
    )


def romfcc_phase2(obs, model: MonitoringModel) -> MonitoringOutcome:
    """Phase II evaluation; identical mechanics to the standard chart."""
    return phase2_evaluate(obs, model)
