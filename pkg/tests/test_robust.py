import numpy as np
import pytest
from scipy.stats import chi2

from funmon.basis import build_basis, project_values
from funmon.errors import CannotInitializeImputation, InsufficientSample
from funmon.mfpca import FunctionalSample, fit_mfpca, fit_standardization, standardize
from funmon.monitoring import phase1_fit, phase2_evaluate, statistics_for_rows
from funmon.robust import (
    apply_filter_mask,
    fit_robust_standardization,
    fit_romfpca,
    functional_filter,
    impute,
    romfcc_phase1,
    romfcc_phase2,
)


@pytest.fixture(scope="module")
def basis():
    return build_basis((0.0, 1.0), K=8, order=4)


def gp_rows(basis, n, p, seed, length_scale=0.25, mean_shift=0.0):
    rng = np.random.default_rng(seed)
    grid = np.linspace(*basis.domain, 120)
    cov = np.exp(-((grid[:, None] - grid[None, :]) ** 2) / (2 * length_scale**2))
    cov += 1e-10 * np.eye(grid.size)
    chol = np.linalg.cholesky(cov)
    rows = np.empty((n, p * basis.K))
    for k in range(p):
        vals = mean_shift + rng.normal(size=(n, grid.size)) @ chol.T
        rows[:, k * basis.K : (k + 1) * basis.K] = project_values(basis, grid, vals)
    return rows


def contaminate_casewise(rows, fraction, magnitude, basis, p, seed):
    rng = np.random.default_rng(seed)
    n = rows.shape[0]
    count = int(np.ceil(fraction * n))
    idx = rng.choice(n, size=count, replace=False)
    grid = np.linspace(*basis.domain, 120)
    bump = project_values(basis, grid, np.ones(grid.size))
    out = rows.copy()
    for k in range(p):
        out[np.ix_(idx, range(k * basis.K, (k + 1) * basis.K))] += magnitude * bump
    return out, idx


# ------------------------------------------------------------------ romfpca


def test_clean_data_matches_classical_eigenvalues(basis):
    rows = gp_rows(basis, 500, 2, seed=0)
    sample = FunctionalSample(rows, 2, basis)
    classical = fit_mfpca(sample)
    robust = fit_romfpca(sample, seed=1)
    m = min(4, robust.n_components, classical.n_components)
    rel = np.abs(robust.eigenvalues[:m] - classical.eigenvalues[:m]) / classical.eigenvalues[:m]
    assert rel.max() < 0.15


def test_contamination_leaves_leading_eigenfunction(basis):
    clean = gp_rows(basis, 300, 2, seed=2)
    clean_model = fit_mfpca(FunctionalSample(clean, 2, basis))
    sigma = np.sqrt(clean_model.eigenvalues[0])
    bad, _ = contaminate_casewise(clean, 0.2, 10 * sigma, basis, 2, seed=3)
    sample_bad = FunctionalSample(bad, 2, basis)
    robust = fit_romfpca(sample_bad, seed=4)
    classical_bad = fit_mfpca(sample_bad)

    metric = robust.metric

    def angle(u, v):
        cosang = abs(u @ metric @ v) / np.sqrt((u @ metric @ u) * (v @ metric @ v))
        return np.degrees(np.arccos(min(cosang, 1.0)))

    ang_robust = angle(robust.eig_coeffs[:, 0], clean_model.eig_coeffs[:, 0])
    ang_classical = angle(classical_bad.eig_coeffs[:, 0], clean_model.eig_coeffs[:, 0])
    assert ang_robust <= 10.0
    assert ang_robust < ang_classical


def test_identical_rows_degenerate(basis):
    rows = np.tile(gp_rows(basis, 1, 1, seed=5), (20, 1))
    model = fit_romfpca(FunctionalSample(rows, 1, basis), seed=6)
    assert model.eigenvalues.size == 0
    assert model.total_variance == 0.0
    assert np.all(model.case_weights == 1.0)


def test_romfpca_orthonormal_under_contamination(basis):
    rows = gp_rows(basis, 200, 2, seed=7)
    bad, _ = contaminate_casewise(rows, 0.3, 8.0, basis, 2, seed=8)
    model = fit_romfpca(FunctionalSample(bad, 2, basis), seed=9)
    prod = model.eig_coeffs.T @ model.metric @ model.eig_coeffs
    assert np.abs(prod - np.eye(prod.shape[0])).max() < 1e-8


def test_insufficient_sample(basis):
    rows = gp_rows(basis, 5, 1, seed=10)
    with pytest.raises(InsufficientSample):
        fit_romfpca(FunctionalSample(rows, 1, basis))


# ------------------------------------------------------------------- filter


def test_filter_clean_data_low_flag_rate(basis):
    rows = gp_rows(basis, 1000, 2, seed=11)
    report = functional_filter(FunctionalSample(rows, 2, basis), seed=12)
    assert report.d_n.max() <= 0.02
    assert report.flagged.mean() <= 0.02


def test_filter_catches_componentwise_shift(basis):
    rows = gp_rows(basis, 400, 2, seed=13)
    z_like = rows.copy()
    rng = np.random.default_rng(14)
    idx = rng.choice(400, size=40, replace=False)
    grid = np.linspace(*basis.domain, 120)
    # shift 10 pointwise standard deviations on component 0 only
    std0 = fit_standardization(FunctionalSample(rows, 2, basis))
    from funmon.basis import evaluate_design

    design = evaluate_design(basis, std0.grid())
    sd_fn = np.sqrt(np.maximum(std0.var_coeffs[0] @ design, std0.floor))
    bump = project_values(basis, std0.grid(), 10.0 * sd_fn)
    z_like[np.ix_(idx, range(basis.K))] += bump
    report = functional_filter(FunctionalSample(z_like, 2, basis), seed=15)
    hit = report.flagged[idx, 0].mean()
    clean_mask = np.ones(400, dtype=bool)
    clean_mask[idx] = False
    false_comp0 = report.flagged[clean_mask, 0].mean()
    false_comp1 = report.flagged[:, 1].mean()
    assert hit >= 0.9
    assert false_comp0 <= 0.02 and false_comp1 <= 0.02


def test_filter_threshold_quantile():
    assert chi2.ppf(0.95, 2) == pytest.approx(5.991464547107979)


def test_filter_equivariant_to_component_rescaling(basis):
    rows = gp_rows(basis, 200, 2, seed=16)
    scaled = rows.copy()
    scaled[:, : basis.K] *= 37.0
    r1 = functional_filter(FunctionalSample(rows, 2, basis), seed=17)
    r2 = functional_filter(FunctionalSample(scaled, 2, basis), seed=17)
    assert np.array_equal(r1.flagged, r2.flagged)


def test_flag_count_matches_ceiling_rule(basis):
    rows = gp_rows(basis, 321, 2, seed=18)
    report = functional_filter(FunctionalSample(rows, 2, basis), seed=19)
    for k in range(2):
        assert report.flagged[:, k].sum() == int(np.ceil(321 * report.d_n[k]))


# --------------------------------------------------------------- imputation


def test_impute_no_missing_identity(basis):
    rows = gp_rows(basis, 50, 2, seed=20)
    sample = FunctionalSample(rows, 2, basis)
    model = fit_romfpca(sample, seed=21)
    out = impute(sample, model, noise=True, seed=22)
    assert np.array_equal(out.coeffs, rows)


def test_impute_recovers_correlated_component(basis):
    # rank-one construction: two perfectly correlated components, so the
    # missing block is an exact linear function of the observed one
    rng = np.random.default_rng(23)
    grid = np.linspace(0, 1, 120)
    g = project_values(basis, grid, np.sin(np.pi * grid) + 0.4 * grid)
    weights = rng.normal(size=120)
    base = np.outer(weights, g)
    rows = np.hstack([base, base])
    sample = FunctionalSample(rows, 2, basis)
    model = fit_romfpca(sample, seed=25)
    masked = rows.copy()
    masked[3, basis.K :] = np.nan
    out = impute(FunctionalSample(masked, 2, basis), model, noise=False)
    err = np.abs(out.coeffs[3, basis.K :] - rows[3, basis.K :]).max()
    assert err < 1e-6 * max(1.0, np.abs(rows[3]).max())


def test_impute_exact_within_retained_span(basis):
    # general-rank data, full retained span: conditional mean is exact for a
    # missing block that is a linear function of the observed blocks
    base = gp_rows(basis, 120, 1, seed=24)
    rows = np.hstack([base, base])
    model = fit_romfpca(FunctionalSample(rows, 2, basis), seed=25)
    masked = rows.copy()
    masked[3, basis.K :] = np.nan
    out = impute(
        FunctionalSample(masked, 2, basis), model, L_imp=model.n_components, noise=False
    )
    err = np.abs(out.coeffs[3, basis.K :] - rows[3, basis.K :]).max()
    assert err < 1e-6 * max(1.0, np.abs(rows[3]).max())


def test_impute_beats_mean_imputation(basis):
    rng = np.random.default_rng(26)
    n = 200
    base = gp_rows(basis, n, 1, seed=27)
    other = 0.8 * base + 0.2 * gp_rows(basis, n, 1, seed=28)
    rows = np.hstack([base, other])
    sample = FunctionalSample(rows, 2, basis)
    model = fit_romfpca(sample, seed=29)
    gram = basis.gram

    sq_err_model = []
    sq_err_mean = []
    mean_block = rows[:, basis.K :].mean(axis=0)
    for trial in range(60):
        i = rng.integers(0, n)
        masked = rows.copy()
        masked[i, basis.K :] = np.nan
        out = impute(FunctionalSample(masked, 2, basis), model, noise=False)
        diff = out.coeffs[i, basis.K :] - rows[i, basis.K :]
        sq_err_model.append(diff @ gram @ diff)
        diff_mean = mean_block - rows[i, basis.K :]
        sq_err_mean.append(diff_mean @ gram @ diff_mean)
    assert np.mean(sq_err_model) < np.mean(sq_err_mean)


def test_impute_noise_is_seeded(basis):
    rows = gp_rows(basis, 80, 2, seed=30)
    sample = FunctionalSample(rows, 2, basis)
    model = fit_romfpca(sample, seed=31)
    masked = rows.copy()
    masked[5, : basis.K] = np.nan
    m_sample = FunctionalSample(masked, 2, basis)
    a = impute(m_sample, model, noise=True, seed=7)
    b = impute(m_sample, model, noise=True, seed=7)
    c = impute(m_sample, model, noise=True, seed=8)
    assert np.array_equal(a.coeffs, b.coeffs)
    assert not np.array_equal(a.coeffs, c.coeffs)


def test_impute_requires_complete_rows(basis):
    rows = gp_rows(basis, 30, 2, seed=32)
    model = fit_romfpca(FunctionalSample(rows, 2, basis), seed=33)
    masked = rows.copy()
    masked[:, : basis.K] = np.nan  # every row misses component 0
    with pytest.raises(CannotInitializeImputation):
        impute(FunctionalSample(masked, 2, basis), model)


# ------------------------------------------------------------------ phase I/II


def test_parametric_t2_limit(basis):
    rows = gp_rows(basis, 200, 2, seed=34)
    model = romfcc_phase1(FunctionalSample(rows, 2, basis), alpha_star=0.05, seed=35)
    assert model.cl_t2 == pytest.approx(chi2.ppf(0.975, model.mfpca.L))


def test_romfcc_ic_false_alarm_rate(basis):
    rows = gp_rows(basis, 600, 2, seed=36)
    model = romfcc_phase1(FunctionalSample(rows, 2, basis), alpha_star=0.05, seed=37)
    fresh = gp_rows(basis, 2000, 2, seed=38)
    z = standardize(fresh, model.standardization)
    t2, spe, _, _ = statistics_for_rows(z, model.mfpca)
    rate = np.mean((t2 > model.cl_t2) | (spe > model.cl_spe))
    assert 0.03 <= rate <= 0.07


def test_robust_beats_nonrobust_under_contamination(basis):
    """Paired comparison on contaminated Phase I data (reduced-size check)."""
    wins = 0
    trials = 12
    for rep in range(trials):
        clean = gp_rows(basis, 150, 2, seed=100 + rep)
        ref_model = fit_mfpca(FunctionalSample(clean, 2, basis))
        sigma = np.sqrt(ref_model.eigenvalues[0])
        contaminated, _ = contaminate_casewise(clean, 0.15, 6 * sigma, basis, 2, seed=200 + rep)
        sample = FunctionalSample(contaminated, 2, basis)

        robust_model = romfcc_phase1(sample, alpha_star=0.05, seed=300 + rep)
        plain_model = phase1_fit(sample, alpha_star=0.05, seed=300 + rep)

        shifted = gp_rows(basis, 60, 2, seed=400 + rep, mean_shift=2.0 * sigma)
        zr = standardize(shifted, robust_model.standardization)
        t2r, sper, _, _ = statistics_for_rows(zr, robust_model.mfpca)
        rate_robust = np.mean((t2r > robust_model.cl_t2) | (sper > robust_model.cl_spe))
        zp = standardize(shifted, plain_model.standardization)
        t2p, spep, _, _ = statistics_for_rows(zp, plain_model.mfpca)
        rate_plain = np.mean((t2p > plain_model.cl_t2) | (spep > plain_model.cl_spe))
        wins += rate_robust > rate_plain
    assert wins >= 0.7 * trials


def test_romfcc_phase2_outcome(basis):
    rows = gp_rows(basis, 200, 2, seed=40)
    model = romfcc_phase1(FunctionalSample(rows, 2, basis), seed=41)
    out = romfcc_phase2(rows[0], model)
    assert np.isfinite(out.t2) and np.isfinite(out.spe)
    assert model.kind == "romfcc"


def test_robust_standardization_resists_outliers(basis):
    rows = gp_rows(basis, 300, 1, seed=42)
    bad = rows.copy()
    bad[:30] += 50.0  # huge casewise shift
    clean_std = fit_robust_standardization(FunctionalSample(rows, 1, basis))
    bad_std = fit_robust_standardization(FunctionalSample(bad, 1, basis))
    rel = np.abs(bad_std.mean_coeffs - clean_std.mean_coeffs).max()
    assert rel < 0.5  # classical mean would move by ~5.0
