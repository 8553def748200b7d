//! Model-implied covariances and the seven pointwise/averaged
//! goodness-of-fit indices.
//!
//! The observed vector at time `t` stacks the indicators and the covariates;
//! implied covariances propagate the structural recursion in coefficient
//! space, historical terms through the cumulative basis Grams, and treat the
//! covariate block as saturated (its sample moments are reproduced exactly).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{ModelContext, ParamSet};
use crate::linalg;
use crate::model::{
    CovariateEffect, CovariateValue, LoadingEffect, ValidatedModel,
};

#[derive(Debug, Error)]
pub enum GofError {
    #[error("evaluation grid is empty")]
    EmptyGrid,
    #[error("no grid point admits an estimable sample covariance")]
    NothingEstimable,
}

/// Pointwise fit indices at one grid time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointwiseIndices {
    pub t: f64,
    pub chi2: f64,
    pub f_ml: f64,
    pub chi2_null: f64,
    pub rmsea: f64,
    pub srmr: f64,
    pub gfi: f64,
    pub cfi: f64,
    pub ifi: f64,
    pub tli: f64,
    /// RMSEA radicand was negative and clipped to zero.
    pub rmsea_clipped: bool,
    /// TLI fell outside `[0, 1]`.
    pub tli_flagged: bool,
}

/// The pointwise curves plus domain averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GofReport {
    /// Indices at estimable grid points.
    pub pointwise: Vec<PointwiseIndices>,
    /// Grid points skipped because the local sample covariance was not
    /// estimable.
    pub skipped: Vec<f64>,
    pub df_model: f64,
    pub df_null: f64,
    pub k_model: usize,
    /// Number of observed variables entering the matrices (p + Q).
    pub p_observed: usize,
    pub n_subjects: usize,
    /// Averages over the estimable grid, in report order:
    /// χ²/df, RMSEA, SRMR, CFI, IFI, GFI, TLI.
    pub avg_chi2_over_df: f64,
    pub avg_rmsea: f64,
    pub avg_srmr: f64,
    pub avg_cfi: f64,
    pub avg_ifi: f64,
    pub avg_gfi: f64,
    pub avg_tli: f64,
}

// ---------------------------------------------------------------------------
// Implied covariance
// ---------------------------------------------------------------------------

/// Precomputed pieces for implied-covariance evaluation: coefficient-space
/// latent covariance and latent–covariate cross moments.
pub struct ImpliedCovContext {
    /// `qJ × qJ` coefficient covariance of the stacked factors.
    pub cov_eta: DMatrix<f64>,
    /// `qJ × Q` covariance between factor coefficients and raw covariates.
    pub cov_eta_x: DMatrix<f64>,
    /// `Q × Q` sample covariance of the raw covariates (saturated block).
    pub cov_xx: DMatrix<f64>,
}

/// Per-subject covariate feature vector: the quantity each covariate edge is
/// linear in (`x` itself, basis coefficients, or `h(x)`).
fn covariate_features(
    ctx: &ModelContext,
    i: usize,
) -> (Vec<DVector<f64>>, DVector<f64>) {
    let model = &ctx.model;
    let n_cov = model.n_covariates();
    let mut feats = Vec::with_capacity(n_cov);
    let mut raw = DVector::zeros(n_cov);
    for l in 0..n_cov {
        match &ctx.data.covariates[i][l] {
            CovariateValue::Scalar(x) => {
                raw[l] = *x;
                // Feature depends on how edges use it; store both the raw
                // value and, when needed, the smooth basis evaluation.
                if let Some(h) = ctx.smooth_bases.get(&l) {
                    let hv = h.eval((*x).clamp(h.domain().0, h.domain().1), 0).unwrap();
                    feats.push(hv);
                } else {
                    feats.push(DVector::from_element(1, *x));
                }
            }
            CovariateValue::Functional(coefs) => {
                raw[l] = 0.0; // replaced per-time in the x(t) block
                feats.push(coefs.clone());
            }
        }
    }
    (feats, raw)
}

/// Build the implied-covariance context at the fitted parameters.
pub fn implied_cov_context(ctx: &ModelContext, params: &ParamSet) -> ImpliedCovContext {
    let model = &ctx.model;
    let j = model.basis().dim();
    let q = model.q();
    let n = ctx.n_subjects().max(1);
    let n_cov = model.n_covariates();

    // Stack features and raw values across subjects; sample moments.
    let mut feat_dims = vec![0usize; n_cov];
    for i in 0..ctx.n_subjects().min(1).max(1).min(ctx.n_subjects()) {
        let (feats, _) = covariate_features(ctx, i);
        for (l, f) in feats.iter().enumerate() {
            feat_dims[l] = f.len();
        }
    }
    let total_feat: usize = feat_dims.iter().sum();
    let mut feat_mat = DMatrix::zeros(ctx.n_subjects(), total_feat);
    let mut raw_mat = DMatrix::zeros(ctx.n_subjects(), n_cov);
    for i in 0..ctx.n_subjects() {
        let (feats, raw) = covariate_features(ctx, i);
        let mut off = 0;
        for f in &feats {
            for (c, v) in f.iter().enumerate() {
                feat_mat[(i, off + c)] = *v;
            }
            off += f.len();
        }
        for l in 0..n_cov {
            raw_mat[(i, l)] = raw[l];
        }
    }
    let centered = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = m.clone();
        for c in 0..m.ncols() {
            let mean = m.column(c).sum() / n as f64;
            for r in 0..m.nrows() {
                out[(r, c)] -= mean;
            }
        }
        out
    };
    let fc = centered(&feat_mat);
    let rc = centered(&raw_mat);
    let denom = (n as f64 - 1.0).max(1.0);
    let cov_ff = fc.transpose() * &fc / denom;
    let cov_fr = fc.transpose() * &rc / denom;
    let cov_xx = rc.transpose() * &rc / denom;

    // Structural maps on the shared dense grid.
    let maps = crate::gp::build_coef_maps(ctx, params);
    // B maps features into the structural equations: block (m, l).
    let feat_offsets: Vec<usize> = feat_dims
        .iter()
        .scan(0usize, |acc, d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let mut b_map = DMatrix::zeros(q * j, total_feat);
    for m in 0..q {
        for (idx, e) in model.covariate_edges_of(m) {
            let gamma = &params.gamma_x[idx];
            let ops = &ctx.struct_ops;
            let d_l = feat_dims[e.covariate];
            // Map from the feature vector to the J-vector contribution.
            let map: DMatrix<f64> = match e.effect {
                CovariateEffect::Linear => {
                    // contribution = (P Eᵀ γ) · x
                    let v = &ops.r_point * gamma;
                    DMatrix::from_fn(j, 1, |r, _| v[r])
                }
                CovariateEffect::Smooth => {
                    // contribution = P (Ê ⊗ hᵀ(x)) γ = T h(x)
                    let jh = d_l;
                    let mut t_map = DMatrix::zeros(j, jh);
                    // rows of Ê: e(t_k)ᵀ ⊗ h(x)ᵀ multiplied by γ; linear in
                    // h(x): T[r, c] = Σ_k P[r,k] Σ_{c1} e_k[c1] γ[c1·jh + c]
                    for k in 0..ops.n_times() {
                        let ek = &ops.blocks.e_cols[k];
                        for c in 0..jh {
                            let mut w = 0.0;
                            for c1 in 0..j {
                                w += ek[c1] * gamma[c1 * jh + c];
                            }
                            for r in 0..j {
                                t_map[(r, c)] += ops.proj[(r, k)] * w;
                            }
                        }
                    }
                    t_map
                }
                CovariateEffect::Concurrent => {
                    crate::model::loading_map(LoadingEffect::Concurrent, gamma, ops)
                }
                CovariateEffect::Historical => {
                    crate::model::loading_map(LoadingEffect::Historical, gamma, ops)
                }
            };
            let mut view =
                b_map.view_mut((m * j, feat_offsets[e.covariate]), (j, map.ncols()));
            view += map;
        }
    }
    let solve = &maps.struct_solve;
    let mut bzeta = DMatrix::zeros(q * j, q * j);
    for m in 0..q {
        bzeta
            .view_mut((m * j, m * j), (j, j))
            .copy_from(&params.sigma_zeta[m]);
    }
    let inner = &b_map * &cov_ff * b_map.transpose() + bzeta;
    let mut cov_eta = solve * inner * solve.transpose();
    linalg::symmetrize(&mut cov_eta);
    let cov_eta_x = solve * &b_map * cov_fr;
    ImpliedCovContext {
        cov_eta,
        cov_eta_x,
        cov_xx,
    }
}

/// Loading evaluation functional: `f_{jm}(η, t) = w(t)ᵀ η_coefs`.
fn loading_functional(
    model: &ValidatedModel,
    params: &ParamSet,
    edge_idx: usize,
    t: f64,
) -> DVector<f64> {
    let basis = model.basis();
    let j = basis.dim();
    let l = &model.spec().loadings[edge_idx];
    let e_t = basis.eval(t, 0).expect("t in domain");
    if l.anchored {
        return match l.effect {
            LoadingEffect::Fixed | LoadingEffect::Concurrent => e_t,
            LoadingEffect::Historical => basis.partial_integral(t).expect("t in domain"),
        };
    }
    let coef = &params.lambda[edge_idx];
    match l.effect {
        LoadingEffect::Fixed => e_t * coef[0],
        LoadingEffect::Concurrent => {
            let lam_t = e_t.dot(coef);
            e_t * lam_t
        }
        LoadingEffect::Historical => {
            // ∫_{s≤t} λ(s,t) η(s) ds = (Ψ(t) Λ e(t))ᵀ η
            let lam = crate::model::surface_matrix(coef, j);
            let psi = basis.partial_gram(t, 0).expect("t in domain");
            psi * (lam * e_t)
        }
    }
}

/// The model-implied covariance of `(z_1(t), …, z_p(t), x_1, …, x_Q)`.
///
/// The covariate block is saturated: the sample covariate covariance is
/// reproduced exactly, and indicator–covariate covariances propagate through
/// the structural part.
pub fn implied_covariance_at_t(
    ctx: &ModelContext,
    params: &ParamSet,
    icc: &ImpliedCovContext,
    t: f64,
) -> DMatrix<f64> {
    let model = &ctx.model;
    let basis = model.basis();
    let j = basis.dim();
    let (p, q) = (model.p(), model.q());
    let n_cov = model.n_covariates();
    let dim = p + n_cov;
    let e_t = basis.eval(t, 0).expect("t in domain");
    let mut out = DMatrix::zeros(dim, dim);

    // Per-indicator loading functionals stacked over factors.
    let mut w: Vec<DVector<f64>> = vec![DVector::zeros(q * j); p];
    for (idx, l) in model.spec().loadings.iter().enumerate() {
        let wf = loading_functional(model, params, idx, t);
        let mut view = w[l.indicator].rows_mut(l.factor * j, j);
        view += wf;
    }
    for jj in 0..p {
        for kk in jj..p {
            let mut v = (w[jj].transpose() * &icc.cov_eta * &w[kk])[(0, 0)];
            if jj == kk {
                // K^ε_j(t,t) + σ²_j
                v += (e_t.transpose() * &params.sigma_eps[jj] * &e_t)[(0, 0)];
                v += params.sigma2[jj];
            }
            out[(jj, kk)] = v;
            out[(kk, jj)] = v;
        }
    }
    // Indicator–covariate and covariate–covariate blocks.
    for jj in 0..p {
        let cross = w[jj].transpose() * &icc.cov_eta_x; // 1 × Q
        for l in 0..n_cov {
            out[(jj, p + l)] = cross[(0, l)];
            out[(p + l, jj)] = cross[(0, l)];
        }
    }
    for a in 0..n_cov {
        for b in 0..n_cov {
            out[(p + a, p + b)] = icc.cov_xx[(a, b)];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Sample covariance S_t
// ---------------------------------------------------------------------------

fn tricube(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        let w = 1.0 - u.abs().powi(3);
        w * w * w
    }
}

/// Local cross-sectional covariance of `(z_j(t), x_l)` at `t` using the
/// nearest observation per series inside a tricube window of half-width `h`.
/// Returns `None` when fewer than `dim + 1` subjects contribute to any
/// variable.
pub fn sample_covariance_at_t(
    ctx: &ModelContext,
    t: f64,
    h: f64,
) -> Option<(DMatrix<f64>, usize)> {
    let model = &ctx.model;
    let p = model.p();
    let n_cov = model.n_covariates();
    let dim = p + n_cov;
    let n = ctx.n_subjects();
    // values[v][i] = Some((value, weight))
    let mut values = vec![vec![None; n]; dim];
    for i in 0..n {
        for jj in 0..p {
            let series = &ctx.data.series[i][jj];
            let mut best: Option<(f64, f64)> = None;
            for k in 0..series.len() {
                let d = (series.times[k] - t).abs();
                if d < h {
                    let w = tricube(d / h);
                    match best {
                        Some((_, bw)) if bw >= w => {}
                        _ => best = Some((series.values[k], w)),
                    }
                }
            }
            values[jj][i] = best;
        }
        for l in 0..n_cov {
            let v = match &ctx.data.covariates[i][l] {
                CovariateValue::Scalar(x) => *x,
                CovariateValue::Functional(coefs) => {
                    model.basis().eval(t, 0).expect("t in domain").dot(coefs)
                }
            };
            values[p + l][i] = Some((v, 1.0));
        }
    }
    // Require enough contributing subjects everywhere.
    let mut min_count = usize::MAX;
    for v in values.iter() {
        let c = v.iter().filter(|o| o.is_some()).count();
        min_count = min_count.min(c);
    }
    if min_count < dim + 1 {
        return None;
    }
    // Weighted means.
    let mut means = vec![0.0; dim];
    for (v, mean) in values.iter().zip(means.iter_mut()) {
        let mut num = 0.0;
        let mut den = 0.0;
        for o in v.iter().flatten() {
            num += o.1 * o.0;
            den += o.1;
        }
        *mean = num / den;
    }
    // Pairwise-complete weighted covariance.
    let mut cov = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        for b in a..dim {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if let (Some((va, wa)), Some((vb, wb))) = (values[a][i], values[b][i]) {
                    let w = wa * wb;
                    num += w * (va - means[a]) * (vb - means[b]);
                    den += w;
                }
            }
            if den <= 0.0 {
                return None;
            }
            cov[(a, b)] = num / den;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    Some((cov, min_count))
}

// ---------------------------------------------------------------------------
// Indices
// ---------------------------------------------------------------------------

/// The pointwise fit indices from a sample and an implied covariance.
///
/// `df_model`/`df_null` follow `p(p+1)/2 − k` with the pointwise parameter
/// count; the null model is the diagonal (no-latent-variable) model.
pub fn indices_from_moments(
    s_t: &DMatrix<f64>,
    sigma_t: &DMatrix<f64>,
    n: usize,
    df_model: f64,
    df_null: f64,
    t: f64,
) -> PointwiseIndices {
    let p = s_t.nrows() as f64;
    let nm1 = (n as f64 - 1.0).max(1.0);
    // PD projections for the log-determinants.
    let floor_s = 1e-10 * s_t.trace().abs().max(1e-300);
    let (s_pd, _) = linalg::clip_eigenvalues(s_t, floor_s);
    let floor_m = 1e-10 * sigma_t.trace().abs().max(1e-300);
    let (m_pd, _) = linalg::clip_eigenvalues(sigma_t, floor_m);
    let f_ml = (linalg::spd_log_det(&m_pd) + (&s_pd * linalg::spd_inverse(&m_pd)).trace()
        - linalg::spd_log_det(&s_pd)
        - p)
        .max(0.0);
    let chi2 = nm1 * f_ml;
    // Null model: diagonal covariance.
    let mut null = DMatrix::zeros(s_t.nrows(), s_t.ncols());
    for i in 0..s_t.nrows() {
        null[(i, i)] = s_pd[(i, i)];
    }
    let f_null = (linalg::spd_log_det(&null) + (&s_pd * linalg::spd_inverse(&null)).trace()
        - linalg::spd_log_det(&s_pd)
        - p)
        .max(0.0);
    let chi2_null = nm1 * f_null;

    // SRMR and GFI over the full square of entries.
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..s_t.nrows() {
        for c in 0..s_t.ncols() {
            num += (s_t[(r, c)] - sigma_t[(r, c)]).powi(2);
            den += s_t[(r, c)].powi(2);
        }
    }
    let srmr = (num / (p * (p + 1.0) / 2.0)).sqrt();
    let gfi = 1.0 - if den > 0.0 { num / den } else { 0.0 };

    let radicand = (chi2 - df_model) / (df_model * nm1);
    let (rmsea, rmsea_clipped) = if df_model > 0.0 && radicand > 0.0 {
        (radicand.sqrt(), false)
    } else {
        (0.0, true)
    };
    let excess_m = (chi2 - df_model).max(0.0);
    let excess_n = (chi2_null - df_null).max(0.0);
    let cfi = (1.0 - excess_m / excess_n.max(excess_m).max(1e-300)).clamp(0.0, 1.0);
    let ifi = if (chi2_null - df_null).abs() > 1e-300 {
        (chi2_null - chi2) / (chi2_null - df_null)
    } else {
        1.0
    };
    let tli = if df_null > 0.0 && df_model > 0.0 && (chi2_null / df_null - 1.0).abs() > 1e-300 {
        (chi2_null / df_null - chi2 / df_model) / (chi2_null / df_null - 1.0)
    } else {
        1.0
    };
    let tli_flagged = !(0.0..=1.0).contains(&tli);
    PointwiseIndices {
        t,
        chi2,
        f_ml,
        chi2_null,
        rmsea,
        srmr,
        gfi,
        cfi,
        ifi,
        tli,
        rmsea_clipped,
        tli_flagged,
    }
}

/// Pointwise parameter count: one per free loading edge, one variance per
/// factor, one residual variance per indicator, one per structural edge,
/// plus the saturated covariate moments.
pub fn pointwise_parameter_count(model: &ValidatedModel) -> usize {
    let free_loadings = model
        .spec()
        .loadings
        .iter()
        .filter(|l| !l.anchored)
        .count();
    let q_cov = model.n_covariates();
    free_loadings
        + model.q()
        + model.p()
        + model.spec().latent_edges.len()
        + model.spec().covariate_edges.len()
        + q_cov * (q_cov + 1) / 2
}

/// Compute the pointwise and averaged fit indices on a time grid.
pub fn fit_indices(
    ctx: &ModelContext,
    params: &ParamSet,
    grid: &[f64],
) -> Result<GofReport, GofError> {
    if grid.is_empty() {
        return Err(GofError::EmptyGrid);
    }
    let model = &ctx.model;
    let p_obs = model.p() + model.n_covariates();
    let n = ctx.n_subjects();
    let k_model = pointwise_parameter_count(model);
    let moments = (p_obs * (p_obs + 1) / 2) as f64;
    let df_model = moments - k_model as f64;
    let df_null = moments - p_obs as f64;

    // Bandwidth from the average series length.
    let mut m_tot = 0.0;
    let mut m_cnt = 0.0f64;
    for i in 0..n {
        for jj in 0..model.p() {
            m_tot += ctx.data.series[i][jj].len() as f64;
            m_cnt += 1.0;
        }
    }
    let mean_m = (m_tot / m_cnt.max(1.0)).max(1.0);
    let h = 1.5 / mean_m;

    let icc = implied_cov_context(ctx, params);
    let mut pointwise = Vec::new();
    let mut skipped = Vec::new();
    for &t in grid {
        match sample_covariance_at_t(ctx, t, h) {
            Some((s_t, _)) => {
                let sigma_t = implied_covariance_at_t(ctx, params, &icc, t);
                pointwise.push(indices_from_moments(
                    &s_t, &sigma_t, n, df_model, df_null, t,
                ));
            }
            None => skipped.push(t),
        }
    }
    if pointwise.is_empty() {
        return Err(GofError::NothingEstimable);
    }
    let count = pointwise.len() as f64;
    let avg = |f: &dyn Fn(&PointwiseIndices) -> f64| -> f64 {
        pointwise.iter().map(|x| f(x)).sum::<f64>() / count
    };
    Ok(GofReport {
        df_model,
        df_null,
        k_model,
        p_observed: p_obs,
        n_subjects: n,
        avg_chi2_over_df: if df_model != 0.0 {
            avg(&|x| x.chi2) / df_model
        } else {
            f64::NAN
        },
        avg_rmsea: avg(&|x| x.rmsea),
        avg_srmr: avg(&|x| x.srmr),
        avg_cfi: avg(&|x| x.cfi),
        avg_ifi: avg(&|x| x.ifi),
        avg_gfi: avg(&|x| x.gfi),
        avg_tli: avg(&|x| x.tli),
        pointwise,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_long_format, LongRecord};
    use crate::model::{parse_model_text, validate_model};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn two_indicator_model() -> ValidatedModel {
        let text = "\
basis bspline 5 order 4
indicator z1
indicator z2
factor eta variance
load z1 on eta concurrent
load z2 on eta concurrent
";
        validate_model(parse_model_text(text).unwrap()).unwrap()
    }

    fn dataset_for(model: &ValidatedModel, n: usize, m: usize) -> crate::dataset::FunctionalDataset {
        let mut recs = Vec::new();
        for i in 0..n {
            for j in 0..model.p() {
                for k in 1..=m {
                    recs.push(LongRecord {
                        subject: format!("s{i:03}"),
                        variable: format!("z{}", j + 1),
                        time: k as f64 / m as f64,
                        value: (i * j + k) as f64 * 0.05,
                    });
                }
            }
        }
        ingest_long_format(&recs, &[], (0.0, 1.0)).unwrap()
    }

    #[test]
    fn perfect_fit_gives_zero_chi2_and_unit_gfi() {
        let s = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 1.2]);
        let idx = indices_from_moments(&s, &s, 100, 1.0, 1.0, 0.5);
        assert_abs_diff_eq!(idx.chi2, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(idx.f_ml, 0.0, epsilon = 1e-11);
        assert_abs_diff_eq!(idx.srmr, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(idx.gfi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn relative_indices_hit_one_when_chi2_equals_df() {
        // Construct S ≠ Σ so that χ² is tiny but positive; with
        // χ²_model ≤ df_model the clipped CFI is 1.
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let mut sigma = s.clone();
        sigma[(0, 0)] += 1e-6;
        let idx = indices_from_moments(&s, &sigma, 50, 1.0, 1.0, 0.0);
        assert!(idx.chi2 < 1.0);
        assert_abs_diff_eq!(idx.cfi, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn f_ml_nonnegative_for_random_pd_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
            let b = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
            let s = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
            let m = &b * b.transpose() + DMatrix::identity(3, 3) * 0.1;
            let idx = indices_from_moments(&s, &m, 50, 1.0, 3.0, 0.0);
            assert!(idx.f_ml >= 0.0);
            assert!(idx.srmr >= 0.0);
            assert!(idx.gfi <= 1.0);
            assert!((0.0..=1.0).contains(&idx.cfi));
        }
    }

    #[test]
    fn concurrent_factor_model_covariance_matches_direct_formula() {
        // cov(z₁(t), z₂(t)) = λ₁(t) λ₂(t) var(η(t)) for a one-factor
        // concurrent model without covariates.
        let model = two_indicator_model();
        let ds = dataset_for(&model, 4, 5);
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let mut params = ParamSet::zeros(&model);
        let basis = model.basis();
        params.lambda[0] = basis.project_function(|t| 1.0 + 0.3 * t, 150);
        params.lambda[1] = basis.project_function(|t| 0.8 - 0.2 * t, 150);
        for s in params.sigma_eps.iter_mut() {
            *s *= 0.2;
        }
        params.sigma_zeta[0] = {
            let mut rngm = ChaCha8Rng::seed_from_u64(4);
            let a = DMatrix::from_fn(basis.dim(), basis.dim(), |_, _| {
                rngm.random::<f64>() - 0.5
            });
            &a * a.transpose() * 0.4
        };
        let icc = implied_cov_context(&ctx, &params);
        for &t in &[0.2, 0.6, 0.95] {
            let sigma_t = implied_covariance_at_t(&ctx, &params, &icc, t);
            let e_t = basis.eval(t, 0).unwrap();
            let lam1 = e_t.dot(&params.lambda[0]);
            let lam2 = e_t.dot(&params.lambda[1]);
            let var_eta = (e_t.transpose() * &params.sigma_zeta[0] * &e_t)[(0, 0)];
            assert_abs_diff_eq!(sigma_t[(0, 1)], lam1 * lam2 * var_eta, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_loadings_leave_error_variances_on_diagonal() {
        let model = two_indicator_model();
        let ds = dataset_for(&model, 4, 5);
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let mut params = ParamSet::zeros(&model);
        params.lambda[0] = DVector::zeros(5);
        params.lambda[1] = DVector::zeros(5);
        for s in params.sigma_eps.iter_mut() {
            *s *= 0.3;
        }
        params.sigma2 = vec![0.15, 0.25];
        let icc = implied_cov_context(&ctx, &params);
        let basis = model.basis();
        let t = 0.4;
        let sigma_t = implied_covariance_at_t(&ctx, &params, &icc, t);
        let e_t = basis.eval(t, 0).unwrap();
        for jj in 0..2 {
            let keps = (e_t.transpose() * &params.sigma_eps[jj] * &e_t)[(0, 0)];
            assert_abs_diff_eq!(
                sigma_t[(jj, jj)],
                keps + params.sigma2[jj],
                epsilon = 1e-12
            );
            let other = 1 - jj;
            assert_abs_diff_eq!(sigma_t[(jj, other)], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn implied_covariance_matches_simulation_oracle() {
        // Empirical covariance of forward-simulated draws at a fixed t
        // matches the implied covariance within Monte Carlo error.
        let model = two_indicator_model();
        let ds = dataset_for(&model, 3, 4);
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let basis = model.basis();
        let j = basis.dim();
        let mut params = ParamSet::zeros(&model);
        params.lambda[0] = basis.project_function(|t| 1.0 + 0.5 * t, 150);
        params.lambda[1] = basis.project_function(|_t| 0.7, 150);
        let mut rngm = ChaCha8Rng::seed_from_u64(11);
        let a = DMatrix::from_fn(j, j, |_, _| rngm.random::<f64>() - 0.5);
        params.sigma_zeta[0] = &a * a.transpose() * 0.3;
        let b = DMatrix::from_fn(j, j, |_, _| rngm.random::<f64>() - 0.5);
        params.sigma_eps[0] = &b * b.transpose() * 0.2;
        params.sigma_eps[1] = DMatrix::identity(j, j) * 0.1;
        params.sigma2 = vec![0.05, 0.08];

        let icc = implied_cov_context(&ctx, &params);
        let t = 0.5;
        let sigma_t = implied_covariance_at_t(&ctx, &params, &icc, t);

        let n_draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let e_t = basis.eval(t, 0).unwrap();
        let zeta_sqrt = linalg::psd_sqrt(&params.sigma_zeta[0]);
        let eps_sqrt: Vec<DMatrix<f64>> =
            params.sigma_eps.iter().map(linalg::psd_sqrt).collect();
        let mut sum = DVector::zeros(2);
        let mut sum2 = DMatrix::zeros(2, 2);
        for _ in 0..n_draws {
            let xi = DVector::from_fn(j, |_, _| rng.sample::<f64, _>(StandardNormal));
            let eta = &zeta_sqrt * xi;
            let eta_t = e_t.dot(&eta);
            let mut z = DVector::zeros(2);
            for jj in 0..2 {
                let lam_t = e_t.dot(&params.lambda[jj]);
                let xi_e = DVector::from_fn(j, |_, _| rng.sample::<f64, _>(StandardNormal));
                let eps_t = e_t.dot(&(&eps_sqrt[jj] * xi_e));
                let noise = params.sigma2[jj].sqrt() * rng.sample::<f64, _>(StandardNormal);
                z[jj] = lam_t * eta_t + eps_t + noise;
            }
            sum += &z;
            sum2.ger(1.0, &z, &z, 1.0);
        }
        let mean = sum / n_draws as f64;
        let mut emp = sum2 / n_draws as f64;
        emp.ger(-1.0, &mean, &mean, 1.0);
        for r in 0..2 {
            for c in 0..2 {
                let se = ((sigma_t[(r, r)] * sigma_t[(c, c)] + sigma_t[(r, c)].powi(2))
                    / n_draws as f64)
                    .sqrt();
                assert!(
                    (emp[(r, c)] - sigma_t[(r, c)]).abs() < 5.0 * se,
                    "entry ({r},{c}): {} vs {} (se {se})",
                    emp[(r, c)],
                    sigma_t[(r, c)]
                );
            }
        }
    }

    #[test]
    fn fit_indices_skip_inestimable_points() {
        // Only two subjects observed late; the local covariance needs at
        // least p + Q + 1 = 3 contributors, so late grid points are skipped.
        let model = two_indicator_model();
        let mut recs = Vec::new();
        for i in 0..6 {
            let last = if i < 2 { 10 } else { 5 };
            for j in 0..2 {
                for k in 1..=last {
                    recs.push(LongRecord {
                        subject: format!("s{i:03}"),
                        variable: format!("z{}", j + 1),
                        time: k as f64 / 10.0,
                        value: (i + j + k) as f64 * 0.07,
                    });
                }
            }
        }
        let ds = ingest_long_format(&recs, &[], (0.0, 1.0)).unwrap();
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let params = crate::fit::init_params(&ctx);
        let report = fit_indices(&ctx, &params, &[0.3, 0.95]).unwrap();
        assert_eq!(report.skipped, vec![0.95]);
        assert_eq!(report.pointwise.len(), 1);
        assert!((report.pointwise[0].t - 0.3).abs() < 1e-12);
    }
}
