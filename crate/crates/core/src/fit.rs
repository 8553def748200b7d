//! The penalized Monte Carlo EM: E-step expectations, closed-form M-step
//! updates, convergence monitoring, and cross-validated smoothing selection.
//!
//! The E-step draws `(y, η) | (z, x)` jointly per subject and accumulates the
//! empirical first and second moments of the draws. Every expectation in the
//! M-step update formulas is (at most) quadratic in `(y, η)`, so the M-steps
//! consume only these per-subject moment matrices; the result is identical to
//! averaging per-draw quantities while the cost stays independent of the
//! Monte Carlo sample size.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{penalty_matrix, PenaltyKind};
use crate::dataset::FunctionalDataset;
use crate::gp::{
    assemble_subject, build_coef_maps, condition_on_observations, GaussianSampler, GpError,
    ModelContext, ParamSet,
};
use crate::linalg;
use crate::model::{
    anchored_map, covariate_contribution, effect_design_rows, loading_map, CovariateEffect,
    GridOps, Identification, LatentEffect, LoadingEffect, ValidatedModel,
};

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("invalid fit configuration: {0}")]
    BadConfig(String),
    #[error("cross-validation fold with zero subjects (n = {n}, folds = {folds})")]
    EmptyFold { n: usize, folds: usize },
    #[error("{dropped} of {total} bootstrap replicates failed to converge (> {percent}% allowed)")]
    TooManyDropped {
        dropped: usize,
        total: usize,
        percent: u32,
    },
}

/// Smoothing-parameter choice: fixed weights or cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum AlphaChoice {
    Fixed { lambda: f64, gamma: f64 },
    Cv,
}

/// Resolved smoothing weights: one `α^λ` per indicator, one `α^γ` per factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaVector {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl AlphaVector {
    pub fn shared(model: &ValidatedModel, lambda: f64, gamma: f64) -> Self {
        AlphaVector {
            lambda: vec![lambda; model.p()],
            gamma: vec![gamma; model.q()],
        }
    }
}

/// Monte Carlo EM configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// MC samples per E-step for the first iterations.
    pub n_mc: usize,
    /// Growth factor applied to the MC sample size.
    pub mc_growth: f64,
    /// Apply the growth factor every this many iterations.
    pub mc_growth_every: usize,
    /// Cap on the MC sample size.
    pub mc_cap: usize,
    pub max_iter: usize,
    pub tol_coef: f64,
    pub tol_sigma2: f64,
    pub alpha: AlphaChoice,
    pub cv_folds: usize,
    pub alpha_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_mc: 100,
            mc_growth: 1.5,
            mc_growth_every: 10,
            mc_cap: 1000,
            max_iter: 200,
            tol_coef: 1e-3,
            tol_sigma2: 1e-4,
            alpha: AlphaChoice::Fixed {
                lambda: 1e-4,
                gamma: 1e-4,
            },
            cv_folds: 5,
            alpha_grid: default_alpha_grid(),
            seed: 0,
        }
    }
}

/// Eight log-spaced points in `[1e-6, 1e2]`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..8)
        .map(|i| 10f64.powf(-6.0 + 8.0 * i as f64 / 7.0))
        .collect()
}

impl FitConfig {
    pub fn mc_samples(&self, iter: usize) -> usize {
        let steps = (iter.saturating_sub(1)) / self.mc_growth_every.max(1);
        let n = self.n_mc as f64 * self.mc_growth.powi(steps as i32);
        (n.round() as usize).min(self.mc_cap).max(1)
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.n_mc == 0 {
            return Err(FitError::BadConfig("n_mc must be >= 1".into()));
        }
        if !(self.tol_coef > 0.0 && self.tol_sigma2 > 0.0) {
            return Err(FitError::BadConfig("tolerances must be positive".into()));
        }
        if self.alpha_grid.iter().any(|a| *a < 0.0) {
            return Err(FitError::BadConfig("alpha grid values must be >= 0".into()));
        }
        if matches!(self.alpha, AlphaChoice::Cv) {
            if self.alpha_grid.is_empty() {
                return Err(FitError::BadConfig("empty alpha grid".into()));
            }
            if self.cv_folds < 2 {
                return Err(FitError::BadConfig("cv_folds must be >= 2".into()));
            }
        }
        Ok(())
    }
}

/// Monte Carlo moments of `u = [y; η] | z` for one subject.
#[derive(Debug, Clone)]
pub struct McMoments {
    /// `E[u | z]` estimated from the draws.
    pub mean: DVector<f64>,
    /// Raw second moment `E[u uᵀ | z]`.
    pub second: DMatrix<f64>,
}

/// E-step output: per-subject MC moments plus diagnostics.
#[derive(Debug)]
pub struct SufficientStats {
    pub moments: Vec<McMoments>,
    pub mc_sample_count: usize,
    /// Eigenvalue mass clipped while factorizing conditional covariances.
    pub clip_mass: f64,
    /// Observed-data log-likelihood at the parameters used for conditioning.
    pub loglik_z: f64,
}

/// Run the Monte Carlo E-step: for every subject draw
/// `(y, η) | (z, x; θ)` and accumulate first/second moments.
pub fn e_step(
    ctx: &ModelContext,
    params: &ParamSet,
    n_mc: usize,
    seed: u64,
    iter: usize,
) -> SufficientStats {
    let maps = build_coef_maps(ctx, params);
    let results: Vec<(McMoments, f64, f64)> = (0..ctx.n_subjects())
        .into_par_iter()
        .map(|i| {
            let sub = assemble_subject(ctx, params, &maps, i);
            let (mu, cov) = condition_on_observations(&sub);
            let (sampler, clip) = GaussianSampler::new(mu, &cov);
            let mut rng = ChaCha8Rng::seed_from_u64(linalg::mix_seed(
                seed,
                linalg::mix_seed(iter as u64, i as u64),
            ));
            let d = sampler.mean.len();
            let mut mean = DVector::zeros(d);
            let mut second = DMatrix::zeros(d, d);
            for _ in 0..n_mc {
                let u = sampler.draw(&mut rng);
                mean += &u;
                second.ger(1.0, &u, &u, 1.0);
            }
            mean /= n_mc as f64;
            second /= n_mc as f64;
            let ll = if sub.z.is_empty() {
                0.0
            } else {
                linalg::mvn_logpdf(&sub.z, &sub.mu_z, &sub.sigma_z)
            };
            (McMoments { mean, second }, clip, ll)
        })
        .collect();
    let mut moments = Vec::with_capacity(results.len());
    let mut clip_mass = 0.0;
    let mut loglik = 0.0;
    for (m, c, ll) in results {
        moments.push(m);
        clip_mass += c;
        loglik += ll;
    }
    SufficientStats {
        moments,
        mc_sample_count: n_mc,
        clip_mass,
        loglik_z: loglik,
    }
}

// ---------------------------------------------------------------------------
// Moment bookkeeping
// ---------------------------------------------------------------------------

/// Effect shape of a random (latent) regressor block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Fixed,
    Curve,
    Surface,
}

impl Shape {
    fn of_loading(e: LoadingEffect) -> Shape {
        match e {
            LoadingEffect::Fixed => Shape::Fixed,
            LoadingEffect::Concurrent => Shape::Curve,
            LoadingEffect::Historical => Shape::Surface,
        }
    }

    fn of_latent(e: LatentEffect) -> Shape {
        match e {
            LatentEffect::Concurrent => Shape::Curve,
            LatentEffect::Historical => Shape::Surface,
        }
    }

    fn width(self, j: usize) -> usize {
        match self {
            Shape::Fixed => 1,
            Shape::Curve => j,
            Shape::Surface => j * j,
        }
    }
}

/// Moment-block accessors for the stacked vector `u = [y_0..y_{p-1},
/// η_0..η_{q-1}]`.
struct Layout {
    p: usize,
    q: usize,
    j: usize,
}

impl Layout {
    fn y_off(&self, j: usize) -> usize {
        j * self.j
    }

    fn eta_off(&self, m: usize) -> usize {
        (self.p + m) * self.j
    }

}

fn block(m: &DMatrix<f64>, r: usize, c: usize, j: usize) -> DMatrix<f64> {
    m.view((r, c), (j, j)).into_owned()
}

/// Summed conditional moments for one (indicator, grid) group.
struct MeasGroup {
    n: usize,
    subjects: Vec<usize>,
    sum_mu_y: DVector<f64>,
    sum_mu_eta: DVector<f64>,
    sum_yy: DMatrix<f64>,
    /// `Σ_i E[y_j ηᵀ]`, `J × qJ`.
    sum_y_eta: DMatrix<f64>,
    /// `Σ_i E[η ηᵀ]`, `qJ × qJ`.
    sum_eta_eta: DMatrix<f64>,
}

fn measurement_groups(
    ctx: &ModelContext,
    stats: &SufficientStats,
    j_ind: usize,
) -> BTreeMap<usize, MeasGroup> {
    let lay = Layout {
        p: ctx.model.p(),
        q: ctx.model.q(),
        j: ctx.model.basis().dim(),
    };
    let j = lay.j;
    let q = lay.q;
    let mut groups: BTreeMap<usize, MeasGroup> = BTreeMap::new();
    for i in 0..ctx.n_subjects() {
        let key = ctx.ops_idx[i][j_ind].unwrap_or(usize::MAX);
        let g = groups.entry(key).or_insert_with(|| MeasGroup {
            n: 0,
            subjects: Vec::new(),
            sum_mu_y: DVector::zeros(j),
            sum_mu_eta: DVector::zeros(q * j),
            sum_yy: DMatrix::zeros(j, j),
            sum_y_eta: DMatrix::zeros(j, q * j),
            sum_eta_eta: DMatrix::zeros(q * j, q * j),
        });
        let m = &stats.moments[i];
        let yo = lay.y_off(j_ind);
        let eo = lay.eta_off(0);
        g.n += 1;
        g.subjects.push(i);
        g.sum_mu_y += m.mean.rows(yo, j);
        g.sum_mu_eta += m.mean.rows(eo, q * j);
        g.sum_yy += m.second.view((yo, yo), (j, j));
        g.sum_y_eta += m.second.view((yo, eo), (j, q * j));
        g.sum_eta_eta += m.second.view((eo, eo), (q * j, q * j));
    }
    groups
}

/// `Σ_{k,k'} C_{kk'} E[v_k^a (v_{k'}^b)ᵀ]` for two random regressor blocks
/// with cross second moment `s = Σ_i E[η_a η_bᵀ]`.
fn gram_block(
    sa: Shape,
    sb: Shape,
    s: &DMatrix<f64>,
    c: &DMatrix<f64>,
    ops: &GridOps,
) -> DMatrix<f64> {
    let j = s.nrows();
    let m = ops.n_times();
    let e = &ops.blocks.e_cols;
    let psi = &ops.blocks.psi;
    let mut out = DMatrix::zeros(sa.width(j), sb.width(j));
    match (sa, sb) {
        (Shape::Fixed, Shape::Fixed) => {
            let mut v = 0.0;
            for k in 0..m {
                let se = s * &e[k]; // used column-wise below
                let _ = &se;
                for kp in 0..m {
                    v += c[(k, kp)] * (e[k].transpose() * s * &e[kp])[(0, 0)];
                }
            }
            out[(0, 0)] = v;
        }
        (Shape::Fixed, Shape::Curve) => {
            for k in 0..m {
                let st_ek = s.transpose() * &e[k]; // J
                for kp in 0..m {
                    let scale = c[(k, kp)] * st_ek.dot(&e[kp]);
                    for cc in 0..j {
                        out[(0, cc)] += scale * e[kp][cc];
                    }
                }
            }
        }
        (Shape::Curve, Shape::Fixed) => {
            return gram_block(sb, sa, &s.transpose(), &c.transpose(), ops).transpose();
        }
        (Shape::Curve, Shape::Curve) => {
            for k in 0..m {
                let st_ek = s.transpose() * &e[k];
                for kp in 0..m {
                    let scale = c[(k, kp)] * st_ek.dot(&e[kp]);
                    out.ger(scale, &e[k], &e[kp], 1.0);
                }
            }
        }
        (Shape::Fixed, Shape::Surface) => {
            for kp in 0..m {
                // Σ_k C_{kk'} (e_{k'} ⊗ Ψ_{k'} sᵀ e_k)ᵀ
                let mut acc = DVector::zeros(j);
                for k in 0..m {
                    acc += (s.transpose() * &e[k]) * c[(k, kp)];
                }
                let w = &psi[kp] * acc;
                for c1 in 0..j {
                    for c2 in 0..j {
                        out[(0, c1 * j + c2)] += e[kp][c1] * w[c2];
                    }
                }
            }
        }
        (Shape::Surface, Shape::Fixed) => {
            return gram_block(sb, sa, &s.transpose(), &c.transpose(), ops).transpose();
        }
        (Shape::Curve, Shape::Surface) => {
            for k in 0..m {
                let st_ek = s.transpose() * &e[k]; // sᵀ e_k
                for kp in 0..m {
                    let w = &psi[kp] * &st_ek * c[(k, kp)];
                    for r in 0..j {
                        let er = e[k][r];
                        if er == 0.0 {
                            continue;
                        }
                        for c1 in 0..j {
                            let f = er * e[kp][c1];
                            for c2 in 0..j {
                                out[(r, c1 * j + c2)] += f * w[c2];
                            }
                        }
                    }
                }
            }
        }
        (Shape::Surface, Shape::Curve) => {
            return gram_block(sb, sa, &s.transpose(), &c.transpose(), ops).transpose();
        }
        (Shape::Surface, Shape::Surface) => {
            for k in 0..m {
                let psi_s = &psi[k] * s;
                for kp in 0..m {
                    let t = &psi_s * &psi[kp]; // Ψ_k s Ψ_k'
                    let ck = c[(k, kp)];
                    for r1 in 0..j {
                        let ekr = ck * e[k][r1];
                        if ekr == 0.0 {
                            continue;
                        }
                        for c1 in 0..j {
                            let f = ekr * e[kp][c1];
                            if f == 0.0 {
                                continue;
                            }
                            for r2 in 0..j {
                                for c2 in 0..j {
                                    out[(r1 * j + r2, c1 * j + c2)] += f * t[(r2, c2)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `Σ_k E[v_k (p_kᵀ Σ⁻¹ r)]` where `x = Σ_i E[η r ᵀ]` and `w = Σ⁻¹ P`
/// (`J × M`, column `k` is `Σ⁻¹ p_k`).
fn rhs_block(shape: Shape, x: &DMatrix<f64>, w: &DMatrix<f64>, ops: &GridOps) -> DVector<f64> {
    let j = x.nrows();
    let m = ops.n_times();
    let e = &ops.blocks.e_cols;
    let psi = &ops.blocks.psi;
    let mut out = DVector::zeros(shape.width(j));
    for k in 0..m {
        let t = x * w.column(k); // J-vector: E[η r ᵀ] Σ⁻¹ p_k
        match shape {
            Shape::Fixed => out[0] += e[k].dot(&t),
            Shape::Curve => {
                let scale = e[k].dot(&t);
                out.axpy(scale, &e[k], 1.0);
            }
            Shape::Surface => {
                let v = &psi[k] * t;
                for c1 in 0..j {
                    for c2 in 0..j {
                        out[c1 * j + c2] += e[k][c1] * v[c2];
                    }
                }
            }
        }
    }
    out
}

/// `E[V(η)]ᵀ` contribution: design rows evaluated at the mean.
fn mean_design(shape: Shape, mu: &DVector<f64>, ops: &GridOps) -> DMatrix<f64> {
    effect_design_rows(shape.width(mu.len()), shape == Shape::Surface, mu, ops)
}

// ---------------------------------------------------------------------------
// Roughness penalties
// ---------------------------------------------------------------------------

/// Precomputed penalty matrices aligned with the compact coefficient layouts
/// used by the M-steps.
#[derive(Debug, Clone)]
pub struct Penalties {
    /// Per indicator: block-diagonal over `[β_j | free edges]` with a zero
    /// block for the unpenalized intercept.
    pub lambda: Vec<DMatrix<f64>>,
    /// Per factor: block-diagonal over `[latent edges | covariate edges]`.
    pub gamma: Vec<DMatrix<f64>>,
}

/// Weight of the intercept's roughness block relative to the loading
/// penalty. The intercept is a functional coefficient too; leaving it fully
/// unpenalized lets its coefficients random-walk along the near-null
/// directions of square evaluation matrices (M = J grids).
const BETA_PENALTY_SCALE: f64 = 1e-3;

/// Build the penalties for a model (smooth bases from the fit context).
pub fn build_penalties(ctx: &ModelContext) -> Penalties {
    let model = &ctx.model;
    let basis = model.basis();
    let conc = penalty_matrix(basis, PenaltyKind::Concurrent, None)
        .expect("concurrent penalty")
        .matrix;
    let hist = penalty_matrix(basis, PenaltyKind::Historical, None)
        .expect("historical penalty")
        .matrix;
    let mut lambda = Vec::with_capacity(model.p());
    for jj in 0..model.p() {
        let mut blocks: Vec<DMatrix<f64>> = vec![conc.clone() * BETA_PENALTY_SCALE];
        for (_, l) in model.free_loadings_of(jj) {
            blocks.push(match l.effect {
                LoadingEffect::Fixed => DMatrix::zeros(1, 1),
                LoadingEffect::Concurrent => conc.clone(),
                LoadingEffect::Historical => hist.clone(),
            });
        }
        lambda.push(block_diag(&blocks));
    }
    let mut gamma = Vec::with_capacity(model.q());
    for m in 0..model.q() {
        let mut blocks: Vec<DMatrix<f64>> = Vec::new();
        for (_, e) in model.latent_edges_of(m) {
            blocks.push(match e.effect {
                LatentEffect::Concurrent => conc.clone(),
                LatentEffect::Historical => hist.clone(),
            });
        }
        for (_, e) in model.covariate_edges_of(m) {
            blocks.push(match e.effect {
                CovariateEffect::Linear | CovariateEffect::Concurrent => conc.clone(),
                CovariateEffect::Historical => hist.clone(),
                CovariateEffect::Smooth => {
                    let h = ctx
                        .smooth_bases
                        .get(&e.covariate)
                        .expect("smooth basis present after validation");
                    penalty_matrix(basis, PenaltyKind::Smooth, Some(h))
                        .expect("smooth penalty")
                        .matrix
                }
            });
        }
        gamma.push(block_diag(&blocks));
    }
    Penalties { lambda, gamma }
}

fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(total, total);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
        off += b.nrows();
    }
    out
}

// ---------------------------------------------------------------------------
// Measurement M-step
// ---------------------------------------------------------------------------

/// Updated measurement parameters for one indicator.
#[derive(Debug, Clone)]
pub struct MeasurementUpdate {
    pub beta: DVector<f64>,
    /// Coefficients of the free loading edges, in declaration order.
    pub lambda: Vec<DVector<f64>>,
    pub sigma_eps: DMatrix<f64>,
    pub sigma2: f64,
    /// Eigenvalue mass clipped to keep `Σ^ε` positive definite.
    pub clip_mass: f64,
}

/// Closed-form penalized update of `(β_j, λ_j, Σ^ε_j, σ²_j)` for indicator
/// `j`, given the current E-step moments. `Σ^ε_j` from `params_old` supplies
/// the GLS weights.
pub fn m_step_measurement(
    ctx: &ModelContext,
    stats: &SufficientStats,
    params_old: &ParamSet,
    j_ind: usize,
    alpha: f64,
    penalties: &Penalties,
) -> MeasurementUpdate {
    let model = &ctx.model;
    let j = model.basis().dim();
    let free: Vec<(usize, LoadingEffect, usize)> = model
        .free_loadings_of(j_ind)
        .map(|(idx, l)| (idx, l.effect, l.factor))
        .collect();
    let anchored: Vec<(LoadingEffect, usize)> = model
        .anchored_loadings_of(j_ind)
        .map(|(_, l)| (l.effect, l.factor))
        .collect();
    let widths: Vec<usize> = free
        .iter()
        .map(|(_, e, _)| Shape::of_loading(*e).width(j))
        .collect();
    let total = j + widths.iter().sum::<usize>();
    let offsets: Vec<usize> = widths
        .iter()
        .scan(j, |acc, w| {
            let o = *acc;
            *acc += w;
            Some(o)
        })
        .collect();

    let sigma_inv = linalg::spd_inverse(&params_old.sigma_eps[j_ind]);
    let groups = measurement_groups(ctx, stats, j_ind);

    let mut h = DMatrix::zeros(total, total);
    let mut b = DVector::zeros(total);
    for (key, g) in &groups {
        let ops = if *key == usize::MAX {
            &ctx.struct_ops
        } else {
            &ctx.unique_ops[*key]
        };
        // Anchored contribution map A_c (J × qJ).
        let qj = g.sum_mu_eta.len();
        let mut a_c = DMatrix::zeros(j, qj);
        for (effect, factor) in &anchored {
            let map = anchored_map(*effect, ops);
            let mut view = a_c.view_mut((0, factor * j), (j, j));
            view += map;
        }
        // Response moments: c = y_j − A_c η.
        let sum_mu_c = &g.sum_mu_y - &a_c * &g.sum_mu_eta;
        // Σ_i E[η cᵀ] (qJ × J)
        let sum_eta_c = g.sum_y_eta.transpose() - &g.sum_eta_eta * a_c.transpose();

        let c_mat = ops.proj.transpose() * &sigma_inv * &ops.proj; // M × M
        let w_mat = &sigma_inv * &ops.proj; // J × M

        // Intercept block: n_g Σ⁻¹ and Σ⁻¹ E[c].
        {
            let mut view = h.view_mut((0, 0), (j, j));
            view += &sigma_inv * g.n as f64;
            let mut bview = b.rows_mut(0, j);
            bview += &sigma_inv * &sum_mu_c;
        }
        for (a_i, (_, ea, ma)) in free.iter().enumerate() {
            let sa = Shape::of_loading(*ea);
            let oa = offsets[a_i];
            let wa = widths[a_i];
            // Intercept × edge: Σ⁻¹ P V(Σ μ_a).
            let mu_a = g.sum_mu_eta.rows(ma * j, j).into_owned();
            let v_mean = mean_design(sa, &mu_a, ops); // M × wa
            let cross = &sigma_inv * &ops.proj * &v_mean; // J × wa
            {
                let mut view = h.view_mut((0, oa), (j, wa));
                view += &cross;
                let mut view_t = h.view_mut((oa, 0), (wa, j));
                view_t += cross.transpose();
            }
            // Edge × edge blocks.
            for (b_i, (_, eb, mb)) in free.iter().enumerate() {
                if b_i < a_i {
                    continue;
                }
                let sb = Shape::of_loading(*eb);
                let ob = offsets[b_i];
                let wb = widths[b_i];
                let s_ab = block(&g.sum_eta_eta, ma * j, mb * j, j);
                let gb = gram_block(sa, sb, &s_ab, &c_mat, ops);
                {
                    let mut view = h.view_mut((oa, ob), (wa, wb));
                    view += &gb;
                }
                if b_i != a_i {
                    let mut view = h.view_mut((ob, oa), (wb, wa));
                    view += gb.transpose();
                }
            }
            // RHS for the edge: x = Σ_i E[η_a cᵀ].
            let x = sum_eta_c.view((ma * j, 0), (j, j)).into_owned();
            let rb = rhs_block(sa, &x, &w_mat, ops);
            let mut bview = b.rows_mut(oa, wa);
            bview += rb;
        }
    }

    // Penalized normal equations.
    let mut system = h + penalties.lambda[j_ind].clone() * alpha;
    let ridge = 1e-10 * system.trace().max(1e-12) / total as f64;
    for i in 0..total {
        system[(i, i)] += ridge;
    }
    let theta = linalg::spd_solve(&system, &b);
    let beta = theta.rows(0, j).into_owned();
    let lambda: Vec<DVector<f64>> = free
        .iter()
        .enumerate()
        .map(|(a_i, _)| theta.rows(offsets[a_i], widths[a_i]).into_owned())
        .collect();

    // Σ^ε update with the new coefficients.
    let n = ctx.n_subjects() as f64;
    let mut resid = DMatrix::zeros(j, j);
    for (key, g) in &groups {
        let ops = if *key == usize::MAX {
            &ctx.struct_ops
        } else {
            &ctx.unique_ops[*key]
        };
        let qj = g.sum_mu_eta.len();
        // Full measurement map W (anchored + new free loadings).
        let mut w_map = DMatrix::zeros(j, qj);
        for (effect, factor) in &anchored {
            let mut view = w_map.view_mut((0, factor * j), (j, j));
            view += anchored_map(*effect, ops);
        }
        for (a_i, (_, ea, ma)) in free.iter().enumerate() {
            let map = if *ea == LoadingEffect::Fixed {
                anchored_map(LoadingEffect::Fixed, ops) * lambda[a_i][0]
            } else {
                loading_map(*ea, &lambda[a_i], ops)
            };
            let mut view = w_map.view_mut((0, ma * j), (j, j));
            view += map;
        }
        // Σ E[(y − Wη − β)(…)ᵀ]
        let ww = &w_map * g.sum_y_eta.transpose(); // J×J : W Σ E[η yᵀ]
        let mut r = &g.sum_yy - &ww - ww.transpose()
            + &w_map * &g.sum_eta_eta * w_map.transpose();
        let mu_res = &g.sum_mu_y - &w_map * &g.sum_mu_eta;
        r.ger(-1.0, &mu_res, &beta, 1.0);
        r.ger(-1.0, &beta, &mu_res, 1.0);
        r.ger(g.n as f64, &beta, &beta, 1.0);
        resid += r;
    }
    resid /= n;
    linalg::symmetrize(&mut resid);
    let floor = 1e-8 * resid.trace().abs().max(1e-10) / j as f64;
    let (sigma_eps, clip_mass) = linalg::clip_eigenvalues(&resid, floor);

    // σ² update: Σ_i E[(z − Eᵀy)ᵀ(z − Eᵀy)] / Σ_i M_ij.
    let lay = Layout {
        p: model.p(),
        q: model.q(),
        j,
    };
    let mut num = 0.0;
    let mut denom = 0.0;
    for i in 0..ctx.n_subjects() {
        let series = &ctx.data.series[i][j_ind];
        if series.is_empty() {
            continue;
        }
        let ops = ctx.meas_ops(i, j_ind);
        let m = &stats.moments[i];
        let yo = lay.y_off(j_ind);
        let mu_y = m.mean.rows(yo, j);
        let yy = m.second.view((yo, yo), (j, j));
        let z = DVector::from_column_slice(&series.values);
        let ey = ops.e.transpose() * mu_y; // M
        let gram = &ops.e * ops.e.transpose();
        num += z.dot(&z) - 2.0 * z.dot(&ey) + (gram * yy).trace();
        denom += series.len() as f64;
    }
    let sigma2 = if denom > 0.0 {
        (num / denom).max(1e-10)
    } else {
        params_old.sigma2[j_ind]
    };

    MeasurementUpdate {
        beta,
        lambda,
        sigma_eps,
        sigma2,
        clip_mass,
    }
}

// ---------------------------------------------------------------------------
// Structural M-step
// ---------------------------------------------------------------------------

/// Updated structural parameters for one factor.
#[derive(Debug, Clone)]
pub struct StructuralUpdate {
    /// Coefficients of the latent edges targeting this factor.
    pub gamma_eta: Vec<DVector<f64>>,
    /// Coefficients of the covariate edges targeting this factor.
    pub gamma_x: Vec<DVector<f64>>,
    pub sigma_zeta: DMatrix<f64>,
    pub clip_mass: f64,
}

/// Closed-form penalized update of `(γ_m, Σ^ζ_m)` for factor `m`.
pub fn m_step_structural(
    ctx: &ModelContext,
    stats: &SufficientStats,
    params_old: &ParamSet,
    m_fac: usize,
    alpha: f64,
    penalties: &Penalties,
) -> StructuralUpdate {
    let model = &ctx.model;
    let j = model.basis().dim();
    let q = model.q();
    let ops = &ctx.struct_ops;
    let lay = Layout {
        p: model.p(),
        q,
        j,
    };

    let latent: Vec<(usize, LatentEffect, usize)> = model
        .latent_edges_of(m_fac)
        .map(|(idx, e)| (idx, e.effect, e.source))
        .collect();
    let covars: Vec<(usize, CovariateEffect, usize)> = model
        .covariate_edges_of(m_fac)
        .map(|(idx, e)| (idx, e.effect, e.covariate))
        .collect();
    let lat_widths: Vec<usize> = latent
        .iter()
        .map(|(_, e, _)| Shape::of_latent(*e).width(j))
        .collect();
    let cov_widths: Vec<usize> = covars
        .iter()
        .map(|(_, e, _)| model.covariate_width(*e))
        .collect();
    let total: usize = lat_widths.iter().chain(cov_widths.iter()).sum();

    let sigma_inv = linalg::spd_inverse(&params_old.sigma_zeta[m_fac]);

    // Pooled latent moments (struct grid shared by every subject).
    let mut sum_mu_eta = DVector::zeros(q * j);
    let mut sum_eta_eta = DMatrix::zeros(q * j, q * j);
    for i in 0..ctx.n_subjects() {
        let m = &stats.moments[i];
        let eo = lay.eta_off(0);
        sum_mu_eta += m.mean.rows(eo, q * j);
        sum_eta_eta += m.second.view((eo, eo), (q * j, q * j));
    }

    let mut gamma_eta = Vec::new();
    let mut gamma_x = Vec::new();
    let mut theta = DVector::zeros(total);
    if total > 0 {
        let c_mat = ops.proj.transpose() * &sigma_inv * &ops.proj;
        let w_mat = &sigma_inv * &ops.proj;
        let mut offsets = Vec::with_capacity(latent.len() + covars.len());
        {
            let mut acc = 0;
            for w in lat_widths.iter().chain(cov_widths.iter()) {
                offsets.push(acc);
                acc += w;
            }
        }

        let mut h = DMatrix::zeros(total, total);
        let mut b = DVector::zeros(total);

        // Latent × latent and latent RHS from pooled moments.
        for (a_i, (_, ea, na)) in latent.iter().enumerate() {
            let sa = Shape::of_latent(*ea);
            let oa = offsets[a_i];
            let wa = lat_widths[a_i];
            for (b_i, (_, eb, nb)) in latent.iter().enumerate() {
                if b_i < a_i {
                    continue;
                }
                let sb = Shape::of_latent(*eb);
                let ob = offsets[b_i];
                let wb = lat_widths[b_i];
                let s_ab = block(&sum_eta_eta, na * j, nb * j, j);
                let gb = gram_block(sa, sb, &s_ab, &c_mat, ops);
                {
                    let mut view = h.view_mut((oa, ob), (wa, wb));
                    view += &gb;
                }
                if b_i != a_i {
                    let mut view = h.view_mut((ob, oa), (wb, wa));
                    view += gb.transpose();
                }
            }
            // RHS: response is η_m.
            let x = block(&sum_eta_eta, na * j, m_fac * j, j);
            let rb = rhs_block(sa, &x, &w_mat, ops);
            let mut bview = b.rows_mut(oa, wa);
            bview += rb;
        }

        // Per-subject covariate blocks.
        for i in 0..ctx.n_subjects() {
            let mi = &stats.moments[i];
            let mu_eta_i = mi.mean.rows(lay.eta_off(0), q * j).into_owned();
            let mu_m = mi.mean.rows(lay.eta_off(m_fac), j).into_owned();
            let mut designs: Vec<DMatrix<f64>> = Vec::with_capacity(covars.len());
            for (idx_c, (_, _, l)) in covars.iter().enumerate() {
                let edge = &model.spec().covariate_edges[covars[idx_c].0];
                let d = crate::model::covariate_design_block(
                    edge,
                    &ctx.data.covariates[i][*l],
                    ops,
                    ctx.smooth_bases.get(l),
                );
                designs.push(d);
            }
            for (c_i, d) in designs.iter().enumerate() {
                let oc = offsets[latent.len() + c_i];
                let wc = cov_widths[c_i];
                let wd = &sigma_inv * &ops.proj * d; // J × wc
                // covariate × covariate
                for (c_j, d2) in designs.iter().enumerate().skip(c_i) {
                    let oc2 = offsets[latent.len() + c_j];
                    let wc2 = cov_widths[c_j];
                    let gb = (&ops.proj * d2).transpose() * &wd;
                    // gb is wc2 × wc: place transposed
                    {
                        let mut view = h.view_mut((oc, oc2), (wc, wc2));
                        view += gb.transpose();
                    }
                    if c_j != c_i {
                        let mut view = h.view_mut((oc2, oc), (wc2, wc));
                        view += gb;
                    }
                }
                // latent × covariate via mean designs
                for (a_i, (_, ea, na)) in latent.iter().enumerate() {
                    let sa = Shape::of_latent(*ea);
                    let oa = offsets[a_i];
                    let wa = lat_widths[a_i];
                    let mu_a = mu_eta_i.rows(na * j, j).into_owned();
                    let v_mean = mean_design(sa, &mu_a, ops); // M × wa
                    let gb = (&ops.proj * v_mean).transpose() * &wd; // wa × wc
                    {
                        let mut view = h.view_mut((oa, oc), (wa, wc));
                        view += &gb;
                    }
                    let mut view = h.view_mut((oc, oa), (wc, wa));
                    view += gb.transpose();
                }
                // RHS: Dᵀ P ᵀ Σ⁻¹ E[η_m]
                let rb = (&ops.proj * d).transpose() * &sigma_inv * &mu_m;
                let mut bview = b.rows_mut(oc, wc);
                bview += rb;
            }
        }

        let mut system = h + penalties.gamma[m_fac].clone() * alpha;
        let ridge = 1e-10 * system.trace().max(1e-12) / total as f64;
        for i in 0..total {
            system[(i, i)] += ridge;
        }
        theta = linalg::spd_solve(&system, &b);
        for (a_i, _) in latent.iter().enumerate() {
            gamma_eta.push(theta.rows(offsets[a_i], lat_widths[a_i]).into_owned());
        }
        for (c_i, _) in covars.iter().enumerate() {
            gamma_x.push(
                theta
                    .rows(offsets[latent.len() + c_i], cov_widths[c_i])
                    .into_owned(),
            );
        }
    }
    let _ = theta;

    // Σ^ζ update: residual d = η_m − Σ_n W_n η_n − g_i*.
    let mut w_map = DMatrix::zeros(j, q * j);
    for (a_i, (_, ea, na)) in latent.iter().enumerate() {
        let map = crate::model::latent_edge_map(*ea, &gamma_eta[a_i], ops);
        let mut view = w_map.view_mut((0, na * j), (j, j));
        view += map;
    }
    let mut resid = DMatrix::zeros(j, j);
    for i in 0..ctx.n_subjects() {
        let mi = &stats.moments[i];
        let eo = lay.eta_off(0);
        let mo = lay.eta_off(m_fac);
        let mu_m = mi.mean.rows(mo, j).into_owned();
        let mu_all = mi.mean.rows(eo, q * j).into_owned();
        let s_mm = mi.second.view((mo, mo), (j, j)).into_owned();
        let s_m_all = mi.second.view((mo, eo), (j, q * j)).into_owned();
        let s_all = mi.second.view((eo, eo), (q * j, q * j)).into_owned();
        // deterministic covariate offset for this subject
        let mut g_star = DVector::zeros(j);
        for (c_i, (idx, _, l)) in covars.iter().enumerate() {
            let edge = &model.spec().covariate_edges[*idx];
            g_star += covariate_contribution(
                edge,
                &gamma_x[c_i],
                &ctx.data.covariates[i][*l],
                ops,
                ctx.smooth_bases.get(l),
            );
        }
        let cross = &s_m_all * w_map.transpose(); // J×J: E[η_m ηᵀ]Wᵀ
        let mut r = s_mm - &cross - cross.transpose()
            + &w_map * s_all * w_map.transpose();
        let mu_res = mu_m - &w_map * mu_all;
        r.ger(-1.0, &mu_res, &g_star, 1.0);
        r.ger(-1.0, &g_star, &mu_res, 1.0);
        r.ger(1.0, &g_star, &g_star, 1.0);
        resid += r;
    }
    resid /= ctx.n_subjects() as f64;
    linalg::symmetrize(&mut resid);
    let floor = 1e-8 * resid.trace().abs().max(1e-10) / j as f64;
    let (sigma_zeta, clip_mass) = linalg::clip_eigenvalues(&resid, floor);

    StructuralUpdate {
        gamma_eta,
        gamma_x,
        sigma_zeta,
        clip_mass,
    }
}

/// Apply both M-steps and return the updated parameter set.
pub fn m_step(
    ctx: &ModelContext,
    stats: &SufficientStats,
    params_old: &ParamSet,
    alpha: &AlphaVector,
    penalties: &Penalties,
) -> (ParamSet, f64) {
    let model = &ctx.model;
    let mut new = params_old.clone();
    let mut clip = 0.0;
    for j_ind in 0..model.p() {
        let upd = m_step_measurement(
            ctx,
            stats,
            params_old,
            j_ind,
            alpha.lambda[j_ind],
            penalties,
        );
        new.beta[j_ind] = upd.beta;
        for ((idx, _), coef) in model.free_loadings_of(j_ind).zip(&upd.lambda) {
            new.lambda[idx] = coef.clone();
        }
        new.sigma_eps[j_ind] = upd.sigma_eps;
        new.sigma2[j_ind] = upd.sigma2;
        clip += upd.clip_mass;
    }
    for m_fac in 0..model.q() {
        let upd = m_step_structural(ctx, stats, params_old, m_fac, alpha.gamma[m_fac], penalties);
        for ((idx, _), coef) in model.latent_edges_of(m_fac).zip(&upd.gamma_eta) {
            new.gamma_eta[idx] = coef.clone();
        }
        for ((idx, _), coef) in model.covariate_edges_of(m_fac).zip(&upd.gamma_x) {
            new.gamma_x[idx] = coef.clone();
        }
        new.sigma_zeta[m_fac] = upd.sigma_zeta;
        clip += upd.clip_mass;
    }
    (new, clip)
}

// ---------------------------------------------------------------------------
// Identification rescaling
// ---------------------------------------------------------------------------

/// Rescale variance-identified factors so that `∫ K̂^ζ_m(t,t) dt = 1`.
/// The transformation walks the likelihood's scale ridge: loadings on the
/// factor absorb the scale, coefficients into the factor shed it.
pub fn rescale_identification(model: &ValidatedModel, params: &mut ParamSet) {
    let gram0 = model.basis().gram(0).expect("order-0 gram");
    let q = model.q();
    let mut scale = vec![1.0; q];
    for m in 0..q {
        if model.identification(m) == Identification::UnitVariance {
            let var = (&params.sigma_zeta[m] * &gram0).trace();
            if var > 1e-12 {
                scale[m] = var.sqrt();
            }
        }
    }
    if scale.iter().all(|c| (*c - 1.0).abs() < 1e-15) {
        return;
    }
    for (idx, l) in model.spec().loadings.iter().enumerate() {
        if !l.anchored {
            params.lambda[idx] *= scale[l.factor];
        }
    }
    for (idx, e) in model.spec().latent_edges.iter().enumerate() {
        params.gamma_eta[idx] *= scale[e.source] / scale[e.target];
    }
    for (idx, e) in model.spec().covariate_edges.iter().enumerate() {
        params.gamma_x[idx] /= scale[e.factor];
    }
    for m in 0..q {
        params.sigma_zeta[m] /= scale[m] * scale[m];
    }
}

/// Resolve the `(Σ^ε_j, σ²_j)` split on square shared grids.
///
/// When every series of indicator `j` lives on one common grid with
/// `Eᵀ(EEᵀ)⁻¹E = I` (M ≤ J), the observed likelihood is exactly flat along
/// `Σ^ε − c (EEᵀ)⁻¹, σ² + c`, and the EM drifts along that ridge. Pick the
/// representative with maximal `σ²` (equivalently `Σ^ε` on the PSD
/// boundary); the transformation leaves the likelihood unchanged.
pub fn repartition_measurement_error(ctx: &ModelContext, params: &mut ParamSet) {
    let model = &ctx.model;
    let j = model.basis().dim();
    for jj in 0..model.p() {
        let mut grids = std::collections::BTreeSet::new();
        let mut any_empty = false;
        for i in 0..ctx.n_subjects() {
            match ctx.ops_idx[i][jj] {
                Some(g) => {
                    grids.insert(g);
                }
                None => any_empty = true,
            }
        }
        if any_empty || grids.len() != 1 {
            continue;
        }
        let ops = &ctx.unique_ops[*grids.iter().next().unwrap()];
        let m = ops.n_times();
        if m > j {
            continue;
        }
        let resid = ops.e.transpose() * &ops.proj - DMatrix::identity(m, m);
        if resid.amax() > 1e-8 {
            continue;
        }
        let gram = &ops.e * ops.e.transpose();
        let gram_half = linalg::psd_sqrt(&gram);
        let mut inner = &gram_half * &params.sigma_eps[jj] * &gram_half;
        linalg::symmetrize(&mut inner);
        let inner_eigs = inner.symmetric_eigen().eigenvalues;
        let c_star = inner_eigs.min();
        // Stay a margin inside the PSD cone: a near-singular Σ^ε would blow
        // up the GLS weights of the coefficient updates.
        let margin = 1e-2 * inner_eigs.sum() / m as f64;
        let shift = c_star - margin;
        if shift <= 0.0 {
            continue;
        }
        let gram_inv = linalg::spd_inverse(&gram);
        let mut new_eps = &params.sigma_eps[jj] - gram_inv * shift;
        linalg::symmetrize(&mut new_eps);
        let floor = 1e-10 * new_eps.trace().abs().max(1e-12) / j as f64;
        let (clipped, _) = linalg::clip_eigenvalues(&new_eps, floor);
        params.sigma_eps[jj] = clipped;
        params.sigma2[jj] += shift;
    }
}

/// Impose the pointwise normalization `K̂^ζ_m(t,t) = 1` on variance-identified
/// factors.
///
/// The model is invariant under time-varying rescalings
/// `η(t) → η(t)/c(t)` with loadings absorbing `c(t)`, so the averaged
/// constraint alone leaves a functional gauge freedom and the EM drifts along
/// it. The transform is realized by the basis-projected multiplier maps
/// `T_c = P diag(c(t_k)) Eᵀ` on the dense structural grid; factors carrying a
/// free fixed-effect loading keep the averaged normalization only (a scalar
/// loading cannot absorb a time-varying multiplier).
pub fn normalize_zeta_pointwise(ctx: &ModelContext, params: &mut ParamSet) {
    let model = &ctx.model;
    let basis = model.basis();
    let j = basis.dim();
    let ops = &ctx.struct_ops;
    let m_grid = ops.n_times();
    for m in 0..model.q() {
        if model.identification(m) != Identification::UnitVariance {
            continue;
        }
        let transformable = model
            .spec()
            .loadings
            .iter()
            .all(|l| l.factor != m || l.anchored || l.effect != LoadingEffect::Fixed);
        if !transformable {
            continue;
        }
        // c(t_k) = √K̂(t_k, t_k), clamped away from degeneracy.
        let mut c = DVector::zeros(m_grid);
        let mut max_dev: f64 = 0.0;
        for k in 0..m_grid {
            let e_k = &ops.blocks.e_cols[k];
            let var = (e_k.transpose() * &params.sigma_zeta[m] * e_k)[(0, 0)];
            c[k] = var.max(1e-12).sqrt().clamp(0.2, 5.0);
            max_dev = max_dev.max((c[k] - 1.0).abs());
        }
        if max_dev < 1e-10 {
            continue;
        }
        let diag_mul = |v: &DVector<f64>| -> DMatrix<f64> {
            let mut d = ops.e.transpose(); // M × J
            for k in 0..m_grid {
                for col in 0..j {
                    d[(k, col)] *= v[k];
                }
            }
            &ops.proj * d
        };
        let inv_c = c.map(|v| 1.0 / v);
        let t_mul = diag_mul(&c); // f ↦ c·f
        let t_div = diag_mul(&inv_c); // f ↦ f/c
        params.sigma_zeta[m] = &t_div * &params.sigma_zeta[m] * t_div.transpose();
        linalg::symmetrize(&mut params.sigma_zeta[m]);
        for (idx, l) in model.spec().loadings.iter().enumerate() {
            if l.factor != m || l.anchored {
                continue;
            }
            match l.effect {
                LoadingEffect::Fixed => unreachable!("excluded above"),
                LoadingEffect::Concurrent => params.lambda[idx] = &t_mul * &params.lambda[idx],
                LoadingEffect::Historical => {
                    // λ(s,t) ← λ(s,t) c(s): transform the s-axis.
                    let lam = crate::model::surface_matrix(&params.lambda[idx], j);
                    let new = &t_mul * lam;
                    params.lambda[idx] = flatten_surface(&new, j);
                }
            }
        }
        for (idx, e) in model.spec().latent_edges.iter().enumerate() {
            if e.source == m {
                match e.effect {
                    LatentEffect::Concurrent => {
                        params.gamma_eta[idx] = &t_mul * &params.gamma_eta[idx]
                    }
                    LatentEffect::Historical => {
                        let g = crate::model::surface_matrix(&params.gamma_eta[idx], j);
                        let new = &t_mul * g;
                        params.gamma_eta[idx] = flatten_surface(&new, j);
                    }
                }
            }
            if e.target == m {
                match e.effect {
                    LatentEffect::Concurrent => {
                        params.gamma_eta[idx] = &t_div * &params.gamma_eta[idx]
                    }
                    LatentEffect::Historical => {
                        // γ(s,t) ← γ(s,t)/c(t): transform the t-axis.
                        let g = crate::model::surface_matrix(&params.gamma_eta[idx], j);
                        let new = g * t_div.transpose();
                        params.gamma_eta[idx] = flatten_surface(&new, j);
                    }
                }
            }
        }
        for (idx, e) in model.spec().covariate_edges.iter().enumerate() {
            if e.factor != m {
                continue;
            }
            match e.effect {
                CovariateEffect::Linear | CovariateEffect::Concurrent => {
                    params.gamma_x[idx] = &t_div * &params.gamma_x[idx]
                }
                CovariateEffect::Historical => {
                    let g = crate::model::surface_matrix(&params.gamma_x[idx], j);
                    let new = g * t_div.transpose();
                    params.gamma_x[idx] = flatten_surface(&new, j);
                }
                CovariateEffect::Smooth => {
                    // s(x,t)/c(t): transform the time axis of the tensor.
                    let jh = model.spec().smooth_dim;
                    let g = DMatrix::from_fn(j, jh, |c1, c2| {
                        params.gamma_x[idx][c1 * jh + c2]
                    });
                    let new = &t_div * g;
                    let mut flat = DVector::zeros(j * jh);
                    for c1 in 0..j {
                        for c2 in 0..jh {
                            flat[c1 * jh + c2] = new[(c1, c2)];
                        }
                    }
                    params.gamma_x[idx] = flat;
                }
            }
        }
    }
}

fn flatten_surface(mat: &DMatrix<f64>, j: usize) -> DVector<f64> {
    // Inverse of `surface_matrix`: coef[t·J + s] = mat[s, t].
    let mut out = DVector::zeros(j * j);
    for s in 0..j {
        for t in 0..j {
            out[t * j + s] = mat[(s, t)];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Convergence
// ---------------------------------------------------------------------------

/// The two tolerance criteria: the maximum ℓ₂ change over coefficient
/// vectors (free loadings, intercepts, both γ families) and the maximum
/// change in the measurement-error variances.
pub fn check_convergence(
    prev: &ParamSet,
    new: &ParamSet,
    tol_coef: f64,
    tol_sigma2: f64,
) -> (f64, f64, bool) {
    let mut coef: f64 = 0.0;
    for (a, b) in prev.beta.iter().zip(&new.beta) {
        coef = coef.max((a - b).norm());
    }
    for (a, b) in prev.lambda.iter().zip(&new.lambda) {
        coef = coef.max((a - b).norm());
    }
    for (a, b) in prev.gamma_eta.iter().zip(&new.gamma_eta) {
        coef = coef.max((a - b).norm());
    }
    for (a, b) in prev.gamma_x.iter().zip(&new.gamma_x) {
        coef = coef.max((a - b).norm());
    }
    let mut s2: f64 = 0.0;
    for (a, b) in prev.sigma2.iter().zip(&new.sigma2) {
        s2 = s2.max((a - b).abs());
    }
    (coef, s2, coef < tol_coef && s2 < tol_sigma2)
}

// ---------------------------------------------------------------------------
// Penalized Q objective
// ---------------------------------------------------------------------------

/// Evaluate the penalized expected complete-data log-likelihood at `params`
/// under the frozen E-step moments.
pub fn penalized_q(
    ctx: &ModelContext,
    stats: &SufficientStats,
    params: &ParamSet,
    alpha: &AlphaVector,
    penalties: &Penalties,
) -> f64 {
    let model = &ctx.model;
    let j = model.basis().dim();
    let (p, q) = (model.p(), model.q());
    let lay = Layout { p, q, j };
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;

    // Per-indicator pieces.
    for jj in 0..p {
        let sigma_inv = linalg::spd_inverse(&params.sigma_eps[jj]);
        let log_det = linalg::spd_log_det(&params.sigma_eps[jj]);
        let anchored: Vec<(LoadingEffect, usize)> = model
            .anchored_loadings_of(jj)
            .map(|(_, l)| (l.effect, l.factor))
            .collect();
        let free: Vec<(usize, LoadingEffect, usize)> = model
            .free_loadings_of(jj)
            .map(|(idx, l)| (idx, l.effect, l.factor))
            .collect();
        for i in 0..ctx.n_subjects() {
            let ops = ctx.meas_ops(i, jj);
            let mut w_map = DMatrix::zeros(j, q * j);
            for (effect, factor) in &anchored {
                let mut view = w_map.view_mut((0, factor * j), (j, j));
                view += anchored_map(*effect, ops);
            }
            for (idx, effect, factor) in &free {
                let map = if *effect == LoadingEffect::Fixed {
                    anchored_map(LoadingEffect::Fixed, ops) * params.lambda[*idx][0]
                } else {
                    loading_map(*effect, &params.lambda[*idx], ops)
                };
                let mut view = w_map.view_mut((0, factor * j), (j, j));
                view += map;
            }
            let mi = &stats.moments[i];
            let yo = lay.y_off(jj);
            let eo = lay.eta_off(0);
            let mu_y = mi.mean.rows(yo, j).into_owned();
            let mu_eta = mi.mean.rows(eo, q * j).into_owned();
            let yy = mi.second.view((yo, yo), (j, j)).into_owned();
            let y_eta = mi.second.view((yo, eo), (j, q * j)).into_owned();
            let ee = mi.second.view((eo, eo), (q * j, q * j)).into_owned();
            let cross = &w_map * y_eta.transpose();
            let mut r = &yy - &cross - cross.transpose() + &w_map * ee * w_map.transpose();
            let mu_res = &mu_y - &w_map * mu_eta;
            let beta = &params.beta[jj];
            r.ger(-1.0, &mu_res, beta, 1.0);
            r.ger(-1.0, beta, &mu_res, 1.0);
            r.ger(1.0, beta, beta, 1.0);
            total += -0.5 * (j as f64 * ln2pi + log_det + (&sigma_inv * r).trace());

            // z | y piece
            let series = &ctx.data.series[i][jj];
            if !series.is_empty() {
                let m_len = series.len() as f64;
                let z = DVector::from_column_slice(&series.values);
                let ey = ops.e.transpose() * &mu_y;
                let gram = &ops.e * ops.e.transpose();
                let quad = z.dot(&z) - 2.0 * z.dot(&ey) + (gram * &yy).trace();
                total +=
                    -0.5 * (m_len * (ln2pi + params.sigma2[jj].ln()) + quad / params.sigma2[jj]);
            }
        }
    }

    // Per-factor pieces.
    for m_fac in 0..q {
        let sigma_inv = linalg::spd_inverse(&params.sigma_zeta[m_fac]);
        let log_det = linalg::spd_log_det(&params.sigma_zeta[m_fac]);
        let ops = &ctx.struct_ops;
        let latent: Vec<(usize, LatentEffect, usize)> = model
            .latent_edges_of(m_fac)
            .map(|(idx, e)| (idx, e.effect, e.source))
            .collect();
        let covars: Vec<(usize, usize)> = model
            .covariate_edges_of(m_fac)
            .map(|(idx, e)| (idx, e.covariate))
            .collect();
        let mut w_map = DMatrix::zeros(j, q * j);
        for (idx, effect, source) in &latent {
            let map = crate::model::latent_edge_map(*effect, &params.gamma_eta[*idx], ops);
            let mut view = w_map.view_mut((0, source * j), (j, j));
            view += map;
        }
        for i in 0..ctx.n_subjects() {
            let mi = &stats.moments[i];
            let eo = lay.eta_off(0);
            let mo = lay.eta_off(m_fac);
            let mu_m = mi.mean.rows(mo, j).into_owned();
            let mu_all = mi.mean.rows(eo, q * j).into_owned();
            let s_mm = mi.second.view((mo, mo), (j, j)).into_owned();
            let s_m_all = mi.second.view((mo, eo), (j, q * j)).into_owned();
            let s_all = mi.second.view((eo, eo), (q * j, q * j)).into_owned();
            let mut g_star = DVector::zeros(j);
            for (idx, l) in &covars {
                let edge = &model.spec().covariate_edges[*idx];
                g_star += covariate_contribution(
                    edge,
                    &params.gamma_x[*idx],
                    &ctx.data.covariates[i][*l],
                    ops,
                    ctx.smooth_bases.get(l),
                );
            }
            let cross = &s_m_all * w_map.transpose();
            let mut r = s_mm - &cross - cross.transpose() + &w_map * s_all * w_map.transpose();
            let mu_res = mu_m - &w_map * mu_all;
            r.ger(-1.0, &mu_res, &g_star, 1.0);
            r.ger(-1.0, &g_star, &mu_res, 1.0);
            r.ger(1.0, &g_star, &g_star, 1.0);
            total += -0.5 * (j as f64 * ln2pi + log_det + (&sigma_inv * r).trace());
        }
    }

    // Penalties: pen(λ_j) over [β | free edges] layout; pen(γ_m).
    for jj in 0..p {
        let mut stacked = params.beta[jj].clone();
        for (idx, _) in model.free_loadings_of(jj) {
            stacked = stack(&stacked, &params.lambda[idx]);
        }
        total -= alpha.lambda[jj] * stacked.dot(&(&penalties.lambda[jj] * &stacked));
    }
    for m_fac in 0..q {
        let mut stacked = DVector::zeros(0);
        for (idx, _) in model.latent_edges_of(m_fac) {
            stacked = stack(&stacked, &params.gamma_eta[idx]);
        }
        for (idx, _) in model.covariate_edges_of(m_fac) {
            stacked = stack(&stacked, &params.gamma_x[idx]);
        }
        if stacked.len() > 0 {
            total -= alpha.gamma[m_fac] * stacked.dot(&(&penalties.gamma[m_fac] * &stacked));
        }
    }
    total
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Deterministic data-driven starting values.
///
/// Intercepts come from pooled penalized mean-curve fits and factor scores
/// from cross-indicator averages of the smoothed, centered curves; one
/// M-step pass against these pseudo-complete data then initializes the
/// loadings, structural coefficients, and covariances. Starting from flat
/// loadings instead routinely traps the EM in a local optimum with the
/// loading shape folded into the factor covariance.
pub fn init_params(ctx: &ModelContext) -> ParamSet {
    let model = &ctx.model;
    let basis = model.basis();
    let j = basis.dim();
    let (p, q) = (model.p(), model.q());
    let n = ctx.n_subjects();
    let mut params = ParamSet::zeros(model);

    // Smoothed per-(subject, indicator) coefficient curves.
    let smoothed: Vec<Vec<DVector<f64>>> = (0..n)
        .map(|i| {
            (0..p)
                .map(|jj| crate::dataset::project_series(basis, &ctx.data.series[i][jj]))
                .collect()
        })
        .collect();

    // β_j from a pooled penalized least-squares mean fit; σ²_j from local
    // first differences.
    let pen = basis.gram(2).expect("penalty gram");
    for jj in 0..p {
        let mut gram = DMatrix::zeros(j, j);
        let mut rhs = DVector::zeros(j);
        let mut var_acc = 0.0;
        let mut var_n = 0.0;
        let mut diff_acc = 0.0;
        let mut diff_n = 0.0;
        let mut mean_acc = 0.0;
        let mut mean_n = 0.0f64;
        for i in 0..n {
            let series = &ctx.data.series[i][jj];
            if series.is_empty() {
                continue;
            }
            let ops = ctx.meas_ops(i, jj);
            gram += &ops.e * ops.e.transpose();
            let z = DVector::from_column_slice(&series.values);
            rhs += &ops.e * &z;
            for v in &series.values {
                mean_acc += v;
                mean_n += 1.0;
            }
            for w in series.values.windows(2) {
                diff_acc += (w[1] - w[0]).powi(2);
                diff_n += 1.0;
            }
        }
        for v in ctx.data.series.iter().flat_map(|row| &row[jj].values) {
            var_acc += (v - mean_acc / mean_n.max(1.0)).powi(2);
            var_n += 1.0;
        }
        let weight = 1e-4 * gram.trace().max(1e-12) / pen.trace().max(1e-12);
        gram += &pen * weight;
        let ridge = 1e-8 * gram.trace() / j as f64;
        for d in 0..j {
            gram[(d, d)] += ridge;
        }
        params.beta[jj] = linalg::spd_solve(&gram, &rhs);
        let var = if var_n > 0.0 { var_acc / var_n } else { 1.0 };
        let sigma2 = if diff_n > 0.0 {
            (diff_acc / diff_n / 2.0).max(1e-4 * var)
        } else {
            0.1 * var
        };
        params.sigma2[jj] = sigma2.max(1e-8);
        params.sigma_eps[jj] = DMatrix::identity(j, j) * 0.1;
    }
    for m in 0..q {
        params.sigma_zeta[m] = DMatrix::identity(j, j) * 0.1;
    }
    // Free loadings: constant one for fixed/concurrent, zero for historical.
    let one = basis.project_function(|_| 1.0, 128);
    for (idx, l) in model.spec().loadings.iter().enumerate() {
        if l.anchored {
            continue;
        }
        params.lambda[idx] = match l.effect {
            LoadingEffect::Fixed => DVector::from_element(1, 1.0),
            LoadingEffect::Concurrent => one.clone(),
            LoadingEffect::Historical => DVector::zeros(j * j),
        };
    }

    // Factor scores: the anchor indicator's centered smoothed curve when
    // anchored, otherwise the average over indicators with pointwise
    // (fixed/concurrent) edges on the factor.
    let mut scores = vec![vec![DVector::zeros(j); q]; n];
    for m in 0..q {
        let contributing: Vec<usize> = match model.anchor_loading(m) {
            Some(idx) => vec![model.spec().loadings[idx].indicator],
            None => model
                .spec()
                .loadings
                .iter()
                .filter(|l| l.factor == m && l.effect != LoadingEffect::Historical)
                .map(|l| l.indicator)
                .collect(),
        };
        if contributing.is_empty() {
            continue;
        }
        for i in 0..n {
            let mut acc = DVector::zeros(j);
            let mut cnt = 0.0;
            for &jj in &contributing {
                if ctx.data.series[i][jj].is_empty() {
                    continue;
                }
                acc += &smoothed[i][jj] - &params.beta[jj];
                cnt += 1.0;
            }
            if cnt > 0.0 {
                scores[i][m] = acc / cnt;
            }
        }
    }

    // One M-step pass against the pseudo-complete data (smoothed curves as
    // y, scores as η): degenerate moments make the updates plain penalized
    // GLS fits with known regressors.
    let moments: Vec<McMoments> = (0..n)
        .map(|i| {
            let mut mean = DVector::zeros((p + q) * j);
            for jj in 0..p {
                mean.rows_mut(jj * j, j).copy_from(&smoothed[i][jj]);
            }
            for m in 0..q {
                mean.rows_mut((p + m) * j, j).copy_from(&scores[i][m]);
            }
            let mut second = DMatrix::zeros((p + q) * j, (p + q) * j);
            second.ger(1.0, &mean, &mean, 1.0);
            McMoments { mean, second }
        })
        .collect();
    let stats = SufficientStats {
        moments,
        mc_sample_count: 1,
        clip_mass: 0.0,
        loglik_z: 0.0,
    };
    let penalties = build_penalties(ctx);
    let alpha = AlphaVector::shared(model, 1e-3, 1e-3);
    let (mut init, _) = m_step(ctx, &stats, &params, &alpha, &penalties);
    // Keep the difference-based σ² (the pseudo-data pass would fold the
    // smoothing residual into it twice) and floor the covariances away from
    // degeneracy.
    init.sigma2 = params.sigma2.clone();
    for s in init.sigma_eps.iter_mut() {
        let floor = 1e-3 * s.trace().max(1e-3) / j as f64;
        let (clipped, _) = linalg::clip_eigenvalues(s, floor);
        *s = clipped;
    }
    for s in init.sigma_zeta.iter_mut() {
        let floor = 1e-3 * s.trace().max(1e-3) / j as f64;
        let (clipped, _) = linalg::clip_eigenvalues(s, floor);
        *s = clipped;
    }
    init
}

// ---------------------------------------------------------------------------
// The MCEM driver
// ---------------------------------------------------------------------------

/// One EM iteration's diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterDiag {
    pub iter: usize,
    pub n_mc: usize,
    pub tol_coef: f64,
    pub tol_sigma2: f64,
    pub loglik_z: f64,
    pub clip_mass: f64,
}

/// Converged parameters, smoothing weights, and the tolerance trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ParamSet,
    pub alpha: AlphaVector,
    pub trajectory: Vec<IterDiag>,
    pub converged: bool,
    pub iterations: usize,
    /// Observed-data Gaussian log-likelihood of `z` at the final parameters.
    pub loglik_z: f64,
}

/// Fit the model by penalized Monte Carlo EM with fixed smoothing weights.
pub fn fit_mcem_with_alpha(
    ctx: &ModelContext,
    config: &FitConfig,
    alpha: &AlphaVector,
    start: Option<&ParamSet>,
) -> Result<FitResult, FitError> {
    config.validate()?;
    let penalties = build_penalties(ctx);
    let mut params = match start {
        Some(p) => {
            p.check_shapes(&ctx.model)?;
            p.clone()
        }
        None => init_params(ctx),
    };
    normalize_zeta_pointwise(ctx, &mut params);
    rescale_identification(&ctx.model, &mut params);
    let mut trajectory = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=config.max_iter {
        iterations = iter;
        let n_mc = config.mc_samples(iter);
        let stats = e_step(ctx, &params, n_mc, config.seed, iter);
        let (mut new_params, clip) = m_step(ctx, &stats, &params, alpha, &penalties);
        repartition_measurement_error(ctx, &mut new_params);
        normalize_zeta_pointwise(ctx, &mut new_params);
        rescale_identification(&ctx.model, &mut new_params);
        let (tc, ts, ok) =
            check_convergence(&params, &new_params, config.tol_coef, config.tol_sigma2);
        trajectory.push(IterDiag {
            iter,
            n_mc,
            tol_coef: tc,
            tol_sigma2: ts,
            loglik_z: stats.loglik_z,
            clip_mass: stats.clip_mass + clip,
        });
        params = new_params;
        if ok {
            converged = true;
            break;
        }
    }
    let joint = crate::gp::assemble_joint_moments(ctx, &params);
    let loglik_z = crate::gp::observed_loglik(&joint);
    Ok(FitResult {
        params,
        alpha: alpha.clone(),
        trajectory,
        converged,
        iterations,
        loglik_z,
    })
}

/// Fit the model, selecting smoothing weights by cross-validation when the
/// configuration asks for it.
pub fn fit_mcem(
    model: &ValidatedModel,
    dataset: &FunctionalDataset,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    let ctx = ModelContext::new(model, dataset)?;
    let alpha = match &config.alpha {
        AlphaChoice::Fixed { lambda, gamma } => AlphaVector::shared(model, *lambda, *gamma),
        AlphaChoice::Cv => select_smoothing(model, dataset, config)?,
    };
    fit_mcem_with_alpha(&ctx, config, &alpha, None)
}

/// K-fold cross-validation over subjects: the score of a candidate weight is
/// the held-out observed-data Gaussian log-likelihood of `z`; ties break to
/// the smallest weight.
pub fn select_smoothing(
    model: &ValidatedModel,
    dataset: &FunctionalDataset,
    config: &FitConfig,
) -> Result<AlphaVector, FitError> {
    config.validate()?;
    if config.alpha_grid.is_empty() {
        return Err(FitError::BadConfig("empty alpha grid".into()));
    }
    let n = dataset.n_subjects();
    let folds = config.cv_folds;
    if n < folds || folds < 2 {
        return Err(FitError::EmptyFold { n, folds });
    }
    let mut grid = config.alpha_grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Structural weights are tied to the same grid; skip the γ dimension
    // when the model has no structural coefficients.
    let has_struct = !model.spec().latent_edges.is_empty()
        || !model.spec().covariate_edges.is_empty();
    let gamma_grid: Vec<f64> = if has_struct { grid.clone() } else { vec![0.0] };

    let mut best: Option<(f64, AlphaVector)> = None;
    for &al in &grid {
        for &ag in &gamma_grid {
            let alpha = AlphaVector::shared(model, al, ag);
            let mut score = 0.0;
            for fold in 0..folds {
                let train_idx: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
                let test_idx: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
                if train_idx.is_empty() || test_idx.is_empty() {
                    return Err(FitError::EmptyFold { n, folds });
                }
                let train = dataset.resample_subjects(&train_idx);
                let test = dataset.resample_subjects(&test_idx);
                let train_ctx = ModelContext::new(model, &train)?;
                let fit = fit_mcem_with_alpha(&train_ctx, config, &alpha, None)?;
                let test_ctx = ModelContext::with_smooth_bases(
                    model,
                    &test,
                    train_ctx.smooth_bases.clone(),
                )?;
                let joint = crate::gp::assemble_joint_moments(&test_ctx, &fit.params);
                score += crate::gp::observed_loglik(&joint);
            }
            let better = match &best {
                None => true,
                Some((s, _)) => score > *s,
            };
            if better {
                best = Some((score, alpha));
            }
        }
    }
    Ok(best.expect("non-empty grid").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_long_format, LongRecord};
    use crate::model::{parse_model_text, validate_model};
    use approx::assert_abs_diff_eq;

    fn toy_model() -> ValidatedModel {
        let text = "\
basis bspline 4 order 4
indicator z1
factor eta variance
load z1 on eta concurrent
";
        validate_model(parse_model_text(text).unwrap()).unwrap()
    }

    fn toy_dataset(n: usize, m: usize) -> FunctionalDataset {
        let mut recs = Vec::new();
        for i in 0..n {
            for k in 1..=m {
                let t = k as f64 / m as f64;
                recs.push(LongRecord {
                    subject: format!("s{i:03}"),
                    variable: "z1".into(),
                    time: t,
                    value: (i as f64 * 0.1) + t + 0.3 * (6.0 * t).sin(),
                });
            }
        }
        ingest_long_format(&recs, &[], (0.0, 1.0)).unwrap()
    }

    #[test]
    fn mc_schedule_grows_and_caps() {
        let cfg = FitConfig::default();
        assert_eq!(cfg.mc_samples(1), 100);
        assert_eq!(cfg.mc_samples(10), 100);
        assert_eq!(cfg.mc_samples(11), 150);
        assert_eq!(cfg.mc_samples(21), 225);
        assert!(cfg.mc_samples(500) <= 1000);
    }

    #[test]
    fn convergence_criteria_match_definitions() {
        let model = toy_model();
        let mut a = ParamSet::zeros(&model);
        let b = a.clone();
        let (tc, ts, conv) = check_convergence(&a, &b, 1e-3, 1e-4);
        assert_eq!(tc, 0.0);
        assert_eq!(ts, 0.0);
        assert!(conv);
        // Single β entry changed by 0.5 → tol_coef = 0.5.
        a.beta[0][0] += 0.5;
        let (tc, _, conv) = check_convergence(&a, &b, 1e-3, 1e-4);
        assert_abs_diff_eq!(tc, 0.5, epsilon = 1e-15);
        assert!(!conv);
        // Tolerances (2e-3, 0) against thresholds (1e-3, 1e-4) → not converged.
        let mut c = b.clone();
        c.beta[0][0] += 2e-3;
        let (tc, ts, conv) = check_convergence(&c, &b, 1e-3, 1e-4);
        assert_abs_diff_eq!(tc, 2e-3, epsilon = 1e-15);
        assert_eq!(ts, 0.0);
        assert!(!conv);
    }

    #[test]
    fn e_step_is_deterministic_given_seed() {
        let model = toy_model();
        let ds = toy_dataset(3, 4);
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let params = init_params(&ctx);
        let a = e_step(&ctx, &params, 1, 7, 1);
        let b = e_step(&ctx, &params, 1, 7, 1);
        for (x, y) in a.moments.iter().zip(&b.moments) {
            assert_eq!(x.mean, y.mean);
            assert_eq!(x.second, y.second);
        }
    }

    #[test]
    fn doubling_mc_samples_shrinks_moment_error() {
        // The MC standard error of the moment estimates scales like
        // 1/√n_mc: quadrupling the sample size should roughly halve the
        // error against a high-precision reference.
        let model = toy_model();
        let ds = toy_dataset(4, 5);
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let params = init_params(&ctx);
        let reference = e_step(&ctx, &params, 60_000, 99, 1);
        let err = |stats: &SufficientStats| -> f64 {
            stats
                .moments
                .iter()
                .zip(&reference.moments)
                .map(|(a, b)| (&a.mean - &b.mean).norm())
                .sum::<f64>()
        };
        let mut e_small = 0.0;
        let mut e_large = 0.0;
        for rep in 0..12 {
            e_small += err(&e_step(&ctx, &params, 50, 1000 + rep, 1));
            e_large += err(&e_step(&ctx, &params, 200, 2000 + rep, 1));
        }
        let ratio = e_small / e_large;
        // Expect ≈ 2 with generous slack for MC noise.
        assert!(
            ratio > 1.4 && ratio < 2.9,
            "observed error ratio {ratio} (expected ≈ 2)"
        );
    }

    #[test]
    fn zero_residual_data_drives_sigma2_to_zero_floor() {
        // Perfectly basis-represented curves with no noise: σ² shrinks to
        // (near) zero after a few iterations.
        let model = toy_model();
        let mut recs = Vec::new();
        for i in 0..6 {
            for k in 1..=4 {
                let t = k as f64 / 4.0;
                recs.push(LongRecord {
                    subject: format!("s{i}"),
                    variable: "z1".into(),
                    time: t,
                    value: 1.0 + 0.5 * t + 0.1 * i as f64,
                });
            }
        }
        let ds = ingest_long_format(&recs, &[], (0.0, 1.0)).unwrap();
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let cfg = FitConfig {
            max_iter: 15,
            ..FitConfig::default()
        };
        let alpha = AlphaVector::shared(&model, 1e-6, 0.0);
        let fit = fit_mcem_with_alpha(&ctx, &cfg, &alpha, None).unwrap();
        assert!(fit.params.sigma2[0] < 1e-2, "σ² = {}", fit.params.sigma2[0]);
    }

    #[test]
    fn rescale_normalizes_unit_variance_factor() {
        let model = toy_model();
        let mut params = ParamSet::zeros(&model);
        params.sigma_zeta[0] *= 4.0;
        params.lambda[0] = DVector::from_element(4, 2.0);
        rescale_identification(&model, &mut params);
        let gram0 = model.basis().gram(0).unwrap();
        let var = (&params.sigma_zeta[0] * gram0).trace();
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn m_step_matches_penalized_gls_oracle() {
        // Known η (degenerate moments), one indicator, no anchor: the update
        // must equal the penalized GLS solution with an explicitly built
        // design matrix, at α = 0 and α = 1.
        let model = toy_model();
        let ds = toy_dataset(5, 4);
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let mut params = init_params(&ctx);
        params.sigma_eps[0] = DMatrix::from_fn(4, 4, |r, c| if r == c { 0.5 } else { 0.1 });
        let penalties = build_penalties(&ctx);
        let j = 4;

        // Degenerate stats: u fixed at chosen values per subject.
        let mut moments = Vec::new();
        let mut us = Vec::new();
        for i in 0..ctx.n_subjects() {
            let u = DVector::from_fn(2 * j, |r, _| ((i + r) as f64 * 0.37).sin());
            let mut second = DMatrix::zeros(2 * j, 2 * j);
            second.ger(1.0, &u, &u, 1.0);
            moments.push(McMoments {
                mean: u.clone(),
                second,
            });
            us.push(u);
        }
        let stats = SufficientStats {
            moments,
            mc_sample_count: 1,
            clip_mass: 0.0,
            loglik_z: 0.0,
        };

        for &alpha in &[0.0, 1.0] {
            let upd = m_step_measurement(&ctx, &stats, &params, 0, alpha, &penalties);
            // Oracle: stack the explicit designs.
            let sigma_inv = linalg::spd_inverse(&params.sigma_eps[0]);
            let k_tot = 2 * j;
            let mut h = DMatrix::zeros(k_tot, k_tot);
            let mut b = DVector::zeros(k_tot);
            for (i, u) in us.iter().enumerate() {
                let ops = ctx.meas_ops(i, 0);
                let eta = u.rows(j, j).into_owned();
                let y = u.rows(0, j).into_owned();
                let mut f = DMatrix::zeros(j, k_tot);
                f.view_mut((0, 0), (j, j))
                    .copy_from(&DMatrix::identity(j, j));
                let rows = effect_design_rows(j, false, &eta, ops);
                let block = &ops.proj * rows;
                f.view_mut((0, j), (j, j)).copy_from(&block);
                h += f.transpose() * &sigma_inv * &f;
                b += f.transpose() * &sigma_inv * y;
            }
            let mut system = h + penalties.lambda[0].clone() * alpha;
            let ridge = 1e-10 * system.trace() / k_tot as f64;
            for d in 0..k_tot {
                system[(d, d)] += ridge;
            }
            let theta = linalg::spd_solve(&system, &b);
            for r in 0..j {
                assert_abs_diff_eq!(upd.beta[r], theta[r], epsilon = 1e-8);
                assert_abs_diff_eq!(upd.lambda[0][r], theta[j + r], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn heavy_smoothing_flattens_concurrent_loading() {
        // α → huge drives the loading's curvature to (near) zero.
        let model = toy_model();
        let ds = toy_dataset(8, 6);
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let cfg = FitConfig {
            max_iter: 10,
            ..FitConfig::default()
        };
        let alpha = AlphaVector::shared(&model, 1e12, 0.0);
        let fit = fit_mcem_with_alpha(&ctx, &cfg, &alpha, None).unwrap();
        let pen = crate::basis::penalty_matrix(
            model.basis(),
            crate::basis::PenaltyKind::Concurrent,
            None,
        )
        .unwrap()
        .matrix;
        let lam = &fit.params.lambda[0];
        let curvature = lam.dot(&(&pen * lam));
        assert!(curvature < 1e-6, "curvature {curvature}");
    }

    #[test]
    fn structural_update_without_edges_averages_eta_outer_product() {
        // B_m zero selector: Σ^ζ is the average E[ηηᵀ].
        let model = toy_model();
        let ds = toy_dataset(4, 4);
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let params = init_params(&ctx);
        let penalties = build_penalties(&ctx);
        let stats = e_step(&ctx, &params, 50, 3, 1);
        let upd = m_step_structural(&ctx, &stats, &params, 0, 0.0, &penalties);
        assert!(upd.gamma_eta.is_empty() && upd.gamma_x.is_empty());
        let j = 4;
        let mut avg = DMatrix::zeros(j, j);
        for m in &stats.moments {
            avg += m.second.view((j, j), (j, j));
        }
        avg /= ctx.n_subjects() as f64;
        // Equality up to the PSD floor clipping.
        assert!((upd.sigma_zeta - avg).norm() < 1e-8);
    }

    #[test]
    fn q_objective_never_decreases_within_m_step() {
        let model = toy_model();
        let ds = toy_dataset(6, 5);
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let params = init_params(&ctx);
        let penalties = build_penalties(&ctx);
        let alpha = AlphaVector::shared(&model, 1e-3, 1e-3);
        let stats = e_step(&ctx, &params, 80, 5, 1);
        let q0 = penalized_q(&ctx, &stats, &params, &alpha, &penalties);
        let (new_params, _) = m_step(&ctx, &stats, &params, &alpha, &penalties);
        let q1 = penalized_q(&ctx, &stats, &new_params, &alpha, &penalties);
        assert!(
            q1 >= q0 - 1e-8,
            "Q decreased across the M-step: {q0} → {q1}"
        );
    }

    #[test]
    fn cv_single_grid_value_is_returned() {
        let model = toy_model();
        let ds = toy_dataset(6, 4);
        let cfg = FitConfig {
            alpha: AlphaChoice::Cv,
            alpha_grid: vec![0.25],
            cv_folds: 2,
            max_iter: 3,
            ..FitConfig::default()
        };
        let alpha = select_smoothing(&model, &ds, &cfg).unwrap();
        assert_eq!(alpha.lambda, vec![0.25]);
    }
}
