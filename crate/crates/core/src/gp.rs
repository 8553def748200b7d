//! Joint Gaussian generator distributions of the latent factor coefficients
//! `η`, the indicator coefficients `y`, and the observations `z`, with
//! conditioning and sampling for the Monte Carlo E-step.
//!
//! Subjects are independent, so the stacked system is block-diagonal across
//! subjects; everything here is assembled subject by subject.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, BasisSystem};
use crate::dataset::{bind, BoundData, DataError, FunctionalDataset, Series};
use crate::linalg;
use crate::model::{
    anchored_map, covariate_contribution, latent_edge_map, loading_map, CovariateValue, GridOps,
    LoadingEffect, ValidatedModel,
};

#[derive(Debug, Error)]
pub enum GpError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("parameter set has wrong shapes: {0}")]
    BadParamShape(String),
}

/// All model parameters `θ` in basis-coefficient form.
///
/// Loading, latent-edge and covariate-edge coefficients are stored in the
/// declaration order of the model spec; anchored loadings hold the constant
/// `1` as a length-one vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    /// Functional intercept coefficients `β_j`, per indicator.
    pub beta: Vec<DVector<f64>>,
    /// Loading coefficients `λ_{jm}`, per loading edge.
    pub lambda: Vec<DVector<f64>>,
    /// Residual-process coefficient covariances `Σ^ε_j`, per indicator.
    pub sigma_eps: Vec<DMatrix<f64>>,
    /// Measurement-error variances `σ²_j`, per indicator.
    pub sigma2: Vec<f64>,
    /// Latent-edge coefficients `γ^η_{mn}`, per latent edge.
    pub gamma_eta: Vec<DVector<f64>>,
    /// Covariate-edge coefficients `γ^x_{ml}`, per covariate edge.
    pub gamma_x: Vec<DVector<f64>>,
    /// Unique-factor coefficient covariances `Σ^ζ_m`, per factor.
    pub sigma_zeta: Vec<DMatrix<f64>>,
}

impl ParamSet {
    /// Zero-initialized parameters with the right shapes for a model.
    pub fn zeros(model: &ValidatedModel) -> ParamSet {
        let j = model.basis().dim();
        let spec = model.spec();
        ParamSet {
            beta: vec![DVector::zeros(j); model.p()],
            lambda: spec
                .loadings
                .iter()
                .map(|l| {
                    if l.anchored {
                        DVector::from_element(1, 1.0)
                    } else {
                        DVector::zeros(model.loading_width(l.effect))
                    }
                })
                .collect(),
            sigma_eps: vec![DMatrix::identity(j, j); model.p()],
            sigma2: vec![1.0; model.p()],
            gamma_eta: spec
                .latent_edges
                .iter()
                .map(|e| DVector::zeros(model.latent_width(e.effect)))
                .collect(),
            gamma_x: spec
                .covariate_edges
                .iter()
                .map(|e| DVector::zeros(model.covariate_width(e.effect)))
                .collect(),
            sigma_zeta: vec![DMatrix::identity(j, j); model.q()],
        }
    }

    pub fn check_shapes(&self, model: &ValidatedModel) -> Result<(), GpError> {
        let j = model.basis().dim();
        let bad = |msg: String| Err(GpError::BadParamShape(msg));
        if self.beta.len() != model.p()
            || self.sigma_eps.len() != model.p()
            || self.sigma2.len() != model.p()
            || self.sigma_zeta.len() != model.q()
            || self.lambda.len() != model.spec().loadings.len()
            || self.gamma_eta.len() != model.spec().latent_edges.len()
            || self.gamma_x.len() != model.spec().covariate_edges.len()
        {
            return bad("container lengths".into());
        }
        for (jj, b) in self.beta.iter().enumerate() {
            if b.len() != j {
                return bad(format!("beta[{jj}]"));
            }
        }
        for (idx, (l, c)) in model.spec().loadings.iter().zip(&self.lambda).enumerate() {
            let want = if l.anchored {
                1
            } else {
                model.loading_width(l.effect)
            };
            if c.len() != want {
                return bad(format!("lambda[{idx}]"));
            }
        }
        for (idx, (e, c)) in model
            .spec()
            .latent_edges
            .iter()
            .zip(&self.gamma_eta)
            .enumerate()
        {
            if c.len() != model.latent_width(e.effect) {
                return bad(format!("gamma_eta[{idx}]"));
            }
        }
        for (idx, (e, c)) in model
            .spec()
            .covariate_edges
            .iter()
            .zip(&self.gamma_x)
            .enumerate()
        {
            if c.len() != model.covariate_width(e.effect) {
                return bad(format!("gamma_x[{idx}]"));
            }
        }
        for s in self.sigma_eps.iter().chain(self.sigma_zeta.iter()) {
            if s.nrows() != j || s.ncols() != j {
                return bad("covariance shape".into());
            }
        }
        if self.sigma2.iter().any(|v| !(*v > 0.0)) {
            return bad("sigma2 must be positive".into());
        }
        Ok(())
    }
}

/// Immutable per-fit context: the bound data, deduplicated per-(subject,
/// indicator) grid operators, the dense structural grid, and smooth bases.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub model: ValidatedModel,
    pub data: BoundData,
    /// Unique grid operators; `ops_idx[i][j]` points into it (`None` for an
    /// empty series).
    pub unique_ops: Vec<Arc<GridOps>>,
    pub ops_idx: Vec<Vec<Option<usize>>>,
    /// Dense internal grid used by the structural model.
    pub struct_ops: Arc<GridOps>,
    pub smooth_bases: BTreeMap<usize, BasisSystem>,
}

impl ModelContext {
    pub fn new(model: &ValidatedModel, dataset: &FunctionalDataset) -> Result<Self, GpError> {
        let data = bind(model, dataset)?;
        Self::from_bound(model, data)
    }

    /// Build a context reusing smooth bases from a previous fit (bootstrap
    /// replicates keep the original bases).
    pub fn with_smooth_bases(
        model: &ValidatedModel,
        dataset: &FunctionalDataset,
        smooth_bases: BTreeMap<usize, BasisSystem>,
    ) -> Result<Self, GpError> {
        let data = bind(model, dataset)?;
        let mut ctx = Self::from_bound(model, data)?;
        ctx.smooth_bases = smooth_bases;
        Ok(ctx)
    }

    fn from_bound(model: &ValidatedModel, data: BoundData) -> Result<Self, GpError> {
        let basis = model.basis();
        let mut unique_ops: Vec<Arc<GridOps>> = Vec::new();
        let mut key_map: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        let mut ops_idx = Vec::with_capacity(data.n);
        for i in 0..data.n {
            let mut row = Vec::with_capacity(model.p());
            for j in 0..model.p() {
                let series: &Series = &data.series[i][j];
                if series.is_empty() {
                    row.push(None);
                    continue;
                }
                let key: Vec<u64> = series.times.iter().map(|t| t.to_bits()).collect();
                let idx = match key_map.get(&key) {
                    Some(&idx) => idx,
                    None => {
                        let ops = GridOps::new(basis, &series.times)?;
                        unique_ops.push(Arc::new(ops));
                        let idx = unique_ops.len() - 1;
                        key_map.insert(key, idx);
                        idx
                    }
                };
                row.push(Some(idx));
            }
            ops_idx.push(row);
        }
        let j = basis.dim();
        let n_struct = (4 * j + 1).max(41);
        let (lo, hi) = basis.domain();
        let grid: Vec<f64> = (0..n_struct)
            .map(|k| lo + (hi - lo) * k as f64 / (n_struct - 1) as f64)
            .collect();
        let struct_ops = Arc::new(GridOps::new(basis, &grid)?);
        let smooth_bases = model
            .smooth_bases(&data.covariate_ranges)
            .map_err(|e| GpError::BadParamShape(e.to_string()))?;
        Ok(ModelContext {
            model: model.clone(),
            data,
            unique_ops,
            ops_idx,
            struct_ops,
            smooth_bases,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.data.n
    }

    pub fn grid_ops(&self, i: usize, j: usize) -> Option<&Arc<GridOps>> {
        self.ops_idx[i][j].map(|k| &self.unique_ops[k])
    }

    /// Grid operators used for the measurement map of `(i, j)`: the observed
    /// grid when present, the structural grid for fully missing series.
    pub fn meas_ops(&self, i: usize, j: usize) -> &Arc<GridOps> {
        self.grid_ops(i, j).unwrap_or(&self.struct_ops)
    }
}

/// Per-iteration coefficient maps shared across subjects.
///
/// `loading_blocks[j][g]` is the `J × qJ` map from the stacked factor
/// coefficients to `y_{ij}` for grid `g`; `structural` is the `qJ × qJ`
/// map `G` with `η_i = G η_i + g_i + ζ_i`.
#[derive(Debug, Clone)]
pub struct CoefMaps {
    pub loading_blocks: Vec<BTreeMap<usize, DMatrix<f64>>>,
    pub loading_struct_grid: Vec<DMatrix<f64>>,
    pub structural: DMatrix<f64>,
    /// `(I − G)⁻¹`.
    pub struct_solve: DMatrix<f64>,
    /// Shared `Σ_η = (I−G)⁻¹ blockdiag(Σ^ζ)(I−G)⁻ᵀ`.
    pub sigma_eta: DMatrix<f64>,
}

/// Build the per-iteration coefficient maps.
pub fn build_coef_maps(ctx: &ModelContext, params: &ParamSet) -> CoefMaps {
    let model = &ctx.model;
    let j = model.basis().dim();
    let (p, q) = (model.p(), model.q());

    let block_for = |jj: usize, ops: &GridOps| -> DMatrix<f64> {
        let mut block = DMatrix::zeros(j, q * j);
        for (idx, l) in model.loadings_of(jj) {
            let map = if l.anchored {
                anchored_map(l.effect, ops)
            } else {
                let coef = &params.lambda[idx];
                let effect = l.effect;
                if effect == LoadingEffect::Fixed {
                    anchored_map(LoadingEffect::Fixed, ops) * coef[0]
                } else {
                    loading_map(effect, coef, ops)
                }
            };
            let mut view = block.view_mut((0, l.factor * j), (j, j));
            view += map;
        }
        block
    };

    let mut loading_blocks = vec![BTreeMap::new(); p];
    for i in 0..ctx.n_subjects() {
        for jj in 0..p {
            if let Some(g) = ctx.ops_idx[i][jj] {
                loading_blocks[jj]
                    .entry(g)
                    .or_insert_with(|| block_for(jj, &ctx.unique_ops[g]));
            }
        }
    }
    let loading_struct_grid: Vec<DMatrix<f64>> =
        (0..p).map(|jj| block_for(jj, &ctx.struct_ops)).collect();

    let mut structural = DMatrix::zeros(q * j, q * j);
    for m in 0..q {
        for (idx, e) in model.latent_edges_of(m) {
            let map = latent_edge_map(e.effect, &params.gamma_eta[idx], &ctx.struct_ops);
            let mut view = structural.view_mut((m * j, e.source * j), (j, j));
            view += map;
        }
    }
    let a = DMatrix::identity(q * j, q * j) - &structural;
    let struct_solve = a
        .lu()
        .try_inverse()
        .expect("I − ΓW is invertible for recursive models");
    let mut bzeta = DMatrix::zeros(q * j, q * j);
    for m in 0..q {
        bzeta
            .view_mut((m * j, m * j), (j, j))
            .copy_from(&params.sigma_zeta[m]);
    }
    let mut sigma_eta = &struct_solve * bzeta * struct_solve.transpose();
    linalg::symmetrize(&mut sigma_eta);
    CoefMaps {
        loading_blocks,
        loading_struct_grid,
        structural,
        struct_solve,
        sigma_eta,
    }
}

/// Structural mean contribution `g_i = Σ P s^x γ` for one subject.
pub fn structural_mean_input(
    ctx: &ModelContext,
    params: &ParamSet,
    covariates: &[CovariateValue],
) -> DVector<f64> {
    let model = &ctx.model;
    let j = model.basis().dim();
    let q = model.q();
    let mut g = DVector::zeros(q * j);
    for m in 0..q {
        for (idx, e) in model.covariate_edges_of(m) {
            let contrib = covariate_contribution(
                e,
                &params.gamma_x[idx],
                &covariates[e.covariate],
                &ctx.struct_ops,
                ctx.smooth_bases.get(&e.covariate),
            );
            let mut view = g.rows_mut(m * j, j);
            view += contrib;
        }
    }
    g
}

/// The joint Gaussian moments of `(η_i, y_i, z_i)` for one subject, plus the
/// observation index map.
#[derive(Debug, Clone)]
pub struct SubjectMoments {
    pub mu_eta: DVector<f64>,
    pub sigma_eta: DMatrix<f64>,
    pub mu_y: DVector<f64>,
    pub sigma_y: DMatrix<f64>,
    /// `pJ × qJ` measurement map.
    pub l_map: DMatrix<f64>,
    pub mu_z: DVector<f64>,
    pub sigma_z: DMatrix<f64>,
    /// `Cov(y, z)`.
    pub cov_y_z: DMatrix<f64>,
    /// `Cov(η, y)`.
    pub cov_eta_y: DMatrix<f64>,
    /// The stacked observation operator `E*` (`n_obs × pJ`).
    pub estar: DMatrix<f64>,
    /// Observation slots as `(indicator, time index)` in stacking order.
    pub obs_slots: Vec<(usize, usize)>,
    /// Observed values in stacking order.
    pub z: DVector<f64>,
}

/// Stacked moments across subjects (subjects are independent, so the joint
/// covariance is block-diagonal in these blocks).
#[derive(Debug)]
pub struct JointMoments {
    pub subjects: Vec<SubjectMoments>,
}

/// Assemble the generator distribution for one subject.
pub fn assemble_subject(
    ctx: &ModelContext,
    params: &ParamSet,
    maps: &CoefMaps,
    i: usize,
) -> SubjectMoments {
    let model = &ctx.model;
    let j = model.basis().dim();
    let (p, q) = (model.p(), model.q());

    let g_i = structural_mean_input(ctx, params, &ctx.data.covariates[i]);
    let mu_eta = &maps.struct_solve * g_i;
    let sigma_eta = maps.sigma_eta.clone();

    let mut l_map = DMatrix::zeros(p * j, q * j);
    let mut beta_stack = DVector::zeros(p * j);
    for jj in 0..p {
        let block = match ctx.ops_idx[i][jj] {
            Some(g) => &maps.loading_blocks[jj][&g],
            None => &maps.loading_struct_grid[jj],
        };
        l_map
            .view_mut((jj * j, 0), (j, q * j))
            .copy_from(block);
        beta_stack.rows_mut(jj * j, j).copy_from(&params.beta[jj]);
    }
    let mu_y = beta_stack + &l_map * &mu_eta;
    let cov_eta_y_t = &sigma_eta * l_map.transpose(); // qJ × pJ = Cov(η, y)
    let mut sigma_y = &l_map * &cov_eta_y_t;
    for jj in 0..p {
        let mut view = sigma_y.view_mut((jj * j, jj * j), (j, j));
        view += &params.sigma_eps[jj];
    }
    linalg::symmetrize(&mut sigma_y);

    let mut obs_slots = Vec::new();
    let mut z_vals = Vec::new();
    for jj in 0..p {
        let series = &ctx.data.series[i][jj];
        for k in 0..series.len() {
            obs_slots.push((jj, k));
            z_vals.push(series.values[k]);
        }
    }
    let n_obs = obs_slots.len();
    // E* applied through per-indicator blocks.
    let mut estar = DMatrix::zeros(n_obs, p * j);
    {
        let mut row = 0;
        for jj in 0..p {
            if let Some(g) = ctx.ops_idx[i][jj] {
                let e = &ctx.unique_ops[g].e; // J × M
                let m = e.ncols();
                for k in 0..m {
                    for r in 0..j {
                        estar[(row + k, jj * j + r)] = e[(r, k)];
                    }
                }
                row += m;
            }
        }
    }
    let mu_z = &estar * &mu_y;
    let cov_y_z = &sigma_y * estar.transpose();
    let mut sigma_z = &estar * &cov_y_z;
    {
        let mut row = 0;
        for jj in 0..p {
            let m = ctx.data.series[i][jj].len();
            for k in 0..m {
                sigma_z[(row + k, row + k)] += params.sigma2[jj];
            }
            row += m;
        }
    }
    linalg::symmetrize(&mut sigma_z);

    SubjectMoments {
        mu_eta,
        sigma_eta,
        mu_y,
        sigma_y,
        l_map,
        mu_z,
        sigma_z,
        cov_y_z,
        cov_eta_y: cov_eta_y_t,
        estar,
        obs_slots,
        z: DVector::from_vec(z_vals),
    }
}

/// Assemble the generator distributions for every subject.
pub fn assemble_joint_moments(ctx: &ModelContext, params: &ParamSet) -> JointMoments {
    let maps = build_coef_maps(ctx, params);
    let subjects = (0..ctx.n_subjects())
        .map(|i| assemble_subject(ctx, params, &maps, i))
        .collect();
    JointMoments { subjects }
}

/// Conditional moments of the stacked latent vector `u = [y; η]` given the
/// subject's observations.
pub fn condition_on_observations(sub: &SubjectMoments) -> (DVector<f64>, DMatrix<f64>) {
    let py = sub.mu_y.len();
    let qe = sub.mu_eta.len();
    let d = py + qe;
    let mut mu = DVector::zeros(d);
    mu.rows_mut(0, py).copy_from(&sub.mu_y);
    mu.rows_mut(py, qe).copy_from(&sub.mu_eta);
    let mut sigma = DMatrix::zeros(d, d);
    sigma.view_mut((0, 0), (py, py)).copy_from(&sub.sigma_y);
    sigma
        .view_mut((0, py), (py, qe))
        .copy_from(&sub.cov_eta_y.transpose());
    sigma.view_mut((py, 0), (qe, py)).copy_from(&sub.cov_eta_y);
    sigma.view_mut((py, py), (qe, qe)).copy_from(&sub.sigma_eta);
    if sub.z.is_empty() {
        return (mu, sigma);
    }
    // Cov(u, z): Cov(y, z) = Σ_y E*ᵀ and Cov(η, z) = Cov(η, y) E*ᵀ.
    let n_obs = sub.z.len();
    let mut cov_uz = DMatrix::zeros(d, n_obs);
    cov_uz.view_mut((0, 0), (py, n_obs)).copy_from(&sub.cov_y_z);
    let cov_eta_z = &sub.cov_eta_y * sub.estar.transpose();
    cov_uz.view_mut((py, 0), (qe, n_obs)).copy_from(&cov_eta_z);

    let gain = linalg::spd_solve_matrix(&sub.sigma_z, &cov_uz.transpose()).transpose();
    let mean = &mu + &gain * (&sub.z - &sub.mu_z);
    let mut cov = sigma - &gain * cov_uz.transpose();
    linalg::symmetrize(&mut cov);
    (mean, cov)
}

/// A degenerate-safe Gaussian sampler built from a PSD square root.
pub struct GaussianSampler {
    pub mean: DVector<f64>,
    sqrt: DMatrix<f64>,
}

impl GaussianSampler {
    /// Eigenvalue-clipping square-root factorization; the clipped mass is
    /// returned for diagnostics.
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> (Self, f64) {
        let (clipped, mass) = linalg::clip_eigenvalues(cov, 0.0);
        let sqrt = linalg::psd_sqrt(&clipped);
        (GaussianSampler { mean, sqrt }, mass)
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let d = self.mean.len();
        let xi = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.mean + &self.sqrt * xi
    }
}

/// Draw `n_samples` i.i.d. samples from `N(mean, cov)`.
pub fn sample_conditional(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DVector<f64>> {
    let (sampler, _) = GaussianSampler::new(mean.clone(), cov);
    (0..n_samples).map(|_| sampler.draw(rng)).collect()
}

/// Forward-simulate one draw of a subject's observation vector through the
/// generative chain `ζ → η → y → z`.
pub fn forward_sample_z(
    ctx: &ModelContext,
    params: &ParamSet,
    maps: &CoefMaps,
    i: usize,
    rng: &mut ChaCha8Rng,
) -> DVector<f64> {
    let model = &ctx.model;
    let j = model.basis().dim();
    let (p, q) = (model.p(), model.q());
    let g_i = structural_mean_input(ctx, params, &ctx.data.covariates[i]);
    // ζ draw per factor
    let mut zeta = DVector::zeros(q * j);
    for m in 0..q {
        let (s, _) = GaussianSampler::new(DVector::zeros(j), &params.sigma_zeta[m]);
        zeta.rows_mut(m * j, j).copy_from(&s.draw(rng));
    }
    let eta = &maps.struct_solve * (g_i + zeta);
    let mut y = DVector::zeros(p * j);
    for jj in 0..p {
        let block = match ctx.ops_idx[i][jj] {
            Some(g) => &maps.loading_blocks[jj][&g],
            None => &maps.loading_struct_grid[jj],
        };
        let (s, _) = GaussianSampler::new(DVector::zeros(j), &params.sigma_eps[jj]);
        let yj = &params.beta[jj] + block * &eta + s.draw(rng);
        y.rows_mut(jj * j, j).copy_from(&yj);
    }
    let mut z_vals = Vec::new();
    for jj in 0..p {
        if let Some(g) = ctx.ops_idx[i][jj] {
            let e = &ctx.unique_ops[g].e;
            let yj = y.rows(jj * j, j);
            for k in 0..e.ncols() {
                let mut v = 0.0;
                for r in 0..j {
                    v += e[(r, k)] * yj[r];
                }
                v += params.sigma2[jj].sqrt() * rng.sample::<f64, _>(StandardNormal);
                z_vals.push(v);
            }
        }
    }
    DVector::from_vec(z_vals)
}

/// Observed-data Gaussian log-likelihood of `z` under the assembled moments.
pub fn observed_loglik(joint: &JointMoments) -> f64 {
    joint
        .subjects
        .iter()
        .filter(|s| !s.z.is_empty())
        .map(|s| linalg::mvn_logpdf(&s.z, &s.mu_z, &s.sigma_z))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_model_text, validate_model};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn small_model() -> ValidatedModel {
        let text = "\
basis bspline 4 order 4
indicator z1
indicator z2
factor eta variance
load z1 on eta concurrent
load z2 on eta concurrent
";
        validate_model(parse_model_text(text).unwrap()).unwrap()
    }

    fn small_dataset(n: usize, m: usize) -> FunctionalDataset {
        let mut recs = Vec::new();
        for i in 0..n {
            for j in 0..2 {
                for k in 1..=m {
                    recs.push(crate::dataset::LongRecord {
                        subject: format!("s{i}"),
                        variable: format!("z{}", j + 1),
                        time: k as f64 / m as f64,
                        value: (i + j + k) as f64 * 0.1,
                    });
                }
            }
        }
        crate::dataset::ingest_long_format(&recs, &[], (0.0, 1.0)).unwrap()
    }

    fn default_params(model: &ValidatedModel) -> ParamSet {
        let mut params = ParamSet::zeros(model);
        let j = model.basis().dim();
        for c in params.lambda.iter_mut() {
            if c.len() == j {
                // constant-one loading in a partition-of-unity basis
                c.fill(1.0);
            }
        }
        for s in params.sigma_eps.iter_mut() {
            *s *= 0.3;
        }
        for s in params.sigma_zeta.iter_mut() {
            *s *= 0.5;
        }
        for v in params.sigma2.iter_mut() {
            *v = 0.2;
        }
        params
    }

    #[test]
    fn zero_structural_part_gives_zero_mean_blockdiag_cov() {
        let model = small_model();
        let ds = small_dataset(3, 4);
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let params = default_params(&model);
        let joint = assemble_joint_moments(&ctx, &params);
        for s in &joint.subjects {
            assert!(s.mu_eta.iter().all(|v| v.abs() < 1e-14));
            // Σ_η = Σ^ζ with no latent edges.
            assert_abs_diff_eq!(
                (s.sigma_eta.clone() - &params.sigma_zeta[0]).norm(),
                0.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn anchored_identity_measurement_passes_eta_mean_through() {
        // All loadings anchored, β = 0: μ_y is the identity-mapped μ_η.
        let text = "\
basis bspline 4 order 4
indicator z1
factor eta
covariate x1 scalar
load z1 on eta concurrent anchor
regress eta on x1 linear
";
        let model = validate_model(parse_model_text(text).unwrap()).unwrap();
        let mut recs = Vec::new();
        let mut covs = Vec::new();
        for i in 0..2 {
            for k in 1..=4 {
                recs.push(crate::dataset::LongRecord {
                    subject: format!("s{i}"),
                    variable: "z1".into(),
                    time: k as f64 / 4.0,
                    value: 0.0,
                });
            }
            covs.push(crate::dataset::CovariateRecord {
                subject: format!("s{i}"),
                name: "x1".into(),
                time: None,
                value: 1.0,
            });
        }
        let ds = crate::dataset::ingest_long_format(&recs, &covs, (0.0, 1.0)).unwrap();
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let mut params = ParamSet::zeros(&model);
        params.gamma_x[0] = model.basis().project_function(|t| 0.3 + t, 100);
        for s in params.sigma_eps.iter_mut() {
            *s *= 0.1;
        }
        for s in params.sigma_zeta.iter_mut() {
            *s *= 0.1;
        }
        let joint = assemble_joint_moments(&ctx, &params);
        for s in &joint.subjects {
            // μ_y ≈ μ_η through the near-identity anchored map (M = J grid)
            for r in 0..4 {
                assert_abs_diff_eq!(s.mu_y[r], s.mu_eta[r], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn conditional_with_no_observations_is_marginal() {
        let model = small_model();
        // Subject s1 has data; subject s0 has an empty indicator set is not
        // representable through ingest, so blank one series instead.
        let mut ds = small_dataset(2, 4);
        ds.observations[0][0] = Series {
            times: vec![],
            values: vec![],
        };
        ds.observations[1][0] = Series {
            times: vec![],
            values: vec![],
        };
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let params = default_params(&model);
        let joint = assemble_joint_moments(&ctx, &params);
        let s = &joint.subjects[0];
        assert!(s.z.is_empty());
        let (mu, cov) = condition_on_observations(s);
        let py = s.mu_y.len();
        for r in 0..py {
            assert_abs_diff_eq!(mu[r], s.mu_y[r], epsilon = 1e-14);
        }
        for r in 0..s.mu_eta.len() {
            for c in 0..s.mu_eta.len() {
                assert_abs_diff_eq!(
                    cov[(py + r, py + c)],
                    s.sigma_eta[(r, c)],
                    epsilon = 1e-14
                );
            }
        }
    }

    #[test]
    fn degenerate_covariance_draws_collapse_to_mean() {
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let cov = DMatrix::zeros(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = sample_conditional(&mean, &cov, 5, &mut rng);
        for d in draws {
            assert_abs_diff_eq!((d - &mean).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn identical_seeds_give_identical_draws() {
        let mean = DVector::from_vec(vec![0.0, 1.0, 2.0]);
        let mut cov = DMatrix::identity(3, 3);
        cov[(0, 1)] = 0.3;
        cov[(1, 0)] = 0.3;
        let a = sample_conditional(&mean, &cov, 4, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_conditional(&mean, &cov, 4, &mut ChaCha8Rng::seed_from_u64(42));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn sample_mean_matches_clt_bound() {
        let mean = DVector::from_vec(vec![0.5, -1.5]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = sample_conditional(&mean, &cov, n, &mut rng);
        let mut avg = DVector::zeros(2);
        for d in &draws {
            avg += d;
        }
        avg /= n as f64;
        for i in 0..2 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!(
                (avg[i] - mean[i]).abs() < 4.0 * se,
                "component {i}: {} vs {}",
                avg[i],
                mean[i]
            );
        }
    }

    #[test]
    fn law_of_total_covariance_holds() {
        let model = small_model();
        let ds = small_dataset(2, 4);
        let ctx = ModelContext::new(&model, &ds).unwrap();
        let params = default_params(&model);
        let maps = build_coef_maps(&ctx, &params);
        let s = assemble_subject(&ctx, &params, &maps, 0);
        // Σ_y = L Σ_η Lᵀ + blockdiag(Σ^ε)
        let j = model.basis().dim();
        let mut expect = &s.l_map * &s.sigma_eta * s.l_map.transpose();
        for jj in 0..model.p() {
            let mut view = expect.view_mut((jj * j, jj * j), (j, j));
            view += &params.sigma_eps[jj];
        }
        assert!((expect - &s.sigma_y).norm() < 1e-8);
        // Σ_z symmetric with nonnegative spectrum (up to tolerance).
        let min_eig = s.sigma_z.clone().symmetric_eigen().eigenvalues.min();
        assert!(min_eig >= -1e-8 * s.sigma_z.trace());
    }
}
