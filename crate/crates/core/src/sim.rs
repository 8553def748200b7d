//! Data generators for the two built-in simulation studies and the
//! replication harness that turns repeated fits into MSE/CR tables.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{draw_grid, FunctionalDataset, SamplingDesign, Series};
use crate::fit::{fit_mcem_with_alpha, AlphaVector, FitConfig, FitError, FitResult};
use crate::gp::ModelContext;
use crate::inference::{
    bootstrap_covariances, confidence_band, surface_grid, BandConstruction, BootstrapConfig,
    CoefEval, ConfidenceBand,
};
use crate::linalg;
use crate::model::{parse_model_text, validate_model, CovariateKind, ValidatedModel};

const PI: f64 = std::f64::consts::PI;
/// Nonzero Karhunen–Loève terms in the generators.
const KL_TERMS: usize = 8;
/// Fine grid used to realize the latent Gaussian process in Simulation 1.
const FINE_GRID: usize = 401;
/// Functional MSE evaluation grid.
pub const EVAL_GRID: usize = 101;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("scenario requires at least 2 replicates")]
    TooFewReplicates,
    #[error("replicate/truth count mismatch")]
    CountMismatch,
    #[error("invalid scenario: {0}")]
    BadScenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Sim1,
    Sim2,
}

/// One simulation scenario: generator constants plus fit/bootstrap budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScenario {
    pub kind: ScenarioKind,
    pub n: usize,
    pub m: usize,
    pub design: SamplingDesign,
    /// Basis dimension used by the fitted model.
    pub j_basis: usize,
    pub snr: f64,
    pub k_eig: f64,
    pub rho: f64,
    pub replicates: usize,
    pub seed: u64,
    pub fit: FitConfig,
    pub bootstrap: BootstrapConfig,
    pub band_level: f64,
}

impl SimScenario {
    /// Paper defaults for Simulation 1 (regular design, N = 50, M = 10).
    pub fn sim1_defaults() -> SimScenario {
        SimScenario {
            kind: ScenarioKind::Sim1,
            n: 50,
            m: 10,
            design: SamplingDesign::Regular,
            j_basis: 10,
            snr: 4.0,
            k_eig: 1.0,
            rho: 0.3,
            replicates: 50,
            seed: 1,
            fit: FitConfig {
                max_iter: 60,
                ..FitConfig::default()
            },
            bootstrap: BootstrapConfig {
                b: 100,
                max_iter: 12,
                ..BootstrapConfig::default()
            },
            band_level: 0.95,
        }
    }

    /// Paper defaults for Simulation 2 (MCAR 0.12, N = 100, M = 8, J = 6).
    pub fn sim2_defaults() -> SimScenario {
        SimScenario {
            kind: ScenarioKind::Sim2,
            n: 100,
            m: 8,
            design: SamplingDesign::Mcar { p_miss: 0.12 },
            j_basis: 6,
            snr: 4.0,
            k_eig: 1.0,
            rho: 0.3,
            replicates: 50,
            seed: 1,
            fit: FitConfig {
                max_iter: 60,
                ..FitConfig::default()
            },
            bootstrap: BootstrapConfig {
                b: 100,
                max_iter: 12,
                ..BootstrapConfig::default()
            },
            band_level: 0.95,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.snr <= 0.0 {
            return Err(SimError::BadScenario("SNR must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(SimError::BadScenario("rho must lie in (0,1)".into()));
        }
        if self.k_eig <= 0.0 {
            return Err(SimError::BadScenario("k must be positive".into()));
        }
        if self.n == 0 || self.m == 0 {
            return Err(SimError::BadScenario("n and m must be positive".into()));
        }
        Ok(())
    }

    /// Sum of the residual-process eigenvalues `Σ_r k ρ^{r-1}`.
    pub fn total_eps_variance(&self) -> f64 {
        self.k_eig * (1.0 - self.rho.powi(KL_TERMS as i32)) / (1.0 - self.rho)
    }

    /// Measurement-error variance implied by the SNR:
    /// `σ² = ∫ K^ε(t,t) dt / SNR = Σν / SNR`.
    pub fn sigma2(&self) -> f64 {
        self.total_eps_variance() / self.snr
    }

    /// The fitted model for this scenario.
    pub fn model(&self) -> ValidatedModel {
        let text = match self.kind {
            ScenarioKind::Sim1 => format!(
                "\
basis bspline {j} order 4
indicator z1
indicator z2
indicator z3
factor eta variance
load z1 on eta concurrent
load z2 on eta concurrent
load z3 on eta historical
",
                j = self.j_basis
            ),
            ScenarioKind::Sim2 => format!(
                "\
basis bspline {j} order 4
indicator z1
indicator z2
indicator z3
factor eta variance
covariate x1 scalar
covariate x2 scalar
load z1 on eta concurrent
load z2 on eta concurrent
load z3 on eta concurrent
regress eta on x1 linear
regress eta on x2 linear
",
                j = self.j_basis
            ),
        };
        validate_model(parse_model_text(&text).expect("scenario model parses"))
            .expect("scenario model validates")
    }
}

// ---------------------------------------------------------------------------
// True parameter curves
// ---------------------------------------------------------------------------

/// Evaluations of the generator's true parameters.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub kind: ScenarioKind,
    pub sigma2: f64,
    pub k_eig: f64,
    pub rho: f64,
}

impl SimTruth {
    pub fn beta(&self, j: usize, t: f64) -> f64 {
        match self.kind {
            ScenarioKind::Sim1 => (j + 1) as f64 * t * t,
            ScenarioKind::Sim2 => (j + 1) as f64 * t,
        }
    }

    /// Concurrent loading curves (indicators 1, 2 in Simulation 1; all three
    /// in Simulation 2).
    pub fn lambda(&self, j: usize, t: f64) -> f64 {
        let sj = ((j + 1) as f64).sqrt();
        match self.kind {
            ScenarioKind::Sim1 => 1.0 + 0.5 * (PI * sj * t / 2.0).sin(),
            ScenarioKind::Sim2 => 1.0 + 0.5 * (PI * sj * t).cos(),
        }
    }

    /// The historical loading surface of Simulation 1.
    pub fn lambda_surface(&self, s: f64, t: f64) -> f64 {
        1.0 + 0.5 * (PI * 3f64.sqrt() * (s + t)).cos()
    }

    /// Covariate coefficient curves of Simulation 2.
    pub fn gamma_x(&self, l: usize, t: f64) -> f64 {
        (l + 1) as f64 * t * t
    }

    /// Residual-process eigenvalues `ν_r = k ρ^{r-1}`.
    pub fn eps_eigenvalues(&self) -> Vec<f64> {
        (0..KL_TERMS)
            .map(|r| self.k_eig * self.rho.powi(r as i32))
            .collect()
    }

    /// First (orthonormalized) eigenfunction `√2 cos(π j t)` of the
    /// residual process for indicator `j`.
    pub fn eps_first_eigenfunction(&self, j: usize, t: f64) -> f64 {
        2f64.sqrt() * (PI * (j + 1) as f64 * t).cos()
    }
}

// ---------------------------------------------------------------------------
// Residual-process sampler (shared by both simulations)
// ---------------------------------------------------------------------------

/// The raw (pre-orthonormalization) eigenfunction family of §6.1 for
/// indicator `j` (1-based frequencies): cos(πjt)√2, sin(2πjt)√2,
/// cos(3πjt)√2, sin(4πjt)√2, …
fn raw_eps_basis(j: usize, r: usize, t: f64) -> f64 {
    let jj = (j + 1) as f64;
    let k = (r + 1) as f64;
    if r % 2 == 0 {
        2f64.sqrt() * (PI * k * jj * t).cos()
    } else {
        2f64.sqrt() * (PI * k * jj * t).sin()
    }
}

/// Gram–Schmidt coefficients turning the raw family into an orthonormal one
/// (fine-grid inner products). `coef[r]` expresses the r-th orthonormal
/// function in terms of raw functions `0..=r`.
fn eps_orthonormal_coefs(j: usize) -> &'static Vec<Vec<f64>> {
    static CACHE: OnceLock<Vec<Vec<Vec<f64>>>> = OnceLock::new();
    let all = CACHE.get_or_init(|| {
        let n_grid = 8001;
        let dt = 1.0 / (n_grid - 1) as f64;
        (0..3)
            .map(|jj| {
                // Trapezoid-weighted inner products on the fine grid.
                let vals: Vec<Vec<f64>> = (0..KL_TERMS)
                    .map(|r| {
                        (0..n_grid)
                            .map(|g| raw_eps_basis(jj, r, g as f64 * dt))
                            .collect()
                    })
                    .collect();
                let inner = |a: &[f64], b: &[f64]| -> f64 {
                    let mut acc = 0.0;
                    for g in 0..n_grid {
                        let w = if g == 0 || g == n_grid - 1 { 0.5 } else { 1.0 };
                        acc += w * a[g] * b[g];
                    }
                    acc * dt
                };
                let mut coefs: Vec<Vec<f64>> = Vec::new();
                let mut ortho: Vec<Vec<f64>> = Vec::new();
                for r in 0..KL_TERMS {
                    let mut c = vec![0.0; KL_TERMS];
                    c[r] = 1.0;
                    let mut v = vals[r].clone();
                    for prev in 0..r {
                        let proj = inner(&v, &ortho[prev]);
                        for g in 0..n_grid {
                            v[g] -= proj * ortho[prev][g];
                        }
                        for s in 0..KL_TERMS {
                            c[s] -= proj * coefs[prev][s];
                        }
                    }
                    let norm = inner(&v, &v).sqrt();
                    for g in 0..n_grid {
                        v[g] /= norm;
                    }
                    for s in c.iter_mut() {
                        *s /= norm;
                    }
                    ortho.push(v);
                    coefs.push(c);
                }
                coefs
            })
            .collect()
    });
    &all[j]
}

/// Evaluate the orthonormalized eigenfunction `φ̃_{j,r}(t)`.
pub fn eps_eigenfunction(j: usize, r: usize, t: f64) -> f64 {
    let coefs = eps_orthonormal_coefs(j);
    coefs[r]
        .iter()
        .enumerate()
        .map(|(s, c)| c * raw_eps_basis(j, s, t))
        .sum()
}

/// Draw one residual curve at the given times using the truncated KL
/// expansion with orthonormalized eigenfunctions.
fn draw_eps(
    truth: &SimTruth,
    j: usize,
    times: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let nu = truth.eps_eigenvalues();
    let u: Vec<f64> = (0..KL_TERMS)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    times
        .iter()
        .map(|&t| {
            (0..KL_TERMS)
                .map(|r| nu[r].sqrt() * u[r] * eps_eigenfunction(j, r, t))
                .sum()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Latent Gaussian process of Simulation 1
// ---------------------------------------------------------------------------

/// Truncated KL decomposition of `K^η(s,t) = exp(−(t−s)²)` on the fine grid:
/// eigenvalues (functional scaling) and eigenfunction values.
fn sim1_eta_kl() -> &'static (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    static CACHE: OnceLock<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> = OnceLock::new();
    CACHE.get_or_init(|| {
        let n = FINE_GRID;
        let grid: Vec<f64> = (0..n).map(|g| g as f64 / (n - 1) as f64).collect();
        let dt = 1.0 / (n - 1) as f64;
        // Trapezoid-weighted Nyström: eigendecompose W^{1/2} K W^{1/2}.
        let w: Vec<f64> = (0..n)
            .map(|g| if g == 0 || g == n - 1 { 0.5 * dt } else { dt })
            .collect();
        let k = DMatrix::from_fn(n, n, |r, c| {
            (w[r].sqrt()) * (-(grid[r] - grid[c]).powi(2)).exp() * (w[c].sqrt())
        });
        let eig = k.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut vals = Vec::with_capacity(KL_TERMS);
        let mut funs = Vec::with_capacity(KL_TERMS);
        for &i in order.iter().take(KL_TERMS) {
            vals.push(eig.eigenvalues[i]);
            // ψ(t_g) = u_g / √w_g gives unit function norm.
            let f: Vec<f64> = eig
                .eigenvectors
                .column(i)
                .iter()
                .enumerate()
                .map(|(g, v)| v / w[g].sqrt())
                .collect();
            funs.push(f);
        }
        (vals, funs, grid)
    })
}

/// One fine-grid draw of `η` under `K^η(s,t) = exp(−(t−s)²)`, truncated to
/// the leading eigencomponents.
fn draw_eta_fine(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (vals, funs, grid) = sim1_eta_kl();
    let mut out = vec![0.0; grid.len()];
    for (r, v) in vals.iter().enumerate() {
        let amp = v.max(0.0).sqrt() * rng.sample::<f64, _>(StandardNormal);
        for (g, o) in out.iter_mut().enumerate() {
            *o += amp * funs[r][g];
        }
    }
    out
}

fn interp_fine(fine: &[f64], t: f64) -> f64 {
    let n = fine.len();
    let x = t.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = (x.floor() as usize).min(n - 2);
    let frac = x - lo as f64;
    fine[lo] * (1.0 - frac) + fine[lo + 1] * frac
}

/// `∫_0^t λ₃(s,t) η(s) ds` by trapezoid on the fine grid.
fn historical_integral(truth: &SimTruth, fine_eta: &[f64], t: f64) -> f64 {
    let n = fine_eta.len();
    let dt = 1.0 / (n - 1) as f64;
    let upto = (t / dt).floor() as usize;
    let mut acc = 0.0;
    for g in 0..upto.min(n - 1) {
        let s0 = g as f64 * dt;
        let s1 = ((g + 1) as f64 * dt).min(t);
        let f0 = truth.lambda_surface(s0, t) * fine_eta[g];
        let f1 = truth.lambda_surface(s1, t) * interp_fine(fine_eta, s1);
        acc += 0.5 * (f0 + f1) * (s1 - s0);
        if s1 >= t {
            break;
        }
    }
    if upto >= n - 1 && t > (n - 1) as f64 * dt {
        // t == 1 endpoint handled in the loop
    }
    acc
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

fn empty_dataset(n: usize, p: usize, covariates: &[&str]) -> FunctionalDataset {
    FunctionalDataset {
        subjects: (0..n).map(|i| format!("s{i:04}")).collect(),
        variable_names: (1..=p).map(|j| format!("z{j}")).collect(),
        observations: vec![
            vec![
                Series {
                    times: vec![],
                    values: vec![]
                };
                n
            ];
            p
        ],
        covariate_names: covariates.iter().map(|s| s.to_string()).collect(),
        covariate_kinds: vec![CovariateKind::Scalar; covariates.len()],
        scalar_values: vec![vec![0.0; n]; covariates.len()],
        functional_values: vec![vec![]; covariates.len()],
        time_domain: (0.0, 1.0),
    }
}

/// Generate one Simulation 1 replicate.
pub fn generate_sim1(scenario: &SimScenario, rep_seed: u64) -> (FunctionalDataset, SimTruth) {
    let truth = SimTruth {
        kind: ScenarioKind::Sim1,
        sigma2: scenario.sigma2(),
        k_eig: scenario.k_eig,
        rho: scenario.rho,
    };
    let n = scenario.n;
    let mut ds = empty_dataset(n, 3, &[]);
    let sigma = truth.sigma2.sqrt();
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(linalg::mix_seed(rep_seed, 0xe7a ^ i as u64));
        let fine_eta = draw_eta_fine(&mut rng);
        // Shared grid for the regular design, per-(i,j) otherwise.
        let shared_grid = draw_grid(SamplingDesign::Regular, scenario.m, &mut rng);
        for j in 0..3 {
            let times = match scenario.design {
                SamplingDesign::Regular => shared_grid.clone(),
                other => draw_grid(other, scenario.m, &mut rng),
            };
            if times.is_empty() {
                continue;
            }
            let eps = draw_eps(&truth, j, &times, &mut rng);
            let values: Vec<f64> = times
                .iter()
                .zip(&eps)
                .map(|(&t, &e)| {
                    let signal = if j < 2 {
                        truth.lambda(j, t) * interp_fine(&fine_eta, t)
                    } else {
                        historical_integral(&truth, &fine_eta, t)
                    };
                    truth.beta(j, t)
                        + signal
                        + e
                        + sigma * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            ds.observations[j][i] = Series { times, values };
        }
    }
    (ds, truth)
}

/// Generate one Simulation 2 replicate. Scalar covariates are drawn i.i.d.
/// standard normal.
pub fn generate_sim2(scenario: &SimScenario, rep_seed: u64) -> (FunctionalDataset, SimTruth) {
    let truth = SimTruth {
        kind: ScenarioKind::Sim2,
        sigma2: scenario.sigma2(),
        k_eig: scenario.k_eig,
        rho: scenario.rho,
    };
    let n = scenario.n;
    let m = scenario.m;
    let mut ds = empty_dataset(n, 3, &["x1", "x2"]);
    let grid: Vec<f64> = (1..=m).map(|k| k as f64 / m as f64).collect();
    // ζ covariance exp(−2|t−s|) on the full grid.
    let kmat = DMatrix::from_fn(m, m, |r, c| (-2.0 * (grid[r] - grid[c]).abs()).exp());
    let zeta_sqrt = linalg::psd_sqrt(&kmat);
    let sigma = truth.sigma2.sqrt();
    let p_miss = match scenario.design {
        SamplingDesign::Mcar { p_miss } => p_miss,
        _ => 0.0,
    };
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(linalg::mix_seed(rep_seed, 0x512 ^ i as u64));
        let x1: f64 = rng.sample(StandardNormal);
        let x2: f64 = rng.sample(StandardNormal);
        ds.scalar_values[0][i] = x1;
        ds.scalar_values[1][i] = x2;
        let xi = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let zeta = &zeta_sqrt * xi;
        let eta: Vec<f64> = grid
            .iter()
            .enumerate()
            .map(|(k, &t)| truth.gamma_x(0, t) * x1 + truth.gamma_x(1, t) * x2 + zeta[k])
            .collect();
        for j in 0..3 {
            let keep: Vec<usize> = (0..m)
                .filter(|_| rng.random::<f64>() >= p_miss)
                .collect();
            if keep.is_empty() {
                continue;
            }
            let times: Vec<f64> = keep.iter().map(|&k| grid[k]).collect();
            let eps = draw_eps(&truth, j, &times, &mut rng);
            let values: Vec<f64> = keep
                .iter()
                .zip(times.iter())
                .zip(eps.iter())
                .map(|((&k, &t), &e)| {
                    truth.beta(j, t)
                        + truth.lambda(j, t) * eta[k]
                        + e
                        + sigma * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            ds.observations[j][i] = Series { times, values };
        }
    }
    (ds, truth)
}

pub fn generate(scenario: &SimScenario, rep_seed: u64) -> (FunctionalDataset, SimTruth) {
    match scenario.kind {
        ScenarioKind::Sim1 => generate_sim1(scenario, rep_seed),
        ScenarioKind::Sim2 => generate_sim2(scenario, rep_seed),
    }
}

// ---------------------------------------------------------------------------
// Replication evaluation
// ---------------------------------------------------------------------------

/// Per-parameter replication summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mse: f64,
    /// Coverage under the "≥ 95% of grid points" convention.
    pub cr: Option<f64>,
    /// Coverage under the all-points convention.
    pub cr_all: Option<f64>,
}

/// MSE/CR table over replicates plus bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub kind: ScenarioKind,
    pub n: usize,
    pub m: usize,
    pub design: SamplingDesign,
    pub replicates: usize,
    pub band_level: f64,
    pub entries: Vec<ParamSummary>,
    /// Replicates whose bootstrap covariance failed (bands skipped there).
    pub band_failures: usize,
}

/// One replicate's fitted quantities.
#[derive(Debug, Clone)]
pub struct ReplicateFit {
    pub fit: FitResult,
    /// Bands per functional parameter, keyed like the report entries.
    pub bands: Vec<(String, ConfidenceBand)>,
}

fn eval_grid() -> Vec<f64> {
    (0..EVAL_GRID)
        .map(|i| i as f64 / (EVAL_GRID - 1) as f64)
        .collect()
}

fn curve_mse<F: Fn(f64) -> f64>(
    basis: &crate::basis::BasisSystem,
    coef: &DVector<f64>,
    truth: F,
) -> f64 {
    let grid = eval_grid();
    let mut acc = 0.0;
    for &t in &grid {
        let est = basis.eval(t, 0).unwrap().dot(coef);
        acc += (est - truth(t)).powi(2);
    }
    acc / grid.len() as f64
}

fn surface_mse(
    basis: &crate::basis::BasisSystem,
    coef: &DVector<f64>,
    truth: &SimTruth,
) -> f64 {
    let j = basis.dim();
    let lam = crate::model::surface_matrix(coef, j);
    let pts = surface_grid(basis, EVAL_GRID);
    let mut acc = 0.0;
    for &(s, t) in &pts {
        let es = basis.eval(s, 0).unwrap();
        let et = basis.eval(t, 0).unwrap();
        let est = (es.transpose() * &lam * et)[(0, 0)];
        acc += (est - truth.lambda_surface(s, t)).powi(2);
    }
    acc / pts.len() as f64
}

fn band_coverage<F: Fn(f64, f64) -> f64>(band: &ConfidenceBand, truth: F) -> (bool, bool) {
    let mut covered = 0usize;
    for (g, &(a, b)) in band.grid.iter().enumerate() {
        let v = truth(a, b);
        if v >= band.lower[g] - 1e-12 && v <= band.upper[g] + 1e-12 {
            covered += 1;
        }
    }
    let frac = covered as f64 / band.grid.len() as f64;
    (frac >= 0.95, covered == band.grid.len())
}

/// Names of the functional parameters a scenario reports bands for.
fn band_parameters(kind: ScenarioKind) -> Vec<&'static str> {
    match kind {
        ScenarioKind::Sim1 => vec!["lambda1", "lambda2", "lambda3"],
        ScenarioKind::Sim2 => vec!["lambda1", "lambda2", "lambda3", "gamma_x1", "gamma_x2"],
    }
}

/// Fit one generated replicate and construct its confidence bands.
pub fn fit_replicate(
    scenario: &SimScenario,
    model: &ValidatedModel,
    dataset: &FunctionalDataset,
    rep_seed: u64,
) -> Result<ReplicateFit, SimError> {
    let ctx = ModelContext::new(model, dataset).map_err(FitError::from)?;
    let alpha = match scenario.fit.alpha {
        crate::fit::AlphaChoice::Fixed { lambda, gamma } => {
            AlphaVector::shared(model, lambda, gamma)
        }
        crate::fit::AlphaChoice::Cv => {
            crate::fit::select_smoothing(model, dataset, &scenario.fit)?
        }
    };
    let cfg = FitConfig {
        seed: rep_seed,
        ..scenario.fit.clone()
    };
    let fit = fit_mcem_with_alpha(&ctx, &cfg, &alpha, None)?;
    let boot = BootstrapConfig {
        seed: linalg::mix_seed(rep_seed, 0xcafe),
        ..scenario.bootstrap.clone()
    };
    let mut bands = Vec::new();
    match bootstrap_covariances(model, dataset, &cfg, &alpha, &boot, &fit.params) {
        Ok(cov) => {
            let basis = model.basis();
            let grid = crate::inference::curve_grid(basis, EVAL_GRID);
            for name in band_parameters(scenario.kind) {
                let (coef, block, eval, pts): (
                    &DVector<f64>,
                    &DMatrix<f64>,
                    CoefEval,
                    Vec<(f64, f64)>,
                ) = match name {
                    "lambda1" => (
                        &fit.params.lambda[0],
                        cov.lambda[0].as_ref().unwrap(),
                        CoefEval::Curve(basis),
                        grid.clone(),
                    ),
                    "lambda2" => (
                        &fit.params.lambda[1],
                        cov.lambda[1].as_ref().unwrap(),
                        CoefEval::Curve(basis),
                        grid.clone(),
                    ),
                    "lambda3" => {
                        let eval = if scenario.kind == ScenarioKind::Sim1 {
                            CoefEval::Surface(basis)
                        } else {
                            CoefEval::Curve(basis)
                        };
                        let pts = if scenario.kind == ScenarioKind::Sim1 {
                            surface_grid(basis, 21)
                        } else {
                            grid.clone()
                        };
                        (&fit.params.lambda[2], cov.lambda[2].as_ref().unwrap(), eval, pts)
                    }
                    "gamma_x1" => (
                        &fit.params.gamma_x[0],
                        &cov.gamma_x[0],
                        CoefEval::Curve(basis),
                        grid.clone(),
                    ),
                    "gamma_x2" => (
                        &fit.params.gamma_x[1],
                        &cov.gamma_x[1],
                        CoefEval::Curve(basis),
                        grid.clone(),
                    ),
                    _ => unreachable!(),
                };
                let band = confidence_band(
                    coef,
                    block,
                    &eval,
                    &pts,
                    scenario.band_level,
                    BandConstruction::Ellipsoid,
                );
                bands.push((name.to_string(), band));
            }
        }
        Err(_) => {}
    }
    Ok(ReplicateFit { fit, bands })
}

/// Aggregate replicate fits into the MSE/CR table.
pub fn evaluate_replications(
    scenario: &SimScenario,
    model: &ValidatedModel,
    fits: &[ReplicateFit],
    truths: &[SimTruth],
) -> Result<ReplicationReport, SimError> {
    if fits.len() < 2 {
        return Err(SimError::TooFewReplicates);
    }
    if fits.len() != truths.len() {
        return Err(SimError::CountMismatch);
    }
    let basis = model.basis();
    let gram0 = basis.gram(0).expect("gram");
    let reps = fits.len() as f64;
    let mut entries: Vec<ParamSummary> = Vec::new();
    let mut add_mse = |name: &str, per_rep: Vec<f64>| {
        entries.push(ParamSummary {
            name: name.to_string(),
            mse: per_rep.iter().sum::<f64>() / reps,
            cr: None,
            cr_all: None,
        });
    };

    // Intercepts.
    for j in 0..3 {
        let vals: Vec<f64> = fits
            .iter()
            .zip(truths)
            .map(|(f, tr)| curve_mse(basis, &f.fit.params.beta[j], |t| tr.beta(j, t)))
            .collect();
        add_mse(&format!("beta{}", j + 1), vals);
    }
    // Loadings.
    match scenario.kind {
        ScenarioKind::Sim1 => {
            for j in 0..2 {
                let vals: Vec<f64> = fits
                    .iter()
                    .zip(truths)
                    .map(|(f, tr)| {
                        curve_mse(basis, &f.fit.params.lambda[j], |t| tr.lambda(j, t))
                    })
                    .collect();
                add_mse(&format!("lambda{}", j + 1), vals);
            }
            let vals: Vec<f64> = fits
                .iter()
                .zip(truths)
                .map(|(f, tr)| surface_mse(basis, &f.fit.params.lambda[2], tr))
                .collect();
            add_mse("lambda3", vals);
        }
        ScenarioKind::Sim2 => {
            for j in 0..3 {
                let vals: Vec<f64> = fits
                    .iter()
                    .zip(truths)
                    .map(|(f, tr)| {
                        curve_mse(basis, &f.fit.params.lambda[j], |t| tr.lambda(j, t))
                    })
                    .collect();
                add_mse(&format!("lambda{}", j + 1), vals);
            }
            for l in 0..2 {
                let vals: Vec<f64> = fits
                    .iter()
                    .zip(truths)
                    .map(|(f, tr)| {
                        curve_mse(basis, &f.fit.params.gamma_x[l], |t| tr.gamma_x(l, t))
                    })
                    .collect();
                add_mse(&format!("gamma_x{}", l + 1), vals);
            }
        }
    }
    // Residual eigen-structure (first component, sign-aligned) and σ².
    let grid = eval_grid();
    for j in 0..3 {
        let mut phi_mse = 0.0;
        let mut nu_mse = 0.0;
        let mut s2_mse = 0.0;
        for (f, tr) in fits.iter().zip(truths) {
            let (vals, vecs) = linalg::kernel_eigen(&f.fit.params.sigma_eps[j], &gram0);
            let nu_true = tr.eps_eigenvalues()[0];
            nu_mse += (vals[0] - nu_true).powi(2);
            // Sign-align the first eigenfunction to the truth.
            let mut dot = 0.0;
            for &t in &grid {
                let est = basis.eval(t, 0).unwrap().dot(&vecs[0]);
                dot += est * tr.eps_first_eigenfunction(j, t);
            }
            let sign = if dot < 0.0 { -1.0 } else { 1.0 };
            let mut acc = 0.0;
            for &t in &grid {
                let est = sign * basis.eval(t, 0).unwrap().dot(&vecs[0]);
                acc += (est - tr.eps_first_eigenfunction(j, t)).powi(2);
            }
            phi_mse += acc / grid.len() as f64;
            s2_mse += (f.fit.params.sigma2[j] - tr.sigma2).powi(2);
        }
        for (name, total) in [
            (format!("phi{}1", j + 1), phi_mse),
            (format!("nu{}1", j + 1), nu_mse),
            (format!("sigma2_{}", j + 1), s2_mse),
        ] {
            entries.push(ParamSummary {
                name,
                mse: total / reps,
                cr: None,
                cr_all: None,
            });
        }
    }

    // Coverage of the bands.
    let mut band_failures = 0;
    for name in band_parameters(scenario.kind) {
        let mut hit95 = 0usize;
        let mut hit_all = 0usize;
        let mut have = 0usize;
        for (f, tr) in fits.iter().zip(truths) {
            let Some((_, band)) = f.bands.iter().find(|(n, _)| n == name) else {
                continue;
            };
            have += 1;
            let (c95, call) = match (scenario.kind, name) {
                (ScenarioKind::Sim1, "lambda3") => {
                    band_coverage(band, |s, t| tr.lambda_surface(s, t))
                }
                (_, "lambda1") => band_coverage(band, |_, t| tr.lambda(0, t)),
                (_, "lambda2") => band_coverage(band, |_, t| tr.lambda(1, t)),
                (_, "lambda3") => band_coverage(band, |_, t| tr.lambda(2, t)),
                (_, "gamma_x1") => band_coverage(band, |_, t| tr.gamma_x(0, t)),
                (_, "gamma_x2") => band_coverage(band, |_, t| tr.gamma_x(1, t)),
                _ => unreachable!(),
            };
            if c95 {
                hit95 += 1;
            }
            if call {
                hit_all += 1;
            }
        }
        if have == 0 {
            band_failures += 1;
        }
        if let Some(e) = entries.iter_mut().find(|e| e.name == name) {
            if have > 0 {
                e.cr = Some(hit95 as f64 / have as f64);
                e.cr_all = Some(hit_all as f64 / have as f64);
            }
        }
    }
    for f in fits {
        if f.bands.is_empty() {
            band_failures += 1;
        }
    }

    Ok(ReplicationReport {
        kind: scenario.kind,
        n: scenario.n,
        m: scenario.m,
        design: scenario.design,
        replicates: fits.len(),
        band_level: scenario.band_level,
        entries,
        band_failures,
    })
}

/// Per-replicate fit summary for the simulation artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateDiag {
    pub replicate: usize,
    pub converged: bool,
    pub iterations: usize,
    pub loglik_z: f64,
    pub has_bands: bool,
}

/// A completed scenario run.
#[derive(Debug)]
pub struct ScenarioRun {
    pub report: ReplicationReport,
    pub replicate_diags: Vec<ReplicateDiag>,
}

/// Run a full scenario: generate, fit, band, and aggregate. Replicates run
/// in parallel on deterministic per-replicate seed streams.
pub fn run_scenario(scenario: &SimScenario) -> Result<ScenarioRun, SimError> {
    scenario.validate()?;
    let model = scenario.model();
    let results: Vec<Result<(ReplicateFit, SimTruth), SimError>> = (0..scenario.replicates)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = linalg::mix_seed(scenario.seed, 0x5111 ^ rep as u64);
            let (ds, truth) = generate(scenario, rep_seed);
            let fit = fit_replicate(scenario, &model, &ds, rep_seed)?;
            Ok((fit, truth))
        })
        .collect();
    let mut fits = Vec::new();
    let mut truths = Vec::new();
    for r in results {
        let (f, t) = r?;
        fits.push(f);
        truths.push(t);
    }
    let replicate_diags = fits
        .iter()
        .enumerate()
        .map(|(rep, f)| ReplicateDiag {
            replicate: rep,
            converged: f.fit.converged,
            iterations: f.fit.iterations,
            loglik_z: f.fit.loglik_z,
            has_bands: !f.bands.is_empty(),
        })
        .collect();
    let report = evaluate_replications(scenario, &model, &fits, &truths)?;
    Ok(ScenarioRun {
        report,
        replicate_diags,
    })
}
