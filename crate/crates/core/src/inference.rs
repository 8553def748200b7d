//! Bootstrap covariance of coefficient estimates, pointwise covariance
//! functions, and confidence bands for functional parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::basis::BasisSystem;
use crate::dataset::FunctionalDataset;
use crate::fit::{fit_mcem_with_alpha, AlphaVector, FitConfig, FitError};
use crate::gp::{ModelContext, ParamSet};
use crate::linalg;
use crate::model::ValidatedModel;

/// Bootstrap settings for the coefficient covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Number of replicates.
    pub b: usize,
    /// Fraction of dropped (non-converged) replicates tolerated.
    pub max_dropped_frac: f64,
    /// EM iteration cap per replicate (refits warm-start at the point
    /// estimate, so far fewer iterations are needed than for the main fit).
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            b: 200,
            max_dropped_frac: 0.2,
            max_iter: 30,
            seed: 0,
        }
    }
}

/// Bootstrap covariance blocks per coefficient vector (anchored loadings
/// excluded).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefCovariance {
    /// Per loading edge; `None` for anchored edges.
    pub lambda: Vec<Option<DMatrix<f64>>>,
    pub gamma_eta: Vec<DMatrix<f64>>,
    pub gamma_x: Vec<DMatrix<f64>>,
    pub replicates_used: usize,
    pub replicates_dropped: usize,
}

/// Resample subjects with replacement, refit, and form the sample covariance
/// of the coefficient vectors across replicates. Non-converged replicates
/// are dropped and counted; more than `max_dropped_frac` dropped is an
/// error.
pub fn bootstrap_covariances(
    model: &ValidatedModel,
    dataset: &FunctionalDataset,
    fit_config: &FitConfig,
    alpha: &AlphaVector,
    boot: &BootstrapConfig,
    warm_start: &ParamSet,
) -> Result<CoefCovariance, FitError> {
    if boot.b < 2 {
        return Err(FitError::BadConfig("bootstrap needs B >= 2".into()));
    }
    let n = dataset.n_subjects();
    // Smooth bases must stay fixed across replicates for the coefficient
    // covariances to be comparable.
    let base_ctx = ModelContext::new(model, dataset)?;
    let smooth_bases = base_ctx.smooth_bases.clone();

    let replicates: Vec<Option<ParamSet>> = (0..boot.b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(linalg::mix_seed(
                boot.seed,
                0xb007 ^ rep as u64,
            ));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resampled = dataset.resample_subjects(&idx);
            let ctx = match ModelContext::with_smooth_bases(model, &resampled, smooth_bases.clone())
            {
                Ok(c) => c,
                Err(_) => return None,
            };
            let cfg = FitConfig {
                max_iter: boot.max_iter,
                seed: linalg::mix_seed(boot.seed, 0x5eed ^ rep as u64),
                ..fit_config.clone()
            };
            match fit_mcem_with_alpha(&ctx, &cfg, alpha, Some(warm_start)) {
                Ok(fit) if fit.converged => Some(fit.params),
                _ => None,
            }
        })
        .collect();

    let kept: Vec<&ParamSet> = replicates.iter().flatten().collect();
    let dropped = boot.b - kept.len();
    if (dropped as f64) > boot.max_dropped_frac * boot.b as f64 || kept.len() < 2 {
        return Err(FitError::TooManyDropped {
            dropped,
            total: boot.b,
            percent: (boot.max_dropped_frac * 100.0) as u32,
        });
    }
    Ok(covariance_from_replicates(model, &kept, dropped))
}

/// Sample covariance of the coefficient vectors across replicate fits.
pub fn covariance_from_replicates(
    model: &ValidatedModel,
    replicates: &[&ParamSet],
    dropped: usize,
) -> CoefCovariance {
    let b = replicates.len();
    let sample_cov = |extract: &dyn Fn(&ParamSet) -> DVector<f64>| -> DMatrix<f64> {
        let d = extract(replicates[0]).len();
        let mut mean = DVector::zeros(d);
        for r in replicates {
            mean += extract(r);
        }
        mean /= b as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in replicates {
            let diff = extract(r) - &mean;
            cov.ger(1.0, &diff, &diff, 1.0);
        }
        cov /= (b - 1).max(1) as f64;
        cov
    };
    let lambda = model
        .spec()
        .loadings
        .iter()
        .enumerate()
        .map(|(idx, l)| {
            if l.anchored {
                None
            } else {
                Some(sample_cov(&move |p: &ParamSet| p.lambda[idx].clone()))
            }
        })
        .collect();
    let gamma_eta = (0..model.spec().latent_edges.len())
        .map(|idx| sample_cov(&move |p: &ParamSet| p.gamma_eta[idx].clone()))
        .collect();
    let gamma_x = (0..model.spec().covariate_edges.len())
        .map(|idx| sample_cov(&move |p: &ParamSet| p.gamma_x[idx].clone()))
        .collect();
    CoefCovariance {
        lambda,
        gamma_eta,
        gamma_x,
        replicates_used: b,
        replicates_dropped: dropped,
    }
}

// ---------------------------------------------------------------------------
// Pointwise covariance functions
// ---------------------------------------------------------------------------

/// How a coefficient vector maps to function evaluations.
#[derive(Debug, Clone)]
pub enum CoefEval<'a> {
    /// `J`-vector in the time basis: concurrent loadings/edges and linear
    /// covariate effects. Evaluation point is `t`.
    Curve(&'a BasisSystem),
    /// `J²` surface coefficients (historical effects). Evaluation point is
    /// `(s, t)` with `s ≤ t`.
    Surface(&'a BasisSystem),
    /// Tensor coefficients of a smooth effect. Evaluation point is `(x, t)`.
    Tensor {
        time: &'a BasisSystem,
        covariate: &'a BasisSystem,
    },
}

impl<'a> CoefEval<'a> {
    /// The evaluation functional `φ` with `f(point) = φᵀ coef`.
    pub fn functional(&self, point: (f64, f64)) -> DVector<f64> {
        match self {
            CoefEval::Curve(basis) => basis.eval(point.1, 0).expect("point in domain"),
            CoefEval::Surface(basis) => {
                let e_t = basis.eval(point.1, 0).expect("t in domain");
                let e_s = basis.eval(point.0, 0).expect("s in domain");
                linalg::kron_vec(&e_t, &e_s)
            }
            CoefEval::Tensor { time, covariate } => {
                let e_t = time.eval(point.1, 0).expect("t in domain");
                let h_x = covariate.eval(point.0, 0).expect("x in range");
                linalg::kron_vec(&e_t, &h_x)
            }
        }
    }
}

/// Pointwise covariance `cov(f(a), f(b)) = φᵀ(a) Σ̂ φ(b)`.
pub fn pointwise_coefficient_covariance(
    cov: &DMatrix<f64>,
    eval: &CoefEval,
    a: (f64, f64),
    b: (f64, f64),
) -> f64 {
    let pa = eval.functional(a);
    let pb = eval.functional(b);
    (pa.transpose() * cov * pb)[(0, 0)]
}

// ---------------------------------------------------------------------------
// Confidence bands
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BandConstruction {
    /// `center ± z_{level} √cov(t,t)` per point.
    Pointwise,
    /// Simultaneous band from the eigen-decomposition of the grid
    /// covariance: components explaining 99.9% of the variance define a
    /// chi-square hyper-ellipsoid which is extremized per grid point.
    Ellipsoid,
}

/// A confidence band for one functional parameter on an evaluation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceBand {
    /// Evaluation points; second coordinate used by surfaces/tensors.
    pub grid: Vec<(f64, f64)>,
    pub center: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub construction: BandConstruction,
}

/// Build a confidence band for a coefficient vector with covariance block
/// `cov` on the given grid.
pub fn confidence_band(
    estimate: &DVector<f64>,
    cov: &DMatrix<f64>,
    eval: &CoefEval,
    grid: &[(f64, f64)],
    level: f64,
    construction: BandConstruction,
) -> ConfidenceBand {
    assert!(level > 0.0 && level < 1.0, "level must be in (0,1)");
    let g = grid.len();
    let d = estimate.len();
    let mut phi = DMatrix::zeros(g, d);
    for (r, &pt) in grid.iter().enumerate() {
        let f = eval.functional(pt);
        for c in 0..d {
            phi[(r, c)] = f[c];
        }
    }
    let center_v = &phi * estimate;
    let mut grid_cov = &phi * cov * phi.transpose();
    linalg::symmetrize(&mut grid_cov);
    let widths = match construction {
        BandConstruction::Pointwise => {
            let z = Normal::new(0.0, 1.0)
                .unwrap()
                .inverse_cdf(0.5 + level / 2.0);
            (0..g)
                .map(|r| z * grid_cov[(r, r)].max(0.0).sqrt())
                .collect::<Vec<f64>>()
        }
        BandConstruction::Ellipsoid => {
            let eig = grid_cov.clone().symmetric_eigen();
            let mut order: Vec<usize> = (0..g).collect();
            order.sort_by(|&a, &b| {
                eig.eigenvalues[b]
                    .partial_cmp(&eig.eigenvalues[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
            let mut rank = 0;
            let mut acc = 0.0;
            for &i in &order {
                if eig.eigenvalues[i] <= 0.0 {
                    break;
                }
                acc += eig.eigenvalues[i];
                rank += 1;
                if acc >= 0.999 * total {
                    break;
                }
            }
            let rank = rank.max(1);
            let radius2 = ChiSquared::new(rank as f64)
                .unwrap()
                .inverse_cdf(level);
            // Extremizing the ellipsoid at a grid point gives
            // ± √(r² · Σ_k λ_k u_{gk}²) over the retained components.
            (0..g)
                .map(|r| {
                    let mut var_r = 0.0;
                    for &i in order.iter().take(rank) {
                        let u = eig.eigenvectors[(r, i)];
                        var_r += eig.eigenvalues[i].max(0.0) * u * u;
                    }
                    (radius2 * var_r).sqrt()
                })
                .collect::<Vec<f64>>()
        }
    };
    let center: Vec<f64> = center_v.iter().copied().collect();
    let lower: Vec<f64> = center.iter().zip(&widths).map(|(c, w)| c - w).collect();
    let upper: Vec<f64> = center.iter().zip(&widths).map(|(c, w)| c + w).collect();
    ConfidenceBand {
        grid: grid.to_vec(),
        center,
        lower,
        upper,
        level,
        construction,
    }
}

/// Standard curve grid `(t, t)` on `n` points.
pub fn curve_grid(basis: &BasisSystem, n: usize) -> Vec<(f64, f64)> {
    let (lo, hi) = basis.domain();
    (0..n)
        .map(|i| {
            let t = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            (t, t)
        })
        .collect()
}

/// Lower-triangle surface grid `(s, t)` with `s ≤ t`, `n` points per axis.
pub fn surface_grid(basis: &BasisSystem, n: usize) -> Vec<(f64, f64)> {
    let (lo, hi) = basis.domain();
    let mut out = Vec::new();
    for it in 0..n {
        let t = lo + (hi - lo) * it as f64 / (n - 1) as f64;
        for is in 0..=it {
            let s = lo + (hi - lo) * is as f64 / (n - 1) as f64;
            out.push((s, t));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_long_format, LongRecord};
    use crate::fit::AlphaChoice;
    use crate::model::{parse_model_text, validate_model};
    use approx::assert_abs_diff_eq;

    fn curve_model() -> ValidatedModel {
        let text = "\
basis bspline 4 order 4
indicator z1
factor eta variance
load z1 on eta concurrent
";
        validate_model(parse_model_text(text).unwrap()).unwrap()
    }

    #[test]
    fn identical_replicates_give_zero_covariance() {
        let model = curve_model();
        let params = ParamSet::zeros(&model);
        let reps = vec![&params, &params];
        let cov = covariance_from_replicates(&model, &reps, 0);
        let block = cov.lambda[0].as_ref().unwrap();
        assert!(block.iter().all(|v| v.abs() < 1e-14));
        assert_eq!(cov.replicates_used, 2);
    }

    #[test]
    fn bootstrap_covariance_diagonal_nonnegative_and_shrinks_with_n() {
        let model = curve_model();
        let make_ds = |n: usize, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut recs = Vec::new();
            for i in 0..n {
                let amp: f64 = 0.7 + 0.6 * rng.random::<f64>();
                for k in 1..=5 {
                    let t = k as f64 / 5.0;
                    recs.push(LongRecord {
                        subject: format!("s{i:04}"),
                        variable: "z1".into(),
                        time: t,
                        value: amp * (1.0 + t) + 0.05 * rng.random::<f64>(),
                    });
                }
            }
            ingest_long_format(&recs, &[], (0.0, 1.0)).unwrap()
        };
        let cfg = FitConfig {
            max_iter: 8,
            n_mc: 40,
            alpha: AlphaChoice::Fixed {
                lambda: 1e-4,
                gamma: 0.0,
            },
            tol_coef: 0.05,
            tol_sigma2: 0.05,
            ..FitConfig::default()
        };
        let alpha = AlphaVector::shared(&model, 1e-4, 0.0);
        let boot = BootstrapConfig {
            b: 12,
            max_iter: 8,
            max_dropped_frac: 0.5,
            seed: 3,
        };
        let mut traces = Vec::new();
        for &(n, seed) in &[(15usize, 11u64), (60, 11)] {
            let ds = make_ds(n, seed);
            let ctx = ModelContext::new(&model, &ds).unwrap();
            let fit = fit_mcem_with_alpha(&ctx, &cfg, &alpha, None).unwrap();
            let cov =
                bootstrap_covariances(&model, &ds, &cfg, &alpha, &boot, &fit.params).unwrap();
            let block = cov.lambda[0].as_ref().unwrap();
            assert!(block.diagonal().iter().all(|v| *v >= 0.0));
            traces.push(block.trace());
        }
        assert!(
            traces[1] < traces[0],
            "bootstrap covariance should shrink with n: {traces:?}"
        );
    }

    #[test]
    fn pointwise_covariance_identity_gives_squared_norm() {
        let basis = BasisSystem::bspline(4, 6, (0.0, 1.0)).unwrap();
        let cov = DMatrix::identity(6, 6);
        let eval = CoefEval::Curve(&basis);
        for &t in &[0.1, 0.5, 0.9] {
            let v = pointwise_coefficient_covariance(&cov, &eval, (t, t), (t, t));
            let e = basis.eval(t, 0).unwrap();
            assert_abs_diff_eq!(v, e.norm_squared(), epsilon = 1e-12);
        }
    }

    #[test]
    fn pointwise_covariance_is_symmetric() {
        let basis = BasisSystem::bspline(4, 5, (0.0, 1.0)).unwrap();
        let mut cov = DMatrix::identity(5, 5);
        cov[(0, 2)] = 0.3;
        cov[(2, 0)] = 0.3;
        let eval = CoefEval::Curve(&basis);
        let a = pointwise_coefficient_covariance(&cov, &eval, (0.2, 0.2), (0.7, 0.7));
        let b = pointwise_coefficient_covariance(&cov, &eval, (0.7, 0.7), (0.2, 0.2));
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn covariance_function_matches_replicate_curve_sample_covariance() {
        // The pointwise covariance function evaluated from Σ̂ agrees with the
        // sample covariance of the replicate curve evaluations.
        let basis = BasisSystem::bspline(4, 5, (0.0, 1.0)).unwrap();
        let model = {
            let text = "\
basis bspline 5 order 4
indicator z1
factor eta variance
load z1 on eta concurrent
";
            validate_model(parse_model_text(text).unwrap()).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reps: Vec<ParamSet> = (0..40)
            .map(|_| {
                let mut p = ParamSet::zeros(&model);
                p.lambda[0] = DVector::from_fn(5, |_, _| rng.random::<f64>());
                p
            })
            .collect();
        let refs: Vec<&ParamSet> = reps.iter().collect();
        let cov = covariance_from_replicates(&model, &refs, 0);
        let block = cov.lambda[0].as_ref().unwrap();
        let eval = CoefEval::Curve(&basis);
        for &(s, t) in &[(0.25, 0.25), (0.25, 0.8)] {
            let via_matrix = pointwise_coefficient_covariance(block, &eval, (s, s), (t, t));
            // Sample covariance of curve evaluations across replicates.
            let vals_s: Vec<f64> = reps
                .iter()
                .map(|p| basis.eval(s, 0).unwrap().dot(&p.lambda[0]))
                .collect();
            let vals_t: Vec<f64> = reps
                .iter()
                .map(|p| basis.eval(t, 0).unwrap().dot(&p.lambda[0]))
                .collect();
            let ms = vals_s.iter().sum::<f64>() / 40.0;
            let mt = vals_t.iter().sum::<f64>() / 40.0;
            let sample: f64 = vals_s
                .iter()
                .zip(&vals_t)
                .map(|(a, b)| (a - ms) * (b - mt))
                .sum::<f64>()
                / 39.0;
            assert_abs_diff_eq!(via_matrix, sample, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_covariance_band_collapses_to_estimate() {
        let basis = BasisSystem::bspline(4, 5, (0.0, 1.0)).unwrap();
        let est = DVector::from_element(5, 1.0);
        let cov = DMatrix::zeros(5, 5);
        let grid = curve_grid(&basis, 21);
        for construction in [BandConstruction::Pointwise, BandConstruction::Ellipsoid] {
            let band = confidence_band(
                &est,
                &cov,
                &CoefEval::Curve(&basis),
                &grid,
                0.95,
                construction,
            );
            for i in 0..band.grid.len() {
                assert_abs_diff_eq!(band.lower[i], band.center[i], epsilon = 1e-10);
                assert_abs_diff_eq!(band.upper[i], band.center[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn ellipsoid_band_contains_pointwise_band() {
        let basis = BasisSystem::bspline(4, 6, (0.0, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = DMatrix::from_fn(6, 6, |_, _| rng.random::<f64>() - 0.5);
            let cov = &a * a.transpose() * 0.1;
            let est = DVector::from_fn(6, |_, _| rng.random::<f64>());
            let grid = curve_grid(&basis, 25);
            let pw = confidence_band(
                &est,
                &cov,
                &CoefEval::Curve(&basis),
                &grid,
                0.95,
                BandConstruction::Pointwise,
            );
            let el = confidence_band(
                &est,
                &cov,
                &CoefEval::Curve(&basis),
                &grid,
                0.95,
                BandConstruction::Ellipsoid,
            );
            for i in 0..grid.len() {
                assert!(
                    el.lower[i] <= pw.lower[i] + 1e-10 && el.upper[i] >= pw.upper[i] - 1e-10,
                    "ellipsoid band narrower than pointwise at {i}"
                );
            }
        }
    }

    #[test]
    fn band_envelopes_are_ordered_and_nonnegative_width() {
        let basis = BasisSystem::bspline(4, 6, (0.0, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random::<f64>() - 0.3);
        let cov = &a * a.transpose();
        let est = DVector::from_fn(6, |_, _| rng.random::<f64>());
        let grid = curve_grid(&basis, 31);
        let band = confidence_band(
            &est,
            &cov,
            &CoefEval::Curve(&basis),
            &grid,
            0.9,
            BandConstruction::Ellipsoid,
        );
        for i in 0..grid.len() {
            assert!(band.lower[i] <= band.center[i] && band.center[i] <= band.upper[i]);
        }
    }
}
