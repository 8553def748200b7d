//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Kronecker product of two column vectors, `a ⊗ b`.
pub fn kron_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[i * b.len() + j] = a[i] * b[j];
        }
    }
    out
}

/// Symmetrize in place: `0.5 (M + Mᵀ)`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let mt = m.transpose();
    *m += mt;
    *m *= 0.5;
}

/// Eigenvalue-clip a symmetric matrix so all eigenvalues are `>= floor`.
///
/// Returns the clipped matrix together with the total mass removed
/// (sum of `floor - lambda` over clipped eigenvalues), which callers
/// surface as a diagnostic.
pub fn clip_eigenvalues(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, f64) {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.clone().symmetric_eigen();
    let mut clipped_mass = 0.0;
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < floor {
            clipped_mass += floor - *v;
            *v = floor;
        }
    }
    if clipped_mass == 0.0 {
        return (sym, 0.0);
    }
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let mut rebuilt = rebuilt;
    symmetrize(&mut rebuilt);
    (rebuilt, clipped_mass)
}

/// Symmetric square root of a PSD matrix (eigenvalues clipped at zero first).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| if v > 0.0 { v.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Inverse of a symmetric positive definite matrix, with a relative ridge
/// added when plain Cholesky fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if let Some(ch) = m.clone().cholesky() {
        return ch.inverse();
    }
    let ridge = ridge_for(m);
    let mut reg = m.clone();
    for i in 0..n {
        reg[(i, i)] += ridge;
    }
    match reg.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => {
            // last resort: eigenvalue clipping
            let floor = ridge.max(1e-300);
            let (clipped, _) = clip_eigenvalues(&reg, floor);
            clipped
                .cholesky()
                .expect("eigenvalue-clipped matrix is positive definite")
                .inverse()
        }
    }
}

/// Solve `M x = b` for symmetric positive semidefinite `M`, ridge-stabilized.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.solve(b);
    }
    let ridge = ridge_for(m);
    let mut reg = m.clone();
    for i in 0..m.nrows() {
        reg[(i, i)] += ridge;
    }
    match reg.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => {
            let (clipped, _) = clip_eigenvalues(&reg, ridge.max(1e-300));
            clipped
                .cholesky()
                .expect("eigenvalue-clipped matrix is positive definite")
                .solve(b)
        }
    }
}

/// Solve `M X = B` column-wise for symmetric PSD `M`, ridge-stabilized.
pub fn spd_solve_matrix(m: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = m.clone().cholesky() {
        let mut x = b.clone();
        ch.solve_mut(&mut x);
        return x;
    }
    let ridge = ridge_for(m);
    let mut reg = m.clone();
    for i in 0..m.nrows() {
        reg[(i, i)] += ridge;
    }
    let ch = match reg.clone().cholesky() {
        Some(ch) => ch,
        None => {
            let (clipped, _) = clip_eigenvalues(&reg, ridge.max(1e-300));
            clipped
                .cholesky()
                .expect("eigenvalue-clipped matrix is positive definite")
        }
    };
    let mut x = b.clone();
    ch.solve_mut(&mut x);
    x
}

/// Relative ridge used to stabilize near-singular symmetric solves.
pub fn ridge_for(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1) as f64;
    let tr = m.trace().abs();
    if tr > 0.0 {
        1e-10 * tr / n
    } else {
        1e-12
    }
}

/// Log-determinant of an SPD matrix via Cholesky (ridge-stabilized).
pub fn spd_log_det(m: &DMatrix<f64>) -> f64 {
    let ch = match m.clone().cholesky() {
        Some(ch) => ch,
        None => {
            let ridge = ridge_for(m);
            let mut reg = m.clone();
            for i in 0..m.nrows() {
                reg[(i, i)] += ridge;
            }
            match reg.clone().cholesky() {
                Some(ch) => ch,
                None => {
                    let (clipped, _) = clip_eigenvalues(&reg, ridge.max(1e-300));
                    clipped.cholesky().expect("clipped matrix is PD")
                }
            }
        }
    };
    2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Log-density of `N(mu, sigma)` at `x`.
pub fn mvn_logpdf(x: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let diff = x - mu;
    let ld = spd_log_det(sigma);
    let quad = diff.dot(&spd_solve(sigma, &diff));
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + ld + quad)
}

/// Condition a joint Gaussian `(mu, sigma)` on the coordinates in `obs_idx`
/// taking the observed `values`. Returns the conditional mean and covariance
/// of the remaining coordinates, in their original relative order.
pub fn gaussian_condition(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    obs_idx: &[usize],
    values: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = mu.len();
    assert_eq!(obs_idx.len(), values.len());
    let mut is_obs = vec![false; n];
    for &i in obs_idx {
        is_obs[i] = true;
    }
    let free: Vec<usize> = (0..n).filter(|i| !is_obs[*i]).collect();
    if obs_idx.is_empty() {
        return (mu.clone(), sigma.clone());
    }
    let mu_b = DVector::from_iterator(obs_idx.len(), obs_idx.iter().map(|&i| mu[i]));
    let mu_a = DVector::from_iterator(free.len(), free.iter().map(|&i| mu[i]));
    let sigma_bb = DMatrix::from_fn(obs_idx.len(), obs_idx.len(), |r, c| {
        sigma[(obs_idx[r], obs_idx[c])]
    });
    let sigma_ab = DMatrix::from_fn(free.len(), obs_idx.len(), |r, c| {
        sigma[(free[r], obs_idx[c])]
    });
    let sigma_aa = DMatrix::from_fn(free.len(), free.len(), |r, c| sigma[(free[r], free[c])]);

    // K = Σ_ab Σ_bb⁻¹ via a ridge-stabilized SPD solve on the transpose system.
    let sigma_bb_inv = spd_inverse(&stabilized(&sigma_bb));
    let gain = &sigma_ab * &sigma_bb_inv;
    let mean = mu_a + &gain * (values - mu_b);
    let mut cov = sigma_aa - &gain * sigma_ab.transpose();
    symmetrize(&mut cov);
    (mean, cov)
}

fn stabilized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    // Plain Cholesky first; only ridge when needed.
    if m.clone().cholesky().is_some() {
        return out;
    }
    let ridge = ridge_for(m);
    for i in 0..m.nrows() {
        out[(i, i)] += ridge;
    }
    out
}

/// Eigenpairs of the covariance operator with kernel `eᵀ(s) Σ e(t)` where the
/// basis has Gram matrix `G = ∫ e eᵀ`. Solves `Σ G φ = ν φ` through the
/// symmetric form `G^{1/2} Σ G^{1/2}`, returning eigenvalues in descending
/// order with coefficient vectors normalized to unit function norm
/// (`φᵀ G φ = 1`).
pub fn kernel_eigen(sigma: &DMatrix<f64>, gram: &DMatrix<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
    let g_half = psd_sqrt(gram);
    let g_half_inv = spd_inverse(&stabilized(&(&g_half * &g_half)));
    // G^{-1/2} = G^{-1} G^{1/2}
    let g_half_inv = &g_half_inv * &g_half;
    let mut inner = &g_half * sigma * &g_half;
    symmetrize(&mut inner);
    let eig = inner.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut vals = Vec::with_capacity(order.len());
    let mut vecs = Vec::with_capacity(order.len());
    for &i in &order {
        vals.push(eig.eigenvalues[i]);
        let w = eig.eigenvectors.column(i).into_owned();
        let mut phi = &g_half_inv * w;
        let norm2 = phi.dot(&(gram * &phi));
        if norm2 > 0.0 {
            phi /= norm2.sqrt();
        }
        vecs.push(phi);
    }
    (vals, vecs)
}

/// SplitMix64 step, used to derive independent RNG streams from one seed.
pub fn mix_seed(state: u64, tag: u64) -> u64 {
    let mut z = state
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
