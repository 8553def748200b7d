//! Path-model declaration, validation, and assembly of the block design and
//! coefficient matrices of the truncated models.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{design_blocks, BasisError, BasisSystem, DesignBlocks};
use crate::linalg;

/// Effect of a latent factor on an indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoadingEffect {
    /// Scalar loading: `λ η(t)`.
    Fixed,
    /// Pointwise functional loading: `λ(t) η(t)`.
    Concurrent,
    /// Integral effect of the factor's past: `∫_{s≤t} λ(s,t) η(s) ds`.
    Historical,
}

/// Effect of a latent factor on another latent factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentEffect {
    Concurrent,
    Historical,
}

/// Effect of an observed covariate on a latent factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateEffect {
    /// `γ(t) x` for scalar `x`.
    Linear,
    /// Nonlinear effect of a scalar covariate on a tensor basis over
    /// (covariate, time).
    Smooth,
    /// `γ(t) x(t)` for functional `x`.
    Concurrent,
    /// `∫_{s≤t} γ(s,t) x(s) ds` for functional `x`.
    Historical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateKind {
    Scalar,
    Functional,
}

/// How the scale of a factor is pinned down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Identification {
    /// One loading fixed to the identity effect.
    Anchor,
    /// Unique-factor variance normalized so that `∫ K^ζ(t,t) dt = 1`.
    UnitVariance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Loading {
    pub indicator: usize,
    pub factor: usize,
    pub effect: LoadingEffect,
    pub anchored: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentEdge {
    /// Factor being explained.
    pub target: usize,
    /// Factor acting as regressor.
    pub source: usize,
    pub effect: LatentEffect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateEdge {
    pub factor: usize,
    pub covariate: usize,
    pub effect: CovariateEffect,
}

/// The declared path model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub indicators: Vec<String>,
    pub factors: Vec<String>,
    pub covariates: Vec<(String, CovariateKind)>,
    pub loadings: Vec<Loading>,
    pub latent_edges: Vec<LatentEdge>,
    pub covariate_edges: Vec<CovariateEdge>,
    pub identification: Vec<Identification>,
    pub basis: BasisSystem,
    /// Dimension of the covariate basis used by smooth effects.
    pub smooth_dim: usize,
    /// Explicit covariate ranges for smooth bases (covariate index → range);
    /// ranges observed in the data are used otherwise.
    pub smooth_ranges: BTreeMap<usize, (f64, f64)>,
    /// Calendar-time domain mapped affinely onto the basis domain.
    pub time_domain: (f64, f64),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model must declare at least one indicator and one factor")]
    Empty,
    #[error("duplicate variable name `{0}`")]
    DuplicateName(String),
    #[error("loading references unknown indicator or factor")]
    BadLoadingIndex,
    #[error("edge references an unknown variable")]
    BadEdgeIndex,
    #[error("factor `{0}` has no indicator")]
    FactorWithoutIndicator(String),
    #[error("factor `{0}` has more than one anchored loading")]
    MultipleAnchors(String),
    #[error("factor `{0}` is anchor-identified but has no anchored loading")]
    MissingAnchor(String),
    #[error("factor `{0}` is variance-identified but declares an anchored loading")]
    AnchorOnVarianceIdentified(String),
    #[error("duplicate edge between `{0}` and `{1}`")]
    DuplicateEdge(String, String),
    #[error("latent edges contain a self-loop on `{0}`")]
    SelfEdge(String),
    #[error("latent edges contain a cycle; the structural model must be recursive")]
    LatentCycle,
    #[error("effect `{effect:?}` is invalid for {kind:?} covariate `{name}`")]
    CovariateEffectMismatch {
        name: String,
        kind: CovariateKind,
        effect: CovariateEffect,
    },
    #[error("identification list must have one entry per factor")]
    BadIdentificationLength,
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// A validated model: the spec plus a topological order of the factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidatedModel {
    spec: ModelSpec,
    topo_order: Vec<usize>,
    anchor_loading: Vec<Option<usize>>,
}

/// Validate a declared model: anchoring, effect-type compatibility, and
/// recursiveness of the structural part.
pub fn validate_model(spec: ModelSpec) -> Result<ValidatedModel, ModelError> {
    let p = spec.indicators.len();
    let q = spec.factors.len();
    if p == 0 || q == 0 {
        return Err(ModelError::Empty);
    }
    if spec.identification.len() != q {
        return Err(ModelError::BadIdentificationLength);
    }
    let mut seen = std::collections::BTreeSet::new();
    for name in spec
        .indicators
        .iter()
        .chain(spec.factors.iter())
        .chain(spec.covariates.iter().map(|(n, _)| n))
    {
        if !seen.insert(name.clone()) {
            return Err(ModelError::DuplicateName(name.clone()));
        }
    }
    let mut anchor_loading = vec![None; q];
    let mut has_indicator = vec![false; q];
    let mut seen_loading = std::collections::BTreeSet::new();
    for (idx, l) in spec.loadings.iter().enumerate() {
        if l.indicator >= p || l.factor >= q {
            return Err(ModelError::BadLoadingIndex);
        }
        if !seen_loading.insert((l.indicator, l.factor)) {
            return Err(ModelError::DuplicateEdge(
                spec.indicators[l.indicator].clone(),
                spec.factors[l.factor].clone(),
            ));
        }
        has_indicator[l.factor] = true;
        if l.anchored {
            if anchor_loading[l.factor].is_some() {
                return Err(ModelError::MultipleAnchors(spec.factors[l.factor].clone()));
            }
            anchor_loading[l.factor] = Some(idx);
        }
    }
    for m in 0..q {
        if !has_indicator[m] {
            return Err(ModelError::FactorWithoutIndicator(spec.factors[m].clone()));
        }
        match spec.identification[m] {
            Identification::Anchor if anchor_loading[m].is_none() => {
                return Err(ModelError::MissingAnchor(spec.factors[m].clone()));
            }
            Identification::UnitVariance if anchor_loading[m].is_some() => {
                return Err(ModelError::AnchorOnVarianceIdentified(
                    spec.factors[m].clone(),
                ));
            }
            _ => {}
        }
    }
    let mut seen_edge = std::collections::BTreeSet::new();
    for e in &spec.latent_edges {
        if e.target >= q || e.source >= q {
            return Err(ModelError::BadEdgeIndex);
        }
        if e.target == e.source {
            return Err(ModelError::SelfEdge(spec.factors[e.target].clone()));
        }
        if !seen_edge.insert((e.target, e.source)) {
            return Err(ModelError::DuplicateEdge(
                spec.factors[e.target].clone(),
                spec.factors[e.source].clone(),
            ));
        }
    }
    let mut seen_cov = std::collections::BTreeSet::new();
    for e in &spec.covariate_edges {
        if e.factor >= q || e.covariate >= spec.covariates.len() {
            return Err(ModelError::BadEdgeIndex);
        }
        if !seen_cov.insert((e.factor, e.covariate)) {
            return Err(ModelError::DuplicateEdge(
                spec.factors[e.factor].clone(),
                spec.covariates[e.covariate].0.clone(),
            ));
        }
        let (name, kind) = &spec.covariates[e.covariate];
        let ok = match kind {
            CovariateKind::Scalar => {
                matches!(e.effect, CovariateEffect::Linear | CovariateEffect::Smooth)
            }
            CovariateKind::Functional => matches!(
                e.effect,
                CovariateEffect::Concurrent | CovariateEffect::Historical
            ),
        };
        if !ok {
            return Err(ModelError::CovariateEffectMismatch {
                name: name.clone(),
                kind: *kind,
                effect: e.effect,
            });
        }
    }
    // Kahn's algorithm: sources before targets.
    let mut indegree = vec![0usize; q];
    for e in &spec.latent_edges {
        indegree[e.target] += 1;
    }
    let mut queue: Vec<usize> = (0..q).filter(|&m| indegree[m] == 0).collect();
    let mut topo = Vec::with_capacity(q);
    let mut head = 0;
    while head < queue.len() {
        let m = queue[head];
        head += 1;
        topo.push(m);
        for e in &spec.latent_edges {
            if e.source == m {
                indegree[e.target] -= 1;
                if indegree[e.target] == 0 {
                    queue.push(e.target);
                }
            }
        }
    }
    if topo.len() != q {
        return Err(ModelError::LatentCycle);
    }
    Ok(ValidatedModel {
        spec,
        topo_order: topo,
        anchor_loading,
    })
}

impl ValidatedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn basis(&self) -> &BasisSystem {
        &self.spec.basis
    }

    pub fn p(&self) -> usize {
        self.spec.indicators.len()
    }

    pub fn q(&self) -> usize {
        self.spec.factors.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.spec.covariates.len()
    }

    /// Topological order of the factors (sources first).
    pub fn factor_order(&self) -> &[usize] {
        &self.topo_order
    }

    pub fn identification(&self, m: usize) -> Identification {
        self.spec.identification[m]
    }

    /// Index into `spec().loadings` of the anchored loading, per factor.
    pub fn anchor_loading(&self, m: usize) -> Option<usize> {
        self.anchor_loading[m]
    }

    pub fn loadings_of(&self, j: usize) -> impl Iterator<Item = (usize, &Loading)> {
        self.spec
            .loadings
            .iter()
            .enumerate()
            .filter(move |(_, l)| l.indicator == j)
    }

    pub fn free_loadings_of(&self, j: usize) -> impl Iterator<Item = (usize, &Loading)> {
        self.loadings_of(j).filter(|(_, l)| !l.anchored)
    }

    pub fn anchored_loadings_of(&self, j: usize) -> impl Iterator<Item = (usize, &Loading)> {
        self.loadings_of(j).filter(|(_, l)| l.anchored)
    }

    pub fn latent_edges_of(&self, m: usize) -> impl Iterator<Item = (usize, &LatentEdge)> {
        self.spec
            .latent_edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.target == m)
    }

    pub fn covariate_edges_of(&self, m: usize) -> impl Iterator<Item = (usize, &CovariateEdge)> {
        self.spec
            .covariate_edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.factor == m)
    }

    /// Coefficient-vector length for a loading effect.
    pub fn loading_width(&self, effect: LoadingEffect) -> usize {
        let j = self.spec.basis.dim();
        match effect {
            LoadingEffect::Fixed => 1,
            LoadingEffect::Concurrent => j,
            LoadingEffect::Historical => j * j,
        }
    }

    pub fn latent_width(&self, effect: LatentEffect) -> usize {
        let j = self.spec.basis.dim();
        match effect {
            LatentEffect::Concurrent => j,
            LatentEffect::Historical => j * j,
        }
    }

    pub fn covariate_width(&self, effect: CovariateEffect) -> usize {
        let j = self.spec.basis.dim();
        match effect {
            CovariateEffect::Linear | CovariateEffect::Concurrent => j,
            CovariateEffect::Historical => j * j,
            CovariateEffect::Smooth => j * self.spec.smooth_dim,
        }
    }

    /// Smooth-effect covariate bases, one per covariate that appears in a
    /// smooth edge, built on the given per-covariate value ranges.
    pub fn smooth_bases(
        &self,
        observed_ranges: &BTreeMap<usize, (f64, f64)>,
    ) -> Result<BTreeMap<usize, BasisSystem>, ModelError> {
        let mut out = BTreeMap::new();
        for e in &self.spec.covariate_edges {
            if e.effect != CovariateEffect::Smooth || out.contains_key(&e.covariate) {
                continue;
            }
            let range = self
                .spec
                .smooth_ranges
                .get(&e.covariate)
                .or_else(|| observed_ranges.get(&e.covariate))
                .copied()
                .unwrap_or((0.0, 1.0));
            let (lo, hi) = if range.1 > range.0 {
                range
            } else {
                (range.0 - 0.5, range.0 + 0.5)
            };
            let dim = self.spec.smooth_dim;
            let order = 4.min(dim);
            out.insert(
                e.covariate,
                BasisSystem::bspline(order.max(2), dim, (lo, hi))?,
            );
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Per-grid operators
// ---------------------------------------------------------------------------

/// Cached per-time-grid operators: the evaluation matrix, the
/// ridge-stabilized projection `P = (EEᵀ + εI)⁻¹E`, the stacked design
/// blocks, and the anchored-loading maps.
#[derive(Debug, Clone)]
pub struct GridOps {
    pub times: Vec<f64>,
    /// `J × M` evaluation matrix.
    pub e: DMatrix<f64>,
    /// `J × M` pseudo-projection `(EEᵀ + εI)⁻¹ E`.
    pub proj: DMatrix<f64>,
    pub blocks: DesignBlocks,
    /// `P Eᵀ`: anchored map for fixed and concurrent loadings.
    pub r_point: DMatrix<f64>,
    /// `P Δ`: anchored map for historical loadings.
    pub r_hist: DMatrix<f64>,
}

impl GridOps {
    pub fn new(basis: &BasisSystem, times: &[f64]) -> Result<Self, BasisError> {
        let e = basis.eval_matrix(times, 0)?.values;
        let blocks = design_blocks(basis, times)?;
        let j = basis.dim();
        let m = times.len();
        let mut gram = &e * e.transpose();
        // Ridge-stabilize when the grid cannot identify all coefficients or
        // the system is ill-conditioned.
        let eig = gram.clone().symmetric_eigen().eigenvalues;
        let max_eig = eig.max();
        let min_eig = eig.min();
        let needs_ridge = m < j || min_eig <= 0.0 || max_eig / min_eig.max(1e-300) > 1e12;
        if needs_ridge {
            let eps = 1e-10 * gram.trace() / j as f64;
            for i in 0..j {
                gram[(i, i)] += eps.max(1e-300);
            }
        }
        let proj = linalg::spd_inverse(&gram) * &e;
        let r_point = &proj * e.transpose();
        let r_hist = &proj * &blocks.delta;
        Ok(GridOps {
            times: times.to_vec(),
            e,
            proj,
            blocks,
            r_point,
            r_hist,
        })
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }
}

/// The `M × w` design rows mapping a coefficient vector to grid evaluations
/// of the effect, given the regressor's basis coefficients. Covers the
/// fixed (`ω`), concurrent (`Ω₁`), and historical (`Ω₂`) forms.
pub fn effect_design_rows(
    width: usize,
    historical: bool,
    reg_coefs: &DVector<f64>,
    ops: &GridOps,
) -> DMatrix<f64> {
    let m = ops.n_times();
    let j = reg_coefs.len();
    let mut out = DMatrix::zeros(m, width);
    for k in 0..m {
        let e_k = &ops.blocks.e_cols[k];
        if width == 1 {
            out[(k, 0)] = e_k.dot(reg_coefs);
        } else if !historical {
            let scale = e_k.dot(reg_coefs);
            for c in 0..j {
                out[(k, c)] = scale * e_k[c];
            }
        } else {
            let psi_eta = &ops.blocks.psi[k] * reg_coefs;
            for c1 in 0..j {
                for c2 in 0..j {
                    out[(k, c1 * j + c2)] = e_k[c1] * psi_eta[c2];
                }
            }
        }
    }
    out
}

/// The `M × J` matrix `Λ_{jm}` mapping a factor's coefficients to the grid
/// contribution of a free loading with the given coefficients.
pub fn loading_matrix(
    effect: LoadingEffect,
    coef: &DVector<f64>,
    ops: &GridOps,
) -> DMatrix<f64> {
    let j = ops.e.nrows();
    let m = ops.n_times();
    let mut out = DMatrix::zeros(m, j);
    match effect {
        LoadingEffect::Fixed => {
            out.copy_from(&(ops.e.transpose() * coef[0]));
        }
        LoadingEffect::Concurrent => {
            for k in 0..m {
                let e_k = &ops.blocks.e_cols[k];
                let scale = e_k.dot(coef);
                for c in 0..j {
                    out[(k, c)] = scale * e_k[c];
                }
            }
        }
        LoadingEffect::Historical => {
            // row k = (Ψ_k Λmat e_k)ᵀ with λ(s,t) = eᵀ(s) Λmat e(t)
            let lam = surface_matrix(coef, j);
            for k in 0..m {
                let v = &ops.blocks.psi[k] * (&lam * &ops.blocks.e_cols[k]);
                for c in 0..j {
                    out[(k, c)] = v[c];
                }
            }
        }
    }
    out
}

/// Reshape a `J²` surface coefficient vector (Kronecker order `t ⊗ s`) into
/// the `J × J` matrix `Λ` with `λ(s,t) = eᵀ(s) Λ e(t)`.
pub fn surface_matrix(coef: &DVector<f64>, j: usize) -> DMatrix<f64> {
    DMatrix::from_fn(j, j, |s, t| coef[t * j + s])
}

/// `J × J` coefficient-space map of a free loading: `P Λ_{jm}`.
pub fn loading_map(effect: LoadingEffect, coef: &DVector<f64>, ops: &GridOps) -> DMatrix<f64> {
    &ops.proj * loading_matrix(effect, coef, ops)
}

/// `J × J` coefficient-space map of an anchored loading: `P Λ'_{jm}`.
pub fn anchored_map(effect: LoadingEffect, ops: &GridOps) -> DMatrix<f64> {
    match effect {
        LoadingEffect::Fixed | LoadingEffect::Concurrent => ops.r_point.clone(),
        LoadingEffect::Historical => ops.r_hist.clone(),
    }
}

/// Coefficient-space map of a latent structural edge given its coefficients.
pub fn latent_edge_map(effect: LatentEffect, coef: &DVector<f64>, ops: &GridOps) -> DMatrix<f64> {
    let le = match effect {
        LatentEffect::Concurrent => LoadingEffect::Concurrent,
        LatentEffect::Historical => LoadingEffect::Historical,
    };
    loading_map(le, coef, ops)
}

/// One subject's covariate values: scalars, or basis coefficients for
/// functional covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CovariateValue {
    Scalar(f64),
    Functional(DVector<f64>),
}

/// `J`-vector structural contribution of a covariate edge with known
/// coefficients: `P s^x_{iml}`.
pub fn covariate_contribution(
    edge: &CovariateEdge,
    coef: &DVector<f64>,
    value: &CovariateValue,
    ops: &GridOps,
    smooth_basis: Option<&BasisSystem>,
) -> DVector<f64> {
    let design = covariate_design_block(edge, value, ops, smooth_basis);
    &ops.proj * (design * coef)
}

/// `M × w` design rows of one covariate edge.
pub fn covariate_design_block(
    edge: &CovariateEdge,
    value: &CovariateValue,
    ops: &GridOps,
    smooth_basis: Option<&BasisSystem>,
) -> DMatrix<f64> {
    let m = ops.n_times();
    let j = ops.e.nrows();
    match (edge.effect, value) {
        (CovariateEffect::Linear, CovariateValue::Scalar(x)) => ops.e.transpose() * *x,
        (CovariateEffect::Smooth, CovariateValue::Scalar(x)) => {
            let h = smooth_basis
                .expect("smooth edge requires a covariate basis")
                .eval(*x, 0)
                .expect("covariate value inside smooth basis range");
            let jh = h.len();
            let mut out = DMatrix::zeros(m, j * jh);
            for k in 0..m {
                let e_k = &ops.blocks.e_cols[k];
                for c1 in 0..j {
                    for c2 in 0..jh {
                        out[(k, c1 * jh + c2)] = e_k[c1] * h[c2];
                    }
                }
            }
            out
        }
        (CovariateEffect::Concurrent, CovariateValue::Functional(xc)) => {
            effect_design_rows(j, false, xc, ops)
        }
        (CovariateEffect::Historical, CovariateValue::Functional(xc)) => {
            effect_design_rows(j * j, true, xc, ops)
        }
        _ => panic!("covariate effect/value mismatch survived validation"),
    }
}

// ---------------------------------------------------------------------------
// Spec-level block assemblies (full layout with explicit selectors)
// ---------------------------------------------------------------------------

/// The measurement design for one (subject, indicator) pair in the full
/// layout `F_i = [I_J | P (I_M⊗η_{i1})ᵀΩ* | … ]` together with the `A_j`
/// block selector and the projected anchored contributions.
#[derive(Debug, Clone)]
pub struct MeasurementDesign {
    /// `J × K` with `K = J + Σ_m w_m`.
    pub f: DMatrix<f64>,
    /// `K × K` diagonal 0/1 selector.
    pub selector: DMatrix<f64>,
    /// `P f'_{ijm}` for each anchored edge of this indicator.
    pub anchored: Vec<DVector<f64>>,
    /// Per-factor column ranges inside `f` (after the leading `I_J` block).
    pub factor_cols: Vec<std::ops::Range<usize>>,
}

/// Build the full-layout measurement design for indicator `j` given the
/// subject's factor coefficient vectors.
pub fn build_measurement_design(
    model: &ValidatedModel,
    j: usize,
    eta: &[DVector<f64>],
    ops: &GridOps,
) -> MeasurementDesign {
    let jdim = model.basis().dim();
    let q = model.q();
    // Column width for factor m follows the declared free edge when present
    // and defaults to the concurrent width otherwise (those columns are
    // zeroed by the selector).
    let mut widths = vec![jdim; q];
    let mut effects = vec![None; q];
    for (_, l) in model.free_loadings_of(j) {
        widths[l.factor] = model.loading_width(l.effect);
        effects[l.factor] = Some(l.effect);
    }
    let total = jdim + widths.iter().sum::<usize>();
    let mut f = DMatrix::zeros(jdim, total);
    let mut selector = DMatrix::zeros(total, total);
    for i in 0..jdim {
        f[(i, i)] = 1.0;
        selector[(i, i)] = 1.0;
    }
    let mut col = jdim;
    let mut factor_cols = Vec::with_capacity(q);
    for m in 0..q {
        let w = widths[m];
        factor_cols.push(col..col + w);
        if let Some(effect) = effects[m] {
            let rows = effect_design_rows(
                w,
                matches!(effect, LoadingEffect::Historical),
                &eta[m],
                ops,
            );
            let block = &ops.proj * rows;
            f.view_mut((0, col), (jdim, w)).copy_from(&block);
            for c in 0..w {
                selector[(col + c, col + c)] = 1.0;
            }
        }
        col += w;
    }
    let anchored = model
        .anchored_loadings_of(j)
        .map(|(_, l)| anchored_map(l.effect, ops) * &eta[l.factor])
        .collect();
    MeasurementDesign {
        f,
        selector,
        anchored,
        factor_cols,
    }
}

/// The structural design for one (subject, target factor) pair, full layout
/// with the `B_m` selector.
#[derive(Debug, Clone)]
pub struct StructuralDesign {
    /// `J × K` with latent blocks first, then covariate blocks.
    pub s: DMatrix<f64>,
    pub selector: DMatrix<f64>,
    pub latent_cols: Vec<std::ops::Range<usize>>,
    pub covariate_cols: Vec<std::ops::Range<usize>>,
}

/// Build the full-layout structural design for factor `m`.
pub fn build_structural_design(
    model: &ValidatedModel,
    m: usize,
    eta: &[DVector<f64>],
    covariates: &[CovariateValue],
    ops: &GridOps,
    smooth_bases: &BTreeMap<usize, BasisSystem>,
) -> StructuralDesign {
    let jdim = model.basis().dim();
    let q = model.q();
    let n_cov = model.n_covariates();

    let mut lat_width = vec![jdim; q];
    let mut lat_effect = vec![None; q];
    for (_, e) in model.latent_edges_of(m) {
        lat_width[e.source] = model.latent_width(e.effect);
        lat_effect[e.source] = Some(e.effect);
    }
    let mut cov_width = vec![jdim; n_cov];
    let mut cov_edge: Vec<Option<&CovariateEdge>> = vec![None; n_cov];
    for (_, e) in model.covariate_edges_of(m) {
        cov_width[e.covariate] = model.covariate_width(e.effect);
        cov_edge[e.covariate] = Some(e);
    }
    let total: usize = lat_width.iter().chain(cov_width.iter()).sum();
    let mut s = DMatrix::zeros(jdim, total);
    let mut selector = DMatrix::zeros(total, total);
    let mut latent_cols = Vec::with_capacity(q);
    let mut covariate_cols = Vec::with_capacity(n_cov);
    let mut col = 0;
    for n in 0..q {
        let w = lat_width[n];
        latent_cols.push(col..col + w);
        if let Some(effect) = lat_effect[n] {
            let rows = effect_design_rows(
                w,
                matches!(effect, LatentEffect::Historical),
                &eta[n],
                ops,
            );
            let block = &ops.proj * rows;
            s.view_mut((0, col), (jdim, w)).copy_from(&block);
            for c in 0..w {
                selector[(col + c, col + c)] = 1.0;
            }
        }
        col += w;
    }
    for l in 0..n_cov {
        let w = cov_width[l];
        covariate_cols.push(col..col + w);
        if let Some(edge) = cov_edge[l] {
            let rows =
                covariate_design_block(edge, &covariates[l], ops, smooth_bases.get(&l));
            let block = &ops.proj * rows;
            s.view_mut((0, col), (jdim, w)).copy_from(&block);
            for c in 0..w {
                selector[(col + c, col + c)] = 1.0;
            }
        }
        col += w;
    }
    StructuralDesign {
        s,
        selector,
        latent_cols,
        covariate_cols,
    }
}

// ---------------------------------------------------------------------------
// Declarative model configuration text
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
#[error("model config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

/// Parse the declarative model configuration.
///
/// Grammar (one declaration per line, `#` starts a comment):
///
/// ```text
/// domain <lo> <hi>
/// basis bspline <J> [order <k>]
/// basis fourier <J> [period <p>]
/// indicator <name>
/// factor <name> [anchor|variance]
/// covariate <name> scalar|functional
/// load <indicator> on <factor> fixed|concurrent|historical [anchor]
/// regress <factor> on <factor|covariate> <effect>
/// smooth_basis <covariate> dim <J_h> [range <lo> <hi>]
/// ```
pub fn parse_model_text(text: &str) -> Result<ModelSpec, ConfigError> {
    let mut indicators: Vec<String> = Vec::new();
    let mut factors: Vec<String> = Vec::new();
    let mut identification: Vec<Identification> = Vec::new();
    let mut covariates: Vec<(String, CovariateKind)> = Vec::new();
    let mut loadings = Vec::new();
    let mut latent_edges = Vec::new();
    let mut covariate_edges = Vec::new();
    let mut domain = (0.0, 1.0);
    let mut basis_decl: Option<(String, usize, Option<f64>, Option<usize>)> = None;
    let mut smooth_dim: Option<usize> = None;
    let mut smooth_ranges: BTreeMap<usize, (f64, f64)> = BTreeMap::new();

    let err = |line: usize, msg: &str| ConfigError {
        line,
        message: msg.to_string(),
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = stripped.split_whitespace().collect();
        match tokens[0] {
            "domain" => {
                if tokens.len() != 3 {
                    return Err(err(line, "expected: domain <lo> <hi>"));
                }
                let lo: f64 = tokens[1].parse().map_err(|_| err(line, "bad number"))?;
                let hi: f64 = tokens[2].parse().map_err(|_| err(line, "bad number"))?;
                if !(lo < hi) {
                    return Err(err(line, "domain must satisfy lo < hi"));
                }
                domain = (lo, hi);
            }
            "basis" => {
                if tokens.len() < 3 {
                    return Err(err(line, "expected: basis bspline|fourier <J> …"));
                }
                let dim: usize = tokens[2]
                    .parse()
                    .map_err(|_| err(line, "bad basis dimension"))?;
                let mut period = None;
                let mut order = None;
                let mut i = 3;
                while i + 1 < tokens.len() + 1 && i < tokens.len() {
                    match tokens[i] {
                        "order" => {
                            order = Some(
                                tokens
                                    .get(i + 1)
                                    .ok_or_else(|| err(line, "missing order value"))?
                                    .parse()
                                    .map_err(|_| err(line, "bad order"))?,
                            );
                            i += 2;
                        }
                        "period" => {
                            period = Some(
                                tokens
                                    .get(i + 1)
                                    .ok_or_else(|| err(line, "missing period value"))?
                                    .parse()
                                    .map_err(|_| err(line, "bad period"))?,
                            );
                            i += 2;
                        }
                        other => {
                            return Err(err(line, &format!("unknown basis option `{other}`")))
                        }
                    }
                }
                basis_decl = Some((tokens[1].to_string(), dim, period, order));
            }
            "indicator" => {
                if tokens.len() != 2 {
                    return Err(err(line, "expected: indicator <name>"));
                }
                indicators.push(tokens[1].to_string());
            }
            "factor" => {
                if tokens.len() < 2 || tokens.len() > 3 {
                    return Err(err(line, "expected: factor <name> [anchor|variance]"));
                }
                factors.push(tokens[1].to_string());
                let ident = match tokens.get(2).copied() {
                    None | Some("anchor") => Identification::Anchor,
                    Some("variance") => Identification::UnitVariance,
                    Some(other) => {
                        return Err(err(line, &format!("unknown identification `{other}`")))
                    }
                };
                identification.push(ident);
            }
            "covariate" => {
                if tokens.len() != 3 {
                    return Err(err(line, "expected: covariate <name> scalar|functional"));
                }
                let kind = match tokens[2] {
                    "scalar" => CovariateKind::Scalar,
                    "functional" => CovariateKind::Functional,
                    other => {
                        return Err(err(line, &format!("unknown covariate kind `{other}`")))
                    }
                };
                covariates.push((tokens[1].to_string(), kind));
            }
            "load" => {
                if tokens.len() < 5 || tokens[2] != "on" {
                    return Err(err(
                        line,
                        "expected: load <indicator> on <factor> <effect> [anchor]",
                    ));
                }
                let ind = indicators
                    .iter()
                    .position(|n| n == tokens[1])
                    .ok_or_else(|| err(line, &format!("unknown indicator `{}`", tokens[1])))?;
                let fac = factors
                    .iter()
                    .position(|n| n == tokens[3])
                    .ok_or_else(|| err(line, &format!("unknown factor `{}`", tokens[3])))?;
                let effect = match tokens[4] {
                    "fixed" => LoadingEffect::Fixed,
                    "concurrent" => LoadingEffect::Concurrent,
                    "historical" => LoadingEffect::Historical,
                    other => return Err(err(line, &format!("unknown effect `{other}`"))),
                };
                let anchored = match tokens.get(5).copied() {
                    None => false,
                    Some("anchor") => true,
                    Some(other) => {
                        return Err(err(line, &format!("unexpected token `{other}`")))
                    }
                };
                loadings.push(Loading {
                    indicator: ind,
                    factor: fac,
                    effect,
                    anchored,
                });
            }
            "regress" => {
                if tokens.len() != 5 || tokens[2] != "on" {
                    return Err(err(
                        line,
                        "expected: regress <factor> on <factor|covariate> <effect>",
                    ));
                }
                let target = factors
                    .iter()
                    .position(|n| n == tokens[1])
                    .ok_or_else(|| err(line, &format!("unknown factor `{}`", tokens[1])))?;
                if let Some(source) = factors.iter().position(|n| n == tokens[3]) {
                    let effect = match tokens[4] {
                        "concurrent" => LatentEffect::Concurrent,
                        "historical" => LatentEffect::Historical,
                        other => {
                            return Err(err(
                                line,
                                &format!("effect `{other}` is invalid between factors"),
                            ))
                        }
                    };
                    latent_edges.push(LatentEdge {
                        target,
                        source,
                        effect,
                    });
                } else if let Some(cov) = covariates.iter().position(|(n, _)| n == tokens[3]) {
                    let effect = match tokens[4] {
                        "linear" => CovariateEffect::Linear,
                        "smooth" => CovariateEffect::Smooth,
                        "concurrent" => CovariateEffect::Concurrent,
                        "historical" => CovariateEffect::Historical,
                        other => return Err(err(line, &format!("unknown effect `{other}`"))),
                    };
                    covariate_edges.push(CovariateEdge {
                        factor: target,
                        covariate: cov,
                        effect,
                    });
                } else {
                    return Err(err(line, &format!("unknown variable `{}`", tokens[3])));
                }
            }
            "smooth_basis" => {
                if tokens.len() < 4 || tokens[2] != "dim" {
                    return Err(err(
                        line,
                        "expected: smooth_basis <covariate> dim <J_h> [range <lo> <hi>]",
                    ));
                }
                let cov = covariates
                    .iter()
                    .position(|(n, _)| n == tokens[1])
                    .ok_or_else(|| err(line, &format!("unknown covariate `{}`", tokens[1])))?;
                let dim: usize = tokens[3].parse().map_err(|_| err(line, "bad dimension"))?;
                smooth_dim = Some(dim);
                if tokens.len() == 7 && tokens[4] == "range" {
                    let lo: f64 = tokens[5].parse().map_err(|_| err(line, "bad number"))?;
                    let hi: f64 = tokens[6].parse().map_err(|_| err(line, "bad number"))?;
                    smooth_ranges.insert(cov, (lo, hi));
                } else if tokens.len() != 4 {
                    return Err(err(line, "trailing tokens"));
                }
            }
            other => return Err(err(line, &format!("unknown declaration `{other}`"))),
        }
    }

    let (kind, dim, period, order) =
        basis_decl.unwrap_or_else(|| ("bspline".to_string(), 10, None, None));
    let basis = match kind.as_str() {
        "bspline" => BasisSystem::bspline(order.unwrap_or(4), dim, (0.0, 1.0)),
        "fourier" => match period {
            Some(p) => BasisSystem::fourier_with_period(dim, (0.0, 1.0), p),
            None => BasisSystem::fourier(dim, (0.0, 1.0)),
        },
        other => {
            return Err(ConfigError {
                line: 0,
                message: format!("unknown basis kind `{other}`"),
            })
        }
    }
    .map_err(|e| ConfigError {
        line: 0,
        message: e.to_string(),
    })?;

    Ok(ModelSpec {
        indicators,
        factors,
        covariates,
        loadings,
        latent_edges,
        covariate_edges,
        identification,
        smooth_dim: smooth_dim.unwrap_or(dim),
        smooth_ranges,
        basis,
        time_domain: domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sim2_text() -> &'static str {
        "\
# Simulation-2-shaped model
domain 0 1
basis bspline 6 order 4
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
"
    }

    #[test]
    fn sim2_spec_validates() {
        let spec = parse_model_text(sim2_text()).unwrap();
        assert_eq!(spec.indicators.len(), 3);
        assert_eq!(spec.covariates.len(), 2);
        let model = validate_model(spec).unwrap();
        assert_eq!(model.factor_order(), &[0]);
    }

    #[test]
    fn cycle_is_rejected() {
        let text = "\
indicator z1
indicator z2
factor f1 variance
factor f2 variance
load z1 on f1 concurrent
load z2 on f2 concurrent
regress f1 on f2 concurrent
regress f2 on f1 concurrent
";
        let spec = parse_model_text(text).unwrap();
        assert!(matches!(
            validate_model(spec),
            Err(ModelError::LatentCycle)
        ));
    }

    #[test]
    fn double_anchor_is_rejected() {
        let text = "\
indicator z1
indicator z2
factor f1
load z1 on f1 concurrent anchor
load z2 on f1 concurrent anchor
";
        let spec = parse_model_text(text).unwrap();
        assert!(matches!(
            validate_model(spec),
            Err(ModelError::MultipleAnchors(_))
        ));
    }

    #[test]
    fn smooth_on_functional_is_rejected() {
        let text = "\
indicator z1
factor f1 variance
covariate w functional
load z1 on f1 concurrent
regress f1 on w smooth
";
        let spec = parse_model_text(text).unwrap();
        assert!(matches!(
            validate_model(spec),
            Err(ModelError::CovariateEffectMismatch { .. })
        ));
    }

    #[test]
    fn missing_anchor_is_rejected() {
        let text = "\
indicator z1
factor f1 anchor
load z1 on f1 concurrent
";
        let spec = parse_model_text(text).unwrap();
        assert!(matches!(
            validate_model(spec),
            Err(ModelError::MissingAnchor(_))
        ));
    }

    fn test_grid_ops(j: usize) -> (BasisSystem, GridOps) {
        let basis = BasisSystem::bspline(4, j, (0.0, 1.0)).unwrap();
        let times: Vec<f64> = (1..=j).map(|k| k as f64 / j as f64).collect();
        let ops = GridOps::new(&basis, &times).unwrap();
        (basis, ops)
    }

    #[test]
    fn concurrent_design_reproduces_pointwise_product() {
        // F_i A_j λ_j evaluated on the grid equals λ(t_k)·η(t_k).
        let (basis, ops) = test_grid_ops(6);
        let eta = basis.project_function(|t| (1.5 * t).sin() + 0.3, 200);
        let lam = basis.project_function(|t| 1.0 + 0.5 * t * t, 200);
        let rows = effect_design_rows(6, false, &eta, &ops);
        let vals = rows * &lam;
        for (k, &t) in ops.times.iter().enumerate() {
            let eta_t = basis.eval(t, 0).unwrap().dot(&eta);
            let lam_t = basis.eval(t, 0).unwrap().dot(&lam);
            assert!(
                (vals[k] - eta_t * lam_t).abs() < 1e-6,
                "t={t}: {} vs {}",
                vals[k],
                eta_t * lam_t
            );
        }
    }

    #[test]
    fn historical_unit_surface_matches_delta() {
        // λ(s,t) ≡ 1 → contribution is ∫_{s≤t} η(s) ds = Δη.
        let (basis, ops) = test_grid_ops(6);
        let eta = basis.project_function(|t| 0.2 + t, 200);
        let j = basis.dim();
        let lam = DVector::from_element(j * j, 1.0); // partition of unity ⊗ itself
        let rows = effect_design_rows(j * j, true, &eta, &ops);
        let vals = rows * &lam;
        let delta_eta = &ops.blocks.delta * &eta;
        for k in 0..ops.n_times() {
            assert!(
                (vals[k] - delta_eta[k]).abs() < 1e-6,
                "k={k}: {} vs {}",
                vals[k],
                delta_eta[k]
            );
        }
    }

    #[test]
    fn selectors_are_idempotent_diagonal() {
        let spec = parse_model_text(sim2_text()).unwrap();
        let model = validate_model(spec).unwrap();
        let (_, ops) = test_grid_ops(6);
        let eta = vec![DVector::from_element(6, 0.5)];
        let d = build_measurement_design(&model, 0, &eta, &ops);
        let a = &d.selector;
        assert_eq!(a * a, *a);
        for r in 0..a.nrows() {
            for c in 0..a.ncols() {
                if r != c {
                    assert_eq!(a[(r, c)], 0.0);
                } else {
                    assert!(a[(r, c)] == 0.0 || a[(r, c)] == 1.0);
                }
            }
        }
    }

    #[test]
    fn two_route_construction_agreement() {
        // The F_i A_j λ_j + Σ f'a' route and the (Λ_j + Λ'_j) coefficient
        // route agree for a model mixing anchored and free effects.
        let text = "\
indicator z1
indicator z2
factor f1
basis bspline 6 order 4
load z1 on f1 concurrent anchor
load z2 on f1 historical
";
        let model = validate_model(parse_model_text(text).unwrap()).unwrap();
        let (basis, ops) = test_grid_ops(6);
        let j = basis.dim();
        let eta = vec![basis.project_function(|t| (2.0 * t).cos(), 200)];
        let beta = basis.project_function(|t| 0.5 * t, 200);
        let lam_hist = DVector::from_fn(j * j, |i, _| ((i % 5) as f64 - 2.0) / 10.0);

        // Route 1 for z2 (free historical edge).
        let d = build_measurement_design(&model, 1, &eta, &ops);
        let mut coefs = DVector::zeros(d.f.ncols());
        coefs.rows_mut(0, j).copy_from(&beta);
        let range = &d.factor_cols[0];
        coefs.rows_mut(range.start, j * j).copy_from(&lam_hist);
        let route1 = &d.f * &d.selector * &coefs;

        // Route 2: β + Λ_j-map applied to η.
        let lmap = loading_map(LoadingEffect::Historical, &lam_hist, &ops);
        let route2 = beta.clone() + lmap * &eta[0];
        for i in 0..j {
            assert_abs_diff_eq!(route1[i], route2[i], epsilon = 1e-8);
        }

        // Route 1 for z1 (anchored): contribution is the anchored map.
        let d1 = build_measurement_design(&model, 0, &eta, &ops);
        assert_eq!(d1.anchored.len(), 1);
        let route2_anchor = anchored_map(LoadingEffect::Concurrent, &ops) * &eta[0];
        for i in 0..j {
            assert_abs_diff_eq!(d1.anchored[0][i], route2_anchor[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn fixed_effect_loading_matrix_is_scaled_eval() {
        let (_, ops) = test_grid_ops(6);
        let coef = DVector::from_element(1, 1.0);
        let lam = loading_matrix(LoadingEffect::Fixed, &coef, &ops);
        let expect = ops.e.transpose();
        assert_abs_diff_eq!(
            (lam - expect).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn constant_concurrent_loading_acts_like_scalar() {
        // λ(t) ≡ c → Λ_{jm} η = c · Eᵀη.
        let (basis, ops) = test_grid_ops(6);
        let c = 0.7;
        let lam_coef = basis.project_function(|_| c, 200);
        let eta = basis.project_function(|t| t * t, 200);
        let lmat = loading_matrix(LoadingEffect::Concurrent, &lam_coef, &ops);
        let got = lmat * &eta;
        let want = ops.e.transpose() * &eta * c;
        for k in 0..ops.n_times() {
            assert_abs_diff_eq!(got[k], want[k], epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_latent_gives_zero_design_block() {
        let spec = parse_model_text(sim2_text()).unwrap();
        let model = validate_model(spec).unwrap();
        let (_, ops) = test_grid_ops(6);
        let eta = vec![DVector::zeros(6)];
        let d = build_measurement_design(&model, 0, &eta, &ops);
        let block = d.f.view((0, 6), (6, d.f.ncols() - 6));
        assert!(block.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn structural_design_zero_selector() {
        // A factor with no declared structural edges gets an all-zero
        // selector and a zero mean contribution.
        let text = "\
indicator z1
factor f1 variance
covariate x1 scalar
load z1 on f1 concurrent
";
        let model = validate_model(parse_model_text(text).unwrap()).unwrap();
        let (_, ops) = test_grid_ops(6);
        let eta = vec![DVector::from_element(6, 1.0)];
        let cov = vec![CovariateValue::Scalar(2.0)];
        let d = build_structural_design(&model, 0, &eta, &cov, &ops, &BTreeMap::new());
        assert!(d.selector.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_covariate_block_is_eval_transpose() {
        // Linear scalar effect with x = 1: the block maps γ to eᵀ(t_k)γ.
        let (_, ops) = test_grid_ops(6);
        let edge = CovariateEdge {
            factor: 0,
            covariate: 0,
            effect: CovariateEffect::Linear,
        };
        let block =
            covariate_design_block(&edge, &CovariateValue::Scalar(1.0), &ops, None);
        assert_abs_diff_eq!((block - ops.e.transpose()).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn smooth_design_matches_direct_tensor_evaluation() {
        let (basis, ops) = test_grid_ops(6);
        let h = BasisSystem::bspline(4, 5, (-1.0, 1.0)).unwrap();
        let edge = CovariateEdge {
            factor: 0,
            covariate: 0,
            effect: CovariateEffect::Smooth,
        };
        let x = 0.3;
        let block =
            covariate_design_block(&edge, &CovariateValue::Scalar(x), &ops, Some(&h));
        let gamma = DVector::from_fn(6 * 5, |i, _| (i as f64 * 0.13).sin());
        let vals = &block * &gamma;
        for (k, &t) in ops.times.iter().enumerate() {
            let e_t = basis.eval(t, 0).unwrap();
            let h_x = h.eval(x, 0).unwrap();
            let mut direct = 0.0;
            for c1 in 0..6 {
                for c2 in 0..5 {
                    direct += e_t[c1] * h_x[c2] * gamma[c1 * 5 + c2];
                }
            }
            assert_abs_diff_eq!(vals[k], direct, epsilon = 1e-10);
        }
    }
}
