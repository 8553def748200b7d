//! Observed indicator curves and covariates under regular or irregular
//! sampling, plus ingestion of long-format delimited files.
//!
//! Calendar time is mapped affinely onto the basis domain at ingestion and
//! the map is kept for reporting; all stored times live in `[0, 1]`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::BasisSystem;
use crate::linalg;
use crate::model::{CovariateKind, CovariateValue, ValidatedModel};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no records")]
    Empty,
    #[error("duplicate observation for subject `{subject}`, variable `{variable}` at time {time}")]
    DuplicateTime {
        subject: String,
        variable: String,
        time: f64,
    },
    #[error("non-finite value for subject `{subject}`, variable `{variable}`")]
    NonFiniteValue { subject: String, variable: String },
    #[error("time {time} outside declared domain [{lo}, {hi}] (subject `{subject}`, variable `{variable}`)")]
    TimeOutsideDomain {
        subject: String,
        variable: String,
        time: f64,
        lo: f64,
        hi: f64,
    },
    #[error("covariate `{name}` mixes timed and untimed records")]
    MixedCovariateKind { name: String },
    #[error("covariate `{name}` has {count} records for subject `{subject}` (scalar covariates need exactly one)")]
    ScalarCovariateCount {
        name: String,
        subject: String,
        count: usize,
    },
    #[error("missing covariate `{name}` for subject `{subject}`")]
    MissingCovariate { name: String, subject: String },
    #[error("model variable `{0}` not present in the dataset")]
    UnknownVariable(String),
    #[error("model covariate `{name}` is declared {expected:?} but the data is {found:?}")]
    CovariateKindMismatch {
        name: String,
        expected: CovariateKind,
        found: CovariateKind,
    },
    #[error("invalid missingness probability {0} (need 0 <= p < 1)")]
    InvalidMissingProbability(f64),
    #[error("csv parse error at line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("degenerate time domain")]
    BadDomain,
}

/// One observed series: strictly increasing times in `[0, 1]` and values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// A long-format observation record.
#[derive(Debug, Clone)]
pub struct LongRecord {
    pub subject: String,
    pub variable: String,
    pub time: f64,
    pub value: f64,
}

/// A covariate record; `time` present only for functional covariates.
#[derive(Debug, Clone)]
pub struct CovariateRecord {
    pub subject: String,
    pub name: String,
    pub time: Option<f64>,
    pub value: f64,
}

/// Per-subject, per-variable functional observations plus covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalDataset {
    pub subjects: Vec<String>,
    pub variable_names: Vec<String>,
    /// `observations[v][i]` is the series of variable `v` for subject `i`.
    pub observations: Vec<Vec<Series>>,
    pub covariate_names: Vec<String>,
    pub covariate_kinds: Vec<CovariateKind>,
    /// `scalar_values[c][i]`; populated for scalar covariates.
    pub scalar_values: Vec<Vec<f64>>,
    /// `functional_values[c][i]`; populated for functional covariates.
    pub functional_values: Vec<Vec<Series>>,
    /// Calendar-time domain mapped onto `[0, 1]`.
    pub time_domain: (f64, f64),
}

impl FunctionalDataset {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variable_names.iter().position(|v| v == name)
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|v| v == name)
    }

    /// Map a calendar time into the internal `[0, 1]` scale.
    pub fn normalize_time(&self, t: f64) -> f64 {
        (t - self.time_domain.0) / (self.time_domain.1 - self.time_domain.0)
    }

    /// Map an internal time back to the calendar scale.
    pub fn denormalize_time(&self, u: f64) -> f64 {
        self.time_domain.0 + u * (self.time_domain.1 - self.time_domain.0)
    }

    /// Restrict to a multiset of subject indices (bootstrap resampling).
    pub fn resample_subjects(&self, idx: &[usize]) -> FunctionalDataset {
        let subjects = (0..idx.len()).map(|k| format!("b{k}")).collect();
        let observations = self
            .observations
            .iter()
            .map(|per| idx.iter().map(|&i| per[i].clone()).collect())
            .collect();
        let scalar_values = self
            .scalar_values
            .iter()
            .map(|per| {
                if per.is_empty() {
                    vec![]
                } else {
                    idx.iter().map(|&i| per[i]).collect()
                }
            })
            .collect();
        let functional_values = self
            .functional_values
            .iter()
            .map(|per| {
                if per.is_empty() {
                    vec![]
                } else {
                    idx.iter().map(|&i| per[i].clone()).collect()
                }
            })
            .collect();
        FunctionalDataset {
            subjects,
            variable_names: self.variable_names.clone(),
            observations,
            covariate_names: self.covariate_names.clone(),
            covariate_kinds: self.covariate_kinds.clone(),
            scalar_values,
            functional_values,
            time_domain: self.time_domain,
        }
    }
}

/// Build a dataset from long-format observation and covariate records.
///
/// Subjects are ordered lexicographically; times are normalized to `[0, 1]`
/// using `time_domain`. Duplicate `(subject, variable, time)` triples,
/// non-finite values, and out-of-domain times are rejected.
pub fn ingest_long_format(
    records: &[LongRecord],
    covariate_records: &[CovariateRecord],
    time_domain: (f64, f64),
) -> Result<FunctionalDataset, DataError> {
    if !(time_domain.0.is_finite() && time_domain.1.is_finite() && time_domain.0 < time_domain.1) {
        return Err(DataError::BadDomain);
    }
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    let mut subject_set = BTreeSet::new();
    for r in records {
        subject_set.insert(r.subject.clone());
    }
    for r in covariate_records {
        subject_set.insert(r.subject.clone());
    }
    let subjects: Vec<String> = subject_set.into_iter().collect();
    let subject_idx: BTreeMap<&str, usize> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let span = time_domain.1 - time_domain.0;
    let norm = |t: f64| (t - time_domain.0) / span;
    let check_time = |t: f64, subject: &str, variable: &str| -> Result<f64, DataError> {
        let eps = 1e-9 * span.abs().max(1.0);
        if t < time_domain.0 - eps || t > time_domain.1 + eps {
            return Err(DataError::TimeOutsideDomain {
                subject: subject.to_string(),
                variable: variable.to_string(),
                time: t,
                lo: time_domain.0,
                hi: time_domain.1,
            });
        }
        Ok(norm(t).clamp(0.0, 1.0))
    };

    let variable_names: Vec<String> = records
        .iter()
        .map(|r| r.variable.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let var_idx: BTreeMap<&str, usize> = variable_names
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let empty = Series {
        times: vec![],
        values: vec![],
    };
    let mut observations = vec![vec![empty.clone(); subjects.len()]; variable_names.len()];
    for r in records {
        if !r.value.is_finite() {
            return Err(DataError::NonFiniteValue {
                subject: r.subject.clone(),
                variable: r.variable.clone(),
            });
        }
        let t = check_time(r.time, &r.subject, &r.variable)?;
        let v = var_idx[r.variable.as_str()];
        let i = subject_idx[r.subject.as_str()];
        observations[v][i].times.push(t);
        observations[v][i].values.push(r.value);
    }
    for (v, per_subject) in observations.iter_mut().enumerate() {
        for (i, series) in per_subject.iter_mut().enumerate() {
            let mut order: Vec<usize> = (0..series.len()).collect();
            order.sort_by(|&a, &b| series.times[a].partial_cmp(&series.times[b]).unwrap());
            let times: Vec<f64> = order.iter().map(|&k| series.times[k]).collect();
            let values: Vec<f64> = order.iter().map(|&k| series.values[k]).collect();
            for w in times.windows(2) {
                if w[1] - w[0] <= 1e-12 {
                    return Err(DataError::DuplicateTime {
                        subject: subjects[i].clone(),
                        variable: variable_names[v].clone(),
                        time: w[0],
                    });
                }
            }
            series.times = times;
            series.values = values;
        }
    }

    // Covariates: functional iff any record carries a time.
    let cov_names: Vec<String> = covariate_records
        .iter()
        .map(|r| r.name.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut covariate_kinds = Vec::with_capacity(cov_names.len());
    let mut scalar_values = Vec::with_capacity(cov_names.len());
    let mut functional_values = Vec::with_capacity(cov_names.len());
    for name in &cov_names {
        let recs: Vec<&CovariateRecord> = covariate_records
            .iter()
            .filter(|r| &r.name == name)
            .collect();
        let timed = recs.iter().filter(|r| r.time.is_some()).count();
        if timed != 0 && timed != recs.len() {
            return Err(DataError::MixedCovariateKind { name: name.clone() });
        }
        for r in &recs {
            if !r.value.is_finite() {
                return Err(DataError::NonFiniteValue {
                    subject: r.subject.clone(),
                    variable: name.clone(),
                });
            }
        }
        if timed == 0 {
            covariate_kinds.push(CovariateKind::Scalar);
            let mut vals = vec![f64::NAN; subjects.len()];
            let mut counts = vec![0usize; subjects.len()];
            for r in &recs {
                let i = subject_idx[r.subject.as_str()];
                vals[i] = r.value;
                counts[i] += 1;
            }
            for (i, &c) in counts.iter().enumerate() {
                if c != 1 {
                    return Err(if c == 0 {
                        DataError::MissingCovariate {
                            name: name.clone(),
                            subject: subjects[i].clone(),
                        }
                    } else {
                        DataError::ScalarCovariateCount {
                            name: name.clone(),
                            subject: subjects[i].clone(),
                            count: c,
                        }
                    });
                }
            }
            scalar_values.push(vals);
            functional_values.push(vec![empty.clone(); subjects.len()]);
        } else {
            covariate_kinds.push(CovariateKind::Functional);
            let mut per_subject = vec![empty.clone(); subjects.len()];
            for r in &recs {
                let i = subject_idx[r.subject.as_str()];
                let t = check_time(r.time.unwrap(), &r.subject, name)?;
                per_subject[i].times.push(t);
                per_subject[i].values.push(r.value);
            }
            for (i, s) in per_subject.iter_mut().enumerate() {
                let mut order: Vec<usize> = (0..s.len()).collect();
                order.sort_by(|&a, &b| s.times[a].partial_cmp(&s.times[b]).unwrap());
                s.times = order.iter().map(|&k| s.times[k]).collect();
                s.values = order.iter().map(|&k| s.values[k]).collect();
                if s.is_empty() {
                    return Err(DataError::MissingCovariate {
                        name: name.clone(),
                        subject: subjects[i].clone(),
                    });
                }
                for w in s.times.windows(2) {
                    if w[1] - w[0] <= 1e-12 {
                        return Err(DataError::DuplicateTime {
                            subject: subjects[i].clone(),
                            variable: name.clone(),
                            time: w[0],
                        });
                    }
                }
            }
            scalar_values.push(vec![]);
            functional_values.push(per_subject);
        }
    }

    Ok(FunctionalDataset {
        subjects,
        variable_names,
        observations,
        covariate_names: cov_names,
        covariate_kinds,
        scalar_values,
        functional_values,
        time_domain,
    })
}

/// Serialize the dataset back to long-format records (calendar time scale).
pub fn export_long_format(ds: &FunctionalDataset) -> (Vec<LongRecord>, Vec<CovariateRecord>) {
    let mut recs = Vec::new();
    for (v, name) in ds.variable_names.iter().enumerate() {
        for (i, subj) in ds.subjects.iter().enumerate() {
            let s = &ds.observations[v][i];
            for k in 0..s.len() {
                recs.push(LongRecord {
                    subject: subj.clone(),
                    variable: name.clone(),
                    time: ds.denormalize_time(s.times[k]),
                    value: s.values[k],
                });
            }
        }
    }
    let mut covs = Vec::new();
    for (c, name) in ds.covariate_names.iter().enumerate() {
        match ds.covariate_kinds[c] {
            CovariateKind::Scalar => {
                for (i, subj) in ds.subjects.iter().enumerate() {
                    covs.push(CovariateRecord {
                        subject: subj.clone(),
                        name: name.clone(),
                        time: None,
                        value: ds.scalar_values[c][i],
                    });
                }
            }
            CovariateKind::Functional => {
                for (i, subj) in ds.subjects.iter().enumerate() {
                    let s = &ds.functional_values[c][i];
                    for k in 0..s.len() {
                        covs.push(CovariateRecord {
                            subject: subj.clone(),
                            name: name.clone(),
                            time: Some(ds.denormalize_time(s.times[k])),
                            value: s.values[k],
                        });
                    }
                }
            }
        }
    }
    (recs, covs)
}

// ---------------------------------------------------------------------------
// CSV readers/writers
// ---------------------------------------------------------------------------

/// Read long-format observations with header `subject,variable,time,value`.
pub fn read_long_csv<R: Read>(reader: R) -> Result<Vec<LongRecord>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| DataError::Csv {
            line,
            message: e.to_string(),
        })?;
        if row.len() < 4 {
            return Err(DataError::Csv {
                line,
                message: "expected 4 columns: subject,variable,time,value".into(),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64, DataError> {
            s.parse().map_err(|_| DataError::Csv {
                line,
                message: format!("bad {what} `{s}`"),
            })
        };
        out.push(LongRecord {
            subject: row[0].to_string(),
            variable: row[1].to_string(),
            time: parse(&row[2], "time")?,
            value: parse(&row[3], "value")?,
        });
    }
    Ok(out)
}

/// Read covariates with header `subject,name,value` (scalar) or
/// `subject,name,time,value` (functional; empty time field means scalar).
pub fn read_covariate_csv<R: Read>(reader: R) -> Result<Vec<CovariateRecord>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let has_time = headers.iter().any(|h| h.eq_ignore_ascii_case("time"));
    let mut out = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| DataError::Csv {
            line,
            message: e.to_string(),
        })?;
        let parse = |s: &str, what: &str| -> Result<f64, DataError> {
            s.parse().map_err(|_| DataError::Csv {
                line,
                message: format!("bad {what} `{s}`"),
            })
        };
        if has_time && row.len() >= 4 && !row[2].is_empty() {
            out.push(CovariateRecord {
                subject: row[0].to_string(),
                name: row[1].to_string(),
                time: Some(parse(&row[2], "time")?),
                value: parse(&row[3], "value")?,
            });
        } else {
            let value_col = if has_time && row.len() >= 4 { 3 } else { 2 };
            let raw = row.get(value_col).unwrap_or("");
            out.push(CovariateRecord {
                subject: row[0].to_string(),
                name: row[1].to_string(),
                time: None,
                value: parse(raw, "value")?,
            });
        }
    }
    Ok(out)
}

pub fn write_long_csv(records: &[LongRecord]) -> String {
    let mut s = String::from("subject,variable,time,value\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.subject, r.variable, r.time, r.value
        ));
    }
    s
}

pub fn write_covariate_csv(records: &[CovariateRecord]) -> String {
    let functional = records.iter().any(|r| r.time.is_some());
    let mut s = if functional {
        String::from("subject,name,time,value\n")
    } else {
        String::from("subject,name,value\n")
    };
    for r in records {
        match r.time {
            Some(t) => s.push_str(&format!("{},{},{},{}\n", r.subject, r.name, t, r.value)),
            None if functional => s.push_str(&format!("{},{},,{}\n", r.subject, r.name, r.value)),
            None => s.push_str(&format!("{},{},{}\n", r.subject, r.name, r.value)),
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Sampling designs
// ---------------------------------------------------------------------------

/// Sampling design used by the simulation studies and the design generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SamplingDesign {
    /// Shared grid `k/M, k = 1..M`.
    Regular,
    /// Per-series count from a truncated geometric law, times i.i.d. U(0,1).
    Irregular,
    /// Regular grid with i.i.d. Bernoulli deletions.
    Mcar { p_miss: f64 },
}

/// Draw one time grid under the design.
pub fn draw_grid(design: SamplingDesign, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match design {
        SamplingDesign::Regular => (1..=m).map(|k| k as f64 / m as f64).collect(),
        SamplingDesign::Irregular => {
            // P(count = c) = a (1/2)^{M+1-c} on {1, …, M} with
            // a = 2^M / (2^M − 1); larger counts are more probable.
            let a = 2f64.powi(m as i32) / (2f64.powi(m as i32) - 1.0);
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut count = m;
            for c in 1..=m {
                cum += a * 0.5f64.powi((m + 1 - c) as i32);
                if u <= cum {
                    count = c;
                    break;
                }
            }
            let mut times: Vec<f64> = (0..count).map(|_| rng.random::<f64>()).collect();
            times.sort_by(|x, y| x.partial_cmp(y).unwrap());
            times.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            times
        }
        SamplingDesign::Mcar { p_miss } => (1..=m)
            .map(|k| k as f64 / m as f64)
            .filter(|_| rng.random::<f64>() >= p_miss)
            .collect(),
    }
}

/// Generate `n` per-subject time grids.
pub fn generate_sampling_design(
    design: SamplingDesign,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, DataError> {
    if let SamplingDesign::Mcar { p_miss } = design {
        if !(0.0..1.0).contains(&p_miss) {
            return Err(DataError::InvalidMissingProbability(p_miss));
        }
    }
    use rand::SeedableRng;
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(linalg::mix_seed(seed, 0x5a5a ^ i as u64));
            draw_grid(design, m, &mut rng)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Binding a dataset to a model
// ---------------------------------------------------------------------------

/// Dataset views aligned with a validated model's variable order.
#[derive(Debug, Clone)]
pub struct BoundData {
    pub n: usize,
    /// `series[i][j]`: observations of indicator `j` for subject `i`.
    pub series: Vec<Vec<Series>>,
    /// `covariates[i][l]` aligned with the model's covariate order;
    /// functional covariates are projected to basis coefficients here.
    pub covariates: Vec<Vec<CovariateValue>>,
    /// Observed scalar covariate ranges (for smooth bases).
    pub covariate_ranges: BTreeMap<usize, (f64, f64)>,
}

/// Match dataset variables to model names and project functional covariates
/// onto the model basis (penalized least squares with the concurrent
/// roughness penalty at a fixed small weight).
pub fn bind(model: &ValidatedModel, ds: &FunctionalDataset) -> Result<BoundData, DataError> {
    let spec = model.spec();
    let n = ds.n_subjects();
    let mut series = vec![Vec::with_capacity(spec.indicators.len()); n];
    for name in &spec.indicators {
        let v = ds
            .variable_index(name)
            .ok_or_else(|| DataError::UnknownVariable(name.clone()))?;
        for (i, row) in series.iter_mut().enumerate() {
            row.push(ds.observations[v][i].clone());
        }
    }
    let mut covariates = vec![Vec::with_capacity(spec.covariates.len()); n];
    let mut ranges = BTreeMap::new();
    for (l, (name, kind)) in spec.covariates.iter().enumerate() {
        let c = ds
            .covariate_index(name)
            .ok_or_else(|| DataError::UnknownVariable(name.clone()))?;
        if ds.covariate_kinds[c] != *kind {
            return Err(DataError::CovariateKindMismatch {
                name: name.clone(),
                expected: *kind,
                found: ds.covariate_kinds[c],
            });
        }
        match kind {
            CovariateKind::Scalar => {
                let vals = &ds.scalar_values[c];
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                ranges.insert(l, (lo, hi));
                for (i, row) in covariates.iter_mut().enumerate() {
                    row.push(CovariateValue::Scalar(vals[i]));
                }
            }
            CovariateKind::Functional => {
                for (i, row) in covariates.iter_mut().enumerate() {
                    let coefs = project_series(model.basis(), &ds.functional_values[c][i]);
                    row.push(CovariateValue::Functional(coefs));
                }
            }
        }
    }
    Ok(BoundData {
        n,
        series,
        covariates,
        covariate_ranges: ranges,
    })
}

/// Penalized least-squares basis coefficients of one series.
pub fn project_series(basis: &BasisSystem, series: &Series) -> DVector<f64> {
    let j = basis.dim();
    if series.is_empty() {
        return DVector::zeros(j);
    }
    let e = basis
        .eval_matrix(&series.times, 0)
        .expect("series times inside domain")
        .values;
    let mut gram = &e * e.transpose();
    let pen = basis.gram(2).expect("penalty gram");
    let weight = 1e-6 * gram.trace().max(1e-12) / pen.trace().max(1e-12);
    gram += pen * weight;
    // Small extra ridge keeps single-point series well-posed.
    let ridge = 1e-9 * gram.trace() / j as f64;
    for i in 0..j {
        gram[(i, i)] += ridge;
    }
    let y = DVector::from_column_slice(&series.values);
    let rhs = &e * y;
    linalg::spd_solve(&gram, &rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rec(s: &str, v: &str, t: f64, x: f64) -> LongRecord {
        LongRecord {
            subject: s.into(),
            variable: v.into(),
            time: t,
            value: x,
        }
    }

    #[test]
    fn ingest_counts_subjects_and_points() {
        let records = vec![
            rec("s1", "z1", 0.1, 1.0),
            rec("s1", "z1", 0.5, 2.0),
            rec("s1", "z1", 0.9, 3.0),
            rec("s2", "z1", 0.2, -1.0),
            rec("s2", "z1", 0.4, 0.0),
            rec("s2", "z1", 0.8, 1.0),
        ];
        let ds = ingest_long_format(&records, &[], (0.0, 1.0)).unwrap();
        assert_eq!(ds.n_subjects(), 2);
        assert_eq!(ds.observations[0][0].len(), 3);
        assert_eq!(ds.observations[0][1].len(), 3);
    }

    #[test]
    fn duplicate_time_rejected() {
        let records = vec![rec("s1", "z1", 0.5, 1.0), rec("s1", "z1", 0.5, 2.0)];
        assert!(matches!(
            ingest_long_format(&records, &[], (0.0, 1.0)),
            Err(DataError::DuplicateTime { .. })
        ));
    }

    #[test]
    fn out_of_domain_time_rejected() {
        let records = vec![rec("s1", "z1", 1.4, 1.0)];
        assert!(matches!(
            ingest_long_format(&records, &[], (0.0, 1.0)),
            Err(DataError::TimeOutsideDomain { .. })
        ));
    }

    #[test]
    fn non_finite_value_rejected() {
        let records = vec![rec("s1", "z1", 0.5, f64::NAN)];
        assert!(matches!(
            ingest_long_format(&records, &[], (0.0, 1.0)),
            Err(DataError::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn round_trip_through_export() {
        let records = vec![
            rec("s1", "z1", 2008.0, 1.0),
            rec("s1", "z1", 2015.0, 2.0),
            rec("s2", "z1", 2010.0, -1.0),
        ];
        let covs = vec![
            CovariateRecord {
                subject: "s1".into(),
                name: "sex".into(),
                time: None,
                value: 1.0,
            },
            CovariateRecord {
                subject: "s2".into(),
                name: "sex".into(),
                time: None,
                value: 0.0,
            },
        ];
        let ds = ingest_long_format(&records, &covs, (2008.0, 2022.0)).unwrap();
        let (r2, c2) = export_long_format(&ds);
        let ds2 = ingest_long_format(&r2, &c2, (2008.0, 2022.0)).unwrap();
        assert_eq!(ds, ds2);
    }

    #[test]
    fn regular_design_is_shared_grid() {
        let grids = generate_sampling_design(SamplingDesign::Regular, 2, 10, 7).unwrap();
        for g in &grids {
            assert_eq!(g.len(), 10);
            for (k, &t) in g.iter().enumerate() {
                assert!((t - (k + 1) as f64 / 10.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mcar_retention_rate() {
        let p_miss = 0.12;
        let n = 20_000;
        let grids = generate_sampling_design(SamplingDesign::Mcar { p_miss }, n, 10, 11).unwrap();
        let total: usize = grids.iter().map(|g| g.len()).sum();
        let mean = total as f64 / n as f64;
        // Expected retained points per curve: 0.88 · M = 8.8.
        let se = (10.0 * p_miss * (1.0 - p_miss) / n as f64).sqrt();
        assert!(
            (mean - 8.8).abs() < 4.0 * se,
            "mean retained {mean}, expected 8.8"
        );
        assert!(matches!(
            generate_sampling_design(SamplingDesign::Mcar { p_miss: 1.5 }, 2, 10, 0),
            Err(DataError::InvalidMissingProbability(_))
        ));
    }

    #[test]
    fn irregular_counts_follow_truncated_geometric_law() {
        let m = 10;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut freq = vec![0usize; m + 1];
        for _ in 0..n {
            let g = draw_grid(SamplingDesign::Irregular, m, &mut rng);
            assert!(!g.is_empty() && g.len() <= m);
            freq[g.len()] += 1;
        }
        let a = 2f64.powi(m as i32) / (2f64.powi(m as i32) - 1.0);
        // The probability weights sum to one exactly.
        let total_p: f64 = (1..=m).map(|c| a * 0.5f64.powi((m + 1 - c) as i32)).sum();
        assert!((total_p - 1.0).abs() < 1e-12);
        for c in 1..=m {
            let p = a * 0.5f64.powi((m + 1 - c) as i32);
            let expect = p * n as f64;
            let se = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (freq[c] as f64 - expect).abs() <= 3.0 * se.max(1.0),
                "count {c}: observed {} expected {expect:.1} (se {se:.1})",
                freq[c]
            );
        }
        // Probability a/2 at M: the largest count dominates.
        assert!(freq[m] > freq[1]);
    }

    #[test]
    fn csv_round_trip() {
        let text = "subject,variable,time,value\ns1,z1,0.25,1.5\ns2,z1,0.75,-0.5\n";
        let recs = read_long_csv(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(write_long_csv(&recs), text);
        let cov_text = "subject,name,value\ns1,sex,1\n";
        let covs = read_covariate_csv(cov_text.as_bytes()).unwrap();
        assert_eq!(covs.len(), 1);
        assert!(covs[0].time.is_none());
    }

    #[test]
    fn projection_recovers_smooth_series() {
        let basis = BasisSystem::bspline(4, 8, (0.0, 1.0)).unwrap();
        let times: Vec<f64> = (0..30).map(|k| k as f64 / 29.0).collect();
        let values: Vec<f64> = times.iter().map(|&t| 1.0 + t * t).collect();
        let series = Series {
            times: times.clone(),
            values,
        };
        let coefs = project_series(&basis, &series);
        for &t in &times {
            let v = basis.eval(t, 0).unwrap().dot(&coefs);
            assert!((v - (1.0 + t * t)).abs() < 1e-3);
        }
    }
}
