//! Observability Gramian and log-det estimation metrics.
//!
//! A sensor at state `e` contributes the rows `eᵀ, eᵀA, …, eᵀA^{k_f}` to the
//! stacked observability matrix `R`. The Gramian is `W = RᵀR`, which is
//! `n_x × n_x` and never formed. Instead the metrics use
//! `det(I_n + RᵀR) = det(I_m + RRᵀ)` with `m = (k_f+1)·|S|`, and `RRᵀ` is
//! built block by block from sparse row dot products.
//!
//! Two metrics are provided. The Kalman-degenerate one is
//! `f(S) = −log det(I + W)`. The general one is the log-determinant of the
//! batch posterior covariance of `z = (x0, w(0), …, w(k_f−1))`:
//!
//! ```text
//! log det Σ_z = Σ log Λ_ii − log det(I + σ⁻² O Λ Oᵀ)
//! ```
//!
//! where row `(e, k)` of `O` is `eᵀA^k` on the `x0` block and
//! `eᵀA^{k−1−j}` on each `w(j)` block with `j < k`. Its Gram blocks follow
//! from the same power-row dot products, so both metrics share one factor
//! per sensor.

mod rank;

pub use rank::{observability_matrix, rank_check, RankReport};

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::{Accumulator, CsrMatrix, SparseVec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservabilityError {
    #[error("log-determinant is not finite after Cholesky and LU")]
    NonFiniteLogDet,
    #[error("dense observability matrix would have {rows} × {cols} entries")]
    TooLargeForDense { rows: usize, cols: usize },
    #[error("invalid metric parameters: {0}")]
    InvalidParameters(String),
}

/// `eᵀA^τ` for `τ = 0..=k_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFactor {
    pub state: usize,
    pub rows: Vec<SparseVec>,
}

impl SensorFactor {
    pub fn k_f(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(SparseVec::nnz).sum()
    }
}

/// Per-sensor factor rows by repeated sparse row-vector × matrix products.
pub fn gramian_factor(a: &CsrMatrix, state: usize, k_f: usize) -> SensorFactor {
    let mut scratch = Accumulator::new(a.n_cols());
    let mut rows = Vec::with_capacity(k_f + 1);
    rows.push(SparseVec::unit(a.n_rows(), state));
    for _ in 0..k_f {
        let next = a.left_mul_sparse(rows.last().expect("non-empty"), &mut scratch);
        rows.push(next);
    }
    SensorFactor { state, rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum MetricVariant {
    /// `−log det(I + W(k_f))`.
    #[default]
    KfDegenerate,
    /// `log det Σ_z` with sensor noise `sigma`, prior variance of `x0`
    /// and process-noise variance.
    General {
        sigma: f64,
        prior_variance: f64,
        process_variance: f64,
    },
}

impl MetricVariant {
    pub fn validate(&self) -> Result<(), ObservabilityError> {
        if let MetricVariant::General {
            sigma,
            prior_variance,
            process_variance,
        } = *self
        {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(ObservabilityError::InvalidParameters(format!("sigma {sigma} must be positive")));
            }
            if !(prior_variance > 0.0 && prior_variance.is_finite()) {
                return Err(ObservabilityError::InvalidParameters(format!(
                    "prior variance {prior_variance} must be positive"
                )));
            }
            if !(process_variance >= 0.0 && process_variance.is_finite()) {
                return Err(ObservabilityError::InvalidParameters(format!(
                    "process variance {process_variance} must be non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Metric of the empty sensor set: `0`, or `Σ log Λ_ii` for the general
    /// variant.
    pub fn empty_value(&self, n_x: usize, k_f: usize) -> f64 {
        match *self {
            MetricVariant::KfDegenerate => 0.0,
            MetricVariant::General {
                prior_variance,
                process_variance,
                ..
            } => {
                let mut v = n_x as f64 * prior_variance.ln();
                if process_variance > 0.0 {
                    v += (k_f * n_x) as f64 * process_variance.ln();
                }
                v
            }
        }
    }
}

/// Row-by-row dot products `p_a[τ] · p_b[τ']`.
pub fn power_gram(a: &SensorFactor, b: &SensorFactor) -> DMatrix<f64> {
    let (n, m) = (a.rows.len(), b.rows.len());
    let symmetric = std::ptr::eq(a, b);
    let mut g = DMatrix::zeros(n, m);
    for i in 0..n {
        let start = if symmetric { i } else { 0 };
        for j in start..m {
            let v = a.rows[i].dot(&b.rows[j]);
            g[(i, j)] = v;
            if symmetric {
                g[(j, i)] = v;
            }
        }
    }
    g
}

/// Block of the metric's `m × m` Gram matrix for sensors `a` and `b`, from
/// their power Gram.
pub fn metric_block(g: &DMatrix<f64>, variant: &MetricVariant) -> DMatrix<f64> {
    match *variant {
        MetricVariant::KfDegenerate => g.clone(),
        MetricVariant::General {
            sigma,
            prior_variance,
            process_variance,
        } => {
            let s2 = sigma * sigma;
            let mut out = g * (prior_variance / s2);
            if process_variance > 0.0 {
                // d[k][k'] = Σ_{j < min(k,k')} g[k−1−j][k'−1−j]
                let (n, m) = g.shape();
                let mut d = DMatrix::<f64>::zeros(n, m);
                for k in 1..n {
                    for l in 1..m {
                        d[(k, l)] = g[(k - 1, l - 1)] + d[(k - 1, l - 1)];
                    }
                }
                out += d * (process_variance / s2);
            }
            out
        }
    }
}

/// `I + R Rᵀ` (or its general-variant analogue) for the given sensors.
pub fn gram_matrix(factors: &[&SensorFactor], variant: &MetricVariant) -> DMatrix<f64> {
    let sizes: Vec<usize> = factors.iter().map(|f| f.rows.len()).collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let m: usize = sizes.iter().sum();
    let mut out = DMatrix::identity(m, m);
    for (i, a) in factors.iter().enumerate() {
        for (j, b) in factors.iter().enumerate().skip(i) {
            let g = if i == j { power_gram(a, a) } else { power_gram(a, b) };
            let block = metric_block(&g, variant);
            let mut view = out.view_mut((offsets[i], offsets[j]), (sizes[i], sizes[j]));
            view += &block;
            if i != j {
                let mut view = out.view_mut((offsets[j], offsets[i]), (sizes[j], sizes[i]));
                view += block.transpose();
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogDetMethod {
    Cholesky,
    /// LU with `1e-12` added to the diagonal after Cholesky failed.
    LuJitter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogDet {
    pub value: f64,
    pub method: LogDetMethod,
}

pub const LU_JITTER: f64 = 1e-12;

/// Log-determinant of a symmetric positive definite matrix.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<LogDet, ObservabilityError> {
    if m.nrows() == 0 {
        return Ok(LogDet {
            value: 0.0,
            method: LogDetMethod::Cholesky,
        });
    }
    if let Some(chol) = m.clone().cholesky() {
        let value = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if value.is_finite() {
            return Ok(LogDet {
                value,
                method: LogDetMethod::Cholesky,
            });
        }
    }
    let mut jittered = m.clone();
    for i in 0..jittered.nrows() {
        jittered[(i, i)] += LU_JITTER;
    }
    let lu = jittered.lu();
    let value: f64 = lu.u().diagonal().iter().map(|d| d.abs().ln()).sum();
    if value.is_finite() {
        Ok(LogDet {
            value,
            method: LogDetMethod::LuJitter,
        })
    } else {
        Err(ObservabilityError::NonFiniteLogDet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub variant: MetricVariant,
    pub method: LogDetMethod,
}

/// Metric of a sensor set from its factors. `n_x` is needed for the prior
/// term of the general variant.
pub fn metric(factors: &[&SensorFactor], variant: &MetricVariant, n_x: usize, k_f: usize) -> Result<MetricValue, ObservabilityError> {
    variant.validate()?;
    let ld = log_det_spd(&gram_matrix(factors, variant))?;
    Ok(MetricValue {
        value: variant.empty_value(n_x, k_f) - ld.value,
        variant: *variant,
        method: ld.method,
    })
}

/// `−log det(I + W(k_f))`.
pub fn metric_kf_degenerate(factors: &[&SensorFactor]) -> Result<MetricValue, ObservabilityError> {
    metric(factors, &MetricVariant::KfDegenerate, 0, 0)
}

/// `log det Σ_z` for sensor noise `sigma`, `x0` prior variance and process
/// variance.
pub fn metric_general(
    factors: &[&SensorFactor],
    sigma: f64,
    prior_variance: f64,
    process_variance: f64,
    n_x: usize,
    k_f: usize,
) -> Result<MetricValue, ObservabilityError> {
    metric(
        factors,
        &MetricVariant::General {
            sigma,
            prior_variance,
            process_variance,
        },
        n_x,
        k_f,
    )
}

/// Factors keyed by `(A content hash, state, k_f)`, shared across greedy
/// iterations and threads.
#[derive(Debug, Default)]
pub struct FactorCache {
    map: RwLock<HashMap<(u64, usize, usize), Arc<SensorFactor>>>,
}

impl FactorCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_compute(&self, a: &CsrMatrix, a_hash: u64, state: usize, k_f: usize) -> Arc<SensorFactor> {
        let key = (a_hash, state, k_f);
        if let Some(f) = self.map.read().expect("cache lock").get(&key) {
            return f.clone();
        }
        let f = Arc::new(gramian_factor(a, state, k_f));
        self.map.write().expect("cache lock").insert(key, f.clone());
        f
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.map.write().expect("cache lock").clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(n: usize, rng: &mut ChaCha8Rng) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, rng.random_range(0.3..0.9)));
            for _ in 0..2 {
                t.push((i, rng.random_range(0..n), rng.random_range(-0.4..0.4)));
            }
        }
        CsrMatrix::from_triplets(n, n, t)
    }

    fn dense_gramian(a: &DMatrix<f64>, states: &[usize], k_f: usize) -> DMatrix<f64> {
        let n = a.nrows();
        let mut w = DMatrix::zeros(n, n);
        let mut p = DMatrix::<f64>::identity(n, n);
        for _ in 0..=k_f {
            for &s in states {
                let row = p.row(s).clone_owned();
                w += row.transpose() * row;
            }
            p = &p * a;
        }
        w
    }

    #[test]
    fn identity_factor_rows_are_units() {
        let f = gramian_factor(&CsrMatrix::identity(4), 2, 2);
        assert_eq!(f.rows.len(), 3);
        assert!(f.rows.iter().all(|r| *r == SparseVec::unit(4, 2)));
    }

    #[test]
    fn scalar_powers() {
        let a = CsrMatrix::from_triplets(1, 1, vec![(0, 0, 0.5)]);
        let f = gramian_factor(&a, 0, 2);
        let v: Vec<f64> = f.rows.iter().map(|r| r.to_dense()[0]).collect();
        assert_eq!(v, [1.0, 0.5, 0.25]);
    }

    #[test]
    fn factor_matches_dense_gramian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_sparse(10, &mut rng);
        let f = gramian_factor(&a, 4, 5);
        let mut w = DMatrix::zeros(10, 10);
        for r in &f.rows {
            let d = DMatrix::from_row_slice(1, 10, &r.to_dense());
            w += d.transpose() * d;
        }
        let reference = dense_gramian(&a.to_dense(), &[4], 5);
        assert!((w - &reference).norm() <= 1e-10 * reference.norm());
    }

    #[test]
    fn empty_set_and_scalar_metric() {
        assert_eq!(metric_kf_degenerate(&[]).unwrap().value, 0.0);
        let a = CsrMatrix::identity(1);
        let f = gramian_factor(&a, 0, 1);
        assert_relative_eq!(metric_kf_degenerate(&[&f]).unwrap().value, -(3.0f64).ln(), epsilon = 1e-14);
    }

    #[test]
    fn degenerate_metric_matches_dense_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_sparse(12, &mut rng);
        let fs: Vec<SensorFactor> = [1, 5, 9].iter().map(|&s| gramian_factor(&a, s, 4)).collect();
        let refs: Vec<&SensorFactor> = fs.iter().collect();
        let w = dense_gramian(&a.to_dense(), &[1, 5, 9], 4);
        let expected = -(DMatrix::identity(12, 12) + w).determinant().ln();
        assert_relative_eq!(metric_kf_degenerate(&refs).unwrap().value, expected, max_relative = 1e-10);
    }

    #[test]
    fn general_metric_reduces_to_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_sparse(8, &mut rng);
        let fs: Vec<SensorFactor> = [0, 3].iter().map(|&s| gramian_factor(&a, s, 3)).collect();
        let refs: Vec<&SensorFactor> = fs.iter().collect();
        let g = metric_general(&refs, 1.0, 1.0, 0.0, 8, 3).unwrap().value;
        let d = metric_kf_degenerate(&refs).unwrap().value;
        assert_relative_eq!(g, d, epsilon = 1e-12);
        let empty = metric_general(&[], 0.1, 5e-3, 0.0, 8, 3).unwrap().value;
        assert_relative_eq!(empty, 8.0 * (5e-3f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn general_metric_with_process_noise_matches_dense() {
        // two states, k_f = 1: z = (x0, w0), y(0) = C x0, y(1) = C(A x0 + w0)
        let a = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 0.7), (0, 1, 0.2), (1, 0, -0.1), (1, 1, 0.9)]);
        let ad = a.to_dense();
        let (sigma, lx, lw) = (0.3, 0.5, 0.2);
        let f = gramian_factor(&a, 1, 1);
        let got = metric_general(&[&f], sigma, lx, lw, 2, 1).unwrap().value;
        let mut o = DMatrix::zeros(2, 4);
        o[(0, 1)] = 1.0;
        o.view_mut((1, 0), (1, 2)).copy_from(&ad.row(1));
        o[(1, 3)] = 1.0;
        let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![lx, lx, lw, lw]));
        let info = lambda.clone().try_inverse().unwrap() + o.transpose() * &o / (sigma * sigma);
        let expected = -info.determinant().ln();
        assert_relative_eq!(got, expected, max_relative = 1e-10);
    }

    #[test]
    fn lu_fallback_handles_semidefinite_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let ld = log_det_spd(&m).unwrap();
        assert_eq!(ld.method, LogDetMethod::LuJitter);
        assert!(ld.value < -20.0);
        let bad = DMatrix::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, 1.0]);
        assert_eq!(log_det_spd(&bad), Err(ObservabilityError::NonFiniteLogDet));
    }

    #[test]
    fn cache_returns_shared_factor() {
        let a = CsrMatrix::identity(3);
        let cache = FactorCache::new();
        let h = a.content_hash();
        let f1 = cache.get_or_compute(&a, h, 1, 2);
        let f2 = cache.get_or_compute(&a, h, 1, 2);
        assert!(Arc::ptr_eq(&f1, &f2));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn superset_never_increases_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_sparse(9, &mut rng);
        let fs: Vec<SensorFactor> = (0..9).map(|s| gramian_factor(&a, s, 3)).collect();
        let small = metric_kf_degenerate(&[&fs[0], &fs[4]]).unwrap().value;
        let big = metric_kf_degenerate(&[&fs[0], &fs[4], &fs[7]]).unwrap().value;
        assert!(big <= small);
    }
}
