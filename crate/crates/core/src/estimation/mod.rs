//! Kalman filtering and batch MMSE estimation for validating placements.
//!
//! The filter keeps a dense covariance, so it is meant for networks with at
//! most [`DENSE_STATE_LIMIT`] states; larger networks are filtered on a
//! coarser segmentation (see [`reduced_policy`]).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::WqSystem;
use crate::hydraulics::SegmentPolicy;
use crate::observability::gramian_factor;
use crate::sparse::CsrMatrix;

/// Largest state dimension filtered with a dense covariance.
pub const DENSE_STATE_LIMIT: usize = 2000;
/// Largest `n_z` for the dense batch estimator.
pub const DENSE_BATCH_LIMIT: usize = 5000;

/// Segment policy for the reduced validation model.
pub fn reduced_policy() -> SegmentPolicy {
    SegmentPolicy::Fixed { segments: 10, dt: None }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("step {step}: innovation covariance is singular")]
    SingularInnovation { step: usize },
    #[error("dense estimation needs {n} states, limit is {limit}")]
    TooLargeForDense { n: usize, limit: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanConfig {
    pub process_std: f64,
    pub sensor_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    /// RMSE of the estimate against the truth after each update.
    pub rmse: Vec<f64>,
    /// Mean absolute innovation per step (empty sensor set gives 0).
    pub innovation: Vec<f64>,
    /// Trace of the posterior covariance per step.
    pub covariance_trace: Vec<f64>,
}

impl EstimationReport {
    pub fn mean_rmse(&self) -> f64 {
        self.rmse.iter().sum::<f64>() / self.rmse.len().max(1) as f64
    }
}

/// `y(k) = C x(k) + v(k)` for every recorded state, drawn from one seeded
/// stream.
pub fn measure(truth: &[Vec<f64>], sensors: &[usize], sensor_std: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (sensor_std > 0.0).then(|| Normal::new(0.0, sensor_std).expect("finite std"));
    truth
        .iter()
        .map(|x| {
            sensors
                .iter()
                .map(|&s| x[s] + noise.as_ref().map_or(0.0, |n| n.sample(&mut rng)))
                .collect()
        })
        .collect()
}

fn rmse(a: &DVector<f64>, b: &[f64]) -> f64 {
    let n = b.len().max(1) as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

/// `A P Aᵀ` with sparse `A` and symmetric `P`.
fn propagate(a: &CsrMatrix, p: &DMatrix<f64>) -> DMatrix<f64> {
    let ap = a.mul_dense(p);
    a.mul_dense(&ap.transpose())
}

/// Time-varying Kalman filter. `transitions[k]` maps step `k` to `k+1`, so
/// `truth` and `measurements` have one more entry than `transitions`. The
/// first measurement updates the prior `(x̂0, P0)` directly.
pub fn kf_run(
    transitions: &[&WqSystem],
    sensors: &[usize],
    truth: &[Vec<f64>],
    measurements: &[Vec<f64>],
    x_hat0: &[f64],
    p0: &DMatrix<f64>,
    config: &KalmanConfig,
) -> Result<EstimationReport, EstimationError> {
    let n = x_hat0.len();
    if n > DENSE_STATE_LIMIT {
        return Err(EstimationError::TooLargeForDense {
            n,
            limit: DENSE_STATE_LIMIT,
        });
    }
    for (expected, found) in [
        (transitions.len() + 1, truth.len()),
        (truth.len(), measurements.len()),
        (n, p0.nrows()),
    ] {
        if expected != found {
            return Err(EstimationError::DimensionMismatch { expected, found });
        }
    }
    let q = config.process_std * config.process_std;
    let r = config.sensor_std * config.sensor_std;
    let mut x = DVector::from_column_slice(x_hat0);
    let mut p = p0.clone();
    let mut report = EstimationReport {
        rmse: Vec::with_capacity(truth.len()),
        innovation: Vec::with_capacity(truth.len()),
        covariance_trace: Vec::with_capacity(truth.len()),
    };
    for k in 0..truth.len() {
        if k > 0 {
            let sys = transitions[k - 1];
            x = DVector::from_vec(sys.a.mul_vec(x.as_slice()));
            p = propagate(&sys.a, &p);
            for i in 0..n {
                p[(i, i)] += q;
            }
        }
        let m = sensors.len();
        let mut innovation = 0.0;
        if m > 0 {
            let y = &measurements[k];
            let pct = p.select_columns(sensors);
            let mut s = pct.select_rows(sensors);
            for i in 0..m {
                s[(i, i)] += r;
            }
            let s_inv = s
                .clone()
                .cholesky()
                .map(|c| c.inverse())
                .or_else(|| s.try_inverse())
                .ok_or(EstimationError::SingularInnovation { step: k })?;
            let gain = &pct * s_inv;
            let resid = DVector::from_iterator(m, sensors.iter().zip(y).map(|(&i, y)| y - x[i]));
            innovation = resid.iter().map(|v| v.abs()).sum::<f64>() / m as f64;
            x += &gain * &resid;
            p -= &gain * pct.transpose();
            p = (&p + p.transpose()) * 0.5;
        }
        report.rmse.push(rmse(&x, &truth[k]));
        report.innovation.push(innovation);
        report.covariance_trace.push(p.trace());
    }
    Ok(report)
}

/// Dense `O` over `z = (x0, w(0), …, w(k_f−1))` for measurements at
/// `k = 0..=k_f`, rows ordered by time then sensor. Without process noise
/// only the `x0` block is kept.
pub fn augmented_observability(a: &CsrMatrix, sensors: &[usize], k_f: usize, with_process: bool) -> Result<DMatrix<f64>, EstimationError> {
    let n = a.n_rows();
    let n_z = if with_process { n * (k_f + 1) } else { n };
    if n_z > DENSE_BATCH_LIMIT {
        return Err(EstimationError::TooLargeForDense {
            n: n_z,
            limit: DENSE_BATCH_LIMIT,
        });
    }
    let m = sensors.len();
    let mut o = DMatrix::zeros(m * (k_f + 1), n_z);
    for (i, &s) in sensors.iter().enumerate() {
        let powers = gramian_factor(a, s, k_f).rows;
        for k in 0..=k_f {
            let row = k * m + i;
            for (c, v) in powers[k].iter() {
                o[(row, c)] = v;
            }
            if with_process {
                for j in 0..k {
                    for (c, v) in powers[k - 1 - j].iter() {
                        o[(row, n * (1 + j) + c)] = v;
                    }
                }
            }
        }
    }
    Ok(o)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEstimate {
    pub z: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl BatchEstimate {
    pub fn log_det(&self) -> f64 {
        match self.covariance.clone().cholesky() {
            Some(c) => 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
            None => self.covariance.determinant().ln(),
        }
    }
}

/// Posterior mean and covariance of `z` given `ȳ = O z + v`, zero-mean prior
/// with diagonal covariance `Λ` and noise variance `σ²`.
pub fn batch_mmse(o: &DMatrix<f64>, y: &DVector<f64>, sigma: f64, lambda: &DVector<f64>) -> Result<BatchEstimate, EstimationError> {
    let n_z = o.ncols();
    if n_z > DENSE_BATCH_LIMIT {
        return Err(EstimationError::TooLargeForDense {
            n: n_z,
            limit: DENSE_BATCH_LIMIT,
        });
    }
    if lambda.len() != n_z {
        return Err(EstimationError::DimensionMismatch {
            expected: n_z,
            found: lambda.len(),
        });
    }
    if y.len() != o.nrows() {
        return Err(EstimationError::DimensionMismatch {
            expected: o.nrows(),
            found: y.len(),
        });
    }
    let prior = DMatrix::from_diagonal(lambda);
    if o.nrows() == 0 {
        return Ok(BatchEstimate {
            z: DVector::zeros(n_z),
            covariance: prior,
        });
    }
    // covariance form, valid for σ = 0 when O Λ Oᵀ is nonsingular
    let lo = &prior * o.transpose();
    let mut s = o * &lo;
    for i in 0..s.nrows() {
        s[(i, i)] += sigma * sigma;
    }
    let s_inv = s
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| s.try_inverse())
        .ok_or(EstimationError::SingularInnovation { step: 0 })?;
    let gain = &lo * s_inv;
    let z = &gain * y;
    let mut covariance = &prior - &gain * lo.transpose();
    covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(BatchEstimate { z, covariance })
}
