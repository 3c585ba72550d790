use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{gramian_factor, ObservabilityError};
use crate::sparse::CsrMatrix;

/// Size limit `n_x · k_f` for dense rank checks.
pub const DENSE_LIMIT: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub n_x: usize,
    pub observable: bool,
}

/// Dense stack of `C A^τ` for `τ = 0..=k_f`, sensor-major.
pub fn observability_matrix(a: &CsrMatrix, sensors: &[usize], k_f: usize) -> Result<DMatrix<f64>, ObservabilityError> {
    let n = a.n_rows();
    if n * k_f.max(1) > DENSE_LIMIT {
        return Err(ObservabilityError::TooLargeForDense {
            rows: sensors.len() * (k_f + 1),
            cols: n,
        });
    }
    let mut o = DMatrix::zeros(sensors.len() * (k_f + 1), n);
    for (i, &s) in sensors.iter().enumerate() {
        for (tau, row) in gramian_factor(a, s, k_f).rows.iter().enumerate() {
            for (c, v) in row.iter() {
                o[(i * (k_f + 1) + tau, c)] = v;
            }
        }
    }
    Ok(o)
}

/// Numerical rank of the stacked observability matrix.
pub fn rank_check(a: &CsrMatrix, sensors: &[usize], k_f: usize) -> Result<RankReport, ObservabilityError> {
    let n = a.n_rows();
    let o = observability_matrix(a, sensors, k_f)?;
    let rank = if o.nrows() == 0 {
        0
    } else {
        let sv = o.singular_values();
        let max = sv.iter().cloned().fold(0.0, f64::max);
        let tol = o.nrows().max(n) as f64 * f64::EPSILON * max;
        sv.iter().filter(|s| **s > tol).count()
    };
    Ok(RankReport {
        rank,
        n_x: n,
        observable: rank == n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_sensing_identity_is_observable() {
        let a = CsrMatrix::identity(5);
        let r = rank_check(&a, &[0, 1, 2, 3, 4], 2).unwrap();
        assert_eq!(r.rank, 5);
        assert!(r.observable);
    }

    #[test]
    fn no_sensors_gives_rank_zero() {
        let a = CsrMatrix::identity(5);
        let r = rank_check(&a, &[], 2).unwrap();
        assert_eq!(r.rank, 0);
        assert!(!r.observable);
    }

    #[test]
    fn shift_register_is_observable_from_its_end() {
        // x_{i}(k+1) = x_{i-1}(k): the last state sees everything within n−1 steps
        let n = 4;
        let t: Vec<_> = (1..n).map(|i| (i, i - 1, 1.0)).collect();
        let a = CsrMatrix::from_triplets(n, n, t);
        assert!(rank_check(&a, &[n - 1], n - 1).unwrap().observable);
        assert!(!rank_check(&a, &[0], n - 1).unwrap().observable);
    }

    #[test]
    fn guard_rejects_large_systems() {
        let a = CsrMatrix::identity(2000);
        assert!(matches!(rank_check(&a, &[0], 3), Err(ObservabilityError::TooLargeForDense { .. })));
    }
}
