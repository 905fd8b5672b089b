use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;
pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-3;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(values, vectors)` with eigenvalues sorted in descending order
/// and the matching eigenvectors as columns. Sweeps stop once the
/// off-diagonal Frobenius norm drops below `1e-12 * max(1, ||M||_F)`.
pub fn jacobi_eigen(m: &Array) -> Result<(Vec<f64>, Array)> {
    if !m.is_matrix() || m.rows() != m.cols() {
        return Err(Error::invalid(format!("eigen needs a square matrix, got {:?}", m.shape())));
    }
    m.ensure_finite("eigen input")?;
    let n = m.rows();
    let mut a = m.data().to_vec();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = s;
            a[j * n + i] = s;
        }
    }
    let mut v = Array::eye(n).into_data();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let tol = 1e-12 * scale;
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off(&a) >= tol {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (kp, kq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * kp - s * kq;
                    a[k * n + q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * pk - s * qk;
                    a[q * n + k] = s * pk + c * qk;
                }
                for k in 0..n {
                    let (kp, kq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * kp - s * kq;
                    v[k * n + q] = s * kp + c * kq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Array::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors.set(row, col, v[row * n + src]);
        }
    }
    Ok((values, vectors))
}

/// Number of eigenvalues at or above `relative_threshold * max`.
pub fn estimated_rank(values: &[f64], relative_threshold: f64) -> usize {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    values.iter().filter(|&&l| l >= relative_threshold * max).count()
}

/// Spectrum of `A A^T` with the rank read off at a relative threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    pub values: Vec<f64>,
    pub vectors: Array,
    pub rank: usize,
    pub threshold: f64,
}

#[derive(Serialize)]
struct Sidecar {
    dim: usize,
    rank: usize,
    threshold: f64,
    lambda_max: f64,
    gap_ratio: f64,
}

impl EigenReport {
    pub fn from_symmetric(m: &Array, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::invalid(format!(
                "rank threshold must lie in (0, 1), got {threshold}"
            )));
        }
        let (values, vectors) = jacobi_eigen(m)?;
        let rank = estimated_rank(&values, threshold);
        Ok(Self {
            values,
            vectors,
            rank,
            threshold,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn rank_at(&self, threshold: f64) -> usize {
        estimated_rank(&self.values, threshold)
    }

    /// Copy of the report re-thresholded.
    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::invalid(format!(
                "rank threshold must lie in (0, 1), got {threshold}"
            )));
        }
        Ok(Self {
            rank: self.rank_at(threshold),
            threshold,
            ..self.clone()
        })
    }

    /// `D x K` matrix of the leading eigenvectors.
    pub fn principal_subspace(&self, k: usize) -> Result<Array> {
        let d = self.dim();
        if k == 0 || k > d {
            return Err(Error::invalid(format!("subspace size {k} outside [1, {d}]")));
        }
        let idx: Vec<usize> = (0..k).collect();
        Ok(self.vectors.gather_cols(&idx))
    }

    /// `lambda_K / lambda_{K+1}` at the estimated rank `K`; infinite when the
    /// next eigenvalue is not positive and `1` when there is no gap to report
    /// (`K = 0` or `K = D`).
    pub fn gap_ratio(&self) -> f64 {
        let k = self.rank;
        if k == 0 || k >= self.dim() {
            return 1.0;
        }
        let next = self.values[k];
        if next <= 0.0 {
            f64::INFINITY
        } else {
            self.values[k - 1] / next
        }
    }

    /// One `index,value` row per eigenvalue.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "value"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([i.to_string(), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let side = Sidecar {
            dim: self.dim(),
            rank: self.rank,
            threshold: self.threshold,
            lambda_max: self.values.first().copied().unwrap_or(0.0),
            gap_ratio: self.gap_ratio(),
        };
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &side)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let head: Vec<String> = self
            .values
            .iter()
            .take(8)
            .map(|v| format!("{v:.3e}"))
            .collect();
        format!(
            "estimated intrinsic dimension {} of {} (threshold {:e} x lambda_max, gap ratio {:.3e})\nleading eigenvalues: {}",
            self.rank,
            self.dim(),
            self.threshold,
            self.gap_ratio(),
            head.join(", ")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_spectrum() {
        let r = EigenReport::from_symmetric(&Array::eye(2), 1e-3).unwrap();
        assert_eq!(r.values, vec![1.0, 1.0]);
        assert_eq!(r.rank, 2);
    }

    #[test]
    fn diagonal_rank_one() {
        let m = Array::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = EigenReport::from_symmetric(&m, 0.5).unwrap();
        assert_eq!(r.values, vec![1.0, 0.0]);
        for thr in [1e-9, 1e-3, 0.5, 0.999] {
            assert_eq!(r.rank_at(thr), 1);
        }
        assert_eq!(r.vectors.get(1, 0).abs(), 1.0);
        assert!(r.gap_ratio().is_infinite());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(estimated_rank(&[1.0, 1e-9], 1e-3), 1);
        assert_eq!(estimated_rank(&[2.0; 5], 1e-3), 5);
        assert_eq!(estimated_rank(&[0.0, 0.0], 1e-3), 0);
    }

    #[test]
    fn subspace_bounds() {
        let r = EigenReport::from_symmetric(&Array::eye(3), 1e-3).unwrap();
        assert!(r.principal_subspace(0).is_err());
        assert!(r.principal_subspace(4).is_err());
        assert_eq!(r.principal_subspace(2).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn bad_threshold_rejected() {
        assert!(EigenReport::from_symmetric(&Array::eye(2), 0.0).is_err());
        assert!(EigenReport::from_symmetric(&Array::eye(2), 1.0).is_err());
    }

    #[test]
    fn non_square_rejected() {
        assert!(jacobi_eigen(&Array::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn csv_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array::from_rows(&[vec![2.0, 0.0], vec![0.0, 1e-6]]).unwrap();
        let r = EigenReport::from_symmetric(&m, 1e-3).unwrap();
        r.write_csv(&dir.path().join("e.csv")).unwrap();
        r.write_sidecar(&dir.path().join("e.json")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("index,value\n0,2e0\n"));
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("e.json")).unwrap())
                .unwrap();
        assert_eq!(side["rank"], 1);
    }
}
