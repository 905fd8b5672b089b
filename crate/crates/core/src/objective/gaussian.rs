//! Closed-form Gaussian quantities used as test oracles.

use std::f64::consts::{E, PI};

use crate::diffcore::linalg::{cholesky, tri_solve};
use crate::diffcore::Array;
use crate::error::{Error, Result};

fn square(op: &str, m: &Array) -> Result<usize> {
    if !m.is_matrix() || m.rows() != m.cols() {
        return Err(Error::invalid(format!("{op} needs a square matrix, got {:?}", m.shape())));
    }
    Ok(m.rows())
}

/// `(L, log det)` for a symmetric positive definite matrix.
fn factor(op: &str, m: &Array) -> Result<(Vec<f64>, f64)> {
    let n = square(op, m)?;
    let l = cholesky(m.data(), n)
        .map_err(|e| Error::invalid(format!("{op}: matrix is not positive definite ({e})")))?;
    let logdet = 2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>();
    Ok((l, logdet))
}

/// `tr(P^{-1} Q)` through the Cholesky factor of `P`.
fn trace_solve(l: &[f64], n: usize, q: &Array) -> Result<f64> {
    let mut x = q.data().to_vec();
    tri_solve(l, n, false, false, &mut x, n)?;
    tri_solve(l, n, false, true, &mut x, n)?;
    Ok((0..n).map(|i| x[i * n + i]).sum())
}

/// `H = 1/2 log((2 pi e)^D det S)`
pub fn gaussian_entropy(cov: &Array) -> Result<f64> {
    let (_, logdet) = factor("gaussian entropy", cov)?;
    let d = cov.rows() as f64;
    Ok(0.5 * (d * (2.0 * PI * E).ln() + logdet))
}

/// `KL(N(0, Q) || N(0, P))`
pub fn gaussian_kl(cov_q: &Array, cov_p: &Array) -> Result<f64> {
    let n = square("gaussian kl", cov_q)?;
    if cov_p.shape() != cov_q.shape() {
        return Err(Error::Shape {
            op: "gaussian-kl",
            lhs: cov_q.shape().to_vec(),
            rhs: cov_p.shape().to_vec(),
        });
    }
    let (_, logdet_q) = factor("gaussian kl", cov_q)?;
    let (lp, logdet_p) = factor("gaussian kl", cov_p)?;
    let tr = trace_solve(&lp, n, cov_q)?;
    Ok(0.5 * (tr - n as f64 + logdet_p - logdet_q))
}

/// `E_{N(0, Q)}[-log N(x; 0, P)]`
pub fn gaussian_cross_entropy(cov_q: &Array, cov_p: &Array) -> Result<f64> {
    let n = square("gaussian cross-entropy", cov_q)?;
    if cov_p.shape() != cov_q.shape() {
        return Err(Error::Shape {
            op: "gaussian-cross-entropy",
            lhs: cov_q.shape().to_vec(),
            rhs: cov_p.shape().to_vec(),
        });
    }
    let (lp, logdet_p) = factor("gaussian cross-entropy", cov_p)?;
    let tr = trace_solve(&lp, n, cov_q)?;
    Ok(0.5 * (n as f64 * (2.0 * PI).ln() + logdet_p + tr))
}

/// `I(Z + K; K)` for scalar `Z ~ N(0, var_z)` and independent `K ~ N(0, var_k)`.
pub fn gaussian_mutual_info(var_z: f64, var_k: f64) -> Result<f64> {
    if !(var_z > 0.0) || !(var_k >= 0.0) {
        return Err(Error::invalid(format!(
            "mutual information needs var_z > 0 and var_k >= 0, got {var_z}, {var_k}"
        )));
    }
    Ok(0.5 * ((var_z + var_k) / var_z).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> Array {
        let mut a = Array::zeros(&[v.len(), v.len()]);
        for (i, &x) in v.iter().enumerate() {
            a.set(i, i, x);
        }
        a
    }

    #[test]
    fn entropy_of_paper_covariances() {
        let h1 = gaussian_entropy(&diag(&[3.0, 1.5])).unwrap();
        let h2 = gaussian_entropy(&diag(&[4.0, 4.0 / 3.0])).unwrap();
        // 1/2 (2 ln(2 pi e) + ln det), evaluated independently
        assert!((h1 - 3.5899157647974826).abs() < 1e-12, "{h1}");
        assert!((h2 - 3.674865283195181).abs() < 1e-12, "{h2}");
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let s = Array::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
        assert!(gaussian_kl(&s, &s).unwrap().abs() < 1e-14);
    }

    #[test]
    fn one_dimensional_kl() {
        // KL(N(0,1) || N(0,4)) = 1/2 (1/4 - 1 + ln 4)
        let kl = gaussian_kl(&Array::scalar(1.0), &Array::scalar(4.0)).unwrap();
        assert!((kl - 0.5 * (0.25 - 1.0 + 4f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn mutual_information_values() {
        assert!((gaussian_mutual_info(1.0, 1.0).unwrap() - 0.346574).abs() < 1e-6);
        assert!((gaussian_mutual_info(1.0, 0.25).unwrap() - 0.111572).abs() < 1e-6);
        assert_eq!(gaussian_mutual_info(1.0, 0.0).unwrap(), 0.0);
        assert!(gaussian_mutual_info(0.0, 1.0).is_err());
    }

    #[test]
    fn singular_entropy_rejected() {
        assert!(gaussian_entropy(&diag(&[1.0, 0.0])).is_err());
    }
}
