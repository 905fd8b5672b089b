//! Small dense kernels shared by the tape and the prior: Cholesky
//! factorization and triangular solves on row-major buffers.

use crate::error::{Error, Result};

/// Lower Cholesky factor of a symmetric positive definite `n x n` matrix.
/// Only the lower triangle of `a` is read.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Cholesky { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

/// Solve `op(T) X = B` in place, where `T` is `n x n` triangular (lower when
/// `upper` is false) and `op` optionally transposes. `b` is `n x m`.
pub fn tri_solve(
    t: &[f64],
    n: usize,
    upper: bool,
    transpose: bool,
    b: &mut [f64],
    m: usize,
) -> Result<()> {
    let at = |i: usize, j: usize| if transpose { t[j * n + i] } else { t[i * n + j] };
    let forward = upper == transpose;
    let mut row = vec![0.0; m];
    let order: Box<dyn Iterator<Item = usize>> = if forward {
        Box::new(0..n)
    } else {
        Box::new((0..n).rev())
    };
    for i in order {
        let pivot = at(i, i);
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(Error::Domain {
                op: "solve_triangular",
                detail: format!("singular pivot at {i}"),
            });
        }
        row.copy_from_slice(&b[i * m..(i + 1) * m]);
        let others: Box<dyn Iterator<Item = usize>> = if forward {
            Box::new(0..i)
        } else {
            Box::new((i + 1)..n)
        };
        for j in others {
            let c = at(i, j);
            if c != 0.0 {
                let xj = &b[j * m..(j + 1) * m];
                for (r, x) in row.iter_mut().zip(xj) {
                    *r -= c * x;
                }
            }
        }
        for (dst, r) in b[i * m..(i + 1) * m].iter_mut().zip(&row) {
            *dst = r / pivot;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_of_known_matrix() {
        // [[4, 2], [2, 5]] = L L^T with L = [[2, 0], [1, 2]]
        let l = cholesky(&[4.0, 2.0, 2.0, 5.0], 2).unwrap();
        assert_eq!(l, vec![2.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        assert!(matches!(
            cholesky(&[1.0, 2.0, 2.0, 1.0], 2),
            Err(Error::Cholesky { pivot: 1, .. })
        ));
    }

    #[test]
    fn all_four_solve_variants() {
        let lower = [2.0, 0.0, 1.0, 3.0];
        let upper = [2.0, 1.0, 0.0, 3.0];
        let rhs = [4.0, 7.0];
        for (t, up) in [(&lower, false), (&upper, true)] {
            for tr in [false, true] {
                let mut x = rhs;
                tri_solve(t, 2, up, tr, &mut x, 1).unwrap();
                // check op(T) x == rhs
                let get = |i: usize, j: usize| if tr { t[j * 2 + i] } else { t[i * 2 + j] };
                for i in 0..2 {
                    let lhs = get(i, 0) * x[0] + get(i, 1) * x[1];
                    assert!((lhs - rhs[i]).abs() < 1e-14);
                }
            }
        }
    }
}
