//! The learnable degenerate Gaussian prior `N(0, A A^T)` and its noisy
//! companion `N(0, A A^T + sigma_z^2 I)`.

mod eigen;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use eigen::{estimated_rank, jacobi_eigen, EigenReport, DEFAULT_RANK_THRESHOLD, MAX_SWEEPS};

use crate::diffcore::{Array, Axis, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_Z: f64 = 1e-4;

/// Lower-triangular factor `A` and fixed spread noise `sigma_z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPrior {
    a: Array,
    sigma_z: f64,
}

impl ManifoldPrior {
    /// `A = I`: the prior starts as a standard Gaussian.
    pub fn init_identity(dim: usize, sigma_z: f64) -> Result<Self> {
        Self::from_factor(Array::eye(dim), sigma_z)
    }

    /// Entries of `a` above the diagonal must be zero.
    pub fn from_factor(a: Array, sigma_z: f64) -> Result<Self> {
        let prior = Self { a, sigma_z };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_z > 0.0) || !self.sigma_z.is_finite() {
            return Err(Error::config("sigma_z", format!("must be positive, got {}", self.sigma_z)));
        }
        let a = &self.a;
        if !a.is_matrix() || a.rows() != a.cols() || a.rows() == 0 {
            return Err(Error::invalid(format!("prior factor must be square, got {:?}", a.shape())));
        }
        a.ensure_finite("prior factor")?;
        for i in 0..a.rows() {
            for j in i + 1..a.cols() {
                if a.get(i, j) != 0.0 {
                    return Err(Error::invalid(format!(
                        "prior factor has a nonzero entry above the diagonal at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn sigma_z(&self) -> f64 {
        self.sigma_z
    }

    pub fn factor(&self) -> &Array {
        &self.a
    }

    /// Mutable access for the optimizer; call [`ManifoldPrior::mask_upper`]
    /// after writing.
    pub fn factor_mut(&mut self) -> &mut Array {
        &mut self.a
    }

    /// Zero every entry above the diagonal.
    pub fn mask_upper(&mut self) {
        mask_upper(&mut self.a);
    }

    /// `A A^T`
    pub fn covariance(&self) -> Array {
        let at = self.a.transpose();
        self.a.matmul(&at).expect("square factor")
    }

    /// `A A^T + sigma_z^2 I`
    pub fn noisy_covariance(&self) -> Array {
        let mut c = self.covariance();
        for i in 0..self.dim() {
            let v = c.get(i, i) + self.sigma_z * self.sigma_z;
            c.set(i, i, v);
        }
        c
    }

    /// `n` draws `z = A eps`, one per row.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array {
        let d = self.dim();
        let eps: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Array::new(vec![n, d], eps).expect("sized");
        eps.matmul(&self.a.transpose()).expect("conforming")
    }

    /// Per-row `log N(z; 0, A A^T + sigma_z^2 I)` as an `[N, 1]` column.
    pub fn noisy_logpdf(&self, z: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let a = tape.constant(self.a.clone())?;
        let z = tape.constant(z.clone())?;
        let out = noisy_logpdf_graph(&mut tape, a, z, self.sigma_z)?;
        Ok(tape.value(out).clone())
    }

    /// Spectrum of `A A^T`.
    pub fn covariance_eigen(&self, threshold: f64) -> Result<EigenReport> {
        EigenReport::from_symmetric(&self.covariance(), threshold)
    }
}

pub(crate) fn mask_upper(a: &mut Array) {
    let n = a.cols();
    for i in 0..a.rows() {
        for j in i + 1..n {
            a.set(i, j, 0.0);
        }
    }
}

/// `log N(z_n; 0, A A^T + sigma^2 I)` for every row of `z`, returned as an
/// `[N, 1]` column.
///
/// The covariance is factored by Cholesky; the log-determinant is twice the
/// sum of the log-diagonal and the quadratic form comes from one triangular
/// solve. Gradients reach both `a` and `z` through those two steps.
pub fn noisy_logpdf_graph(tape: &mut Tape, a: Var, z: Var, sigma: f64) -> Result<Var> {
    let d = tape.value(a).rows();
    if tape.value(z).cols() != d {
        return Err(Error::Shape {
            op: "noisy-logpdf",
            lhs: tape.value(z).shape().to_vec(),
            rhs: tape.value(a).shape().to_vec(),
        });
    }
    let at = tape.transpose(a)?;
    let aat = tape.matmul(a, at)?;
    let noise = tape.constant(Array::eye(d).scale(sigma * sigma))?;
    let cov = tape.add(aat, noise)?;
    let l = tape.cholesky(cov)?;
    let diag = tape.diag(l)?;
    let logdiag = tape.log(diag)?;
    let half_logdet = tape.sum(logdiag)?;
    let zt = tape.transpose(z)?;
    let w = tape.solve_triangular(l, zt, false)?;
    let w2 = tape.square(w)?;
    let quad = tape.sum_axis(w2, Axis::Rows)?;
    let quad = tape.transpose(quad)?;
    let half_quad = tape.scale(quad, 0.5)?;
    let norm = tape.offset(half_logdet, 0.5 * d as f64 * (2.0 * PI).ln())?;
    let nll = tape.add(half_quad, norm)?;
    tape.neg(nll)
}
