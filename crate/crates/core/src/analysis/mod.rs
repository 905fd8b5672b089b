//! Post-training analyses: sampling, nonlinear PCA, density on the learned
//! manifold and the intrinsic-dimension report.
//!
//! Eigenvectors are only defined up to sign (and rotation inside repeated
//! eigenvalues), so projected coordinates are reported as computed and
//! compared through rotation-invariant statistics.

mod stats;

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use stats::{pairwise_distances, pearson, ranks, spearman};

use crate::data::{randn, square_mask};
use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::prior::{EigenReport, ManifoldPrior};

fn check_dims(model: &FlowModel, d: usize, what: &str) -> Result<()> {
    if model.dim() != d {
        return Err(Error::invalid(format!(
            "{what} has dimension {d} but the flow has {}",
            model.dim()
        )));
    }
    Ok(())
}

/// `x = f(A eps)`, one sample per row.
pub fn sample_model<R: Rng + ?Sized>(
    model: &FlowModel,
    prior: &ManifoldPrior,
    n: usize,
    rng: &mut R,
) -> Result<Array> {
    check_dims(model, prior.dim(), "prior")?;
    model.forward(&prior.sample(n, rng))
}

/// `x = f(eps)` with `eps ~ N(0, I)`.
pub fn sample_baseline<R: Rng + ?Sized>(model: &FlowModel, n: usize, rng: &mut R) -> Result<Array> {
    model.forward(&randn(rng, n, model.dim()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    /// `[n, K]` coordinates `g(x) E`.
    pub coords: Array,
    /// `[D, K]` leading eigenvectors.
    pub basis: Array,
    pub ids: Vec<usize>,
}

/// `z_proj = g(x) E` with `E` the top-`k` eigenvectors of `A A^T`.
pub fn nonlinear_pca_project(
    model: &FlowModel,
    report: &EigenReport,
    xs: &Array,
    k: usize,
) -> Result<ProjectionResult> {
    check_dims(model, report.dim(), "eigen report")?;
    if !xs.is_matrix() {
        return Err(Error::invalid("projection input must be an [n, D] array"));
    }
    check_dims(model, xs.cols(), "input")?;
    let basis = report.principal_subspace(k)?;
    let coords = model.inverse(xs)?.matmul(&basis)?;
    Ok(ProjectionResult {
        coords,
        basis,
        ids: (0..xs.rows()).collect(),
    })
}

/// `f(z_proj E^T)`: maps projected coordinates back to data space.
pub fn reembed(model: &FlowModel, proj: &ProjectionResult) -> Result<Array> {
    model.forward(&proj.coords.matmul(&proj.basis.transpose())?)
}

fn diag_gaussian_density(z: &[f64], vars: &[f64]) -> f64 {
    let mut log = 0.0;
    for (x, v) in z.iter().zip(vars) {
        log += -0.5 * ((2.0 * PI * v).ln() + x * x / v);
    }
    log.exp()
}

fn leading_variances(report: &EigenReport) -> Result<Vec<f64>> {
    let k = report.rank;
    if k == 0 || !(report.values[0] > 0.0) {
        return Err(Error::invalid("density on the manifold needs a positive leading eigenvalue"));
    }
    Ok(report.values[..k].to_vec())
}

/// `N(g(x) E; 0, diag(lambda_1..lambda_K))` at each support point, with `K`
/// the report's estimated rank.
pub fn manifold_density(model: &FlowModel, report: &EigenReport, support: &Array) -> Result<Vec<f64>> {
    let vars = leading_variances(report)?;
    let proj = nonlinear_pca_project(model, report, support, vars.len())?;
    Ok(proj
        .coords
        .iter_rows()
        .map(|z| diag_gaussian_density(z, &vars))
        .collect())
}

/// Density of a one-dimensional manifold expressed in the parameter `t` of a
/// curve `t -> x(t)`: the projected Gaussian density times `|d z_proj / dt|`,
/// with the derivative taken by central differences of step `h`. Requires an
/// estimated rank of 1.
pub fn curve_density<F>(
    model: &FlowModel,
    report: &EigenReport,
    curve: F,
    params: &[f64],
    h: f64,
) -> Result<Vec<f64>>
where
    F: Fn(f64) -> Vec<f64>,
{
    if report.rank != 1 {
        return Err(Error::invalid(format!(
            "curve density needs estimated rank 1, got {}",
            report.rank
        )));
    }
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let var = leading_variances(report)?[0];
    let d = model.dim();
    let mut pts = Array::zeros(&[3 * params.len(), d]);
    for (i, &t) in params.iter().enumerate() {
        for (r, s) in [t, t - h, t + h].into_iter().enumerate() {
            let x = curve(s);
            if x.len() != d {
                return Err(Error::invalid(format!("curve point has {} coordinates, expected {d}", x.len())));
            }
            pts.row_slice_mut(3 * i + r).copy_from_slice(&x);
        }
    }
    let z = nonlinear_pca_project(model, report, &pts, 1)?.coords;
    Ok((0..params.len())
        .map(|i| {
            let z0 = z.get(3 * i, 0);
            let dz = (z.get(3 * i + 2, 0) - z.get(3 * i + 1, 0)) / (2.0 * h);
            diag_gaussian_density(&[z0], &[var]) * dz.abs()
        })
        .collect())
}

/// Spectrum of the learned covariance at `threshold`.
pub fn intrinsic_dim_report(prior: &ManifoldPrior, threshold: f64) -> Result<EigenReport> {
    prior.covariance_eigen(threshold)
}

/// Largest absolute component of `g(x)` along the eigenvectors outside the
/// top `k`.
pub fn null_space_residual(model: &FlowModel, report: &EigenReport, xs: &Array, k: usize) -> Result<f64> {
    let d = report.dim();
    if k >= d {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (k..d).collect();
    let null = report.vectors.gather_cols(&idx);
    Ok(model.inverse(xs)?.matmul(&null)?.max_abs())
}

/// Total squared intensity outside the centred square over the total inside.
pub fn off_square_energy_ratio(samples: &Array, image: usize, square: usize) -> Result<f64> {
    let mask = square_mask(image, square)?;
    if samples.cols() != mask.len() {
        return Err(Error::invalid(format!(
            "samples have {} pixels, a {image}x{image} image has {}",
            samples.cols(),
            mask.len()
        )));
    }
    let (mut on, mut off) = (0.0, 0.0);
    for row in samples.iter_rows() {
        for (v, &m) in row.iter().zip(&mask) {
            if m {
                on += v * v;
            } else {
                off += v * v;
            }
        }
    }
    Ok(if on > 0.0 { off / on } else { f64::INFINITY })
}

/// Mean `|x2 - sin(2 x1)|` over the rows.
pub fn sin_curve_error(samples: &Array) -> Result<f64> {
    if samples.cols() != 2 || samples.rows() == 0 {
        return Err(Error::invalid("sin curve error needs a non-empty [n, 2] array"));
    }
    let total: f64 = samples
        .iter_rows()
        .map(|r| (r[1] - (2.0 * r[0]).sin()).abs())
        .sum();
    Ok(total / samples.rows() as f64)
}

/// `parameter,estimated,true` rows.
pub fn write_density_csv(path: &Path, params: &[f64], estimated: &[f64], truth: &[f64]) -> Result<()> {
    if params.len() != estimated.len() || params.len() != truth.len() {
        return Err(Error::invalid("density columns differ in length"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["parameter", "estimated", "true"])?;
    for i in 0..params.len() {
        w.write_record([params[i].to_string(), estimated[i].to_string(), truth[i].to_string()])?;
    }
    w.flush()?;
    Ok(())
}
