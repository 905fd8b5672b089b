//! Seeded dataset generators, manifold smoothing and dequantization.
//!
//! Every generator is a pure function of its arguments: the same spec and
//! seed give bitwise-identical samples.

mod io;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use io::{read_csv, write_csv, write_pgm};

use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, FlowSpec};

/// `[n, d]` array of independent standard normal draws.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Array {
    let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    Array::new(vec![n, d], data).expect("sized")
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rows `(x1, sin(2 x1))` with `x1 ~ N(0, 1)`.
pub fn gen_sin2d(n: usize, seed: u64) -> Array {
    let mut rng = rng_for(seed);
    let mut out = Array::zeros(&[n, 2]);
    for i in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        out.set(i, 0, x);
        out.set(i, 1, (2.0 * x).sin());
    }
    out
}

/// Rows `(x1, x1)` with `x1 ~ N(0, 1)`.
pub fn gen_line2d(n: usize, seed: u64) -> Array {
    let mut rng = rng_for(seed);
    let mut out = Array::zeros(&[n, 2]);
    for i in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        out.set(i, 0, x);
        out.set(i, 1, x);
    }
    out
}

/// Point of the S-shaped surface at arc parameter `t` and depth `u`.
pub fn scurve_point(t: f64, u: f64) -> [f64; 3] {
    let sign = if t < 0.0 { -1.0 } else if t > 0.0 { 1.0 } else { 0.0 };
    [t.sin(), u, sign * (t.cos() - 1.0)]
}

/// `t ~ U(-3pi/2, 3pi/2)`, `u ~ U(0, 2)` mapped through [`scurve_point`].
pub fn gen_scurve3d(n: usize, seed: u64) -> Array {
    gen_scurve3d_with_params(n, seed).0
}

/// Samples together with their `(t, u)` surface coordinates.
pub fn gen_scurve3d_with_params(n: usize, seed: u64) -> (Array, Array) {
    let mut rng = rng_for(seed);
    let mut out = Array::zeros(&[n, 3]);
    let mut params = Array::zeros(&[n, 2]);
    for i in 0..n {
        let t = rng.gen_range(-1.5 * PI..1.5 * PI);
        let u = rng.gen_range(0.0..2.0);
        for (j, v) in scurve_point(t, u).into_iter().enumerate() {
            out.set(i, j, v);
        }
        params.set(i, 0, t);
        params.set(i, 1, u);
    }
    (out, params)
}

/// Flat row-major mask of the centred `square x square` patch.
pub fn square_mask(image: usize, square: usize) -> Result<Vec<bool>> {
    if square == 0 || square > image {
        return Err(Error::invalid(format!(
            "square of size {square} does not fit a {image}x{image} image"
        )));
    }
    let lo = (image - square) / 2;
    let inside = |k: usize| k >= lo && k < lo + square;
    Ok((0..image * image)
        .map(|p| inside(p / image) && inside(p % image))
        .collect())
}

/// Black `image x image` frames with a centred square of intensity
/// `v ~ U(0, 1)`, one frame per row.
pub fn gen_fading_squares(n: usize, image: usize, square: usize, seed: u64) -> Result<Array> {
    let mask = square_mask(image, square)?;
    let mut rng = rng_for(seed);
    let mut out = Array::zeros(&[n, image * image]);
    for i in 0..n {
        let v: f64 = rng.gen_range(0.0..1.0);
        for (o, &m) in out.row_slice_mut(i).iter_mut().zip(&mask) {
            if m {
                *o = v;
            }
        }
    }
    Ok(out)
}

/// Frozen random volume-preserving flow used by [`gen_known_rank_flow`]:
/// four couplings with alternating halves and hidden widths 24.
pub fn known_rank_generator(dim: usize, seed: u64) -> Result<FlowModel> {
    if dim < 2 {
        return Err(Error::invalid("known-rank data needs an ambient dimension of at least 2"));
    }
    let mut rng = rng_for(seed ^ 0x6b6e_6f77_6e72_6b);
    FlowSpec::alternating(dim, 4, dim / 2, &[24, 24, 24]).build(&mut rng)
}

/// `(eps_1..eps_K, 0, ..., 0)` pushed through [`known_rank_generator`].
/// Returns the samples and the generating flow.
pub fn gen_known_rank_flow(n: usize, dim: usize, rank: usize, seed: u64) -> Result<(Array, FlowModel)> {
    if rank == 0 || rank > dim {
        return Err(Error::invalid(format!("rank {rank} outside [1, {dim}]")));
    }
    let flow = known_rank_generator(dim, seed)?;
    let mut rng = rng_for(seed);
    let mut z = Array::zeros(&[n, dim]);
    for i in 0..n {
        for j in 0..rank {
            z.set(i, j, rng.sample(StandardNormal));
        }
    }
    Ok((flow.forward(&z)?, flow))
}

/// `batch + sigma * eps`; `sigma = 0` returns the batch unchanged.
pub fn smooth<R: Rng + ?Sized>(batch: &Array, sigma: f64, rng: &mut R) -> Result<Array> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("smoothing noise must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(batch.clone());
    }
    let mut out = batch.clone();
    for v in out.data_mut() {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(out)
}

/// `(p + U(0, 1)) / 256` for 8-bit pixel values.
pub fn dequantize<R: Rng + ?Sized>(pixels: &[i64], rng: &mut R) -> Result<Vec<f64>> {
    pixels
        .iter()
        .map(|&p| {
            if !(0..=255).contains(&p) {
                return Err(Error::invalid(format!("pixel value {p} outside [0, 255]")));
            }
            Ok((p as f64 + rng.gen_range(0.0..1.0)) / 256.0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetKind {
    Sin2d,
    Line2d,
    Scurve3d,
    FadingSquares { image_size: usize, square_size: usize },
    KnownRankFlow { dim: usize, rank: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub n: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, n: usize, seed: u64) -> Self {
        Self { kind, n, seed }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            DatasetKind::Sin2d | DatasetKind::Line2d => 2,
            DatasetKind::Scurve3d => 3,
            DatasetKind::FadingSquares { image_size, .. } => image_size * image_size,
            DatasetKind::KnownRankFlow { dim, .. } => dim,
        }
    }

    /// Intrinsic dimension of the generated distribution.
    pub fn intrinsic_dim(&self) -> usize {
        match self.kind {
            DatasetKind::Sin2d | DatasetKind::Line2d | DatasetKind::FadingSquares { .. } => 1,
            DatasetKind::Scurve3d => 2,
            DatasetKind::KnownRankFlow { rank, .. } => rank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("dataset.n", "need at least one sample"));
        }
        match self.kind {
            DatasetKind::FadingSquares {
                image_size,
                square_size,
            } => {
                square_mask(image_size, square_size)
                    .map_err(|e| Error::config("dataset.square_size", e.to_string()))?;
            }
            DatasetKind::KnownRankFlow { dim, rank } => {
                if dim < 2 || rank == 0 || rank > dim {
                    return Err(Error::config(
                        "dataset.rank",
                        format!("need 1 <= rank <= dim and dim >= 2, got rank {rank}, dim {dim}"),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Array> {
        self.validate()?;
        Ok(match self.kind {
            DatasetKind::Sin2d => gen_sin2d(self.n, self.seed),
            DatasetKind::Line2d => gen_line2d(self.n, self.seed),
            DatasetKind::Scurve3d => gen_scurve3d(self.n, self.seed),
            DatasetKind::FadingSquares {
                image_size,
                square_size,
            } => gen_fading_squares(self.n, image_size, square_size, self.seed)?,
            DatasetKind::KnownRankFlow { dim, rank } => {
                gen_known_rank_flow(self.n, dim, rank, self.seed)?.0
            }
        })
    }
}
