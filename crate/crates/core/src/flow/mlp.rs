use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_SLOPE: f64 = 0.2;

/// Fully connected network with leaky-ReLU hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    slope: f64,
    weights: Vec<Array>,
    biases: Vec<Array>,
}

impl Mlp {
    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], slope: f64, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(widths, slope)?;
        for (w, b) in mlp.weights.iter_mut().zip(mlp.biases.iter_mut()) {
            let bound = 1.0 / (w.rows() as f64).sqrt();
            for v in w.data_mut().iter_mut().chain(b.data_mut()) {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(widths: &[usize], slope: f64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("bad MLP widths {widths:?}")));
        }
        let weights = widths
            .windows(2)
            .map(|w| Array::zeros(&[w[0], w[1]]))
            .collect();
        let biases = widths[1..].iter().map(|&o| Array::zeros(&[1, o])).collect();
        Ok(Self {
            widths: widths.to_vec(),
            slope,
            weights,
            biases,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_param_arrays(&self) -> usize {
        2 * self.weights.len()
    }

    /// `[W0, b0, W1, b1, ...]`
    pub fn params(&self) -> Vec<&Array> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let fresh = Self::zeros(&self.widths, self.slope)?;
        let ok = fresh
            .params()
            .iter()
            .zip(self.params())
            .all(|(a, b)| a.shape() == b.shape())
            && fresh.num_param_arrays() == self.num_param_arrays();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("MLP parameter shapes do not match widths"))
        }
    }

    /// Apply the network to a `[N, in]` batch; `params` are the bound leaves
    /// in [`Mlp::params`] order.
    pub fn graph(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let layers = self.weights.len();
        let mut h = x;
        for l in 0..layers {
            h = tape.matmul(h, params[2 * l])?;
            h = tape.add(h, params[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.leaky_relu(h, self.slope)?;
            }
        }
        Ok(h)
    }
}
