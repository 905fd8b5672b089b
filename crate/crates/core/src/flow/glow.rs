use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LayerOutput;
use crate::diffcore::{Array, Axis, Tape, Var};
use crate::error::{Error, Result};

const MIN_SCALE: f64 = 1e-12;

fn check_width(op: &'static str, tape: &Tape, x: Var, dim: usize) -> Result<()> {
    let v = tape.value(x);
    if !v.is_matrix() || v.cols() != dim {
        return Err(Error::Shape {
            op,
            lhs: v.shape().to_vec(),
            rhs: vec![dim],
        });
    }
    Ok(())
}

fn check_scales(op: &str, normalized: &Array) -> Result<()> {
    if let Some(i) = normalized.data().iter().position(|&l| !(l.exp() >= MIN_SCALE)) {
        return Err(Error::invalid(format!(
            "{op}: scale {i} is numerically zero, transform is not invertible"
        )));
    }
    Ok(())
}

/// Per-channel affine map on a flattened `(C, S)` layout whose log-scales are
/// mean-centred, so the transform preserves volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpActNorm {
    channels: usize,
    spatial: usize,
    log_scale: Array,
    bias: Array,
}

impl VpActNorm {
    /// Unit scales and zero bias.
    pub fn new(channels: usize, spatial: usize) -> Result<Self> {
        if channels == 0 || spatial == 0 {
            return Err(Error::invalid("actnorm needs at least one channel and pixel"));
        }
        Ok(Self {
            channels,
            spatial,
            log_scale: Array::zeros(&[1, channels]),
            bias: Array::zeros(&[1, channels]),
        })
    }

    pub fn dim(&self) -> usize {
        self.channels * self.spatial
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> usize {
        self.spatial
    }

    /// `[log_scale, bias]`
    pub fn params(&self) -> Vec<&Array> {
        vec![&self.log_scale, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        vec![&mut self.log_scale, &mut self.bias]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let want = [1, self.channels];
        if self.log_scale.shape() != want || self.bias.shape() != want {
            return Err(Error::invalid("actnorm parameter shapes do not match channels"));
        }
        Ok(())
    }

    fn expand(&self) -> Arc<[usize]> {
        (0..self.dim()).map(|j| j / self.spatial).collect()
    }

    fn scale_bias(&self, tape: &mut Tape, p: &[Var]) -> Result<(Var, Var)> {
        let m = tape.mean_axis(p[0], Axis::Cols)?;
        let ls = tape.sub(p[0], m)?;
        check_scales("actnorm", tape.value(ls))?;
        let idx = self.expand();
        let ls = tape.gather_cols(ls, idx.clone())?;
        let b = tape.gather_cols(p[1], idx)?;
        Ok((ls, b))
    }

    pub fn forward_graph(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<LayerOutput> {
        check_width("actnorm", tape, x, self.dim())?;
        let (ls, b) = self.scale_bias(tape, p)?;
        let e = tape.exp(ls)?;
        let y = tape.mul(x, e)?;
        let out = tape.add(y, b)?;
        Ok(LayerOutput { out, logdet: None })
    }

    pub fn inverse_graph(&self, tape: &mut Tape, p: &[Var], y: Var) -> Result<LayerOutput> {
        check_width("actnorm", tape, y, self.dim())?;
        let (ls, b) = self.scale_bias(tape, p)?;
        let neg = tape.neg(ls)?;
        let e = tape.exp(neg)?;
        let d = tape.sub(y, b)?;
        let out = tape.mul(d, e)?;
        Ok(LayerOutput { out, logdet: None })
    }
}

/// Invertible 1x1 convolution `W = P L (U + diag(sign * exp(ls)))` with
/// mean-centred `ls`, applied to every pixel of a flattened `(C, S)` layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpConv1x1Lu {
    channels: usize,
    spatial: usize,
    perm: Vec<usize>,
    sign: Vec<f64>,
    lower: Array,
    upper: Array,
    log_scale: Array,
}

impl VpConv1x1Lu {
    /// `L = I`, `U = 0`, unit scales and a random channel permutation.
    pub fn new<R: Rng + ?Sized>(channels: usize, spatial: usize, rng: &mut R) -> Result<Self> {
        let mut perm: Vec<usize> = (0..channels).collect();
        perm.shuffle(rng);
        Self::from_parts(
            channels,
            spatial,
            perm,
            vec![1.0; channels],
            Array::zeros(&[channels, channels]),
            Array::zeros(&[channels, channels]),
            Array::zeros(&[1, channels]),
        )
    }

    pub fn from_parts(
        channels: usize,
        spatial: usize,
        perm: Vec<usize>,
        sign: Vec<f64>,
        lower: Array,
        upper: Array,
        log_scale: Array,
    ) -> Result<Self> {
        let layer = Self {
            channels,
            spatial,
            perm,
            sign,
            lower,
            upper,
            log_scale,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn dim(&self) -> usize {
        self.channels * self.spatial
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> usize {
        self.spatial
    }

    /// `[lower, upper, log_scale]`; only the strict triangles of `lower` and
    /// `upper` enter the transform.
    pub fn params(&self) -> Vec<&Array> {
        vec![&self.lower, &self.upper, &self.log_scale]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        vec![&mut self.lower, &mut self.upper, &mut self.log_scale]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || self.spatial == 0 {
            return Err(Error::invalid("1x1 convolution needs at least one channel and pixel"));
        }
        let mut seen = vec![false; c];
        for &p in &self.perm {
            if p >= c || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("1x1 convolution permutation is not a bijection"));
            }
        }
        if self.perm.len() != c
            || self.sign.len() != c
            || self.sign.iter().any(|s| s.abs() != 1.0)
            || self.lower.shape() != [c, c]
            || self.upper.shape() != [c, c]
            || self.log_scale.shape() != [1, c]
        {
            return Err(Error::invalid("1x1 convolution parameters do not match channels"));
        }
        Ok(())
    }

    /// Dense `W` for the current parameters.
    pub fn weight(&self) -> Result<Array> {
        let mut tape = Tape::new();
        let p = self
            .params()
            .into_iter()
            .map(|a| tape.constant(a.clone()))
            .collect::<Result<Vec<_>>>()?;
        let w = self.weight_graph(&mut tape, &p)?;
        Ok(tape.value(w).clone())
    }

    fn masks(&self) -> (Array, Array) {
        let c = self.channels;
        let mut strict_lower = Array::zeros(&[c, c]);
        let mut strict_upper = Array::zeros(&[c, c]);
        for i in 0..c {
            for j in 0..c {
                if j < i {
                    strict_lower.set(i, j, 1.0);
                } else if j > i {
                    strict_upper.set(i, j, 1.0);
                }
            }
        }
        (strict_lower, strict_upper)
    }

    /// `(L, U + diag(s))`.
    fn factors(&self, tape: &mut Tape, p: &[Var]) -> Result<(Var, Var)> {
        let (ml, mu) = self.masks();
        let (ml, mu) = (tape.constant(ml)?, tape.constant(mu)?);
        let eye = tape.constant(Array::eye(self.channels))?;
        let l = tape.mul(p[0], ml)?;
        let l = tape.add(l, eye)?;

        let m = tape.mean_axis(p[2], Axis::Cols)?;
        let ls = tape.sub(p[2], m)?;
        check_scales("conv1x1", tape.value(ls))?;
        let s = tape.exp(ls)?;
        let sign = tape.constant(Array::row(&self.sign))?;
        let s = tape.mul(s, sign)?;
        let d = tape.mul(eye, s)?;
        let u = tape.mul(p[1], mu)?;
        let u = tape.add(u, d)?;
        Ok((l, u))
    }

    fn weight_graph(&self, tape: &mut Tape, p: &[Var]) -> Result<Var> {
        let (l, u) = self.factors(tape, p)?;
        let lu = tape.matmul(l, u)?;
        // (P M)[i, :] = M[perm[i], :]
        let t = tape.transpose(lu)?;
        let g = tape.gather_cols(t, self.perm.iter().copied().collect())?;
        tape.transpose(g)
    }

    /// `[N, C*S]` channel-major to `[N*S, C]` pixel rows.
    fn to_pixels(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (c, s) = (self.channels, self.spatial);
        let n = tape.value(x).rows();
        let idx: Arc<[usize]> = (0..c * s).map(|k| (k % c) * s + k / c).collect();
        let pm = tape.gather_cols(x, idx)?;
        tape.reshape(pm, n * s, c)
    }

    fn from_pixels(&self, tape: &mut Tape, rows: Var, n: usize) -> Result<Var> {
        let (c, s) = (self.channels, self.spatial);
        let flat = tape.reshape(rows, n, c * s)?;
        let idx: Arc<[usize]> = (0..c * s).map(|k| (k % s) * c + k / s).collect();
        tape.gather_cols(flat, idx)
    }

    pub fn forward_graph(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<LayerOutput> {
        check_width("conv1x1", tape, x, self.dim())?;
        let n = tape.value(x).rows();
        let w = self.weight_graph(tape, p)?;
        let wt = tape.transpose(w)?;
        let rows = self.to_pixels(tape, x)?;
        let y = tape.matmul(rows, wt)?;
        let out = self.from_pixels(tape, y, n)?;
        Ok(LayerOutput { out, logdet: None })
    }

    pub fn inverse_graph(&self, tape: &mut Tape, p: &[Var], y: Var) -> Result<LayerOutput> {
        check_width("conv1x1", tape, y, self.dim())?;
        let n = tape.value(y).rows();
        let (l, u) = self.factors(tape, p)?;
        let rows = self.to_pixels(tape, y)?;
        // rows of P^T Y^T, i.e. columns of the pixel rows, by the inverse permutation
        let b = tape.gather_cols(rows, inverse_perm(&self.perm))?;
        let b = tape.transpose(b)?;
        let v = tape.solve_triangular(l, b, false)?;
        let x = tape.solve_triangular(u, v, true)?;
        let xt = tape.transpose(x)?;
        let out = self.from_pixels(tape, xt, n)?;
        Ok(LayerOutput { out, logdet: None })
    }
}

fn inverse_perm(perm: &[usize]) -> Arc<[usize]> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv.into()
}
