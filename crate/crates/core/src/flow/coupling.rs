use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::{LayerOutput, Mask};
use crate::diffcore::{Array, Axis, Tape, Var};
use crate::error::{Error, Result};

/// Subtract the mean so the log-scales sum to zero.
pub fn normalize_log_scale(raw: &Array) -> Result<Array> {
    if raw.is_empty() {
        return Err(Error::invalid("cannot normalize an empty log-scale vector"));
    }
    let mean = raw.sum() / raw.len() as f64;
    Ok(raw.map(|v| v - mean))
}

/// Affine coupling layer.
///
/// The conditioning block passes through unchanged; the other block is scaled
/// by `exp(s)` and shifted by `t`, both functions of the conditioning block.
/// With `volume_preserving` set, `s` is mean-centred per sample so its sum,
/// which is the log-determinant, vanishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    dim: usize,
    mask: Mask,
    volume_preserving: bool,
    cond: Arc<[usize]>,
    trans: Arc<[usize]>,
    unscatter: Arc<[usize]>,
    scale_net: Mlp,
    shift_net: Mlp,
}

impl Coupling {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        mask: Mask,
        hidden: &[usize],
        volume_preserving: bool,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (cond, trans) = mask.indices(dim)?;
        let widths = |i: usize, o: usize| {
            let mut w = vec![i];
            w.extend_from_slice(hidden);
            w.push(o);
            w
        };
        let scale_net = Mlp::new(&widths(cond.len(), trans.len()), slope, rng)?;
        let shift_net = Mlp::new(&widths(cond.len(), trans.len()), slope, rng)?;
        Self::from_parts(dim, mask, volume_preserving, scale_net, shift_net)
    }

    pub fn from_parts(
        dim: usize,
        mask: Mask,
        volume_preserving: bool,
        scale_net: Mlp,
        shift_net: Mlp,
    ) -> Result<Self> {
        let (cond, trans) = mask.indices(dim)?;
        for net in [&scale_net, &shift_net] {
            if net.input_dim() != cond.len() || net.output_dim() != trans.len() {
                return Err(Error::invalid(format!(
                    "coupling nets must map {} -> {}, got {:?}",
                    cond.len(),
                    trans.len(),
                    net.widths()
                )));
            }
        }
        let mut unscatter = vec![0; dim];
        for (pos, &j) in cond.iter().chain(trans.iter()).enumerate() {
            unscatter[j] = pos;
        }
        Ok(Self {
            dim,
            mask,
            volume_preserving,
            cond: cond.into(),
            trans: trans.into(),
            unscatter: unscatter.into(),
            scale_net,
            shift_net,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mask(&self) -> Mask {
        self.mask
    }

    pub fn is_volume_preserving(&self) -> bool {
        self.volume_preserving
    }

    pub fn condition_indices(&self) -> &[usize] {
        &self.cond
    }

    pub fn transform_indices(&self) -> &[usize] {
        &self.trans
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn shift_net(&self) -> &Mlp {
        &self.shift_net
    }

    pub fn params(&self) -> Vec<&Array> {
        let mut p = self.scale_net.params();
        p.extend(self.shift_net.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut p = self.scale_net.params_mut();
        p.extend(self.shift_net.params_mut());
        p
    }

    pub(crate) fn validate(&self) -> Result<()> {
        self.scale_net.validate()?;
        self.shift_net.validate()?;
        let rebuilt = Self::from_parts(
            self.dim,
            self.mask,
            self.volume_preserving,
            self.scale_net.clone(),
            self.shift_net.clone(),
        )?;
        if rebuilt.cond != self.cond || rebuilt.unscatter != self.unscatter {
            return Err(Error::invalid("coupling index tables are inconsistent"));
        }
        Ok(())
    }

    /// `(s, t)` for the conditioning block, `s` already normalized when the
    /// layer is volume preserving.
    fn scale_shift(&self, tape: &mut Tape, p: &[Var], x1: Var) -> Result<(Var, Var)> {
        let k = self.scale_net.num_param_arrays();
        let mut s = self.scale_net.graph(tape, &p[..k], x1)?;
        if self.volume_preserving {
            let m = tape.mean_axis(s, Axis::Cols)?;
            s = tape.sub(s, m)?;
        }
        let t = self.shift_net.graph(tape, &p[k..], x1)?;
        Ok((s, t))
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let v = tape.value(x);
        if !v.is_matrix() || v.cols() != self.dim {
            return Err(Error::Shape {
                op: "coupling",
                lhs: v.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        Ok(())
    }

    /// `y_trans = x_trans * exp(s(x_cond)) + t(x_cond)`.
    pub fn forward_graph(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<LayerOutput> {
        self.check_input(tape, x)?;
        let x1 = tape.gather_cols(x, self.cond.clone())?;
        let x2 = tape.gather_cols(x, self.trans.clone())?;
        let (s, t) = self.scale_shift(tape, p, x1)?;
        let e = tape.exp(s)?;
        let y2 = tape.mul(x2, e)?;
        let y2 = tape.add(y2, t)?;
        let joined = tape.concat(&[x1, y2], Axis::Cols)?;
        let out = tape.gather_cols(joined, self.unscatter.clone())?;
        let logdet = if self.volume_preserving {
            None
        } else {
            Some(tape.sum_axis(s, Axis::Cols)?)
        };
        Ok(LayerOutput { out, logdet })
    }

    /// `x_trans = (y_trans - t(y_cond)) * exp(-s(y_cond))`.
    pub fn inverse_graph(&self, tape: &mut Tape, p: &[Var], y: Var) -> Result<LayerOutput> {
        self.check_input(tape, y)?;
        let y1 = tape.gather_cols(y, self.cond.clone())?;
        let y2 = tape.gather_cols(y, self.trans.clone())?;
        let (s, t) = self.scale_shift(tape, p, y1)?;
        let neg = tape.neg(s)?;
        let e = tape.exp(neg)?;
        let d = tape.sub(y2, t)?;
        let x2 = tape.mul(d, e)?;
        let joined = tape.concat(&[y1, x2], Axis::Cols)?;
        let out = tape.gather_cols(joined, self.unscatter.clone())?;
        let logdet = if self.volume_preserving {
            None
        } else {
            let ld = tape.sum_axis(s, Axis::Cols)?;
            Some(tape.neg(ld)?)
        };
        Ok(LayerOutput { out, logdet })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::mlp::DEFAULT_SLOPE;
    use crate::flow::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_examples() {
        let out = normalize_log_scale(&Array::row(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
        let out = normalize_log_scale(&Array::row(&[2.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[1.0, -1.0]);
        assert!(normalize_log_scale(&Array::row(&[])).is_err());
    }

    #[test]
    fn normalized_random_vector_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<f64> = (0..7).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let out = normalize_log_scale(&Array::row(&raw)).unwrap();
        assert!(out.sum().abs() < 1e-12);
    }

    #[test]
    fn zero_nets_give_identity() {
        let mask = Mask { split: 2, flip: false };
        let c = Coupling::from_parts(
            5,
            mask,
            true,
            Mlp::zeros(&[2, 8, 3], DEFAULT_SLOPE).unwrap(),
            Mlp::zeros(&[2, 8, 3], DEFAULT_SLOPE).unwrap(),
        )
        .unwrap();
        let layer = Layer::Coupling(c);
        let x = Array::from_rows(&[vec![0.3, -1.0, 2.0, 4.0, -0.5]]).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), x);
        assert_eq!(layer.inverse(&x).unwrap(), x);
    }

    #[test]
    fn conditioning_block_passes_through_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for flip in [false, true] {
            let c = Coupling::new(4, Mask { split: 1, flip }, &[6], true, DEFAULT_SLOPE, &mut rng)
                .unwrap();
            let cond = c.condition_indices().to_vec();
            let layer = Layer::Coupling(c);
            let x = Array::from_rows(&[vec![0.1, 0.2, -0.3, 0.9], vec![1.5, -2.0, 0.0, 0.25]])
                .unwrap();
            let y = layer.forward(&x).unwrap();
            let back = layer.inverse(&y).unwrap();
            for i in 0..2 {
                for &j in &cond {
                    assert_eq!(y.get(i, j), x.get(i, j));
                    assert_eq!(back.get(i, j), x.get(i, j));
                }
            }
            assert!(back.max_abs_diff(&x) < 1e-10);
        }
    }

    #[test]
    fn nets_must_match_mask() {
        let r = Coupling::from_parts(
            3,
            Mask { split: 1, flip: false },
            true,
            Mlp::zeros(&[2, 4, 1], DEFAULT_SLOPE).unwrap(),
            Mlp::zeros(&[2, 4, 1], DEFAULT_SLOPE).unwrap(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Layer::Coupling(
            Coupling::new(3, Mask { split: 1, flip: false }, &[4], true, DEFAULT_SLOPE, &mut rng)
                .unwrap(),
        );
        assert!(layer.forward(&Array::zeros(&[1, 4])).is_err());
    }
}
