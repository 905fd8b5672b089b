//! Entry-permutation layers: random channel shuffles and the checkerboard
//! space-to-channel squeeze. Both have log-determinant exactly zero.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LayerOutput;
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};

fn invert(perm: &[usize]) -> Result<Vec<usize>> {
    let mut inv = vec![usize::MAX; perm.len()];
    for (k, &j) in perm.iter().enumerate() {
        if j >= perm.len() || inv[j] != usize::MAX {
            return Err(Error::invalid(format!("{perm:?} is not a permutation")));
        }
        inv[j] = k;
    }
    Ok(inv)
}

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

/// `y[:, k] = x[:, perm[k]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Permutation {
    perm: Arc<[usize]>,
    inverse: Arc<[usize]>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let inverse = invert(&perm)?;
        Ok(Self {
            perm: perm.into(),
            inverse: inverse.into(),
        })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        Self::new(perm).expect("shuffled identity is a permutation")
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let inv = invert(&self.perm)?;
        if inv[..] != self.inverse[..] {
            return Err(Error::invalid("cached inverse permutation is stale"));
        }
        Ok(())
    }

    pub fn forward_graph(&self, tape: &mut Tape, x: Var) -> Result<LayerOutput> {
        check_width("permutation", tape, x, self.dim())?;
        let out = tape.gather_cols(x, self.perm.clone())?;
        Ok(LayerOutput { out, logdet: None })
    }

    pub fn inverse_graph(&self, tape: &mut Tape, y: Var) -> Result<LayerOutput> {
        check_width("permutation", tape, y, self.dim())?;
        let out = tape.gather_cols(y, self.inverse.clone())?;
        Ok(LayerOutput { out, logdet: None })
    }
}

/// Space-to-channel squeeze of a flattened `(C, H, W)` image into
/// `(4C, H/2, W/2)`. Each 2x2 block is split into four sub-images taken in
/// checkerboard order `(0,0), (1,1), (0,1), (1,0)`, so the first half of the
/// output channels holds one colour of the checkerboard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckerboardSqueeze {
    channels: usize,
    height: usize,
    width: usize,
    gather: Permutation,
}

const CHECKER_ORDER: [(usize, usize); 4] = [(0, 0), (1, 1), (0, 1), (1, 0)];

impl CheckerboardSqueeze {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || height % 2 != 0 || width % 2 != 0 {
            return Err(Error::invalid(format!(
                "squeeze needs even spatial dims, got ({channels}, {height}, {width})"
            )));
        }
        let (h2, w2) = (height / 2, width / 2);
        let mut idx = Vec::with_capacity(channels * height * width);
        for (k, (di, dj)) in CHECKER_ORDER.iter().enumerate() {
            for c in 0..channels {
                let _out_channel = k * channels + c;
                for i in 0..h2 {
                    for j in 0..w2 {
                        idx.push(c * height * width + (2 * i + di) * width + 2 * j + dj);
                    }
                }
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            gather: Permutation::new(idx)?,
        })
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        (4 * self.channels, self.height / 2, self.width / 2)
    }

    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let fresh = Self::new(self.channels, self.height, self.width)?;
        if fresh.gather != self.gather {
            return Err(Error::invalid("squeeze index table is inconsistent"));
        }
        Ok(())
    }

    pub fn forward_graph(&self, tape: &mut Tape, x: Var) -> Result<LayerOutput> {
        self.gather.forward_graph(tape, x)
    }

    pub fn inverse_graph(&self, tape: &mut Tape, y: Var) -> Result<LayerOutput> {
        self.gather.inverse_graph(tape, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Array;
    use crate::flow::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_non_permutations() {
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3]).is_err());
    }

    #[test]
    fn squeeze_of_single_block() {
        let sq = Layer::Squeeze(CheckerboardSqueeze::new(1, 2, 2).unwrap());
        // [[a, b], [c, d]] with a=1, b=2, c=3, d=4
        let x = Array::row(&[1.0, 2.0, 3.0, 4.0]);
        let y = sq.forward(&x).unwrap();
        let mut got = y.data().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![1.0, 2.0, 3.0, 4.0]);
        // checkerboard: a and d share the first half of the channels
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 3.0]);
        assert_eq!(sq.inverse(&y).unwrap(), x);
    }

    #[test]
    fn odd_spatial_dims_rejected() {
        assert!(CheckerboardSqueeze::new(1, 3, 4).is_err());
        assert!(CheckerboardSqueeze::new(1, 4, 5).is_err());
    }

    #[test]
    fn large_image_roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sq = Layer::Squeeze(CheckerboardSqueeze::new(4, 16, 16).unwrap());
        let data: Vec<f64> = (0..2 * 1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Array::new(vec![2, 1024], data).unwrap();
        let y = sq.forward(&x).unwrap();
        assert_eq!(sq.inverse(&y).unwrap(), x);
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn random_permutation_is_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Permutation::random(10, &mut rng);
        let mut s = p.indices().to_vec();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }
}
