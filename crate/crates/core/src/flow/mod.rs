//! Invertible layers and the composite flow `f: Z -> X`, `g = f^-1`.
//!
//! Every layer in the default zoo preserves volume: couplings mean-centre
//! their log-scales, permutations and squeezes only move entries. A
//! non-volume-preserving coupling is kept for the fixed-prior baseline; its
//! log-determinant is reported through [`LayerOutput::logdet`].

mod coupling;
mod glow;
mod mlp;
mod permute;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use coupling::{normalize_log_scale, Coupling};
pub use glow::{VpActNorm, VpConv1x1Lu};
pub use mlp::{Mlp, DEFAULT_SLOPE};
pub use permute::{CheckerboardSqueeze, Permutation};

use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};

/// Which coordinates a coupling conditions on.
///
/// With `flip = false` the block `[0, split)` conditions and `[split, D)` is
/// transformed; `flip = true` swaps the roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub split: usize,
    #[serde(default)]
    pub flip: bool,
}

impl Mask {
    pub fn new(split: usize, flip: bool) -> Self {
        Self { split, flip }
    }

    /// `(conditioning, transformed)` coordinate indices.
    pub fn indices(&self, dim: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if self.split == 0 || self.split >= dim {
            return Err(Error::invalid(format!(
                "coupling split {} must lie in [1, {dim})",
                self.split
            )));
        }
        let lo: Vec<usize> = (0..self.split).collect();
        let hi: Vec<usize> = (self.split..dim).collect();
        Ok(if self.flip { (hi, lo) } else { (lo, hi) })
    }
}

/// Result of pushing a batch through a layer: the output and, for layers that
/// do not preserve volume, the per-sample `[N, 1]` log-determinant.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub out: Var,
    pub logdet: Option<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layer {
    Coupling(Coupling),
    Permutation(Permutation),
    Squeeze(CheckerboardSqueeze),
    Flatten { dim: usize },
    ActNorm(VpActNorm),
    Conv1x1(VpConv1x1Lu),
}

impl Layer {
    pub fn dim(&self) -> usize {
        match self {
            Layer::Coupling(l) => l.dim(),
            Layer::Permutation(l) => l.dim(),
            Layer::Squeeze(l) => l.dim(),
            Layer::Flatten { dim } => *dim,
            Layer::ActNorm(l) => l.dim(),
            Layer::Conv1x1(l) => l.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Coupling(_) => "coupling",
            Layer::Permutation(_) => "permutation",
            Layer::Squeeze(_) => "squeeze",
            Layer::Flatten { .. } => "flatten",
            Layer::ActNorm(_) => "act-norm",
            Layer::Conv1x1(_) => "conv1x1",
        }
    }

    pub fn is_volume_preserving(&self) -> bool {
        match self {
            Layer::Coupling(c) => c.is_volume_preserving(),
            _ => true,
        }
    }

    pub fn params(&self) -> Vec<&Array> {
        match self {
            Layer::Coupling(l) => l.params(),
            Layer::ActNorm(l) => l.params(),
            Layer::Conv1x1(l) => l.params(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        match self {
            Layer::Coupling(l) => l.params_mut(),
            Layer::ActNorm(l) => l.params_mut(),
            Layer::Conv1x1(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            Layer::Coupling(l) => l.validate(),
            Layer::Permutation(l) => l.validate(),
            Layer::Squeeze(l) => l.validate(),
            Layer::Flatten { dim } if *dim == 0 => Err(Error::invalid("flatten of zero width")),
            Layer::Flatten { .. } => Ok(()),
            Layer::ActNorm(l) => l.validate(),
            Layer::Conv1x1(l) => l.validate(),
        }
    }

    fn identity(tape: &Tape, x: Var, dim: usize) -> Result<LayerOutput> {
        let v = tape.value(x);
        if !v.is_matrix() || v.cols() != dim {
            return Err(Error::Shape {
                op: "flatten",
                lhs: v.shape().to_vec(),
                rhs: vec![dim],
            });
        }
        Ok(LayerOutput { out: x, logdet: None })
    }

    /// `p` holds the bound leaves for [`Layer::params`].
    pub fn forward_graph(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<LayerOutput> {
        match self {
            Layer::Coupling(l) => l.forward_graph(tape, p, x),
            Layer::Permutation(l) => l.forward_graph(tape, x),
            Layer::Squeeze(l) => l.forward_graph(tape, x),
            Layer::Flatten { dim } => Self::identity(tape, x, *dim),
            Layer::ActNorm(l) => l.forward_graph(tape, p, x),
            Layer::Conv1x1(l) => l.forward_graph(tape, p, x),
        }
    }

    pub fn inverse_graph(&self, tape: &mut Tape, p: &[Var], y: Var) -> Result<LayerOutput> {
        match self {
            Layer::Coupling(l) => l.inverse_graph(tape, p, y),
            Layer::Permutation(l) => l.inverse_graph(tape, y),
            Layer::Squeeze(l) => l.inverse_graph(tape, y),
            Layer::Flatten { dim } => Self::identity(tape, y, *dim),
            Layer::ActNorm(l) => l.inverse_graph(tape, p, y),
            Layer::Conv1x1(l) => l.inverse_graph(tape, p, y),
        }
    }

    fn eval(&self, x: &Array, inverse: bool) -> Result<Array> {
        let mut tape = Tape::new();
        let p = bind_constants(&mut tape, self.params())?;
        let v = tape.constant(x.clone())?;
        let o = if inverse {
            self.inverse_graph(&mut tape, &p, v)?
        } else {
            self.forward_graph(&mut tape, &p, v)?
        };
        Ok(tape.value(o.out).clone())
    }

    pub fn forward(&self, x: &Array) -> Result<Array> {
        self.eval(x, false)
    }

    pub fn inverse(&self, y: &Array) -> Result<Array> {
        self.eval(y, true)
    }
}

fn bind_constants(tape: &mut Tape, params: Vec<&Array>) -> Result<Vec<Var>> {
    params.into_iter().map(|a| tape.constant(a.clone())).collect()
}

/// Ordered stack of layers acting on `[N, D]` batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    dim: usize,
    layers: Vec<Layer>,
}

impl FlowModel {
    pub fn new(dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let model = Self { dim, layers };
        model.validate()?;
        Ok(model)
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            layers: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn is_volume_preserving(&self) -> bool {
        self.layers.iter().all(Layer::is_volume_preserving)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("flow dimension must be positive"));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| e.in_layer(k))?;
            if layer.dim() != self.dim {
                return Err(Error::invalid(format!(
                    "{} acts on {} coordinates, flow has {}",
                    layer.name(),
                    layer.dim(),
                    self.dim
                ))
                .in_layer(k));
            }
        }
        Ok(())
    }

    /// All parameter arrays in declaration order.
    pub fn params(&self) -> Vec<&Array> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|a| a.len()).sum()
    }

    /// Place every parameter on the tape, grouped per layer.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Vec<Var>>> {
        self.layers
            .iter()
            .map(|l| {
                l.params()
                    .into_iter()
                    .map(|a| {
                        if trainable {
                            tape.param(a.clone())
                        } else {
                            tape.constant(a.clone())
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn run(
        &self,
        tape: &mut Tape,
        bound: &[Vec<Var>],
        x: Var,
        inverse: bool,
    ) -> Result<LayerOutput> {
        if bound.len() != self.layers.len() {
            return Err(Error::invalid("bound parameters do not match the layer count"));
        }
        let mut h = x;
        let mut logdet: Option<Var> = None;
        let order: Box<dyn Iterator<Item = usize>> = if inverse {
            Box::new((0..self.layers.len()).rev())
        } else {
            Box::new(0..self.layers.len())
        };
        for k in order {
            let layer = &self.layers[k];
            let step = if inverse {
                layer.inverse_graph(tape, &bound[k], h)
            } else {
                layer.forward_graph(tape, &bound[k], h)
            }
            .map_err(|e| e.in_layer(k))?;
            h = step.out;
            logdet = match (logdet, step.logdet) {
                (Some(a), Some(b)) => Some(tape.add(a, b)?),
                (a, b) => a.or(b),
            };
        }
        if self.layers.is_empty() {
            let v = tape.value(x);
            if !v.is_matrix() || v.cols() != self.dim {
                return Err(Error::Shape {
                    op: "flow",
                    lhs: v.shape().to_vec(),
                    rhs: vec![self.dim],
                });
            }
        }
        Ok(LayerOutput { out: h, logdet })
    }

    /// `x = f(z)`; `logdet` is `log|det df/dz|` when any layer changes volume.
    pub fn forward_graph(&self, tape: &mut Tape, bound: &[Vec<Var>], z: Var) -> Result<LayerOutput> {
        self.run(tape, bound, z, false)
    }

    /// `z = g(x)`; `logdet` is `log|det dg/dx|` when any layer changes volume.
    pub fn inverse_graph(&self, tape: &mut Tape, bound: &[Vec<Var>], x: Var) -> Result<LayerOutput> {
        self.run(tape, bound, x, true)
    }

    fn eval(&self, x: &Array, inverse: bool) -> Result<(Array, Array)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let v = tape.constant(x.clone())?;
        let o = self.run(&mut tape, &bound, v, inverse)?;
        let n = tape.value(o.out).rows();
        let ld = match o.logdet {
            Some(l) => tape.value(l).clone(),
            None => Array::zeros(&[n, 1]),
        };
        Ok((tape.value(o.out).clone(), ld))
    }

    pub fn forward(&self, z: &Array) -> Result<Array> {
        Ok(self.eval(z, false)?.0)
    }

    pub fn inverse(&self, x: &Array) -> Result<Array> {
        Ok(self.eval(x, true)?.0)
    }

    /// `(f(z), log|det df/dz|)` with one log-determinant per row.
    pub fn forward_with_logdet(&self, z: &Array) -> Result<(Array, Array)> {
        self.eval(z, false)
    }

    /// `(g(x), log|det dg/dx|)` with one log-determinant per row.
    pub fn inverse_with_logdet(&self, x: &Array) -> Result<(Array, Array)> {
        self.eval(x, true)
    }
}

/// Declarative description of one layer, resolved against a seeded RNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Coupling {
        mask: Mask,
        hidden: Vec<usize>,
    },
    /// Random shuffle of single coordinates, or of whole channels when
    /// `channels` is set.
    Permutation {
        #[serde(default)]
        channels: Option<usize>,
    },
    Squeeze { channels: usize, height: usize, width: usize },
    Flatten,
    ActNorm { channels: usize, spatial: usize },
    Conv1x1 { channels: usize, spatial: usize },
}

fn default_true() -> bool {
    true
}

fn default_slope() -> f64 {
    DEFAULT_SLOPE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub dim: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_true")]
    pub volume_preserving: bool,
    #[serde(default = "default_slope")]
    pub slope: f64,
}

impl FlowSpec {
    /// `blocks` couplings with the same split and alternating conditioning
    /// halves, starting with the leading block conditioning.
    pub fn alternating(dim: usize, blocks: usize, split: usize, hidden: &[usize]) -> Self {
        let layers = (0..blocks)
            .map(|k| LayerSpec::Coupling {
                mask: Mask::new(split, k % 2 == 1),
                hidden: hidden.to_vec(),
            })
            .collect();
        Self {
            dim,
            layers,
            volume_preserving: true,
            slope: DEFAULT_SLOPE,
        }
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<FlowModel> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, spec) in self.layers.iter().enumerate() {
            layers.push(self.build_layer(spec, rng).map_err(|e| e.in_layer(k))?);
        }
        FlowModel::new(self.dim, layers)
    }

    fn build_layer<R: Rng + ?Sized>(&self, spec: &LayerSpec, rng: &mut R) -> Result<Layer> {
        let d = self.dim;
        Ok(match spec {
            LayerSpec::Coupling { mask, hidden } => Layer::Coupling(Coupling::new(
                d,
                *mask,
                hidden,
                self.volume_preserving,
                self.slope,
                rng,
            )?),
            LayerSpec::Permutation { channels: None } => {
                Layer::Permutation(Permutation::random(d, rng))
            }
            LayerSpec::Permutation {
                channels: Some(c),
            } => {
                if *c == 0 || d % c != 0 {
                    return Err(Error::invalid(format!(
                        "{c} channels do not divide dimension {d}"
                    )));
                }
                let s = d / c;
                let order = Permutation::random(*c, rng);
                let idx = order
                    .indices()
                    .iter()
                    .flat_map(|&ch| ch * s..(ch + 1) * s)
                    .collect();
                Layer::Permutation(Permutation::new(idx)?)
            }
            LayerSpec::Squeeze {
                channels,
                height,
                width,
            } => Layer::Squeeze(CheckerboardSqueeze::new(*channels, *height, *width)?),
            LayerSpec::Flatten => Layer::Flatten { dim: d },
            LayerSpec::ActNorm { channels, spatial } => {
                Layer::ActNorm(VpActNorm::new(*channels, *spatial)?)
            }
            LayerSpec::Conv1x1 { channels, spatial } => {
                Layer::Conv1x1(VpConv1x1Lu::new(*channels, *spatial, rng)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array {
        let data = (0..n * d)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Array::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn mask_indices() {
        assert_eq!(Mask::new(1, false).indices(3).unwrap(), (vec![0], vec![1, 2]));
        assert_eq!(Mask::new(1, true).indices(3).unwrap(), (vec![1, 2], vec![0]));
        assert!(Mask::new(0, false).indices(3).is_err());
        assert!(Mask::new(3, false).indices(3).is_err());
    }

    #[test]
    fn empty_flow_is_identity() {
        let f = FlowModel::identity(3);
        let x = Array::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(f.forward(&x).unwrap(), x);
        assert_eq!(f.inverse(&x).unwrap(), x);
        assert!(f.forward(&Array::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn two_coupling_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = FlowSpec::alternating(2, 2, 1, &[24, 24, 24]).build(&mut rng).unwrap();
        let z = randn(&mut rng, 50, 2);
        let back = f.inverse(&f.forward(&z).unwrap()).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-9);
    }

    #[test]
    fn layer_errors_carry_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layers = FlowSpec::alternating(3, 2, 1, &[4]).build(&mut rng).unwrap().layers;
        let mut conv = VpConv1x1Lu::new(3, 1, &mut rng).unwrap();
        conv.params_mut()[2].data_mut().copy_from_slice(&[-40.0, 20.0, 20.0]);
        layers.push(Layer::Conv1x1(conv));
        let f = FlowModel::new(3, layers).unwrap();
        match f.forward(&Array::zeros(&[1, 3])) {
            Err(Error::Layer { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected a layer error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_layer_width_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = FlowSpec {
            dim: 4,
            layers: vec![LayerSpec::Squeeze {
                channels: 1,
                height: 2,
                width: 4,
            }],
            volume_preserving: true,
            slope: DEFAULT_SLOPE,
        };
        assert!(spec.build(&mut rng).is_err());
    }

    #[test]
    fn spec_json_shape() {
        let spec: FlowSpec = serde_json::from_str(
            r#"{"dim": 4, "layers": [
                {"kind": "coupling", "mask": {"split": 2}, "hidden": [8]},
                {"kind": "permutation", "channels": 2},
                {"kind": "coupling", "mask": {"split": 2, "flip": true}, "hidden": [8]}
            ]}"#,
        )
        .unwrap();
        assert!(spec.volume_preserving);
        assert_eq!(spec.layers.len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = spec.build(&mut rng).unwrap();
        let json = serde_json::to_string(&f).unwrap();
        let back: FlowModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn nonvp_logdet_is_negated_by_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut spec = FlowSpec::alternating(3, 3, 1, &[8]);
        spec.volume_preserving = false;
        let f = spec.build(&mut rng).unwrap();
        assert!(!f.is_volume_preserving());
        let z = randn(&mut rng, 4, 3);
        let (x, fwd) = f.forward_with_logdet(&z).unwrap();
        let (_, inv) = f.inverse_with_logdet(&x).unwrap();
        for i in 0..4 {
            assert!((fwd.get(i, 0) + inv.get(i, 0)).abs() < 1e-10);
        }
    }
}
