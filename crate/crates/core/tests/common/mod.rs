//! Helpers shared by the property suite and the acceptance harness.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spreadflow::diffcore::{grad_check, Axis};
use spreadflow::flow::{CheckerboardSqueeze, Coupling, Permutation, VpActNorm, VpConv1x1Lu};
use spreadflow::prior::noisy_logpdf_graph;
use spreadflow::{Array, Layer, Mask, Result, Tape, Var};

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Array::new(vec![rows, cols], data).unwrap()
}

fn jitter(layer: &mut Layer, rng: &mut ChaCha8Rng, scale: f64) {
    for p in layer.params_mut() {
        for v in p.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// One randomly initialised layer of every kind, with perturbed parameters.
pub fn layer_zoo(seed: u64) -> Vec<Layer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let split = rng.gen_range(1..d);
    let mut layers = vec![
        Layer::Coupling(Coupling::new(d, Mask::new(split, false), &[6, 6], true, 0.2, &mut rng).unwrap()),
        Layer::Coupling(Coupling::new(d, Mask::new(split, true), &[6, 6], true, 0.2, &mut rng).unwrap()),
        Layer::Coupling(Coupling::new(d, Mask::new(split, false), &[6], false, 0.2, &mut rng).unwrap()),
        Layer::Permutation(Permutation::random(d, &mut rng)),
        Layer::Squeeze(CheckerboardSqueeze::new(2, 2, 2).unwrap()),
        Layer::Flatten { dim: d },
        Layer::ActNorm(VpActNorm::new(4, 2).unwrap()),
        Layer::Conv1x1(VpConv1x1Lu::new(4, 2, &mut rng).unwrap()),
    ];
    for l in &mut layers {
        jitter(l, &mut rng, 0.3);
    }
    layers
}

pub fn layer_label(l: &Layer) -> String {
    match l {
        Layer::Coupling(c) if !c.is_volume_preserving() => "coupling (free volume)".into(),
        Layer::Coupling(c) => format!("coupling (flip={})", c.mask().flip),
        other => other.name().into(),
    }
}

/// Packs the input batch and every parameter array into one row so a single
/// finite-difference sweep covers all of them.
fn unpack(tape: &mut Tape, p: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
    let mut out = Vec::new();
    let mut at = 0;
    for s in shapes {
        let n = s[0] * s[1];
        let piece = tape.slice(p, Axis::Cols, at, n)?;
        out.push(tape.reshape(piece, s[0], s[1])?);
        at += n;
    }
    Ok(out)
}

/// Relative error between tape and central-difference gradients of
/// `sum(w * out) + c * sum(logdet)` with respect to the input and all
/// parameters, in the given direction.
pub fn layer_grad_error(layer: &Layer, x: &Array, inverse: bool, rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = randn(rng, x.rows(), x.cols());
    let c: f64 = rng.sample(StandardNormal);
    let mut shapes = vec![x.shape().to_vec()];
    let mut point = x.data().to_vec();
    for p in layer.params() {
        shapes.push(p.shape().to_vec());
        point.extend_from_slice(p.data());
    }
    grad_check(
        |tape, p| {
            let parts = unpack(tape, p, &shapes)?;
            let o = if inverse {
                layer.inverse_graph(tape, &parts[1..], parts[0])?
            } else {
                layer.forward_graph(tape, &parts[1..], parts[0])?
            };
            let wv = tape.constant(w.clone())?;
            let prod = tape.mul(o.out, wv)?;
            let mut total = tape.sum(prod)?;
            if let Some(ld) = o.logdet {
                let s = tape.sum(ld)?;
                let s = tape.scale(s, c)?;
                total = tape.add(total, s)?;
            }
            Ok(total)
        },
        &point,
        1e-6,
    )
}

/// Gradient check of the noisy prior log-density in `A` and `z`.
pub fn prior_grad_error(rng: &mut ChaCha8Rng, d: usize, n: usize, sigma: f64) -> Result<f64> {
    let mut a = randn(rng, d, d);
    for i in 0..d {
        for j in i + 1..d {
            a.set(i, j, 0.0);
        }
    }
    let z = randn(rng, n, d);
    let shapes = vec![vec![d, d], vec![n, d]];
    let mut point = a.data().to_vec();
    point.extend_from_slice(z.data());
    grad_check(
        |tape, p| {
            let parts = unpack(tape, p, &shapes)?;
            let lp = noisy_logpdf_graph(tape, parts[0], parts[1], sigma)?;
            tape.sum(lp)
        },
        &point,
        1e-6,
    )
}

/// `log |det J|` of the layer at a single point, from a central-difference
/// Jacobian and an independent LU determinant.
pub fn fd_logdet(layer: &Layer, x: &[f64], inverse: bool) -> Result<f64> {
    let d = x.len();
    let eps = 1e-6;
    let f = |v: &[f64]| -> Result<Vec<f64>> {
        let a = Array::row(v);
        let o = if inverse { layer.inverse(&a)? } else { layer.forward(&a)? };
        Ok(o.into_data())
    };
    let mut jac = DMatrix::<f64>::zeros(d, d);
    let mut p = x.to_vec();
    for j in 0..d {
        p[j] = x[j] + eps;
        let up = f(&p)?;
        p[j] = x[j] - eps;
        let down = f(&p)?;
        p[j] = x[j];
        for i in 0..d {
            jac[(i, j)] = (up[i] - down[i]) / (2.0 * eps);
        }
    }
    Ok(jac.lu().determinant().abs().ln())
}

/// Reported per-row log-determinant of a single layer (zero when the layer
/// is volume preserving).
pub fn reported_logdet(layer: &Layer, x: &Array, inverse: bool) -> Result<Array> {
    let mut tape = Tape::new();
    let params: Vec<Var> = layer
        .params()
        .into_iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<_>>()?;
    let xv = tape.constant(x.clone())?;
    let o = if inverse {
        layer.inverse_graph(&mut tape, &params, xv)?
    } else {
        layer.forward_graph(&mut tape, &params, xv)?
    };
    Ok(match o.logdet {
        Some(l) => tape.value(l).clone(),
        None => Array::zeros(&[x.rows(), 1]),
    })
}

pub fn roundtrip_error(layer: &Layer, x: &Array) -> Result<f64> {
    let y = layer.forward(x)?;
    let back = layer.inverse(&y)?;
    let z = layer.inverse(x)?;
    let fwd = layer.forward(&z)?;
    Ok(back.max_abs_diff(x).max(fwd.max_abs_diff(x)))
}
