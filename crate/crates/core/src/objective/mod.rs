//! Spread-KL training objective and the fixed-prior likelihood baseline.
//!
//! With `z = g(x)` and `z~ = z + sigma_z * eps`, the spread KL between the
//! pushed-forward data and the prior equals, up to constants,
//!
//! ```text
//! E[log q~(z~)] - E[log p~(z~)]        p~ = N(0, A A^T + sigma_z^2 I)
//! ```
//!
//! The second expectation (Term 2) has a closed-form integrand. The first
//! (Term 1, a negative entropy) is either dropped, which minimizes an upper
//! bound, or approximated by a Gaussian mixture centred on the batch.
//! Reported losses omit the constants.

mod gaussian;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use gaussian::{gaussian_cross_entropy, gaussian_entropy, gaussian_kl, gaussian_mutual_info};

use crate::data::randn;
use crate::diffcore::{Array, Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::prior::{noisy_logpdf_graph, ManifoldPrior};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveMode {
    /// Drop the entropy term.
    #[default]
    UpperBound,
    /// Keep the entropy term, estimated by a mixture over the batch.
    ApproxEntropy,
}

impl FromStr for ObjectiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upper-bound" => Ok(Self::UpperBound),
            "approx-entropy" | "approximate-entropy" => Ok(Self::ApproxEntropy),
            other => Err(Error::config(
                "mode",
                format!("expected upper-bound or approx-entropy, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::UpperBound => "upper-bound",
            Self::ApproxEntropy => "approx-entropy",
        })
    }
}

/// Loss value split into its estimated terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean `log p~(z~)`.
    pub term2: f64,
    /// Mixture estimate of `-H(z~)`; present in approximate-entropy mode.
    pub term1: Option<f64>,
    pub batch: usize,
}

/// Nodes of a loss built on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub term2: Var,
    pub term1: Option<Var>,
}

impl LossGraph {
    pub fn breakdown(&self, tape: &Tape, batch: usize) -> LossBreakdown {
        LossBreakdown {
            total: tape.value(self.total).item(),
            term2: tape.value(self.term2).item(),
            term1: self.term1.map(|t| tape.value(t).item()),
            batch,
        }
    }
}

fn check_rows_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if let Some(i) = tape.value(v).data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{what} of sample {i}")));
    }
    Ok(())
}

/// Mean of `log p~(z + sigma * eps)` over the batch. Returns the scalar and
/// the noisy points.
pub fn term2_graph(
    tape: &mut Tape,
    z: Var,
    a: Var,
    sigma: f64,
    eps: &Array,
) -> Result<(Var, Var)> {
    if eps.shape() != tape.value(z).shape() {
        return Err(Error::Shape {
            op: "term2",
            lhs: tape.value(z).shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let noise = tape.constant(eps.scale(sigma))?;
    let zt = tape.add(z, noise)?;
    let lp = noisy_logpdf_graph(tape, a, zt, sigma)?;
    check_rows_finite(tape, lp, "log-density")?;
    Ok((tape.mean(lp)?, zt))
}

/// Mixture estimate of the negative entropy,
/// `(1/N) sum_n log (1/M) sum_m N(q_n; c_m, sigma^2 I)`, with queries `q`
/// (`[N, D]`) and mixture centres `c` (`[M, D]`).
pub fn entropy_mixture_graph(tape: &mut Tape, centres: Var, queries: Var, sigma: f64) -> Result<Var> {
    let (c, q) = (tape.value(centres), tape.value(queries));
    if c.cols() != q.cols() || c.rows() == 0 || q.rows() == 0 {
        return Err(Error::Shape {
            op: "entropy-mixture",
            lhs: c.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let (m, d) = (c.rows(), c.cols());
    let q2 = tape.square(queries)?;
    let qq = tape.sum_axis(q2, Axis::Cols)?;
    let c2 = tape.square(centres)?;
    let cc = tape.sum_axis(c2, Axis::Cols)?;
    let cc = tape.transpose(cc)?;
    let ct = tape.transpose(centres)?;
    let cross = tape.matmul(queries, ct)?;
    let cross = tape.scale(cross, -2.0)?;
    let d2 = tape.add(qq, cc)?;
    let d2 = tape.add(d2, cross)?;
    let logk = tape.scale(d2, -0.5 / (sigma * sigma))?;
    let lse = tape.logsumexp(logk, Axis::Cols)?;
    let norm = -(m as f64).ln() - 0.5 * d as f64 * (2.0 * PI * sigma * sigma).ln();
    let per = tape.offset(lse, norm)?;
    tape.mean(per)
}

/// Plain evaluation of [`entropy_mixture_graph`], streaming over queries so
/// large sample sets fit in memory. Distances are formed coordinate-wise.
pub fn entropy_mixture_estimate(centres: &Array, queries: &Array, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("mixture bandwidth must be positive"));
    }
    if centres.cols() != queries.cols() || centres.rows() == 0 || queries.rows() == 0 {
        return Err(Error::Shape {
            op: "entropy-mixture",
            lhs: centres.shape().to_vec(),
            rhs: queries.shape().to_vec(),
        });
    }
    let (m, d) = (centres.rows(), centres.cols());
    let norm = -(m as f64).ln() - 0.5 * d as f64 * (2.0 * PI * sigma * sigma).ln();
    let inv = -0.5 / (sigma * sigma);
    let mut logk = vec![0.0; m];
    let mut total = 0.0;
    for q in queries.iter_rows() {
        for (lk, c) in logk.iter_mut().zip(centres.iter_rows()) {
            let d2: f64 = q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            *lk = inv * d2;
        }
        let mx = logk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logk.iter().map(|l| (l - mx).exp()).sum();
        total += mx + s.ln() + norm;
    }
    Ok(total / queries.rows() as f64)
}

/// Spread-KL loss for a batch. `bound` are the flow's bound parameters and
/// `a` the bound prior factor; `eps` is the `[N, D]` standard normal noise.
#[allow(clippy::too_many_arguments)]
pub fn spread_kl_graph(
    tape: &mut Tape,
    model: &FlowModel,
    bound: &[Vec<Var>],
    a: Var,
    sigma: f64,
    x: Var,
    eps: &Array,
    mode: ObjectiveMode,
) -> Result<LossGraph> {
    let z = model.inverse_graph(tape, bound, x)?.out;
    let (term2, zt) = term2_graph(tape, z, a, sigma, eps)?;
    let neg = tape.neg(term2)?;
    match mode {
        ObjectiveMode::UpperBound => Ok(LossGraph {
            total: neg,
            term2,
            term1: None,
        }),
        ObjectiveMode::ApproxEntropy => {
            let term1 = entropy_mixture_graph(tape, z, zt, sigma)?;
            let total = tape.add(term1, neg)?;
            Ok(LossGraph {
                total,
                term2,
                term1: Some(term1),
            })
        }
    }
}

fn plain_loss(
    x: &Array,
    model: &FlowModel,
    prior: &ManifoldPrior,
    eps: &Array,
    mode: ObjectiveMode,
) -> Result<LossBreakdown> {
    if x.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let a = tape.constant(prior.factor().clone())?;
    let xv = tape.constant(x.clone())?;
    let g = spread_kl_graph(&mut tape, model, &bound, a, prior.sigma_z(), xv, eps, mode)?;
    Ok(g.breakdown(&tape, x.rows()))
}

/// Monte Carlo estimate of `E[log p~(g(x) + sigma_z eps)]` with one noise
/// draw per sample.
pub fn term2_estimate<R: Rng + ?Sized>(
    x: &Array,
    model: &FlowModel,
    prior: &ManifoldPrior,
    rng: &mut R,
) -> Result<f64> {
    let eps = randn(rng, x.rows(), x.cols());
    term2_with_noise(x, model, prior, &eps)
}

/// [`term2_estimate`] with the noise supplied by the caller.
pub fn term2_with_noise(
    x: &Array,
    model: &FlowModel,
    prior: &ManifoldPrior,
    eps: &Array,
) -> Result<f64> {
    Ok(plain_loss(x, model, prior, eps, ObjectiveMode::UpperBound)?.term2)
}

pub fn spread_kl_loss<R: Rng + ?Sized>(
    x: &Array,
    model: &FlowModel,
    prior: &ManifoldPrior,
    mode: ObjectiveMode,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let eps = randn(rng, x.rows(), x.cols());
    plain_loss(x, model, prior, &eps, mode)
}

/// `-(1/N) sum_n [log N(g(x_n); 0, I) + log|det dg/dx|_n]`.
pub fn fixed_prior_nll_graph(
    tape: &mut Tape,
    model: &FlowModel,
    bound: &[Vec<Var>],
    x: Var,
) -> Result<Var> {
    let d = model.dim() as f64;
    let out = model.inverse_graph(tape, bound, x)?;
    let z2 = tape.square(out.out)?;
    let q = tape.sum_axis(z2, Axis::Cols)?;
    let q = tape.scale(q, 0.5)?;
    let mut nll = tape.offset(q, 0.5 * d * (2.0 * PI).ln())?;
    if let Some(ld) = out.logdet {
        nll = tape.sub(nll, ld)?;
    }
    check_rows_finite(tape, nll, "negative log-likelihood")?;
    tape.mean(nll)
}

pub fn fixed_prior_nll(x: &Array, model: &FlowModel) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let xv = tape.constant(x.clone())?;
    let v = fixed_prior_nll_graph(&mut tape, model, &bound, xv)?;
    Ok(tape.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_component_mixture() {
        let z = Array::scalar(0.7);
        let v = entropy_mixture_estimate(&z, &z, 0.1).unwrap();
        assert!((v - 1.383647).abs() < 1e-6, "{v}");
        assert!((v + 0.5 * (2.0 * PI * 0.01).ln()).abs() < 1e-12);
        let two = Array::column(&[0.7, 0.7]);
        assert_eq!(entropy_mixture_estimate(&two, &two, 0.1).unwrap(), v);
    }

    #[test]
    fn graph_and_streaming_mixture_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = randn(&mut rng, 30, 3);
        let q = randn(&mut rng, 20, 3);
        let want = entropy_mixture_estimate(&c, &q, 0.4).unwrap();
        let mut t = Tape::new();
        let (cv, qv) = (t.constant(c).unwrap(), t.constant(q).unwrap());
        let got = entropy_mixture_graph(&mut t, cv, qv, 0.4).unwrap();
        assert!((t.value(got).item() - want).abs() < 1e-10);
    }

    #[test]
    fn zero_noise_term2_is_the_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = crate::flow::FlowSpec::alternating(2, 2, 1, &[8]).build(&mut rng).unwrap();
        let prior = ManifoldPrior::init_identity(2, 0.3).unwrap();
        let x = Array::row(&[0.4, -1.2]);
        let got = term2_with_noise(&x, &model, &prior, &Array::zeros(&[1, 2])).unwrap();
        let want = prior.noisy_logpdf(&model.inverse(&x).unwrap()).unwrap().item();
        assert_eq!(got, want);
    }

    #[test]
    fn identity_model_baseline_nll() {
        let v = fixed_prior_nll(&Array::zeros(&[3, 2]), &FlowModel::identity(2)).unwrap();
        assert!((v - 1.837877).abs() < 1e-6);
    }

    #[test]
    fn upper_bound_is_negated_term2() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prior = ManifoldPrior::init_identity(2, 1e-4).unwrap();
        let x = Array::zeros(&[5, 2]);
        let l = spread_kl_loss(&x, &FlowModel::identity(2), &prior, ObjectiveMode::UpperBound, &mut rng)
            .unwrap();
        assert_eq!(l.total, -l.term2);
        assert!(l.term1.is_none());
        let l = spread_kl_loss(&x, &FlowModel::identity(2), &prior, ObjectiveMode::ApproxEntropy, &mut rng)
            .unwrap();
        assert_eq!(l.total, l.term1.unwrap() - l.term2);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("upper-bound".parse::<ObjectiveMode>().unwrap(), ObjectiveMode::UpperBound);
        assert_eq!("approx-entropy".parse::<ObjectiveMode>().unwrap(), ObjectiveMode::ApproxEntropy);
        assert!("entropy".parse::<ObjectiveMode>().is_err());
    }
}
