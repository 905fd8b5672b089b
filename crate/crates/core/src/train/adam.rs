use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::error::{Error, Result};

/// Adam with bias correction. Weight decay enters as `lambda * theta` added
/// to the gradient, per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(shapes: &[&Array]) -> Self {
        let zeros: Vec<Array> = shapes.iter().map(|a| Array::zeros(a.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `decay[i]` is the weight decay of parameter `i`.
    pub fn step(
        &mut self,
        params: &mut [&mut Array],
        grads: &[Array],
        lr: f64,
        decay: &[f64],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || decay.len() != self.m.len()
        {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {} parameters, {} gradients, {} decays",
                self.m.len(),
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let lam = decay[i];
            let pd = p.data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for k in 0..pd.len() {
                let g = grads[i].data()[k] + lam * pd[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                pd[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Array::scalar(0.5);
        let mut opt = Adam::new(&[&p]);
        opt.step(&mut [&mut p], &[Array::scalar(1.0)], 1e-3, &[0.0]).unwrap();
        let want = 0.5 - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p.item() - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Array::row(&[1.0, -2.0]);
        let orig = p.clone();
        let mut opt = Adam::new(&[&p]);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[Array::zeros(&[1, 2])], 1e-2, &[0.0]).unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn quadratic_bowl() {
        let mut p = Array::scalar(1.0);
        let mut opt = Adam::new(&[&p]);
        for _ in 0..500 {
            let g = Array::scalar(2.0 * p.item());
            opt.step(&mut [&mut p], &[g], 1e-2, &[0.0]).unwrap();
        }
        assert!(p.item().abs() < 1e-3, "{}", p.item());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = Array::scalar(1.0);
        let mut b = Array::scalar(1.0);
        let mut opt = Adam::new(&[&a, &b]);
        let err = opt
            .step(
                &mut [&mut a, &mut b],
                &[Array::scalar(0.0), Array::scalar(f64::NAN)],
                1e-3,
                &[0.0, 0.0],
            )
            .unwrap_err();
        assert!(err.to_string().contains("parameter 1"));
        assert_eq!(opt.steps(), 0);
    }
}
