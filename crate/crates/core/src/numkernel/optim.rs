use super::Tensor;
use crate::{Error, Result};

/// AdamW with bias correction and decoupled weight decay.
///
/// One step does `w -= lr * wd * w` followed by the Adam update
/// `w -= lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` are matched by position and
    /// must keep the same order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dims() != g.dims() {
                return Err(Error::shape(format!(
                    "parameter {i} has dims {:?} but its gradient has {:?}",
                    p.dims(),
                    g.dims()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::shape("parameter layout changed between AdamW steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(w: f64) -> Tensor {
        Tensor::scalar(w)
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut w = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = w.clone();
        let g = Tensor::zeros(&[3]);
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..5 {
            opt.step(&mut [&mut w], &[&g]).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_closed_form() {
        // loss w^2 at w = 1: g = 2, m_hat = 2, v_hat = 4.
        let mut w = one(1.0);
        let g = one(2.0);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut [&mut w], &[&g]).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((w.item() - expected).abs() < 1e-15);
        assert!((w.item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_closed_form() {
        let mut w = one(1.0);
        let g = one(0.0);
        let mut opt = AdamW::new(0.1, 0.1);
        opt.step(&mut [&mut w], &[&g]).unwrap();
        assert!((w.item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut w = Tensor::new(vec![2], vec![0.123, -4.5]).unwrap();
        let before = w.clone();
        let g = Tensor::new(vec![2], vec![1.0, -3.0]).unwrap();
        let mut opt = AdamW::new(0.0, 0.01);
        opt.step(&mut [&mut w], &[&g]).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut w = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut opt = AdamW::new(0.1, 0.0);
        assert!(matches!(
            opt.step(&mut [&mut w], &[&g]),
            Err(Error::Shape(_))
        ));
    }
}
