//! Adam optimizer with name-keyed state.
//!
//! Parameters are addressed by stable string names (e.g.
//! `enc2.conv1.weight`); the optimizer lazily creates first/second-moment
//! slots per name and validates shapes on every use, so a renamed or
//! reshaped parameter fails loudly instead of silently reusing stale state.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    /// Standard coefficients: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter. Call once per optimization step,
    /// before applying the step to any parameter.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one Adam update to a single parameter tensor.
    pub fn apply(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if self.t == 0 {
            return Err(Error::ContractViolation(
                "Adam::apply called before begin_step".into(),
            ));
        }
        if param.shape() != grad.shape() {
            return Err(Error::InvalidArgument(format!(
                "adam: parameter {name} has shape {:?} but gradient {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        let n = param.len();
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        if slot.m.len() != n {
            return Err(Error::InvalidArgument(format!(
                "adam: parameter {name} changed size from {} to {n}",
                slot.m.len()
            )));
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With g = 1 the bias-corrected moments are exactly 1, so the first
        // update is −lr/(1 + ε·…) ≈ −lr.
        let mut adam = Adam::new(0.1);
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        adam.begin_step();
        adam.apply("p", &mut p, &g).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-8, "got {}", p.data()[0]);
    }

    #[test]
    fn apply_before_begin_step_is_rejected() {
        let mut adam = Adam::new(0.1);
        let mut p = Tensor::zeros(&[1]);
        let g = Tensor::zeros(&[1]);
        assert!(matches!(
            adam.apply("p", &mut p, &g),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn converges_on_separable_quadratic() {
        // f(x) = Σ (x_i − target_i)², gradient 2(x − target).
        let target = [3.0, -1.5, 0.25];
        let mut adam = Adam::new(0.05);
        let mut x = Tensor::zeros(&[3]);
        for _ in 0..2000 {
            let g: Vec<f64> = x
                .data()
                .iter()
                .zip(&target)
                .map(|(x, t)| 2.0 * (x - t))
                .collect();
            let g = Tensor::from_vec(&[3], g).unwrap();
            adam.begin_step();
            adam.apply("x", &mut x, &g).unwrap();
        }
        for (x, t) in x.data().iter().zip(&target) {
            assert!((x - t).abs() < 1e-3, "{x} vs {t}");
        }
    }

    #[test]
    fn state_is_per_name() {
        let mut adam = Adam::new(0.1);
        let mut a = Tensor::zeros(&[1]);
        let mut b = Tensor::zeros(&[2]);
        let ga = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let gb = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        adam.begin_step();
        adam.apply("a", &mut a, &ga).unwrap();
        adam.apply("b", &mut b, &gb).unwrap();
        // Reusing a name with a different size is an error.
        let mut b_bad = Tensor::zeros(&[3]);
        let gb_bad = Tensor::zeros(&[3]);
        assert!(adam.apply("b", &mut b_bad, &gb_bad).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = Adam::new(0.1);
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        adam.begin_step();
        assert!(adam.apply("p", &mut p, &g).is_err());
    }
}
