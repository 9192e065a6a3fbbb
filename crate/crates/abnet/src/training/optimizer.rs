use std::collections::BTreeMap;

use crate::numerics::{Scalar, Tensor};
use crate::Result;

/// Adam with bias correction, one (m, v) pair per trainable tensor.
#[derive(Clone, Debug)]
pub struct Adam<F: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    state: BTreeMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once per optimizer step,
    /// before updating the step's tensors.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply the update for one named tensor. Tensors absent from the
    /// current graph pass a zero gradient; their moments still decay.
    pub fn update(&mut self, name: &str, param: &mut Tensor<F>, grad: &Tensor<F>) -> Result<()> {
        debug_assert_eq!(param.shape(), grad.shape());
        let n = param.numel();
        let (m, v) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (vec![F::ZERO; n], vec![F::ZERO; n]));
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::ONE;
        // Folding the bias correction into the step size keeps the inner
        // loop to two multiplies.
        let corrected_lr = F::from_f64(
            self.lr * (1.0 - self.beta2.powi(self.step as i32)).sqrt()
                / (1.0 - self.beta1.powi(self.step as i32)),
        );
        let eps = F::from_f64(self.eps);
        let data = param.data_mut();
        for i in 0..n {
            let g = grad.data()[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            data[i] -= corrected_lr * m[i] / (v[i].sqrt() + eps);
        }
        Ok(())
    }
}
