//! Adam with bias correction. Moment buffers are keyed by parameter name
//! and updated in sorted-name order, so steps are deterministic.

use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::Result;
use crate::params::ParameterStore;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    /// Apply one update. Requires exclusive access to the store; parameters
    /// without a gradient entry decay their moments toward zero.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let correction1 = 1.0 - self.beta1.powi(self.t as i32);
        let correction2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let numel = store.get(&name)?.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let zero;
            let g: &[f64] = match grads.get(&name) {
                Some(t) => t.data(),
                None => {
                    zero = vec![0.0; numel];
                    &zero
                }
            };
            let data = store.tensor_mut(&name)?.data_mut();
            for i in 0..numel {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.bump_step();
        Ok(())
    }

    pub fn updates_applied(&self) -> u64 {
        self.t
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::evaluate_with_gradients;
    use crate::tensor::Tensor;

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::scalar(3.0)).unwrap();
        let mut adam = Adam::new();
        let loss_at = |store: &ParameterStore| {
            evaluate_with_gradients(store, |tape| {
                let x = tape.param("x")?;
                let sq = tape.mul(x, x)?;
                tape.sum_all(sq)
            })
        };
        let (initial, _) = loss_at(&store).unwrap();
        for _ in 0..200 {
            let (_, grads) = loss_at(&store).unwrap();
            adam.step(&mut store, &grads, 0.05).unwrap();
        }
        let (final_loss, _) = loss_at(&store).unwrap();
        assert!(final_loss < initial * 0.01, "{final_loss} vs {initial}");
        assert_eq!(store.step(), 200);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::scalar(2.5)).unwrap();
        let (_, grads) = evaluate_with_gradients(&store, |tape| {
            let x = tape.param("x")?;
            tape.sum_all(x)
        })
        .unwrap();
        let mut adam = Adam::new();
        adam.step(&mut store, &grads, 0.0).unwrap();
        assert_eq!(store.get("x").unwrap().data()[0], 2.5);
    }
}
