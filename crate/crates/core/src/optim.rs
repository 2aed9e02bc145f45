//! Momentum-free adaptive optimizer (RMSProp) with a fixed learning rate.

use std::collections::HashMap;

use crate::error::Result;
use crate::gradcheck::ParamStore;
use crate::tensor::Tensor2D;

/// RMSProp: per-parameter squared-gradient average, no momentum, no schedule.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    second_moment: HashMap<String, Tensor2D>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        RmsProp { lr, decay: 0.99, eps: 1e-8, second_moment: HashMap::new() }
    }

    /// Apply one update from the store's accumulated gradients, skipping
    /// any name in `frozen`.
    pub fn step(&mut self, store: &mut ParamStore, frozen: &[&str]) -> Result<()> {
        let names: Vec<String> = store
            .names()
            .iter()
            .filter(|n| !frozen.contains(&n.as_str()))
            .cloned()
            .collect();
        for name in names {
            let grad = store.grad(&name)?.clone();
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor2D::zeros(grad.rows, grad.cols));
            let value = store.get_mut(&name)?;
            for i in 0..grad.data.len() {
                let g = grad.data[i];
                v.data[i] = self.decay * v.data[i] + (1.0 - self.decay) * g * g;
                value.data[i] -= self.lr * g / (v.data[i].sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor2D::from_vec(1, 1, vec![4.0])).unwrap();
        let mut opt = RmsProp::new(0.05);
        for _ in 0..400 {
            store.zero_grads();
            let x = store.get("x").unwrap().data[0];
            store
                .accumulate_grad("x", &Tensor2D::from_vec(1, 1, vec![2.0 * x]))
                .unwrap();
            opt.step(&mut store, &[]).unwrap();
        }
        assert!(store.get("x").unwrap().data[0].abs() < 1e-2);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor2D::from_vec(1, 1, vec![1.0])).unwrap();
        store.insert("b", Tensor2D::from_vec(1, 1, vec![1.0])).unwrap();
        store.accumulate_grad("a", &Tensor2D::from_vec(1, 1, vec![1.0])).unwrap();
        store.accumulate_grad("b", &Tensor2D::from_vec(1, 1, vec![1.0])).unwrap();
        let mut opt = RmsProp::new(0.1);
        opt.step(&mut store, &["a"]).unwrap();
        assert_eq!(store.get("a").unwrap().data[0], 1.0);
        assert_ne!(store.get("b").unwrap().data[0], 1.0);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_identical() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2D::from_vec(2, 2, vec![0.1, -0.2, 0.3, 0.7])).unwrap();
        let before = store.get("w").unwrap().clone();
        store.accumulate_grad("w", &Tensor2D::from_vec(2, 2, vec![1.0; 4])).unwrap();
        let mut opt = RmsProp::new(0.0);
        opt.step(&mut store, &[]).unwrap();
        assert_eq!(store.get("w").unwrap().data, before.data);
    }
}
