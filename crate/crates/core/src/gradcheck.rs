//! Named parameter storage and the central-finite-difference gradient
//! oracle that every differentiable path in the crate must pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Named parameter tensors with matching gradient buffers.
///
/// Names are unique; every parameter always has a same-shape gradient.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    order: Vec<String>,
    values: HashMap<String, Tensor2D>,
    grads: HashMap<String, Tensor2D>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor2D) -> Result<()> {
        if self.values.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.order.push(name.to_string());
        self.grads.insert(name.to_string(), Tensor2D::zeros(value.rows, value.cols));
        self.values.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2D> {
        self.values
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2D> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2D> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor2D) -> Result<()> {
        let g = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if g.rows != delta.rows || g.cols != delta.cols {
            return Err(Error::Shape(format!(
                "grad for {name} is {}x{}, delta {}x{}",
                g.rows, g.cols, delta.rows, delta.cols
            )));
        }
        for (a, b) in g.data.iter_mut().zip(&delta.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Insertion order; iteration over parameters is deterministic.
    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn scalar_count(&self) -> usize {
        self.order.iter().map(|n| self.values[n].data.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for name in &self.order {
            self.values[name].check_finite(name)?;
        }
        Ok(())
    }
}

/// Evaluation of a scalar function: its value plus analytic gradients for
/// (a subset of) the store's parameters, keyed by name.
pub type ScalarEval = (f64, HashMap<String, Tensor2D>);

/// Compare the analytic gradient of `f` against central finite differences.
///
/// Returns the maximum, over all parameter scalars, of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F>(f: &F, params: &ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<ScalarEval>,
{
    if !(1e-6..1e-2).contains(&step) {
        return Err(Error::Config(format!("grad_check step {step} outside (1e-6, 1e-2)")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("grad_check objective is {value}")));
    }

    let mut max_rel = 0.0f64;
    for name in params.names() {
        let Some(grad) = analytic.get(name) else { continue };
        let len = params.get(name)?.data.len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.get_mut(name)?.data[i] += step;
            let (fp, _) = f(&plus)?;
            let mut minus = params.clone();
            minus.get_mut(name)?.data[i] -= step;
            let (fm, _) = f(&minus)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric("non-finite objective during finite differences".into()));
            }
            let numeric = (fp - fm) / (2.0 * step);
            let a = grad.data[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
