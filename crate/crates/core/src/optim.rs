//! Named parameters and the Adam optimizer.
//!
//! All trainable state — conv/FC weights, batch-norm affine terms, and the
//! task log-variances s_k — lives in a [`ParamSet`] under unique string
//! names. [`Adam`] performs the standard bias-corrected update with
//! β1 = 0.9, β2 = 0.999, ε = 1e-8 (only the learning rate is exposed; the
//! experiments specify nothing else) and clears every gradient inside the
//! step so user code cannot apply a gradient twice.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A named trainable tensor; the value always carries a gradient slot.
#[derive(Debug, Clone)]
pub struct Parameter<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Parameter { name: name.into(), value: value.with_requires_grad() }
    }
}

/// The full set of parameters of one model, with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<E: Element> {
    params: Vec<Parameter<E>>,
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    /// Register a parameter; names must be unique within the set.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<usize> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.params.push(Parameter::new(name, value));
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter<E> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<E> {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total trainable element count.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Zero every gradient buffer.
    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
    }
}

/// Bias-corrected Adam over a [`ParamSet`].
#[derive(Debug)]
pub struct Adam<E: Element> {
    pub lr: E,
    beta1: f64,
    beta2: f64,
    eps: E,
    /// Step counter, strictly increasing.
    t: u32,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: E) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: E::from_f64(1e-8), t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u32 {
        self.t
    }

    /// One update over every parameter. Every parameter must carry a
    /// populated gradient (a parameter that never entered the graph is a
    /// caller bug, reported as a contract error). Gradients are cleared
    /// before returning.
    pub fn step(&mut self, params: &mut ParamSet<E>) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![E::ZERO; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, set now has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.params.iter().enumerate() {
            if p.value.grad().is_none() {
                return Err(Error::Contract(format!(
                    "missing gradient on registered parameter {:?}",
                    p.name
                )));
            }
            if self.m[i].len() != p.value.numel() {
                return Err(Error::Contract(format!(
                    "parameter {:?} changed shape under the optimizer",
                    p.name
                )));
            }
        }

        self.t += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one_m_b1 = E::from_f64(1.0 - self.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.beta2);
        // Bias corrections, computed in f64 for accuracy at small t.
        let inv_bc1 = E::from_f64(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let inv_bc2_sqrt = E::from_f64(1.0 / (1.0 - self.beta2.powi(self.t as i32)).sqrt());

        for (i, p) in params.params.iter_mut().enumerate() {
            let n = p.value.numel();
            let grad = p.value.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = p.value.data_mut();
            for j in 0..n {
                let g = grad[j];
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let mhat = m[j] * inv_bc1;
                // √(v̂) = √v / √(1−β2^t); ε is added after the bias-corrected
                // square root, per the published algorithm.
                let denom = v[j].sqrt() * inv_bc2_sqrt + self.eps;
                w[j] = w[j] - self.lr * mhat / denom;
            }
            p.value.clear_grad();
        }
        Ok(())
    }
}
