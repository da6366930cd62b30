use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Named parameters plus AdamW moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T = f32> {
    params: BTreeMap<String, Tensor<T>>,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    step_count: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step_count: 0,
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter with zeroed moments. Replaces any existing entry.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        self.m.insert(name.clone(), Tensor::zeros(value.shape()));
        self.v.insert(name.clone(), Tensor::zeros(value.shape()));
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Adam first and second moment estimates of a parameter.
    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// Rebuilds a store from `(name, value, m, v)` entries.
    pub fn from_parts(entries: Vec<(String, Tensor<T>, Tensor<T>, Tensor<T>)>, step_count: u64) -> Result<Self> {
        let mut out = Self::new();
        for (name, p, m, v) in entries {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return shape_err(
                    "param store",
                    format!("moments of `{name}` do not match {:?}", p.shape()),
                );
            }
            out.params.insert(name.clone(), p);
            out.m.insert(name.clone(), m);
            out.v.insert(name, v);
        }
        out.step_count = step_count;
        Ok(out)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Same parameters converted to another element type, moments reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, v) in &self.params {
            out.insert(k.clone(), v.cast());
        }
        out
    }
}

/// AdamW hyperparameters. Defaults: lr 1e-3, betas (0.9, 0.999).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One decoupled-weight-decay Adam step.
///
/// Parameters without an entry in `grads` are treated as having zero
/// gradient (their moments still decay and weight decay still applies).
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    cfg: &AdamW,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return invalid(format!("learning rate must be positive, got {}", cfg.lr));
    }
    for (name, g) in grads {
        match store.params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => {
                return shape_err(
                    "adamw_step",
                    format!("`{name}`: param {:?}, grad {:?}", p.shape(), g.shape()),
                )
            }
            None => return shape_err("adamw_step", format!("gradient for unknown parameter `{name}`")),
        }
    }
    store.step_count += 1;
    let t = store.step_count as i32;
    let lr = T::lit(cfg.lr);
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let eps = T::lit(cfg.eps);
    let decay = T::one() - lr * T::lit(cfg.weight_decay);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for (name, p) in store.params.iter_mut() {
        let m = store.m.get_mut(name).expect("moment per parameter");
        let v = store.v.get_mut(name).expect("moment per parameter");
        let g = grads.get(name);
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            pd[i] *= decay;
            md[i] = b1 * md[i] + (T::one() - b1) * gi;
            vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
