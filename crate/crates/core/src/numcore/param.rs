//! Named parameters, the store that owns them, and the Adam update.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::collections::BTreeMap;

use super::element::Element;

/// A trainable (or frozen) tensor with its optimizer state.
#[derive(Debug)]
pub struct Parameter<E: Element> {
    pub name: String,
    pub value: Array2<E>,
    pub grad: Option<Array2<E>>,
    pub frozen: bool,
    adam_m: Array2<E>,
    adam_v: Array2<E>,
    step_count: u64,
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Array2<E>) -> Self {
        let dim = value.dim();
        Parameter {
            name: name.into(),
            value,
            grad: None,
            frozen: false,
            adam_m: Array2::zeros(dim),
            adam_v: Array2::zeros(dim),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// Ordered map of parameters. Iteration order is the sorted name order,
/// which keeps checkpoints and update sweeps deterministic.
#[derive(Debug)]
pub struct ParamStore<E: Element> {
    params: BTreeMap<String, Parameter<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<E>) {
        let name = name.into();
        self.params.insert(name.clone(), Parameter::new(name, value));
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<E>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Train(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<E>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Train(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<E>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.frozen = true;
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Add `delta` into the staged gradient of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Array2<E>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.dim() != delta.dim() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{name}: value {:?} vs grad {:?}", p.value.dim(), delta.dim()),
            ));
        }
        match &mut p.grad {
            Some(g) => *g += delta,
            None => p.grad = Some(delta.clone()),
        }
        Ok(())
    }

    /// Order-stable fingerprint of every value byte; used by tests to assert
    /// bit-identity of frozen parameters and checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in self.params.values() {
            eat(p.name.as_bytes());
            for v in p.value.iter() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam moment/decay constants. The learning rate comes in per step from a
/// schedule.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One bias-corrected Adam step over every non-frozen parameter. Weight decay
/// is classic L2: added to the gradient before the moment updates. Frozen
/// parameters are skipped entirely, staged gradients consumed either way.
pub fn adam_step<E: Element>(store: &mut ParamStore<E>, lr: f64, hyper: &AdamHyper) -> Result<()> {
    let b1 = E::of_f64(hyper.beta1);
    let b2 = E::of_f64(hyper.beta2);
    let eps = E::of_f64(hyper.eps);
    let wd = E::of_f64(hyper.weight_decay);
    let lr = E::of_f64(lr);
    let one = E::one();

    for p in store.params.values_mut() {
        if p.frozen {
            p.grad = None;
            continue;
        }
        let grad = p.grad.take().ok_or_else(|| {
            Error::Train(format!("missing gradient for non-frozen parameter {}", p.name))
        })?;
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for (((w, g), m), v) in p
            .value
            .iter_mut()
            .zip(grad.iter())
            .zip(p.adam_m.iter_mut())
            .zip(p.adam_v.iter_mut())
        {
            let g = *g + wd * *w;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
