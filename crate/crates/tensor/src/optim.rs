//! Named parameter store and the AdamW optimizer.

use crate::{NdArray, Scalar};
use std::collections::BTreeMap;

/// One named parameter. Frozen parameters participate in checkpoints but are
/// never updated by the optimizer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: NdArray<T>,
    pub frozen: bool,
}

/// Parameters keyed by name. `BTreeMap` keeps iteration order deterministic,
/// which the reproducibility contract relies on.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: NdArray<T>) {
        self.insert_with(name, value, false);
    }

    pub fn insert_frozen(&mut self, name: &str, value: NdArray<T>) {
        self.insert_with(name, value, true);
    }

    fn insert_with(&mut self, name: &str, value: NdArray<T>, frozen: bool) {
        let prev = self.entries.insert(name.to_string(), Param { value, frozen });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Param<T> {
        self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<T> {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Decoupled-weight-decay Adam.
pub struct AdamW<T: Scalar> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: u64,
    m: BTreeMap<String, NdArray<T>>,
    v: BTreeMap<String, NdArray<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: T) -> Self {
        Self {
            beta1: T::from_f64_c(0.9),
            beta2: T::from_f64_c(0.999),
            eps: T::from_f64_c(1e-8),
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update with the given learning rate. Parameters without a
    /// gradient entry and frozen parameters are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, NdArray<T>>, lr: T) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (name, grad) in grads {
            let param = params.get_mut(name);
            if param.frozen {
                continue;
            }
            assert_eq!(param.value.shape(), grad.shape(), "gradient shape mismatch for {name}");
            let m = self.m.entry(name.clone()).or_insert_with(|| NdArray::zeros(grad.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| NdArray::zeros(grad.shape()));
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * g;
                let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let p = param.value.data()[i];
                param.value.data_mut()[i] = p - lr * (mhat / (vhat.sqrt() + eps) + wd * p);
            }
        }
    }
}
