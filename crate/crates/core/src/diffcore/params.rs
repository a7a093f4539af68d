use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Moment-based optimizer settings (bias-corrected first and second moments).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Slot<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Named trainable tensors plus their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub(crate) slots: Vec<Slot<T>>,
    index: HashMap<String, ParamId>,
    pub(crate) step: u64,
    pub adam: AdamConfig,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            index: HashMap::new(),
            step: 0,
            adam: AdamConfig::default(),
        }
    }

    /// Registers a new parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.slots.len());
        let [r, c] = value.shape();
        self.slots.push(Slot {
            name: name.clone(),
            value,
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
        self.index.insert(name, id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    /// Number of optimizer steps applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// One bias-corrected moment update. Entries absent from `grads` are
    /// treated as zero gradients.
    pub fn optimizer_step(&mut self, grads: &GradMap<T>, lr: f64) -> Result<()> {
        if grads.grads.len() > self.slots.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.grads.len(),
                self.slots.len()
            )));
        }
        for (slot, g) in self.slots.iter().zip(&grads.grads) {
            if let Some(g) = g {
                if g.shape() != slot.value.shape() {
                    return Err(Error::Shape(format!(
                        "gradient {:?} for parameter `{}` of shape {:?}",
                        g.shape(),
                        slot.name,
                        slot.value.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let (b1, b2) = (T::c(beta1), T::c(beta2));
        let (one_b1, one_b2) = (T::c(1.0 - beta1), T::c(1.0 - beta2));
        let step_size = T::c(lr / bc1);
        let inv_sqrt_bc2 = T::c(1.0 / bc2.sqrt());
        let eps = T::c(eps);
        for (i, slot) in self.slots.iter_mut().enumerate() {
            let g = grads.grads.get(i).and_then(|g| g.as_ref());
            let n = slot.value.len();
            for k in 0..n {
                let gk = g.map_or(T::zero(), |g| g.data()[k]);
                let m = b1 * slot.m.data()[k] + one_b1 * gk;
                let v = b2 * slot.v.data()[k] + one_b2 * gk * gk;
                slot.m.data_mut()[k] = m;
                slot.v.data_mut()[k] = v;
                let denom = v.sqrt() * inv_sqrt_bc2 + eps;
                slot.value.data_mut()[k] -= step_size * m / denom;
            }
        }
        Ok(())
    }
}

/// Parameter gradients indexed like the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap<T> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradMap<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .slots
                .iter()
                .map(|s| Some(Tensor::zeros(s.value.rows(), s.value.cols())))
                .collect(),
        }
    }

    pub fn empty() -> Self {
        Self { grads: Vec::new() }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor<T>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(g);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Largest absolute gradient entry over the given parameters.
    pub fn max_abs(&self, ids: impl IntoIterator<Item = ParamId>) -> f64 {
        ids.into_iter()
            .filter_map(|id| self.get(id))
            .flat_map(|g| g.data().iter().map(|v| v.f64().abs()))
            .fold(0.0, f64::max)
    }
}

/// Learning rate with linear warmup over the first `warmup_frac` of training
/// followed by cosine decay down to `floor * base`.
pub fn lr_schedule(step: usize, total: usize, base: f64, warmup_frac: f64, floor: f64) -> f64 {
    let total = total.max(1) as f64;
    let warm = (warmup_frac * total).max(1.0);
    let s = step as f64;
    if s < warm {
        return base * (s + 1.0) / warm;
    }
    let progress = ((s - warm) / (total - warm).max(1.0)).clamp(0.0, 1.0);
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (floor + (1.0 - floor) * cosine)
}
