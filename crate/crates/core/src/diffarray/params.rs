use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::array::DiffArray;
use super::tape::{Tape, Var};

/// Named, ordered collection of trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<S> {
    entries: IndexMap<String, DiffArray<S>>,
}

/// Tape handles for every parameter bound by [`ParamSet::bind`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::usage(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: DiffArray<S>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, array.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DiffArray<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DiffArray<S>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DiffArray<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(DiffArray::len).sum()
    }

    /// Records every parameter as a gradient-tracking leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(name, array)| {
                let mut leaf = array.clone();
                leaf.zero_grad();
                (name.clone(), tape.leaf(leaf.with_requires_grad(true)))
            })
            .collect();
        Bindings { vars }
    }

    /// Adds the gradients left on `tape` by a backward pass into each parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>, bindings: &Bindings) {
        for (name, var) in bindings.iter() {
            if let (Some(p), Some(g)) = (self.entries.get_mut(name), tape.grad(var)) {
                p.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(DiffArray::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(|p| p.grad())
            .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales every gradient so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = S::from_f64(max_norm / norm);
            for p in self.entries.values_mut() {
                if let Some(g) = p.grad_mut() {
                    g.iter_mut().for_each(|v| *v = *v * factor);
                }
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(DiffArray::is_finite)
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Plain gradient descent: `p <- p - lr * g` for every parameter.
pub fn sgd_step<S: Scalar>(params: &mut ParamSet<S>, lr: S) -> Result<()> {
    Sgd::plain().step(params, lr)
}

/// Gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    momentum: S,
    velocity: HashMap<String, Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn plain() -> Self {
        Self::with_momentum(S::zero())
    }

    pub fn with_momentum(momentum: S) -> Self {
        Self {
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<S>, lr: S) -> Result<()> {
        if !(lr >= S::zero()) || !lr.is_finite() {
            return Err(Error::param(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::usage(format!("parameter `{name}` has no gradient")));
        }
        for (name, p) in params.entries.iter_mut() {
            let g = p.grad().expect("checked above").to_vec();
            let update = if self.momentum > S::zero() {
                let v = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| vec![S::zero(); g.len()]);
                for (vi, gi) in v.iter_mut().zip(&g) {
                    *vi = self.momentum * *vi + *gi;
                }
                v.clone()
            } else {
                g
            };
            for (w, u) in p.data_mut().iter_mut().zip(&update) {
                *w = *w - lr * *u;
            }
        }
        Ok(())
    }
}

/// Uniform initialization in `±1/sqrt(fan_in)`.
pub fn uniform_fan_in<S: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> DiffArray<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    DiffArray::from_fn(shape, |_| S::from_f64(rng.random_range(-bound..bound)))
}
