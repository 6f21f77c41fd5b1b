use std::collections::BTreeMap;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named learnable tensors. Iteration order is the lexicographic name order,
/// which keeps every traversal (binding, optimizer steps, serialization)
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.params.extend(other.params);
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Places every parameter on `tape`; those for which `trainable` returns
    /// false are recorded as constants.
    pub fn bind(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k))))
            .collect();
        Bound { vars }
    }

    pub fn bind_all(&self, tape: &Tape) -> Bound {
        self.bind(tape, |_| true)
    }
}

/// Parameters placed on a tape, addressable by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Per-parameter gradients, summed across backward passes when accumulating.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradMap {
    /// Zero gradients shaped like `params`.
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    /// Collects the gradient of every bound parameter; untracked or unused
    /// parameters get zeros.
    pub fn collect(grads: &Gradients, bound: &Bound, params: &ParamSet) -> Self {
        let mut out = Self::zeros_like(params);
        for (name, var) in bound.iter() {
            if let (Some(g), Some(slot)) = (grads.get(var), out.grads.get_mut(name)) {
                *slot = g.clone();
            }
        }
        out
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn add_assign(&mut self, other: &GradMap) -> Result<()> {
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    self.grads.insert(k.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.grads.values_mut().for_each(|g| g.scale_in_place(k));
    }

    /// All entries in name order, flattened.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads
            .values()
            .flat_map(|g| g.data().iter().copied())
            .collect()
    }

    /// Flattened entries of parameters starting with `prefix`.
    pub fn flatten_prefix(&self, prefix: &str) -> Vec<f64> {
        self.grads
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .flat_map(|(_, g)| g.data().iter().copied())
            .collect()
    }
}
