//! Named parameter registry and per-forward mounting onto a tape.

use std::collections::HashMap;

use super::error::{DiffError, DiffResult};
use super::real::Real;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Handle to a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Registry of uniquely named trainable tensors.
pub struct ParamSet<R: Real> {
    names: Vec<String>,
    values: Vec<Tensor<R>>,
    by_name: HashMap<String, usize>,
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor<R>) -> DiffResult<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(DiffError::InvalidConfig {
                op: "param_register",
                message: format!("duplicate parameter name '{name}'"),
            });
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Cast every parameter through f64 into a new registry.
    pub fn cast<S: Real>(&self) -> ParamSet<S> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Per-forward cache of parameter leaf vars on one tape.
pub struct Mounted {
    vars: Vec<Option<Var>>,
}

impl Mounted {
    pub fn new<R: Real>(params: &ParamSet<R>) -> Self {
        Mounted { vars: vec![None; params.len()] }
    }

    /// Leaf var for a parameter, mounted on first use.
    pub fn var<R: Real>(&mut self, tape: &mut Tape<R>, params: &ParamSet<R>, id: ParamId) -> Var {
        match self.vars[id.index()] {
            Some(v) => v,
            None => {
                let v = tape.leaf(params.value(id).clone(), true);
                self.vars[id.index()] = Some(v);
                v
            }
        }
    }

    /// Gradients accumulated on the tape, indexed like the registry.
    pub fn collect_grads<R: Real>(&self, tape: &Tape<R>) -> Vec<Option<Tensor<R>>> {
        self.vars
            .iter()
            .map(|slot| slot.and_then(|v| tape.grad(v).cloned()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.register("w", Tensor::zeros(&[2])).unwrap();
        assert!(ps.register("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn mounting_is_cached() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.register("w", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let mut mounted = Mounted::new(&ps);
        let a = mounted.var(&mut tape, &ps, id);
        let b = mounted.var(&mut tape, &ps, id);
        assert_eq!(a, b);
        assert_eq!(tape.len(), 1);
    }
}
