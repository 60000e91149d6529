use std::collections::BTreeMap;
use std::ops::Index;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{ensure, invalid, Result};
use crate::rng::Rng;

/// Named model parameters, kept in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

pub type Gradients = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copy every entry of `other` into `self`, replacing existing names.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// Overwrite values from `src` for names present in both stores. Shapes must match.
    pub fn load_matching(&mut self, src: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in self.params.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            let s = src
                .get(name)
                .ok_or_else(|| invalid!("checkpoint is missing parameter `{name}`"))?;
            ensure!(
                s.shape() == t.shape(),
                "parameter `{name}`: checkpoint shape {:?} does not match model shape {:?}",
                s.shape(),
                t.shape()
            );
            *t = s.clone();
            n += 1;
        }
        Ok(n)
    }

    /// Place every parameter on `tape`; those selected by `trainable` are
    /// recorded with gradient tracking, the rest as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let var = if trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn bind_all(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| true)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| false)
    }

    // Initializers.

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        self.insert(name, Tensor::from_vec(data, shape).expect("valid shape"));
    }

    /// He-normal initialization for ReLU layers.
    pub fn init_he(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) {
        self.init_normal(name, shape, (2.0 / fan_in as f64).sqrt(), rng);
    }

    /// Glorot-uniform initialization.
    pub fn init_glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-a, a)).collect();
        self.insert(name, Tensor::from_vec(data, shape).expect("valid shape"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients of the bound parameters after [`Tape::backward`]. Parameters
    /// bound as constants are omitted.
    pub fn gradients(&self, tape: &Tape) -> Gradients {
        self.vars
            .iter()
            .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }
}
