use indexmap::IndexMap;
use rand::Rng;

use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract_err, dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors in insertion order.
///
/// The position of a parameter in the store is its stable identifier; lookups
/// and iteration are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(contract_err!("duplicate parameter name `{name}`"));
        }
        let (idx, _) = self.params.insert_full(name, Param { value, trainable });
        Ok(idx)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Lookup(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Lookup(format!("no parameter named `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Names of trainable parameters accepted by `filter`.
    pub fn trainable_names(&self, filter: impl Fn(&str) -> bool) -> Vec<String> {
        self.params
            .iter()
            .filter(|(k, p)| p.trainable && filter(k))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Places every parameter on the tape. Parameters selected by `train` are
    /// differentiable leaves; the rest are constants.
    pub fn bind(&self, tape: &mut Tape, train: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let v = if p.trainable && train(k) {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter vars on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }

    /// Gradient table over `names`; parameters not reached get zeros.
    pub fn collect(&self, tape: &Tape, grads: &Grads, names: &[String]) -> Result<GradTable> {
        let mut table = GradTable::new();
        for name in names {
            let v = self.var(name)?;
            table.insert(name.clone(), grads.value_or_zeros(tape, v));
        }
        Ok(table)
    }
}

/// Parameter name to gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradTable {
    entries: IndexMap<String, Tensor>,
}

impl GradTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.entries.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks every gradient's shape against its parameter.
    pub fn validate(&self, params: &ParamStore) -> Result<()> {
        for (name, g) in &self.entries {
            let p = params.get(name)?;
            if !p.same_shape(g) {
                return Err(dim_err!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
        }
        Ok(())
    }
}

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights.
pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}
