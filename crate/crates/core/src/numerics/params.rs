use indexmap::IndexMap;

use super::{Scalar, Tensor};
use crate::error::{contract_err, shape_err, Result};

/// A trainable tensor with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<S> {
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    pub requires_grad: bool,
}

/// Named parameters in insertion order. The order is part of the checkpoint
/// contract and of the reduction order in the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: IndexMap<String, Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(contract_err!("duplicate parameter name {name}"));
        }
        self.params.insert(
            name,
            Parameter {
                value,
                grad: None,
                requires_grad: true,
            },
        );
        Ok(())
    }

    /// Insert or overwrite, keeping the original position on overwrite.
    pub fn set(&mut self, name: &str, value: Tensor<S>) {
        match self.params.get_mut(name) {
            Some(p) => {
                p.value = value;
                p.grad = None;
            }
            None => {
                self.params.insert(
                    name.to_string(),
                    Parameter {
                        value,
                        grad: None,
                        requires_grad: true,
                    },
                );
            }
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<S>> {
        self.params
            .get(name)
            .ok_or_else(|| contract_err!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<S>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| contract_err!("unknown parameter {name}"))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub(crate) fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter<S>> {
        self.params.shift_remove(name)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn set_requires_grad(&mut self, pred: impl Fn(&str) -> bool, flag: bool) {
        for (name, p) in self.params.iter_mut() {
            if pred(name) {
                p.requires_grad = flag;
            }
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, grad: &Tensor<S>) -> Result<()> {
        let p = &mut self.params[idx];
        if p.value.shape() != grad.shape() {
            return Err(shape_err!(
                "gradient shape {:?} does not match parameter shape {:?}",
                grad.shape(),
                p.value.shape()
            ));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a = *a + b;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Copy of the store at another precision, gradients dropped.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            grad: None,
                            requires_grad: p.requires_grad,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| {
            p.value.all_finite() && p.grad.as_ref().is_none_or(Tensor::all_finite)
        })
    }
}
