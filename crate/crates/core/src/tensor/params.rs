use std::collections::HashMap;

use super::{Gradients, Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

/// Named, shaped parameters with gradient slots. Insertion order is the
/// canonical order for checkpoints and optimizers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

/// Parameters registered as leaves of one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// The same parameters as constants of another graph.
    pub fn transfer<T: Scalar>(&self, from: &Graph<T>, to: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.vars.iter().map(|&v| to.constant(from.value(v).clone())).collect(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(shape_err(
                "set_param",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].grad.as_ref()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.params[id.0].grad.as_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register every parameter as a gradient-receiving leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.param(p.value.clone())).collect(),
        }
    }

    /// Register every parameter as a constant leaf (evaluation only).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.constant(p.value.clone())).collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add the gradients of a bound graph into the gradient slots.
    pub fn accumulate(&mut self, bound: &Bound, grads: &mut Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            let Some(g) = grads.take(v) else { continue };
            match &mut p.grad {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += *x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }

    /// Add `g` into the gradient slot of `id`.
    pub fn add_grad(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != g.shape() {
            return Err(shape_err("add_grad", format!("{}: {:?} vs {:?}", p.name, p.value.shape(), g.shape())));
        }
        match &mut p.grad {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot @ None => *slot = Some(g.clone()),
        }
        Ok(())
    }

    /// Scale every gradient slot by `c`.
    pub fn scale_grads(&mut self, c: T) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                for v in g.data_mut() {
                    *v *= c;
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copy values from `other` by name; shapes must agree and every
    /// parameter of `self` must be present.
    pub fn load_from<U: Scalar>(&mut self, other: &ParamStore<U>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .index
                .get(&p.name)
                .map(|&i| &other.params[i].value)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.cast();
        }
        Ok(())
    }
}
