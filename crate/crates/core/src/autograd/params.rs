use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S> {
    entries: Vec<(String, Tensor<S>)>,
}

/// Tape handles for every parameter, in [`ParamSet`] order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        tensor.set_requires_grad(true);
        self.entries.push((name, tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|(n, _)| n == name)
            .map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Records every parameter as a leaf. With `trainable == false` the
    /// leaves carry no gradient and the whole graph stays constant.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|(_, t)| {
                    if trainable {
                        tape.leaf(t)
                    } else {
                        tape.constant(t.shape().to_vec(), t.data().to_vec())
                            .expect("parameter shape is consistent")
                    }
                })
                .collect(),
        )
    }

    /// Accumulates the tape gradients of `bound` into the stored tensors.
    pub fn collect_grads(&mut self, tape: &Tape<S>, bound: &Bound) -> Result<()> {
        for ((_, t), &v) in self.entries.iter_mut().zip(bound.vars()) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.clear_grad());
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: &Tensor<S>) -> Result<()> {
        let id = self
            .index_of(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))?;
        let t = self.get_mut(id);
        if t.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_value",
                lhs: t.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        t.data_mut().copy_from_slice(value.data());
        Ok(())
    }
}
