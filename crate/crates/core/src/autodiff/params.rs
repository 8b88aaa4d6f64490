// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::{Real, Tensor, TensorError};

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Attention,
    FeedForward,
    LayerNorm,
    Adapter,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub value: Tensor<T>,
}

/// Ordered, named parameter storage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            group,
            trainable: true,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn remove_group(&mut self, group: ParamGroup) {
        self.params.retain(|p| p.group != group);
    }

    pub fn set_trainable(&mut self, f: impl Fn(&Param<T>) -> bool) {
        for p in &mut self.params {
            p.trainable = f(p);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    trainable: p.trainable,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Checks that `grads` lines up with this store.
    pub(crate) fn check_grads(&self, grads: &[Option<Vec<T>>]) -> Result<(), TensorError> {
        if grads.len() != self.params.len() {
            return Err(TensorError::invalid(
                "grads",
                format!("{} gradient slots for {} parameters", grads.len(), self.params.len()),
            ));
        }
        for (p, g) in self.params.iter().zip(grads) {
            match g {
                None if p.trainable => return Err(TensorError::MissingGradient(p.name.clone())),
                Some(g) if g.len() != p.value.len() => {
                    return Err(TensorError::shapes("grads", p.value.shape(), &[g.len()]))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
