//! Named parameter storage shared by layers, optimizers and checkpoints.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(p, _)| p.numel())
            .sum()
    }

    /// Replaces all values, keeping names and flags. Shapes must match.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> crate::Result<()> {
        if values.len() != self.tensors.len() {
            return Err(crate::Error::InvalidConfig(alloc::format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (old, new) in self.tensors.iter().zip(&values) {
            if old.shape() != new.shape() {
                return Err(crate::Error::ShapeMismatch {
                    op: "load_values",
                    left: old.shape().to_vec(),
                    right: new.shape().to_vec(),
                });
            }
        }
        self.tensors = values;
        Ok(())
    }

    /// Places every parameter on `g`. With `track` set, trainable parameters
    /// become gradient-receiving leaves.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| g.leaf(t.clone(), track && tr))
            .collect();
        Bound { vars }
    }
}

impl Index<ParamId> for ParamSet {
    type Output = Tensor;

    fn index(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Adds the gradients recorded on `g` into `acc` (one buffer per parameter).
    pub fn accumulate_grads(&self, g: &Graph, acc: &mut [Tensor]) {
        for (v, a) in self.vars.iter().zip(acc.iter_mut()) {
            if let Some(grad) = g.grad(*v) {
                a.data_mut().iter_mut().zip(grad).for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// `N(0, 2 / fan_in)` initialization.
pub(crate) fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = crate::math::sqrt(2.0 / fan_in.max(1) as f64);
    Tensor::from_fn(shape.to_vec(), |_| {
        let e: f64 = StandardNormal.sample(rng);
        e * std
    })
}
