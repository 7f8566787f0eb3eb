//! Named parameter storage shared by the encoder and decoder.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use segkit_tensor::{Element, Tape, Tensor, Var};

use crate::error::{Result, SegError};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Insertion order is stable and is the
/// order used for checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(SegError::Config(format!("duplicate parameter name {name}")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    /// Replaces a tensor; the shape must not change.
    pub fn set(&mut self, id: ParamId, t: Tensor<T>) -> Result<()> {
        let old = &self.tensors[id.0];
        if old.shape() != t.shape() {
            return Err(SegError::Config(format!(
                "parameter {} has shape {:?}, cannot assign {:?}",
                self.names[id.0],
                old.shape(),
                t.shape()
            )));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform<T: Element>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn add_lookup_and_count() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("enc.w", Tensor::zeros(&[2, 3])).unwrap();
        let b = s.add("dec.b", Tensor::zeros(&[4])).unwrap();
        assert_eq!(s.id("dec.b"), Some(b));
        assert_eq!(s.name(a), "enc.w");
        assert_eq!(s.numel(), 10);
        assert_eq!(s.numel_with_prefix("enc."), 6);
        assert!(s.add("enc.w", Tensor::zeros(&[1])).is_err());
        assert!(s.set(a, Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn uniform_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = uniform(&mut rng, &[50, 4], 16);
        assert!(t.data().iter().all(|v| v.abs() < 0.25));
    }
}
