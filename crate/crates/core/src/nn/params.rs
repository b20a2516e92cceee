//! Named parameters with trainable/frozen flags.

use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal { std: f64 },
}

/// Declaration of one parameter, before any memory is allocated.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Ordered list of parameter declarations with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    index: HashMap<String, usize>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool, init: Init) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.specs.len());
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            trainable,
            init,
        });
        Ok(())
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.index.get(name).map(|&i| &self.specs[i])
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&ParamSpec) -> bool, flag: bool) {
        for s in &mut self.specs {
            if pred(s) {
                s.trainable = flag;
            }
        }
    }

    /// Allocates and initialises every parameter. Each tensor draws from its
    /// own stream derived from its name, so adding or removing parameters
    /// never changes the values of the others.
    pub fn materialize<S: Scalar>(&self, rng: &SplitRng) -> ParamStore<S> {
        let mut store = ParamStore::new();
        for spec in &self.specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, S::one()),
                Init::Const(c) => Tensor::full(&spec.shape, S::of(c)),
                Init::Normal { std } => {
                    Tensor::randn(&spec.shape, std, &mut rng.child_named(&spec.name).stream())
                }
            };
            store
                .insert(spec.name.clone(), t, spec.trainable)
                .expect("layout names are unique");
        }
        store
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph handles for every parameter of a store, by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<S>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<S>> {
        self.entries.iter_mut()
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<S>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.entry(name)?.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.entry(name)?.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, flag: bool) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                self.entries[i].trainable = flag;
                Ok(())
            }
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    pub fn trainable_count(&self) -> u64 {
        self.count_where(|e| e.trainable)
    }

    pub fn total_count(&self) -> u64 {
        self.count_where(|_| true)
    }

    pub fn count_where(&self, pred: impl Fn(&ParamEntry<S>) -> bool) -> u64 {
        self.entries.iter().filter(|e| pred(e)).map(|e| e.tensor.numel() as u64).sum()
    }

    /// Registers every parameter as a graph leaf. Trainable entries track
    /// gradients only when `track_grads` is set.
    pub fn bind(&self, g: &mut Graph<S>, track_grads: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                let t = e.tensor.clone().with_requires_grad(track_grads && e.trainable);
                (e.name.clone(), g.leaf(t))
            })
            .collect();
        Bound { vars }
    }

    /// Copies gradients from a finished backward pass onto the trainable
    /// entries; unreachable parameters end up with no gradient.
    pub fn collect_grads(&mut self, g: &Graph<S>, bound: &Bound) -> Result<()> {
        for e in &mut self.entries {
            if !e.trainable {
                e.tensor.zero_grad();
                continue;
            }
            let grad = g.grad(bound.get(&e.name)?)?;
            e.tensor.set_grad(grad.map(Tensor::into_data))?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Exact comparison of names, flags, shapes and value bits.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.trainable == b.trainable && a.tensor.bit_eq(&b.tensor)
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(s.insert("w", Tensor::zeros(&[2]), true), Err(Error::DuplicateParam(_))));
        let mut l = ParamLayout::new();
        l.push("a", &[1], true, Init::Zeros).unwrap();
        assert!(l.push("a", &[1], true, Init::Zeros).is_err());
    }

    #[test]
    fn materialize_is_per_name() {
        let mut a = ParamLayout::new();
        a.push("x", &[4], true, Init::Normal { std: 1.0 }).unwrap();
        let mut b = ParamLayout::new();
        b.push("extra", &[3], true, Init::Normal { std: 1.0 }).unwrap();
        b.push("x", &[4], true, Init::Normal { std: 1.0 }).unwrap();
        let rng = SplitRng::new(1);
        let sa: ParamStore<f64> = a.materialize(&rng);
        let sb: ParamStore<f64> = b.materialize(&rng);
        assert!(sa.get("x").unwrap().bit_eq(sb.get("x").unwrap()));
    }

    #[test]
    fn counts_follow_flags() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::zeros(&[2, 3]), true).unwrap();
        s.insert("b", Tensor::zeros(&[5]), false).unwrap();
        assert_eq!(s.trainable_count(), 6);
        assert_eq!(s.total_count(), 11);
        s.set_trainable("b", true).unwrap();
        assert_eq!(s.trainable_count(), 11);
    }
}
