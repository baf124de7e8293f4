//! Named trainable parameters.

use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// One row of a parameter census.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CensusRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// Ordered parameter collection. Registration order is the census order and
/// the checkpoint order.
///
/// Each parameter is initialized from its own RNG stream derived from the
/// store seed and the parameter name, so two models sharing a parameter name
/// and seed start from identical values for it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    seed: u64,
    entries: Vec<ParamEntry<S>>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: String, value: Tensor<S>) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform Glorot initialization, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let name = name.into();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&name));
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Tensor::random_uniform(shape.to_vec(), -a, a, &mut rng);
        self.push(name, value)
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.push(name.into(), Tensor::full(shape.to_vec(), S::of(value)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn census(&self) -> Vec<CensusRow> {
        self.entries
            .iter()
            .map(|e| CensusRow {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                count: e.value.numel(),
            })
            .collect()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Binding {
        Binding(self.entries.iter().map(|e| tape.param(e.value.clone())).collect())
    }

    /// Records every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> Binding {
        Binding(self.entries.iter().map(|e| tape.constant(e.value.clone())).collect())
    }
}

/// Tape handles of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding(Vec<Var>);

impl Binding {
    /// Wraps tape handles that were bound in census order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients of every parameter, zeros where none flowed.
    pub fn grads<S: Scalar>(&self, tape: &Tape<S>) -> Vec<Tensor<S>> {
        self.0.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
