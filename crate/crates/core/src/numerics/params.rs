//! Ordered parameter registry.
//!
//! Parameters live in a plain `Vec` so that every traversal — initialization
//! draws, optimizer updates, checkpoint serialization — happens in the same
//! fixed creation order. That ordering, together with a seeded generator, is
//! what makes whole training runs bit-reproducible.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Index of a parameter within a [`ParamSet`].
pub type ParamIdx = usize;

/// One named parameter. Non-trainable entries (batch-norm running
/// statistics) are carried, checkpointed and restored, but never touched by
/// the optimizer or bound onto a tape.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Registry of all model state, in creation order.
#[derive(Default, Clone)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamIdx {
        let name = name.into();
        debug_assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(Param {
            name,
            value,
            trainable,
        });
        self.entries.len() - 1
    }

    /// Registers a trainable weight with uniform Glorot-style init:
    /// entries drawn from `U(-a, a)`, `a = sqrt(6 / (d_in + d_out))`.
    pub fn add_weight<R: Rng>(
        &mut self,
        name: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> ParamIdx {
        let a = (6.0 / (d_in + d_out) as f64).sqrt();
        let data: Vec<f64> = (0..d_in * d_out)
            .map(|_| rng.random::<f64>() * 2.0 * a - a)
            .collect();
        let t = Tensor::from_vec(&[d_in, d_out], data).expect("sized by construction");
        self.add(name, t, true)
    }

    /// Registers a rank-1 trainable vector with a constant value.
    pub fn add_vector(&mut self, name: impl Into<String>, len: usize, fill: f64) -> ParamIdx {
        self.add(name, filled(&[len], fill), true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: ParamIdx) -> &Param {
        &self.entries[idx]
    }

    pub fn get_mut(&mut self, idx: ParamIdx) -> &mut Param {
        &mut self.entries[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<ParamIdx> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    /// Copies every trainable parameter onto a fresh tape as a
    /// gradient-tracking leaf and returns the index-aligned bindings.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|p| {
                p.trainable
                    .then(|| tape.leaf(p.value.clone().with_grad()))
            })
            .collect();
        Binding { ids }
    }

    /// Overwrites a parameter's value, enforcing shape agreement. Used when
    /// restoring checkpoints.
    pub fn restore(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let current = &mut self.entries[idx];
        if current.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} in file, model expects {:?}",
                value.shape(),
                current.value.shape()
            )));
        }
        current.value = value;
        Ok(())
    }
}

/// Tape bindings for one forward pass, aligned with [`ParamSet`] indices.
pub struct Binding {
    ids: Vec<Option<NodeId>>,
}

impl Binding {
    /// Node for a trainable parameter; panics on non-trainable entries,
    /// which by construction are never used as graph inputs.
    pub fn node(&self, idx: ParamIdx) -> NodeId {
        self.ids[idx].expect("non-trainable parameter bound onto tape")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Pulls accumulated gradients off the tape, aligned with the registry.
    pub fn collect_grads(&self, tape: &mut Tape) -> Vec<Option<Tensor>> {
        self.ids
            .iter()
            .map(|id| id.and_then(|n| tape.take_grad(n)))
            .collect()
    }
}

pub(crate) fn filled(shape: &[usize], v: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![v; numel]).expect("sized by construction")
}
