use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered map from stable dotted names to parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

const CHECKPOINT_FORMAT: &str = "seqctl-params";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: Vec<CheckpointEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total learnable scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Mutable views of several distinct tensors at once.
    pub fn many_mut(&mut self, ids: &[ParamId]) -> Vec<&mut [f64]> {
        let mut wanted = vec![usize::MAX; self.tensors.len()];
        for (pos, id) in ids.iter().enumerate() {
            assert!(wanted[id.0] == usize::MAX, "parameter {} requested twice", id.0);
            wanted[id.0] = pos;
        }
        let mut out: Vec<Option<&mut [f64]>> = (0..ids.len()).map(|_| None).collect();
        for (i, t) in self.tensors.iter_mut().enumerate() {
            if wanted[i] != usize::MAX {
                out[wanted[i]] = Some(t.data_mut());
            }
        }
        out.into_iter().map(Option::unwrap).collect()
    }

    /// Two stores with identical names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: self
                .iter()
                .map(|(name, t)| CheckpointEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut store = ParamStore::new();
        for e in ckpt.params {
            store.insert(e.name, Tensor::new(e.shape, e.data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Overwrites values from a checkpoint whose layout must match.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Invalid("checkpoint layout does not match the model".into()));
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// One forward pass over a parameter store.
///
/// Parameters are bound to the tape lazily on first use. Only parameters in
/// the trainable set become gradient-tracked leaves.
pub struct Forward<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
    dropout_seed: Option<u64>,
    dropout_calls: u64,
}

impl<'p> Forward<'p> {
    /// Nothing is tracked; used for acting and target evaluation.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::with_trainable(store, &[])
    }

    pub fn training(store: &'p ParamStore) -> Self {
        let all: Vec<ParamId> = store.ids().collect();
        Self::with_trainable(store, &all)
    }

    pub fn with_trainable(store: &'p ParamStore, trainable: &[ParamId]) -> Self {
        let mut mask = vec![false; store.len()];
        for id in trainable {
            mask[id.0] = true;
        }
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable: mask,
            dropout_seed: None,
            dropout_calls: 0,
        }
    }

    /// Runs over an existing tape with every parameter already bound, in
    /// store order. Used to drive modules from [`crate::autodiff::grad_check`].
    pub fn from_bound(store: &'p ParamStore, tape: Tape, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Invalid(format!(
                "{} vars bound to a store of {} tensors",
                vars.len(),
                store.len()
            )));
        }
        let trainable = vars.iter().map(|&v| tape.requires_grad(v)).collect();
        Ok(Self {
            tape,
            store,
            bound: vars.iter().copied().map(Some).collect(),
            trainable,
            dropout_seed: None,
            dropout_calls: 0,
        })
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// Enables dropout sampling for this pass.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_seed = Some(seed);
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient of the last backward pass for a bound parameter.
    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.bound[id.0].and_then(|v| self.tape.grad(v))
    }

    /// Next dropout stream seed, or `None` when dropout is disabled.
    pub(crate) fn next_dropout_seed(&mut self) -> Option<u64> {
        let base = self.dropout_seed?;
        self.dropout_calls += 1;
        Some(base.wrapping_add(self.dropout_calls.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }
}
