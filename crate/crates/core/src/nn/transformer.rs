use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::attention::GptBlock;
use super::layers::LayerNorm;
use super::params::{Forward, ParamId, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { num_layers: 1, num_heads: 4, d_model: 128, d_ff: 256, context_len: 10, dropout: 0.0 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("heads, d_model and d_ff must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.context_len == 0 {
            return Err(Error::Config("context_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Learned positions, a stack of [`GptBlock`]s and a final layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub positions: ParamId,
    pub max_len: usize,
    pub blocks: Vec<GptBlock>,
    pub ln_f: LayerNorm,
}

/// Hidden states plus one attention node per block.
#[derive(Clone, Debug)]
pub struct TransformerOutput {
    pub hidden: Var,
    pub attention: Vec<Var>,
}

impl Transformer {
    /// `max_len` is the positional table size, normally `context_len`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &TransformerConfig,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if max_len == 0 {
            return Err(Error::Config("positional table needs at least one row".into()));
        }
        let d = config.d_model;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let table = (0..max_len * d).map(|_| normal.sample(rng)).collect();
        let positions = store.insert(format!("{name}.pos"), Tensor::new([max_len, d], table)?)?;
        let blocks = (0..config.num_layers)
            .map(|i| {
                GptBlock::new(
                    store,
                    &format!("{name}.block{i}"),
                    d,
                    config.num_heads,
                    config.d_ff,
                    config.dropout,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), d)?;
        Ok(Self { config: config.clone(), positions, max_len, blocks, ln_f })
    }

    /// `tokens: [B, L, d]` or `[L, d]`; output has the same rank.
    pub fn forward(&self, f: &mut Forward, tokens: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        Ok(self.forward_full(f, tokens, key_mask)?.hidden)
    }

    pub fn forward_full(
        &self,
        f: &mut Forward,
        tokens: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<TransformerOutput> {
        let (x, unbatched) = ensure_batched(f, tokens)?;
        let shape = f.tape.value(x).shape().to_vec();
        let (len, d) = (shape[1], shape[2]);
        if d != self.config.d_model {
            return shape_err(format!("token width {d} != d_model {}", self.config.d_model));
        }
        if len > self.max_len {
            return shape_err(format!("sequence length {len} exceeds context {}", self.max_len));
        }
        let table = f.param(self.positions);
        let pos = f.tape.slice(table, 0, 0, len)?;
        let mut h = f.tape.add(x, pos)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, w) = block.forward(f, h, key_mask)?;
            h = next;
            attention.push(w);
        }
        let mut hidden = self.ln_f.forward(f, h)?;
        if unbatched {
            hidden = f.tape.reshape(hidden, &[len, d])?;
        }
        Ok(TransformerOutput { hidden, attention })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.positions];
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids.extend(self.ln_f.param_ids());
        ids
    }
}

/// Lifts `[L, d]` to `[1, L, d]`; the flag says whether it did.
pub fn ensure_batched(f: &mut Forward, x: Var) -> Result<(Var, bool)> {
    let shape = f.tape.value(x).shape().to_vec();
    match shape.len() {
        3 => Ok((x, false)),
        2 => Ok((f.tape.reshape(x, &[1, shape[0], shape[1]])?, true)),
        _ => shape_err(format!("expected [L, d] or [B, L, d], got {shape:?}")),
    }
}

/// Row `C - 1` of `[C, d]`, or `[:, -1, :]` of `[B, C, d]`.
pub fn select_last_token(f: &mut Forward, hidden: Var) -> Result<Var> {
    let shape = f.tape.value(hidden).shape().to_vec();
    match shape.len() {
        2 => select_token(f, hidden, shape[0] - 1),
        3 => select_token(f, hidden, shape[1] - 1),
        _ => shape_err(format!("cannot select a token from {shape:?}")),
    }
}

/// Row `pos` along the sequence axis, dropping that axis.
pub fn select_token(f: &mut Forward, hidden: Var, pos: usize) -> Result<Var> {
    let shape = f.tape.value(hidden).shape().to_vec();
    match shape.len() {
        2 => {
            let row = f.tape.slice(hidden, 0, pos, 1)?;
            f.tape.reshape(row, &[shape[1]])
        }
        3 => {
            let row = f.tape.slice(hidden, 1, pos, 1)?;
            f.tape.reshape(row, &[shape[0], shape[2]])
        }
        _ => shape_err(format!("cannot select a token from {shape:?}")),
    }
}
