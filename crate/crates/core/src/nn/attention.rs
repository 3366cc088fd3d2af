use rand::Rng;

use super::layers::{dropout, LayerNorm, Linear};
use super::params::{Forward, ParamId, ParamStore};
use crate::autodiff::{AttentionSpec, Var};
use crate::error::{shape_err, Result};

/// Multi-head attention with bias-free `W_Q, W_K, W_V, W_O` projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

/// Output of an attention call plus the node holding its weights.
#[derive(Clone, Copy, Debug)]
pub struct AttnOutput {
    pub out: Var,
    /// Read the weights with [`crate::autodiff::Tape::attention_weights`].
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return shape_err(format!("d_model {d_model} not divisible by {heads} heads"));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), d_model, d_model, false, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), d_model, d_model, false, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), d_model, d_model, false, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), d_model, d_model, false, rng)?,
            heads,
        })
    }

    /// Causal self-attention over `x: [B, C, d]`.
    pub fn self_attend(
        &self,
        f: &mut Forward,
        x: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<AttnOutput> {
        self.attend(f, x, x, Some(0), key_mask)
    }

    /// Queries `[B, Cq, d]` against keys/values `[B, Ck, d]`; query `i` sees
    /// keys `j <= i + Ck - Cq`.
    pub fn cross_attend(
        &self,
        f: &mut Forward,
        queries: Var,
        keys_values: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<AttnOutput> {
        let cq = seq_len(f, queries)?;
        let ck = seq_len(f, keys_values)?;
        self.attend(f, queries, keys_values, Some(ck as isize - cq as isize), key_mask)
    }

    fn attend(
        &self,
        f: &mut Forward,
        queries: Var,
        keys_values: Var,
        causal_offset: Option<isize>,
        key_mask: Option<&[bool]>,
    ) -> Result<AttnOutput> {
        let q = self.wq.forward(f, queries)?;
        let k = self.wk.forward(f, keys_values)?;
        let v = self.wv.forward(f, keys_values)?;
        let spec = AttentionSpec {
            heads: self.heads,
            causal_offset,
            key_mask: key_mask.map(<[bool]>::to_vec),
        };
        let weights = f.tape.attention(q, k, v, &spec)?;
        let out = self.wo.forward(f, weights)?;
        Ok(AttnOutput { out, weights })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.wq, &self.wk, &self.wv, &self.wo].iter().flat_map(|l| l.param_ids()).collect()
    }
}

fn seq_len(f: &Forward, x: Var) -> Result<usize> {
    let s = f.tape.value(x).shape();
    if s.len() != 3 {
        return shape_err(format!("expected [batch, seq, d], got {s:?}"));
    }
    Ok(s[1])
}

/// Position-wise `Linear -> GELU -> Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_model, d_ff, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d_ff, d_model, true, rng)?,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let h = self.fc1.forward(f, x)?;
        let h = f.tape.gelu(h)?;
        self.fc2.forward(f, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fc1.param_ids();
        ids.extend(self.fc2.param_ids());
        ids
    }
}

/// Pre-LN decoder block with causal self-attention.
#[derive(Clone, Debug)]
pub struct GptBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl GptBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, d_ff, rng)?,
            dropout,
        })
    }

    /// `x: [B, C, d]`.
    pub fn forward(&self, f: &mut Forward, x: Var, key_mask: Option<&[bool]>) -> Result<(Var, Var)> {
        let h = self.ln1.forward(f, x)?;
        let a = self.attn.self_attend(f, h, key_mask)?;
        let a_out = dropout(f, a.out, self.dropout)?;
        let x1 = f.tape.add(x, a_out)?;
        let h = self.ln2.forward(f, x1)?;
        let h = self.ff.forward(f, h)?;
        let h = dropout(f, h, self.dropout)?;
        Ok((f.tape.add(x1, h)?, a.weights))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ln1.param_ids();
        ids.extend(self.attn.param_ids());
        ids.extend(self.ln2.param_ids());
        ids.extend(self.ff.param_ids());
        ids
    }
}

/// Pre-LN block whose attention takes queries from one sequence and
/// keys/values from another.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl CrossBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d_model)?,
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d_model)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, d_ff, rng)?,
            dropout,
        })
    }

    pub fn forward(
        &self,
        f: &mut Forward,
        queries: Var,
        keys_values: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let q = self.ln_q.forward(f, queries)?;
        let kv = self.ln_kv.forward(f, keys_values)?;
        let a = self.attn.cross_attend(f, q, kv, key_mask)?;
        let a_out = dropout(f, a.out, self.dropout)?;
        let x1 = f.tape.add(queries, a_out)?;
        let h = self.ln2.forward(f, x1)?;
        let h = self.ff.forward(f, h)?;
        let h = dropout(f, h, self.dropout)?;
        Ok((f.tape.add(x1, h)?, a.weights))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ln_q.param_ids();
        ids.extend(self.ln_kv.param_ids());
        ids.extend(self.attn.param_ids());
        ids.extend(self.ln2.param_ids());
        ids.extend(self.ff.param_ids());
        ids
    }
}
