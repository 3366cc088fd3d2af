use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{AgentConfig, BackboneKind};
use crate::autodiff::{Tensor, Var};
use crate::conditioning::{build_cross_attn_inputs, build_tokens, Encoders, Strategy, WindowBatch};
use crate::error::Result;
use crate::nn::{CrossBlock, Forward, LayerNorm, Linear, ParamId, ParamStore, Transformer};

/// Maps a window batch to one feature vector per timestep.
#[derive(Clone, Debug)]
pub enum Backbone {
    Sequence(SequenceBackbone),
    Mlp(MlpEncoder),
}

#[derive(Clone, Debug)]
pub struct SequenceBackbone {
    pub encoders: Encoders,
    pub body: SequenceBody,
}

#[derive(Clone, Debug)]
pub enum SequenceBody {
    Single(Transformer),
    Cross(CrossBody),
}

/// Causal self-attention over the query stream, then one causal
/// cross-attention block into the other stream.
#[derive(Clone, Debug)]
pub struct CrossBody {
    pub stage1: Transformer,
    pub kv_positions: ParamId,
    pub cross: CrossBlock,
    pub ln_f: LayerNorm,
    /// Observations form the queries (`CrossAttnOa`).
    pub obs_queries: bool,
}

/// `Linear + ReLU` on each timestep's own observation.
#[derive(Clone, Debug)]
pub struct MlpEncoder {
    pub layer: Linear,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &AgentConfig,
        obs_dim: usize,
        act_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.backbone == BackboneKind::Mlp {
            let layer = Linear::new(store, &format!("{name}.encoder"), obs_dim, config.mlp.hidden, true, rng)?;
            return Ok(Backbone::Mlp(MlpEncoder { layer }));
        }
        let t = &config.transformer;
        let encoders = Encoders::new(store, &format!("{name}.enc"), config.strategy, obs_dim, act_dim, t.d_model, rng)?;
        let body = if config.strategy.is_cross() {
            let stage1 = Transformer::new(store, &format!("{name}.stage1"), t, t.context_len, rng)?;
            let normal = Normal::new(0.0, 0.02).expect("valid std");
            let table = (0..t.context_len * t.d_model).map(|_| normal.sample(rng)).collect();
            let kv_positions =
                store.insert(format!("{name}.kv_pos"), Tensor::new([t.context_len, t.d_model], table)?)?;
            let cross =
                CrossBlock::new(store, &format!("{name}.cross"), t.d_model, t.num_heads, t.d_ff, t.dropout, rng)?;
            let ln_f = LayerNorm::new(store, &format!("{name}.ln_out"), t.d_model)?;
            SequenceBody::Cross(CrossBody {
                stage1,
                kv_positions,
                cross,
                ln_f,
                obs_queries: config.strategy == Strategy::CrossAttnOa,
            })
        } else {
            let max_len = config.strategy.token_len(t.context_len);
            SequenceBody::Single(Transformer::new(store, &format!("{name}.gpt"), t, max_len, rng)?)
        };
        Ok(Backbone::Sequence(SequenceBackbone { encoders, body }))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Backbone::Mlp(m) => m.layer.param_ids(),
            Backbone::Sequence(s) => {
                let mut ids = s.encoders.param_ids();
                match &s.body {
                    SequenceBody::Single(t) => ids.extend(t.param_ids()),
                    SequenceBody::Cross(c) => {
                        ids.extend(c.stage1.param_ids());
                        ids.push(c.kv_positions);
                        ids.extend(c.cross.param_ids());
                        ids.extend(c.ln_f.param_ids());
                    }
                }
                ids
            }
        }
    }

    pub fn is_sequence(&self) -> bool {
        matches!(self, Backbone::Sequence(_))
    }

    /// Features for every timestep, `[B, M, width]`.
    pub fn timesteps(&self, f: &mut Forward, batch: &WindowBatch) -> Result<Var> {
        self.features(f, batch, &(0..batch.len).collect::<Vec<_>>())
    }

    /// Features at the given timesteps, `[B, P, width]`.
    pub fn features(&self, f: &mut Forward, batch: &WindowBatch, positions: &[usize]) -> Result<Var> {
        let all = positions.len() == batch.len && positions.iter().enumerate().all(|(i, &p)| i == p);
        match self {
            Backbone::Mlp(m) => {
                let obs = f.tape.constant(batch.observations.clone());
                let obs = if all { obs } else { f.tape.index_select(obs, 1, positions)? };
                let h = m.layer.forward(f, obs)?;
                f.tape.relu(h)
            }
            Backbone::Sequence(s) => {
                let strategy = s.encoders.strategy;
                let hidden = match &s.body {
                    SequenceBody::Single(t) => {
                        let seq = build_tokens(f, &s.encoders, batch)?;
                        t.forward(f, seq.tokens, None)?
                    }
                    SequenceBody::Cross(c) => {
                        let (x, y) = build_cross_attn_inputs(f, &s.encoders, batch)?;
                        let (q, kv) = if c.obs_queries { (y, x) } else { (x, y) };
                        let q = c.stage1.forward(f, q.tokens, None)?;
                        let table = f.param(c.kv_positions);
                        let pos = f.tape.slice(table, 0, 0, batch.len)?;
                        let kv = f.tape.add(kv.tokens, pos)?;
                        let (h, _) = c.cross.forward(f, q, kv, None)?;
                        c.ln_f.forward(f, h)?
                    }
                };
                let idx: Vec<usize> = positions.iter().map(|&p| strategy.timestep_position(p)).collect();
                let identity = f.tape.value(hidden).shape()[1] == idx.len()
                    && idx.iter().enumerate().all(|(i, &p)| i == p);
                if identity {
                    Ok(hidden)
                } else {
                    f.tape.index_select(hidden, 1, &idx)
                }
            }
        }
    }
}
