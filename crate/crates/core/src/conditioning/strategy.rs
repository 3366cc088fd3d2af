use rand::Rng;
use serde::{Deserialize, Serialize};

use super::window::WindowBatch;
use crate::autodiff::{Tensor, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Forward, Linear, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    ObsOnly,
    Interleaved,
    EmbedConcat,
    /// Self-attended actions query the observations.
    CrossAttnAo,
    /// Self-attended observations query the actions.
    CrossAttnOa,
}

impl Strategy {
    pub fn is_cross(self) -> bool {
        matches!(self, Strategy::CrossAttnAo | Strategy::CrossAttnOa)
    }

    /// Tokens produced for a window of `m` timesteps.
    pub fn token_len(self, m: usize) -> usize {
        match self {
            Strategy::Interleaved => 2 * m - 1,
            _ => m,
        }
    }

    /// Token position holding the hidden state for timestep `p`.
    pub fn timestep_position(self, p: usize) -> usize {
        match self {
            Strategy::Interleaved => 2 * p,
            _ => p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Obs,
    Action,
    Fused,
}

/// Embedded tokens `[B, L, d]` with per-token modality tags.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub tags: Vec<Modality>,
    /// Always `L - 1`.
    pub prediction_index: usize,
}

impl TokenSequence {
    fn new(tokens: Var, tags: Vec<Modality>) -> Self {
        let prediction_index = tags.len() - 1;
        Self { tokens, tags, prediction_index }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Per-modality linear encoders; only those the strategy needs are built.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub strategy: Strategy,
    pub d_model: usize,
    pub obs: Linear,
    pub action: Option<Linear>,
    pub reward: Option<Linear>,
    pub fusion: Option<Linear>,
    pub start_action: Option<ParamId>,
}

impl Encoders {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        strategy: Strategy,
        obs_dim: usize,
        act_dim: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let obs = Linear::new(store, &format!("{name}.obs"), obs_dim, d_model, true, rng)?;
        let needs_action = !matches!(strategy, Strategy::ObsOnly);
        let action = needs_action
            .then(|| Linear::new(store, &format!("{name}.action"), act_dim, d_model, true, rng))
            .transpose()?;
        let (reward, fusion) = if strategy == Strategy::EmbedConcat {
            (
                Some(Linear::new(store, &format!("{name}.reward"), 1, d_model, true, rng)?),
                Some(Linear::new(store, &format!("{name}.fusion"), 3 * d_model, d_model, true, rng)?),
            )
        } else {
            (None, None)
        };
        let start_action = if strategy.is_cross() {
            let init = (0..d_model).map(|_| rng.random_range(-0.02..0.02)).collect();
            Some(store.insert(format!("{name}.start_action"), Tensor::new([1, 1, d_model], init)?)?)
        } else {
            None
        };
        Ok(Self { strategy, d_model, obs, action, reward, fusion, start_action })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.obs.param_ids();
        for l in [&self.action, &self.reward, &self.fusion].into_iter().flatten() {
            ids.extend(l.param_ids());
        }
        ids.extend(self.start_action);
        ids
    }

    /// Parameters that only ever see observations.
    pub fn obs_param_ids(&self) -> Vec<ParamId> {
        self.obs.param_ids()
    }

    fn action_encoder(&self) -> Result<&Linear> {
        match &self.action {
            Some(a) => Ok(a),
            None => shape_err("strategy has no action encoder"),
        }
    }
}

pub fn build_obs_only(f: &mut Forward, enc: &Encoders, batch: &WindowBatch) -> Result<TokenSequence> {
    let obs = f.tape.constant(batch.observations.clone());
    let tokens = enc.obs.forward(f, obs)?;
    Ok(TokenSequence::new(tokens, vec![Modality::Obs; batch.len]))
}

/// Actions `a_{t-M+1} .. a_{t-1}` are the previous actions of slots `1..M`.
fn encode_inner_actions(f: &mut Forward, enc: &Encoders, batch: &WindowBatch) -> Result<Option<Var>> {
    if batch.len < 2 {
        return Ok(None);
    }
    let acts = f.tape.constant(batch.prev_actions.clone());
    let acts = f.tape.slice(acts, 1, 1, batch.len - 1)?;
    Ok(Some(enc.action_encoder()?.forward(f, acts)?))
}

pub fn build_interleaved(
    f: &mut Forward,
    enc: &Encoders,
    batch: &WindowBatch,
) -> Result<TokenSequence> {
    let m = batch.len;
    let obs = f.tape.constant(batch.observations.clone());
    let eo = enc.obs.forward(f, obs)?;
    let Some(ea) = encode_inner_actions(f, enc, batch)? else {
        return Ok(TokenSequence::new(eo, vec![Modality::Obs]));
    };
    let both = f.tape.concat(&[eo, ea], 1)?;
    let mut order = Vec::with_capacity(2 * m - 1);
    let mut tags = Vec::with_capacity(2 * m - 1);
    for n in 0..m {
        order.push(n);
        tags.push(Modality::Obs);
        if n + 1 < m {
            order.push(m + n);
            tags.push(Modality::Action);
        }
    }
    let tokens = f.tape.index_select(both, 1, &order)?;
    Ok(TokenSequence::new(tokens, tags))
}

/// `concat(emb(o_n), emb(a_{n-1}), emb(r_n))`, shape `[B, M, 3d]`.
pub fn embed_concat_prefusion(f: &mut Forward, enc: &Encoders, batch: &WindowBatch) -> Result<Var> {
    let Some(reward_enc) = &enc.reward else {
        return shape_err("embed_concat needs a reward encoder");
    };
    let obs = f.tape.constant(batch.observations.clone());
    let acts = f.tape.constant(batch.prev_actions.clone());
    let rews = f.tape.constant(batch.rewards.clone());
    let eo = enc.obs.forward(f, obs)?;
    let ea = enc.action_encoder()?.forward(f, acts)?;
    let er = reward_enc.forward(f, rews)?;
    f.tape.concat(&[eo, ea, er], 2)
}

pub fn build_embed_concat(
    f: &mut Forward,
    enc: &Encoders,
    batch: &WindowBatch,
) -> Result<TokenSequence> {
    let Some(fusion) = &enc.fusion else {
        return shape_err("embed_concat needs a fusion layer");
    };
    let joined = embed_concat_prefusion(f, enc, batch)?;
    let tokens = fusion.forward(f, joined)?;
    Ok(TokenSequence::new(tokens, vec![Modality::Fused; batch.len]))
}

/// `(seq_x, seq_y)`: the start token followed by encoded actions, and the
/// encoded observations. Both have length `M`.
pub fn build_cross_attn_inputs(
    f: &mut Forward,
    enc: &Encoders,
    batch: &WindowBatch,
) -> Result<(TokenSequence, TokenSequence)> {
    let Some(start) = enc.start_action else {
        return shape_err("cross attention needs a start-action token");
    };
    let start = f.param(start);
    let start = f.tape.broadcast_to(start, &[batch.batch, 1, enc.d_model])?;
    let seq_x = match encode_inner_actions(f, enc, batch)? {
        Some(ea) => f.tape.concat(&[start, ea], 1)?,
        None => start,
    };
    let tags_x = vec![Modality::Action; batch.len];
    let obs = f.tape.constant(batch.observations.clone());
    let seq_y = enc.obs.forward(f, obs)?;
    Ok((TokenSequence::new(seq_x, tags_x), TokenSequence::new(seq_y, vec![Modality::Obs; batch.len])))
}

/// Single-sequence strategies; cross attention is assembled by the backbone.
pub fn build_tokens(f: &mut Forward, enc: &Encoders, batch: &WindowBatch) -> Result<TokenSequence> {
    match enc.strategy {
        Strategy::ObsOnly => build_obs_only(f, enc, batch),
        Strategy::Interleaved => build_interleaved(f, enc, batch),
        Strategy::EmbedConcat => build_embed_concat(f, enc, batch),
        Strategy::CrossAttnAo | Strategy::CrossAttnOa => {
            shape_err("cross attention strategies produce two sequences")
        }
    }
}
