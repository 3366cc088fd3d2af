use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::backbone::Backbone;
use super::config::{AgentConfig, BackboneKind, SharingMode};
use crate::autodiff::{Adam, Tensor, Var};
use crate::conditioning::{HistoryWindow, WindowBatch};
use crate::error::{Error, Result};
use crate::nn::{Activation, Forward, Mlp, ParamId, ParamStore};
use crate::replay::SequenceBatch;

/// Module layout of an agent. The same ids address the online and the
/// target store.
#[derive(Clone, Debug)]
pub struct Networks {
    pub sharing: SharingMode,
    pub actor_backbone: Backbone,
    /// `None` when the backbone is shared.
    pub critic_backbone: Option<Backbone>,
    pub actor_head: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
}

impl Networks {
    pub fn build(
        store: &mut ParamStore,
        config: &AgentConfig,
        obs_dim: usize,
        act_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let shared = config.sharing.is_shared();
        let (actor_backbone, critic_backbone) = if shared {
            (Backbone::new(store, "shared.backbone", config, obs_dim, act_dim, rng)?, None)
        } else {
            (
                Backbone::new(store, "actor.backbone", config, obs_dim, act_dim, rng)?,
                Some(Backbone::new(store, "critic.backbone", config, obs_dim, act_dim, rng)?),
            )
        };
        let d = config.feature_dim();
        let (actor_sizes, critic_sizes) = match config.backbone {
            BackboneKind::Transformer => {
                let h = config.critic_hidden.unwrap_or(d);
                (vec![d, act_dim], vec![d + act_dim, h, 1])
            }
            BackboneKind::Mlp => {
                let inner = vec![d; config.mlp.layers - 1];
                (
                    [vec![d], inner.clone(), vec![act_dim]].concat(),
                    [vec![d + act_dim], inner, vec![1]].concat(),
                )
            }
        };
        let actor_head = Mlp::new(store, "actor.head", &actor_sizes, Activation::Relu, rng)?;
        let q1 = Mlp::new(store, "critic.q1", &critic_sizes, Activation::Relu, rng)?;
        let q2 = Mlp::new(store, "critic.q2", &critic_sizes, Activation::Relu, rng)?;
        Ok(Self { sharing: config.sharing, actor_backbone, critic_backbone, actor_head, q1, q2 })
    }

    pub fn critic_backbone(&self) -> &Backbone {
        self.critic_backbone.as_ref().unwrap_or(&self.actor_backbone)
    }

    /// Backbone parameters, including the observation encoders.
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = self.actor_backbone.param_ids();
        if let Some(c) = &self.critic_backbone {
            ids.extend(c.param_ids());
        }
        ids
    }

    /// Parameters the actor loss updates.
    pub fn actor_group(&self) -> Vec<ParamId> {
        let mut ids = self.actor_backbone.param_ids();
        ids.extend(self.actor_head.param_ids());
        ids
    }

    /// Parameters the critic loss updates.
    pub fn critic_group(&self) -> Vec<ParamId> {
        let mut ids = self.q1.param_ids();
        ids.extend(self.q2.param_ids());
        match self.sharing {
            SharingMode::Separate => ids.extend(self.critic_backbone().param_ids()),
            SharingMode::SharedUnfrozen => ids.extend(self.actor_backbone.param_ids()),
            SharingMode::SharedFrozen => {}
        }
        ids
    }
}

/// Learnable scalars of the online networks (targets excluded).
pub fn param_count(config: &AgentConfig, obs_dim: usize, act_dim: usize) -> Result<usize> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Networks::build(&mut store, config, obs_dim, act_dim, &mut rng)?;
    Ok(store.num_scalars())
}

/// L2 norm over every gradient entry. Every listed parameter must have one.
pub fn global_grad_norm(grads: &[Option<&[f64]>]) -> Result<f64> {
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let g = g.ok_or_else(|| Error::Invalid(format!("parameter {i} has no gradient")))?;
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    Ok(sq.sqrt())
}

/// `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(online: &ParamStore, target: &mut ParamStore, tau: f64) -> Result<()> {
    if !online.same_layout(target) {
        return Err(Error::Shape("online and target stores differ in layout".into()));
    }
    let ids: Vec<ParamId> = target.ids().collect();
    for (id, t) in ids.iter().zip(target.many_mut(&ids)) {
        for (t, o) in t.iter_mut().zip(online.get(*id).data()) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }
    Ok(())
}

/// `r + (1 - terminal) * gamma * min(q1, q2)`.
pub fn td3_target(reward: f64, terminal: bool, gamma: f64, q1: f64, q2: f64) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * q1.min(q2)
    }
}

pub fn clip_noise(sample: f64, clip: f64) -> f64 {
    sample.clamp(-clip, clip)
}

/// Adds `noise` to `action` and clamps into the box.
pub fn perturb_action(action: &mut [f64], noise: &[f64], low: &[f64], high: &[f64]) {
    for (((a, n), lo), hi) in action.iter_mut().zip(noise).zip(low).zip(high) {
        *a = (*a + n).clamp(*lo, *hi);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    /// Global norm over the whole trainable group.
    pub grad_norm: f64,
    /// Norm over the loss's head parameters only (actor head, or both
    /// critic heads). These exist in every sharing mode.
    pub head_grad_norm: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub critic: UpdateStats,
    /// Present on steps where the delayed actor update ran.
    pub actor: Option<UpdateStats>,
}

/// TD3 agent: online and target parameters plus optimizer state.
pub struct Agent {
    pub config: AgentConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub nets: Networks,
    pub online: ParamStore,
    pub target: ParamStore,
    actor_group: Vec<ParamId>,
    critic_group: Vec<ParamId>,
    actor_opt: Adam,
    critic_opt: Adam,
    critic_steps: u64,
    actor_steps: u64,
}

/// Rows to supervise and their loss weights.
struct Supervised {
    positions: Vec<usize>,
    /// `[B * P]`, summing to one.
    weights: Vec<f64>,
}

impl Agent {
    pub fn new(
        config: &AgentConfig,
        obs_dim: usize,
        act_dim: usize,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if action_low.len() != act_dim || action_high.len() != act_dim {
            return Err(Error::Shape(format!("action bounds do not match act_dim {act_dim}")));
        }
        if action_low.iter().zip(&action_high).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("action bounds need low < high".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut online = ParamStore::new();
        let nets = Networks::build(&mut online, config, obs_dim, act_dim, &mut rng)?;
        let target = online.clone();
        let actor_group = nets.actor_group();
        let critic_group = nets.critic_group();
        let sizes = |g: &[ParamId]| g.iter().map(|&id| online.get(id).numel()).collect::<Vec<_>>();
        let actor_opt = Adam::new(config.td3.lr, &sizes(&actor_group));
        let critic_opt = Adam::new(config.td3.lr, &sizes(&critic_group));
        Ok(Self {
            config: config.clone(),
            obs_dim,
            act_dim,
            action_low,
            action_high,
            nets,
            online,
            target,
            actor_group,
            critic_group,
            actor_opt,
            critic_opt,
            critic_steps: 0,
            actor_steps: 0,
        })
    }

    pub fn actor_group(&self) -> &[ParamId] {
        &self.actor_group
    }

    pub fn critic_group(&self) -> &[ParamId] {
        &self.critic_group
    }

    pub fn critic_steps(&self) -> u64 {
        self.critic_steps
    }

    pub fn actor_steps(&self) -> u64 {
        self.actor_steps
    }

    pub fn param_count(&self) -> usize {
        self.online.num_scalars()
    }

    /// Replaces online and target parameters with a saved store.
    pub fn load_params(&mut self, params: &ParamStore) -> Result<()> {
        self.online.load_values_from(params)?;
        self.target.load_values_from(params)
    }

    fn scale(&self) -> Vec<f64> {
        self.action_low.iter().zip(&self.action_high).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    fn center(&self) -> Vec<f64> {
        self.action_low.iter().zip(&self.action_high).map(|(l, h)| 0.5 * (h + l)).collect()
    }

    /// `center + scale * tanh(head(features))`.
    fn policy(&self, f: &mut Forward, features: Var) -> Result<Var> {
        let raw = self.nets.actor_head.forward(f, features)?;
        let squashed = f.tape.tanh(raw)?;
        let scale = f.tape.constant(Tensor::from_vec(self.scale()));
        let center = f.tape.constant(Tensor::from_vec(self.center()));
        let scaled = f.tape.mul(squashed, scale)?;
        f.tape.add(scaled, center)
    }

    fn q_value(f: &mut Forward, head: &Mlp, features: Var, actions: Var) -> Result<Var> {
        let joined = f.tape.concat(&[features, actions], 2)?;
        head.forward(f, joined)
    }

    fn training_forward<'a>(&self, store: &'a ParamStore, group: &[ParamId], rng: &mut impl Rng) -> Forward<'a> {
        let f = Forward::with_trainable(store, group);
        let dropout = self.config.backbone == BackboneKind::Transformer && self.config.transformer.dropout > 0.0;
        if dropout {
            f.with_dropout_seed(rng.next_u64())
        } else {
            f
        }
    }

    /// Deterministic actions for a batch of windows, `[B][act_dim]`.
    fn policy_actions(&self, windows: &WindowBatch) -> Result<Vec<Vec<f64>>> {
        let mut f = Forward::inference(&self.online);
        let h = self.nets.actor_backbone.features(&mut f, windows, &[windows.len - 1])?;
        let a = self.policy(&mut f, h)?;
        let v = f.tape.value(a);
        if !v.is_finite() {
            return Err(Error::NonFinite("actor output".into()));
        }
        Ok(v.data().chunks(self.act_dim).map(<[f64]>::to_vec).collect())
    }

    /// One action per window. With `explore`, Gaussian noise of std
    /// `exploration_noise * scale` is added and the result clamped.
    pub fn act_batch(&self, windows: &WindowBatch, explore: bool, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        let mut actions = self.policy_actions(windows)?;
        if explore {
            let std: Vec<f64> = self.scale().iter().map(|s| s * self.config.td3.exploration_noise).collect();
            for a in &mut actions {
                let noise: Vec<f64> = std.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
                perturb_action(a, &noise, &self.action_low, &self.action_high);
            }
        }
        Ok(actions)
    }

    pub fn act(&self, window: &HistoryWindow, explore: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let batch = WindowBatch::stack(std::slice::from_ref(window))?;
        Ok(self.act_batch(&batch, explore, rng)?.remove(0))
    }

    /// Actor-side hidden state at the window's last timestep.
    pub fn last_hidden(&self, window: &HistoryWindow) -> Result<Vec<f64>> {
        if !self.nets.actor_backbone.is_sequence() {
            return Err(Error::Invalid("MLP agents have no sequence hidden state".into()));
        }
        let batch = WindowBatch::stack(std::slice::from_ref(window))?;
        let mut f = Forward::inference(&self.online);
        let h = self.nets.actor_backbone.features(&mut f, &batch, &[batch.len - 1])?;
        Ok(f.tape.value(h).data().to_vec())
    }

    fn supervised(batch: &SequenceBatch) -> Result<Supervised> {
        let (b, c) = (batch.windows.batch, batch.windows.len);
        let mask = batch.supervised.data();
        let last_only = (0..b).all(|i| (0..c).all(|p| (mask[i * c + p] != 0.0) == (p + 1 == c)));
        if last_only {
            return Ok(Supervised { positions: vec![c - 1], weights: vec![1.0 / b as f64; b] });
        }
        let count = mask.iter().filter(|&&m| m != 0.0).count();
        if count == 0 {
            return Err(Error::Invalid("batch has no supervised positions".into()));
        }
        let weights = mask.iter().map(|&m| if m != 0.0 { 1.0 / count as f64 } else { 0.0 }).collect();
        Ok(Supervised { positions: (0..c).collect(), weights })
    }

    /// `[B, C, k]` values at the chosen positions, flattened.
    fn gather(t: &Tensor, positions: &[usize]) -> Vec<f64> {
        let s = t.shape();
        let (b, c, k) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * positions.len() * k);
        for i in 0..b {
            for &p in positions {
                out.extend_from_slice(&t.data()[(i * c + p) * k..(i * c + p + 1) * k]);
            }
        }
        out
    }

    /// TD targets at the given positions, `[B * P]`. Uses target networks
    /// only; nothing is tracked.
    pub fn td3_targets(&self, batch: &SequenceBatch, positions: &[usize], rng: &mut impl Rng) -> Result<Vec<f64>> {
        let td3 = &self.config.td3;
        let mut f = Forward::inference(&self.target);
        let next = &batch.next_windows;
        let ha = self.nets.actor_backbone.features(&mut f, next, positions)?;
        let a = self.policy(&mut f, ha)?;
        let mut actions = f.tape.value(a).clone();
        let scale = self.scale();
        let ad = self.act_dim;
        for (j, v) in actions.data_mut().iter_mut().enumerate() {
            let k = j % ad;
            let eps = td3.policy_noise * scale[k] * rng.sample::<f64, _>(StandardNormal);
            let eps = clip_noise(eps, td3.noise_clip * scale[k]);
            *v = (*v + eps).clamp(self.action_low[k], self.action_high[k]);
        }
        let hc = match &self.nets.critic_backbone {
            Some(c) => c.features(&mut f, next, positions)?,
            None => ha,
        };
        let a = f.tape.constant(actions);
        let q1 = Self::q_value(&mut f, &self.nets.q1, hc, a)?;
        let q2 = Self::q_value(&mut f, &self.nets.q2, hc, a)?;
        let rewards = Self::gather(&batch.rewards, positions);
        let terminals = Self::gather(&batch.terminals, positions);
        let (q1, q2) = (f.tape.value(q1).data(), f.tape.value(q2).data());
        Ok((0..rewards.len())
            .map(|i| td3_target(rewards[i], terminals[i] != 0.0, td3.gamma, q1[i], q2[i]))
            .collect())
    }

    fn optimizer_step(
        store: &mut ParamStore,
        opt: &mut Adam,
        group: &[ParamId],
        grads: &[Option<Vec<f64>>],
    ) -> Result<()> {
        let names: Vec<String> = group.iter().map(|&id| store.name(id).to_string()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let grads: Vec<Option<&[f64]>> = grads.iter().map(Option::as_deref).collect();
        let mut params = store.many_mut(group);
        opt.step(&mut params, &grads, &names)
    }

    fn group_norm(grads: &[Option<Vec<f64>>]) -> f64 {
        // Parameters the loss never reached count as zero.
        let views: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_deref().unwrap_or(&[]))).collect();
        global_grad_norm(&views).unwrap_or(f64::NAN)
    }

    fn subset_norm(group: &[ParamId], grads: &[Option<Vec<f64>>], subset: &[ParamId]) -> f64 {
        let picked: Vec<Option<Vec<f64>>> =
            group.iter().zip(grads).filter(|(id, _)| subset.contains(id)).map(|(_, g)| g.clone()).collect();
        Self::group_norm(&picked)
    }

    fn weighted_sum(f: &mut Forward, x: Var, weights: Vec<f64>) -> Result<Var> {
        let shape = f.tape.value(x).shape().to_vec();
        let w = f.tape.constant(Tensor::new(shape, weights)?);
        let wx = f.tape.mul(x, w)?;
        f.tape.sum(wx)
    }

    /// One critic step. In `shared_frozen` the backbone output is detached,
    /// so the backbone and its encoders get no gradient from this loss.
    pub fn critic_update(&mut self, batch: &SequenceBatch, rng: &mut impl Rng) -> Result<UpdateStats> {
        let sup = Self::supervised(batch)?;
        let y = self.td3_targets(batch, &sup.positions, rng)?;
        let actions = Self::gather(&batch.actions, &sup.positions);
        let (b, p) = (batch.windows.batch, sup.positions.len());
        let mut f = self.training_forward(&self.online, &self.critic_group, rng);
        let mut h = self.nets.critic_backbone().features(&mut f, &batch.windows, &sup.positions)?;
        if self.nets.sharing == SharingMode::SharedFrozen {
            h = f.tape.detach(h)?;
        }
        let a = f.tape.constant(Tensor::new([b, p, self.act_dim], actions)?);
        let y = f.tape.constant(Tensor::new([b, p, 1], y)?);
        let mut errors = Vec::with_capacity(2);
        for head in [&self.nets.q1, &self.nets.q2] {
            let q = Self::q_value(&mut f, head, h, a)?;
            let diff = f.tape.sub(q, y)?;
            errors.push(f.tape.square(diff)?);
        }
        let both = f.tape.add(errors[0], errors[1])?;
        let loss = Self::weighted_sum(&mut f, both, sup.weights)?;
        let value = f.tape.value(loss).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            log::error!("critic loss is {value}; step aborted");
            return Err(Error::NonFinite(format!("critic loss {value}")));
        }
        f.tape.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> = self.critic_group.iter().map(|&id| f.grad(id).map(<[f64]>::to_vec)).collect();
        drop(f);
        let grad_norm = Self::group_norm(&grads);
        let heads: Vec<ParamId> = self.nets.q1.param_ids().into_iter().chain(self.nets.q2.param_ids()).collect();
        let head_grad_norm = Self::subset_norm(&self.critic_group, &grads, &heads);
        Self::optimizer_step(&mut self.online, &mut self.critic_opt, &self.critic_group, &grads)?;
        self.critic_steps += 1;
        Ok(UpdateStats { loss: value, grad_norm, head_grad_norm })
    }

    /// One actor step on `-mean Q1(window, actor(window))`. Critic heads are
    /// not in the trainable set, so they only pass gradients through.
    pub fn actor_update(&mut self, batch: &SequenceBatch, rng: &mut impl Rng) -> Result<UpdateStats> {
        let sup = Self::supervised(batch)?;
        let mut f = self.training_forward(&self.online, &self.actor_group, rng);
        let h = self.nets.actor_backbone.features(&mut f, &batch.windows, &sup.positions)?;
        let a = self.policy(&mut f, h)?;
        let hc = match &self.nets.critic_backbone {
            Some(c) => c.features(&mut f, &batch.windows, &sup.positions)?,
            None => h,
        };
        let q = Self::q_value(&mut f, &self.nets.q1, hc, a)?;
        let total = Self::weighted_sum(&mut f, q, sup.weights)?;
        let loss = f.tape.neg(total)?;
        let value = f.tape.value(loss).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            log::error!("actor loss is {value}; step aborted");
            return Err(Error::NonFinite(format!("actor loss {value}")));
        }
        f.tape.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> = self.actor_group.iter().map(|&id| f.grad(id).map(<[f64]>::to_vec)).collect();
        drop(f);
        let grad_norm = Self::group_norm(&grads);
        let head_grad_norm = Self::subset_norm(&self.actor_group, &grads, &self.nets.actor_head.param_ids());
        Self::optimizer_step(&mut self.online, &mut self.actor_opt, &self.actor_group, &grads)?;
        self.actor_steps += 1;
        Ok(UpdateStats { loss: value, grad_norm, head_grad_norm })
    }

    pub fn soft_update_targets(&mut self) -> Result<()> {
        soft_update(&self.online, &mut self.target, self.config.td3.tau)
    }

    /// Critic step, then every `policy_delay` critic steps an actor step and
    /// a target update.
    pub fn train_step(&mut self, batch: &SequenceBatch, rng: &mut impl Rng) -> Result<TrainStats> {
        let critic = self.critic_update(batch, rng)?;
        let mut actor = None;
        if self.critic_steps % self.config.td3.policy_delay as u64 == 0 {
            actor = Some(self.actor_update(batch, rng)?);
            self.soft_update_targets()?;
        }
        Ok(TrainStats { critic, actor })
    }
}
