use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::params::{Forward, ParamId, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::{shape_err, Result};

/// Affine map `x @ W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(in_dim)`, bias zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.insert(format!("{name}.weight"), Tensor::new([in_dim, out_dim], w)?)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros([out_dim]))?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let y = f.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                f.tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.bias.into_iter().fold(vec![self.weight], |mut v, b| {
            v.push(b);
            v
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, f: &mut Forward, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => f.tape.relu(x),
            Activation::Gelu => f.tape.gelu(x),
            Activation::Tanh => f.tape.tanh(x),
        }
    }
}

/// Stack of linear layers with an activation between them; the last layer
/// is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return shape_err(format!("mlp needs >= 2 positive sizes, got {sizes:?}"));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1], true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(f, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(f, h)?;
            }
        }
        Ok(h)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::param_ids).collect()
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            scale: store.insert(format!("{name}.scale"), Tensor::full([dim], 1.0))?,
            shift: store.insert(format!("{name}.shift"), Tensor::zeros([dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (s, b) = (f.param(self.scale), f.param(self.shift));
        f.tape.layer_norm(x, s, b, self.eps)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.scale, self.shift]
    }
}

/// Inverted dropout; identity when the pass has no dropout seed or `p == 0`.
pub fn dropout(f: &mut Forward, x: Var, p: f64) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let Some(seed) = f.next_dropout_seed() else {
        return Ok(x);
    };
    let shape = f.tape.value(x).shape().to_vec();
    let n = f.tape.value(x).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let m = f.tape.constant(Tensor::new(shape, mask)?);
    f.tape.mul(x, m)
}
