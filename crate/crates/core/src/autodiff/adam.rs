use crate::error::{shape_err, Error, Result};

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Moments are sized from `sizes`, one entry per parameter tensor.
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.m[i], &self.v[i])
    }

    /// Applies one update in place. Every gradient is checked for finiteness
    /// before anything is modified; `None` counts as an all-zero gradient.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Option<&[f64]>],
        names: &[&str],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return shape_err(format!(
                "adam owns {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.is_some_and(|g| g.len() != p.len()) {
                return shape_err(format!("adam moment {i} does not match its parameter"));
            }
            if g.is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                let name = names.get(i).copied().unwrap_or("?");
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i].map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
