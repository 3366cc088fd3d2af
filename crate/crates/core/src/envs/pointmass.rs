use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Dynamics, PomdpMask};

pub const DT: f64 = 0.05;
pub const MAX_STEPS: usize = 64;
pub const WALL: f64 = 2.0;
pub const ACTION_COST: f64 = 0.01;

/// 1D point mass that must reach a goal. State `[x, v, g]`.
///
/// `x' = x + v dt`, `v' = v + a dt`; hitting a wall at `±2` stops the mass.
/// Reward is `-(x' - g)^2 - 0.01 a^2`.
#[derive(Clone, Debug, Default)]
pub struct PointMass {
    pub x: f64,
    pub v: f64,
    pub goal: f64,
}

impl Dynamics for PointMass {
    fn full_obs_dim(&self) -> usize {
        3
    }

    fn act_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-1.0], vec![1.0])
    }

    fn max_steps(&self) -> usize {
        MAX_STEPS
    }

    fn dt(&self) -> f64 {
        DT
    }

    fn reward_bounds(&self) -> (f64, f64) {
        // |x' - g| <= 3 and |a| <= 1.
        (-(9.0 + ACTION_COST), 0.0)
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.x = rng.random_range(-1.0..1.0);
        self.goal = rng.random_range(-1.0..1.0);
        self.v = 0.0;
    }

    fn advance(&mut self, action: &[f64]) -> f64 {
        let a = action[0];
        let mut x = self.x + self.v * DT;
        let mut v = self.v + a * DT;
        if x.abs() > WALL {
            x = x.clamp(-WALL, WALL);
            v = 0.0;
        }
        self.x = x;
        self.v = v;
        -(x - self.goal).powi(2) - ACTION_COST * a * a
    }

    fn full_obs(&self) -> Vec<f64> {
        vec![self.x, self.v, self.goal]
    }

    fn mask_indices(&self, mask: PomdpMask) -> Option<Vec<usize>> {
        Some(match mask {
            PomdpMask::Full => vec![0, 1, 2],
            PomdpMask::HideVelocity => vec![0, 2],
            PomdpMask::HidePosition => vec![1, 2],
        })
    }
}
