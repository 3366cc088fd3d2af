use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Dynamics, PomdpMask};

pub const DT: f64 = 0.05;
pub const MAX_STEPS: usize = 200;
pub const GRAVITY: f64 = 10.0;
pub const LENGTH: f64 = 1.0;
pub const MASS: f64 = 1.0;
pub const MAX_SPEED: f64 = 8.0;
pub const MAX_TORQUE: f64 = 2.0;

/// Torque-limited swing-up. `theta = 0` hangs down, `theta = pi` is upright.
///
/// `w' = clip(w + (-(g/l) sin(theta) + u/(m l^2)) dt, ±8)`, then
/// `theta' = theta + w' dt`. Reward is
/// `-(wrap(theta' - pi)^2 + 0.1 w'^2 + 0.001 u^2)`.
/// Observation `[cos theta, sin theta, w]`.
#[derive(Clone, Debug, Default)]
pub struct Pendulum {
    pub theta: f64,
    pub omega: f64,
}

/// Angle mapped into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

impl Dynamics for Pendulum {
    fn full_obs_dim(&self) -> usize {
        3
    }

    fn act_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-MAX_TORQUE], vec![MAX_TORQUE])
    }

    fn max_steps(&self) -> usize {
        MAX_STEPS
    }

    fn dt(&self) -> f64 {
        DT
    }

    fn reward_bounds(&self) -> (f64, f64) {
        let worst = PI * PI + 0.1 * MAX_SPEED * MAX_SPEED + 0.001 * MAX_TORQUE * MAX_TORQUE;
        (-worst, 0.0)
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.theta = rng.random_range(-PI..PI);
        self.omega = rng.random_range(-1.0..1.0);
    }

    fn advance(&mut self, action: &[f64]) -> f64 {
        let u = action[0];
        let accel = -(GRAVITY / LENGTH) * self.theta.sin() + u / (MASS * LENGTH * LENGTH);
        self.omega = (self.omega + accel * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta += self.omega * DT;
        let err = wrap_angle(self.theta - PI);
        -(err * err + 0.1 * self.omega * self.omega + 0.001 * u * u)
    }

    fn full_obs(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega]
    }

    fn mask_indices(&self, mask: PomdpMask) -> Option<Vec<usize>> {
        Some(match mask {
            PomdpMask::Full => vec![0, 1, 2],
            PomdpMask::HideVelocity => vec![0, 1],
            PomdpMask::HidePosition => vec![2],
        })
    }
}
