use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqctl::envs::{Dynamics, Env, EnvName, Pendulum, PointMass, PomdpMask};
use seqctl::Error;

const ALL: [(EnvName, PomdpMask); 6] = [
    (EnvName::Pointmass, PomdpMask::Full),
    (EnvName::Pointmass, PomdpMask::HideVelocity),
    (EnvName::Pointmass, PomdpMask::HidePosition),
    (EnvName::Pendulum, PomdpMask::Full),
    (EnvName::Pendulum, PomdpMask::HideVelocity),
    (EnvName::Pendulum, PomdpMask::HidePosition),
];

#[test]
fn reset_is_seeded() {
    for (name, mask) in ALL {
        let mut a = Env::new(name, mask).unwrap();
        let mut b = Env::new(name, mask).unwrap();
        assert_eq!(a.reset(17), b.reset(17));
        assert_ne!(a.full_observation(), {
            b.reset(18);
            b.full_observation()
        });
    }
}

#[test]
fn masks_project_observations() {
    let mut full = Env::new(EnvName::Pointmass, PomdpMask::Full).unwrap();
    let mut hv = Env::new(EnvName::Pointmass, PomdpMask::HideVelocity).unwrap();
    let mut hp = Env::new(EnvName::Pointmass, PomdpMask::HidePosition).unwrap();
    let o = full.reset(3);
    assert_eq!(o.len(), 3);
    assert_eq!(hv.reset(3), vec![o[0], o[2]]);
    assert_eq!(hp.reset(3), vec![o[1], o[2]]);

    let mut full = Env::new(EnvName::Pendulum, PomdpMask::Full).unwrap();
    let mut hv = Env::new(EnvName::Pendulum, PomdpMask::HideVelocity).unwrap();
    let mut hp = Env::new(EnvName::Pendulum, PomdpMask::HidePosition).unwrap();
    let o = full.reset(4);
    assert_eq!(hv.reset(4), vec![o[0], o[1]]);
    assert_eq!(hp.reset(4), vec![o[2]]);
    for (name, mask) in ALL {
        let env = Env::new(name, mask).unwrap();
        if mask != PomdpMask::Full {
            assert!(env.spec().obs_dim < 3);
        }
    }
}

#[test]
fn masking_leaves_dynamics_and_rewards_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let actions: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    for name in [EnvName::Pointmass, EnvName::Pendulum] {
        let mut full = Env::new(name, PomdpMask::Full).unwrap();
        let mut masked = Env::new(name, PomdpMask::HideVelocity).unwrap();
        full.reset(5);
        masked.reset(5);
        for &a in &actions {
            let (x, y) = (full.step(&[a]).unwrap(), masked.step(&[a]).unwrap());
            assert_eq!(x.reward, y.reward);
            assert_eq!(full.full_observation(), masked.full_observation());
        }
    }
}

#[test]
fn incompatible_mask_is_rejected() {
    struct NoMask(PointMass);
    impl Dynamics for NoMask {
        fn full_obs_dim(&self) -> usize { 3 }
        fn act_dim(&self) -> usize { 1 }
        fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) { self.0.action_bounds() }
        fn max_steps(&self) -> usize { 4 }
        fn dt(&self) -> f64 { 0.05 }
        fn reward_bounds(&self) -> (f64, f64) { self.0.reward_bounds() }
        fn reset(&mut self, rng: &mut ChaCha8Rng) { self.0.reset(rng) }
        fn advance(&mut self, a: &[f64]) -> f64 { self.0.advance(a) }
        fn full_obs(&self) -> Vec<f64> { self.0.full_obs() }
        fn mask_indices(&self, mask: PomdpMask) -> Option<Vec<usize>> {
            (mask == PomdpMask::Full).then(|| vec![0, 1, 2])
        }
    }
    assert!(Env::from_dynamics(Box::new(NoMask(PointMass::default())), PomdpMask::HideVelocity).is_err());
    assert!(Env::from_dynamics(Box::new(NoMask(PointMass::default())), PomdpMask::Full).is_ok());
}

#[test]
fn point_mass_hand_computed_step() {
    let mut pm = PointMass { x: 0.0, v: 0.0, goal: 0.5 };
    let r = pm.advance(&[1.0]);
    assert_eq!((pm.x, pm.v), (0.0, 0.05));
    assert_eq!(r, -0.25 - 0.01);
    let mut pm = PointMass { x: 0.3, v: 0.0, goal: 0.3 };
    let r = pm.advance(&[0.5]);
    assert_eq!(r, -0.01 * 0.25);
    // Walls stop the mass.
    let mut pm = PointMass { x: 1.99, v: 1.0, goal: 0.0 };
    pm.advance(&[1.0]);
    assert_eq!((pm.x, pm.v), (2.0, 0.0));
}

#[test]
fn pendulum_rests_at_the_bottom() {
    let mut p = Pendulum { theta: 0.0, omega: 0.0 };
    for _ in 0..50 {
        p.advance(&[0.0]);
    }
    assert_eq!((p.theta, p.omega), (0.0, 0.0));
    // Gravity pulls a displaced pendulum back toward the bottom.
    let mut p = Pendulum { theta: 0.3, omega: 0.0 };
    p.advance(&[0.0]);
    assert!(p.omega < 0.0);
    let mut up = Pendulum { theta: std::f64::consts::PI, omega: 0.0 };
    let r = up.advance(&[0.0]);
    assert!(r.abs() < 1e-20);
}

#[test]
fn episodes_truncate_and_reject_further_steps() {
    for (name, len) in [(EnvName::Pointmass, 64), (EnvName::Pendulum, 200)] {
        let mut env = Env::new(name, PomdpMask::Full).unwrap();
        assert!(matches!(env.step(&[0.0]), Err(Error::EpisodeDone)));
        env.reset(1);
        for k in 1..=len {
            let s = env.step(&[0.1]).unwrap();
            assert_eq!(s.done, k == len);
            assert!(!s.terminal);
        }
        assert!(matches!(env.step(&[0.0]), Err(Error::EpisodeDone)));
        env.reset(2);
        assert!(env.step(&[0.0]).is_ok());
        assert!(matches!(env.step(&[f64::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(env.step(&[0.0, 0.0]), Err(Error::Shape(_))));
    }
}

#[test]
fn out_of_bounds_actions_are_clamped() {
    let mut a = Env::new(EnvName::Pendulum, PomdpMask::Full).unwrap();
    let mut b = Env::new(EnvName::Pendulum, PomdpMask::Full).unwrap();
    a.reset(9);
    b.reset(9);
    assert_eq!(a.step(&[50.0]).unwrap(), b.step(&[2.0]).unwrap());
    assert_eq!(a.spec().action_scale(), vec![2.0]);
}

#[test]
fn trajectories_are_deterministic_and_rewards_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, mask) in ALL {
        let mut env = Env::new(name, mask).unwrap();
        let (lo, hi) = env.spec().reward_bounds;
        let scale = env.spec().action_scale()[0];
        let actions: Vec<f64> = (0..env.spec().max_steps).map(|_| rng.random_range(-1.5..1.5) * scale).collect();
        let run = |env: &mut Env| {
            let mut out = vec![env.reset(21)];
            for &a in &actions {
                let s = env.step(&[a]).unwrap();
                assert!(s.reward >= lo && s.reward <= hi && s.reward.is_finite());
                out.push(s.obs);
            }
            out
        };
        let first = run(&mut env);
        assert_eq!(first, run(&mut env));
    }
}

#[test]
fn hidden_velocity_needs_memory() {
    // Same masked observation, opposite velocities: the better action differs.
    let best_action = |v: f64| {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for a in [-1.0, 0.0, 1.0] {
            let mut pm = PointMass { x: 0.0, v, goal: 0.0 };
            let mut total = 0.0;
            for _ in 0..20 {
                total += pm.advance(&[a]);
            }
            if total > best.0 {
                best = (total, a);
            }
        }
        best.1
    };
    let env = Env::new(EnvName::Pointmass, PomdpMask::HideVelocity).unwrap();
    let project = |v: f64| {
        let full = PointMass { x: 0.0, v, goal: 0.0 }.full_obs();
        let keep = PointMass::default().mask_indices(env.mask()).unwrap();
        keep.iter().map(|&i| full[i]).collect::<Vec<_>>()
    };
    assert_eq!(project(1.0), project(-1.0));
    assert_ne!(best_action(1.0), best_action(-1.0));
}
