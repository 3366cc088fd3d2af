mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqctl::conditioning::{assemble_window, Masking, SlotSource};
use seqctl::replay::{
    read_snapshot, supervision_positions, write_snapshot, EpisodeStore, RollingHistory, SliceMode,
    SliceSpec, Supervision, Transition,
};
use seqctl::Error;

fn tr(obs: f64, action: f64, reward: f64, next: f64, done: bool) -> Transition {
    Transition {
        obs: vec![obs],
        action: vec![action],
        reward,
        next_obs: vec![next],
        terminal: false,
        done,
    }
}

/// Episodes of the given lengths; observation values count up from 1.
fn store_with_episodes(lengths: &[usize], capacity: usize) -> EpisodeStore {
    let mut store = EpisodeStore::new(1, 1, capacity).unwrap();
    let mut o = 1.0;
    for &len in lengths {
        for k in 0..len {
            store.append(&tr(o, 10.0 * o, 100.0 * o, o + 1.0, k + 1 == len)).unwrap();
            o += 1.0;
        }
    }
    store
}

fn spec(context: usize, mode: SliceMode, masking: Masking) -> SliceSpec {
    SliceSpec { context, mode, masking, supervision: Supervision::LastToken }
}

#[test]
fn ring_evicts_oldest() {
    let store = store_with_episodes(&[3], 2);
    assert_eq!((store.start(), store.end(), store.len()), (1, 3, 2));
    assert!(store.record(0).is_err());
    assert_eq!(store.record(1).unwrap().obs, vec![2.0]);
}

#[test]
fn done_starts_a_new_episode() {
    let store = store_with_episodes(&[2, 1], 10);
    let r = store.record(2).unwrap();
    assert_eq!((r.episode, r.step), (1, 0));
    assert_eq!(r.prev_action, vec![0.0]);
    assert_eq!(r.prev_reward, 0.0);
    let r = store.record(1).unwrap();
    assert_eq!((r.episode, r.step, r.prev_action[0], r.prev_reward), (0, 1, 10.0, 100.0));
}

#[test]
fn large_capacity_and_shape_checks() {
    let mut store = EpisodeStore::new(3, 2, 1_500_000).unwrap();
    assert_eq!(store.capacity(), 1_500_000);
    let bad = Transition { obs: vec![0.0; 2], action: vec![0.0; 2], reward: 0.0, next_obs: vec![0.0; 3], terminal: false, done: false };
    assert!(matches!(store.append(&bad), Err(Error::Shape(_))));
    assert!(EpisodeStore::new(3, 2, 0).is_err());
}

#[test]
fn valid_index_examples() {
    let store = store_with_episodes(&[5], 100);
    let within = spec(3, SliceMode::WithinEpisode, Masking::None);
    assert_eq!(store.valid_indices(&within), vec![2, 3, 4]);
    let cross = spec(3, SliceMode::CrossEpisode, Masking::Zero);
    assert_eq!(store.valid_indices(&cross).len(), 5);

    let store = store_with_episodes(&[4, 2], 100);
    assert_eq!(store.valid_indices(&within), vec![2, 3]);
}

#[test]
fn boundary_window_examples() {
    // Episode A holds o1..o4, episode B starts with o5.
    let store = store_with_episodes(&[4, 3], 100);
    let obs = |m| store.make_window(4, &spec(3, SliceMode::CrossEpisode, m)).unwrap();
    let none = obs(Masking::None);
    assert_eq!(none.observations, vec![3.0, 4.0, 5.0]);
    assert_eq!(none.valid, vec![true, true, true]);
    assert_eq!(none.in_episode, vec![false, false, true]);
    assert_eq!(none.prev_actions, vec![20.0, 30.0, 0.0]);
    let zero = obs(Masking::Zero);
    assert_eq!(zero.observations, vec![0.0, 0.0, 5.0]);
    assert_eq!(zero.prev_actions, vec![0.0, 0.0, 0.0]);
    assert_eq!(zero.valid, vec![false, false, true]);
    let first = obs(Masking::FirstObs);
    assert_eq!(first.observations, vec![5.0, 5.0, 5.0]);
    assert_eq!(first.rewards, vec![0.0, 0.0, 0.0]);
    assert_eq!(first.valid, vec![false, false, true]);

    let within = spec(3, SliceMode::WithinEpisode, Masking::None);
    assert!(store.make_window(4, &within).is_err());
}

#[test]
fn slots_before_history_follow_the_mask() {
    let store = store_with_episodes(&[4], 100);
    let none = store.make_window(0, &spec(3, SliceMode::CrossEpisode, Masking::None)).unwrap();
    assert_eq!(none.observations, vec![0.0, 0.0, 1.0]);
    assert_eq!(none.valid, vec![false, false, true]);
    let first = store.make_window(1, &spec(3, SliceMode::CrossEpisode, Masking::FirstObs)).unwrap();
    assert_eq!(first.observations, vec![1.0, 1.0, 2.0]);
}

#[test]
fn windows_never_cross_the_ring_seam() {
    let store = store_with_episodes(&[10], 6);
    let s = spec(3, SliceMode::CrossEpisode, Masking::None);
    assert_eq!(store.start(), 4);
    assert_eq!(store.valid_indices(&s), vec![6, 7, 8, 9]);
    assert!(store.make_window(5, &s).is_err());
}

#[test]
fn single_episode_of_context_length_gives_one_window() {
    let store = store_with_episodes(&[4], 100);
    let s = spec(4, SliceMode::WithinEpisode, Masking::None);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = store.sample_batch(&s, 256, &mut rng).unwrap();
    assert_eq!(batch.len(), 256);
    assert!(batch.samples.iter().all(|x| x.index == 3));
    assert_eq!(batch.windows.observations.shape(), &[256, 4, 1]);
}

#[test]
fn empty_valid_set_reports_insufficient_data() {
    let store = store_with_episodes(&[3, 2], 100);
    let s = spec(5, SliceMode::WithinEpisode, Masking::None);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = store.sample_batch(&s, 4, &mut rng).unwrap_err();
    assert!(matches!(err, Error::InsufficientData(_)));
    assert!(err.to_string().contains("insufficient data"));
    let empty = EpisodeStore::new(1, 1, 10).unwrap();
    assert!(matches!(empty.sample_indices(&s, 1, &mut rng), Err(Error::InsufficientData(_))));
}

#[test]
fn sampling_is_uniform_over_valid_indices() {
    // Two episodes of 14 steps with C = 10: ends 9..13 and 23..27.
    let store = store_with_episodes(&[14, 14], 100);
    let s = spec(10, SliceMode::WithinEpisode, Masking::None);
    let valid = store.valid_indices(&s);
    assert_eq!(valid.len(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws = store.sample_indices(&s, 100_000, &mut rng).unwrap();
    for v in valid {
        let freq = draws.iter().filter(|&&d| d == v).count() as f64 / 1e5;
        assert!((freq - 0.1).abs() <= 0.01, "index {v}: {freq}");
    }
    let again = store.sample_indices(&s, 100_000, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(draws, again);
}

#[test]
fn supervision_examples() {
    let store = store_with_episodes(&[4, 6], 100);
    let every = |c, mode| SliceSpec { supervision: Supervision::EveryToken, ..spec(c, mode, Masking::Zero) };
    let w = store.make_window(6, &every(1, SliceMode::CrossEpisode)).unwrap();
    assert_eq!(supervision_positions(&w, &every(1, SliceMode::CrossEpisode)), vec![0]);
    assert_eq!(supervision_positions(&w, &spec(1, SliceMode::CrossEpisode, Masking::Zero)), vec![0]);
    // Window ending at step 2 of episode B has 2 foreign slots.
    let s = every(5, SliceMode::CrossEpisode);
    let w = store.make_window(6, &s).unwrap();
    assert_eq!(supervision_positions(&w, &s), vec![2, 3, 4]);
    let s = every(5, SliceMode::WithinEpisode);
    let w = store.make_window(9, &s).unwrap();
    assert_eq!(supervision_positions(&w, &s), vec![0, 1, 2, 3, 4]);
}

#[test]
fn next_window_matches_following_window_in_episode() {
    for seed in 0..40 {
        let log = common::random_log(&mut ChaCha8Rng::seed_from_u64(seed), 120);
        let store = common::build_store(&log, 300);
        for (mode, masking) in common::SLICE_VARIANTS {
            for c in common::CONTEXTS {
                let s = spec(c, mode, masking);
                for t in store.valid_indices(&s) {
                    let sample = store.make_sample(t, &s).unwrap();
                    let rec = store.record(t).unwrap();
                    if !rec.done && t + 1 < store.end() {
                        assert_eq!(sample.next_window, store.make_window(t + 1, &s).unwrap());
                    } else {
                        let last = sample.next_window.obs(c - 1);
                        assert_eq!(last, &rec.next_obs[..]);
                    }
                }
            }
        }
    }
}

#[test]
fn within_episode_windows_hold_one_episode() {
    for seed in 0..50 {
        let log = common::random_log(&mut ChaCha8Rng::seed_from_u64(seed), 200);
        let store = common::build_store(&log, 1000);
        let s = spec(5, SliceMode::WithinEpisode, Masking::None);
        for t in store.valid_indices(&s) {
            let eps: Vec<u64> = (t - 4..=t).map(|g| store.record(g).unwrap().episode).collect();
            assert!(eps.iter().all(|&e| e == eps[0]));
        }
    }
}

#[test]
fn early_steps_are_supervised_only_with_cross_episode_slicing() {
    let store = store_with_episodes(&[12, 12, 12], 1000);
    let c = 10;
    for (mode, expect) in [(SliceMode::CrossEpisode, true), (SliceMode::WithinEpisode, false)] {
        let s = spec(c, mode, Masking::FirstObs);
        let mut covered = [false; 9];
        for t in store.valid_indices(&s) {
            let w = store.make_window(t, &s).unwrap();
            for p in supervision_positions(&w, &s) {
                let step = store.record(t - (c - 1 - p) as u64).unwrap().step;
                if step < c - 1 {
                    covered[step] = true;
                }
            }
        }
        assert!(covered.iter().all(|&v| v == expect), "{mode:?}: {covered:?}");
    }
}

#[test]
fn masking_is_idempotent() {
    for seed in 0..30 {
        let log = common::random_log(&mut ChaCha8Rng::seed_from_u64(seed), 150);
        let store = common::build_store(&log, 500);
        for masking in [Masking::None, Masking::Zero, Masking::FirstObs] {
            let s = spec(5, SliceMode::CrossEpisode, masking);
            for t in store.valid_indices(&s) {
                let w = store.make_window(t, &s).unwrap();
                let slots: Vec<Option<SlotSource>> = (0..5)
                    .map(|n| {
                        Some(SlotSource {
                            obs: w.obs(n),
                            prev_action: w.prev_action(n),
                            prev_reward: w.rewards[n],
                            episode: u64::from(w.in_episode[n]),
                        })
                    })
                    .collect();
                let again = assemble_window(w.obs_dim, w.act_dim, &slots, masking).unwrap();
                assert_eq!(again.observations, w.observations);
                assert_eq!(again.prev_actions, w.prev_actions);
                assert_eq!(again.rewards, w.rewards);
            }
        }
    }
}

#[test]
fn snapshot_round_trip() {
    let log = common::random_log(&mut ChaCha8Rng::seed_from_u64(5), 150);
    let store = common::build_store(&log, 60);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("buffer.csv");
    write_snapshot(&store, &path).unwrap();
    let back = read_snapshot(&path, log.obs_dim, log.act_dim, 60).unwrap();
    assert_eq!(back.len(), store.len());
    for k in 0..store.len() as u64 {
        assert_eq!(back.record(k).unwrap(), store.record(store.start() + k).unwrap());
    }
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("episode,step,o_0"));
    assert!(read_snapshot(&path, log.obs_dim + 1, log.act_dim, 60).is_err());
}

#[test]
fn rolling_history_matches_store_windows() {
    let log = common::random_log(&mut ChaCha8Rng::seed_from_u64(9), 200);
    for (mode, masking) in common::SLICE_VARIANTS {
        let s = spec(4, mode, masking);
        let mut store = EpisodeStore::new(log.obs_dim, log.act_dim, 1000).unwrap();
        let mut hist = RollingHistory::new(log.obs_dim, log.act_dim, s);
        let mut need_reset = true;
        for t in &log.transitions {
            if need_reset {
                hist.reset(&t.obs);
            }
            let acting = hist.window().unwrap();
            let g = store.append(t).unwrap();
            match mode {
                SliceMode::CrossEpisode => assert_eq!(acting, store.make_window(g, &s).unwrap()),
                SliceMode::WithinEpisode => {
                    if store.is_valid_end(g, &s) {
                        assert_eq!(acting, store.make_window(g, &s).unwrap());
                    } else {
                        let step = store.record(g).unwrap().step;
                        assert_eq!(acting.len(), step + 1);
                        assert!(acting.in_episode.iter().all(|&v| v));
                    }
                }
            }
            need_reset = t.done;
            if !t.done {
                hist.step(&t.action, t.reward, &t.next_obs);
            }
        }
    }
}

#[test]
fn store_matches_brute_force_oracle() {
    for seed in 0..100 {
        common::check_store_against_oracle(seed).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn oracle_equivalence_random_seeds(seed in any::<u64>()) {
        prop_assert!(common::check_store_against_oracle(seed).is_ok());
    }
}
