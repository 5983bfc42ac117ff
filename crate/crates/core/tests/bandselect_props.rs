use std::collections::BTreeMap;

use drowsy_core::bandselect::{
    episode_reward, search_with_scorer, BandAction, BandState, QTable, RewardSpec,
};
use drowsy_core::patterns::PatternTensor;
use drowsy_core::{ClassLabel, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn act(i: usize) -> BandAction {
    BandAction::from_index(i).unwrap()
}

/// Every (state, action) pair reachable from the empty state.
fn reachable(t: &QTable) -> Vec<(BandState, BandAction)> {
    let mut out = Vec::new();
    let mut frontier = vec![BandState::empty()];
    let mut seen = std::collections::BTreeSet::new();
    while let Some(s) = frontier.pop() {
        if !seen.insert(s.selected) {
            continue;
        }
        for a in t.legal_actions(s) {
            out.push((s, a));
            frontier.push(s.with(a).unwrap());
        }
    }
    out
}

/// Subset score: additive band values plus a pairwise interaction term.
fn score(values: &[f64], s: BandState) -> f64 {
    let bands: Vec<usize> = s.bands().iter().map(|b| b.index()).collect();
    let mut v: f64 = bands.iter().map(|&b| values[b]).sum();
    for w in bands.windows(2) {
        v += 0.1 * ((w[0] * 7 + w[1] * 3) % 5) as f64 - 0.2;
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bellman_target_is_a_fixed_point(
        alpha in 0.01f64..1.0,
        gamma in 0.0f64..0.99,
        r in -5.0f64..5.0,
        succ in prop::collection::vec(-5.0f64..5.0, 4),
        a in 0usize..5,
    ) {
        let mut t = QTable::new(alpha, gamma, 0.0, 3, 5).unwrap();
        let s = BandState::empty();
        let next = s.with(act(a)).unwrap();
        let mut k = 0;
        for b in 0..5 {
            if b != a {
                t.set(next, act(b), succ[k]);
                k += 1;
            }
        }
        let target = r + gamma * t.max_q(next);
        t.set(s, act(a), target);
        t.q_update(s, act(a), r, next).unwrap();
        prop_assert!((t.get(s, act(a)) - target).abs() <= 1e-12);
    }

    #[test]
    fn update_shrinks_distance_to_target_by_one_minus_alpha(
        alpha in 0.01f64..1.0,
        gamma in 0.0f64..0.99,
        r in -5.0f64..5.0,
        q0 in -5.0f64..5.0,
        succ in -5.0f64..5.0,
    ) {
        let mut t = QTable::new(alpha, gamma, 0.0, 2, 3).unwrap();
        let s = BandState::empty();
        let next = s.with(act(0)).unwrap();
        t.set(next, act(1), succ);
        t.set(s, act(0), q0);
        let target = r + gamma * t.max_q(next);
        t.q_update(s, act(0), r, next).unwrap();
        let after = (t.get(s, act(0)) - target).abs();
        prop_assert!((after - (1.0 - alpha) * (q0 - target).abs()).abs() <= 1e-12);
    }

    #[test]
    fn sweeps_converge_and_greedy_values_match_rollout_returns(
        values in prop::collection::vec(-1.0f64..1.0, 5),
        alpha in 0.2f64..1.0,
        gamma in 0.1f64..0.95,
        max_bands in 1usize..4,
    ) {
        let mut t = QTable::new(alpha, gamma, 0.0, max_bands, 5).unwrap();
        let pairs = reachable(&t);
        let mut converged = false;
        for _ in 0..5000 {
            let mut delta = 0.0f64;
            for &(s, a) in &pairs {
                let next = s.with(a).unwrap();
                let before = t.get(s, a);
                t.q_update(s, a, score(&values, next) - score(&values, s), next).unwrap();
                delta = delta.max((t.get(s, a) - before).abs());
            }
            if delta < 1e-9 {
                converged = true;
                break;
            }
        }
        prop_assert!(converged);
        // q(s0, pi(s0)) against the discounted return of the greedy rollout
        let mut s = BandState::empty();
        let first = t.greedy_action(s).unwrap();
        let q0 = t.get(s, first);
        let mut ret = 0.0;
        let mut disc = 1.0;
        for a in t.greedy_rollout() {
            let next = s.with(a).unwrap();
            ret += disc * (score(&values, next) - score(&values, s));
            disc *= gamma;
            s = next;
        }
        prop_assert!((q0 - ret).abs() <= 1e-6, "{} vs {}", q0, ret);
    }

    #[test]
    fn search_never_repeats_a_band_and_is_deterministic(
        values in prop::collection::vec(-1.0f64..1.0, 8),
        seed in any::<u64>(),
        max_bands in 1usize..5,
        episodes in 1usize..40,
    ) {
        let run = || {
            let mut scorer = |b: &[BandAction]| -> Result<f64> {
                let mut s = BandState::empty();
                for &a in b {
                    s = s.with(a)?;
                }
                Ok(score(&values, s))
            };
            let table = QTable::new(0.3, 0.9, 1.0, max_bands, 8).unwrap();
            search_with_scorer(&mut scorer, table, episodes, 0.9, 0.05, seed, None).unwrap()
        };
        let a = run();
        for rec in &a.log {
            let mut labels = rec.bands.clone();
            prop_assert_eq!(labels.len(), max_bands);
            labels.sort();
            labels.dedup();
            prop_assert_eq!(labels.len(), max_bands);
            prop_assert!(rec.epsilon >= 0.05);
        }
        prop_assert!(a.table.epsilon >= 0.05);
        let b = run();
        prop_assert_eq!(&a.best_bands, &b.best_bands);
        let ra: Vec<f64> = a.log.iter().map(|r| r.reward).collect();
        let rb: Vec<f64> = b.log.iter().map(|r| r.reward).collect();
        prop_assert_eq!(ra, rb);
    }
}

/// Ten subjects per class, eight windows each, 22 channels of noise except
/// `informative`, which steps to +1 (Drowsy) or -1 (Wakeful) halfway through.
fn rigged(informative: usize, seed: u64) -> PatternTensor {
    let (subjects_per_class, windows, c, l) = (10u32, 8, 22, 64);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut subjects = Vec::new();
    for s in 0..2 * subjects_per_class {
        let label = if s < subjects_per_class { ClassLabel::Drowsy } else { ClassLabel::Wakeful };
        let sign = if label == ClassLabel::Drowsy { 1.0 } else { -1.0 };
        for _ in 0..windows {
            for ch in 0..c {
                for t in 0..l {
                    let noise: f32 = r.gen_range(-1.0..1.0);
                    let v = if ch == informative && t >= l / 2 { sign + 0.3 * noise } else { noise };
                    data.push(v);
                }
            }
            labels.push(label);
            subjects.push(s);
        }
    }
    PatternTensor::new(data, c, l, labels, subjects, 0.64, 100.0).unwrap()
}

#[test]
fn informative_band_outscores_noise_bands() {
    let spec = RewardSpec::default();
    for seed in 0..5u64 {
        let inf = (seed as usize * 5 + 2) % 22;
        let noise = (inf + 9) % 22;
        let data = rigged(inf, 100 + seed);
        let good = episode_reward(&[act(inf)], &data, &spec, seed).unwrap();
        let bad = episode_reward(&[act(noise)], &data, &spec, seed).unwrap();
        assert!(good - bad > 0.2, "seed {seed}: informative {good}, noise {bad}");
    }
}

#[test]
fn memoised_scores_are_requested_once_per_subset() {
    let mut calls: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut scorer = |b: &[BandAction]| -> Result<f64> {
        let mut key: Vec<usize> = b.iter().map(|a| a.index()).collect();
        key.sort();
        *calls.entry(key.clone()).or_default() += 1;
        Ok(key.iter().map(|&i| i as f64 * 0.1).sum())
    };
    let table = QTable::new(0.5, 0.9, 1.0, 2, 4).unwrap();
    search_with_scorer(&mut scorer, table, 50, 0.95, 0.05, 3, None).unwrap();
    assert!(calls.values().all(|&n| n == 1));
}
