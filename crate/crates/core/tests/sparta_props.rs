mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparta_core::autodiff::Tape;
use sparta_core::model::{bind_store, forward, ParamType, ParameterStore, TargetSet};
use sparta_core::sparta::{
    bernoulli_entry, gather_grads, merge, merge_scoped, sample_for_budget, sample_indices,
    unmerge, IndexSet, SparseDelta, SparsityConfig,
};

fn random_delta(index: &IndexSet, rng: &mut ChaCha8Rng) -> SparseDelta {
    SparseDelta {
        values: index
            .entries
            .iter()
            .map(|e| (0..e.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect(),
    }
}

fn targets_from_mask(mask: u8) -> TargetSet {
    let all = [
        ParamType::Wq,
        ParamType::Wk,
        ParamType::Wv,
        ParamType::Wo,
        ParamType::MlpGate,
        ParamType::MlpUp,
        ParamType::MlpDown,
        ParamType::Norm,
    ];
    let picked: Vec<_> = all
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, t)| *t)
        .collect();
    if picked.is_empty() {
        TargetSet::new([ParamType::Wv])
    } else {
        TargetSet::new(picked)
    }
}

fn store() -> ParameterStore {
    tiny_classifier(0, 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn indices_are_sorted_unique_and_in_range(k in 0.001f64..=1.0, seed: u64, mask: u8) {
        let s = store();
        let targets = targets_from_mask(mask);
        let index = sample_indices(&s, &SparsityConfig::new(k, targets.clone(), seed)).unwrap();
        index.validate(&s).unwrap();
        prop_assert_eq!(
            index.entries.iter().map(|e| e.name.clone()).collect::<Vec<_>>(),
            s.names_of(&targets)
        );
        for e in &index.entries {
            let numel: usize = e.shape.iter().product();
            let flat: Vec<usize> = e.flat_indices().collect();
            prop_assert!(flat.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(flat.iter().all(|&f| f < numel));
            if e.is_matrix() {
                prop_assert!(e.cols.iter().all(|&c| (c as usize) < e.shape[1]));
            } else {
                prop_assert!(e.cols.is_empty());
            }
        }
    }

    #[test]
    fn merge_equals_dense_scatter(k in 0.01f64..=1.0, seed: u64) {
        let s = store();
        let index = sample_indices(&s, &SparsityConfig::new(k, TargetSet::all_sparsifiable(), seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta = random_delta(&index, &mut rng);
        let mut merged = s.clone();
        merge(&mut merged, &index, &delta).unwrap();
        for (name, p) in s.iter() {
            // Dense oracle: a full zero tensor with the delta scattered in.
            let mut dense = vec![0.0f32; p.tensor.numel()];
            if let Some(pos) = index.entries.iter().position(|e| e.name == name) {
                let e = &index.entries[pos];
                for (i, &v) in delta.values[pos].iter().enumerate() {
                    let (r, c) = (e.rows[i] as usize, e.cols.get(i).map_or(0, |&c| c as usize));
                    let stride = if e.is_matrix() { e.shape[1] } else { 1 };
                    dense[r * stride + c] = v;
                }
            }
            let want: Vec<f32> = p.tensor.data().iter().zip(&dense).map(|(a, b)| a + b).collect();
            prop_assert_eq!(merged.tensor(name).unwrap().data(), want.as_slice());
        }
    }

    #[test]
    fn scoped_merge_restores_bitwise(k in 0.01f64..=1.0, seed: u64, rounds in 1usize..20) {
        let mut s = store();
        let before = bits(&s);
        let index = sample_indices(&s, &SparsityConfig::new(k, TargetSet::all_sparsifiable(), seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..rounds {
            let delta = random_delta(&index, &mut rng);
            let scope = merge_scoped(&mut s, &index, &delta).unwrap();
            scope.restore(&mut s, &index).unwrap();
        }
        prop_assert_eq!(bits(&s), before);
    }

    #[test]
    fn unmerge_twice_applies_negative_delta(k in 0.01f64..=1.0, seed: u64) {
        let s = store();
        let index = sample_indices(&s, &SparsityConfig::new(k, TargetSet::all_sparsifiable(), seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta = random_delta(&index, &mut rng);
        let mut twice = s.clone();
        unmerge(&mut twice, &index, &delta).unwrap();
        unmerge(&mut twice, &index, &delta).unwrap();
        let neg = SparseDelta {
            values: delta.values.iter().map(|v| v.iter().map(|x| -2.0 * x).collect()).collect(),
        };
        let mut want = s.clone();
        merge(&mut want, &index, &neg).unwrap();
        for (name, p) in want.iter() {
            let got = twice.tensor(name).unwrap().data();
            for (a, b) in got.iter().zip(p.tensor.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn same_seed_same_indices(k in 0.01f64..=1.0, seed: u64) {
        let s = store();
        let cfg = SparsityConfig::new(k, TargetSet::all_sparsifiable(), seed);
        prop_assert_eq!(sample_indices(&s, &cfg).unwrap(), sample_indices(&s, &cfg).unwrap());
    }

    #[test]
    fn gathered_gradient_order_follows_index(seed: u64) {
        let s = store();
        let index = sample_indices(&s, &SparsityConfig::new(0.2, TargetSet::all_sparsifiable(), seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (batch, labels, _) = random_batch(s.config(), &mut rng, 3, 8);
        let mut tape = Tape::<f32>::new();
        let w = bind_store(&mut tape, &s, |_, _| true);
        let logits = forward(&mut tape, s.config(), &w, &batch, None).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        let grads = gather_grads(&tape, &w, &index).unwrap();
        for (e, g) in index.entries.iter().zip(&grads) {
            let dense = tape.grad(w.get(&e.name).unwrap()).unwrap();
            prop_assert_eq!(g.len(), e.len());
            for (i, v) in g.iter().enumerate() {
                let stride = if e.is_matrix() { e.shape[1] } else { 1 };
                let c = e.cols.get(i).map_or(0, |&c| c as usize);
                prop_assert_eq!(v.to_bits(), dense[e.rows[i] as usize * stride + c].to_bits());
            }
        }
    }
}

#[test]
fn count_is_binomial() {
    let s = store();
    let cap = s.count_params(&TargetSet::all_sparsifiable()) as f64;
    for &k in &[0.01, 0.1, 0.5] {
        let sd = (cap * k * (1.0 - k)).sqrt();
        for seed in 0..50 {
            let m = sample_indices(&s, &SparsityConfig::new(k, TargetSet::all_sparsifiable(), seed))
                .unwrap()
                .count() as f64;
            assert!((m - k * cap).abs() < 5.0 * sd, "k={k} seed={seed} m={m}");
        }
    }
}

#[test]
fn realized_density_is_unbiased() {
    let s = store();
    let cap = s.count_params(&TargetSet::all_sparsifiable()) as f64;
    for &k in &[0.02, 0.2, 0.7] {
        let mean = (0..50)
            .map(|seed| {
                sample_indices(&s, &SparsityConfig::new(k, TargetSet::all_sparsifiable(), seed))
                    .unwrap()
                    .count() as f64
                    / cap
            })
            .sum::<f64>()
            / 50.0;
        let se = (k * (1.0 - k) / (cap * 50.0)).sqrt();
        assert!((mean - k).abs() < 4.0 * se, "k={k} mean={mean}");
    }
}

#[test]
fn per_coordinate_inclusion_is_uniform() {
    // Every coordinate of a 16×16 tensor should be picked about k of the time.
    let k = 0.25;
    let mut hits = vec![0u32; 256];
    let trials = 2000;
    for seed in 0..trials {
        let e = bernoulli_entry("w", &[16, 16], k, seed).unwrap();
        for f in e.flat_indices() {
            hits[f] += 1;
        }
    }
    let sd = (trials as f64 * k * (1.0 - k)).sqrt();
    for h in hits {
        assert!((h as f64 - trials as f64 * k).abs() < 5.0 * sd);
    }
}

#[test]
fn full_density_selects_everything() {
    let s = store();
    let index =
        sample_indices(&s, &SparsityConfig::new(1.0, TargetSet::all_sparsifiable(), 3)).unwrap();
    assert_eq!(index.count(), s.count_params(&TargetSet::all_sparsifiable()));
}

#[test]
fn budget_redraws_land_within_tolerance() {
    let s = store();
    let targets = TargetSet::new([ParamType::Wq, ParamType::Wv]);
    for seed in 0..20 {
        let b = sample_for_budget(&s, &targets, 300, seed, 0.02).unwrap();
        let m = b.index.count() as f64;
        assert!((m - 300.0).abs() <= 6.0, "seed {seed}: {m}");
        assert_eq!(sample_indices(&s, &b.config).unwrap(), b.index);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let s = store();
    for k in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(sample_indices(&s, &SparsityConfig::new(k, TargetSet::all_sparsifiable(), 0)).is_err());
    }
    for t in [ParamType::Embedding, ParamType::Head] {
        assert!(sample_indices(&s, &SparsityConfig::new(0.1, TargetSet::new([t]), 0)).is_err());
    }
    assert!(bernoulli_entry("big", &[70_000, 2], 0.1, 0).is_err());
    assert!(bernoulli_entry("cube", &[2, 2, 2], 0.1, 0).is_err());
}

#[test]
fn misaligned_delta_is_rejected() {
    let mut s = store();
    let index =
        sample_indices(&s, &SparsityConfig::new(0.3, TargetSet::all_sparsifiable(), 1)).unwrap();
    let mut delta = SparseDelta::zeros(&index);
    delta.values[0].push(0.0);
    assert!(merge(&mut s, &index, &delta).is_err());
    let mut delta = SparseDelta::zeros(&index);
    delta.values[0][0] = f32::NAN;
    assert!(merge(&mut s, &index, &delta).is_err());
}
