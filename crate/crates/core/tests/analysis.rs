mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparta_core::analysis::{
    delta_rank, densify, rank_of, rank_report, random_drop, singular_values, CheckpointPair,
    DEFAULT_RANK_TOL,
};
use sparta_core::model::{ParamType, ParameterStore};
use sparta_core::tensor::Tensor;

fn nalgebra_sv(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

fn low_rank(rows: usize, cols: usize, r: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let b = randn64(&[rows, r], rng);
    let a = randn64(&[r, cols], rng);
    b.matmul(&a).unwrap().cast()
}

#[test]
fn singular_values_match_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..40 {
        let (r, c) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let m = randn64(&[r, c], &mut rng);
        let ours = singular_values(m.data(), r, c);
        let theirs = nalgebra_sv(m.data(), r, c);
        assert_eq!(ours.len(), r.min(c));
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() <= 1e-6 * b.max(1e-300), "{a} vs {b}");
        }
    }
}

#[test]
fn constructed_low_rank_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let zero = Tensor::zeros(&[64, 64]);
    for r in [1, 4, 8] {
        for _ in 0..5 {
            let d = low_rank(64, 64, r, &mut rng);
            assert_eq!(delta_rank(&zero, &d, DEFAULT_RANK_TOL).unwrap(), r);
            let sv = nalgebra_sv(&d.cast::<f64>().data().to_vec(), 64, 64);
            assert_eq!(rank_of(&sv, DEFAULT_RANK_TOL), r);
        }
    }
    let dense = randn64(&[64, 64], &mut rng).cast::<f32>();
    assert_eq!(delta_rank(&zero, &dense, DEFAULT_RANK_TOL).unwrap(), 64);
    let rect = randn64(&[20, 48], &mut rng).cast::<f32>();
    assert_eq!(delta_rank(&Tensor::zeros(&[20, 48]), &rect, DEFAULT_RANK_TOL).unwrap(), 20);
    assert!(delta_rank(&zero, &Tensor::zeros(&[64, 63]), DEFAULT_RANK_TOL).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adding_a_rank_one_term_raises_rank_by_at_most_one(seed: u64, r in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zero = Tensor::zeros(&[16, 12]);
        let d = if r == 0 { zero.clone() } else { low_rank(16, 12, r, &mut rng) };
        let before = delta_rank(&zero, &d, DEFAULT_RANK_TOL).unwrap();
        let bumped = d.add(&low_rank(16, 12, 1, &mut rng)).unwrap();
        let after = delta_rank(&zero, &bumped, DEFAULT_RANK_TOL).unwrap();
        prop_assert_eq!(before, r);
        prop_assert!(after <= before + 1 && after + 1 >= before);
    }

    #[test]
    fn singular_values_are_sorted_and_scale(seed: u64, s in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = randn64(&[7, 5], &mut rng);
        let sv = singular_values(m.data(), 7, 5);
        prop_assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        let scaled = singular_values(m.scale(s).data(), 7, 5);
        for (a, b) in sv.iter().zip(&scaled) {
            prop_assert!((a * s - b).abs() < 1e-9 * b.max(1.0));
        }
        let t = singular_values(m.transpose().unwrap().data(), 5, 7);
        for (a, b) in sv.iter().zip(&t) {
            prop_assert!((a - b).abs() < 1e-9 * b.max(1.0));
        }
    }
}

#[test]
fn rank_report_sees_planted_updates() {
    let pt = ParameterStore::init_pretrained(&small_config(), 0).unwrap();
    let mut ft = pt.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let wq = ft.tensor_mut("layers.0.wq").unwrap();
    let (r, c) = (wq.rows(), wq.cols());
    *wq = wq.add(&low_rank(r, c, 2, &mut rng)).unwrap();
    let wo = ft.tensor_mut("layers.1.wo").unwrap();
    let (r, c) = (wo.rows(), wo.cols());
    *wo = wo.add(&randn64(&[r, c], &mut rng).cast()).unwrap();
    let report = rank_report(&CheckpointPair::new(pt.clone(), ft).unwrap(), DEFAULT_RANK_TOL).unwrap();
    let rank = |n: &str| report.entries.iter().find(|e| e.name == n).unwrap().rank;
    assert_eq!(rank("layers.0.wq"), 2);
    assert_eq!(rank("layers.1.wo"), 8);
    assert_eq!(rank("layers.0.wk"), 0);
    let wq = report.entries.iter().find(|e| e.name == "layers.0.wq").unwrap();
    assert_eq!(wq.deficiency, wq.dims[0].min(wq.dims[1]) - 2);
    assert!(report.skipped.iter().any(|s| s == "final_norm"));
    assert!(report.render().contains("layers.0.wq"));

    let other = ParameterStore::init_pretrained(&small_config(), 1)
        .unwrap()
        .swap_head(2, &sparta_core::model::HeadInit::Random { seed: 0 })
        .unwrap();
    assert!(CheckpointPair::new(pt, other).is_err());
}

fn synthetic_delta(rows: usize, cols: usize, seed: u64) -> Vec<(String, ParamType, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(0.5f32..1.5)).collect();
    vec![("d".into(), ParamType::Wv, Tensor::new(vec![rows, cols], data).unwrap())]
}

#[test]
fn kept_count_is_binomial() {
    let dense = synthetic_delta(1000, 1000, 0);
    let n = 1e6f64;
    for p in [0.5, 0.9, 0.99] {
        let sd = (n * p * (1.0 - p)).sqrt();
        for seed in 0..5 {
            let kept = random_drop(&dense, p, true, seed).unwrap().index.count() as f64;
            assert!((kept - n * (1.0 - p)).abs() < 3.5 * sd, "p={p} kept={kept}");
        }
    }
}

#[test]
fn rescaled_drop_is_unbiased_per_entry() {
    let dense = synthetic_delta(8, 8, 1);
    let p = 0.5;
    let seeds = 4000;
    let mut sum = vec![0.0f64; 64];
    for seed in 0..seeds {
        let d = random_drop(&dense, p, true, seed).unwrap();
        for (s, v) in sum.iter_mut().zip(densify(&d.index, &d.delta).unwrap()[0].data()) {
            *s += *v as f64;
        }
    }
    for (s, x) in sum.iter().zip(dense[0].2.data()) {
        let mean = s / seeds as f64;
        let se = *x as f64 * (p / (1.0 - p) / seeds as f64).sqrt();
        assert!((mean - *x as f64).abs() < 5.0 * se);
    }
}

#[test]
fn unscaled_drop_shrinks_mass_by_keep_rate() {
    let dense = synthetic_delta(100, 100, 2);
    let total: f64 = dense[0].2.data().iter().map(|&v| v as f64).sum();
    let d = random_drop(&dense, 0.8, false, 3).unwrap();
    let kept: f64 = d.delta.values.iter().flatten().map(|&v| v as f64).sum();
    assert!((kept / total - 0.2).abs() < 0.02);
}

#[test]
fn drop_is_deterministic_and_idempotent() {
    let dense = synthetic_delta(30, 20, 4);
    let a = random_drop(&dense, 0.7, false, 9).unwrap();
    assert_eq!(a, random_drop(&dense, 0.7, false, 9).unwrap());
    let again = vec![("d".to_string(), ParamType::Wv, densify(&a.index, &a.delta).unwrap().remove(0))];
    assert_eq!(random_drop(&again, 0.7, false, 9).unwrap(), a);
}

#[test]
fn zero_drop_keeps_every_nonzero_exactly() {
    let mut dense = synthetic_delta(10, 10, 5);
    dense[0].2.data_mut()[7] = 0.0;
    let d = random_drop(&dense, 0.0, true, 0).unwrap();
    assert_eq!(d.index.count(), 99);
    let back = densify(&d.index, &d.delta).unwrap();
    assert_eq!(back[0].data(), dense[0].2.data());
    assert!(random_drop(&dense, 1.0, true, 0).is_err());
    assert!(random_drop(&dense, -0.1, true, 0).is_err());
}

#[test]
fn drop_mask_is_independent_of_sampler_mask_with_same_seed() {
    use sparta_core::model::TargetSet;
    use sparta_core::sparta::{sample_indices, SparseDelta, SparsityConfig};
    let store = small_classifier(0, 2);
    let cfg = SparsityConfig::new(0.05, TargetSet::all_sparsifiable(), 0);
    let index = sample_indices(&store, &cfg).unwrap();
    let delta = SparseDelta {
        values: index.entries.iter().map(|e| vec![1.0; e.len()]).collect(),
    };
    let dense: Vec<_> = index
        .entries
        .iter()
        .zip(densify(&index, &delta).unwrap())
        .map(|(e, t)| (e.name.clone(), store.get(&e.name).unwrap().param_type, t))
        .collect();
    let m = index.count() as f64;
    let kept = random_drop(&dense, 0.9, false, 0).unwrap().index.count() as f64;
    let sd = (m * 0.9 * 0.1).sqrt();
    assert!((kept - 0.1 * m).abs() < 5.0 * sd, "kept {kept} of {m}");
}
