use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparta_core::optim::{clip_global_norm, global_norm, AdamConfig, AdamState};

/// Dense Adam in f64 over the whole vector, with gradients zeroed outside
/// `mask`.
struct DenseAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl DenseAdam {
    fn step(&mut self, c: &AdamConfig, p: &mut [f64], g: &[f64], mask: &[bool]) {
        self.t += 1;
        for j in 0..p.len() {
            let gj = if mask[j] { g[j] } else { 0.0 };
            self.m[j] = c.beta1 * self.m[j] + (1.0 - c.beta1) * gj;
            self.v[j] = c.beta2 * self.v[j] + (1.0 - c.beta2) * gj * gj;
            if !mask[j] {
                continue;
            }
            let mh = self.m[j] / (1.0 - c.beta1.powi(self.t));
            let vh = self.v[j] / (1.0 - c.beta2.powi(self.t));
            p[j] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p[j]);
        }
    }
}

#[test]
fn sparse_adam_follows_masked_dense_trajectory() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 400;
    let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.1)).collect();
    let phi: Vec<usize> = (0..n).filter(|&j| mask[j]).collect();
    let cfg = AdamConfig::new(1e-2);

    let mut dense = theta.clone();
    let mut oracle = DenseAdam { m: vec![0.0; n], v: vec![0.0; n], t: 0 };
    let mut delta = vec![0.0f32; phi.len()];
    let mut adam = AdamState::new(cfg, &[phi.len()]);
    for step in 0..200 {
        let g: Vec<f64> = (0..n).map(|j| dense[j] - target[j]).collect();
        oracle.step(&cfg, &mut dense, &g, &mask);

        let sg: Vec<f32> = phi
            .iter()
            .zip(&delta)
            .map(|(&j, &d)| (theta[j] as f32 + d) - target[j] as f32)
            .collect();
        adam.step(&mut [&mut delta[..]], &[sg]).unwrap();

        for (i, &j) in phi.iter().enumerate() {
            let sparse = theta[j] + delta[i] as f64;
            assert!((sparse - dense[j]).abs() < 1e-6, "step {step} coord {j}");
        }
    }
    for j in 0..n {
        if !mask[j] {
            assert_eq!(dense[j], theta[j]);
        }
    }
    assert_eq!(adam.steps(), 200);
}

#[test]
fn two_hand_computed_steps() {
    let cfg = AdamConfig::new(0.1);
    let mut st = AdamState::new(cfg, &[1]);
    let mut p = [1.0f32];
    st.step(&mut [&mut p[..]], &[vec![2.0]]).unwrap();
    // m̂ = 2, v̂ = 4, update = 2 / (2 + 1e-8).
    let p1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
    assert!((p[0] as f64 - p1).abs() < 1e-7);
    st.step(&mut [&mut p[..]], &[vec![-1.0]]).unwrap();
    let m = 0.9 * 0.2 + 0.1 * -1.0;
    let v = 0.999 * 0.004 + 0.001 * 1.0;
    let mh = m / (1.0 - 0.81);
    let vh = v / (1.0 - 0.999f64.powi(2));
    let p2 = p1 - 0.1 * mh / (vh.sqrt() + 1e-8);
    assert!((p[0] as f64 - p2).abs() < 1e-6);
}

#[test]
fn weight_decay_is_decoupled() {
    let mut cfg = AdamConfig::new(0.1);
    cfg.weight_decay = 0.5;
    let mut st = AdamState::new(cfg, &[1]);
    let mut p = [2.0f32];
    st.step(&mut [&mut p[..]], &[vec![0.0]]).unwrap();
    assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-6);
}

#[test]
fn identical_inputs_give_identical_bits() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut st = AdamState::new(AdamConfig::new(1e-3), &[5, 3]);
        let mut a = vec![0.0f32; 5];
        let mut b = vec![0.0f32; 3];
        for _ in 0..50 {
            let g1: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g2: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            st.step(&mut [&mut a[..], &mut b[..]], &[g1, g2]).unwrap();
        }
        a.iter().chain(&b).map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn bad_gradients_leave_state_untouched() {
    let mut st = AdamState::new(AdamConfig::new(0.1), &[2]);
    let mut p = [1.0f32, 2.0];
    assert!(st.step(&mut [&mut p[..]], &[vec![0.5, f32::NAN]]).is_err());
    assert_eq!(p, [1.0, 2.0]);
    assert_eq!(st.steps(), 0);
    assert!(st.step(&mut [&mut p[..]], &[vec![0.5]]).is_err());
    assert_eq!(st.len(), 2);
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut g = vec![vec![3.0f32], vec![4.0]];
    let before = clip_global_norm(&mut g, 1.0);
    assert!((before - 5.0).abs() < 1e-12);
    assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    let mut small = vec![vec![0.1f32]];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0][0], 0.1);
}
