#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sparta_core::autodiff::{Tape, Var};
use sparta_core::data::{make_synthetic_task, DatasetSplits, SyntheticKind, SyntheticSpec};
use sparta_core::model::{
    forward, Bindings, HeadInit, ModelConfig, ParameterStore, TokenBatch,
};
use sparta_core::tensor::Tensor;
use sparta_core::Result;

/// Central-difference step used by every gradient check.
pub const FD_EPS: f64 = 1e-3;
/// Pass threshold on the relative error of a gradient check.
pub const FD_REL_TOL: f64 = 1e-3;
/// Denominator floor: gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn randn64(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller keeps this helper free of distribution crates.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Checks `∂(Σ w ⊙ f(inputs))/∂inputs` against central differences, with
/// random fixed weights `w`, and returns the largest relative error.
pub fn grad_check<F>(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |xs: &[Tensor<f64>], weights: &[f64], grads: bool| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = f(&mut tape, &vars).expect("op");
        if weights.is_empty() {
            return (tape.value(out).numel() as f64, Vec::new());
        }
        let loss = tape.weighted_sum(out, weights).expect("weighted sum");
        let value = tape.value(loss).data()[0];
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(loss).expect("backward");
        let g = vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect::<Vec<_>>();
        (value, g)
    };
    let out_len = run(inputs, &[], false).0 as usize;
    let weights: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, grads) = run(inputs, &weights, true);
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            let numeric =
                (run(&plus, &weights, false).0 - run(&minus, &weights, false).0) / (2.0 * FD_EPS);
            let analytic = grads[k].get(i).copied().unwrap_or(0.0);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

/// Binds `store` on an f64 tape, substituting `overrides` by name.
pub fn bind_f64(
    tape: &mut Tape<f64>,
    store: &ParameterStore,
    overrides: &[(String, Tensor<f64>)],
    requires_grad: bool,
) -> Bindings {
    let mut w = Bindings::default();
    for (name, p) in store.iter() {
        let t = overrides
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| p.tensor.cast::<f64>());
        let v = tape.leaf(t, requires_grad);
        w.insert(name, v);
    }
    w
}

/// Cross-entropy of the model in f64 with some tensors replaced.
pub fn model_loss_f64(
    store: &ParameterStore,
    overrides: &[(String, Tensor<f64>)],
    batch: &TokenBatch,
    labels: &[usize],
) -> f64 {
    let mut tape = Tape::<f64>::new();
    let w = bind_f64(&mut tape, store, overrides, false);
    let logits = forward(&mut tape, store.config(), &w, batch, None).unwrap();
    let loss = tape.softmax_cross_entropy(logits, labels).unwrap();
    tape.value(loss).data()[0]
}

pub fn tiny_classifier(seed: u64, classes: usize) -> ParameterStore {
    ParameterStore::init_pretrained(&ModelConfig::tiny(), seed)
        .unwrap()
        .swap_head(classes, &HeadInit::Random { seed: seed ^ 0xAB })
        .unwrap()
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        num_kv_heads: 1,
        head_dim: 4,
        mlp_dim: 12,
        max_seq_len: 12,
        num_classes: 24,
    }
}

pub fn small_classifier(seed: u64, classes: usize) -> ParameterStore {
    ParameterStore::init_pretrained(&small_config(), seed)
        .unwrap()
        .swap_head(classes, &HeadInit::Random { seed: seed ^ 0xAB })
        .unwrap()
}

pub fn random_batch(
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
    batch: usize,
    max_len: usize,
) -> (TokenBatch, Vec<usize>, Vec<Vec<usize>>) {
    let seqs: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            (0..len).map(|_| rng.gen_range(1..config.vocab_size)).collect()
        })
        .collect();
    let labels = (0..batch).map(|_| rng.gen_range(0..config.num_classes)).collect();
    (TokenBatch::new(&seqs, config).unwrap(), labels, seqs)
}

pub fn keyword_task(seed: u64, train: usize) -> DatasetSplits {
    make_synthetic_task(&SyntheticSpec::new(
        SyntheticKind::KeywordSentiment,
        train,
        200,
        200,
        seed,
    ))
    .unwrap()
}

pub fn bits(store: &ParameterStore) -> Vec<(String, Vec<u32>)> {
    store
        .iter()
        .map(|(n, p)| (n.to_string(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}
