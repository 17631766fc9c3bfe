//! Training loop, evaluation metrics, target ablation and the sweep driver.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedModel, AdapterSpec};
use crate::data::{DatasetSplits, LabeledExample};
use crate::error::{Error, Result};
use crate::model::{predict_logits, DropoutCtx, ParamType, ParameterStore, TargetSet, TokenBatch};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::tensor::Tensor;

/// Batch size used for evaluation passes.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub adapter: AdapterSpec,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(adapter: AdapterSpec, lr: f64, seed: u64) -> Self {
        Self {
            adapter,
            batch_size: 16,
            max_epochs: 10,
            max_steps: None,
            lr,
            weight_decay: 0.0,
            dropout: 0.0,
            max_grad_norm: None,
            patience: 5,
            eval_every: 25,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 {
            return Err(Error::config(
                "batch_size, max_epochs and eval_every must be positive",
            ));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} is not in [0, 1)", self.dropout)));
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0) {
                return Err(Error::config("max_grad_norm must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub mcc: f64,
    /// False when the confusion matrix is degenerate and `mcc` was set to 0.
    pub mcc_defined: bool,
    pub count: usize,
}

/// Matthews correlation over a `c × c` confusion matrix
/// (`confusion[true][pred]`). Returns `None` when undefined.
pub fn matthews(confusion: &[Vec<u64>]) -> Option<f64> {
    let c = confusion.len();
    let s: f64 = confusion.iter().flatten().sum::<u64>() as f64;
    let correct: f64 = (0..c).map(|k| confusion[k][k]).sum::<u64>() as f64;
    let t: Vec<f64> = (0..c).map(|k| confusion[k].iter().sum::<u64>() as f64).collect();
    let p: Vec<f64> = (0..c)
        .map(|k| confusion.iter().map(|row| row[k]).sum::<u64>() as f64)
        .collect();
    let cov = correct * s - t.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    let dp = s * s - p.iter().map(|x| x * x).sum::<f64>();
    let dt = s * s - t.iter().map(|x| x * x).sum::<f64>();
    if dp <= 0.0 || dt <= 0.0 {
        return None;
    }
    Some((cov / (dp * dt).sqrt()).clamp(-1.0, 1.0))
}

/// Loss, accuracy and mcc from `[n × c]` logits.
pub fn metrics_from_logits(logits: &Tensor, labels: &[usize]) -> Result<EvalMetrics> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n || n == 0 {
        return Err(Error::Input(format!("{} labels for {n} rows", labels.len())));
    }
    let mut confusion = vec![vec![0u64; c]; c];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Index(format!("label {y} outside {c} classes")));
        }
        let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
        let pred = argmax(&row);
        confusion[y][pred] += 1;
    }
    let correct: u64 = (0..c).map(|k| confusion[k][k]).sum();
    let mcc = matthews(&confusion);
    Ok(EvalMetrics {
        loss: total / n as f64,
        accuracy: correct as f64 / n as f64,
        mcc: mcc.unwrap_or(0.0),
        mcc_defined: mcc.is_some(),
        count: n,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batch_of(examples: &[&LabeledExample], store: &ParameterStore) -> Result<(TokenBatch, Vec<usize>)> {
    let seqs: Vec<Vec<usize>> = examples.iter().map(|x| x.tokens.clone()).collect();
    let labels = examples.iter().map(|x| x.label).collect();
    Ok((TokenBatch::new(&seqs, store.config())?, labels))
}

fn eval_with(
    split: &[LabeledExample],
    store: &ParameterStore,
    mut logits_of: impl FnMut(&TokenBatch) -> Result<Tensor>,
) -> Result<EvalMetrics> {
    if split.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let mut rows = Vec::with_capacity(split.len());
    let mut labels = Vec::with_capacity(split.len());
    for chunk in split.chunks(EVAL_BATCH) {
        let refs: Vec<&LabeledExample> = chunk.iter().collect();
        let (batch, y) = batch_of(&refs, store)?;
        let l = logits_of(&batch)?;
        for i in 0..l.rows() {
            rows.push(l.row(i).to_vec());
        }
        labels.extend(y);
    }
    metrics_from_logits(&Tensor::from_rows(&rows)?, &labels)
}

/// Evaluates through the adapter path.
pub fn evaluate(model: &mut AdaptedModel, split: &[LabeledExample]) -> Result<EvalMetrics> {
    let store = model.store().clone();
    eval_with(split, &store, |b| model.logits(b))
}

/// Evaluates a standalone (e.g. merged) checkpoint.
pub fn evaluate_store(store: &ParameterStore, split: &[LabeledExample]) -> Result<EvalMetrics> {
    eval_with(split, store, |b| predict_logits(store, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss over the steps since the previous evaluation.
    pub train_loss: f64,
    pub dev: EvalMetrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    MaxSteps,
    EarlyStopping,
    /// Training loss or gradients went non-finite; the last good snapshot
    /// was kept.
    NonFinite,
}

/// Everything a run reports. Wall-clock time is kept out so that metrics
/// files are reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub trainable: usize,
    pub adapter_params: usize,
    /// Realized `m` for sparse adapters.
    pub realized_m: Option<usize>,
    pub evals: Vec<EvalRecord>,
    pub steps: usize,
    pub best_step: usize,
    pub best_dev: EvalMetrics,
    pub stop_reason: StopReason,
    pub test: Option<EvalMetrics>,
}

pub struct TrainOutcome {
    /// Restored to the best dev-loss snapshot.
    pub model: AdaptedModel,
    pub metrics: RunMetrics,
    pub wall_clock_secs: f64,
}

const DROPOUT_STREAM: u64 = 0xD0_0D;

/// Trains `cfg.adapter` on top of `base`.
///
/// Each step: merge the adapter, forward, backward, restore the frozen
/// weights, then one Adam update on the trainable segments. Dev loss is
/// checked every `eval_every` steps (and after the last step); training
/// stops after `patience` evaluations without improvement and the best
/// snapshot is returned.
pub fn train(base: &ParameterStore, data: &DatasetSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(base, data, cfg, |_| {})
}

/// [`train`] with a callback after every evaluation.
pub fn train_with_hook(
    base: &ParameterStore,
    data: &DatasetSplits,
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(&EvalRecord),
) -> Result<TrainOutcome> {
    let started = std::time::Instant::now();
    cfg.validate()?;
    if data.dev.is_empty() {
        return Err(Error::config("dev split is empty; early stopping needs it"));
    }
    if data.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let head_rows = base.tensor(crate::model::HEAD)?.rows();
    if head_rows != data.num_classes {
        return Err(Error::config(format!(
            "model head has {head_rows} classes, dataset has {}",
            data.num_classes
        )));
    }
    let mut model = AdaptedModel::new(base, &cfg.adapter)?;
    let mut adam_cfg = AdamConfig::new(cfg.lr);
    adam_cfg.weight_decay = cfg.weight_decay;
    let mut adam = AdamState::new(adam_cfg, &model.segment_sizes());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout = DropoutCtx {
        rate: cfg.dropout,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM),
    };

    let initial = evaluate(&mut model, &data.dev)?;
    let mut best = (0usize, initial, model.snapshot());
    let mut evals = Vec::new();
    let mut bad_evals = 0usize;
    let mut step = 0usize;
    let mut window = (0.0f64, 0usize);
    let mut reason = StopReason::MaxEpochs;

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut last_epoch = 0;
    'epochs: for epoch in 0..cfg.max_epochs {
        last_epoch = epoch;
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                reason = StopReason::MaxSteps;
                break 'epochs;
            }
            let refs: Vec<&LabeledExample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (batch, labels) = batch_of(&refs, model.store())?;
            let drop = (cfg.dropout > 0.0).then_some(&mut dropout);
            let (loss, mut grads) = model.loss_and_grads(&batch, &labels, drop)?;
            let finite = loss.is_finite() && grads.iter().flatten().all(|g| g.is_finite());
            if !finite {
                reason = StopReason::NonFinite;
                break 'epochs;
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_global_norm(&mut grads, max);
            }
            adam.step(&mut model.params_mut(), &grads)?;
            step += 1;
            window.0 += loss;
            window.1 += 1;

            if step % cfg.eval_every == 0 {
                let rec = eval_record(&mut model, data, step, epoch, &mut window)?;
                on_eval(&rec);
                let stop = track_best(&rec, &mut model, &mut best, &mut bad_evals, cfg.patience);
                evals.push(rec);
                if stop {
                    reason = StopReason::EarlyStopping;
                    break 'epochs;
                }
            }
        }
    }
    if reason != StopReason::EarlyStopping
        && reason != StopReason::NonFinite
        && window.1 > 0
    {
        let rec = eval_record(&mut model, data, step, last_epoch, &mut window)?;
        on_eval(&rec);
        track_best(&rec, &mut model, &mut best, &mut bad_evals, usize::MAX);
        evals.push(rec);
    }

    let (best_step, best_dev, snap) = best;
    model.restore_snapshot(&snap)?;
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&mut model, &data.test)?)
    };
    let metrics = RunMetrics {
        method: cfg.adapter.method_name().to_string(),
        trainable: model.trainable_count(),
        adapter_params: model.adapter_count(),
        realized_m: model.index().map(|i| i.count()),
        evals,
        steps: step,
        best_step,
        best_dev,
        stop_reason: reason,
        test,
    };
    Ok(TrainOutcome {
        model,
        metrics,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn eval_record(
    model: &mut AdaptedModel,
    data: &DatasetSplits,
    step: usize,
    epoch: usize,
    window: &mut (f64, usize),
) -> Result<EvalRecord> {
    let dev = evaluate(model, &data.dev)?;
    let rec = EvalRecord {
        step,
        epoch,
        train_loss: window.0 / window.1.max(1) as f64,
        dev,
    };
    *window = (0.0, 0);
    Ok(rec)
}

/// Updates the best snapshot; returns true when patience is exhausted.
fn track_best(
    rec: &EvalRecord,
    model: &mut AdaptedModel,
    best: &mut (usize, EvalMetrics, Vec<Vec<f32>>),
    bad: &mut usize,
    patience: usize,
) -> bool {
    if rec.dev.loss < best.1.loss {
        *best = (rec.step, rec.dev, model.snapshot());
        *bad = 0;
        false
    } else {
        *bad += 1;
        *bad >= patience
    }
}

/// The target sets compared in the targeting ablation, labelled as in the
/// published table.
pub fn ablation_target_sets() -> Vec<(String, TargetSet)> {
    use ParamType::*;
    let mlp = [MlpGate, MlpUp, MlpDown];
    let with_mlp = |extra: &[ParamType]| TargetSet::new(extra.iter().copied().chain(mlp));
    vec![
        ("Wq,Wv".into(), TargetSet::new([Wq, Wv])),
        ("Wv,Wo".into(), TargetSet::new([Wv, Wo])),
        ("Wq,Wk,Wv".into(), TargetSet::new([Wq, Wk, Wv])),
        ("Wq,Wk,Wo".into(), TargetSet::new([Wq, Wk, Wo])),
        ("Wq,Wk,Wv,Wo".into(), TargetSet::new([Wq, Wk, Wv, Wo])),
        ("MLP".into(), TargetSet::new(mlp)),
        ("Wq,MLP".into(), with_mlp(&[Wq])),
        ("Wk,MLP".into(), with_mlp(&[Wk])),
        ("Wv,MLP".into(), with_mlp(&[Wv])),
        ("Wo,MLP".into(), with_mlp(&[Wo])),
        ("Wq,Wk,MLP".into(), with_mlp(&[Wq, Wk])),
        ("Wv,Wo,MLP".into(), with_mlp(&[Wv, Wo])),
        ("W,MLP,norm".into(), TargetSet::all_sparsifiable()),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub targets: TargetSet,
    pub capacity: usize,
    pub realized_m: Vec<usize>,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub budget: usize,
    pub seeds: Vec<u64>,
    /// Sorted by mean dev loss, best first.
    pub rows: Vec<AblationRow>,
}

/// One run per target set and seed at a fixed trainable budget. `base_cfg`
/// supplies everything but the adapter.
pub fn ablate_targets(
    base: &ParameterStore,
    data: &DatasetSplits,
    budget: usize,
    target_sets: &[(String, TargetSet)],
    base_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() || target_sets.is_empty() {
        return Err(Error::config("ablation needs at least one seed and one target set"));
    }
    for (label, t) in target_sets {
        let cap = base.count_params(t);
        if budget > cap {
            return Err(Error::config(format!(
                "budget {budget} exceeds the {cap} scalars of target set {label}"
            )));
        }
    }
    let mut rows = Vec::new();
    for (label, targets) in target_sets {
        let mut realized = Vec::new();
        let (mut dl, mut da, mut tl, mut ta) = (0.0, 0.0, 0.0, 0.0);
        let mut has_test = true;
        for &seed in seeds {
            let mut cfg = base_cfg.clone();
            cfg.seed = seed;
            cfg.adapter = AdapterSpec::Sparta {
                density: None,
                budget: Some(budget),
                targets: targets.clone(),
                seed,
            };
            let out = train(base, data, &cfg)?;
            realized.push(out.metrics.realized_m.unwrap_or(0));
            dl += out.metrics.best_dev.loss;
            da += out.metrics.best_dev.accuracy;
            match out.metrics.test {
                Some(t) => {
                    tl += t.loss;
                    ta += t.accuracy;
                }
                None => has_test = false,
            }
        }
        let n = seeds.len() as f64;
        rows.push(AblationRow {
            label: label.clone(),
            targets: targets.clone(),
            capacity: base.count_params(targets),
            realized_m: realized,
            dev_loss: dl / n,
            dev_accuracy: da / n,
            test_loss: has_test.then_some(tl / n),
            test_accuracy: has_test.then_some(ta / n),
        });
    }
    rows.sort_by(|a, b| a.dev_loss.total_cmp(&b.dev_loss));
    Ok(AblationTable {
        budget,
        seeds: seeds.to_vec(),
        rows,
    })
}

impl AblationTable {
    pub fn render(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(7).max(7);
        let mut out = format!(
            "{:<w$}  {:>10}  {:>10}  {:>8}  {:>8}\n",
            "targets", "capacity", "mean m", "loss", "acc"
        );
        for r in &self.rows {
            let mean_m = r.realized_m.iter().sum::<usize>() as f64 / r.realized_m.len().max(1) as f64;
            let (loss, acc) = match (r.test_loss, r.test_accuracy) {
                (Some(l), Some(a)) => (l, a),
                _ => (r.dev_loss, r.dev_accuracy),
            };
            out.push_str(&format!(
                "{:<w$}  {:>10}  {:>10.0}  {:>8.3}  {:>7.1}%\n",
                r.label,
                r.capacity,
                mean_m,
                loss,
                acc * 100.0
            ));
        }
        out
    }
}

/// Learning rates and seeds to try for one adapter configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub learning_rates: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lr: f64,
    pub seed: u64,
    pub best_dev: EvalMetrics,
    pub test: Option<EvalMetrics>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Learning rate with the lowest mean best-dev loss.
    pub best_lr: f64,
}

pub fn sweep(
    base: &ParameterStore,
    data: &DatasetSplits,
    base_cfg: &TrainConfig,
    grid: &SweepGrid,
) -> Result<SweepResult> {
    if grid.learning_rates.is_empty() || grid.seeds.is_empty() {
        return Err(Error::config("sweep grid needs learning rates and seeds"));
    }
    let mut points = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for &lr in &grid.learning_rates {
        let mut total = 0.0;
        for &seed in &grid.seeds {
            let mut cfg = base_cfg.clone();
            cfg.lr = lr;
            cfg.seed = seed;
            reseed_adapter(&mut cfg.adapter, seed);
            let out = train(base, data, &cfg)?;
            total += out.metrics.best_dev.loss;
            points.push(SweepPoint {
                lr,
                seed,
                best_dev: out.metrics.best_dev,
                test: out.metrics.test,
                steps: out.metrics.steps,
            });
        }
        let mean = total / grid.seeds.len() as f64;
        if best.is_none_or(|(_, b)| mean < b) {
            best = Some((lr, mean));
        }
    }
    Ok(SweepResult {
        points,
        best_lr: best.expect("nonempty grid").0,
    })
}

fn reseed_adapter(spec: &mut AdapterSpec, s: u64) {
    match spec {
        AdapterSpec::Sparta { seed, .. }
        | AdapterSpec::Lora { seed, .. }
        | AdapterSpec::DoraLite { seed, .. } => *seed = s,
        AdapterSpec::Full { .. } | AdapterSpec::HeadOnly => {}
    }
}
