//! Training loop, metrics and multi-trial experiments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use snapture_nn::optim::{Optimizer, OptimizerKind};
use snapture_nn::{Graph, Mode, Scalar};

use crate::data::{kfold, stratified_split, SplitPlan};
use crate::model::{argmax, ModelConfig, Prediction, SnaptureModel, Variant};
use crate::motion_profile::quantile;
use crate::pipeline::PreparedSample;
use crate::{write_atomic, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

impl FromStr for OptimizerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl From<OptimizerChoice> for OptimizerKind {
    fn from(o: OptimizerChoice) -> Self {
        match o {
            OptimizerChoice::Adam => OptimizerKind::Adam,
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerChoice,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 40,
            batch_size: 64,
            optimizer: OptimizerChoice::Adam,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// A zero learning rate is allowed; it freezes the weights.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Shuffled mini-batches of indices `0..n`; a trailing singleton joins the
/// previous batch so batch normalization always sees two samples.
pub fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

/// Trains in place; returns the per-epoch mean sample loss.
pub fn train(model: &mut SnaptureModel<f32>, train_set: &[&PreparedSample], hyper: &Hyperparams) -> Result<Vec<f64>> {
    hyper.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 samples, got {}",
            train_set.len()
        )));
    }
    if hyper.batch_size > train_set.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds training set size {}",
            hyper.batch_size,
            train_set.len()
        )));
    }
    let classes = model.config().classes;
    if let Some(s) = train_set.iter().find(|s| s.label >= classes) {
        return Err(Error::Config(format!("sample {} has label {} >= {classes}", s.id, s.label)));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    dropout_rng.set_stream(1);
    let mut opt = Optimizer::new(hyper.optimizer.into(), hyper.lr);
    let mut log = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut total = 0.0;
        for batch in batches(train_set.len(), hyper.batch_size, &mut shuffle_rng) {
            let refs: Vec<_> = batch.iter().map(|&i| model.sample_ref(train_set[i])).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| train_set[i].label).collect();
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &refs, Mode::Train, &mut dropout_rng)?;
            let (loss, _) = g.softmax_xent(fwd.logits, &targets)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::TrainingDiverged { epoch, trial: None });
            }
            g.backward(loss)?;
            let grads = g.param_grads(model.store())?;
            opt.step(model.store_mut(), &grads)?;
            model.apply_bn_updates(&fwd.bn_updates);
            total += value * batch.len() as f64;
        }
        log.push(total / train_set.len() as f64);
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    /// Training wall time; kept out of the metrics JSON so that file is
    /// reproducible bit for bit.
    #[serde(skip)]
    pub train_seconds: f64,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let k = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class_f1: Vec<f64> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let fn_: usize = confusion[c].iter().sum::<usize>() - tp;
                let fp: usize = (0..k).map(|r| confusion[r][c]).sum::<usize>() - tp;
                let denom = 2 * tp + fp + fn_;
                if denom == 0 {
                    0.0
                } else {
                    2.0 * tp as f64 / denom as f64
                }
            })
            .collect();
        Self {
            accuracy: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            macro_f1: if k == 0 { 0.0 } else { per_class_f1.iter().sum::<f64>() / k as f64 },
            per_class_f1,
            confusion,
            train_seconds: 0.0,
        }
    }

    pub fn from_labels(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::Config(format!("label {} out of {classes} classes", t.max(p))));
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
}

/// Eval-mode metrics; the gate threshold is whatever the model carries.
pub fn evaluate(model: &SnaptureModel<f32>, test_set: &[&PreparedSample]) -> Result<Evaluation> {
    if test_set.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let predictions = model.predict_prepared(test_set)?;
    let truth: Vec<usize> = test_set.iter().map(|s| s.label).collect();
    let predicted: Vec<usize> = predictions.iter().map(|p| argmax(&p.probs)).collect();
    let metrics = Metrics::from_labels(&truth, &predicted, model.config().classes)?;
    Ok(Evaluation { metrics, predictions })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    Holdout { test_frac: f64 },
    KFold { k: usize },
}

/// Where the snapture_thold gate threshold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// Quantile of the training samples' middle-part means, so roughly this
    /// fraction of training samples gates the snapshot on.
    Calibrate(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub model: ModelConfig,
    pub hyper: Hyperparams,
    pub protocol: Protocol,
    pub threshold: ThresholdPolicy,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    /// Pooled over all test folds of the trial.
    pub metrics: Metrics,
    /// One per-epoch loss log per fold.
    pub loss: Vec<Vec<f64>>,
    /// Gate threshold used in each fold (snapture_thold only).
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub variant: Variant,
    pub classes: Vec<String>,
    pub experiment: Experiment,
    pub trials: Vec<TrialResult>,
    pub mean: MetricSummary,
    /// Population standard deviation across trials.
    pub std: MetricSummary,
    pub mean_confusion: Vec<Vec<f64>>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl TrialReport {
    /// Aggregates per-trial metrics into means, deviations and the average
    /// confusion matrix.
    pub fn aggregate(variant: Variant, classes: Vec<String>, experiment: Experiment, trials: Vec<TrialResult>) -> Result<Self> {
        let Some(first) = trials.first() else {
            return Err(Error::Config("a report needs at least one trial".into()));
        };
        let k = first.metrics.per_class_f1.len();
        let col = |f: &dyn Fn(&Metrics) -> f64| mean_std(&trials.iter().map(|t| f(&t.metrics)).collect::<Vec<_>>());
        let (acc_m, acc_s) = col(&|m| m.accuracy);
        let (f1_m, f1_s) = col(&|m| m.macro_f1);
        let per: Vec<(f64, f64)> = (0..k).map(|c| col(&|m| m.per_class_f1[c])).collect();
        let n = trials.len() as f64;
        let mut mean_confusion = vec![vec![0.0; k]; k];
        for t in &trials {
            for (r, row) in t.metrics.confusion.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    mean_confusion[r][c] += v as f64 / n;
                }
            }
        }
        Ok(Self {
            variant,
            classes,
            experiment,
            mean: MetricSummary {
                accuracy: acc_m,
                macro_f1: f1_m,
                per_class_f1: per.iter().map(|p| p.0).collect(),
            },
            std: MetricSummary {
                accuracy: acc_s,
                macro_f1: f1_s,
                per_class_f1: per.iter().map(|p| p.1).collect(),
            },
            trials,
            mean_confusion,
        })
    }

    pub fn train_seconds(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.metrics.train_seconds).collect()
    }
}

fn subset<'a>(samples: &'a [PreparedSample], idx: &[usize]) -> Vec<&'a PreparedSample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

/// Splits for one trial under the experiment protocol.
pub fn trial_splits(protocol: &Protocol, labels: &[usize], seed: u64) -> Result<Vec<SplitPlan>> {
    match *protocol {
        Protocol::Holdout { test_frac } => Ok(vec![stratified_split(labels, test_frac, seed)?]),
        Protocol::KFold { k } => kfold(labels, k, seed),
    }
}

/// Trains and tests one model on one split; returns the trained model, the
/// loss log, the threshold used and test predictions.
pub fn run_split(
    exp: &Experiment,
    samples: &[PreparedSample],
    plan: &SplitPlan,
    seed: u64,
) -> Result<(SnaptureModel<f32>, Vec<f64>, Option<f64>, Evaluation)> {
    let train_set = subset(samples, &plan.train);
    let test_set = subset(samples, &plan.test);
    let mut cfg = exp.model.clone();
    let threshold = if cfg.variant == Variant::SnaptureThold {
        Some(match exp.threshold {
            ThresholdPolicy::Fixed(t) => t,
            ThresholdPolicy::Calibrate(frac) => {
                let means: Vec<f64> = train_set.iter().map(|s| s.middle_mean).collect();
                quantile(&means, frac)?
            }
        })
    } else {
        None
    };
    cfg.threshold = threshold.or(cfg.threshold);
    let mut model = SnaptureModel::build(cfg, seed)?;
    let hyper = Hyperparams {
        seed,
        ..exp.hyper.clone()
    };
    let loss = train(&mut model, &train_set, &hyper)?;
    let eval = evaluate(&model, &test_set)?;
    Ok((model, loss, threshold, eval))
}

/// `exp.trials` independent runs with seeds `hyper.seed + i`; each trial
/// re-splits the data under its own seed.
pub fn run_trials(exp: &Experiment, samples: &[PreparedSample], classes: &[String]) -> Result<TrialReport> {
    run_trials_with(exp, samples, classes, |_, _| {})
}

/// As [`run_trials`], calling `progress(trial, &result)` after each trial.
pub fn run_trials_with(
    exp: &Experiment,
    samples: &[PreparedSample],
    classes: &[String],
    mut progress: impl FnMut(usize, &TrialResult),
) -> Result<TrialReport> {
    if exp.trials == 0 {
        return Err(Error::Config("trial count must be at least 1".into()));
    }
    if classes.len() != exp.model.classes {
        return Err(Error::Config(format!(
            "{} class names for a {}-class model",
            classes.len(),
            exp.model.classes
        )));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut results = Vec::with_capacity(exp.trials);
    for trial in 0..exp.trials {
        let seed = exp.hyper.seed.wrapping_add(trial as u64);
        let mut truth = Vec::new();
        let mut predicted = Vec::new();
        let mut loss = Vec::new();
        let mut thresholds = Vec::new();
        let start = Instant::now();
        for plan in trial_splits(&exp.protocol, &labels, seed)? {
            let (_, log, threshold, eval) = run_split(exp, samples, &plan, seed).map_err(|e| match e {
                Error::TrainingDiverged { epoch, .. } => Error::TrainingDiverged {
                    epoch,
                    trial: Some(trial),
                },
                e => e,
            })?;
            truth.extend(plan.test.iter().map(|&i| labels[i]));
            predicted.extend(eval.predictions.iter().map(|p| p.label));
            loss.push(log);
            thresholds.extend(threshold);
        }
        let mut metrics = Metrics::from_labels(&truth, &predicted, exp.model.classes)?;
        metrics.train_seconds = start.elapsed().as_secs_f64();
        let result = TrialResult {
            trial,
            seed,
            metrics,
            loss,
            thresholds,
        };
        progress(trial, &result);
        results.push(result);
    }
    TrialReport::aggregate(exp.model.variant, classes.to_vec(), exp.clone(), results)
}

/// `epoch,loss` rows, one block per fold when there are several.
pub fn loss_csv(logs: &[Vec<f64>]) -> String {
    let mut out = String::from("fold,epoch,loss\n");
    for (f, log) in logs.iter().enumerate() {
        for (e, l) in log.iter().enumerate() {
            let _ = writeln!(out, "{f},{e},{l}");
        }
    }
    out
}

/// Confusion matrix with a header row of predicted classes and a leading
/// column of true classes.
pub fn confusion_csv<V: ToString>(classes: &[String], matrix: &[Vec<V>]) -> String {
    let mut out = String::from("true\\predicted");
    for c in classes {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (c, row) in classes.iter().zip(matrix) {
        out.push_str(c);
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Writes `report.json`, `confusion.csv` (trial-averaged), and per trial
/// `trial_<i>_metrics.json`, `trial_<i>_confusion.csv` and
/// `trial_<i>_loss.csv`; wall times go to `timing.json`.
pub fn write_report(dir: &Path, report: &TrialReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    write_atomic(&dir.join("confusion.csv"), confusion_csv(&report.classes, &report.mean_confusion).as_bytes())?;
    for t in &report.trials {
        let i = t.trial;
        write_atomic(
            &dir.join(format!("trial_{i}_metrics.json")),
            serde_json::to_string_pretty(&t.metrics)?.as_bytes(),
        )?;
        write_atomic(
            &dir.join(format!("trial_{i}_confusion.csv")),
            confusion_csv(&report.classes, &t.metrics.confusion).as_bytes(),
        )?;
        write_atomic(&dir.join(format!("trial_{i}_loss.csv")), loss_csv(&t.loss).as_bytes())?;
    }
    let timing = serde_json::json!({ "train_seconds": report.train_seconds() });
    write_atomic(&dir.join("timing.json"), serde_json::to_string_pretty(&timing)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use snapture_nn::Tensor;

    fn toy(n_per_class: usize) -> Vec<PreparedSample> {
        // Class 0: a bright bar sweeping left to right; class 1: top to bottom.
        let (h, w, t) = (12, 16, 4);
        let mut out = Vec::new();
        for label in 0..2 {
            for k in 0..n_per_class {
                let mut data = vec![0.0f32; t * h * w];
                for step in 0..t {
                    for r in 0..h {
                        for c in 0..w {
                            let on = if label == 0 { c == (step * 3 + k) % w } else { r == (step * 2 + k) % h };
                            data[(step * h + r) * w + c] = f32::from(u8::from(on));
                        }
                    }
                }
                out.push(PreparedSample {
                    id: format!("{label}_{k}"),
                    label,
                    diffs: Tensor::new(vec![t, 1, h, w], data).unwrap(),
                    snapshot: Tensor::zeros(&[1, h, w]),
                    middle_mean: 0.0,
                    hand_found: false,
                });
            }
        }
        out
    }

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            input_width: 16,
            input_height: 12,
            cnn_ff: 12,
            hidden: 8,
            static_ff: 6,
            fusion: 10,
            threshold: Some(0.5),
            ..ModelConfig::new(variant, 2)
        }
    }

    fn hyper(lr: f64, epochs: usize) -> Hyperparams {
        Hyperparams {
            lr,
            epochs,
            batch_size: 4,
            optimizer: OptimizerChoice::Adam,
            seed: 3,
        }
    }

    #[test]
    fn batches_cover_and_merge_singleton() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batches(9, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_eq!(batches(8, 4, &mut rng).len(), 2);
    }

    #[test]
    fn separable_toy_reaches_full_train_accuracy() {
        let data = toy(6);
        let refs: Vec<&PreparedSample> = data.iter().collect();
        let mut m = SnaptureModel::build(tiny(Variant::Cnnlstm), 1).unwrap();
        let log = train(&mut m, &refs, &hyper(0.01, 40)).unwrap();
        assert_eq!(log.len(), 40);
        assert!(log[39] < log[0]);
        let eval = evaluate(&m, &refs).unwrap();
        assert_eq!(eval.metrics.accuracy, 1.0);
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let data = toy(3);
        let refs: Vec<&PreparedSample> = data.iter().collect();
        let mut m = SnaptureModel::build(tiny(Variant::Snapture), 1).unwrap();
        let before: Vec<Vec<f32>> = m.store().trainable_ids().map(|id| m.store().get(id).data().to_vec()).collect();
        train(&mut m, &refs, &hyper(0.0, 3)).unwrap();
        let after: Vec<Vec<f32>> = m.store().trainable_ids().map(|id| m.store().get(id).data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy(3);
        let refs: Vec<&PreparedSample> = data.iter().collect();
        let run = || {
            let mut m = SnaptureModel::build(tiny(Variant::SnaptureThold), 4).unwrap();
            train(&mut m, &refs, &hyper(0.01, 3)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let data = toy(2);
        let refs: Vec<&PreparedSample> = data.iter().collect();
        let mut m = SnaptureModel::build(tiny(Variant::Cnnlstm), 1).unwrap();
        assert!(train(&mut m, &refs[..1], &hyper(0.01, 1)).is_err());
        let mut h = hyper(0.01, 1);
        h.batch_size = 5;
        assert!(train(&mut m, &refs, &h).is_err());
        h.batch_size = 2;
        h.epochs = 0;
        assert!(train(&mut m, &refs, &h).is_err());
        h.epochs = 1;
        h.lr = f64::NAN;
        assert!(train(&mut m, &refs, &h).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let data = toy(2);
        let refs: Vec<&PreparedSample> = data.iter().collect();
        let mut m = SnaptureModel::build(tiny(Variant::Cnnlstm), 1).unwrap();
        let id = m.store().id("head.out.b").unwrap();
        m.store_mut().get_mut(id).data_mut()[0] = f32::NAN;
        assert!(matches!(
            train(&mut m, &refs, &hyper(0.01, 2)),
            Err(Error::TrainingDiverged { epoch: 0, trial: None })
        ));
    }

    #[test]
    fn perfect_predictions() {
        let m = Metrics::from_labels(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn constant_predictor_on_balanced_pair() {
        let m = Metrics::from_labels(&[0, 0, 1, 1], &[1, 1, 1, 1], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        // Class 1: tp 2, fp 2, fn 0 -> precision 1/2, recall 1 -> F1 2/3.
        assert!((m.per_class_f1[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class_f1[0], 0.0);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_scores_zero() {
        let m = Metrics::from_labels(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(m.per_class_f1, [1.0, 1.0, 0.0]);
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    fn precision_recall_f1(truth: &[usize], pred: &[usize], c: usize) -> f64 {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let pp = pred.iter().filter(|&&p| p == c).count() as f64;
        let ap = truth.iter().filter(|&&t| t == c).count() as f64;
        let (p, r) = (if pp > 0.0 { tp / pp } else { 0.0 }, if ap > 0.0 { tp / ap } else { 0.0 });
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    proptest! {
        #[test]
        fn metrics_match_label_level_oracle(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let m = Metrics::from_labels(&truth, &pred, 4).unwrap();
            prop_assert_eq!(m.total(), truth.len());
            let acc = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64;
            prop_assert!((m.accuracy - acc).abs() < 1e-12);
            for c in 0..4 {
                prop_assert!((m.per_class_f1[c] - precision_recall_f1(&truth, &pred, c)).abs() < 1e-12);
                let row: usize = m.confusion[c].iter().sum();
                prop_assert_eq!(row, truth.iter().filter(|&&t| t == c).count());
            }
        }
    }

    fn experiment(variant: Variant, trials: usize) -> Experiment {
        Experiment {
            model: tiny(variant),
            hyper: hyper(0.01, 2),
            protocol: Protocol::Holdout { test_frac: 0.3 },
            threshold: ThresholdPolicy::Calibrate(0.5),
            trials,
        }
    }

    #[test]
    fn single_trial_report_has_zero_std() {
        let data = toy(5);
        let classes = vec!["a".to_string(), "b".to_string()];
        let r = run_trials(&experiment(Variant::Cnnlstm, 1), &data, &classes).unwrap();
        assert_eq!(r.trials.len(), 1);
        assert_eq!(r.std.accuracy, 0.0);
        assert_eq!(r.mean.accuracy, r.trials[0].metrics.accuracy);
        let m = &r.trials[0].metrics;
        for (row, mrow) in r.mean_confusion.iter().zip(&m.confusion) {
            for (a, &b) in row.iter().zip(mrow) {
                assert_eq!(*a, b as f64);
            }
        }
    }

    #[test]
    fn reports_are_reproducible_and_recomputable() {
        let data = toy(5);
        let classes = vec!["a".to_string(), "b".to_string()];
        let mut exp = experiment(Variant::SnaptureThold, 3);
        exp.protocol = Protocol::KFold { k: 2 };
        let a = run_trials(&exp, &data, &classes).unwrap();
        let b = run_trials(&exp, &data, &classes).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.trials.iter().map(|t| t.seed).collect::<Vec<_>>(), [3, 4, 5]);
        assert!(a.trials.iter().all(|t| t.loss.len() == 2 && t.thresholds.len() == 2 && t.metrics.total() == 10));
        let accs: Vec<f64> = a.trials.iter().map(|t| t.metrics.accuracy).collect();
        let mean = accs.iter().sum::<f64>() / 3.0;
        let std = (accs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0).sqrt();
        assert!((a.mean.accuracy - mean).abs() < 1e-9);
        assert!((a.std.accuracy - std).abs() < 1e-9);
    }

    #[test]
    fn csv_emitters() {
        assert_eq!(loss_csv(&[vec![1.5, 0.5]]), "fold,epoch,loss\n0,0,1.5\n0,1,0.5\n");
        let classes = vec!["x".to_string(), "y".to_string()];
        assert_eq!(confusion_csv(&classes, &[vec![1, 2], vec![0, 3]]), "true\\predicted,x,y\nx,1,2\ny,0,3\n");
    }

    #[test]
    fn write_report_files() {
        let data = toy(4);
        let classes = vec!["a".to_string(), "b".to_string()];
        let r = run_trials(&experiment(Variant::Snapture, 2), &data, &classes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &r).unwrap();
        for f in ["report.json", "confusion.csv", "timing.json", "trial_1_metrics.json", "trial_0_loss.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back: TrialReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back.trials[1].metrics.confusion, r.trials[1].metrics.confusion);
    }
}
