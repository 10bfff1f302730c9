use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use snapture::data::{load_manifest, Manifest, SplitPlan};
use snapture::imaging::BBox;
use snapture::model::{ModelConfig, SnaptureModel, Variant};
use snapture::motion_profile::{compute_profile, gate_from_mean, quantile, MotionProfile};
use snapture::pipeline::{prepare_all, PrepConfig, PreparedSample};
use snapture::snapshot::{extract_snapshot, peak_index, ExtractionConfig, SnapshotOutcome};
use snapture::synth::{generate, write_corpus, SynthConfig};
use snapture::train_eval::{
    confusion_csv, evaluate, loss_csv, run_split, run_trials_with, trial_splits, write_report, Experiment, Metrics,
    ThresholdPolicy,
};
use snapture::{write_atomic, Error, GestureSequence};

use crate::config::RunConfig;

/// Per-item failures of a subcommand; the caller maps them to the exit code.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct Outcome {
    /// Failures that always make the run fail.
    pub errors: usize,
    /// Failures that fail the run only in strict mode.
    pub soft_failures: usize,
}

impl Outcome {
    pub fn success(&self, strict: bool) -> bool {
        self.errors == 0 && (!strict || self.soft_failures == 0)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Profiles every entry; load failures are kept per sequence.
fn profiles(manifest: &Manifest, cfg: &RunConfig) -> Vec<(String, snapture::Result<(GestureSequence, MotionProfile)>)> {
    (0..manifest.entries.len())
        .map(|i| {
            let id = manifest.sequence_id(i);
            let r = manifest.load_sequence(i).and_then(|s| {
                let p = compute_profile(&s, &cfg.ssim)?;
                Ok((s, p))
            });
            if let Err(e) = &r {
                warn!("{id}: {e}");
            }
            (id, r)
        })
        .collect()
}

/// Gate threshold for a set of middle-part means; NaN (gate never on) when
/// calibrating over nothing.
fn gate_threshold(policy: ThresholdPolicy, means: &[f64]) -> Result<f64> {
    Ok(match policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::Calibrate(_) if means.is_empty() => f64::NAN,
        ThresholdPolicy::Calibrate(frac) => quantile(means, frac)?,
    })
}

fn profiled_threshold(
    items: &[(String, snapture::Result<(GestureSequence, MotionProfile)>)],
    cfg: &RunConfig,
) -> Result<f64> {
    let means: Vec<f64> = items
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok().map(|(_, p)| p.middle_mean()))
        .collect();
    gate_threshold(cfg.threshold, &means)
}

fn write_gate(out: &Path, policy: ThresholdPolicy, threshold: f64) -> Result<()> {
    let value = serde_json::json!({
        "policy": policy,
        "threshold": if threshold.is_nan() { None } else { Some(threshold) },
    });
    write_json(&out.join("gate.json"), &value)
}

/// `profile.csv` (per-frame ISSIM) and `summary.csv` (thirds and gate).
pub fn profile(cfg: &RunConfig) -> Result<Outcome> {
    let out = cfg.out()?;
    let manifest = load_manifest(cfg.manifest()?)?;
    let items = profiles(&manifest, cfg);
    let threshold = profiled_threshold(&items, cfg)?;
    let mut frames = String::from("sequence_id,frame_index,issim,part_id\n");
    let mut summary = String::from("sequence_id,part1_mean,part2_mean,part3_mean,enabled,dynamics_class,error\n");
    let mut outcome = Outcome::default();
    for (id, r) in &items {
        let id = csv_field(id);
        match r {
            Ok((_, p)) => {
                for (t, v) in p.values.iter().enumerate() {
                    writeln!(frames, "{id},{t},{v},{}", p.part_of(t) + 1)?;
                }
                let gate = gate_from_mean(p.middle_mean(), threshold);
                let [a, b, c] = p.part_means;
                writeln!(
                    summary,
                    "{id},{a},{b},{c},{},{},",
                    gate.snapshot_enabled,
                    gate.dynamics_class.as_str()
                )?;
            }
            Err(e) => {
                outcome.errors += 1;
                writeln!(summary, "{id},,,,,,{}", csv_field(&e.to_string()))?;
            }
        }
    }
    fs::create_dir_all(out)?;
    write_atomic(&out.join("profile.csv"), frames.as_bytes())?;
    write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
    write_gate(out, cfg.threshold, threshold)?;
    info!("profiled {} sequences, {} failed", items.len(), outcome.errors);
    Ok(outcome)
}

fn bbox_field(b: &BBox) -> String {
    format!("{} {} {} {}", b.min_row, b.min_col, b.max_row, b.max_col)
}

/// Snapshot file name for a sequence id, which may contain separators.
fn snapshot_name(id: &str) -> String {
    let stem: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{stem}.pgm")
}

/// PGM snapshots of gate-enabled sequences plus `snapshots.csv`. A missing
/// hand is a soft failure.
pub fn snapshot(cfg: &RunConfig) -> Result<Outcome> {
    let out = cfg.out()?;
    let manifest = load_manifest(cfg.manifest()?)?;
    let items = profiles(&manifest, cfg);
    let threshold = profiled_threshold(&items, cfg)?;
    let extraction = ExtractionConfig {
        out_width: cfg.width,
        out_height: cfg.height,
        ..ExtractionConfig::default()
    };
    let dir = out.join("snapshots");
    fs::create_dir_all(&dir)?;
    let mut csv = String::from("sequence_id,peak_index,gated,blob_bbox,status,file\n");
    let mut outcome = Outcome::default();
    for (id, r) in &items {
        let field = csv_field(id);
        let (seq, prof) = match r {
            Ok(v) => v,
            Err(e) => {
                outcome.errors += 1;
                writeln!(csv, "{field},,,,{},", csv_field(&format!("error: {e}")))?;
                continue;
            }
        };
        let peak = peak_index(seq.len())?;
        let gate = gate_from_mean(prof.middle_mean(), threshold);
        match extract_snapshot(seq, &extraction, &gate) {
            Ok(SnapshotOutcome::Extracted(s)) => {
                let name = snapshot_name(id);
                write_atomic(&dir.join(&name), &s.image.to_pnm())?;
                writeln!(csv, "{field},{peak},false,{},ok,{name}", bbox_field(&s.blob.bbox))?;
            }
            Ok(SnapshotOutcome::GatedOff) => writeln!(csv, "{field},{peak},true,,gated,")?,
            Err(Error::NoHandDetected) => {
                outcome.soft_failures += 1;
                warn!("{id}: no hand detected");
                writeln!(csv, "{field},{peak},false,,no_hand,")?;
            }
            Err(e) => {
                outcome.errors += 1;
                writeln!(csv, "{field},{peak},false,,{},", csv_field(&format!("error: {e}")))?;
            }
        }
    }
    write_atomic(&out.join("snapshots.csv"), csv.as_bytes())?;
    write_gate(out, cfg.threshold, threshold)?;
    Ok(outcome)
}

pub struct SynthArgs {
    pub preset: String,
    pub spec: Option<PathBuf>,
    pub per_class: Option<usize>,
}

/// Renders a synthetic corpus with its manifest and the generator config.
pub fn synth(cfg: &RunConfig, args: &SynthArgs) -> Result<Outcome> {
    let out = cfg.out()?;
    let seed = cfg.seed.unwrap_or(0);
    let mut synth = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut s: SynthConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if cfg.seed.is_some() {
                s.seed = seed;
            }
            s
        }
        None => SynthConfig::preset(&args.preset, seed)?,
    };
    if let Some(n) = args.per_class {
        synth.per_class = n;
    }
    let corpus = generate(&synth)?;
    let manifest = write_corpus(&corpus, out)?;
    write_json(&out.join("synth_config.json"), &synth)?;
    info!("wrote {} sequences; manifest {}", corpus.samples.len(), manifest.display());
    Ok(Outcome::default())
}

struct Dataset {
    classes: Vec<String>,
    samples: Vec<PreparedSample>,
}

fn load_dataset(cfg: &RunConfig, prep: &PrepConfig) -> Result<Dataset> {
    let path = cfg.manifest()?;
    let manifest = load_manifest(path)?;
    if manifest.entries.is_empty() {
        bail!("manifest {} lists no sequences", path.display());
    }
    let sequences = (0..manifest.entries.len())
        .map(|i| manifest.load_sequence(i).with_context(|| format!("loading {}", manifest.sequence_id(i))))
        .collect::<Result<Vec<_>>>()?;
    info!("preparing {} sequences", sequences.len());
    Ok(Dataset {
        classes: manifest.classes,
        samples: prepare_all(&sequences, prep)?,
    })
}

fn prep_config(cfg: &RunConfig) -> PrepConfig {
    PrepConfig {
        ssim: cfg.ssim,
        ..PrepConfig::with_input(cfg.width, cfg.height)
    }
}

fn experiment(cfg: &RunConfig, variant: Variant, classes: usize, trials: usize) -> Experiment {
    Experiment {
        model: ModelConfig {
            input_width: cfg.width,
            input_height: cfg.height,
            ..ModelConfig::new(variant, classes)
        },
        hyper: cfg.hyper.clone(),
        protocol: cfg.protocol,
        threshold: cfg.threshold,
        trials,
    }
}

fn predictions_csv(classes: &[String], samples: &[&PreparedSample], eval: &snapture::train_eval::Evaluation) -> String {
    let mut out = String::from("sequence_id,true,predicted,gate,snapshot_fallback");
    for c in classes {
        out.push_str(",p_");
        out.push_str(&csv_field(c));
    }
    out.push('\n');
    for (s, p) in samples.iter().zip(&eval.predictions) {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            csv_field(&s.id),
            csv_field(&classes[s.label]),
            csv_field(&classes[p.label]),
            p.gate,
            p.snapshot_fallback
        );
        for v in &p.probs {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn write_metrics(out: &Path, prefix: &str, classes: &[String], metrics: &Metrics) -> Result<()> {
    write_json(&out.join(format!("{prefix}metrics.json")), metrics)?;
    write_atomic(
        &out.join(format!("{prefix}confusion.csv")),
        confusion_csv(classes, &metrics.confusion).as_bytes(),
    )?;
    Ok(())
}

/// Trains one model per split of the configured protocol and writes, per
/// fold `i`: `fold_<i>.ckpt`, `fold_<i>_split.json`, `fold_<i>_metrics.json`,
/// `fold_<i>_confusion.csv`, `fold_<i>_predictions.csv`, `fold_<i>_loss.csv`.
/// `metrics.json` pools the test predictions of all folds.
pub fn train(cfg: &RunConfig) -> Result<Outcome> {
    let out = cfg.out()?;
    let seed = cfg.seed()?;
    let prep = prep_config(cfg);
    let data = load_dataset(cfg, &prep)?;
    let variant = cfg.variant.unwrap_or(Variant::SnaptureThold);
    let exp = experiment(cfg, variant, data.classes.len(), 1);
    fs::create_dir_all(out)?;
    write_json(&out.join("experiment.json"), &exp)?;
    let labels: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
    let (mut truth, mut predicted) = (Vec::new(), Vec::new());
    for (i, plan) in trial_splits(&exp.protocol, &labels, seed)?.iter().enumerate() {
        info!("{variant} fold {i}: {} train, {} test", plan.train.len(), plan.test.len());
        let (model, loss, threshold, eval) = run_split(&exp, &data.samples, plan, seed)?;
        let fold = format!("fold_{i}_");
        model.save(&out.join(format!("fold_{i}.ckpt")), &prep)?;
        write_json(&out.join(format!("{fold}split.json")), plan)?;
        write_metrics(out, &fold, &data.classes, &eval.metrics)?;
        let test: Vec<&PreparedSample> = plan.test.iter().map(|&j| &data.samples[j]).collect();
        write_atomic(
            &out.join(format!("{fold}predictions.csv")),
            predictions_csv(&data.classes, &test, &eval).as_bytes(),
        )?;
        write_atomic(&out.join(format!("{fold}loss.csv")), loss_csv(&[loss]).as_bytes())?;
        if let Some(t) = threshold {
            info!("{variant} fold {i}: gate threshold {t}");
        }
        info!("{variant} fold {i}: accuracy {:.4}", eval.metrics.accuracy);
        truth.extend(plan.test.iter().map(|&j| labels[j]));
        predicted.extend(eval.predictions.iter().map(|p| p.label));
    }
    let pooled = Metrics::from_labels(&truth, &predicted, data.classes.len())?;
    write_metrics(out, "", &data.classes, &pooled)?;
    Ok(Outcome::default())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub split: Option<PathBuf>,
}

/// Evaluates a checkpoint on the test part of a saved split, or on the
/// whole manifest, with the preprocessing stored in the checkpoint.
pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<Outcome> {
    let out = cfg.out()?;
    if !args.checkpoint.is_file() {
        bail!("checkpoint {} does not exist", args.checkpoint.display());
    }
    let (model, prep) = SnaptureModel::<f32>::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let data = load_dataset(cfg, &prep)?;
    if data.classes.len() != model.config().classes {
        bail!(
            "manifest has {} classes, checkpoint expects {}",
            data.classes.len(),
            model.config().classes
        );
    }
    let indices: Vec<usize> = match &args.split {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let plan: SplitPlan = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if let Some(&bad) = plan.test.iter().find(|&&i| i >= data.samples.len()) {
                bail!("split index {bad} outside the {}-sequence manifest", data.samples.len());
            }
            plan.test
        }
        None => (0..data.samples.len()).collect(),
    };
    let test: Vec<&PreparedSample> = indices.iter().map(|&i| &data.samples[i]).collect();
    let evaluation = evaluate(&model, &test)?;
    fs::create_dir_all(out)?;
    write_metrics(out, "", &data.classes, &evaluation.metrics)?;
    write_atomic(
        &out.join("predictions.csv"),
        predictions_csv(&data.classes, &test, &evaluation).as_bytes(),
    )?;
    info!("{} accuracy {:.4} on {} sequences", model.config().variant, evaluation.metrics.accuracy, test.len());
    Ok(Outcome::default())
}

/// Runs the trial protocol for each variant (all three unless one is
/// selected) into `<out>/<variant>/` and writes `comparison.csv`.
pub fn report(cfg: &RunConfig) -> Result<Outcome> {
    let out = cfg.out()?;
    cfg.seed()?;
    let data = load_dataset(cfg, &prep_config(cfg))?;
    let variants = match cfg.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let trials = cfg.trials.unwrap_or(5);
    let mut table = String::from("variant,trials,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std\n");
    for v in variants {
        let exp = experiment(cfg, v, data.classes.len(), trials);
        let report = run_trials_with(&exp, &data.samples, &data.classes, |t, r| {
            info!("{v} trial {t}: accuracy {:.4}", r.metrics.accuracy)
        })?;
        write_report(&out.join(v.as_str()), &report)?;
        writeln!(
            table,
            "{v},{trials},{},{},{},{}",
            report.mean.accuracy, report.std.accuracy, report.mean.macro_f1, report.std.macro_f1
        )?;
    }
    write_atomic(&out.join("comparison.csv"), table.as_bytes())?;
    Ok(Outcome::default())
}
