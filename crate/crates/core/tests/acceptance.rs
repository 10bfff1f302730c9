//! Acceptance suite: one PASS/FAIL/SKIPPED line per criterion.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p snapture --test acceptance -- 1 3`.
//! Criterion 9 runs only when `GRIT_MANIFEST` points at a manifest of the
//! external GRIT corpus.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snapture::data::load_manifest;
use snapture::imaging::{differential_image, ssim, Frame, SsimParams};
use snapture::model::{ModelConfig, SnaptureModel, Variant};
use snapture::motion_profile::{calibrate_threshold, compute_profile, gate_from_mean, DynamicsClass};
use snapture::pipeline::{prepare_all, PrepConfig, PreparedSample};
use snapture::snapshot::{extract_snapshot, SnapshotOutcome};
use snapture::synth::{generate, SynthConfig};
use snapture::train_eval::{
    evaluate, run_split, run_trials_with, trial_splits, Experiment, Hyperparams, Metrics, OptimizerChoice, Protocol,
    ThresholdPolicy, TrialReport,
};
use snapture::GestureSequence;
use snapture_nn::{Gradients, Graph, Mode};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Option<Outcome>,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
    Frame::new(w, h, 1, (0..w * h).map(|_| rng.gen()).collect()).unwrap()
}

/// Direct per-window evaluation: means, population variances and covariance
/// recomputed from scratch for every 7x7 window, then averaged.
fn brute_ssim(x: &Frame, y: &Frame, p: &SsimParams) -> f64 {
    let (c1, c2) = ((p.k1 * p.l).powi(2), (p.k2 * p.l).powi(2));
    let win = p.window;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut r = 0;
    while r + win <= x.height() {
        let mut c = 0;
        while c + win <= x.width() {
            let mut xs = Vec::with_capacity(win * win);
            let mut ys = Vec::with_capacity(win * win);
            for i in r..r + win {
                for j in c..c + win {
                    xs.push(f64::from(x.get(i, j)));
                    ys.push(f64::from(y.get(i, j)));
                }
            }
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
            let vy = ys.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
            let cxy = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
            c += p.stride;
        }
        r += p.stride;
    }
    total / count as f64
}

fn criterion_1() -> Option<Outcome> {
    let p = SsimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut self_exact = true;
    for i in 0..1000 {
        let x = random_frame(&mut rng, 16, 16);
        // Every fourth pair is a perturbed copy, so high-similarity values are covered too.
        let y = if i % 4 == 0 {
            Frame::new(16, 16, 1, x.data().iter().map(|&v| v.saturating_add(rng.gen_range(0..8))).collect()).unwrap()
        } else {
            random_frame(&mut rng, 16, 16)
        };
        worst = worst.max((ssim(&x, &y, &p).unwrap() - brute_ssim(&x, &y, &p)).abs());
        self_exact &= ssim(&x, &x, &p).unwrap() == 1.0;
    }
    Some(check(
        worst < 1e-9 && self_exact,
        format!("max |ssim - brute force| = {worst:.2e} over 1000 pairs; ssim(x,x) == 1 exactly: {self_exact}"),
    ))
}

/// Square of side `s` with top-left corner at `(r, c)`, value `fg` over `bg`.
fn square_frame(w: usize, h: usize, r: usize, c: usize, s: usize, fg: u8, bg: u8) -> Frame {
    Frame::gray_from_fn(w, h, |i, j| if (r..r + s).contains(&i) && (c..c + s).contains(&j) { fg } else { bg })
}

fn criterion_2() -> Option<Outcome> {
    let t = 25u8;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut subset_ok = true;
    for _ in 0..500 {
        let (w, h) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let f: Vec<Frame> = (0..3).map(|_| random_frame(&mut rng, w, h)).collect();
        let m = differential_image(&f[0], &f[1], &f[2], t).unwrap();
        for r in 0..h {
            for c in 0..w {
                let d1 = f[1].get(r, c).abs_diff(f[0].get(r, c)) > t;
                let d2 = f[2].get(r, c).abs_diff(f[1].get(r, c)) > t;
                subset_ok &= !m.get(r, c) || (d1 && d2);
                subset_ok &= m.get(r, c) == (d1 && d2);
            }
        }
    }
    let mut constant_ok = true;
    for _ in 0..50 {
        let v = rng.gen();
        let f = Frame::filled(20, 15, 1, v);
        constant_ok &= differential_image(&f, &f, &f, t).unwrap().is_empty();
    }
    // Square moving right by 3 px per frame: the mask is the part of the
    // current square outside both neighbours, plus the overlap of the
    // neighbours outside the current square.
    let (w, h, s, row) = (40, 30, 8, 10);
    let cols = [5usize, 8, 11];
    let f: Vec<Frame> = cols.iter().map(|&c| square_frame(w, h, row, c, s, 200, 40)).collect();
    let m = differential_image(&f[0], &f[1], &f[2], t).unwrap();
    let inside = |k: usize, r: usize, c: usize| (row..row + s).contains(&r) && (cols[k]..cols[k] + s).contains(&c);
    let mut square_ok = true;
    for r in 0..h {
        for c in 0..w {
            let (p, cur, n) = (inside(0, r, c), inside(1, r, c), inside(2, r, c));
            let expected = (cur && !p && !n) || (!cur && p && n);
            square_ok &= m.get(r, c) == expected;
        }
    }
    Some(check(
        subset_ok && constant_ok && square_ok,
        format!("500 random triples subset/equality: {subset_ok}; constant triples empty: {constant_ok}; moving square exact: {square_ok}"),
    ))
}

/// Recorded max-pool winners plus loss and, optionally, parameter gradients.
type Pass = (f64, Vec<u32>, Option<Gradients<f64>>);

fn criterion_3() -> Option<Outcome> {
    let cfg = ModelConfig {
        input_width: 16,
        input_height: 12,
        hidden: 8,
        cnn_ff: 10,
        static_ff: 6,
        fusion: 8,
        threshold: Some(0.5),
        ..ModelConfig::new(Variant::SnaptureThold, 3)
    };
    let mut model = SnaptureModel::<f64>::build(cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Move every parameter off its structured initial value (unit gammas,
    // zero biases) so no group sits at a special point.
    let ids: Vec<_> = model.store().trainable_ids().collect();
    for &id in &ids {
        let conv = model.store().name(id).ends_with(".w") && model.store().name(id).contains("conv");
        for v in model.store_mut().get_mut(id).data_mut() {
            *v += rng.gen_range(-0.2..0.2);
            // Batch norm makes the loss invariant to conv weight scale, so
            // scaling is a change of evaluation point only; it widens the
            // gaps between competing max-pool inputs relative to eps.
            if conv {
                *v *= 10.0;
            }
        }
    }
    // Real diff masks and snapshots: one or two steps per sample, mixed gate.
    let mut synth = SynthConfig::benchmark(3);
    synth.per_class = 1;
    let prep = PrepConfig::with_input(16, 12);
    let samples: Vec<PreparedSample> = generate(&synth)
        .unwrap()
        .sequences()
        .into_iter()
        .take(4)
        .enumerate()
        .map(|(k, mut s)| {
            s.frames = s.frames[9..12 + k % 2].to_vec();
            let mut p = snapture::pipeline::prepare(&s, &prep).unwrap();
            p.label = k % 3;
            p.middle_mean = if k == 1 { 0.8 } else { 0.2 };
            p
        })
        .collect();
    let targets: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let loss = |m: &SnaptureModel<f64>, backward: bool| -> Pass {
        let refs: Vec<_> = samples.iter().map(|s| m.sample_ref(s)).collect();
        let mut g = Graph::new();
        let mut drng = ChaCha8Rng::seed_from_u64(99);
        let fwd = m.forward(&mut g, &refs, Mode::Train, &mut drng).unwrap();
        let (l, _) = g.softmax_xent(fwd.logits, &targets).unwrap();
        let value = g.value(l).item();
        let winners = g.pool_winners();
        let grads = backward.then(|| {
            g.backward(l).unwrap();
            g.param_grads(m.store()).unwrap()
        });
        (value, winners, grads)
    };
    let (_, base_winners, grads) = loss(&model, true);
    let grads = grads.unwrap();
    let eps = 1e-3;
    let mut worst = (0.0f64, String::new());
    let (mut groups, mut crossings) = (0, 0);
    for &id in &ids {
        let analytic = grads.get(id).expect("every trainable group gets a gradient").data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let orig = model.store().get(id).data()[k];
            model.store_mut().get_mut(id).data_mut()[k] = orig + eps;
            let (plus, wp, _) = loss(&model, false);
            model.store_mut().get_mut(id).data_mut()[k] = orig - eps;
            let (minus, wm, _) = loss(&model, false);
            model.store_mut().get_mut(id).data_mut()[k] = orig;
            // A changed winner means the interval crosses a max-pool kink,
            // where a central difference is not a derivative estimate.
            if wp != base_winners || wm != base_winners {
                crossings += 1;
            }
            numeric.push((plus - minus) / (2.0 * eps));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-300);
        groups += 1;
        if rel >= worst.0 || !rel.is_finite() {
            worst = (rel, model.store().name(id).to_string());
        }
    }
    Some(check(
        worst.0 < 1e-3 && crossings == 0,
        format!(
            "{groups} parameter groups; worst relative error {:.2e} ({}); max-pool kinks crossed: {crossings}",
            worst.0, worst.1
        ),
    ))
}

const GATE_SEEDS: std::ops::Range<u64> = 0..12;

fn criterion_4() -> Option<Outcome> {
    let p = SsimParams::default();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in GATE_SEEDS {
        let corpus = generate(&SynthConfig::grit_like(seed)).unwrap();
        let profiles: Vec<_> = corpus.samples.iter().map(|s| compute_profile(&s.sequence, &p).unwrap()).collect();
        let n = profiles.len();
        let threshold = calibrate_threshold(&profiles, 0.44).unwrap();
        let gates: Vec<bool> = profiles.iter().map(|pr| gate_from_mean(pr.middle_mean(), threshold).snapshot_enabled).collect();
        let enabled = gates.iter().filter(|&&g| g).count();
        let frac_ok = (enabled as f64 - 0.44 * n as f64).abs() <= 2.0;
        let classes_ok = corpus
            .samples
            .iter()
            .zip(&gates)
            .all(|(s, &g)| g == (s.dynamics == DynamicsClass::Paused));
        let mut sweep: Vec<f64> = profiles.iter().map(|pr| pr.middle_mean()).collect();
        sweep.extend([threshold, f64::NEG_INFINITY, f64::INFINITY]);
        sweep.sort_by(f64::total_cmp);
        let mono_ok = sweep.windows(2).all(|w| {
            profiles.iter().all(|pr| {
                !gate_from_mean(pr.middle_mean(), w[0]).snapshot_enabled || gate_from_mean(pr.middle_mean(), w[1]).snapshot_enabled
            })
        });
        ok &= frac_ok && classes_ok && mono_ok;
        lines.push(format!("seed {seed}: {enabled}/{n} on{}", if classes_ok && mono_ok { "" } else { " (class/monotonicity mismatch)" }));
    }
    Some(check(ok, format!("threshold at frac 0.44, paused on / repeating off on every seed; {}", lines.join(", "))))
}

/// Settings shared by criteria 5 and 6 (and the CLI `benchmark` preset).
const BENCH_SEED: u64 = 0;
const BENCH_INPUT: (usize, usize) = (32, 24);
const BENCH_EPOCHS: usize = 20;
const BENCH_BATCH: usize = 16;
const BENCH_TRIALS: usize = 5;
/// Fraction of training samples gating the snapshot on; the benchmark has
/// four paused classes out of five.
const BENCH_GATE_FRAC: f64 = 0.8;

struct BenchRun {
    reports: Vec<(TrialReport, f64)>,
    classes: Vec<String>,
    pair: (usize, usize),
    repeating: usize,
}

fn bench() -> &'static BenchRun {
    static RUN: std::sync::OnceLock<BenchRun> = std::sync::OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = SynthConfig::benchmark(BENCH_SEED);
        let corpus = generate(&cfg).unwrap();
        let classes = corpus.class_names.clone();
        let prep = PrepConfig::with_input(BENCH_INPUT.0, BENCH_INPUT.1);
        let samples = prepare_all(&corpus.sequences(), &prep).unwrap();
        let reports = Variant::ALL
            .iter()
            .map(|&v| {
                let mut model = ModelConfig::new(v, classes.len());
                (model.input_width, model.input_height) = BENCH_INPUT;
                let exp = Experiment {
                    model,
                    hyper: Hyperparams {
                        lr: 0.001,
                        epochs: BENCH_EPOCHS,
                        batch_size: BENCH_BATCH,
                        optimizer: OptimizerChoice::Adam,
                        seed: BENCH_SEED,
                    },
                    protocol: Protocol::Holdout { test_frac: 0.3 },
                    threshold: ThresholdPolicy::Calibrate(BENCH_GATE_FRAC),
                    trials: BENCH_TRIALS,
                };
                let start = Instant::now();
                let r = run_trials_with(&exp, &samples, &classes, |i, t| {
                    eprintln!("    {v} trial {i}: accuracy {:.3}", t.metrics.accuracy);
                })
                .unwrap();
                (r, start.elapsed().as_secs_f64())
            })
            .collect();
        let idx = |name: &str| classes.iter().position(|c| c == name).unwrap();
        BenchRun {
            reports,
            pair: (idx("raise_open"), idx("raise_fist")),
            repeating: idx("circle"),
            classes,
        }
    })
}

fn report(run: &BenchRun, v: Variant) -> (&TrialReport, f64) {
    let (r, t) = run.reports.iter().find(|(r, _)| r.variant == v).unwrap();
    (r, *t)
}

fn criterion_5() -> Option<Outcome> {
    let run = bench();
    let (cnn, t_cnn) = report(run, Variant::Cnnlstm);
    let (snap, t_snap) = report(run, Variant::Snapture);
    let (a, b) = run.pair;
    let pair = |r: &TrialReport| r.mean_confusion[a][b] + r.mean_confusion[b][a];
    let gain = snap.mean.accuracy - cnn.mean.accuracy;
    let (pc, ps) = (pair(cnn), pair(snap));
    let secs = t_cnn + t_snap;
    Some(check(
        gain >= 0.10 && ps <= 0.7 * pc && pc > 0.0 && secs < 1200.0,
        format!(
            "{} classes x {} seqs, {BENCH_TRIALS} trials: accuracy cnnlstm {:.3} ({:.3}), snapture {:.3} ({:.3}), gain {gain:.3}; \
             {}/{} confusion {pc:.2} -> {ps:.2}; {secs:.0} s",
            run.classes.len(),
            SynthConfig::benchmark(BENCH_SEED).per_class,
            cnn.mean.accuracy,
            cnn.std.accuracy,
            snap.mean.accuracy,
            snap.std.accuracy,
            run.classes[a],
            run.classes[b],
        ),
    ))
}

fn criterion_6() -> Option<Outcome> {
    let run = bench();
    let (cnn, _) = report(run, Variant::Cnnlstm);
    let (snap, _) = report(run, Variant::Snapture);
    let (thold, t) = report(run, Variant::SnaptureThold);
    let c = run.repeating;
    let fp = |r: &TrialReport| (0..run.classes.len()).filter(|&i| i != c).map(|i| r.mean_confusion[i][c]).sum::<f64>();
    let (fc, ft) = (fp(cnn), fp(thold));
    Some(check(
        thold.mean.accuracy >= snap.mean.accuracy && ft <= 1.1 * fc + 1e-12,
        format!(
            "accuracy snapture_thold {:.3} vs snapture {:.3}; mean false positives on {}: snapture_thold {ft:.2}, cnnlstm {fc:.2}, snapture {:.2}; {t:.0} s",
            thold.mean.accuracy,
            snap.mean.accuracy,
            run.classes[c],
            fp(snap),
        ),
    ))
}

fn criterion_7() -> Option<Outcome> {
    let mut cfg = SynthConfig::benchmark(11);
    cfg.per_class = 6;
    let seqs_a = generate(&cfg).unwrap().sequences();
    let seqs_b = generate(&cfg).unwrap().sequences();
    let snapshots = |seqs: &[GestureSequence]| -> Vec<Vec<u8>> {
        seqs.iter()
            .map(|s| {
                let gate = snapture::motion_profile::GateDecision::always_on(0.0);
                match extract_snapshot(s, &Default::default(), &gate).unwrap() {
                    SnapshotOutcome::Extracted(x) => x.image.to_pnm(),
                    SnapshotOutcome::GatedOff => Vec::new(),
                }
            })
            .collect()
    };
    let snaps_ok = snapshots(&seqs_a) == snapshots(&seqs_b) && seqs_a == seqs_b;

    let prep = PrepConfig::with_input(16, 12);
    let samples = prepare_all(&seqs_a, &prep).unwrap();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let exp = Experiment {
        model: ModelConfig {
            input_width: 16,
            input_height: 12,
            cnn_ff: 16,
            hidden: 8,
            static_ff: 8,
            fusion: 8,
            ..ModelConfig::new(Variant::SnaptureThold, cfg.classes.len())
        },
        hyper: Hyperparams {
            lr: 0.003,
            epochs: 3,
            batch_size: 8,
            optimizer: OptimizerChoice::Adam,
            seed: 5,
        },
        protocol: Protocol::Holdout { test_frac: 0.3 },
        threshold: ThresholdPolicy::Calibrate(0.8),
        trials: 1,
    };
    let plan = trial_splits(&exp.protocol, &labels, 5).unwrap().remove(0);
    let (m1, loss1, _, e1) = run_split(&exp, &samples, &plan, 5).unwrap();
    let (_, loss2, _, e2) = run_split(&exp, &samples, &plan, 5).unwrap();
    let json = |m: &Metrics| serde_json::to_string(m).unwrap();
    let runs_ok = loss1 == loss2 && json(&e1.metrics) == json(&e2.metrics) && e1.predictions == e2.predictions;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    m1.save(&path, &prep).unwrap();
    let (loaded, prep_back) = SnaptureModel::<f32>::load(&path).unwrap();
    let test: Vec<&PreparedSample> = plan.test.iter().map(|&i| &samples[i]).collect();
    let e3 = evaluate(&loaded, &test).unwrap();
    let ckpt_ok = prep_back == prep && json(&e3.metrics) == json(&e1.metrics) && e3.predictions == e1.predictions;
    Some(check(
        snaps_ok && runs_ok && ckpt_ok,
        format!("bit-identical corpora/snapshots: {snaps_ok}; loss logs + metrics JSON: {runs_ok}; checkpoint round trip: {ckpt_ok}"),
    ))
}

/// F1 from the matrix via precision and recall, 0 where undefined.
fn f1_from_matrix(m: &[Vec<usize>], c: usize) -> f64 {
    let tp = m[c][c] as f64;
    let predicted: f64 = m.iter().map(|row| row[c] as f64).sum();
    let actual: f64 = m[c].iter().map(|&v| v as f64).sum();
    let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
    let recall = if actual > 0.0 { tp / actual } else { 0.0 };
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn criterion_8() -> Option<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..100 {
        let k = rng.gen_range(2..10);
        let n = rng.gen_range(1..200);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        // Mix of informed and random predictions.
        let pred: Vec<usize> = truth.iter().map(|&t| if rng.gen_bool(0.6) { t } else { rng.gen_range(0..k) }).collect();
        let reported = Metrics::from_labels(&truth, &pred, k).unwrap();
        let emitted: serde_json::Value = serde_json::to_value(&reported).unwrap();
        let m: Vec<Vec<usize>> = serde_json::from_value(emitted["confusion"].clone()).unwrap();
        let total: usize = m.iter().flatten().sum();
        ok &= total == n;
        let acc = (0..k).map(|i| m[i][i]).sum::<usize>() as f64 / total as f64;
        let f1: Vec<f64> = (0..k).map(|c| f1_from_matrix(&m, c)).collect();
        let macro_f1 = f1.iter().sum::<f64>() / k as f64;
        worst = worst.max((acc - emitted["accuracy"].as_f64().unwrap()).abs());
        worst = worst.max((macro_f1 - emitted["macro_f1"].as_f64().unwrap()).abs());
        for (c, v) in f1.iter().enumerate() {
            worst = worst.max((v - emitted["per_class_f1"][c].as_f64().unwrap()).abs());
        }
    }
    Some(check(ok && worst < 1e-9, format!("100 random prediction sets; max deviation {worst:.2e}")))
}

fn criterion_9() -> Option<Outcome> {
    let manifest = PathBuf::from(std::env::var_os("GRIT_MANIFEST")?);
    let run = || -> snapture::Result<String> {
        let m = load_manifest(&manifest)?;
        let seqs = (0..m.entries.len()).map(|i| m.load_sequence(i)).collect::<snapture::Result<Vec<_>>>()?;
        let prep = PrepConfig::default();
        let samples = prepare_all(&seqs, &prep)?;
        let mut acc = Vec::new();
        for v in Variant::ALL {
            let exp = Experiment {
                model: ModelConfig::new(v, m.classes.len()),
                hyper: Hyperparams::default(),
                protocol: Protocol::KFold { k: 3 },
                threshold: ThresholdPolicy::Calibrate(0.44),
                trials: 5,
            };
            acc.push(run_trials_with(&exp, &samples, &m.classes, |_, _| {})?.mean.accuracy);
        }
        let ordered = acc[2] >= acc[1] && acc[1] >= acc[0];
        let close = (acc[0] - 0.91).abs() <= 0.03;
        let detail = format!("accuracy cnnlstm {:.3}, snapture {:.3}, snapture_thold {:.3}", acc[0], acc[1], acc[2]);
        if ordered && close {
            Ok(detail)
        } else {
            Err(snapture::Error::Config(detail))
        }
    };
    Some(run().map_err(|e| e.to_string()))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "SSIM oracle equivalence", limit: Some(Duration::from_secs(10)), run: criterion_1 },
        Criterion { id: 2, name: "differential-image properties", limit: Some(Duration::from_secs(5)), run: criterion_2 },
        Criterion { id: 3, name: "gradient check (snapture_thold)", limit: Some(Duration::from_secs(120)), run: criterion_3 },
        Criterion { id: 4, name: "gate semantics", limit: None, run: criterion_4 },
        Criterion { id: 5, name: "indistinctive pair: snapture vs cnnlstm", limit: Some(Duration::from_secs(1200)), run: criterion_5 },
        Criterion { id: 6, name: "blur/gating: snapture_thold", limit: None, run: criterion_6 },
        Criterion { id: 7, name: "determinism and persistence", limit: None, run: criterion_7 },
        Criterion { id: 8, name: "metrics correctness", limit: None, run: criterion_8 },
        Criterion { id: 9, name: "GRIT reproduction (optional)", limit: None, run: criterion_9 },
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (mut passed, mut failed, mut skipped) = (0, 0, 0);
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let over = c.limit.is_some_and(|l| elapsed > l);
        let secs = elapsed.as_secs_f64();
        match outcome {
            None => {
                skipped += 1;
                println!("SKIPPED [{}] {}: GRIT_MANIFEST not set", c.id, c.name);
            }
            Some(Ok(detail)) if !over => {
                passed += 1;
                println!("PASS    [{}] {}: {detail} ({secs:.1} s)", c.id, c.name);
            }
            Some(Ok(detail)) => {
                failed += 1;
                println!("FAIL    [{}] {}: {detail}; exceeded time limit ({secs:.1} s)", c.id, c.name);
            }
            Some(Err(detail)) => {
                failed += 1;
                println!("FAIL    [{}] {}: {detail} ({secs:.1} s)", c.id, c.name);
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
