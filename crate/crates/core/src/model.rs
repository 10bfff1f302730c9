//! CNN-LSTM dynamic channel, snapshot static channel and fusion classifier.
//!
//! Parameters are registered from one seeded ChaCha8 stream in a fixed
//! order: dynamic CNN, dynamic feed-forward, LSTM, then (if present) the
//! static CNN and feed-forward, then the head. Variants built from the same
//! seed therefore share their dynamic-channel weights exactly.
//!
//! Convolutions carry no bias: the batch normalization that follows
//! subtracts any per-channel constant, and its shift plays the bias role.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use snapture_nn::graph::{softmax_rows, BatchStats};
use snapture_nn::init::xavier_uniform_with;
use snapture_nn::lstm::Lstm;
use snapture_nn::{checkpoint, Graph, Mode, Padding, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::motion_profile::gate_from_mean;
use crate::pipeline::{prepare, PrepConfig, PreparedSample};
use crate::{Error, GestureSequence, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cnnlstm,
    Snapture,
    SnaptureThold,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cnnlstm, Variant::Snapture, Variant::SnaptureThold];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Cnnlstm => "cnnlstm",
            Variant::Snapture => "snapture",
            Variant::SnaptureThold => "snapture_thold",
        }
    }

    pub fn has_static(&self) -> bool {
        *self != Variant::Cnnlstm
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cnnlstm" => Ok(Variant::Cnnlstm),
            "snapture" => Ok(Variant::Snapture),
            "snapture_thold" => Ok(Variant::SnaptureThold),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub classes: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub conv: [ConvSpec; 2],
    pub cnn_ff: usize,
    pub lstm_layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Width of the static channel's feed-forward feature.
    pub static_ff: usize,
    pub fusion: usize,
    /// Gate threshold on the middle-part ISSIM mean (snapture_thold only).
    pub threshold: Option<f64>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Snapture,
            classes: 2,
            input_width: 64,
            input_height: 48,
            conv: [
                ConvSpec { filters: 5, kernel: 11 },
                ConvSpec { filters: 10, kernel: 6 },
            ],
            cnn_ff: 256,
            lstm_layers: 2,
            hidden: 64,
            dropout: 0.2,
            static_ff: 256,
            fusion: 128,
            threshold: None,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, classes: usize) -> Self {
        Self {
            variant,
            classes,
            ..Self::default()
        }
    }

    /// `(channels, height, width)` of the flattened CNN output.
    pub fn feature_map(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for spec in &self.conv {
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "input {}x{} too small for two conv/pool stages",
                    self.input_width, self.input_height
                )));
            }
            (h, w) = (h / 2, w / 2);
            if spec.filters == 0 || spec.kernel == 0 {
                return Err(Error::Config("conv filters and kernel must be nonzero".into()));
            }
        }
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {}x{} too small for two conv/pool stages",
                self.input_width, self.input_height
            )));
        }
        Ok((self.conv[1].filters, h, w))
    }

    pub fn flat_features(&self) -> Result<usize> {
        let (c, h, w) = self.feature_map()?;
        Ok(c * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.classes < 2 {
            return bad("class count must be at least 2");
        }
        if self.cnn_ff == 0 || self.hidden == 0 || self.lstm_layers == 0 || self.fusion == 0 || self.static_ff == 0 {
            return bad("layer widths and LSTM depth must be nonzero");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("batch-norm momentum must lie in [0, 1] and eps be positive");
        }
        if self.variant == Variant::SnaptureThold && !self.threshold.is_some_and(f64::is_finite) {
            return bad("snapture_thold requires a finite gate threshold");
        }
        self.feature_map().map(|_| ())
    }

    /// Whether the static channel sees this sample's snapshot.
    pub fn gate(&self, middle_mean: f64) -> bool {
        match self.variant {
            Variant::Cnnlstm => false,
            Variant::Snapture => true,
            Variant::SnaptureThold => {
                gate_from_mean(middle_mean, self.threshold.unwrap_or(f64::NAN)).snapshot_enabled
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    /// Whether the static channel contributed.
    pub gate: bool,
    /// The static channel ran on an all-zero snapshot because no hand was found.
    pub snapshot_fallback: bool,
}

impl Prediction {
    fn from_probs(probs: Vec<f64>, gate: bool, snapshot_fallback: bool) -> Self {
        let label = argmax(&probs);
        Self {
            probs,
            label,
            gate,
            snapshot_fallback,
        }
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone)]
struct ConvBlock {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    kernel: usize,
}

#[derive(Debug, Clone)]
struct Cnn {
    blocks: [ConvBlock; 2],
    ff_w: ParamId,
    ff_b: ParamId,
}

#[derive(Debug, Clone)]
struct Head {
    fc_w: ParamId,
    fc_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Batch statistics to fold into the running estimates after a train step.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    mean_id: ParamId,
    var_id: ParamId,
    stats: BatchStats,
}

/// One sample as seen by the batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    /// `[T, 1, H, W]`.
    pub diffs: &'a Tensor<f32>,
    /// `[1, H, W]`; ignored when the gate is off.
    pub snapshot: &'a Tensor<f32>,
    pub gate: bool,
}

pub struct Forward {
    pub logits: Var,
    pub dynamic: Var,
    pub static_feature: Option<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone)]
pub struct SnaptureModel<T> {
    config: ModelConfig,
    seed: u64,
    store: ParamStore<T>,
    dynamic: Cnn,
    lstm: Lstm,
    static_cnn: Option<Cnn>,
    head: Head,
}

fn zeros_init<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

impl<T: Scalar> SnaptureModel<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let flat = config.flat_features()?;
        let dynamic = register_cnn(&mut store, "dynamic", &config, config.cnn_ff, flat, &mut rng)?;
        let lstm = Lstm::register(&mut store, "dynamic.lstm", config.cnn_ff, config.hidden, config.lstm_layers, &mut rng)?;
        let static_cnn = if config.variant.has_static() {
            Some(register_cnn(&mut store, "static", &config, config.static_ff, flat, &mut rng)?)
        } else {
            None
        };
        let fused = config.hidden + if static_cnn.is_some() { config.static_ff } else { 0 };
        let head = Head {
            fc_w: store.add("head.fc.w", xavier_uniform_with(&[config.fusion, fused], fused, config.fusion, &mut rng)?, true)?,
            fc_b: store.add("head.fc.b", zeros_init(&[config.fusion]), true)?,
            out_w: store.add(
                "head.out.w",
                xavier_uniform_with(&[config.classes, config.fusion], config.fusion, config.classes, &mut rng)?,
                true,
            )?,
            out_b: store.add("head.out.b", zeros_init(&[config.classes]), true)?,
        };
        Ok(Self {
            config,
            seed,
            store,
            dynamic,
            lstm,
            static_cnn,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Changes the gate threshold without touching any weights.
    pub fn set_threshold(&mut self, threshold: Option<f64>) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.threshold = threshold;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// Same architecture and weights with a different scalar type.
    pub fn cast<U: Scalar>(&self) -> SnaptureModel<U> {
        SnaptureModel {
            config: self.config.clone(),
            seed: self.seed,
            store: self.store.cast(),
            dynamic: self.dynamic.clone(),
            lstm: self.lstm.clone(),
            static_cnn: self.static_cnn.clone(),
            head: self.head.clone(),
        }
    }

    fn input(&self, g: &mut Graph<T>, images: &[&[f32]]) -> Result<Var> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.len() != h * w {
                return Err(Error::DimensionMismatch(format!(
                    "model input expects {w}x{h} images, got {} values",
                    img.len()
                )));
            }
            data.extend(img.iter().map(|&v| T::from_f64(f64::from(v))));
        }
        Ok(g.constant(Tensor::new(vec![images.len(), 1, h, w], data)?))
    }

    /// conv -> bn -> tanh -> pool twice, flatten, feed-forward, tanh: `[N, ff]`.
    fn cnn_forward(&self, g: &mut Graph<T>, cnn: &Cnn, x: Var, mode: Mode, updates: &mut Vec<BnUpdate>) -> Result<Var> {
        let mut x = x;
        for block in &cnn.blocks {
            let w = g.param(&self.store, block.w);
            x = g.conv2d(x, w, None, Padding::same(block.kernel, block.kernel))?;
            let gamma = g.param(&self.store, block.gamma);
            let beta = g.param(&self.store, block.beta);
            x = match mode {
                Mode::Train => {
                    let (y, stats) = g.batchnorm_train(x, gamma, beta, self.config.bn_eps)?;
                    updates.push(BnUpdate {
                        mean_id: block.running_mean,
                        var_id: block.running_var,
                        stats,
                    });
                    y
                }
                Mode::Eval => {
                    let mean = self.store.get(block.running_mean).data().to_vec();
                    let var = self.store.get(block.running_var).data().to_vec();
                    g.batchnorm_eval(x, gamma, beta, &mean, &var, self.config.bn_eps)?
                }
            };
            x = g.tanh(x);
            x = g.maxpool2(x)?;
        }
        let n = g.value(x).shape()[0];
        let flat = self.config.flat_features()?;
        x = g.reshape(x, &[n, flat])?;
        let w = g.param(&self.store, cnn.ff_w);
        let b = g.param(&self.store, cnn.ff_b);
        let y = g.linear(x, w, Some(b))?;
        Ok(g.tanh(y))
    }

    /// Batched forward pass. Frames of all sequences are packed into one CNN
    /// batch; the LSTM reads each sequence's state at its last valid step.
    pub fn forward<R: Rng>(&self, g: &mut Graph<T>, batch: &[SampleRef<'_>], mode: Mode, rng: &mut R) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::DimensionMismatch("empty batch".into()));
        }
        let mut updates = Vec::new();
        let dynamic = self.dynamic_batch(g, batch, mode, &mut updates)?;
        let static_feature = match &self.static_cnn {
            Some(cnn) => Some(self.static_batch(g, cnn, batch, mode, &mut updates)?),
            None => None,
        };
        let logits = self.head_forward(g, dynamic, static_feature, mode, rng)?;
        Ok(Forward {
            logits,
            dynamic,
            static_feature,
            bn_updates: updates,
        })
    }

    fn dynamic_batch(&self, g: &mut Graph<T>, batch: &[SampleRef<'_>], mode: Mode, updates: &mut Vec<BnUpdate>) -> Result<Var> {
        let frame_len = self.config.input_height * self.config.input_width;
        let mut images: Vec<&[f32]> = Vec::new();
        let mut lengths = Vec::with_capacity(batch.len());
        for s in batch {
            let shape = s.diffs.shape();
            if shape.len() != 4 || shape[0] == 0 || shape[1] != 1 || shape[2] * shape[3] != frame_len {
                return Err(Error::DimensionMismatch(format!(
                    "diff sequence must be [T>=1, 1, {}, {}], got {shape:?}",
                    self.config.input_height, self.config.input_width
                )));
            }
            lengths.push(shape[0]);
            images.extend(s.diffs.data().chunks(frame_len));
        }
        let x = self.input(g, &images)?;
        let emb = self.cnn_forward(g, &self.dynamic, x, mode, updates)?;
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut acc = 0;
        for &l in &lengths {
            offsets.push(acc);
            acc += l;
        }
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let rows = lengths
                .iter()
                .zip(&offsets)
                .map(|(&l, &o)| (t < l).then_some(o + t))
                .collect();
            inputs.push(g.gather_rows(emb, rows)?);
        }
        Ok(self.lstm.forward(g, &self.store, &inputs, Some(&lengths))?.final_hidden)
    }

    /// Gated-off samples feed an all-zero snapshot and their feature rows are
    /// then multiplied by zero.
    fn static_batch(&self, g: &mut Graph<T>, cnn: &Cnn, batch: &[SampleRef<'_>], mode: Mode, updates: &mut Vec<BnUpdate>) -> Result<Var> {
        let zeros = vec![0.0f32; self.config.input_height * self.config.input_width];
        let images: Vec<&[f32]> = batch
            .iter()
            .map(|s| if s.gate { s.snapshot.data() } else { &zeros[..] })
            .collect();
        let x = self.input(g, &images)?;
        let feat = self.cnn_forward(g, cnn, x, mode, updates)?;
        let scale = batch.iter().map(|s| if s.gate { T::one() } else { T::zero() }).collect();
        Ok(g.scale_rows(feat, scale)?)
    }

    fn head_forward<R: Rng>(&self, g: &mut Graph<T>, dynamic: Var, static_feature: Option<Var>, mode: Mode, rng: &mut R) -> Result<Var> {
        let x = match static_feature {
            Some(s) => g.concat_cols(dynamic, s)?,
            None => dynamic,
        };
        let x = g.dropout(x, self.config.dropout, mode, rng)?;
        let w = g.param(&self.store, self.head.fc_w);
        let b = g.param(&self.store, self.head.fc_b);
        let x = g.linear(x, w, Some(b))?;
        let x = g.tanh(x);
        let w = g.param(&self.store, self.head.out_w);
        let b = g.param(&self.store, self.head.out_b);
        Ok(g.linear(x, w, Some(b))?)
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = self.config.bn_momentum;
        for u in updates {
            for (id, batch) in [(u.mean_id, &u.stats.mean), (u.var_id, &u.stats.var)] {
                for (r, &b) in self.store.get_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = T::from_f64((1.0 - m) * r.as_f64() + m * b);
                }
            }
        }
    }

    /// Final top-layer LSTM state for one diff sequence `[T, 1, H, W]`.
    pub fn dynamic_forward(&self, diffs: &Tensor<f32>, mode: Mode) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let dummy = Tensor::zeros(&[0]);
        let sample = SampleRef {
            diffs,
            snapshot: &dummy,
            gate: false,
        };
        let h = self.dynamic_batch(&mut g, &[sample], mode, &mut Vec::new())?;
        Ok(g.value(h).data().to_vec())
    }

    /// Static feature for one snapshot `[1, H, W]`; all zeros when gated off.
    /// A single snapshot has no batch statistics, so train mode is rejected.
    pub fn static_forward(&self, snapshot: &Tensor<f32>, gate: bool, mode: Mode) -> Result<Vec<T>> {
        let cnn = self
            .static_cnn
            .as_ref()
            .ok_or_else(|| Error::Config("cnnlstm has no static channel".into()))?;
        let (h, w) = (self.config.input_height, self.config.input_width);
        if snapshot.shape() != [1, h, w] {
            return Err(Error::DimensionMismatch(format!(
                "snapshot must be [1, {h}, {w}], got {:?}",
                snapshot.shape()
            )));
        }
        if !gate {
            return Ok(vec![T::zero(); self.config.static_ff]);
        }
        let mut g = Graph::new();
        let x = self.input(&mut g, &[snapshot.data()])?;
        let f = self.cnn_forward(&mut g, cnn, x, mode, &mut Vec::new())?;
        Ok(g.value(f).data().to_vec())
    }

    /// Eval-mode head on one sample's channel outputs. `static_feature` is
    /// required exactly when the variant has a static channel.
    pub fn fuse_and_classify(&self, dynamic: &[T], static_feature: Option<&[T]>) -> Result<Prediction> {
        if dynamic.len() != self.config.hidden {
            return Err(Error::DimensionMismatch(format!(
                "dynamic hidden has {} values, expected {}",
                dynamic.len(),
                self.config.hidden
            )));
        }
        let mut g = Graph::new();
        let d = g.constant(Tensor::new(vec![1, dynamic.len()], dynamic.to_vec())?);
        let s = match (self.static_cnn.is_some(), static_feature) {
            (true, Some(s)) if s.len() == self.config.static_ff => Some(g.constant(Tensor::new(vec![1, s.len()], s.to_vec())?)),
            (false, None) => None,
            _ => {
                return Err(Error::DimensionMismatch(format!(
                    "{} expects {} static feature",
                    self.config.variant,
                    if self.static_cnn.is_some() { format!("a {}-wide", self.config.static_ff) } else { "no".into() }
                )))
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.head_forward(&mut g, d, s, Mode::Eval, &mut rng)?;
        let probs = softmax_rows(g.value(logits))?;
        let gate = static_feature.is_some_and(|s| s.iter().any(|v| *v != T::zero()));
        Ok(Prediction::from_probs(probs.data().iter().map(|v| v.as_f64()).collect(), gate, false))
    }

    /// Eval-mode predictions for prepared samples, in input order.
    pub fn predict_prepared(&self, samples: &[&PreparedSample]) -> Result<Vec<Prediction>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(samples.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in samples.chunks(CHUNK) {
            let refs: Vec<SampleRef<'_>> = chunk.iter().map(|s| self.sample_ref(s)).collect();
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, &refs, Mode::Eval, &mut rng)?;
            let probs = softmax_rows(g.value(fwd.logits))?;
            let k = self.config.classes;
            for (i, (s, r)) in chunk.iter().zip(&refs).enumerate() {
                let p = probs.data()[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect();
                out.push(Prediction::from_probs(p, r.gate, r.gate && !s.hand_found));
            }
        }
        Ok(out)
    }

    pub fn sample_ref<'a>(&self, s: &'a PreparedSample) -> SampleRef<'a> {
        SampleRef {
            diffs: &s.diffs,
            snapshot: &s.snapshot,
            gate: self.config.gate(s.middle_mean),
        }
    }

    /// End-to-end eval-mode prediction for one raw sequence.
    pub fn predict(&self, sequence: &GestureSequence, prep: &PrepConfig) -> Result<Prediction> {
        if (prep.input_width, prep.input_height) != (self.config.input_width, self.config.input_height) {
            return Err(Error::Config("preprocessing size differs from model input size".into()));
        }
        let sample = prepare(sequence, prep)?;
        Ok(self.predict_prepared(&[&sample])?.remove(0))
    }
}

fn register_cnn<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    ff: usize,
    flat: usize,
    rng: &mut R,
) -> Result<Cnn> {
    let mut in_ch = 1;
    let mut blocks = Vec::with_capacity(2);
    for (i, spec) in cfg.conv.iter().enumerate() {
        let (f, k) = (spec.filters, spec.kernel);
        let p = format!("{prefix}.conv{}", i + 1);
        blocks.push(ConvBlock {
            w: store.add(
                &format!("{p}.w"),
                xavier_uniform_with(&[f, in_ch, k, k], in_ch * k * k, f * k * k, rng)?,
                true,
            )?,
            gamma: store.add(&format!("{p}.bn.gamma"), Tensor::full(&[f], T::one()), true)?,
            beta: store.add(&format!("{p}.bn.beta"), zeros_init(&[f]), true)?,
            running_mean: store.add(&format!("{p}.bn.running_mean"), zeros_init(&[f]), false)?,
            running_var: store.add(&format!("{p}.bn.running_var"), Tensor::full(&[f], T::one()), false)?,
            kernel: k,
        });
        in_ch = f;
    }
    let blocks: [ConvBlock; 2] = blocks.try_into().expect("two conv specs");
    Ok(Cnn {
        blocks,
        ff_w: store.add(&format!("{prefix}.ff.w"), xavier_uniform_with(&[ff, flat], flat, ff, rng)?, true)?,
        ff_b: store.add(&format!("{prefix}.ff.b"), zeros_init(&[ff]), true)?,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    seed: u64,
    prep: PrepConfig,
}

impl SnaptureModel<f32> {
    /// Writes weights plus the model and preprocessing configuration.
    pub fn save(&self, path: &Path, prep: &PrepConfig) -> Result<()> {
        let meta = serde_json::to_string(&CheckpointMeta {
            config: self.config.clone(),
            seed: self.seed,
            prep: prep.clone(),
        })?;
        let bytes = checkpoint::to_bytes(&self.store, &meta)?;
        crate::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<(Self, PrepConfig)> {
        let (store, meta) = checkpoint::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)?;
        let mut model = Self::build(meta.config, meta.seed)?;
        if store.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                store.len(),
                model.store.len()
            )));
        }
        for id in store.ids() {
            let name = store.name(id);
            let target = model
                .store
                .id(name)
                .ok_or_else(|| Error::Config(format!("checkpoint tensor {name} unknown to model")))?;
            let t = store.get(id);
            if t.shape() != model.store.get(target).shape() {
                return Err(Error::Config(format!("checkpoint tensor {name} has shape {:?}", t.shape())));
            }
            *model.store.get_mut(target) = t.clone();
        }
        Ok((model, meta.prep))
    }
}
