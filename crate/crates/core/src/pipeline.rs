//! Per-sequence preprocessing shared by training, evaluation and prediction.
//!
//! A sequence of `n` frames becomes `n - 2` differential-image masks for the
//! dynamic channel, one ISSIM motion profile for the gate, and one snapshot
//! for the static channel. The snapshot is always extracted with the gate
//! forced on; whether a model consumes it is decided later from the stored
//! middle-part mean, so one preparation serves every variant and threshold.

use serde::{Deserialize, Serialize};
use snapture_nn::Tensor;

use crate::imaging::{differential_image, ensure_gray, resize_bilinear, Frame, SsimParams};
use crate::motion_profile::{compute_profile, GateDecision};
use crate::snapshot::{extract_snapshot, ExtractionConfig, SnapshotOutcome};
use crate::{Error, GestureSequence, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    pub ssim: SsimParams,
    pub diff_threshold: u8,
    /// Model input size; diff masks and snapshots are resampled to it.
    pub input_width: usize,
    pub input_height: usize,
    pub extraction: ExtractionConfig,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self::with_input(64, 48)
    }
}

impl PrepConfig {
    /// Defaults with the snapshot crop sized to the model input.
    pub fn with_input(width: usize, height: usize) -> Self {
        Self {
            ssim: SsimParams::default(),
            diff_threshold: 25,
            input_width: width,
            input_height: height,
            extraction: ExtractionConfig {
                out_width: width,
                out_height: height,
                ..ExtractionConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ssim.validate()?;
        self.extraction.validate()?;
        if self.input_width == 0 || self.input_height == 0 {
            return Err(Error::Config("model input size must be nonzero".into()));
        }
        Ok(())
    }
}

/// Model-ready tensors for one sequence, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub label: usize,
    /// `[n - 2, 1, H, W]` differential-image masks.
    pub diffs: Tensor<f32>,
    /// `[1, H, W]` grayscale hand crop; all zeros when no hand was found.
    pub snapshot: Tensor<f32>,
    pub middle_mean: f64,
    pub hand_found: bool,
}

impl PreparedSample {
    pub fn steps(&self) -> usize {
        self.diffs.shape()[0]
    }
}

fn scaled(frame: &Frame, w: usize, h: usize) -> Result<Vec<f32>> {
    let frame = if (frame.width(), frame.height()) == (w, h) {
        frame.clone()
    } else {
        resize_bilinear(frame, w, h)?
    };
    Ok(frame.data().iter().map(|&v| f32::from(v) / 255.0).collect())
}

/// Differential-image masks of frames `1..n-1`, resampled to the model
/// input: `[n - 2, 1, H, W]`.
pub fn diff_tensor(frames: &[Frame], cfg: &PrepConfig) -> Result<Tensor<f32>> {
    let n = frames.len();
    if n < 3 {
        return Err(Error::SequenceTooShort { len: n, min: 3 });
    }
    let (w, h) = (cfg.input_width, cfg.input_height);
    let gray = frames.iter().map(ensure_gray).collect::<Result<Vec<_>>>()?;
    let mut diffs = Vec::with_capacity((n - 2) * w * h);
    for t in 1..n - 1 {
        let mask = differential_image(&gray[t - 1], &gray[t], &gray[t + 1], cfg.diff_threshold)?;
        diffs.extend(scaled(&mask.to_frame(), w, h)?);
    }
    Ok(Tensor::new(vec![n - 2, 1, h, w], diffs)?)
}

pub fn prepare(sequence: &GestureSequence, cfg: &PrepConfig) -> Result<PreparedSample> {
    cfg.validate()?;
    let n = sequence.len();
    if n < 3 {
        return Err(Error::SequenceTooShort { len: n, min: 3 });
    }
    let (w, h) = (cfg.input_width, cfg.input_height);
    let diffs = diff_tensor(&sequence.frames, cfg)?;
    let profile = compute_profile(sequence, &cfg.ssim)?;
    let middle_mean = profile.middle_mean();
    let (snapshot, hand_found) =
        match extract_snapshot(sequence, &cfg.extraction, &GateDecision::always_on(middle_mean)) {
            Ok(SnapshotOutcome::Extracted(s)) => (scaled(&s.image, w, h)?, true),
            Ok(SnapshotOutcome::GatedOff) => unreachable!("gate forced on"),
            Err(Error::NoHandDetected) => (vec![0.0; w * h], false),
            Err(e) => return Err(e),
        };
    Ok(PreparedSample {
        id: sequence.id.clone(),
        label: sequence.label,
        diffs,
        snapshot: Tensor::new(vec![1, h, w], snapshot)?,
        middle_mean,
        hand_found,
    })
}

pub fn prepare_all(sequences: &[GestureSequence], cfg: &PrepConfig) -> Result<Vec<PreparedSample>> {
    sequences.iter().map(|s| prepare(s, cfg)).collect()
}
