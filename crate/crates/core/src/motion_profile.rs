//! ISSIM motion profiles, the thirds split and the static-channel gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ensure_gray, issim, Frame, SsimParams};
use crate::sequence::GestureSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub sequence_id: String,
    /// `values[i]` is the ISSIM of frame `i` against frame 0.
    pub values: Vec<f64>,
    /// Start indices of the second and third parts.
    pub boundaries: (usize, usize),
    pub part_means: [f64; 3],
}

impl MotionProfile {
    /// Builds a profile from precomputed values; needs at least 3.
    pub fn from_values(sequence_id: &str, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        if n < 3 {
            return Err(Error::SequenceTooShort { len: n, min: 3 });
        }
        let (b1, b2) = thirds(n);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Ok(Self {
            sequence_id: sequence_id.to_string(),
            part_means: [mean(&values[..b1]), mean(&values[b1..b2]), mean(&values[b2..])],
            boundaries: (b1, b2),
            values,
        })
    }

    pub fn middle_mean(&self) -> f64 {
        self.part_means[1]
    }

    /// Part (0, 1 or 2) containing frame `index`.
    pub fn part_of(&self, index: usize) -> usize {
        if index < self.boundaries.0 {
            0
        } else if index < self.boundaries.1 {
            1
        } else {
            2
        }
    }
}

/// `(floor(n/3), floor(2n/3))`; the remainder falls into the last part.
pub fn thirds(n: usize) -> (usize, usize) {
    (n / 3, 2 * n / 3)
}

pub fn compute_profile(sequence: &GestureSequence, p: &SsimParams) -> Result<MotionProfile> {
    profile_frames(&sequence.id, &sequence.frames, p)
}

/// Profile of raw frames; colour frames are converted to grayscale first.
pub fn profile_frames(sequence_id: &str, frames: &[Frame], p: &SsimParams) -> Result<MotionProfile> {
    if frames.len() < 3 {
        return Err(Error::SequenceTooShort {
            len: frames.len(),
            min: 3,
        });
    }
    let gray = frames.iter().map(ensure_gray).collect::<Result<Vec<_>>>()?;
    let values = gray
        .iter()
        .map(|f| issim(f, &gray[0], p))
        .collect::<Result<Vec<_>>>()?;
    MotionProfile::from_values(sequence_id, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsClass {
    Paused,
    RepeatingPattern,
}

impl DynamicsClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Paused => "paused",
            Self::RepeatingPattern => "repeating_pattern",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub middle_mean: f64,
    pub threshold: f64,
    pub snapshot_enabled: bool,
    pub dynamics_class: DynamicsClass,
}

impl GateDecision {
    /// Gate that is on regardless of motion.
    pub fn always_on(middle_mean: f64) -> Self {
        Self {
            middle_mean,
            threshold: f64::INFINITY,
            snapshot_enabled: true,
            dynamics_class: DynamicsClass::Paused,
        }
    }
}

/// Enables the snapshot iff the middle-part mean lies strictly below
/// `threshold`. A NaN threshold never enables.
pub fn static_gate(profile: &MotionProfile, threshold: f64) -> GateDecision {
    gate_from_mean(profile.middle_mean(), threshold)
}

pub fn gate_from_mean(middle_mean: f64, threshold: f64) -> GateDecision {
    let enabled = middle_mean < threshold;
    GateDecision {
        middle_mean,
        threshold,
        snapshot_enabled: enabled,
        dynamics_class: if enabled {
            DynamicsClass::Paused
        } else {
            DynamicsClass::RepeatingPattern
        },
    }
}

/// Linear-interpolation quantile (`h = (n - 1) p`) of the middle-part means.
pub fn calibrate_threshold(profiles: &[MotionProfile], target_enabled_frac: f64) -> Result<f64> {
    let means: Vec<f64> = profiles.iter().map(MotionProfile::middle_mean).collect();
    quantile(&means, target_enabled_frac)
}

pub fn quantile(values: &[f64], frac: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::InvalidParams(format!(
            "enabled fraction must lie in (0, 1), got {frac}"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidParams("NaN motion value".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * frac;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}
