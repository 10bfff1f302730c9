//! Peak-frame hand snapshot: face blanking, skin masking, optional
//! foreground filtering, blob selection and crop/resize.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    background_foreground, connected_components, crop_resize, morph, rgb_to_ycbcr, skin_mask, to_grayscale, BBox,
    BinaryMask, Blob, Frame, MorphOp, SkinRanges,
};
use crate::motion_profile::GateDecision;
use crate::sequence::GestureSequence;

/// Fallback face region used when a sequence has no face annotation: the
/// top `rows_frac` of the frame, across the central `cols_frac` of columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBand {
    pub rows_frac: f64,
    pub cols_frac: f64,
}

impl Default for FaceBand {
    fn default() -> Self {
        Self {
            rows_frac: 0.3,
            cols_frac: 0.5,
        }
    }
}

impl FaceBand {
    /// Region of a `width x height` frame, or `None` when it is empty.
    pub fn region(&self, width: usize, height: usize) -> Option<BBox> {
        let rows = (self.rows_frac * height as f64).round() as usize;
        let cols = (self.cols_frac * width as f64).round() as usize;
        if rows == 0 || cols == 0 {
            return None;
        }
        let min_col = (width - cols.min(width)) / 2;
        Some(BBox {
            min_row: 0,
            min_col,
            max_row: rows.min(height) - 1,
            max_col: min_col + cols.min(width) - 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub skin: SkinRanges,
    /// Prefer the per-sequence face annotation over the band heuristic.
    pub use_face_annotation: bool,
    pub face_band: FaceBand,
    pub background_removal: bool,
    pub bg_frames: usize,
    pub fg_threshold: u8,
    /// Opening radius applied to the skin mask; `None` disables it.
    pub morphology_radius: Option<usize>,
    pub margin: f64,
    pub out_width: usize,
    pub out_height: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            skin: SkinRanges::default(),
            use_face_annotation: true,
            face_band: FaceBand::default(),
            background_removal: false,
            bg_frames: 3,
            fg_threshold: 25,
            morphology_radius: None,
            margin: 0.2,
            out_width: 64,
            out_height: 48,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        let (cb, cr) = (self.skin.cb, self.skin.cr);
        if cb.0 > cb.1 || cr.0 > cr.1 {
            return Err(Error::InvalidParams("skin ranges must be ordered".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidParams(format!("margin must be >= 0, got {}", self.margin)));
        }
        if self.out_width == 0 || self.out_height == 0 {
            return Err(Error::InvalidParams("snapshot size must be non-zero".into()));
        }
        let band = self.face_band;
        if !(0.0..=1.0).contains(&band.rows_frac) || !(0.0..=1.0).contains(&band.cols_frac) {
            return Err(Error::InvalidParams("face band fractions must lie in [0, 1]".into()));
        }
        if self.background_removal && self.bg_frames == 0 {
            return Err(Error::InvalidParams("bg_frames must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Grayscale crop of `out_width x out_height`.
    pub image: Frame,
    pub source_index: usize,
    pub blob: Blob,
    pub gated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SnapshotOutcome {
    Extracted(Snapshot),
    GatedOff,
}

/// Midpoint of the sequence, `floor(n / 2)`.
pub fn detect_peak(sequence: &GestureSequence) -> Result<usize> {
    peak_index(sequence.len())
}

pub fn peak_index(len: usize) -> Result<usize> {
    if len == 0 {
        return Err(Error::SequenceTooShort { len, min: 1 });
    }
    Ok(len / 2)
}

/// Fraction of blob pixels inside the foreground below which a blob is
/// treated as background.
pub const MIN_FOREGROUND_OVERLAP: f64 = 0.5;

/// Topmost surviving blob; ties go to the larger area, then the smaller
/// leftmost column.
pub fn select_hand_blob(blobs: &[Blob], foreground: Option<&BinaryMask>) -> Result<Blob> {
    blobs
        .iter()
        .filter(|b| match foreground {
            None => true,
            Some(fg) => {
                let inside = b.pixels.iter().filter(|&&(r, c)| fg.get(r, c)).count();
                inside as f64 >= MIN_FOREGROUND_OVERLAP * b.area as f64
            }
        })
        .min_by(|a, b| {
            a.top_row
                .cmp(&b.top_row)
                .then(b.area.cmp(&a.area))
                .then(a.bbox.min_col.cmp(&b.bbox.min_col))
        })
        .cloned()
        .ok_or(Error::NoHandDetected)
}

/// Runs the extraction pipeline on the peak frame when the gate is on.
/// Needs RGB frames, since skin detection works on chrominance.
pub fn extract_snapshot(
    sequence: &GestureSequence,
    cfg: &ExtractionConfig,
    gate: &GateDecision,
) -> Result<SnapshotOutcome> {
    if sequence.len() < 3 {
        return Err(Error::SequenceTooShort {
            len: sequence.len(),
            min: 3,
        });
    }
    if !gate.snapshot_enabled {
        return Ok(SnapshotOutcome::GatedOff);
    }
    cfg.validate()?;
    let peak = detect_peak(sequence)?;
    let frame = &sequence.frames[peak];
    let (w, h) = (frame.width(), frame.height());

    let face = match (cfg.use_face_annotation, sequence.face_bbox) {
        (true, Some(b)) => Some(b),
        _ => cfg.face_band.region(w, h),
    };
    let mut mask = skin_mask(&rgb_to_ycbcr(frame)?, &cfg.skin)?;
    if let Some(face) = face {
        for r in face.min_row..=face.max_row.min(h - 1) {
            for c in face.min_col..=face.max_col.min(w - 1) {
                mask.set(r, c, false);
            }
        }
    }
    if let Some(radius) = cfg.morphology_radius {
        mask = morph(&morph(&mask, MorphOp::Erode, radius), MorphOp::Dilate, radius);
    }

    let gray = to_grayscale(frame)?;
    let foreground = if cfg.background_removal {
        let grays = sequence.frames.iter().map(to_grayscale).collect::<Result<Vec<_>>>()?;
        Some(background_foreground(&grays, cfg.bg_frames, cfg.fg_threshold)?.swap_remove(peak))
    } else {
        None
    };
    let blob = select_hand_blob(&connected_components(&mask), foreground.as_ref())?;
    let image = crop_resize(&gray, &blob.bbox, cfg.margin, cfg.out_width, cfg.out_height)?;
    Ok(SnapshotOutcome::Extracted(Snapshot {
        image,
        source_index: peak,
        blob,
        gated: gate.snapshot_enabled,
    }))
}
