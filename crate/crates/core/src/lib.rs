//! Hybrid static/dynamic hand-gesture recognition.
//!
//! The dynamic channel classifies differential-image sequences with a
//! CNN followed by a stateless LSTM. The static channel classifies a single
//! hand snapshot taken at the gesture peak, and a motion-profile gate
//! decides per sample whether the snapshot is trustworthy.

use std::io::Write;
use std::path::Path;

pub mod data;
mod error;
pub mod imaging;
pub mod model;
pub mod motion_profile;
pub mod pipeline;
mod sequence;
pub mod snapshot;
pub mod synth;
pub mod train_eval;

pub use error::{Error, Result};
pub use sequence::GestureSequence;

/// Writes `bytes` to a temporary file beside `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
