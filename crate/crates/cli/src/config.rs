//! Run configuration: an optional TOML file overlaid by command-line flags.
//!
//! Precedence, highest first: flag, config file, built-in default. Relative
//! paths in the file resolve against the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;
use snapture::imaging::SsimParams;
use snapture::model::Variant;
use snapture::train_eval::{Hyperparams, OptimizerChoice, Protocol, ThresholdPolicy};

/// Default fraction of sequences whose snapshot the calibrated gate enables.
pub const DEFAULT_CALIBRATE_FRAC: f64 = 0.44;
pub const DEFAULT_FOLDS: usize = 3;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML file supplying defaults for any of these flags
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// JSON-lines dataset manifest
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// cnnlstm, snapture or snapture-thold
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Fixed gate threshold on the middle-part ISSIM mean
    #[arg(long, global = true, conflicts_with = "calibrate_frac")]
    pub threshold: Option<f64>,
    /// Calibrate the gate so this fraction of (training) sequences is enabled
    #[arg(long, global = true)]
    pub calibrate_frac: Option<f64>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// adam or sgd
    #[arg(long, global = true)]
    pub optimizer: Option<OptimizerChoice>,
    /// k-fold cross-validation
    #[arg(long, global = true, conflicts_with = "test_frac")]
    pub folds: Option<usize>,
    /// Stratified hold-out split with this test fraction
    #[arg(long, global = true)]
    pub test_frac: Option<f64>,
    /// Independent trials for `report`
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Model input width
    #[arg(long, global = true)]
    pub width: Option<usize>,
    /// Model input height
    #[arg(long, global = true)]
    pub height: Option<usize>,
    /// Exit nonzero when any sequence fails
    #[arg(long, global = true)]
    pub strict: bool,
}

/// Config file contents; every key mirrors a flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    variant: Option<Variant>,
    threshold: Option<f64>,
    calibrate_frac: Option<f64>,
    lr: Option<f64>,
    epochs: Option<usize>,
    batch: Option<usize>,
    optimizer: Option<OptimizerChoice>,
    folds: Option<usize>,
    test_frac: Option<f64>,
    trials: Option<usize>,
    width: Option<usize>,
    height: Option<usize>,
    strict: Option<bool>,
    ssim: Option<SsimParams>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// `None` when neither flag nor file names one.
    pub variant: Option<Variant>,
    pub threshold: ThresholdPolicy,
    pub hyper: Hyperparams,
    pub protocol: Protocol,
    pub trials: Option<usize>,
    pub width: usize,
    pub height: usize,
    pub ssim: SsimParams,
    pub strict: bool,
}

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let mut file: FileConfig =
                    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
                let base = path.parent().unwrap_or(Path::new(""));
                file.manifest = file.manifest.map(|p| base.join(p));
                file.out = file.out.map(|p| base.join(p));
                file
            }
            None => FileConfig::default(),
        };

        // A flag for either member of an exclusive pair hides the file's
        // value for the other member.
        let threshold = match (args.threshold, args.calibrate_frac) {
            (Some(t), _) => ThresholdPolicy::Fixed(t),
            (None, Some(f)) => ThresholdPolicy::Calibrate(f),
            (None, None) => match (file.threshold, file.calibrate_frac) {
                (Some(_), Some(_)) => bail!("config sets both threshold and calibrate_frac"),
                (Some(t), None) => ThresholdPolicy::Fixed(t),
                (None, f) => ThresholdPolicy::Calibrate(f.unwrap_or(DEFAULT_CALIBRATE_FRAC)),
            },
        };
        match threshold {
            ThresholdPolicy::Fixed(t) if t.is_nan() => bail!("threshold must not be NaN"),
            ThresholdPolicy::Calibrate(f) if !(f > 0.0 && f < 1.0) => {
                bail!("calibrate-frac must lie in (0, 1), got {f}")
            }
            _ => {}
        }
        let protocol = match (args.folds, args.test_frac) {
            (Some(k), _) => Protocol::KFold { k },
            (None, Some(f)) => Protocol::Holdout { test_frac: f },
            (None, None) => match (file.folds, file.test_frac) {
                (Some(_), Some(_)) => bail!("config sets both folds and test_frac"),
                (None, Some(f)) => Protocol::Holdout { test_frac: f },
                (k, None) => Protocol::KFold {
                    k: k.unwrap_or(DEFAULT_FOLDS),
                },
            },
        };

        let defaults = Hyperparams::default();
        let seed = args.seed.or(file.seed);
        let hyper = Hyperparams {
            lr: args.lr.or(file.lr).unwrap_or(defaults.lr),
            epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
            batch_size: args.batch.or(file.batch).unwrap_or(defaults.batch_size),
            optimizer: args.optimizer.or(file.optimizer).unwrap_or(defaults.optimizer),
            seed: seed.unwrap_or(defaults.seed),
        };
        hyper.validate()?;

        let cfg = Self {
            manifest: args.manifest.clone().or(file.manifest),
            out: args.out.clone().or(file.out),
            seed,
            variant: args.variant.or(file.variant),
            threshold,
            hyper,
            protocol,
            trials: args.trials.or(file.trials),
            width: args.width.or(file.width).unwrap_or(64),
            height: args.height.or(file.height).unwrap_or(48),
            ssim: file.ssim.unwrap_or_default(),
            strict: args.strict || file.strict.unwrap_or(false),
        };
        cfg.ssim.validate()?;
        if let Some(m) = &cfg.manifest {
            if !m.is_file() {
                bail!("manifest {} does not exist", m.display());
            }
        }
        Ok(cfg)
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.manifest.as_deref().context("--manifest is required")
    }

    pub fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required")
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.context("--seed is required")
    }
}
