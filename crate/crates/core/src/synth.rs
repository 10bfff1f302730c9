//! Synthetic gesture corpora: a seated subject whose skin-coloured hand
//! moves over a textured backdrop.
//!
//! Paused classes raise the hand, hold it, and unfold their hand shape
//! only on frozen frames with at least two frozen generic-hand frames on
//! either side, so the shape never reaches a differential image. The
//! body sways with hand velocity and moving frames are exposure-blurred,
//! which keeps the held middle of a paused gesture quiet relative to its
//! motion phases.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ManifestEntry;
use crate::error::{Error, Result};
use crate::imaging::Frame;
use crate::motion_profile::DynamicsClass;
use crate::sequence::GestureSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandShape {
    /// Generic hand used while moving.
    Blob,
    Open,
    Fist,
    Point,
    Vee,
    Flat,
    Thumb,
}

/// Hand path in frame coordinates `(x, y)`; all paths start and end at
/// the subject's resting position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MotionPath {
    /// Raise to `target`, hold, return.
    Hold { target: (f64, f64) },
    /// Circle continuously around `center`.
    Circle {
        center: (f64, f64),
        radius: f64,
        turns: f64,
        clockwise: bool,
    },
    /// Oscillate around `center` with per-axis amplitude.
    Wave {
        center: (f64, f64),
        amplitude: (f64, f64),
        cycles: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub path: MotionPath,
    pub shape: HandShape,
    /// Average several sub-frame positions over each exposure.
    pub motion_blur: bool,
}

impl ClassSpec {
    pub fn dynamics(&self) -> DynamicsClass {
        match self.path {
            MotionPath::Hold { .. } => DynamicsClass::Paused,
            _ => DynamicsClass::RepeatingPattern,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: Vec<ClassSpec>,
    pub per_class: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub subjects: usize,
    /// Uniform per-pixel sensor noise amplitude.
    pub noise: u8,
    pub exposure_samples: usize,
    pub seed: u64,
}

/// Rest position of the gesturing hand on the 64x48 canvas.
const REST: (f64, f64) = (50.0, 41.0);
const LEAN_GAIN: f64 = 0.6;
const BASE_W: f64 = 64.0;
const BASE_H: f64 = 48.0;

fn hold(name: &str, target: (f64, f64), shape: HandShape) -> ClassSpec {
    ClassSpec {
        name: name.into(),
        path: MotionPath::Hold { target },
        shape,
        motion_blur: true,
    }
}

fn moving(name: &str, path: MotionPath, shape: HandShape) -> ClassSpec {
    ClassSpec {
        name: name.into(),
        path,
        shape,
        motion_blur: true,
    }
}

impl SynthConfig {
    /// Five classes: an identical-motion pair differing only in hand shape,
    /// two held gestures at other targets, and a blurred circling gesture.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            classes: vec![
                hold("raise_open", (32.0, 24.0), HandShape::Open),
                hold("raise_fist", (32.0, 24.0), HandShape::Fist),
                hold("point_left", (13.0, 25.0), HandShape::Point),
                hold("stop_right", (55.0, 20.0), HandShape::Flat),
                moving(
                    "circle",
                    MotionPath::Circle {
                        center: (40.0, 26.0),
                        radius: 8.0,
                        turns: 2.0,
                        clockwise: true,
                    },
                    HandShape::Open,
                ),
            ],
            per_class: 40,
            frames: 20,
            width: 64,
            height: 48,
            subjects: 8,
            noise: 1,
            exposure_samples: 8,
            seed,
        }
    }

    /// Four held and five repeating classes (4/9 of samples paused).
    pub fn grit_like(seed: u64) -> Self {
        let circle = |center, clockwise| MotionPath::Circle {
            center,
            radius: 8.0,
            turns: 2.0,
            clockwise,
        };
        let wave = |amplitude, cycles| MotionPath::Wave {
            center: (34.0, 25.0),
            amplitude,
            cycles,
        };
        Self {
            classes: vec![
                hold("stop", (32.0, 24.0), HandShape::Flat),
                hold("point", (14.0, 25.0), HandShape::Point),
                hold("agree", (22.0, 21.0), HandShape::Thumb),
                hold("victory", (38.0, 19.0), HandShape::Vee),
                moving("turn_cw", circle((36.0, 26.0), true), HandShape::Point),
                moving("turn_ccw", circle((28.0, 26.0), false), HandShape::Point),
                moving("wave", wave((10.0, 0.0), 2.5), HandShape::Open),
                moving("nod", wave((0.0, 9.0), 2.5), HandShape::Fist),
                moving("beckon", wave((7.0, 6.0), 3.0), HandShape::Open),
            ],
            per_class: 10,
            ..Self::benchmark(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "benchmark" => Ok(Self::benchmark(seed)),
            "grit_like" | "grit-like" => Ok(Self::grit_like(seed)),
            _ => Err(Error::Config(format!(
                "unknown preset '{name}' (expected benchmark or grit_like)"
            ))),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let mut names: Vec<_> = self.class_names();
        names.sort();
        names.dedup();
        if names.len() != self.classes.len() {
            return Err(Error::Config("class names must be unique".into()));
        }
        if self.per_class == 0 || self.subjects == 0 || self.exposure_samples == 0 {
            return Err(Error::Config(
                "per_class, subjects and exposure_samples must be >= 1".into(),
            ));
        }
        if self.width < 16 || self.height < 12 {
            return Err(Error::Config("frames must be at least 16x12".into()));
        }
        let (start, end) = shape_frames(self.frames).ok_or_else(|| {
            Error::Config(format!(
                "{} frames leave no room for a held hand shape at the peak",
                self.frames
            ))
        })?;
        debug_assert!(start <= self.frames / 2 && self.frames / 2 <= end);
        for c in &self.classes {
            let ok = match c.path {
                MotionPath::Hold { target } => finite2(target),
                MotionPath::Circle {
                    center,
                    radius,
                    turns,
                    ..
                } => finite2(center) && radius > 0.0 && turns > 0.0,
                MotionPath::Wave {
                    center,
                    amplitude,
                    cycles,
                } => finite2(center) && finite2(amplitude) && cycles > 0.0,
            };
            if !ok {
                return Err(Error::Config(format!("invalid path for class '{}'", c.name)));
            }
        }
        Ok(())
    }
}

fn finite2(p: (f64, f64)) -> bool {
    p.0.is_finite() && p.1.is_finite()
}

/// Arrival and departure times of a held gesture.
fn hold_window(frames: usize) -> (usize, usize) {
    let arrive = frames * 3 / 10;
    (arrive, frames - 1 - arrive)
}

/// Inclusive frame range that shows the class hand shape, or `None` when
/// the sequence is too short to keep it out of the differential images.
pub fn shape_frames(frames: usize) -> Option<(usize, usize)> {
    if frames < 10 {
        return None;
    }
    let (arrive, depart) = hold_window(frames);
    let (start, end) = (arrive + 3, depart.checked_sub(2)?);
    let peak = frames / 2;
    (end > start && start <= peak && peak <= end).then_some((start, end))
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn lerp(a: (f64, f64), b: (f64, f64), u: f64) -> (f64, f64) {
    (a.0 + (b.0 - a.0) * u, a.1 + (b.1 - a.1) * u)
}

/// Per-sample geometric variation.
#[derive(Debug, Clone, Copy)]
struct Jitter {
    target: (f64, f64),
    rest: (f64, f64),
    phase: f64,
    size: f64,
}

/// Hand position at time `t` (frames, continuous) on the 64x48 canvas.
fn hand_position(path: &MotionPath, frames: usize, t: f64, j: &Jitter) -> (f64, f64) {
    let rest = (REST.0 + j.rest.0, REST.1 + j.rest.1);
    let last = (frames - 1) as f64;
    match *path {
        MotionPath::Hold { target } => {
            let target = (target.0 + j.target.0, target.1 + j.target.1);
            let (arrive, depart) = hold_window(frames);
            let (a, d) = (arrive as f64, depart as f64);
            if t <= a {
                lerp(rest, target, smoothstep(t / a))
            } else if t <= d {
                target
            } else {
                lerp(target, rest, smoothstep((t - d) / (last - d)))
            }
        }
        MotionPath::Circle {
            center,
            radius,
            turns,
            clockwise,
        } => {
            let center = (center.0 + j.target.0, center.1 + j.target.1);
            let r = radius * j.size;
            let sign = if clockwise { 1.0 } else { -1.0 };
            let on = |s: f64| {
                let ang = j.phase + sign * 2.0 * std::f64::consts::PI * turns * s;
                (center.0 + r * ang.cos(), center.1 + r * ang.sin())
            };
            cyclic(rest, on, frames, t)
        }
        MotionPath::Wave {
            center,
            amplitude,
            cycles,
        } => {
            let center = (center.0 + j.target.0, center.1 + j.target.1);
            let on = |s: f64| {
                let v = (j.phase + 2.0 * std::f64::consts::PI * cycles * s).sin();
                (center.0 + amplitude.0 * v * j.size, center.1 + amplitude.1 * v * j.size)
            };
            cyclic(rest, on, frames, t)
        }
    }
}

/// Enter the cycle from rest, run it, and return to rest.
fn cyclic(rest: (f64, f64), on: impl Fn(f64) -> (f64, f64), frames: usize, t: f64) -> (f64, f64) {
    let last = (frames - 1) as f64;
    let ramp = (last * 0.15).max(1.0);
    let span = last - 2.0 * ramp;
    if t <= ramp {
        lerp(rest, on(0.0), smoothstep(t / ramp))
    } else if t <= last - ramp {
        on((t - ramp) / span)
    } else {
        lerp(on(1.0), rest, smoothstep((t - last + ramp) / ramp))
    }
}

/// Rectangle or ellipse in hand-local units (one unit ~ one pixel at
/// scale 1), centred on the hand position.
#[derive(Debug, Clone, Copy)]
enum Primitive {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Primitive {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Primitive::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Primitive::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

fn shape_primitives(shape: HandShape) -> Vec<Primitive> {
    use Primitive::*;
    let palm = Ellipse {
        cx: 0.0,
        cy: 1.0,
        rx: 4.5,
        ry: 4.5,
    };
    let finger = |x: f64, top: f64| Rect {
        x0: x - 0.9,
        y0: top,
        x1: x + 0.9,
        y1: 0.0,
    };
    match shape {
        HandShape::Blob => vec![Ellipse {
            cx: 0.0,
            cy: 0.0,
            rx: 4.5,
            ry: 5.5,
        }],
        HandShape::Fist => vec![Rect {
            x0: -4.0,
            y0: -3.5,
            x1: 4.0,
            y1: 4.5,
        }],
        HandShape::Open => vec![
            palm,
            finger(-3.3, -8.0),
            finger(-1.1, -9.5),
            finger(1.1, -9.5),
            finger(3.3, -8.0),
            Rect {
                x0: 3.5,
                y0: 0.0,
                x1: 7.5,
                y1: 1.8,
            },
        ],
        HandShape::Point => vec![palm, finger(-1.5, -10.0)],
        HandShape::Vee => vec![
            palm,
            Rect {
                x0: -4.5,
                y0: -9.0,
                x1: -2.7,
                y1: 0.0,
            },
            Rect {
                x0: 2.7,
                y0: -9.0,
                x1: 4.5,
                y1: 0.0,
            },
        ],
        HandShape::Flat => vec![Rect {
            x0: -7.5,
            y0: -2.0,
            x1: 7.5,
            y1: 2.5,
        }],
        HandShape::Thumb => vec![
            palm,
            Rect {
                x0: -0.9,
                y0: -9.0,
                x1: 0.9,
                y1: 0.0,
            },
            Rect {
                x0: -1.0,
                y0: -9.0,
                x1: 1.0,
                y1: -7.0,
            },
        ],
    }
}

/// Appearance shared by all recordings of one subject.
#[derive(Debug, Clone, Copy)]
struct Subject {
    skin: [f64; 3],
    shirt: [f64; 3],
    body_x: f64,
}

const SHIRTS: [[f64; 3]; 4] = [[60.0, 60.0, 70.0], [30.0, 40.0, 90.0], [40.0, 90.0, 50.0], [110.0, 110.0, 120.0]];

fn subject(seed: u64, index: usize) -> Subject {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05AB_1EC7 ^ ((index as u64) << 32));
    Subject {
        skin: {
            let k = rng.gen_range(0.85..1.1);
            [
                k * 190.0 + rng.gen_range(-6.0..6.0),
                k * 125.0 + rng.gen_range(-6.0..6.0),
                k * 105.0 + rng.gen_range(-6.0..6.0),
            ]
        },
        shirt: SHIRTS[rng.gen_range(0..SHIRTS.len())],
        body_x: rng.gen_range(-2.0..2.0),
    }
}

/// One recording's scene and geometry.
struct Scene {
    subject: Subject,
    jitter: Jitter,
    backdrop: [f64; 3],
    texture: (f64, f64, f64),
}

/// One generated sequence with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub sequence: GestureSequence,
    pub class_name: String,
    pub dynamics: DynamicsClass,
    /// Hand centre at each frame's capture instant, in 64x48 coordinates.
    pub trajectory: Vec<(f64, f64)>,
}

pub struct SynthCorpus {
    pub class_names: Vec<String>,
    pub samples: Vec<SynthSample>,
}

impl SynthCorpus {
    pub fn sequences(&self) -> Vec<GestureSequence> {
        self.samples.iter().map(|s| s.sequence.clone()).collect()
    }
}

/// Renders the corpus. Sample `i` of every class shares its scene and
/// jitter, so classes with identical paths have identical trajectories.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.classes.len() * cfg.per_class);
    for (label, class) in cfg.classes.iter().enumerate() {
        for i in 0..cfg.per_class {
            samples.push(render_sample(cfg, label, class, i));
        }
    }
    Ok(SynthCorpus {
        class_names: cfg.class_names(),
        samples,
    })
}

fn render_sample(cfg: &SynthConfig, label: usize, class: &ClassSpec, i: usize) -> SynthSample {
    let subject_index = i % cfg.subjects;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
    let scene = Scene {
        subject: subject(cfg.seed, subject_index),
        jitter: Jitter {
            target: (rng.gen_range(-2.5..2.5), rng.gen_range(-2.0..2.0)),
            rest: (rng.gen_range(-1.5..1.5), rng.gen_range(-1.0..1.0)),
            phase: rng.gen_range(-0.5..0.5),
            size: rng.gen_range(0.9..1.1),
        },
        backdrop: {
            let shade = rng.gen_range(-15.0..15.0);
            [50.0 + shade, 85.0 + shade, 125.0 + shade]
        },
        texture: (
            rng.gen_range(0.25..0.6),
            rng.gen_range(0.25..0.6),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ),
    };
    let noise_seed: u64 = rng.gen();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);

    let n = cfg.frames;
    let shown = shape_frames(n).expect("validated frame count");
    let hand_size = scene.jitter.size;
    let mut frames = Vec::with_capacity(n);
    let mut trajectory = Vec::with_capacity(n);
    for t in 0..n {
        let shape = match class.path {
            MotionPath::Hold { .. } if (shown.0..=shown.1).contains(&t) => class.shape,
            MotionPath::Hold { .. } => HandShape::Blob,
            _ => class.shape,
        };
        let samples = if class.motion_blur { cfg.exposure_samples } else { 1 };
        let mut acc = vec![0.0f64; cfg.width * cfg.height * 3];
        for k in 0..samples {
            // Exposure spans (t - 1, t]; the last sub-sample is the capture instant.
            let ts = t as f64 - 1.0 + (k + 1) as f64 / samples as f64;
            let ts = ts.max(0.0);
            let pos = hand_position(&class.path, n, ts, &scene.jitter);
            let vel = {
                let h = 1e-3;
                let a = hand_position(&class.path, n, (ts - h).max(0.0), &scene.jitter);
                let b = hand_position(&class.path, n, (ts + h).min((n - 1) as f64), &scene.jitter);
                let dt = (ts + h).min((n - 1) as f64) - (ts - h).max(0.0);
                ((b.0 - a.0) / dt, (b.1 - a.1) / dt)
            };
            render_into(&mut acc, cfg, &scene, pos, vel, shape, hand_size);
        }
        trajectory.push(hand_position(&class.path, n, t as f64, &scene.jitter));
        let amp = cfg.noise as i32;
        let data = acc
            .iter()
            .map(|&v| {
                let noise = if amp > 0 { noise_rng.gen_range(-amp..=amp) } else { 0 };
                (v / samples as f64 + noise as f64).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        frames.push(Frame::new(cfg.width, cfg.height, 3, data).expect("configured frame size"));
    }

    SynthSample {
        sequence: GestureSequence {
            id: format!("{}_{i:03}", class.name),
            frames,
            label,
            subject: format!("s{subject_index}"),
            face_bbox: None,
        },
        class_name: class.name.clone(),
        dynamics: class.dynamics(),
        trajectory,
    }
}

/// Adds one instantaneous rendering of the scene to `acc`.
fn render_into(
    acc: &mut [f64],
    cfg: &SynthConfig,
    scene: &Scene,
    hand: (f64, f64),
    hand_velocity: (f64, f64),
    shape: HandShape,
    hand_size: f64,
) {
    let (sx, sy) = (BASE_W / cfg.width as f64, BASE_H / cfg.height as f64);
    // The body leans with the moving hand, by up to 5 px per axis.
    let lean = |v: f64| (LEAN_GAIN * v).clamp(-5.0, 5.0);
    let body = (scene.subject.body_x + lean(hand_velocity.0), lean(hand_velocity.1));
    let hand_prims = shape_primitives(shape);
    let (fx, fy, phase) = scene.texture;
    let skin = scene.subject.skin;
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            // Canvas coordinates of the pixel centre.
            let (x, y) = ((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy);
            let (bx, by) = (x - body.0, y - body.1);
            let hx = (x - hand.0) / hand_size;
            let hy = (y - hand.1) / hand_size;
            let color = if hand_prims.iter().any(|p| p.contains(hx, hy)) {
                skin
            } else if ellipse(bx, by, 32.0, 7.5, 5.5, 6.5) || ellipse(bx, by, 13.0, 41.0, 4.5, 4.0) {
                // Face, and the resting hand on the lap.
                skin
            } else if (bx - 32.0).abs() <= 4.0 + (by - 14.0).max(0.0) * 1.6 && by >= 14.0 && by <= 50.0 {
                scene.subject.shirt
            } else {
                let tex = 18.0 * (fx * x + phase).sin() * (fy * y - phase).cos();
                [scene.backdrop[0] + tex, scene.backdrop[1] + tex, scene.backdrop[2] + tex]
            };
            let i = (r * cfg.width + c) * 3;
            acc[i] += color[0];
            acc[i + 1] += color[1];
            acc[i + 2] += color[2];
        }
    }
}

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    dx * dx + dy * dy <= 1.0
}

/// Writes each sequence as a directory of numbered PNG frames plus a
/// `manifest.jsonl` (class header line, then one entry per sequence).
/// Returns the manifest path.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = tempfile::NamedTempFile::new_in(dir)?;
    writeln!(out, "{}", serde_json::json!({ "classes": corpus.class_names }))?;
    for s in &corpus.samples {
        let seq_dir = dir.join(&s.sequence.id);
        fs::create_dir_all(&seq_dir)?;
        for (t, f) in s.sequence.frames.iter().enumerate() {
            f.save_png(&seq_dir.join(format!("{t:04}.png")))?;
        }
        let entry = ManifestEntry {
            path: s.sequence.id.clone().into(),
            label: s.class_name.clone(),
            subject: s.sequence.subject.clone(),
            start: None,
            end: None,
            face_bbox: None,
        };
        writeln!(out, "{}", serde_json::to_string(&entry)?)?;
    }
    out.persist(&manifest).map_err(|e| Error::Io(e.error))?;
    Ok(manifest)
}
