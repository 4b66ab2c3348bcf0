//! Synthetic micro-motion clips standing in for the licensed databases.
//!
//! Each subject has its own smooth random texture. Each class moves that
//! texture with its own motion template, ramping linearly from zero at the
//! onset frame to a peak at the apex frame and back to zero at the last frame.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_manifest, Database, Sample};
use crate::error::{Error, Result};
use crate::flow::GrayFrame;
use crate::io_util;

/// Raw labels written for synthetic classes, in class order.
pub const SYNTH_LABELS: [&str; 4] = ["Negative", "Positive", "Surprise", "Others"];

const WAVES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub clips_per_subject: usize,
    pub n_classes: usize,
    pub frame_size: usize,
    pub frames_per_clip: usize,
    pub noise_sigma: f64,
    /// Peak displacement in pixels at the apex frame.
    pub peak_motion: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 8,
            clips_per_subject: 15,
            n_classes: 3,
            frame_size: 64,
            frames_per_clip: 12,
            noise_sigma: 0.02,
            peak_motion: 1.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.n_subjects == 0 || self.clips_per_subject == 0 {
            return bad("subject and clip counts must be positive".into());
        }
        if !(1..=4).contains(&self.n_classes) {
            return bad(format!("n_classes must lie in 1..=4, got {}", self.n_classes));
        }
        if self.frame_size < crate::flow::MIN_FLOW_SIZE {
            return bad(format!("frame_size must be at least {}", crate::flow::MIN_FLOW_SIZE));
        }
        if self.frames_per_clip < 3 {
            return bad("frames_per_clip must be at least 3".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a non-negative number".into());
        }
        if !(self.peak_motion > 0.0 && self.peak_motion.is_finite()) {
            return bad("peak_motion must be positive".into());
        }
        Ok(())
    }
}

/// One generated clip held in memory.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub clip_id: String,
    pub subject_id: String,
    pub class: usize,
    pub apex: usize,
    /// Displacement at the apex frame, in pixels.
    pub magnitude: f64,
    pub frames: Vec<GrayFrame>,
}

/// Ground truth written next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub clip_id: String,
    pub class: usize,
    pub apex: usize,
}

struct Texture {
    waves: [(f64, f64, f64, f64); WAVES],
    norm: f64,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut waves = [(0.0, 0.0, 0.0, 0.0); WAVES];
        for w in &mut waves {
            let wavelength = rng.random_range(8.0..24.0);
            let angle = rng.random_range(0.0..PI);
            let k = 2.0 * PI / wavelength;
            *w = (
                k * angle.cos(),
                k * angle.sin(),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.5..1.0),
            );
        }
        let norm = waves.iter().map(|w| w.3).sum();
        Texture { waves, norm }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin())
            .sum();
        0.5 + 0.6 * s / self.norm
    }
}

/// Unit-magnitude displacement of motion template `class` at pixel `(x, y)`.
pub fn motion_template(class: usize, size: usize, x: f64, y: f64) -> (f64, f64) {
    let c = (size as f64 - 1.0) / 2.0;
    let radius = size as f64 / 2.0;
    match class {
        0 if y > c => (1.0, 0.0),
        1 if y < c => (0.0, -1.0),
        2 => {
            let (dx, dy) = (x - c, y - c);
            if dx.hypot(dy) < radius {
                (dx / radius, dy / radius)
            } else {
                (0.0, 0.0)
            }
        }
        3 => (-(size as f64 - 1.0 - y) / (size as f64 - 1.0), 0.0),
        _ => (0.0, 0.0),
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Generates all clips of `spec` in memory, deterministically from its seed.
pub fn synthesize(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise =
        Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let (n, f) = (spec.frame_size, spec.frames_per_clip);
    let apex_lo = f.div_ceil(3).max(1);
    let apex_hi = (2 * f / 3).clamp(apex_lo, f - 2);
    let mut clips = Vec::with_capacity(spec.n_subjects * spec.clips_per_subject);
    for s in 0..spec.n_subjects {
        let texture = Texture::random(&mut rng);
        for j in 0..spec.clips_per_subject {
            let class = (s * spec.clips_per_subject + j) % spec.n_classes;
            let apex = rng.random_range(apex_lo..=apex_hi);
            let magnitude = spec.peak_motion * rng.random_range(0.75..1.0);
            let mut frames = Vec::with_capacity(f);
            for t in 0..f {
                let m = if t <= apex {
                    magnitude * t as f64 / apex as f64
                } else {
                    magnitude * (f - 1 - t) as f64 / (f - 1 - apex) as f64
                };
                let mut px = Vec::with_capacity(n * n);
                for y in 0..n {
                    for x in 0..n {
                        let (x, y) = (x as f64, y as f64);
                        let (dx, dy) = motion_template(class, n, x, y);
                        let mut v = texture.at(x - m * dx, y - m * dy);
                        if spec.noise_sigma > 0.0 {
                            v += noise.sample(&mut rng);
                        }
                        px.push(quantize(v));
                    }
                }
                frames.push(GrayFrame::new(n, n, px)?);
            }
            clips.push(SynthClip {
                clip_id: format!("s{s:02}_c{j:02}"),
                subject_id: format!("s{s:02}"),
                class,
                apex,
                magnitude,
                frames,
            });
        }
    }
    Ok(clips)
}

/// Writes the clips of `spec` under `out_dir` as PNG frames plus
/// `manifest.jsonl` (apex left unannotated) and `truth.jsonl`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<Sample>> {
    let clips = synthesize(spec)?;
    let mut samples = Vec::with_capacity(clips.len());
    let mut truth = String::new();
    for clip in &clips {
        let dir = out_dir.join("frames").join(&clip.clip_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut paths: Vec<PathBuf> = Vec::with_capacity(clip.frames.len());
        for (t, frame) in clip.frames.iter().enumerate() {
            let path = dir.join(format!("{t:03}.png"));
            frame.save_png(&path)?;
            paths.push(path);
        }
        samples.push(Sample {
            clip_id: clip.clip_id.clone(),
            subject_id: clip.subject_id.clone(),
            database: Database::Synth,
            frame_paths: paths,
            onset_index: 0,
            apex_index: None,
            raw_label: SYNTH_LABELS[clip.class].to_string(),
        });
        let rec = SynthTruth {
            clip_id: clip.clip_id.clone(),
            class: clip.class,
            apex: clip.apex,
        };
        truth.push_str(&serde_json::to_string(&rec)?);
        truth.push('\n');
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &samples)?;
    io_util::write_atomic(&out_dir.join("truth.jsonl"), truth.as_bytes())?;
    Ok(samples)
}

pub fn read_truth(path: &Path) -> Result<Vec<SynthTruth>> {
    let text = String::from_utf8_lossy(&io_util::read(path)?).into_owned();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
