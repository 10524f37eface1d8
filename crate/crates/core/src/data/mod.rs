//! Synthetic two-domain video corpus, its binary file format, frame
//! shuffling, paired mini-batches and PPM frame dumps.

mod batch;
mod ppm;
mod render;

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;

pub use batch::{epoch_plan, shuffle_frames, LabelField, SequenceBatch, StepIndices};
pub use ppm::{read_ppm, write_ppm, Image};
pub use render::{
    palette, render_frame, GlyphSpec, MotionSpec, Shape, BACKGROUND, CLASSES, IMAGE_DIM, SIDE,
};

const MAGIC: &[u8; 5] = b"TSVD1";
const VERSION: u32 = 1;
pub const FEATURE_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Image,
    Feature,
}

impl Mode {
    fn code(self) -> u32 {
        match self {
            Mode::Image => 0,
            Mode::Feature => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Mode::Image),
            1 => Ok(Mode::Feature),
            _ => Err(Error::format("dataset", format!("unknown mode {code}"))),
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Mode::Image => IMAGE_DIM,
            Mode::Feature => FEATURE_DIM,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Mode::Image),
            "feature" => Ok(Mode::Feature),
            _ => Err(Error::invalid(
                "mode",
                format!("expected `image` or `feature`, got `{s}`"),
            )),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Image => "image",
            Mode::Feature => "feature",
        })
    }
}

/// A set of labelled sequences stored as one flat `[N, T, D]` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub mode: Mode,
    pub frames: usize,
    pub dim: usize,
    pub classes: usize,
    pub domains: Vec<u8>,
    pub labels: Vec<u8>,
    pub data: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.frames * self.dim
    }

    pub fn sequence(&self, i: usize) -> &[f32] {
        &self.data[i * self.seq_len()..(i + 1) * self.seq_len()]
    }

    /// Indices of the sequences of one domain, in file order.
    pub fn domain_indices(&self, domain: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.domains[i] as usize == domain)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 24 + self.len() * (2 + 4 * self.seq_len()));
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.mode.code(),
            self.len() as u32,
            self.frames as u32,
            self.dim as u32,
            self.classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            out.push(self.domains[i]);
            out.push(self.labels[i]);
            for v in self.sequence(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 29 || &bytes[..5] != MAGIC {
            return Err(Error::format("dataset", "missing TSVD1 header"));
        }
        let word =
            |k: usize| u32::from_le_bytes(bytes[5 + 4 * k..9 + 4 * k].try_into().unwrap()) as usize;
        if word(0) != VERSION as usize {
            return Err(Error::format(
                "dataset",
                format!("unsupported version {}", word(0)),
            ));
        }
        let mode = Mode::from_code(word(1) as u32)?;
        let (n, frames, dim, classes) = (word(2), word(3), word(4), word(5));
        let record = 2 + 4 * frames * dim;
        let expected = n.checked_mul(record).and_then(|b| b.checked_add(29));
        if expected != Some(bytes.len()) {
            return Err(Error::format(
                "dataset",
                format!(
                    "{} bytes on disk, header describes {n} x {frames} x {dim}",
                    bytes.len()
                ),
            ));
        }
        let mut ds = Dataset {
            mode,
            frames,
            dim,
            classes,
            domains: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            data: Vec::with_capacity(n * frames * dim),
        };
        for rec in bytes[29..].chunks_exact(record) {
            ds.domains.push(rec[0]);
            ds.labels.push(rec[1]);
            ds.data.extend(
                rec[2..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
            );
        }
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.domains.iter().any(|&d| d > 1) {
            return Err(Error::format("dataset", "domain id above 1"));
        }
        if self.labels.iter().any(|&y| y as usize >= self.classes) {
            return Err(Error::format("dataset", "class label out of range"));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("dataset", "non-finite frame value"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Corpus generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub per_class: usize,
    pub frames: usize,
    pub mode: Mode,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            per_class: 100,
            frames: 8,
            mode: Mode::Image,
        }
    }
}

fn render_sequence(glyph: &GlyphSpec, motion: &MotionSpec, frames: usize) -> Vec<f32> {
    (0..frames)
        .flat_map(|t| render_frame(glyph, motion, t, frames))
        .collect()
}

/// Seeded domain-specific `IMAGE_DIM x FEATURE_DIM` projection.
fn projection(seed: u64, domain: usize) -> Vec<f32> {
    let mut rng = seed::stream(seed, &[0x7072_6f6a, domain as u64]);
    let scale = 1.0 / (IMAGE_DIM as f64).sqrt();
    (0..IMAGE_DIM * FEATURE_DIM)
        .map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

fn project(ds: &mut Dataset, seed: u64) {
    let maps = [projection(seed, 0), projection(seed, 1)];
    let mut out = Vec::with_capacity(ds.len() * ds.frames * FEATURE_DIM);
    for i in 0..ds.len() {
        let p = &maps[ds.domains[i] as usize];
        for frame in ds.sequence(i).chunks_exact(IMAGE_DIM) {
            for k in 0..FEATURE_DIM {
                out.push(
                    frame
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| v * p[j * FEATURE_DIM + k])
                        .sum(),
                );
            }
        }
    }
    ds.data = out;
    ds.dim = FEATURE_DIM;
    ds.mode = Mode::Feature;
}

/// Per-dimension `(mean, std)` over every frame of `ds`.
pub fn frame_stats(ds: &Dataset) -> Vec<(f64, f64)> {
    let mut sum = vec![0.0f64; ds.dim];
    let mut sq = vec![0.0f64; ds.dim];
    let count = (ds.len() * ds.frames) as f64;
    for frame in ds.data.chunks_exact(ds.dim) {
        for (k, &v) in frame.iter().enumerate() {
            sum[k] += v as f64;
            sq[k] += (v as f64) * (v as f64);
        }
    }
    sum.iter()
        .zip(&sq)
        .map(|(s, q)| {
            let mean = s / count;
            (mean, (q / count - mean * mean).max(0.0).sqrt())
        })
        .collect()
}

fn standardize(ds: &mut Dataset, stats: &[(f64, f64)]) {
    for frame in ds.data.chunks_exact_mut(ds.dim) {
        for (v, &(mean, std)) in frame.iter_mut().zip(stats) {
            *v = ((*v as f64 - mean) / std.max(1e-8)) as f32;
        }
    }
}

/// Balanced train/test corpora with an 80/20 split inside every
/// `(domain, class)` cell.
pub fn generate(cfg: &GenConfig) -> Result<(Dataset, Dataset)> {
    if cfg.per_class < 2 {
        return Err(Error::invalid(
            "generate",
            format!("need at least 2 sequences per class, got {}", cfg.per_class),
        ));
    }
    if cfg.frames < 2 {
        return Err(Error::invalid(
            "generate",
            format!("need at least 2 frames, got {}", cfg.frames),
        ));
    }
    let n_train = ((cfg.per_class * 4) as f64 / 5.0).round() as usize;
    let n_train = n_train.clamp(1, cfg.per_class - 1);
    let empty = || Dataset {
        mode: Mode::Image,
        frames: cfg.frames,
        dim: IMAGE_DIM,
        classes: CLASSES,
        domains: Vec::new(),
        labels: Vec::new(),
        data: Vec::new(),
    };
    let (mut train, mut test) = (empty(), empty());
    for domain in 0..2 {
        for class in 0..CLASSES {
            for k in 0..cfg.per_class {
                let mut rng = seed::stream(cfg.seed, &[domain as u64, class as u64, k as u64]);
                let glyph = GlyphSpec {
                    domain,
                    shape: rng.random_range(0..3),
                    colour: rng.random_range(0..3),
                };
                let motion = MotionSpec {
                    class,
                    phase: rng.random_range(0.0..2.0 * std::f64::consts::PI),
                };
                let split = if k < n_train { &mut train } else { &mut test };
                split.domains.push(domain as u8);
                split.labels.push(class as u8);
                split
                    .data
                    .extend(render_sequence(&glyph, &motion, cfg.frames));
            }
        }
    }
    if cfg.mode == Mode::Feature {
        project(&mut train, cfg.seed);
        project(&mut test, cfg.seed);
        let stats = frame_stats(&train);
        standardize(&mut train, &stats);
        standardize(&mut test, &stats);
    }
    Ok((train, test))
}
