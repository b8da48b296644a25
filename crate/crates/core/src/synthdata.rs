//! Deterministic synthetic image benchmark and the `B + C x T` task split.
//!
//! Every class is a grating of oriented bars: a cosine profile across a
//! direction at a class-specific angle, with a class-specific spatial
//! frequency and phase offset. Angles avoid multiples of 45 degrees and the
//! phase set has no member whose negative is also a member, so neither a
//! quarter turn nor a half turn maps one class template onto another.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::{seeded_rng, Error, Result};

/// Bar orientations in degrees.
pub const ANGLES_DEG: [f64; 4] = [10.0, 32.0, 54.0, 76.0];
/// Bar frequencies in cycles per image side.
pub const FREQUENCIES: [f64; 3] = [1.0, 1.75, 2.5];
/// Phase offsets in radians.
pub const PHASES: [f64; 3] = [0.4, 1.2, 2.0];

/// Number of distinct class templates.
pub const CAPACITY: usize = ANGLES_DEG.len() * FREQUENCIES.len() * PHASES.len();

/// Square grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::dim("Image::new", format!("{} pixels for side {}", pixels.len(), side)));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("pixel {} outside [0, 1]", p)));
        }
        Ok(Self { side, pixels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.side + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Split {
    Train,
    Test,
}

/// Images with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub class_count: usize,
}

impl LabeledSet {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, split: Split, class_count: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::dim("LabeledSet::new", "images and labels differ in length"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label {
                label: bad,
                classes: class_count,
            });
        }
        if let Some(first) = images.first() {
            if images.iter().any(|i| i.side() != first.side()) {
                return Err(Error::dim("LabeledSet::new", "mixed image sizes"));
            }
        }
        Ok(Self {
            images,
            labels,
            split,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.first().map_or(0, |i| i.side())
    }

    /// Indices of samples whose label is in `classes`.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetConfig {
    pub class_count: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub side: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            class_count: 20,
            per_class_train: 100,
            per_class_test: 50,
            side: 8,
            noise_std: 0.3,
            seed: 0,
        }
    }
}

/// Pattern parameters of class `k`: angle index varies fastest so the first
/// classes spread over all orientations.
pub fn class_pattern(k: usize) -> (f64, f64, f64) {
    let a = k % ANGLES_DEG.len();
    let f = (k / ANGLES_DEG.len()) % FREQUENCIES.len();
    let p = k / (ANGLES_DEG.len() * FREQUENCIES.len());
    (ANGLES_DEG[a], FREQUENCIES[f], PHASES[p])
}

/// Noise-free template of class `k` at the given side length.
pub fn class_template(k: usize, side: usize) -> Image {
    let (angle, freq, phase) = class_pattern(k);
    let theta = angle * PI / 180.0;
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    let center = (side as f64 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(side * side);
    for r in 0..side {
        for col in 0..side {
            let x = col as f64 - center;
            let y = center - r as f64;
            let u = x * c + y * s;
            pixels.push(0.5 + 0.4 * libm::cos(2.0 * PI * freq * u / side as f64 + phase));
        }
    }
    Image { side, pixels }
}

/// Train and test sets, class-major, each image a template plus clamped
/// Gaussian pixel noise.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(LabeledSet, LabeledSet)> {
    if cfg.class_count < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {}", cfg.class_count)));
    }
    if cfg.per_class_train < 1 || cfg.per_class_test < 1 {
        return Err(Error::Argument("per-class counts must be at least 1".into()));
    }
    if cfg.side < 2 {
        return Err(Error::Argument(format!("side {} too small", cfg.side)));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::Argument(format!("noise std {} must be non-negative", cfg.noise_std)));
    }
    if cfg.class_count > CAPACITY {
        return Err(Error::Capacity {
            requested: cfg.class_count,
            available: CAPACITY,
        });
    }
    let templates: Vec<Image> = (0..cfg.class_count).map(|k| class_template(k, cfg.side)).collect();
    let make = |split: Split, per_class: usize, stream: u64| -> Result<LabeledSet> {
        let mut rng = seeded_rng(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream);
        let mut images = Vec::with_capacity(cfg.class_count * per_class);
        let mut labels = Vec::with_capacity(cfg.class_count * per_class);
        for (k, t) in templates.iter().enumerate() {
            for _ in 0..per_class {
                let pixels = t
                    .pixels
                    .iter()
                    .map(|&p| {
                        let noise: f64 = if cfg.noise_std > 0.0 {
                            cfg.noise_std * rng.sample::<f64, _>(StandardNormal)
                        } else {
                            0.0
                        };
                        (p + noise).clamp(0.0, 1.0)
                    })
                    .collect();
                images.push(Image { side: cfg.side, pixels });
                labels.push(k);
            }
        }
        LabeledSet::new(images, labels, split, cfg.class_count)
    };
    Ok((make(Split::Train, cfg.per_class_train, 1)?, make(Split::Test, cfg.per_class_test, 2)?))
}

/// Counter-clockwise quarter turns: one turn maps `out[r][c] = in[c][n-1-r]`.
pub fn rotate90(img: &Image, quarter_turns: usize) -> Result<Image> {
    if quarter_turns > 3 {
        return Err(Error::Argument(format!("quarter turns must be in 0..=3, got {}", quarter_turns)));
    }
    let n = img.side;
    let mut cur = img.clone();
    for _ in 0..quarter_turns {
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                out.push(cur.pixels[c * n + (n - 1 - r)]);
            }
        }
        cur.pixels = out;
    }
    Ok(cur)
}

/// Class partition into an initial task of `base` classes and `phases`
/// incremental tasks of `per_phase` classes each.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskStream {
    pub class_order: Vec<usize>,
    pub base: usize,
    pub per_phase: usize,
    pub phases: usize,
    pub tasks: Vec<Vec<usize>>,
}

impl TaskStream {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of tasks `0..=t` in learning order.
    pub fn seen_through(&self, t: usize) -> Vec<usize> {
        self.tasks[..=t].iter().flatten().copied().collect()
    }
}

pub fn split_tasks(class_count: usize, base: usize, per_phase: usize, phases: usize, order_seed: u64) -> Result<TaskStream> {
    if base == 0 || (phases > 0 && per_phase == 0) || base + per_phase * phases != class_count {
        return Err(Error::Protocol(format!(
            "B + C x T = {} + {} x {} does not cover {} classes",
            base, per_phase, phases, class_count
        )));
    }
    let mut class_order: Vec<usize> = (0..class_count).collect();
    class_order.shuffle(&mut seeded_rng(order_seed));
    let mut tasks = Vec::with_capacity(phases + 1);
    tasks.push(class_order[..base].to_vec());
    for t in 0..phases {
        let start = base + t * per_phase;
        tasks.push(class_order[start..start + per_phase].to_vec());
    }
    Ok(TaskStream {
        class_order,
        base,
        per_phase,
        phases,
        tasks,
    })
}
