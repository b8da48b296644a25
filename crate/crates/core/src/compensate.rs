//! Old-class feature generation and compensation strategies.
//!
//! Generation turns stored statistics into one feature per requested old
//! label; compensation then blends each generated feature with a feature of
//! the current (rotation-augmented) batch. Strategy names are the canonical
//! lowercase strings used in configs and run records.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::gaussmem::{StatsStore, DEFAULT_CANDIDATES};
use crate::model::argmax;
use crate::numerics::{math, Tensor};
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Generation {
    Prototype,
    PrototypeMixing,
    GaussianNoiseAug,
    Mgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Compensation {
    None,
    RandInterp,
    RandAvg,
    LeastSimAvg,
    Sfc,
}

impl Generation {
    pub const ALL: [Generation; 4] = [
        Generation::Prototype,
        Generation::PrototypeMixing,
        Generation::GaussianNoiseAug,
        Generation::Mgs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Generation::Prototype => "prototype",
            Generation::PrototypeMixing => "prototype_mixing",
            Generation::GaussianNoiseAug => "gaussian_noise_aug",
            Generation::Mgs => "mgs",
        }
    }
}

impl Compensation {
    pub const ALL: [Compensation; 5] = [
        Compensation::None,
        Compensation::RandInterp,
        Compensation::RandAvg,
        Compensation::LeastSimAvg,
        Compensation::Sfc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Compensation::None => "none",
            Compensation::RandInterp => "rand_interp",
            Compensation::RandAvg => "rand_avg",
            Compensation::LeastSimAvg => "least_sim_avg",
            Compensation::Sfc => "sfc",
        }
    }
}

impl fmt::Display for Generation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Compensation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Generation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Generation::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown generation strategy {:?}", s)))
    }
}

impl FromStr for Compensation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Compensation::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown compensation strategy {:?}", s)))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StrategyConfig {
    pub generation: Generation,
    pub compensation: Compensation,
    /// Candidates ranked per MGS feature.
    pub candidates: usize,
    /// Noise standard deviation for `gaussian_noise_aug`; `None` uses
    /// [`noise_radius`] of the store.
    pub noise_scale: Option<f64>,
    /// Open interval for the `rand_interp` weight on the old feature.
    pub interp_low: f64,
    pub interp_high: f64,
    /// Fixes the `prototype_mixing` weight instead of drawing it.
    pub mixing_weight: Option<f64>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            generation: Generation::Mgs,
            compensation: Compensation::Sfc,
            candidates: DEFAULT_CANDIDATES,
            noise_scale: None,
            interp_low: 0.0,
            interp_high: 1.0,
            mixing_weight: None,
        }
    }
}

impl StrategyConfig {
    pub fn new(generation: Generation, compensation: Compensation) -> Self {
        Self {
            generation,
            compensation,
            ..Self::default()
        }
    }

    /// `generation+compensation`, the name used for result tables.
    pub fn label(&self) -> String {
        format!("{}+{}", self.generation, self.compensation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::Argument("mgs.K must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.interp_low) || !(self.interp_low < self.interp_high) || self.interp_high > 1.0 {
            return Err(Error::Argument(format!(
                "interpolation bounds ({}, {}) must satisfy 0 <= low < high <= 1",
                self.interp_low, self.interp_high
            )));
        }
        if let Some(s) = self.noise_scale {
            if !(s >= 0.0) {
                return Err(Error::Argument(format!("noise scale {} must be non-negative", s)));
            }
        }
        if let Some(w) = self.mixing_weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Argument(format!("mixing weight {} outside [0, 1]", w)));
            }
        }
        Ok(())
    }
}

/// Generated old features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct OldBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// For `prototype_mixing`: per row the partner class `b` and the weight
    /// `lambda` of `labels[i]`; the soft target is
    /// `lambda onehot(a) + (1 - lambda) onehot(b)`.
    pub mixing: Option<Vec<(usize, f64)>>,
}

/// Compensated old-class features ready for the unified classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisBatch {
    pub old_features: Tensor,
    pub old_labels: Vec<usize>,
    pub compensated: Tensor,
    pub mixing: Option<Vec<(usize, f64)>>,
    pub generation: Generation,
    pub compensation: Compensation,
    /// Row of the new-feature batch blended into each old row, if any.
    pub matched: Vec<Option<usize>>,
}

/// Square root of the mean diagonal variance over all stored classes.
pub fn noise_radius(store: &StatsStore) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in store.iter() {
        for i in 0..s.dim() {
            total += s.covariance.get(i, i);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        math::sqrt(total / count as f64)
    }
}

/// One feature per label in `labels`.
pub fn generate(strategy: &StrategyConfig, store: &StatsStore, labels: &[usize], rng: &mut Rng) -> Result<OldBatch> {
    if store.is_empty() {
        return Err(Error::Protocol("feature generation needs stored statistics".into()));
    }
    let m = store.feature_dim();
    let mut data = Vec::with_capacity(labels.len() * m);
    let mut mixing = None;
    match strategy.generation {
        Generation::Prototype => {
            for &y in labels {
                data.extend_from_slice(&store.get(y)?.mean);
            }
        }
        Generation::GaussianNoiseAug => {
            let sigma = strategy.noise_scale.unwrap_or_else(|| noise_radius(store));
            for &y in labels {
                let mu = &store.get(y)?.mean;
                data.extend(mu.iter().map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal)));
            }
        }
        Generation::PrototypeMixing => {
            let ids = store.class_ids();
            let mut mix = Vec::with_capacity(labels.len());
            for &a in labels {
                let mu_a = &store.get(a)?.mean;
                let others: Vec<usize> = ids.iter().copied().filter(|&c| c != a).collect();
                let b = if others.is_empty() { a } else { others[rng.random_range(0..others.len())] };
                let lambda = match strategy.mixing_weight {
                    Some(w) => w,
                    None => rng.random::<f64>(),
                };
                let mu_b = &store.get(b)?.mean;
                data.extend(mu_a.iter().zip(mu_b).map(|(x, y)| lambda * x + (1.0 - lambda) * y));
                mix.push((b, lambda));
            }
            mixing = Some(mix);
        }
        Generation::Mgs => {
            for &y in labels {
                data.extend(store.gaussian(y)?.mgs_sample(strategy.candidates, rng)?);
            }
        }
    }
    Ok(OldBatch {
        features: Tensor::matrix(labels.len(), m, data)?,
        labels: labels.to_vec(),
        mixing,
    })
}

/// `S[i][j] = <a_i, b_j> / (|a_i| |b_j|)`, zero where either norm is zero.
pub fn cosine_similarity_matrix(old: &Tensor, new: &Tensor) -> Result<Tensor> {
    if !old.is_matrix() || !new.is_matrix() || old.cols() != new.cols() {
        return Err(Error::dim("cosine_similarity", format!("{:?} vs {:?}", old.shape(), new.shape())));
    }
    let norm = |r: &[f64]| math::sqrt(r.iter().map(|v| v * v).sum());
    let new_norms: Vec<f64> = (0..new.rows()).map(|j| norm(new.row(j))).collect();
    let mut out = Tensor::zeros(&[old.rows(), new.rows()]);
    let mut degenerate = 0usize;
    for i in 0..old.rows() {
        let a = old.row(i);
        let na = norm(a);
        for (j, &nb) in new_norms.iter().enumerate() {
            if na == 0.0 || nb == 0.0 {
                degenerate += 1;
                continue;
            }
            let dot: f64 = a.iter().zip(new.row(j)).map(|(x, y)| x * y).sum();
            out.set(i, j, (dot / (na * nb)).clamp(-1.0, 1.0));
        }
    }
    if degenerate > 0 {
        log::debug!("cosine similarity: {} pairs with a zero-norm row set to 0", degenerate);
    }
    Ok(out)
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

fn midpoint<'a>(a: &'a [f64], b: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    a.iter().zip(b).map(|(x, y)| (x + y) / 2.0)
}

fn check_pair(old: &Tensor, new: &Tensor) -> Result<()> {
    if !old.is_matrix() || !new.is_matrix() || old.cols() != new.cols() {
        return Err(Error::dim("compensate", format!("{:?} vs {:?}", old.shape(), new.shape())));
    }
    if new.rows() == 0 && old.rows() > 0 {
        return Err(Error::dim("compensate", "no new features to compensate with"));
    }
    Ok(())
}

/// Blends each old row with its most cosine-similar new row (ties to the
/// lowest index). Returns the midpoints and matched indices.
pub fn sfc_compensate(old: &Tensor, new: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    check_pair(old, new)?;
    let s = cosine_similarity_matrix(old, new)?;
    let mut data = Vec::with_capacity(old.len());
    let mut matched = Vec::with_capacity(old.rows());
    for i in 0..old.rows() {
        let j = argmax(s.row(i));
        data.extend(midpoint(old.row(i), new.row(j)));
        matched.push(j);
    }
    Ok((Tensor::matrix(old.rows(), old.cols(), data)?, matched))
}

/// Applies the configured compensation to generated old features.
pub fn compensate(strategy: Compensation, old: &Tensor, new: &Tensor, rng: &mut Rng) -> Result<(Tensor, Vec<Option<usize>>)> {
    compensate_with(strategy, old, new, (0.0, 1.0), rng)
}

fn compensate_with(
    strategy: Compensation,
    old: &Tensor,
    new: &Tensor,
    interp: (f64, f64),
    rng: &mut Rng,
) -> Result<(Tensor, Vec<Option<usize>>)> {
    if strategy == Compensation::None {
        return Ok((old.clone(), vec![None; old.rows()]));
    }
    check_pair(old, new)?;
    let (b, m) = (old.rows(), old.cols());
    let mut data = Vec::with_capacity(b * m);
    let mut matched = Vec::with_capacity(b);
    match strategy {
        Compensation::None => unreachable!(),
        Compensation::Sfc => {
            let (t, idx) = sfc_compensate(old, new)?;
            return Ok((t, idx.into_iter().map(Some).collect()));
        }
        Compensation::LeastSimAvg => {
            let s = cosine_similarity_matrix(old, new)?;
            for i in 0..b {
                let j = argmin(s.row(i));
                data.extend(midpoint(old.row(i), new.row(j)));
                matched.push(Some(j));
            }
        }
        Compensation::RandAvg => {
            for i in 0..b {
                let j = rng.random_range(0..new.rows());
                data.extend(midpoint(old.row(i), new.row(j)));
                matched.push(Some(j));
            }
        }
        Compensation::RandInterp => {
            let (lo, hi) = interp;
            for i in 0..b {
                let j = rng.random_range(0..new.rows());
                let beta = open_uniform(lo, hi, rng);
                data.extend(old.row(i).iter().zip(new.row(j)).map(|(x, y)| beta * x + (1.0 - beta) * y));
                matched.push(Some(j));
            }
        }
    }
    Ok((Tensor::matrix(b, m, data)?, matched))
}

/// Uniform draw from the open interval `(lo, hi)`.
fn open_uniform(lo: f64, hi: f64, rng: &mut Rng) -> f64 {
    loop {
        let u = rng.random_range(lo..hi);
        if u > lo {
            return u;
        }
    }
}

/// Generation followed by compensation against the current batch features
/// `new` (all four rotations). Labels pass through untouched.
pub fn synthesize(
    strategy: &StrategyConfig,
    store: &StatsStore,
    labels: &[usize],
    new: &Tensor,
    rng: &mut Rng,
) -> Result<SynthesisBatch> {
    let old = generate(strategy, store, labels, rng)?;
    let (compensated, matched) = compensate_with(
        strategy.compensation,
        &old.features,
        new,
        (strategy.interp_low, strategy.interp_high),
        rng,
    )?;
    Ok(SynthesisBatch {
        old_features: old.features,
        old_labels: old.labels,
        compensated,
        mixing: old.mixing,
        generation: strategy.generation,
        compensation: strategy.compensation,
        matched,
    })
}
