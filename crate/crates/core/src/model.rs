//! Feature extractor, the unified and rotation-augmented heads, and frozen
//! snapshots used as distillation teachers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::numerics::{math, Tape, Tensor, Var};
use crate::synthdata::Image;
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub head_bias: bool,
    /// New head rows are drawn from `U(-a, a)` with `a = gain * sqrt(3 / m)`,
    /// i.e. standard deviation `gain / sqrt(m)`.
    pub head_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden: vec![64, 64],
            feature_dim: 32,
            head_bias: false,
            head_init_gain: 1.0,
        }
    }
}

/// Weight stored as `out x in`, bias of length `out`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn he_uniform(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = math::sqrt(6.0 / input as f64);
        let data = (0..input * output).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::matrix(output, input, data).expect("sized"),
            bias: Tensor::zeros(&[output]),
        }
    }
}

/// Feed-forward network `n^2 -> h -> ... -> m` with ReLU between layers and
/// a linear output.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureExtractor {
    pub layers: Vec<Linear>,
}

impl FeatureExtractor {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.feature_dim);
        let layers = dims.windows(2).map(|w| Linear::he_uniform(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.cols())
    }

    /// Untracked forward pass of a `B x n^2` batch.
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.linear(&layer.weight, Some(&layer.bias))?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Tracked forward pass using parameter nodes from [`Model::register`].
    pub fn forward_params(tape: &mut Tape, x: Var, params: &[(Var, Var)]) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in params.iter().enumerate() {
            h = tape.linear(h, w, Some(b))?;
            if i + 1 < params.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.all_finite() && l.bias.all_finite())
    }
}

/// Unified classifier over every class seen so far plus the per-task
/// rotation-augmented classifier.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DualHead {
    /// `seen x m`; row `i` scores class `seen_classes[i]`.
    pub unified: Tensor,
    pub unified_bias: Option<Tensor>,
    /// `4|C_t| x m`; row `4c + j` scores task-local class `c` under rotation `j`.
    pub aug: Tensor,
    pub aug_bias: Option<Tensor>,
    pub seen_classes: Vec<usize>,
    pub current_task_classes: Vec<usize>,
}

impl DualHead {
    pub fn empty(feature_dim: usize, bias: bool) -> Self {
        Self {
            unified: Tensor::zeros(&[0, feature_dim]),
            unified_bias: bias.then(|| Tensor::zeros(&[0])),
            aug: Tensor::zeros(&[0, feature_dim]),
            aug_bias: bias.then(|| Tensor::zeros(&[0])),
            seen_classes: Vec::new(),
            current_task_classes: Vec::new(),
        }
    }

    pub fn seen_count(&self) -> usize {
        self.seen_classes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.unified.cols()
    }

    /// Column of the unified head scoring global class `class_id`.
    pub fn column_of(&self, class_id: usize) -> Option<usize> {
        self.seen_classes.iter().position(|&c| c == class_id)
    }

    /// Appends one unified row per new class (existing rows untouched) and
    /// replaces the augmented head with a fresh one for the new task.
    pub fn expand(&mut self, new_classes: &[usize], gain: f64, rng: &mut Rng) -> Result<()> {
        if let Some(&dup) = new_classes.iter().find(|c| self.seen_classes.contains(c)) {
            return Err(Error::Protocol(format!("class {} already has a unified head row", dup)));
        }
        let m = self.feature_dim();
        let bound = gain * math::sqrt(3.0 / m as f64);
        let mut draw = |rows: usize| -> Vec<f64> {
            (0..rows * m)
                .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
                .collect()
        };
        let mut data = self.unified.data().to_vec();
        data.extend(draw(new_classes.len()));
        let rows = self.seen_count() + new_classes.len();
        self.unified = Tensor::matrix(rows, m, data)?;
        if let Some(b) = &mut self.unified_bias {
            let mut d = b.data().to_vec();
            d.resize(rows, 0.0);
            *b = Tensor::new(vec![rows], d)?;
        }
        self.seen_classes.extend_from_slice(new_classes);

        let aug_rows = 4 * new_classes.len();
        self.aug = Tensor::matrix(aug_rows, m, draw(aug_rows))?;
        if self.aug_bias.is_some() {
            self.aug_bias = Some(Tensor::zeros(&[aug_rows]));
        }
        self.current_task_classes = new_classes.to_vec();
        Ok(())
    }

    /// Untracked unified logits for a `B x m` feature batch.
    pub fn unified_logits(&self, features: &Tensor) -> Result<Tensor> {
        features.linear(&self.unified, self.unified_bias.as_ref())
    }
}

/// Tape handles for every trainable tensor of a [`Model`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
    pub unified: Var,
    pub unified_bias: Option<Var>,
    pub aug: Var,
    pub aug_bias: Option<Var>,
}

impl ParamVars {
    /// Handles in the same order as [`Model::params_mut`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.push(self.unified);
        v.extend(self.unified_bias);
        v.push(self.aug);
        v.extend(self.aug_bias);
        v
    }

    pub fn extractor_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Model {
    pub config: ModelConfig,
    pub extractor: FeatureExtractor,
    pub head: DualHead,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        if config.input_dim == 0 || config.feature_dim == 0 || config.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Argument(format!("invalid model dimensions {:?}", config)));
        }
        let extractor = FeatureExtractor::new(&config, rng);
        let head = DualHead::empty(config.feature_dim, config.head_bias);
        Ok(Self {
            config,
            extractor,
            head,
        })
    }

    /// Prepares the heads for a task introducing `new_classes`.
    pub fn expand_unified_head(&mut self, new_classes: &[usize], rng: &mut Rng) -> Result<()> {
        self.head.expand(new_classes, self.config.head_init_gain, rng)
    }

    /// Puts every trainable tensor on the tape as a parameter.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let layers = self
            .extractor
            .layers
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        ParamVars {
            layers,
            unified: tape.param(self.head.unified.clone()),
            unified_bias: self.head.unified_bias.as_ref().map(|b| tape.param(b.clone())),
            aug: tape.param(self.head.aug.clone()),
            aug_bias: self.head.aug_bias.as_ref().map(|b| tape.param(b.clone())),
        }
    }

    /// Trainable tensors in a fixed order (layers, unified head, augmented head).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.extractor.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.push(&mut self.head.unified);
        if let Some(b) = &mut self.head.unified_bias {
            v.push(b);
        }
        v.push(&mut self.head.aug);
        if let Some(b) = &mut self.head.aug_bias {
            v.push(b);
        }
        v
    }

    pub fn param_sizes(&mut self) -> Vec<usize> {
        self.params_mut().iter().map(|t| t.len()).collect()
    }

    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        self.extractor.extract(x)
    }

    /// Predicted global class ids (unified head, ties to the lowest column).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.head.unified_logits(&self.extract(x)?)?;
        Ok((0..logits.rows()).map(|i| self.head.seen_classes[argmax(logits.row(i))]).collect())
    }

    /// Frozen copy of the extractor and unified head.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            extractor: self.extractor.clone(),
            unified: self.head.unified.clone(),
            unified_bias: self.head.unified_bias.clone(),
            seen_classes: self.head.seen_classes.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.extractor.all_finite() && self.head.unified.all_finite() && self.head.aug.all_finite()
    }
}

/// Read-only teacher captured at the start of an incremental task.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    extractor: FeatureExtractor,
    unified: Tensor,
    unified_bias: Option<Tensor>,
    seen_classes: Vec<usize>,
}

impl ModelSnapshot {
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        self.extractor.extract(x)
    }

    pub fn unified_logits(&self, features: &Tensor) -> Result<Tensor> {
        features.linear(&self.unified, self.unified_bias.as_ref())
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen_classes
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |t: &Tensor| {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        };
        for l in &self.extractor.layers {
            eat(&l.weight);
            eat(&l.bias);
        }
        eat(&self.unified);
        if let Some(b) = &self.unified_bias {
            eat(b);
        }
        h
    }
}

/// Flattens images into a `B x n^2` batch.
pub fn images_to_batch(images: &[&Image]) -> Tensor {
    let d = images.first().map_or(0, |i| i.pixels().len());
    let mut data = Vec::with_capacity(images.len() * d);
    for im in images {
        data.extend_from_slice(im.pixels());
    }
    Tensor::matrix(images.len(), d, data).expect("uniform image sizes")
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn small() -> ModelConfig {
        ModelConfig {
            input_dim: 9,
            hidden: vec![6, 5],
            feature_dim: 4,
            head_bias: false,
            head_init_gain: 1.0,
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut rng = seeded_rng(0);
        let mut m = Model::new(small(), &mut rng).unwrap();
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::matrix(3, 9, (0..27).map(|i| i as f64 / 27.0).collect()).unwrap();
        let f = m.extract(&x).unwrap();
        assert_eq!(f.shape(), &[3, 4]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_for_any_batch() {
        let mut rng = seeded_rng(1);
        let m = Model::new(small(), &mut rng).unwrap();
        for b in [1, 2, 7] {
            let x = Tensor::zeros(&[b, 9]);
            assert_eq!(m.extract(&x).unwrap().shape(), &[b, 4]);
        }
    }

    #[test]
    fn expansion_preserves_old_rows() {
        let mut rng = seeded_rng(2);
        let mut m = Model::new(small(), &mut rng).unwrap();
        m.expand_unified_head(&[3, 7, 1], &mut rng).unwrap();
        assert_eq!(m.head.aug.shape(), &[12, 4]);
        let feat = Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let before = m.head.unified_logits(&feat).unwrap();
        let unified_before = m.head.unified.clone();
        m.expand_unified_head(&[], &mut rng).unwrap();
        assert_eq!(m.head.unified, unified_before);
        m.expand_unified_head(&[0, 5], &mut rng).unwrap();
        let after = m.head.unified_logits(&feat).unwrap();
        assert_eq!(&after.data()[..3], before.data());
        assert_eq!(m.head.seen_classes, [3, 7, 1, 0, 5]);
        assert_eq!(m.head.aug.shape(), &[8, 4]);
        assert_eq!(m.head.current_task_classes, [0, 5]);
        assert!(m.expand_unified_head(&[5], &mut rng).is_err());
    }

    #[test]
    fn new_rows_follow_documented_init() {
        let mut rng = seeded_rng(3);
        let cfg = ModelConfig {
            feature_dim: 32,
            ..small()
        };
        let mut m = Model::new(cfg, &mut rng).unwrap();
        let classes: Vec<usize> = (0..40).collect();
        m.expand_unified_head(&classes, &mut rng).unwrap();
        let d = m.head.unified.data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let target = 1.0 / 32f64.sqrt();
        assert!(mean.abs() < 0.01, "mean {}", mean);
        assert!((std - target).abs() / target < 0.05, "std {} vs {}", std, target);
    }

    #[test]
    fn snapshot_is_frozen_copy() {
        let mut rng = seeded_rng(4);
        let mut m = Model::new(small(), &mut rng).unwrap();
        m.expand_unified_head(&[0, 1], &mut rng).unwrap();
        let snap = m.snapshot();
        let x = Tensor::matrix(2, 9, (0..18).map(|i| (i as f64).sin().abs()).collect()).unwrap();
        assert_eq!(snap.extract(&x).unwrap(), m.extract(&x).unwrap());
        let fp = snap.fingerprint();
        let out = snap.extract(&x).unwrap();
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
        assert_eq!(snap.extract(&x).unwrap(), out);
        assert_eq!(snap.fingerprint(), fp);
        assert_ne!(m.extract(&x).unwrap(), out);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
