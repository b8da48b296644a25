//! Loss terms of one optimisation step, built on a [`Tape`].

use alloc::format;
use alloc::vec::Vec;

use crate::model::ParamVars;
use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Rotation-augmented labels: task-local class `y` under quarter turn `j`
/// becomes `4y + j`. Output is grouped per sample (`4i..4i+3`).
pub fn augment_labels(local_labels: &[usize], task_classes: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(4 * local_labels.len());
    for &y in local_labels {
        if y >= task_classes {
            return Err(Error::Protocol(format!(
                "label {} is not one of the {} current-task classes",
                y, task_classes
            )));
        }
        out.extend((0..4).map(|j| 4 * y + j));
    }
    Ok(out)
}

/// `KL(P_agg || P_unified restricted to current columns)`, mean over the
/// batch. `aug_logits` is `4B x 4C`, `unified_logits` is `B x seen`.
pub fn aggregation_loss(tape: &mut Tape, aug_logits: Var, unified_logits: Var, current_cols: &[usize]) -> Result<Var> {
    let aggregated = tape.rotation_aggregate(aug_logits, current_cols.len())?;
    if tape.value(aggregated).rows() != tape.value(unified_logits).rows() {
        return Err(Error::Protocol("augmented and unified batches differ in size".into()));
    }
    let restricted = tape.gather_cols(unified_logits, current_cols)?;
    tape.kl_div(aggregated, restricted, 1.0)
}

/// Mean Euclidean distance between live and frozen features of the same
/// rotated batch. `frozen` enters as a constant.
pub fn feature_distill(tape: &mut Tape, live: Var, frozen: &Tensor) -> Result<Var> {
    let frozen = tape.constant(frozen.clone());
    let diff = tape.sub(live, frozen)?;
    tape.row_norm_mean(diff)
}

/// `KL(live old-class logits || frozen logits)` over the compensated batch.
/// The live head is wider than the frozen one; only its first
/// `frozen.cols()` columns (the previously seen classes) take part.
pub fn logit_distill(tape: &mut Tape, live_logits: Var, frozen: &Tensor, temperature: f64) -> Result<Var> {
    let old_cols: Vec<usize> = (0..frozen.cols()).collect();
    let live_old = tape.gather_cols(live_logits, &old_cols)?;
    let frozen = tape.constant(frozen.clone());
    tape.kl_div(live_old, frozen, temperature)
}

/// Target of the synthetic old-class cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub enum OldTargets {
    /// Unified-head column per row.
    Hard(Vec<usize>),
    /// Probability vector over unified-head columns per row.
    Soft(Tensor),
}

/// Detached inputs for the old-class loss group.
#[derive(Debug, Clone, PartialEq)]
pub struct OldInputs {
    /// Compensated synthetic features, `B x m`.
    pub features: Tensor,
    pub targets: OldTargets,
    /// Frozen extractor output on the rotated batch, `4B x m`.
    pub frozen_features: Tensor,
    /// Frozen unified logits on `features`, `B x old`.
    pub frozen_logits: Tensor,
}

/// Everything a step needs besides the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    /// Rotated images, `4B x n^2`, rows `4i + j`.
    pub rotated: Tensor,
    /// Unified-head column of each sample.
    pub columns: Vec<usize>,
    /// Task-local label of each sample.
    pub local_labels: Vec<usize>,
    /// Unified-head columns of the current task, in task-local order.
    pub current_cols: Vec<usize>,
    pub old: Option<OldInputs>,
}

/// Which loss terms are active and how they are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub alpha: f64,
    pub old_cls: bool,
    pub feature_kd: bool,
    pub logit_kd: bool,
    pub kd_temperature: f64,
    pub restrict_new_cls: bool,
}

/// Scalar nodes of every loss term. Inactive terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub new_cls: Var,
    pub new_aug_cls: Var,
    pub new_ka: Var,
    pub old_cls: Option<Var>,
    pub old_feat_kd: Option<Var>,
    pub old_logit_kd: Option<Var>,
    pub total: Var,
}

/// Builds `L_new + alpha * L_old` for one prepared batch.
pub fn build_losses(tape: &mut Tape, params: &ParamVars, batch: &PreparedBatch, s: &LossSettings) -> Result<LossGraph> {
    let b = batch.columns.len();
    if batch.rotated.rows() != 4 * b {
        return Err(Error::Protocol(format!(
            "rotated batch has {} rows for {} samples",
            batch.rotated.rows(),
            b
        )));
    }
    let x = tape.constant(batch.rotated.clone());
    let feats = crate::model::FeatureExtractor::forward_params(tape, x, &params.layers)?;

    let aug_logits = tape.linear(feats, params.aug, params.aug_bias)?;
    let aug_labels = augment_labels(&batch.local_labels, batch.current_cols.len())?;
    let new_aug_cls = tape.cross_entropy(aug_logits, &aug_labels)?;

    let upright: Vec<usize> = (0..b).map(|i| 4 * i).collect();
    let feats0 = tape.gather_rows(feats, &upright)?;
    let unified0 = tape.linear(feats0, params.unified, params.unified_bias)?;
    let new_cls = if s.restrict_new_cls {
        let current = tape.gather_cols(unified0, &batch.current_cols)?;
        tape.cross_entropy(current, &batch.local_labels)?
    } else {
        tape.cross_entropy(unified0, &batch.columns)?
    };
    let new_ka = aggregation_loss(tape, aug_logits, unified0, &batch.current_cols)?;

    let mut terms = alloc::vec![(new_cls, 1.0), (new_aug_cls, 1.0), (new_ka, 1.0)];
    let (mut old_cls, mut old_feat_kd, mut old_logit_kd) = (None, None, None);
    if let Some(old) = &batch.old {
        if s.feature_kd {
            let v = feature_distill(tape, feats, &old.frozen_features)?;
            terms.push((v, s.alpha));
            old_feat_kd = Some(v);
        }
        if s.old_cls || s.logit_kd {
            let f = tape.constant(old.features.clone());
            let logits = tape.linear(f, params.unified, params.unified_bias)?;
            if s.old_cls {
                let v = match &old.targets {
                    OldTargets::Hard(cols) => tape.cross_entropy(logits, cols)?,
                    OldTargets::Soft(t) => tape.cross_entropy_soft(logits, t)?,
                };
                terms.push((v, s.alpha));
                old_cls = Some(v);
            }
            if s.logit_kd {
                let v = logit_distill(tape, logits, &old.frozen_logits, s.kd_temperature)?;
                terms.push((v, s.alpha));
                old_logit_kd = Some(v);
            }
        }
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(LossGraph {
        new_cls,
        new_aug_cls,
        new_ka,
        old_cls,
        old_feat_kd,
        old_logit_kd,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augmented_labels() {
        assert_eq!(augment_labels(&[0], 1).unwrap(), [0, 1, 2, 3]);
        assert_eq!(augment_labels(&[3], 4).unwrap(), [12, 13, 14, 15]);
        let all: Vec<usize> = (0..5).collect();
        let mut l = augment_labels(&all, 5).unwrap();
        l.sort_unstable();
        assert_eq!(l, (0..20).collect::<Vec<_>>());
        assert!(matches!(augment_labels(&[2], 2), Err(Error::Protocol(_))));
    }

    #[test]
    fn identical_aggregate_blocks() {
        // Four rotation rows carrying the same per-class scores aggregate
        // to those scores.
        let scores = [2.0, -1.0];
        let mut data = Vec::new();
        for j in 0..4 {
            let mut row = [0.0; 8];
            for (c, s) in scores.iter().enumerate() {
                row[4 * c + j] = *s;
            }
            data.extend(row);
        }
        let mut tape = Tape::new();
        let aug = tape.constant(Tensor::matrix(4, 8, data).unwrap());
        let agg = tape.rotation_aggregate(aug, 2).unwrap();
        assert_eq!(tape.value(agg).data(), &scores);

        // Matching unified scores give zero aggregation loss.
        let unified = tape.constant(Tensor::matrix(1, 3, alloc::vec![7.0, 2.0, -1.0]).unwrap());
        let loss = aggregation_loss(&mut tape, aug, unified, &[1, 2]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-15);
    }

    #[test]
    fn grouping_violation() {
        let mut tape = Tape::new();
        let aug = tape.constant(Tensor::zeros(&[6, 8]));
        let uni = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(aggregation_loss(&mut tape, aug, uni, &[0, 1]), Err(Error::Protocol(_))));
    }
}
