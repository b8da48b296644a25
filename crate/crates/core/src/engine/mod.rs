//! The incremental training loop: per-task optimisation, statistics capture,
//! snapshotting and evaluation.
//!
//! All randomness of a run comes from one seeded generator, consumed in a
//! fixed order: model initialisation; then per task the head expansion,
//! and per epoch the data shuffle; then per step the old-class selection,
//! feature generation (MGS candidates) and compensation draws. Synthesis
//! runs on every step of every task `t >= 1` even when the old-class terms
//! are disabled, so toggling terms never shifts later draws.

mod config;
mod losses;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

pub use config::{ExperimentConfig, ProtocolConfig, TrainConfig};
pub use losses::{
    aggregation_loss, augment_labels, build_losses, feature_distill, logit_distill, LossGraph, LossSettings,
    OldInputs, OldTargets, PreparedBatch,
};

use crate::compensate::{synthesize, SynthesisBatch};
use crate::gaussmem::{estimate_class_stats, select_old_batch, StatsStore};
use crate::metrics::{AccuracyMatrix, Fraction};
use crate::model::{images_to_batch, Model, ModelSnapshot};
use crate::numerics::{AdamState, Tape, Tensor};
use crate::synthdata::{generate_dataset, rotate90, split_tasks, Image, LabeledSet, TaskStream};
use crate::{seeded_rng, Error, Result, Rng};

/// Loss components of one step (or their per-epoch means). Components are
/// unweighted; disabled terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub new_cls: f64,
    pub new_aug_cls: f64,
    pub new_ka: f64,
    pub old_cls: f64,
    pub old_feat_kd: f64,
    pub old_logit_kd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new_loss(&self) -> f64 {
        self.new_cls + self.new_aug_cls + self.new_ka
    }

    pub fn old_loss(&self) -> f64 {
        self.old_cls + self.old_feat_kd + self.old_logit_kd
    }

    /// `new + alpha * old` recomputed from the components.
    pub fn recomposed(&self, alpha: f64) -> f64 {
        self.new_loss() + alpha * self.old_loss()
    }

    fn is_finite(&self) -> bool {
        [
            self.new_cls,
            self.new_aug_cls,
            self.new_ka,
            self.old_cls,
            self.old_feat_kd,
            self.old_logit_kd,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    fn accumulate(&mut self, o: &LossBreakdown) {
        self.new_cls += o.new_cls;
        self.new_aug_cls += o.new_aug_cls;
        self.new_ka += o.new_ka;
        self.old_cls += o.old_cls;
        self.old_feat_kd += o.old_feat_kd;
        self.old_logit_kd += o.old_logit_kd;
        self.total += o.total;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.new_cls *= k;
        self.new_aug_cls *= k;
        self.new_ka *= k;
        self.old_cls *= k;
        self.old_feat_kd *= k;
        self.old_logit_kd *= k;
        self.total *= k;
        self
    }
}

impl TrainConfig {
    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            alpha: self.alpha,
            old_cls: self.old_cls,
            feature_kd: self.feature_kd,
            logit_kd: self.logit_kd,
            kd_temperature: self.kd_temperature,
            restrict_new_cls: self.restrict_new_cls,
        }
    }
}

/// Read-only state a task's training steps share.
#[derive(Debug, Clone, Copy)]
pub struct TaskContext<'a> {
    pub task: usize,
    pub classes: &'a [usize],
    pub snapshot: Option<&'a ModelSnapshot>,
    pub store: &'a StatsStore,
}

/// `4B x n^2` batch with rows `4i + j` holding image `i` turned `j` times.
pub fn rotated_batch(images: &[&Image]) -> Result<Tensor> {
    let mut rotated = Vec::with_capacity(4 * images.len());
    for im in images {
        for j in 0..4 {
            rotated.push(rotate90(im, j)?);
        }
    }
    let refs: Vec<&Image> = rotated.iter().collect();
    Ok(images_to_batch(&refs))
}

/// Assembles the detached inputs of one step, including the synthetic old
/// batch for tasks after the first.
pub fn prepare_batch(
    model: &Model,
    ctx: &TaskContext<'_>,
    images: &[&Image],
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(PreparedBatch, Option<SynthesisBatch>)> {
    let rotated = rotated_batch(images)?;
    let head = &model.head;
    let columns = labels
        .iter()
        .map(|&y| head.column_of(y).ok_or_else(|| Error::Protocol(format!("class {} has no head row", y))))
        .collect::<Result<Vec<_>>>()?;
    let local_labels = labels
        .iter()
        .map(|&y| {
            ctx.classes
                .iter()
                .position(|&c| c == y)
                .ok_or_else(|| Error::Protocol(format!("class {} is not in the current task", y)))
        })
        .collect::<Result<Vec<_>>>()?;
    let current_cols = ctx
        .classes
        .iter()
        .map(|&c| head.column_of(c).ok_or_else(|| Error::Protocol(format!("class {} has no head row", c))))
        .collect::<Result<Vec<_>>>()?;

    let mut old = None;
    let mut synthesis = None;
    if ctx.task > 0 {
        let snapshot = ctx
            .snapshot
            .ok_or_else(|| Error::Protocol(format!("task {} has no snapshot of the previous model", ctx.task)))?;
        let old_classes = snapshot.seen_classes();
        let y_old = select_old_batch(old_classes, labels.len(), rng)?;
        let live_new = model.extract(&rotated)?;
        let batch = synthesize(&cfg.strategy, ctx.store, &y_old, &live_new, rng)?;
        let seen = head.seen_count();
        let col = |y: usize| head.column_of(y).ok_or(Error::Lookup(y));
        let targets = match &batch.mixing {
            None => OldTargets::Hard(batch.old_labels.iter().map(|&y| col(y)).collect::<Result<_>>()?),
            Some(mix) => {
                let mut t = Tensor::zeros(&[batch.old_labels.len(), seen]);
                for (i, (&a, &(b, lambda))) in batch.old_labels.iter().zip(mix).enumerate() {
                    let (ca, cb) = (col(a)?, col(b)?);
                    t.set(i, ca, t.get(i, ca) + lambda);
                    t.set(i, cb, t.get(i, cb) + (1.0 - lambda));
                }
                OldTargets::Soft(t)
            }
        };
        old = Some(OldInputs {
            features: batch.compensated.clone(),
            targets,
            frozen_features: snapshot.extract(&rotated)?,
            frozen_logits: snapshot.unified_logits(&batch.compensated)?,
        });
        synthesis = Some(batch);
    }
    Ok((
        PreparedBatch {
            rotated,
            columns,
            local_labels,
            current_cols,
            old,
        },
        synthesis,
    ))
}

fn breakdown(tape: &Tape, g: &LossGraph) -> LossBreakdown {
    let v = |x: Option<crate::numerics::Var>| x.map_or(0.0, |x| tape.value(x).item());
    LossBreakdown {
        new_cls: tape.value(g.new_cls).item(),
        new_aug_cls: tape.value(g.new_aug_cls).item(),
        new_ka: tape.value(g.new_ka).item(),
        old_cls: v(g.old_cls),
        old_feat_kd: v(g.old_feat_kd),
        old_logit_kd: v(g.old_logit_kd),
        total: tape.value(g.total).item(),
    }
}

/// Loss values of a prepared batch without updating anything.
pub fn evaluate_losses(model: &Model, batch: &PreparedBatch, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let params = model.register(&mut tape);
    let g = build_losses(&mut tape, &params, batch, &cfg.loss_settings())?;
    Ok(breakdown(&tape, &g))
}

/// One Adam step on a prepared batch. Returns the losses before the update.
pub fn apply_step(model: &mut Model, adam: &mut AdamState, batch: &PreparedBatch, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let params = model.register(&mut tape);
    let g = build_losses(&mut tape, &params, batch, &cfg.loss_settings())?;
    let losses = breakdown(&tape, &g);
    if !losses.is_finite() {
        return Err(Error::NonFiniteLoss {
            task: 0,
            epoch: 0,
            step: 0,
            breakdown: losses,
        });
    }
    tape.backward(g.total)?;
    let grads: Vec<Tensor> = params
        .ordered()
        .into_iter()
        .map(|v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    adam.step(&mut model.params_mut(), &grad_refs)?;
    Ok(losses)
}

/// Prepares and applies one step on a minibatch.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    ctx: &TaskContext<'_>,
    images: &[&Image],
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let (batch, _) = prepare_batch(model, ctx, images, labels, cfg, rng)?;
    apply_step(model, adam, &batch, cfg)
}

/// Trains on the task's samples for `cfg.epochs` epochs. The unified head
/// must already cover the task's classes. Returns per-epoch mean losses.
pub fn train_task(
    model: &mut Model,
    train: &LabeledSet,
    ctx: &TaskContext<'_>,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<LossBreakdown>> {
    let mut adam = AdamState::new(cfg.adam, &model.param_sizes())?;
    let mut indices = train.indices_of(ctx.classes);
    if indices.is_empty() {
        return Err(Error::Protocol(format!("task {} has no training samples", ctx.task)));
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.set_learning_rate(cfg.learning_rate_at(epoch));
        indices.shuffle(rng);
        let mut sum = LossBreakdown::default();
        let mut steps = 0usize;
        for (step, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let images: Vec<&Image> = chunk.iter().map(|&i| &train.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let losses = train_step(model, &mut adam, ctx, &images, &labels, cfg, rng).map_err(|e| match e {
                Error::NonFiniteLoss { breakdown, .. } => Error::NonFiniteLoss {
                    task: ctx.task,
                    epoch,
                    step,
                    breakdown,
                },
                other => other,
            })?;
            sum.accumulate(&losses);
            steps += 1;
        }
        log.push(sum.scaled(1.0 / steps as f64));
    }
    Ok(log)
}

/// Stores statistics for every class of the finished task, computed with
/// the current extractor on upright training images.
pub fn finalize_task(model: &Model, train: &LabeledSet, classes: &[usize], task: usize, store: &mut StatsStore) -> Result<()> {
    if let Some(&dup) = classes.iter().find(|&&c| store.contains(c)) {
        return Err(Error::WriteOnce(dup));
    }
    for &c in classes {
        let images: Vec<&Image> = train.indices_of(&[c]).into_iter().map(|i| &train.images[i]).collect();
        let features = model.extract(&images_to_batch(&images))?;
        store.insert(estimate_class_stats(&features, c, task)?)?;
    }
    Ok(())
}

/// Test results after one phase.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Evaluation {
    /// Accuracy on each task `0..=t`.
    pub per_task: Vec<Fraction>,
    /// `(class id, accuracy)` in unified-head order.
    pub per_class: Vec<(usize, Fraction)>,
    pub overall: Fraction,
    /// Class ids labelling confusion rows and columns.
    pub classes: Vec<usize>,
    /// Row-major `seen x seen` counts, rows are true classes.
    pub confusion: Vec<u64>,
}

/// Top-1 accuracy of the unified head on upright test images of every class
/// seen through task `t`.
pub fn evaluate(model: &Model, test: &LabeledSet, stream: &TaskStream, t: usize) -> Result<Evaluation> {
    let classes = model.head.seen_classes.clone();
    let n = classes.len();
    let seen = stream.seen_through(t);
    let idx = test.indices_of(&seen);
    let images: Vec<&Image> = idx.iter().map(|&i| &test.images[i]).collect();
    let predictions = if images.is_empty() {
        Vec::new()
    } else {
        model.predict(&images_to_batch(&images))?
    };
    let mut confusion = vec![0u64; n * n];
    for (&i, &pred) in idx.iter().zip(&predictions) {
        let truth = model.head.column_of(test.labels[i]).ok_or(Error::Lookup(test.labels[i]))?;
        let p = model.head.column_of(pred).ok_or(Error::Lookup(pred))?;
        confusion[truth * n + p] += 1;
    }
    let class_fraction = |c: usize| -> Fraction {
        let col = model.head.column_of(c).expect("seen class");
        let row = &confusion[col * n..(col + 1) * n];
        Fraction::new(row[col], row.iter().sum())
    };
    let per_class: Vec<(usize, Fraction)> = classes.iter().map(|&c| (c, class_fraction(c))).collect();
    let per_task = stream.tasks[..=t]
        .iter()
        .map(|task| task.iter().fold(Fraction::default(), |acc, &c| acc + class_fraction(c)))
        .collect::<Vec<_>>();
    let overall = per_task.iter().fold(Fraction::default(), |a, &b| a + b);
    Ok(Evaluation {
        per_task,
        per_class,
        overall,
        classes,
        confusion,
    })
}

/// What one phase produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub task: usize,
    pub epoch_losses: Vec<LossBreakdown>,
    pub evaluation: Evaluation,
}

/// Drives a whole run phase by phase.
pub struct Learner {
    config: ExperimentConfig,
    train: LabeledSet,
    test: LabeledSet,
    stream: TaskStream,
    model: Model,
    store: StatsStore,
    rng: Rng,
    matrix: AccuracyMatrix,
    next_task: usize,
}

impl Learner {
    /// Generates the data, splits the classes and initialises the model.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = generate_dataset(&config.data)?;
        Self::with_data(config, train, test)
    }

    /// Uses pre-built data instead of generating it.
    pub fn with_data(config: ExperimentConfig, train: LabeledSet, test: LabeledSet) -> Result<Self> {
        config.validate()?;
        let p = &config.protocol;
        let stream = split_tasks(train.class_count, p.base, p.per_phase, p.phases, p.order_seed)?;
        let mut rng = seeded_rng(config.train.seed);
        let model = Model::new(config.model.clone(), &mut rng)?;
        let store = StatsStore::new(config.model.feature_dim, config.train.covariance);
        let matrix = AccuracyMatrix::new(stream.task_count());
        Ok(Self {
            config,
            train,
            test,
            stream,
            model,
            store,
            rng,
            matrix,
            next_task: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn stream(&self) -> &TaskStream {
        &self.stream
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &StatsStore {
        &self.store
    }

    pub fn matrix(&self) -> &AccuracyMatrix {
        &self.matrix
    }

    pub fn train_set(&self) -> &LabeledSet {
        &self.train
    }

    pub fn test_set(&self) -> &LabeledSet {
        &self.test
    }

    pub fn next_task(&self) -> usize {
        self.next_task
    }

    pub fn is_finished(&self) -> bool {
        self.next_task >= self.stream.task_count()
    }

    /// Snapshot, head expansion, training, statistics capture and evaluation
    /// for the next task.
    pub fn run_next_phase(&mut self) -> Result<PhaseReport> {
        let t = self.next_task;
        if self.is_finished() {
            return Err(Error::Protocol("all phases already ran".into()));
        }
        let classes = self.stream.tasks[t].clone();
        let snapshot = (t > 0).then(|| self.model.snapshot());
        self.model.expand_unified_head(&classes, &mut self.rng)?;
        let ctx = TaskContext {
            task: t,
            classes: &classes,
            snapshot: snapshot.as_ref(),
            store: &self.store,
        };
        let epoch_losses = train_task(&mut self.model, &self.train, &ctx, &self.config.train, &mut self.rng)?;
        finalize_task(&self.model, &self.train, &classes, t, &mut self.store)?;
        let evaluation = evaluate(&self.model, &self.test, &self.stream, t)?;
        self.matrix.push_phase(evaluation.per_task.clone())?;
        self.next_task += 1;
        Ok(PhaseReport {
            task: t,
            epoch_losses,
            evaluation,
        })
    }

    /// Runs every remaining phase.
    pub fn run_all(&mut self) -> Result<Vec<PhaseReport>> {
        let mut out = Vec::new();
        while !self.is_finished() {
            out.push(self.run_next_phase()?);
        }
        Ok(out)
    }
}
