//! Sequential task training with the MAIN/PROTO sub-step split, evaluation
//! and the accuracy-matrix protocol.
//!
//! Each batch runs two optimizer steps. The MAIN step minimizes
//! the hard loss plus the stability-weighted main distillation loss over the
//! backbone, the hypernetwork and the current task's prototypes. The PROTO
//! step minimizes the weighted prototype distillation loss over the
//! prototypes of earlier tasks only. Parameters outside a step's selection
//! are bound as constants, and the optimizer rejects any gradient on a
//! parameter it does not own.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{PrototypeInit, RunConfig};
use crate::datasets::{ChannelStats, ImageShape, Samples, TaskDataset};
use crate::error::{Error, Result};
use crate::losses::{hard_loss_main, soft_loss_main_from_features, soft_loss_prototypes};
use crate::metrics::AccuracyMatrix;
use crate::model::{
    head_forward, init_prototype_random, init_prototype_semantic, FrozenModel, PahModel, ParamKey,
    Trainable,
};
use crate::optim::{Optimizer, ParameterSet};

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Main,
    Proto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub kind: StepKind,
    pub task: usize,
    /// Global step index, counting both sub-steps.
    pub step: u64,
    pub loss: f64,
    /// Parameters that received a gradient in this step.
    pub updated: Vec<ParamKey>,
}

/// Mean losses over one epoch of task `task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub hard: f64,
    pub soft_main: f64,
    pub soft_prototypes: f64,
    pub total: f64,
}

/// Hooks around every optimizer step and epoch.
pub trait TrainObserver {
    fn before_step(&mut self, _kind: StepKind, _task: usize, _model: &PahModel) {}

    fn after_step(&mut self, _report: &StepReport, _model: &PahModel) {}

    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

/// Anything that produces task-conditioned logits for an image block.
pub trait Classifier: Sync {
    fn input_shape(&self) -> ImageShape;

    fn logits(&self, images: &[f64], task: usize) -> Result<Tensor>;
}

impl Classifier for PahModel {
    fn input_shape(&self) -> ImageShape {
        self.dims.input
    }

    fn logits(&self, images: &[f64], task: usize) -> Result<Tensor> {
        PahModel::logits(self, images, task)
    }
}

impl Classifier for FrozenModel {
    fn input_shape(&self) -> ImageShape {
        self.model().dims.input
    }

    fn logits(&self, images: &[f64], task: usize) -> Result<Tensor> {
        FrozenModel::logits(self, images, task)
    }
}

/// Index of the largest entry of each `width`-wide row; ties go to the first.
pub fn argmax_rows(values: &[f64], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Fraction of `samples` whose argmax logit under task `task` equals the label.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, task: usize, samples: &Samples) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "task {task} has an empty evaluation split"
        )));
    }
    let n = model.input_shape().numel();
    let mut hits = 0usize;
    for (images, labels) in samples
        .images
        .chunks(EVAL_CHUNK * n)
        .zip(samples.labels.chunks(EVAL_CHUNK))
    {
        let logits = model.logits(images, task)?;
        let width = logits.shape()[1];
        hits += argmax_rows(logits.data(), width)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Mutable state of one run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: PahModel,
    /// Snapshot taken at the end of the previous task.
    pub frozen: Option<FrozenModel>,
    pub matrix: AccuracyMatrix,
    /// Tasks completed so far.
    pub completed: usize,
    pub step: u64,
    pub epoch: u64,
    /// Input standardization shared by every task of the run.
    pub stats: ChannelStats,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(
        cfg: &RunConfig,
        input: ImageShape,
        stats: ChannelStats,
        num_tasks: usize,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let model = PahModel::new(cfg.model_dims(input), &mut rng)?;
        Ok(TrainState {
            model,
            frozen: None,
            matrix: AccuracyMatrix::new(num_tasks),
            completed: 0,
            step: 0,
            epoch: 0,
            stats,
            rng,
        })
    }
}

/// Prototypes for a new task, from `raw` (unnormalized) training images.
fn initial_prototypes(
    state: &mut TrainState,
    raw: &TaskDataset,
    cfg: &RunConfig,
) -> Result<Vec<crate::model::Prototype>> {
    let shape = state.model.dims.prototype;
    (0..raw.num_classes())
        .map(|c| match cfg.prototype.init {
            PrototypeInit::Semantic => {
                init_prototype_semantic(raw, c, shape, &state.stats, &mut state.rng)
            }
            PrototypeInit::Random => {
                Ok(init_prototype_random(shape, raw.task_id, c, &mut state.rng))
            }
        })
        .collect()
}

fn apply_grads(model: &mut PahModel, grads: Vec<(ParamKey, Vec<f64>)>) -> Result<Vec<ParamKey>> {
    let mut keys = Vec::with_capacity(grads.len());
    for (key, g) in grads {
        model
            .parameter_mut(key)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {key}")))?
            .accumulate_grad(&g)?;
        keys.push(key);
    }
    Ok(keys)
}

fn check_finite(value: f64, step: u64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("{what} evaluated to {value}"),
        })
    }
}

struct MainOutcome {
    hard: f64,
    soft_main: f64,
    loss: f64,
    grads: Vec<(ParamKey, Vec<f64>)>,
}

fn main_forward(
    state: &TrainState,
    k: usize,
    images: Vec<f64>,
    labels: &[usize],
    cfg: &RunConfig,
) -> Result<MainOutcome> {
    let tape = Tape::new();
    let trainable = Trainable {
        backbone: true,
        hypernet: true,
        prototype_tasks: vec![k],
    };
    let live = state.model.bind(&tape, &trainable);
    let n = state.model.dims.input.numel();
    let x = tape.constant_from(&[labels.len(), n], images)?;
    let features = live.backbone_forward(x)?;
    let logits = head_forward(&tape, features, &live.head_for_task(k)?)?;
    let hard = hard_loss_main(&tape, logits, labels)?;
    let mut loss: Var = hard;
    let mut l_sm_value = 0.0;
    if let Some(frozen) = &state.frozen {
        let old = frozen.bind(&tape);
        let old_features = old.backbone_forward(x)?;
        let soft_main = soft_loss_main_from_features(
            &old,
            &live,
            old_features,
            features,
            k,
            cfg.loss.temperature,
        )?;
        l_sm_value = tape.scalar(soft_main)?;
        loss = tape.add(loss, tape.scale(soft_main, cfg.loss.main_distill_weight()))?;
    }
    let l_hm_value = tape.scalar(hard)?;
    let loss_value = tape.scalar(loss)?;
    check_finite(loss_value, state.step, "MAIN loss")?;
    let grads = tape.backward(loss)?;
    Ok(MainOutcome {
        hard: l_hm_value,
        soft_main: l_sm_value,
        loss: loss_value,
        grads: live.collect_grads(&grads),
    })
}

fn proto_forward(
    state: &TrainState,
    k: usize,
    cfg: &RunConfig,
) -> Result<(f64, f64, Vec<(ParamKey, Vec<f64>)>)> {
    let frozen = state
        .frozen
        .as_ref()
        .ok_or_else(|| Error::Protocol(format!("no snapshot available while training task {k}")))?;
    let tape = Tape::new();
    let trainable = Trainable {
        backbone: false,
        hypernet: false,
        prototype_tasks: (1..k).collect(),
    };
    let live = state.model.bind(&tape, &trainable);
    let old = frozen.bind(&tape);
    let soft_prototypes =
        soft_loss_prototypes(&old, &live, k, cfg.prototype_teacher, cfg.loss.temperature)?;
    let loss = tape.scale(soft_prototypes, cfg.loss.prototype_distill_weight());
    let l_sp_value = tape.scalar(soft_prototypes)?;
    let loss_value = tape.scalar(loss)?;
    check_finite(loss_value, state.step, "PROTO loss")?;
    let grads = tape.backward(loss)?;
    Ok((l_sp_value, loss_value, live.collect_grads(&grads)))
}

/// Trains task `task.task_id` on `task` (unnormalized; standardized here
/// with the run statistics). Registers the task's prototypes first.
pub fn train_task(
    state: &mut TrainState,
    task: &TaskDataset,
    cfg: &RunConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochRecord>> {
    let k = task.task_id;
    if k != state.completed + 1 {
        return Err(Error::Protocol(format!(
            "task {k} cannot follow {} completed task(s)",
            state.completed
        )));
    }
    if (k >= 2) != state.frozen.is_some() {
        return Err(Error::Protocol(format!(
            "snapshot presence does not match task index {k}"
        )));
    }
    if task.num_classes() != state.model.dims.classes_per_task {
        return Err(Error::Contract(format!(
            "task {k} has {} classes, model expects {}",
            task.num_classes(),
            state.model.dims.classes_per_task
        )));
    }
    if task.shape != state.model.dims.input {
        return Err(Error::shape(
            "train_task",
            &task.shape.dims(),
            &state.model.dims.input.dims(),
        ));
    }
    if task.train.is_empty() {
        return Err(Error::Dataset(format!("task {k} has no training samples")));
    }
    let prototypes = initial_prototypes(state, task, cfg)?;
    state.model.register_task(k, prototypes)?;
    let data = task.normalized(&state.stats);

    let main_keys: Vec<ParamKey> = state
        .model
        .parameters()
        .into_iter()
        .map(|(key, _)| key)
        .filter(|key| !matches!(key, ParamKey::Prototype { task, .. } if *task != k))
        .collect();
    let proto_keys: Vec<ParamKey> = state
        .model
        .parameters()
        .into_iter()
        .map(|(key, _)| key)
        .filter(|key| matches!(key, ParamKey::Prototype { task, .. } if *task < k))
        .collect();
    let mut main_opt = Optimizer::new(cfg.optimizer.main, main_keys);
    let mut proto_opt = Optimizer::new(cfg.optimizer.prototype_settings(), proto_keys);
    let run_proto = k >= 2 && cfg.loss.prototype_distill_weight() != 0.0;

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::with_capacity(cfg.train.epochs);
    for epoch in 1..=cfg.train.epochs {
        order.shuffle(&mut state.rng);
        let (mut sum_hm, mut sum_sm, mut sum_sp, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.train.batch_size) {
            let (images, labels) = data.train.gather(batch, data.shape);

            observer.before_step(StepKind::Main, k, &state.model);
            let main = main_forward(state, k, images, &labels, cfg)?;
            let updated = apply_grads(&mut state.model, main.grads)?;
            main_opt.step(&mut state.model)?;
            state.step += 1;
            observer.after_step(
                &StepReport {
                    kind: StepKind::Main,
                    task: k,
                    step: state.step,
                    loss: main.loss,
                    updated,
                },
                &state.model,
            );

            if run_proto {
                observer.before_step(StepKind::Proto, k, &state.model);
                let (soft_prototypes, loss, grads) = proto_forward(state, k, cfg)?;
                let updated = apply_grads(&mut state.model, grads)?;
                proto_opt.step(&mut state.model)?;
                state.step += 1;
                observer.after_step(
                    &StepReport {
                        kind: StepKind::Proto,
                        task: k,
                        step: state.step,
                        loss,
                        updated,
                    },
                    &state.model,
                );
                sum_sp += soft_prototypes;
            }
            sum_hm += main.hard;
            sum_sm += main.soft_main;
            batches += 1;
        }
        state.epoch += 1;
        let b = batches as f64;
        let (hard, soft_main, soft_prototypes) = (sum_hm / b, sum_sm / b, sum_sp / b);
        let record = EpochRecord {
            task: k,
            epoch,
            hard,
            soft_main,
            soft_prototypes,
            total: crate::losses::total_loss_value(hard, soft_main, soft_prototypes, &cfg.loss),
        };
        observer.on_epoch(&record);
        records.push(record);
    }
    state.completed = k;
    Ok(records)
}

/// Result of a full task sequence.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub model: PahModel,
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
}

/// Checks that `tasks` are ordered with ids `1..=K` and share one shape and class count.
pub fn validate_schedule(tasks: &[TaskDataset]) -> Result<()> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::Protocol("empty task schedule".into()))?;
    for (i, t) in tasks.iter().enumerate() {
        if t.task_id != i + 1 {
            return Err(Error::Protocol(format!(
                "task at position {} has id {}, expected {}",
                i + 1,
                t.task_id,
                i + 1
            )));
        }
        if t.shape != first.shape || t.num_classes() != first.num_classes() {
            return Err(Error::Protocol(format!(
                "task {} differs in shape or class count",
                t.task_id
            )));
        }
    }
    Ok(())
}

/// Trains every task in order. After task `k` the model is snapshotted,
/// and row `k` of the accuracy matrix is filled from the snapshot on the
/// test splits of tasks `1..=k`. Input statistics come from task 1's
/// training split.
pub fn run_sequence(
    tasks: &[TaskDataset],
    cfg: &RunConfig,
    observer: &mut dyn TrainObserver,
) -> Result<RunOutcome> {
    validate_schedule(tasks)?;
    let shape = tasks[0].shape;
    let mut state = TrainState::new(cfg, shape, tasks[0].stats.clone(), tasks.len())?;
    let tests: Vec<Samples> = tasks
        .iter()
        .map(|t| t.normalized(&state.stats).test)
        .collect();
    let growth = state.model.dims.classes_per_task * state.model.dims.prototype.numel();
    let mut epochs = Vec::new();
    for task in tasks {
        let before = state.model.parameter_count();
        epochs.extend(train_task(&mut state, task, cfg, observer)?);
        let added = state.model.parameter_count() - before;
        if added != growth {
            return Err(Error::Contract(format!(
                "task {} added {added} parameters, expected {growth}",
                task.task_id
            )));
        }
        let snapshot = state.model.snapshot();
        let k = task.task_id;
        let row = (1..=k)
            .into_par_iter()
            .map(|j| evaluate(&snapshot, j, &tests[j - 1]))
            .collect::<Result<Vec<f64>>>()?;
        for (j, acc) in row.into_iter().enumerate() {
            state.matrix.set(k, j + 1, acc)?;
        }
        state.frozen = Some(snapshot);
    }
    Ok(RunOutcome {
        matrix: state.matrix,
        model: state.model,
        epochs,
        steps: state.step,
    })
}
