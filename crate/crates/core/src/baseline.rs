//! Reference learner with one stored linear head per task and no
//! distillation. Trained on a task sequence it is naive fine-tuning; on a
//! single task it is the directly parameterized counterpart of a
//! hypernetwork-generated head.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::RunConfig;
use crate::datasets::{ImageShape, Samples, TaskDataset};
use crate::error::{Error, Result};
use crate::losses::hard_loss_main;
use crate::metrics::AccuracyMatrix;
use crate::model::{Backbone, Linear, LinearVars, HYPER_OUTPUT_INIT_STD};
use crate::optim::{Optimizer, ParameterSet};
use crate::trainer::{evaluate, validate_schedule, Classifier, EpochRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum HeadKey {
    Backbone { layer: usize, bias: bool },
    Head { task: usize, bias: bool },
}

impl fmt::Display for HeadKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = |bias: bool| if bias { "bias" } else { "weight" };
        match self {
            HeadKey::Backbone { layer, bias } => write!(f, "backbone.{layer}.{}", part(*bias)),
            HeadKey::Head { task, bias } => write!(f, "head.{task}.{}", part(*bias)),
        }
    }
}

/// Shared MLP backbone plus one `[d × C]` linear head per task.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredHeadModel {
    pub input: ImageShape,
    pub classes_per_task: usize,
    pub backbone: Backbone,
    pub heads: BTreeMap<usize, Linear>,
}

impl StoredHeadModel {
    pub fn new(cfg: &RunConfig, input: ImageShape, rng: &mut ChaCha8Rng) -> Self {
        StoredHeadModel {
            input,
            classes_per_task: cfg.dataset.classes_per_task,
            backbone: Backbone::new(
                input.numel(),
                &cfg.model.backbone_hidden,
                cfg.model.feature_dim,
                rng,
            ),
            heads: BTreeMap::new(),
        }
    }

    pub fn add_head(&mut self, task: usize, rng: &mut ChaCha8Rng) {
        let head = Linear::init(
            self.backbone.feature_dim(),
            self.classes_per_task,
            HYPER_OUTPUT_INIT_STD,
            rng,
        );
        self.heads.insert(task, head);
    }

    pub fn parameter_count(&self) -> usize {
        self.backbone.parameter_count()
            + self
                .heads
                .values()
                .map(|h| h.weight.numel() + h.bias.numel())
                .sum::<usize>()
    }

    /// Logits of head `task`. With `learnable`, the backbone and that head
    /// enter the tape as leaves and are returned with their keys.
    fn forward(
        &self,
        tape: &Tape,
        images: Vec<f64>,
        task: usize,
        learnable: bool,
    ) -> Result<(Vec<(HeadKey, Var)>, Var)> {
        let head = self.heads.get(&task).ok_or(Error::UnknownTask(task))?;
        let n = self.input.numel();
        let rows = images.len() / n.max(1);
        let mut bound = Vec::new();
        let mut bind = |l: &Linear, key: &dyn Fn(bool) -> HeadKey| {
            let mut var = |t: &Tensor, bias: bool| {
                if learnable {
                    let v = tape.leaf(t);
                    bound.push((key(bias), v));
                    v
                } else {
                    tape.constant(t)
                }
            };
            LinearVars {
                weight: var(&l.weight, false),
                bias: var(&l.bias, true),
            }
        };
        let mut layers = Vec::new();
        for (layer, l) in self.backbone.layers.iter().enumerate() {
            layers.push(bind(l, &|bias| HeadKey::Backbone { layer, bias }));
        }
        let head = bind(head, &|bias| HeadKey::Head { task, bias });
        let mut h = tape.constant_from(&[rows, n], images)?;
        for vars in layers {
            h = tape.relu(vars.forward(tape, h)?);
        }
        Ok((bound, head.forward(tape, h)?))
    }
}

impl ParameterSet for StoredHeadModel {
    type Key = HeadKey;

    fn keyed_parameters(&self) -> Vec<(HeadKey, &Tensor)> {
        let mut out = Vec::new();
        for (layer, l) in self.backbone.layers.iter().enumerate() {
            out.push((HeadKey::Backbone { layer, bias: false }, &l.weight));
            out.push((HeadKey::Backbone { layer, bias: true }, &l.bias));
        }
        for (&task, h) in &self.heads {
            out.push((HeadKey::Head { task, bias: false }, &h.weight));
            out.push((HeadKey::Head { task, bias: true }, &h.bias));
        }
        out
    }

    fn parameter_mut(&mut self, key: HeadKey) -> Option<&mut Tensor> {
        let (linear, bias) = match key {
            HeadKey::Backbone { layer, bias } => (self.backbone.layers.get_mut(layer)?, bias),
            HeadKey::Head { task, bias } => (self.heads.get_mut(&task)?, bias),
        };
        Some(if bias {
            &mut linear.bias
        } else {
            &mut linear.weight
        })
    }
}

impl Classifier for StoredHeadModel {
    fn input_shape(&self) -> ImageShape {
        self.input
    }

    fn logits(&self, images: &[f64], task: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let (_, logits) = self.forward(&tape, images.to_vec(), task, false)?;
        Ok(tape.to_tensor(logits))
    }
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub matrix: AccuracyMatrix,
    pub model: StoredHeadModel,
    pub epochs: Vec<EpochRecord>,
}

fn train_head_task(
    model: &mut StoredHeadModel,
    task: usize,
    train: &Samples,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
    step: &mut u64,
) -> Result<Vec<EpochRecord>> {
    model.add_head(task, rng);
    let keys: Vec<HeadKey> = model
        .keyed_parameters()
        .into_iter()
        .map(|(k, _)| k)
        .filter(|k| !matches!(k, HeadKey::Head { task: t, .. } if *t != task))
        .collect();
    let mut opt = Optimizer::new(cfg.optimizer.main, keys);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    for epoch in 1..=cfg.train.epochs {
        order.shuffle(rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.train.batch_size) {
            let (images, labels) = train.gather(batch, model.input);
            let tape = Tape::new();
            let (bound, logits) = model.forward(&tape, images, task, true)?;
            let loss = hard_loss_main(&tape, logits, &labels)?;
            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: *step,
                    detail: format!("baseline loss evaluated to {value}"),
                });
            }
            let grads = tape.backward(loss)?;
            for (key, var) in bound {
                if let Some(g) = grads.get(var) {
                    let g = g.to_vec();
                    model
                        .parameter_mut(key)
                        .expect("bound parameter exists")
                        .accumulate_grad(&g)?;
                }
            }
            opt.step(model)?;
            *step += 1;
            sum += value;
            batches += 1;
        }
        let hard = sum / batches as f64;
        records.push(EpochRecord {
            task,
            epoch,
            hard,
            soft_main: 0.0,
            soft_prototypes: 0.0,
            total: hard,
        });
    }
    Ok(records)
}

/// Naive fine-tuning: each task trains the shared backbone and a fresh
/// head with cross-entropy only. Uses the same dimensions, optimizer,
/// epochs, batch size and seed as a PAH run of `cfg`.
pub fn run_naive_sequence(tasks: &[TaskDataset], cfg: &RunConfig) -> Result<BaselineOutcome> {
    validate_schedule(tasks)?;
    let stats = tasks[0].stats.clone();
    let data: Vec<TaskDataset> = tasks.iter().map(|t| t.normalized(&stats)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = StoredHeadModel::new(cfg, tasks[0].shape, &mut rng);
    let mut matrix = AccuracyMatrix::new(tasks.len());
    let mut epochs = Vec::new();
    let mut step = 0;
    for task in &data {
        let k = task.task_id;
        epochs.extend(train_head_task(
            &mut model,
            k,
            &task.train,
            cfg,
            &mut rng,
            &mut step,
        )?);
        let row = (1..=k)
            .into_par_iter()
            .map(|j| evaluate(&model, j, &data[j - 1].test))
            .collect::<Result<Vec<f64>>>()?;
        for (j, acc) in row.into_iter().enumerate() {
            matrix.set(k, j + 1, acc)?;
        }
    }
    Ok(BaselineOutcome {
        matrix,
        model,
        epochs,
    })
}
