//! Backbone, hypernetwork and prototype bank, and their composition
//! `logits = head(backbone(x) | hypernet(flatten(prototypes of task k)))`.
//!
//! Parameters are plain [`Tensor`]s owned by [`PahModel`]. A forward pass
//! first binds the model onto a [`Tape`] with a [`Trainable`] selection;
//! parameters outside the selection enter the tape as constants, so they
//! can never appear in that pass's gradient set.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::datasets::{resize_bilinear, ChannelStats, ImageShape, TaskDataset};
use crate::error::{Error, Result};

/// Standard deviation of the hypernetwork output layer at init.
pub const HYPER_OUTPUT_INIT_STD: f64 = 0.01;
/// Standard deviation of randomly initialized prototypes.
pub const RANDOM_PROTOTYPE_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: ImageShape,
    /// Hidden widths of the backbone MLP, input side first.
    pub backbone_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub hyper_hidden: usize,
    pub classes_per_task: usize,
    /// Prototype shape; its channel count must match the input.
    pub prototype: ImageShape,
}

impl ModelDims {
    /// `E = C·ch·h_p·w_p`.
    pub fn embedding_dim(&self) -> usize {
        self.classes_per_task * self.prototype.numel()
    }

    /// `C·(d+1)`: weights and biases of one generated head.
    pub fn head_param_count(&self) -> usize {
        self.classes_per_task * (self.feature_dim + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.input.numel() > 0
            && self.prototype.numel() > 0
            && self.feature_dim > 0
            && self.hyper_hidden > 0
            && self.backbone_hidden.iter().all(|&h| h > 0);
        if !positive {
            return Err(Error::Contract(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if self.classes_per_task < 2 {
            return Err(Error::Contract("a task needs at least two classes".into()));
        }
        if self.prototype.channels != self.input.channels {
            return Err(Error::Contract(format!(
                "prototype channels {} differ from input channels {}",
                self.prototype.channels, self.input.channels
            )));
        }
        Ok(())
    }
}

/// Identifies one parameter tensor for optimizers and gradient audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    Backbone { layer: usize, bias: bool },
    Hypernet { layer: usize, bias: bool },
    Prototype { task: usize, class: usize },
}

impl ParamKey {
    pub fn group(&self) -> ParamGroup {
        match self {
            ParamKey::Backbone { .. } => ParamGroup::Backbone,
            ParamKey::Hypernet { .. } => ParamGroup::Hypernet,
            ParamKey::Prototype { task, .. } => ParamGroup::Prototypes(*task),
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = |bias: bool| if bias { "bias" } else { "weight" };
        match self {
            ParamKey::Backbone { layer, bias } => write!(f, "backbone.{layer}.{}", part(*bias)),
            ParamKey::Hypernet { layer, bias } => write!(f, "hypernet.{layer}.{}", part(*bias)),
            ParamKey::Prototype { task, class } => write!(f, "prototype.{task}.{class}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Hypernet,
    Prototypes(usize),
}

/// Affine map `x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights from `N(0, std²)`, zero bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Linear {
            weight: Tensor::new(vec![inputs, outputs], weight)
                .expect("consistent shape")
                .learnable(),
            bias: Tensor::zeros(&[outputs]).learnable(),
        }
    }

    /// He initialization for relu layers.
    pub fn he<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::init(inputs, outputs, (2.0 / inputs as f64).sqrt(), rng)
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    fn set_learnable(&mut self, learnable: bool) {
        self.weight.set_requires_grad(learnable);
        self.bias.set_requires_grad(learnable);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add(xw, self.bias)
    }
}

/// MLP feature extractor; every layer is followed by a relu.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Linear>,
}

impl Backbone {
    pub fn new<R: Rng>(inputs: usize, hidden: &[usize], features: usize, rng: &mut R) -> Self {
        let widths: Vec<usize> = std::iter::once(inputs)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(features))
            .collect();
        Backbone {
            layers: widths
                .windows(2)
                .map(|w| Linear::he(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }
}

/// Two-layer MLP mapping a task embedding to the flat parameters of a head.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypernetwork {
    pub hidden: Linear,
    pub output: Linear,
}

impl Hypernetwork {
    pub fn new<R: Rng>(embedding: usize, hidden: usize, head_params: usize, rng: &mut R) -> Self {
        Hypernetwork {
            hidden: Linear::he(embedding, hidden, rng),
            output: Linear::init(hidden, head_params, HYPER_OUTPUT_INIT_STD, rng),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.hidden.weight.numel()
            + self.hidden.bias.numel()
            + self.output.weight.numel()
            + self.output.bias.numel()
    }

    fn layers(&self) -> [&Linear; 2] {
        [&self.hidden, &self.output]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    /// `[ch, h_p, w_p]`.
    pub values: Tensor,
    pub task_id: usize,
    pub class_id: usize,
}

/// Prototype drawn from `N(0, 0.1²)`.
pub fn init_prototype_random<R: Rng>(
    shape: ImageShape,
    task_id: usize,
    class_id: usize,
    rng: &mut R,
) -> Prototype {
    let normal = Normal::new(0.0, RANDOM_PROTOTYPE_STD).expect("finite std");
    let data = (0..shape.numel()).map(|_| normal.sample(rng)).collect();
    Prototype {
        values: Tensor::new(shape.dims().to_vec(), data)
            .expect("consistent shape")
            .learnable(),
        task_id,
        class_id,
    }
}

/// Prototype copied from a uniformly chosen training image of `class_id`,
/// resized to `shape` and standardized with `stats`.
pub fn init_prototype_semantic<R: Rng>(
    dataset: &TaskDataset,
    class_id: usize,
    shape: ImageShape,
    stats: &ChannelStats,
    rng: &mut R,
) -> Result<Prototype> {
    let candidates = dataset.class_indices(class_id);
    let &index = candidates.choose(rng).ok_or_else(|| {
        Error::Dataset(format!(
            "task {} has no training sample of class {class_id}",
            dataset.task_id
        ))
    })?;
    let image = Tensor::new(
        dataset.shape.dims().to_vec(),
        dataset.train.image(index, dataset.shape).to_vec(),
    )?;
    let mut resized = resize_bilinear(&image, shape.height, shape.width)?;
    stats.normalize(resized.data_mut(), shape);
    Ok(Prototype {
        values: resized.learnable(),
        task_id: dataset.task_id,
        class_id,
    })
}

/// Per-task, per-class learnable prototypes, iterated in task then class order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    classes_per_task: usize,
    shape: ImageShape,
    tasks: BTreeMap<usize, Vec<Prototype>>,
}

impl PrototypeBank {
    pub fn new(classes_per_task: usize, shape: ImageShape) -> Self {
        PrototypeBank {
            classes_per_task,
            shape,
            tasks: BTreeMap::new(),
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn classes_per_task(&self) -> usize {
        self.classes_per_task
    }

    /// Adds the prototypes of the next task. Task ids are contiguous from 1
    /// and every task carries exactly `C` prototypes of the bank's shape.
    pub fn register(&mut self, task_id: usize, mut prototypes: Vec<Prototype>) -> Result<()> {
        let expected = self.tasks.len() + 1;
        if task_id != expected {
            return Err(Error::Protocol(format!(
                "expected task {expected} to be registered next, got {task_id}"
            )));
        }
        if prototypes.len() != self.classes_per_task {
            return Err(Error::Contract(format!(
                "task {task_id} has {} prototypes, expected {}",
                prototypes.len(),
                self.classes_per_task
            )));
        }
        prototypes.sort_by_key(|p| p.class_id);
        for (class, proto) in prototypes.iter().enumerate() {
            if proto.class_id != class || proto.task_id != task_id {
                return Err(Error::Contract(format!(
                    "prototype ids ({}, {}) do not match slot ({task_id}, {class})",
                    proto.task_id, proto.class_id
                )));
            }
            if proto.values.shape() != self.shape.dims() {
                return Err(Error::shape(
                    "register_prototype",
                    proto.values.shape(),
                    &self.shape.dims(),
                ));
            }
            if !proto.values.is_finite() {
                return Err(Error::Contract(format!(
                    "prototype ({task_id}, {class}) has non-finite values"
                )));
            }
        }
        self.tasks.insert(task_id, prototypes);
        Ok(())
    }

    pub fn task(&self, task_id: usize) -> Result<&[Prototype]> {
        self.tasks
            .get(&task_id)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownTask(task_id))
    }

    pub fn task_mut(&mut self, task_id: usize) -> Result<&mut [Prototype]> {
        self.tasks
            .get_mut(&task_id)
            .map(Vec::as_mut_slice)
            .ok_or(Error::UnknownTask(task_id))
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.tasks.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prototype> {
        self.tasks.values().flatten()
    }

    pub fn parameter_count(&self) -> usize {
        self.tasks.len() * self.classes_per_task * self.shape.numel()
    }

    /// Flattened concatenation of task `task_id`'s prototypes in class order.
    pub fn task_embedding(&self, task_id: usize) -> Result<Tensor> {
        let data = self
            .task(task_id)?
            .iter()
            .flat_map(|p| p.values.data().iter().copied())
            .collect();
        Ok(Tensor::from_vec(data))
    }
}

/// Generated head on the tape: `W: [C × d]`, `b: [C]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub weight: Var,
    pub bias: Var,
}

/// `features · Wᵀ + b`.
pub fn head_forward(tape: &Tape, features: Var, head: &HeadParams) -> Result<Var> {
    let wt = tape.transpose(head.weight)?;
    let logits = tape.matmul(features, wt)?;
    tape.add(logits, head.bias)
}

/// Which parameter groups enter the tape as learnable leaves.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub hypernet: bool,
    /// Task ids whose prototypes are learnable.
    pub prototype_tasks: Vec<usize>,
}

impl Trainable {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(model: &PahModel) -> Self {
        Trainable {
            backbone: true,
            hypernet: true,
            prototype_tasks: model.prototypes.task_ids().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PahModel {
    pub dims: ModelDims,
    pub backbone: Backbone,
    pub hypernet: Hypernetwork,
    pub prototypes: PrototypeBank,
}

impl PahModel {
    pub fn new<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let backbone = Backbone::new(
            dims.input.numel(),
            &dims.backbone_hidden,
            dims.feature_dim,
            rng,
        );
        let hypernet = Hypernetwork::new(
            dims.embedding_dim(),
            dims.hyper_hidden,
            dims.head_param_count(),
            rng,
        );
        let prototypes = PrototypeBank::new(dims.classes_per_task, dims.prototype);
        Ok(PahModel {
            dims,
            backbone,
            hypernet,
            prototypes,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.backbone.parameter_count()
            + self.hypernet.parameter_count()
            + self.prototypes.parameter_count()
    }

    pub fn register_task(&mut self, task_id: usize, prototypes: Vec<Prototype>) -> Result<()> {
        self.prototypes.register(task_id, prototypes)
    }

    /// Every parameter tensor with its key, backbone then hypernet then prototypes.
    pub fn parameters(&self) -> Vec<(ParamKey, &Tensor)> {
        let mut out = Vec::new();
        for (layer, l) in self.backbone.layers.iter().enumerate() {
            out.push((ParamKey::Backbone { layer, bias: false }, &l.weight));
            out.push((ParamKey::Backbone { layer, bias: true }, &l.bias));
        }
        for (layer, l) in self.hypernet.layers().into_iter().enumerate() {
            out.push((ParamKey::Hypernet { layer, bias: false }, &l.weight));
            out.push((ParamKey::Hypernet { layer, bias: true }, &l.bias));
        }
        for p in self.prototypes.iter() {
            out.push((
                ParamKey::Prototype {
                    task: p.task_id,
                    class: p.class_id,
                },
                &p.values,
            ));
        }
        out
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        fn pick(l: &mut Linear, bias: bool) -> &mut Tensor {
            if bias {
                &mut l.bias
            } else {
                &mut l.weight
            }
        }
        match key {
            ParamKey::Backbone { layer, bias } => {
                self.backbone.layers.get_mut(layer).map(|l| pick(l, bias))
            }
            ParamKey::Hypernet { layer, bias } => match layer {
                0 => Some(pick(&mut self.hypernet.hidden, bias)),
                1 => Some(pick(&mut self.hypernet.output, bias)),
                _ => None,
            },
            ParamKey::Prototype { task, class } => self
                .prototypes
                .task_mut(task)
                .ok()
                .and_then(|ps| ps.get_mut(class))
                .map(|p| &mut p.values),
        }
    }

    /// FNV-1a over the bit patterns of every tensor in `group`.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        checksum(
            self.parameters()
                .into_iter()
                .filter(|(k, _)| k.group() == group)
                .map(|(_, t)| t),
        )
    }

    /// Deep copy with every parameter marked non-learnable.
    pub fn snapshot(&self) -> FrozenModel {
        let mut inner = self.clone();
        for layer in &mut inner.backbone.layers {
            layer.set_learnable(false);
        }
        inner.hypernet.hidden.set_learnable(false);
        inner.hypernet.output.set_learnable(false);
        let ids: Vec<usize> = inner.prototypes.task_ids().collect();
        for id in ids {
            for p in inner.prototypes.task_mut(id).expect("listed task") {
                p.values.set_requires_grad(false);
            }
        }
        FrozenModel { inner }
    }

    pub fn bind<'m>(&'m self, tape: &'m Tape, trainable: &Trainable) -> BoundModel<'m> {
        BoundModel::new(self, tape, trainable)
    }

    /// Logits for a `[batch × ch·H·W]` image block under task `task_id`'s head.
    pub fn logits(&self, images: &[f64], task_id: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, &Trainable::none());
        let n = self.dims.input.numel();
        let x = tape.constant_from(&[images.len() / n.max(1), n], images.to_vec())?;
        let logits = bound.model_forward(x, task_id)?;
        Ok(tape.to_tensor(logits))
    }
}

/// Immutable copy of a [`PahModel`]; binds only as constants.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    inner: PahModel,
}

impl FrozenModel {
    pub fn model(&self) -> &PahModel {
        &self.inner
    }

    pub fn bind<'m>(&'m self, tape: &'m Tape) -> BoundModel<'m> {
        BoundModel::new(&self.inner, tape, &Trainable::none())
    }

    pub fn logits(&self, images: &[f64], task_id: usize) -> Result<Tensor> {
        self.inner.logits(images, task_id)
    }

    pub fn has_task(&self, task_id: usize) -> bool {
        self.inner.prototypes.task(task_id).is_ok()
    }
}

pub(crate) fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for t in tensors {
        for v in t.data() {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(PRIME);
            }
        }
    }
    hash
}

/// A model's parameters recorded on one tape.
pub struct BoundModel<'m> {
    model: &'m PahModel,
    tape: &'m Tape,
    backbone: Vec<LinearVars>,
    hypernet: [LinearVars; 2],
    prototypes: BTreeMap<(usize, usize), Var>,
    keys: Vec<(Var, ParamKey)>,
}

impl<'m> BoundModel<'m> {
    fn new(model: &'m PahModel, tape: &'m Tape, trainable: &Trainable) -> Self {
        let mut keys = Vec::new();
        let mut record = |tensor: &Tensor, key: ParamKey, learnable: bool| {
            if learnable && tensor.requires_grad() {
                let var = tape.leaf(tensor);
                keys.push((var, key));
                var
            } else {
                tape.constant(tensor)
            }
        };
        let mut bind_linear = |l: &Linear, layer: usize, hyper: bool, learnable: bool| {
            let key = |bias| {
                if hyper {
                    ParamKey::Hypernet { layer, bias }
                } else {
                    ParamKey::Backbone { layer, bias }
                }
            };
            LinearVars {
                weight: record(&l.weight, key(false), learnable),
                bias: record(&l.bias, key(true), learnable),
            }
        };
        let backbone = model
            .backbone
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| bind_linear(l, i, false, trainable.backbone))
            .collect();
        let hypernet = [
            bind_linear(&model.hypernet.hidden, 0, true, trainable.hypernet),
            bind_linear(&model.hypernet.output, 1, true, trainable.hypernet),
        ];
        let mut prototypes = BTreeMap::new();
        for p in model.prototypes.iter() {
            let learnable = trainable.prototype_tasks.contains(&p.task_id);
            let key = ParamKey::Prototype {
                task: p.task_id,
                class: p.class_id,
            };
            prototypes.insert((p.task_id, p.class_id), record(&p.values, key, learnable));
        }
        BoundModel {
            model,
            tape,
            backbone,
            hypernet,
            prototypes,
            keys,
        }
    }

    pub fn model(&self) -> &PahModel {
        self.model
    }

    pub fn tape(&self) -> &Tape {
        self.tape
    }

    /// Learnable leaves recorded for this binding.
    pub fn learnable_keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.keys.iter().map(|(_, k)| *k)
    }

    /// Gradients of this binding's learnable parameters, in binding order.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<(ParamKey, Vec<f64>)> {
        self.keys
            .iter()
            .filter_map(|(var, key)| grads.get(*var).map(|g| (*key, g.to_vec())))
            .collect()
    }

    pub fn prototype_var(&self, task: usize, class: usize) -> Result<Var> {
        self.prototypes
            .get(&(task, class))
            .copied()
            .ok_or(Error::UnknownTask(task))
    }

    pub fn prototype_vars(&self, task: usize) -> Result<Vec<Var>> {
        (0..self.model.dims.classes_per_task)
            .map(|c| self.prototype_var(task, c))
            .collect()
    }

    /// `[batch × ch·H·W]` (or `[batch, ch, H, W]`) → `[batch × d]`.
    pub fn backbone_forward(&self, x: Var) -> Result<Var> {
        let shape = self.tape.shape(x);
        let n = self.model.dims.input.numel();
        let ok = match shape.as_slice() {
            [_, f] => *f == n,
            [_, c, h, w] => [*c, *h, *w] == self.model.dims.input.dims(),
            _ => false,
        };
        if !ok {
            return Err(Error::shape(
                "backbone_forward",
                &shape,
                &self.model.dims.input.dims(),
            ));
        }
        let mut h = self.tape.reshape(x, &[shape[0], n])?;
        for layer in &self.backbone {
            h = self.tape.relu(layer.forward(self.tape, h)?);
        }
        Ok(h)
    }

    /// Concatenation of task `task`'s flattened prototypes.
    pub fn build_task_embedding(&self, task: usize) -> Result<Var> {
        self.model.prototypes.task(task)?;
        let parts = self.prototype_vars(task)?;
        self.tape.concat(&parts)
    }

    /// Embedding built from explicitly supplied prototype nodes.
    pub fn embedding_from(&self, prototypes: &[Var]) -> Result<Var> {
        if prototypes.len() != self.model.dims.classes_per_task {
            return Err(Error::Contract(format!(
                "embedding needs {} prototypes, got {}",
                self.model.dims.classes_per_task,
                prototypes.len()
            )));
        }
        self.tape.concat(prototypes)
    }

    pub fn hypernet_forward(&self, embedding: Var) -> Result<HeadParams> {
        let dims = &self.model.dims;
        let e = dims.embedding_dim();
        let shape = self.tape.shape(embedding);
        if shape.iter().product::<usize>() != e {
            return Err(Error::shape("hypernet_forward", &shape, &[e]));
        }
        let row = self.tape.reshape(embedding, &[1, e])?;
        let hidden = self.tape.relu(self.hypernet[0].forward(self.tape, row)?);
        let out = self.hypernet[1].forward(self.tape, hidden)?;
        let (c, d) = (dims.classes_per_task, dims.feature_dim);
        let weight = self.tape.slice(out, 0, c * d)?;
        let weight = self.tape.reshape(weight, &[c, d])?;
        let bias = self.tape.slice(out, c * d, c)?;
        Ok(HeadParams { weight, bias })
    }

    pub fn head_for_task(&self, task: usize) -> Result<HeadParams> {
        let e = self.build_task_embedding(task)?;
        self.hypernet_forward(e)
    }

    pub fn model_forward(&self, x: Var, task: usize) -> Result<Var> {
        let head = self.head_for_task(task)?;
        let features = self.backbone_forward(x)?;
        head_forward(self.tape, features, &head)
    }

    /// Upsamples prototype nodes `[ch, h_p, w_p]` to the input resolution
    /// and stacks them into a `[n × ch·H·W]` batch.
    pub fn prototype_batch(&self, prototypes: &[Var]) -> Result<Var> {
        let input = self.model.dims.input;
        let resized = prototypes
            .iter()
            .map(|&p| self.tape.resize_bilinear(p, input.height, input.width))
            .collect::<Result<Vec<_>>>()?;
        let flat = self.tape.concat(&resized)?;
        self.tape.reshape(flat, &[prototypes.len(), input.numel()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            input: ImageShape::new(1, 4, 4),
            backbone_hidden: vec![6],
            feature_dim: 5,
            hyper_hidden: 7,
            classes_per_task: 3,
            prototype: ImageShape::new(1, 2, 2),
        }
    }

    fn model_with_tasks(tasks: usize, seed: u64) -> PahModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims();
        let mut model = PahModel::new(d.clone(), &mut rng).unwrap();
        for t in 1..=tasks {
            let protos = (0..d.classes_per_task)
                .map(|c| init_prototype_random(d.prototype, t, c, &mut rng))
                .collect();
            model.register_task(t, protos).unwrap();
        }
        model
    }

    #[test]
    fn embedding_dim_for_reference_shape() {
        let d = ModelDims {
            input: ImageShape::new(3, 32, 32),
            backbone_hidden: vec![256],
            feature_dim: 64,
            hyper_hidden: 128,
            classes_per_task: 10,
            prototype: ImageShape::new(3, 10, 10),
        };
        assert_eq!(d.embedding_dim(), 3000);
        assert_eq!(d.head_param_count(), 650);
    }

    #[test]
    fn embedding_is_flatten_in_class_order() {
        let shape = ImageShape::new(1, 2, 2);
        let mut bank = PrototypeBank::new(2, shape);
        let p = |c: usize, v: [f64; 4]| Prototype {
            values: Tensor::new(vec![1, 2, 2], v.to_vec()).unwrap().learnable(),
            task_id: 1,
            class_id: c,
        };
        bank.register(
            1,
            vec![p(1, [5.0, 6.0, 7.0, 8.0]), p(0, [1.0, 2.0, 3.0, 4.0])],
        )
        .unwrap();
        assert_eq!(
            bank.task_embedding(1).unwrap().data(),
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
        );
        assert!(matches!(bank.task_embedding(2), Err(Error::UnknownTask(2))));
    }

    #[test]
    fn perturbing_one_class_touches_only_its_slot() {
        let mut model = model_with_tasks(1, 4);
        let before = model.prototypes.task_embedding(1).unwrap();
        model.prototypes.task_mut(1).unwrap()[2].values.data_mut()[1] += 1.0;
        let after = model.prototypes.task_embedding(1).unwrap();
        let n = dims().prototype.numel();
        for (i, (a, b)) in before.data().iter().zip(after.data()).enumerate() {
            assert_eq!(a != b, i == 2 * n + 1, "coordinate {i}");
            assert!(a == b || (2 * n..3 * n).contains(&i));
        }
    }

    #[test]
    fn registration_rules() {
        let mut model = model_with_tasks(1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let protos: Vec<_> = (0..3)
            .map(|c| init_prototype_random(dims().prototype, 3, c, &mut rng))
            .collect();
        assert!(matches!(
            model.register_task(3, protos),
            Err(Error::Protocol(_))
        ));
        let short: Vec<_> = (0..2)
            .map(|c| init_prototype_random(dims().prototype, 2, c, &mut rng))
            .collect();
        assert!(model.register_task(2, short).is_err());
        let wrong_shape: Vec<_> = (0..3)
            .map(|c| init_prototype_random(ImageShape::new(1, 3, 3), 2, c, &mut rng))
            .collect();
        assert!(model.register_task(2, wrong_shape).is_err());
    }

    #[test]
    fn zero_backbone_gives_zero_features() {
        let mut model = model_with_tasks(1, 6);
        for l in &mut model.backbone.layers {
            l.weight.data_mut().fill(0.0);
            l.bias.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let bound = model.bind(&tape, &Trainable::none());
        let x = tape
            .constant_from(&[2, 16], (0..32).map(f64::from).collect())
            .unwrap();
        let f = bound.backbone_forward(x).unwrap();
        assert!(tape.value(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backbone_rows_are_independent() {
        let model = model_with_tasks(1, 7);
        let sample: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let tape = Tape::new();
        let bound = model.bind(&tape, &Trainable::none());
        let one = tape.constant_from(&[1, 16], sample.clone()).unwrap();
        let four = tape.constant_from(&[4, 16], sample.repeat(4)).unwrap();
        let f1 = tape.value(bound.backbone_forward(one).unwrap()).to_vec();
        let f4 = tape.value(bound.backbone_forward(four).unwrap()).to_vec();
        for row in f4.chunks(f1.len()) {
            assert_eq!(row, f1.as_slice());
        }
    }

    #[test]
    fn backbone_rejects_wrong_input() {
        let model = model_with_tasks(1, 8);
        let tape = Tape::new();
        let bound = model.bind(&tape, &Trainable::none());
        let x = tape.constant_from(&[2, 15], vec![0.0; 30]).unwrap();
        assert!(matches!(
            bound.backbone_forward(x),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn head_forward_zero_and_identity() {
        let tape = Tape::new();
        let features = tape
            .constant_from(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0])
            .unwrap();
        let zero = HeadParams {
            weight: tape.constant_from(&[3, 3], vec![0.0; 9]).unwrap(),
            bias: tape.constant_from(&[3], vec![0.0; 3]).unwrap(),
        };
        let out = head_forward(&tape, features, &zero).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
        let mut eye = vec![0.0; 9];
        eye[0] = 1.0;
        eye[4] = 1.0;
        eye[8] = 1.0;
        let identity = HeadParams {
            weight: tape.constant_from(&[3, 3], eye).unwrap(),
            bias: zero.bias,
        };
        let out = head_forward(&tape, features, &identity).unwrap();
        assert_eq!(&*tape.value(out), &*tape.value(features));
    }

    #[test]
    fn hypernet_is_pure_and_sized() {
        let model = model_with_tasks(2, 9);
        let run = || {
            let tape = Tape::new();
            let bound = model.bind(&tape, &Trainable::none());
            let head = bound.head_for_task(1).unwrap();
            let w = tape.value(head.weight).to_vec();
            let b = tape.value(head.bias).to_vec();
            (w, b)
        };
        let (w1, b1) = run();
        let (w2, b2) = run();
        assert_eq!(w1, w2);
        assert_eq!(b1, b2);
        assert_eq!(w1.len() + b1.len(), dims().head_param_count());
    }

    #[test]
    fn model_forward_equals_manual_composition() {
        let model = model_with_tasks(2, 10);
        let images: Vec<f64> = (0..48).map(|i| (i as f64 * 0.17).cos()).collect();
        let composed = model.logits(&images, 2).unwrap();

        let tape = Tape::new();
        let bound = model.bind(&tape, &Trainable::none());
        let x = tape.constant_from(&[3, 16], images.clone()).unwrap();
        let features = bound.backbone_forward(x).unwrap();
        let e = bound.build_task_embedding(2).unwrap();
        let head = bound.hypernet_forward(e).unwrap();
        let manual = head_forward(&tape, features, &head).unwrap();
        assert_eq!(composed.data(), &*tape.value(manual));

        let other = model.logits(&images, 1).unwrap();
        assert_ne!(composed.data(), other.data());
        assert!(matches!(
            model.logits(&images, 3),
            Err(Error::UnknownTask(3))
        ));
    }

    #[test]
    fn other_tasks_heads_unaffected_by_prototype_edit() {
        let mut model = model_with_tasks(2, 11);
        let images: Vec<f64> = (0..16).map(f64::from).collect();
        let before = model.logits(&images, 1).unwrap();
        model.prototypes.task_mut(2).unwrap()[0].values.data_mut()[0] += 3.0;
        assert_eq!(model.logits(&images, 1).unwrap(), before);
    }

    #[test]
    fn snapshot_is_isolated_and_frozen() {
        let mut model = model_with_tasks(2, 12);
        let images: Vec<f64> = (0..32).map(|i| i as f64 / 10.0).collect();
        let frozen = model.snapshot();
        assert_eq!(
            frozen.logits(&images, 2).unwrap(),
            model.logits(&images, 2).unwrap()
        );
        let before = frozen.logits(&images, 2).unwrap();
        model.backbone.layers[0].weight.data_mut()[0] += 1.0;
        model.prototypes.task_mut(2).unwrap()[1].values.data_mut()[0] -= 1.0;
        assert_eq!(frozen.logits(&images, 2).unwrap(), before);
        assert!(frozen
            .model()
            .parameters()
            .iter()
            .all(|(_, t)| !t.requires_grad()));

        let tape = Tape::new();
        let bound = frozen.bind(&tape);
        assert_eq!(bound.learnable_keys().count(), 0);
    }

    #[test]
    fn semantic_init_of_constant_image() {
        let shape = ImageShape::new(2, 6, 6);
        let mut train = crate::datasets::Samples::default();
        train.images = vec![0.8; shape.numel()];
        train.labels = vec![0];
        let task = TaskDataset {
            task_id: 1,
            classes: vec![0, 1],
            shape,
            train,
            test: Default::default(),
            stats: ChannelStats::identity(2),
        };
        let stats = ChannelStats {
            mean: vec![0.5, 0.2],
            std: vec![0.25, 2.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p =
            init_prototype_semantic(&task, 0, ImageShape::new(2, 3, 3), &stats, &mut rng).unwrap();
        assert!(p.values.requires_grad());
        let (a, b) = p.values.data().split_at(9);
        assert!(a.iter().all(|v| (v - 1.2).abs() < 1e-12));
        assert!(b.iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert!(
            init_prototype_semantic(&task, 1, ImageShape::new(2, 3, 3), &stats, &mut rng).is_err()
        );
    }

    #[test]
    fn random_init_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = init_prototype_random(ImageShape::new(1, 100, 100), 1, 0, &mut rng);
        let n = p.values.numel() as f64;
        let mean = p.values.data().iter().sum::<f64>() / n;
        let std = (p
            .values
            .data()
            .iter()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((std - 0.1).abs() < 0.01, "{std}");
        let again = init_prototype_random(
            ImageShape::new(1, 100, 100),
            1,
            0,
            &mut ChaCha8Rng::seed_from_u64(42),
        );
        assert_eq!(again, p);
    }
}
