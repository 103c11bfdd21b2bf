//! Finite-difference battery over every primitive, every loss and a full
//! training step, as run by the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{GradCheck, Primitive, Tape, Tensor, Var};
use crate::datasets::ImageShape;
use crate::error::{Error, Result};
use crate::losses::{
    hard_loss_main, kl_distill, soft_loss_main, soft_loss_prototypes, total_loss, LossWeights,
    PrototypeTeacher,
};
use crate::model::{
    head_forward, init_prototype_random, BoundModel, FrozenModel, ModelDims, PahModel, Trainable,
};
use crate::optim::ParameterSet;

/// Relative-error bound for primitives and standalone losses.
pub const PRIMITIVE_THRESHOLD: f64 = 1e-5;
/// Relative-error bound for losses evaluated through the full model.
pub const STEP_THRESHOLD: f64 = 1e-4;
/// Finite-difference step.
pub const EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("consistent shape")
        .learnable()
}

/// Uniform values with magnitude at least `gap`, away from the relu kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
        .expect("consistent shape")
        .learnable()
}

/// `Σ out ⊙ w` with fixed, non-uniform weights so every output element
/// contributes a distinct cotangent.
fn weighted_sum(tape: &Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out);
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| 0.5 + ((i * 7) % 11) as f64 / 10.0).collect();
    let w = tape.constant_from(&shape, w)?;
    Ok(tape.sum(tape.mul(out, w)?))
}

/// Inputs and forward rule exercising one primitive.
fn primitive_case(
    p: Primitive,
    rng: &mut ChaCha8Rng,
) -> (Vec<Tensor>, Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>) {
    let u = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -2.0, 2.0);
    match p {
        Primitive::MatMul => (
            vec![u(rng, &[2, 3]), u(rng, &[3, 4])],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        Primitive::Transpose => (vec![u(rng, &[2, 3])], Box::new(|t, v| t.transpose(v[0]))),
        Primitive::Add => (
            vec![u(rng, &[2, 3]), u(rng, &[2, 3])],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        Primitive::AddBias => (
            vec![u(rng, &[4, 3]), u(rng, &[3])],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        Primitive::Sub => (
            vec![u(rng, &[2, 3]), u(rng, &[2, 3])],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        Primitive::Mul => (
            vec![u(rng, &[2, 3]), u(rng, &[2, 3])],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        Primitive::Scale => (
            vec![u(rng, &[2, 3])],
            Box::new(|t, v| Ok(t.scale(v[0], -1.7))),
        ),
        Primitive::Relu => (
            vec![off_kink(rng, &[3, 4], 0.1)],
            Box::new(|t, v| Ok(t.relu(v[0]))),
        ),
        Primitive::Exp => (vec![u(rng, &[2, 3])], Box::new(|t, v| Ok(t.exp(v[0])))),
        Primitive::Log => (
            vec![uniform(rng, &[2, 3], 0.5, 2.0)],
            Box::new(|t, v| t.log(v[0])),
        ),
        Primitive::Sum => (vec![u(rng, &[2, 3])], Box::new(|t, v| Ok(t.sum(v[0])))),
        Primitive::Mean => (vec![u(rng, &[2, 3])], Box::new(|t, v| Ok(t.mean(v[0])))),
        Primitive::LogSoftmax => (vec![u(rng, &[3, 4])], Box::new(|t, v| t.log_softmax(v[0]))),
        Primitive::Reshape => (
            vec![u(rng, &[2, 3])],
            Box::new(|t, v| t.reshape(v[0], &[3, 2])),
        ),
        Primitive::Slice => (vec![u(rng, &[2, 3])], Box::new(|t, v| t.slice(v[0], 1, 4))),
        Primitive::Concat => (
            vec![u(rng, &[2, 3]), u(rng, &[4])],
            Box::new(|t, v| t.concat(&[v[0], v[1]])),
        ),
        Primitive::ResizeBilinear => (
            vec![u(rng, &[2, 3, 4])],
            Box::new(|t, v| t.resize_bilinear(v[0], 5, 2)),
        ),
    }
}

/// Checks one primitive through `Σ op(x) ⊙ w`.
pub fn check_primitive(p: Primitive, fault: Option<Primitive>) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(p as u64);
    let (inputs, op) = primitive_case(p, &mut rng);
    let err = GradCheck::new(EPSILON)?
        .with_fault(fault)
        .max_relative_error(&inputs, |t, v| weighted_sum(t, op(t, v)?))?;
    Ok(CheckResult {
        name: p.name().into(),
        max_error: err,
        threshold: PRIMITIVE_THRESHOLD,
    })
}

fn standalone_losses(fault: Option<Primitive>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let check = GradCheck::new(EPSILON)?.with_fault(fault);
    let result = |name: &str, max_error| CheckResult {
        name: name.into(),
        max_error,
        threshold: PRIMITIVE_THRESHOLD,
    };
    let logits = uniform(&mut rng, &[5, 4], -3.0, 3.0);
    let labels = [0, 3, 1, 1, 2];
    let hard = check.max_relative_error(std::slice::from_ref(&logits), |t, v| {
        hard_loss_main(t, v[0], &labels)
    })?;

    let mut teacher = uniform(&mut rng, &[5, 4], -3.0, 3.0);
    teacher.set_requires_grad(false);
    let inputs = [teacher, logits];
    let kl = check.max_relative_error(&inputs, |t, v| kl_distill(t, v[0], v[1], 1.0))?;
    let kl_t = check.max_relative_error(&inputs, |t, v| kl_distill(t, v[0], v[1], 2.5))?;

    let parts = [
        Tensor::scalar(0.7).learnable(),
        Tensor::scalar(1.3).learnable(),
        Tensor::scalar(-0.4).learnable(),
    ];
    let weights = LossWeights {
        stability: 0.8,
        lsp_weight: 1.5,
        temperature: 1.0,
    };
    let total =
        check.max_relative_error(&parts, |t, v| total_loss(t, v[0], v[1], v[2], &weights))?;
    Ok(vec![
        result("hard_loss_main", hard),
        result("kl_distill", kl),
        result("kl_distill_temperature", kl_t),
        result("total_loss", total),
    ])
}

/// Max relative error between the tape gradient of `loss` with respect to
/// the parameters selected by `trainable` and central differences taken
/// by perturbing the model's own tensors.
pub fn check_model_loss<F>(
    model: &PahModel,
    trainable: &Trainable,
    fault: Option<Primitive>,
    eps: f64,
    loss: F,
) -> Result<f64>
where
    F: Fn(&BoundModel<'_>) -> Result<Var>,
{
    check_model_loss_against(model, trainable, fault, eps, &loss, &loss)
}

/// As [`check_model_loss`], with central differences taken on `reference`
/// instead. Used when `loss` stops gradients through a teacher that reads
/// live parameters: the reference holds that teacher at its current values.
pub fn check_model_loss_against<F, G>(
    model: &PahModel,
    trainable: &Trainable,
    fault: Option<Primitive>,
    eps: f64,
    loss: F,
    reference: G,
) -> Result<f64>
where
    F: Fn(&BoundModel<'_>) -> Result<Var>,
    G: Fn(&BoundModel<'_>) -> Result<Var>,
{
    let tape = match fault {
        Some(p) => Tape::with_fault(p),
        None => Tape::new(),
    };
    let bound = model.bind(&tape, trainable);
    let out = loss(&bound)?;
    let analytic = bound.collect_grads(&tape.backward(out)?);
    let keys: Vec<_> = bound.learnable_keys().collect();
    drop(bound);

    let evaluate = |m: &PahModel| -> Result<f64> {
        let tape = Tape::new();
        let bound = m.bind(&tape, trainable);
        let out = reference(&bound)?;
        tape.scalar(out)
    };
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for key in keys {
        let grad = analytic
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; probe.parameter_mut(key).map_or(0, |t| t.numel())]);
        for (index, a) in grad.into_iter().enumerate() {
            let origin = probe.parameter_mut(key).expect("bound key").data()[index];
            probe.parameter_mut(key).expect("bound key").data_mut()[index] = origin + eps;
            let plus = evaluate(&probe)?;
            probe.parameter_mut(key).expect("bound key").data_mut()[index] = origin - eps;
            let minus = evaluate(&probe)?;
            probe.parameter_mut(key).expect("bound key").data_mut()[index] = origin;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Small two-task fixture: a frozen copy after task 1 and a perturbed live
/// model holding tasks 1 and 2, plus a batch of task-2 inputs.
pub struct StepFixture {
    pub live: PahModel,
    pub frozen: FrozenModel,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl StepFixture {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims {
            input: ImageShape::new(2, 4, 4),
            backbone_hidden: vec![6],
            feature_dim: 4,
            hyper_hidden: 5,
            classes_per_task: 3,
            prototype: ImageShape::new(2, 2, 3),
        };
        let mut model = PahModel::new(dims.clone(), &mut rng)?;
        let protos = |task, rng: &mut ChaCha8Rng| {
            (0..dims.classes_per_task)
                .map(|c| init_prototype_random(dims.prototype, task, c, rng))
                .collect()
        };
        let first = protos(1, &mut rng);
        model.register_task(1, first)?;
        // Enlarge the tiny default output scale so that the heads matter.
        for v in model.hypernet.output.weight.data_mut() {
            *v *= 50.0;
        }
        let frozen = model.snapshot();
        let keys: Vec<_> = model.parameters().into_iter().map(|(k, _)| k).collect();
        for key in keys {
            for v in model.param_mut(key).expect("listed key").data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        let second = protos(2, &mut rng);
        model.register_task(2, second)?;
        let batch = 4;
        let images = (0..batch * dims.input.numel())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let labels = (0..batch).map(|i| i % dims.classes_per_task).collect();
        Ok(StepFixture {
            live: model,
            frozen,
            images,
            labels,
        })
    }

    fn input(&self, tape: &Tape) -> Result<Var> {
        let n = self.live.dims.input.numel();
        tape.constant_from(&[self.labels.len(), n], self.images.clone())
    }

    pub fn main_trainable() -> Trainable {
        Trainable {
            backbone: true,
            hypernet: true,
            prototype_tasks: vec![2],
        }
    }

    pub fn proto_trainable() -> Trainable {
        Trainable {
            backbone: false,
            hypernet: false,
            prototype_tasks: vec![1],
        }
    }

    /// Hard loss plus stability-weighted main distillation for task 2.
    pub fn main_loss(&self, live: &BoundModel<'_>, weights: &LossWeights) -> Result<Var> {
        let tape = live.tape();
        let x = self.input(tape)?;
        let logits = head_forward(tape, live.backbone_forward(x)?, &live.head_for_task(2)?)?;
        let hard = hard_loss_main(tape, logits, &self.labels)?;
        let old = self.frozen.bind(tape);
        let soft_main = soft_loss_main(&old, live, x, 2, weights.temperature)?;
        Ok(tape.add(hard, tape.scale(soft_main, weights.main_distill_weight()))?)
    }

    /// Weighted prototype distillation for task 2.
    pub fn proto_loss(
        &self,
        live: &BoundModel<'_>,
        weights: &LossWeights,
        teacher: PrototypeTeacher,
    ) -> Result<Var> {
        let tape = live.tape();
        let old = self.frozen.bind(tape);
        let soft_prototypes = soft_loss_prototypes(&old, live, 2, teacher, weights.temperature)?;
        Ok(tape.scale(soft_prototypes, weights.prototype_distill_weight()))
    }

    /// Frozen model whose task-1 prototypes are replaced by the live ones.
    pub fn live_teacher(&self) -> Result<FrozenModel> {
        let mut teacher = self.frozen.model().clone();
        for (dst, src) in teacher
            .prototypes
            .task_mut(1)?
            .iter_mut()
            .zip(self.live.prototypes.task(1)?)
        {
            dst.values = src.values.clone();
        }
        Ok(teacher.snapshot())
    }

    /// Weighted prototype distillation against an explicit teacher model.
    pub fn proto_loss_with(
        &self,
        live: &BoundModel<'_>,
        teacher: &FrozenModel,
        weights: &LossWeights,
    ) -> Result<Var> {
        let tape = live.tape();
        let soft_prototypes = soft_loss_prototypes(
            &teacher.bind(tape),
            live,
            2,
            PrototypeTeacher::Snapshot,
            weights.temperature,
        )?;
        Ok(tape.scale(soft_prototypes, weights.prototype_distill_weight()))
    }

    pub fn soft_main(&self, live: &BoundModel<'_>) -> Result<Var> {
        let tape = live.tape();
        let x = self.input(tape)?;
        soft_loss_main(&self.frozen.bind(tape), live, x, 2, 1.0)
    }
}

fn model_losses(fault: Option<Primitive>) -> Result<Vec<CheckResult>> {
    let fx = StepFixture::new(7)?;
    let weights = LossWeights::default();
    let all = Trainable::all(&fx.live);
    let teacher = fx.live_teacher()?;
    let live_sp = |b: &BoundModel<'_>| fx.proto_loss(b, &weights, PrototypeTeacher::Live);
    let held_sp = |b: &BoundModel<'_>| fx.proto_loss_with(b, &teacher, &weights);
    let run = |name: &str,
               trainable: &Trainable,
               f: &dyn Fn(&BoundModel<'_>) -> Result<Var>,
               r: &dyn Fn(&BoundModel<'_>) -> Result<Var>|
     -> Result<CheckResult> {
        Ok(CheckResult {
            name: name.into(),
            max_error: check_model_loss_against(&fx.live, trainable, fault, EPSILON, f, r)?,
            threshold: STEP_THRESHOLD,
        })
    };
    let soft_main = |b: &BoundModel<'_>| fx.soft_main(b);
    let snapshot_sp = |b: &BoundModel<'_>| fx.proto_loss(b, &weights, PrototypeTeacher::Snapshot);
    let main = |b: &BoundModel<'_>| fx.main_loss(b, &weights);
    Ok(vec![
        run("soft_loss_main", &all, &soft_main, &soft_main)?,
        run("soft_loss_prototypes_live", &all, &live_sp, &held_sp)?,
        run(
            "soft_loss_prototypes_snapshot",
            &all,
            &snapshot_sp,
            &snapshot_sp,
        )?,
        run("main_step", &StepFixture::main_trainable(), &main, &main)?,
        run(
            "proto_step",
            &StepFixture::proto_trainable(),
            &live_sp,
            &held_sp,
        )?,
    ])
}

/// Every check, primitives first. `fault` corrupts one backward rule on
/// the analytic side only.
pub fn run_battery(fault: Option<Primitive>) -> Result<Vec<CheckResult>> {
    let mut results = Primitive::ALL
        .into_iter()
        .map(|p| check_primitive(p, fault))
        .collect::<Result<Vec<_>>>()?;
    results.extend(standalone_losses(fault)?);
    results.extend(model_losses(fault)?);
    Ok(results)
}

/// The first failing check as an error, if any.
pub fn first_failure(results: &[CheckResult]) -> Result<()> {
    match results.iter().find(|r| !r.passed()) {
        Some(r) => Err(Error::GradCheck {
            name: r.name.clone(),
            error: r.max_error,
            threshold: r.threshold,
        }),
        None => Ok(()),
    }
}
