use pah::autodiff::{grad_check, Tape, Tensor, Var};
use pah::config::{RunConfig, SweepAxis};
use pah::datasets::{make_synthetic_tasks, ImageShape, SyntheticSpec};
use pah::losses::{
    hard_loss_main, kl_distill, soft_loss_main, soft_loss_prototypes, total_loss, total_loss_value,
    LossWeights, PrototypeTeacher,
};
use pah::metrics::{average_accuracy, forgetting, AccuracyMatrix};
use pah::model::{init_prototype_random, ModelDims, PahModel, Trainable};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const IDENTITY_TOL: f64 = 1e-9;
const PRIMITIVE_TOL: f64 = 1e-5;
const METRIC_TOL: f64 = 1e-12;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

fn matrix_strategy(
    max_rows: usize,
    max_cols: usize,
    lo: f64,
    hi: f64,
) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 2..=max_cols)
        .prop_flat_map(move |(r, c)| (Just(r), Just(c), prop::collection::vec(lo..hi, r * c)))
}

fn tiny_model(seed: u64, tasks: usize, classes: usize) -> PahModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        input: ImageShape::new(1, 4, 4),
        backbone_hidden: vec![5],
        feature_dim: 3,
        hyper_hidden: 4,
        classes_per_task: classes,
        prototype: ImageShape::new(1, 2, 2),
    };
    let mut model = PahModel::new(dims, &mut rng).unwrap();
    for t in 1..=tasks {
        let protos = (0..classes)
            .map(|c| init_prototype_random(model.dims.prototype, t, c, &mut rng))
            .collect();
        model.register_task(t, protos).unwrap();
    }
    model
}

fn inputs(seed: u64, rows: usize) -> Vec<f64> {
    (0..rows * 16)
        .map(|i| ((seed as f64 + 1.3) * (i as f64 + 0.7)).sin())
        .collect()
}

fn brute_force(rows: &[Vec<f64>]) -> (f64, Option<f64>) {
    let k = rows.len();
    let mut aa = 0.0;
    for j in 0..k {
        aa += rows[k - 1][j];
    }
    aa /= k as f64;
    if k < 2 {
        return (aa, None);
    }
    let mut fm = 0.0;
    for j in 0..k - 1 {
        let mut best = rows[j][j];
        for row in rows.iter().take(k - 1).skip(j + 1) {
            if row[j] > best {
                best = row[j];
            }
        }
        fm += best - rows[k - 1][j];
    }
    (aa, Some(fm / (k - 1) as f64))
}

fn triangle(k: usize, flat: &[f64]) -> Vec<Vec<f64>> {
    let mut it = flat.iter().copied();
    (1..=k).map(|l| it.by_ref().take(l).collect()).collect()
}

proptest! {
    #![proptest_config(cases(1000))]

    #[test]
    fn kl_is_non_negative_and_zero_on_identical_inputs(
        (rows, cols, a) in matrix_strategy(5, 6, -10.0, 10.0),
        b_seed in any::<u64>(),
        temperature in 0.25f64..4.0,
    ) {
        let b: Vec<f64> = (0..a.len()).map(|i| ((b_seed % 997) as f64 + i as f64 * 1.7).sin() * 8.0).collect();
        let tape = Tape::new();
        let p = tape.constant_from(&[rows, cols], a.clone()).unwrap();
        let q = tape.constant_from(&[rows, cols], b).unwrap();
        let kl_pq = tape.scalar(kl_distill(&tape, p, q, temperature).unwrap()).unwrap();
        prop_assert!(kl_pq >= -IDENTITY_TOL, "KL = {kl_pq}");
        let p2 = tape.constant_from(&[rows, cols], a).unwrap();
        let kl_pp = tape.scalar(kl_distill(&tape, p, p2, temperature).unwrap()).unwrap();
        prop_assert!(kl_pp.abs() <= IDENTITY_TOL, "KL(p||p) = {kl_pp}");
    }

    #[test]
    fn kl_teacher_receives_no_gradient((rows, cols, a) in matrix_strategy(4, 5, -5.0, 5.0)) {
        let tape = Tape::new();
        let old = tape.leaf(&Tensor::new(vec![rows, cols], a.clone()).unwrap().learnable());
        let shifted: Vec<f64> = a.iter().map(|v| v * 0.5 + 0.3).collect();
        let new = tape.leaf(&Tensor::new(vec![rows, cols], shifted).unwrap().learnable());
        let loss = kl_distill(&tape, old, new, 1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        prop_assert!(grads.get(old).is_none());
        prop_assert!(grads.get(new).is_some());
    }

    #[test]
    fn log_softmax_is_shift_invariant((rows, cols, a) in matrix_strategy(4, 8, -20.0, 20.0), shift in -100.0f64..100.0) {
        let tape = Tape::new();
        let x = tape.constant_from(&[rows, cols], a.clone()).unwrap();
        let y = tape.constant_from(&[rows, cols], a.iter().map(|v| v + shift).collect()).unwrap();
        let lx = tape.log_softmax(x).unwrap();
        let ly = tape.log_softmax(y).unwrap();
        let (lx, ly) = (tape.to_tensor(lx), tape.to_tensor(ly));
        for (u, v) in lx.data().iter().zip(ly.data()) {
            prop_assert!((u - v).abs() <= IDENTITY_TOL, "{u} vs {v}");
        }
    }

    #[test]
    fn total_loss_is_linear_in_each_component(
        parts in prop::array::uniform3(-10.0f64..10.0),
        other in prop::array::uniform3(-10.0f64..10.0),
        alpha in -3.0f64..3.0,
        stability in 0.0f64..2.0,
        lsp_weight in 0.0f64..3.0,
    ) {
        let w = LossWeights { stability, lsp_weight, temperature: 1.0 };
        let on_tape = |v: [f64; 3]| {
            let tape = Tape::new();
            let vars: Vec<Var> = v.iter().map(|&x| tape.constant(&Tensor::scalar(x))).collect();
            tape.scalar(total_loss(&tape, vars[0], vars[1], vars[2], &w).unwrap()).unwrap()
        };
        let combo: [f64; 3] = std::array::from_fn(|i| parts[i] + alpha * other[i]);
        let lhs = on_tape(combo);
        let rhs = on_tape(parts) + alpha * (on_tape(other) - on_tape([0.0; 3])) ;
        prop_assert!((lhs - rhs).abs() <= IDENTITY_TOL * (1.0 + lhs.abs()));
        prop_assert!((on_tape(parts) - total_loss_value(parts[0], parts[1], parts[2], &w)).abs() <= IDENTITY_TOL);
        prop_assert_eq!(on_tape([parts[0], 0.0, 0.0]), parts[0]);
    }

    #[test]
    fn first_task_has_no_distillation(seed in any::<u64>(), classes in 2usize..4, rows in 1usize..4) {
        let model = tiny_model(seed, 1, classes);
        let frozen = model.snapshot();
        let tape = Tape::new();
        let live = model.bind(&tape, &Trainable::all(&model));
        let old = frozen.bind(&tape);
        let x = tape.constant_from(&[rows, 16], inputs(seed, rows)).unwrap();
        let labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
        let hard = hard_loss_main(&tape, live.model_forward(x, 1).unwrap(), &labels).unwrap();
        let soft_main = soft_loss_main(&old, &live, x, 1, 1.0).unwrap();
        let soft_prototypes = soft_loss_prototypes(&old, &live, 1, PrototypeTeacher::Live, 1.0).unwrap();
        prop_assert_eq!(tape.scalar(soft_main).unwrap(), 0.0);
        prop_assert_eq!(tape.scalar(soft_prototypes).unwrap(), 0.0);
        let total = total_loss(&tape, hard, soft_main, soft_prototypes, &LossWeights::default()).unwrap();
        prop_assert_eq!(tape.scalar(total).unwrap(), tape.scalar(hard).unwrap());
    }

    #[test]
    fn distillation_vanishes_right_after_snapshot(seed in any::<u64>(), k in 2usize..5, rows in 1usize..4, temperature in 0.5f64..3.0) {
        let model = tiny_model(seed, k, 2);
        let frozen = model.snapshot();
        let tape = Tape::new();
        let live = model.bind(&tape, &Trainable::all(&model));
        let old = frozen.bind(&tape);
        let x = tape.constant_from(&[rows, 16], inputs(seed, rows)).unwrap();
        let soft_main = tape.scalar(soft_loss_main(&old, &live, x, k, temperature).unwrap()).unwrap();
        prop_assert!(soft_main.abs() <= IDENTITY_TOL, "soft main loss = {soft_main}");
        for teacher in [PrototypeTeacher::Live, PrototypeTeacher::Snapshot] {
            let soft_prototypes = tape.scalar(soft_loss_prototypes(&old, &live, k, teacher, temperature).unwrap()).unwrap();
            prop_assert!(soft_prototypes.abs() <= IDENTITY_TOL, "soft prototype loss = {soft_prototypes}");
        }
    }

    #[test]
    fn metrics_match_brute_force(k in 1usize..8, flat in prop::collection::vec(0.0f64..=1.0, 28)) {
        let rows = triangle(k, &flat);
        let m = AccuracyMatrix::from_rows(&rows).unwrap();
        let (aa, fm) = brute_force(&rows);
        prop_assert!((average_accuracy(&m).unwrap() - aa).abs() <= METRIC_TOL);
        match fm {
            Some(fm) => prop_assert!((forgetting(&m).unwrap() - fm).abs() <= METRIC_TOL),
            None => prop_assert!(forgetting(&m).is_err()),
        }
    }

    #[test]
    fn non_decreasing_columns_never_forget(k in 2usize..8, flat in prop::collection::vec(0.0f64..=0.1, 28)) {
        let mut rows = triangle(k, &flat);
        for l in 1..k {
            for j in 0..l {
                rows[l][j] = (rows[l - 1][j] + rows[l][j]).min(1.0);
            }
        }
        let m = AccuracyMatrix::from_rows(&rows).unwrap();
        prop_assert!(forgetting(&m).unwrap() <= 0.0);
    }

    #[test]
    fn average_accuracy_ignores_task_order(k in 1usize..8, flat in prop::collection::vec(0.0f64..=1.0, 28), rot in 0usize..8) {
        let rows = triangle(k, &flat);
        let mut last = rows[k - 1].clone();
        last.rotate_left(rot % k);
        let mut permuted = rows.clone();
        permuted[k - 1] = last;
        let a = average_accuracy(&AccuracyMatrix::from_rows(&rows).unwrap()).unwrap();
        let b = average_accuracy(&AccuracyMatrix::from_rows(&permuted).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= METRIC_TOL);
    }

    #[test]
    fn config_round_trips(
        stability in 0.0f64..2.0,
        lsp_weight in 0.0f64..3.0,
        lr in 1e-5f64..1e-1,
        epochs in 1usize..50,
        seed in any::<u64>(),
        proto in 1usize..32,
        hidden in prop::collection::vec(1usize..300, 1..4),
        snapshot in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.loss.stability = stability;
        cfg.loss.lsp_weight = lsp_weight;
        cfg.optimizer.main.learning_rate = lr;
        cfg.train.epochs = epochs;
        cfg.train.seed = seed;
        cfg.prototype.height = proto;
        cfg.prototype.width = proto;
        cfg.model.backbone_hidden = hidden;
        if snapshot {
            cfg.set("loss.prototype_teacher", "snapshot").unwrap();
        }
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(cases(100))]

    #[test]
    fn primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |shape: &[usize], lo: f64, hi: f64| {
            use rand::Rng;
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        let a = u(&[3, 4], -2.0, 2.0);
        let b = u(&[4, 2], -2.0, 2.0);
        let c = u(&[3, 4], -2.0, 2.0);
        let bias = u(&[4], -2.0, 2.0);
        let pos = u(&[3, 4], 0.5, 2.0);
        let kink = u(&[3, 4], 0.1, 2.0);
        let sign = u(&[3, 4], -1.0, 1.0);
        let kink = Tensor::new(vec![3, 4], kink.data().iter().zip(sign.data()).map(|(m, s)| m * s.signum()).collect()).unwrap();
        let img = u(&[2, 3, 3], -2.0, 2.0);
        let weights = u(&[3, 4], 0.5, 1.5);

        let weighted = |tape: &Tape, out: Var| -> pah::Result<Var> {
            let n: usize = tape.shape(out).iter().product();
            let w = tape.constant_from(&tape.shape(out), (0..n).map(|i| 0.5 + (i % 5) as f64 * 0.3).collect())?;
            Ok(tape.sum(tape.mul(out, w)?))
        };
        let constant = |tape: &Tape, t: &Tensor| tape.constant(t);
        type Case<'a> = (&'a str, &'a Tensor, Box<dyn Fn(&Tape, Var) -> pah::Result<Var> + 'a>);
        let checks: Vec<Case> = vec![
            ("matmul", &a, Box::new(|t, x| t.matmul(x, constant(t, &b)))),
            ("matmul_rhs", &b, Box::new(|t, x| t.matmul(constant(t, &a), x))),
            ("transpose", &a, Box::new(|t, x| t.transpose(x))),
            ("add", &a, Box::new(|t, x| t.add(x, constant(t, &c)))),
            ("add_bias", &bias, Box::new(|t, x| t.add(constant(t, &a), x))),
            ("sub", &a, Box::new(|t, x| t.sub(constant(t, &c), x))),
            ("mul", &a, Box::new(|t, x| t.mul(x, constant(t, &weights)))),
            ("scale", &a, Box::new(|t, x| Ok(t.scale(x, -1.3)))),
            ("relu", &kink, Box::new(|t, x| Ok(t.relu(x)))),
            ("exp", &a, Box::new(|t, x| Ok(t.exp(x)))),
            ("log", &pos, Box::new(|t, x| t.log(x))),
            ("sum", &a, Box::new(|t, x| Ok(t.sum(x)))),
            ("mean", &a, Box::new(|t, x| Ok(t.mean(x)))),
            ("log_softmax", &a, Box::new(|t, x| t.log_softmax(x))),
            ("reshape", &a, Box::new(|t, x| t.reshape(x, &[2, 6]))),
            ("slice", &a, Box::new(|t, x| t.slice(x, 2, 7))),
            ("concat", &a, Box::new(|t, x| t.concat(&[x, constant(t, &bias), x]))),
            ("resize_bilinear", &img, Box::new(|t, x| t.resize_bilinear(x, 5, 4))),
        ];
        for (name, input, op) in &checks {
            let err = grad_check(|t, x| weighted(t, op(t, x)?), input, 1e-6).unwrap();
            prop_assert!(err < PRIMITIVE_TOL, "{name}: {err:e}");
        }
    }

    #[test]
    fn shared_subexpressions_accumulate((rows, cols, a) in matrix_strategy(3, 4, -2.0, 2.0)) {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![rows, cols], a.clone()).unwrap().learnable());
        let sq = tape.mul(x, x).unwrap();
        let out = tape.sum(tape.add(sq, x).unwrap());
        let grads = tape.backward(out).unwrap();
        for (g, v) in grads.get(x).unwrap().iter().zip(&a) {
            prop_assert!((g - (2.0 * v + 1.0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn synthetic_splits_partition_classes_and_normalize(seed in any::<u64>(), tasks in 1usize..4, classes in 2usize..4) {
        let spec = SyntheticSpec {
            num_tasks: tasks,
            classes_per_task: classes,
            train_per_class: 5,
            test_per_class: 2,
            shape: ImageShape::new(2, 4, 4),
            ..SyntheticSpec::default()
        };
        let data = make_synthetic_tasks(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(data.len(), tasks);
        let mut seen: Vec<usize> = data.iter().flat_map(|t| t.classes.iter().copied()).collect();
        seen.sort_unstable();
        let before = seen.len();
        seen.dedup();
        prop_assert_eq!(before, seen.len());
        prop_assert_eq!(seen.len(), tasks * classes);

        let normed = data[0].normalized(&data[0].stats);
        let plane = spec.shape.plane();
        let n = normed.train.len();
        for ch in 0..spec.shape.channels {
            let values: Vec<f64> = (0..n)
                .flat_map(|i| normed.train.image(i, spec.shape)[ch * plane..(ch + 1) * plane].to_vec())
                .collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
            prop_assert!(mean.abs() <= 1e-6, "mean {mean}");
            prop_assert!((var.sqrt() - 1.0).abs() <= 1e-6, "std {}", var.sqrt());
        }
    }
}

#[test]
fn every_sweep_point_round_trips() {
    let base = RunConfig::default();
    assert_eq!(RunConfig::parse(&base.to_text()).unwrap(), base);
    for axis in SweepAxis::ALL {
        for value in axis.reference_values() {
            let cfg = base.with_axis(axis, value).unwrap();
            assert_eq!(
                RunConfig::parse(&cfg.to_text()).unwrap(),
                cfg,
                "{axis}={value}"
            );
        }
    }
}
