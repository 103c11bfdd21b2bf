//! Classification and distillation objectives.
//!
//! * hard loss: mean cross-entropy on the current task's labels;
//! * soft main loss: `1/(k−1) Σ_j KL(old(x | j) ∥ new(x | j))` over past
//!   heads, evaluated on current-task inputs;
//! * soft prototype loss: `1/(k−1) Σ_j Σ_c KL(old(p_j^c | j) ∥ new(p_j^c | j))`.
//!
//! Every KL term keeps the teacher side detached: teacher logits are read
//! off the tape as plain values and re-enter as constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{head_forward, BoundModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Global distillation coefficient; the main distillation weight equals `stability`.
    pub stability: f64,
    /// Relative prototype-loss weight; the prototype distillation weight is `stability · lsp_weight`.
    pub lsp_weight: f64,
    /// Softmax temperature used on both sides of every KL term.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            stability: 0.5,
            lsp_weight: 1.0,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.stability >= 0.0 && self.lsp_weight >= 0.0) {
            return Err(Error::Contract(format!(
                "loss weights must be non-negative, got stability={} lsp_weight={}",
                self.stability, self.lsp_weight
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Contract(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn main_distill_weight(&self) -> f64 {
        self.stability
    }

    pub fn prototype_distill_weight(&self) -> f64 {
        self.stability * self.lsp_weight
    }
}

/// Which prototype values the teacher consumes in the prototype loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeTeacher {
    /// Current (live) prototype values feed both models.
    #[default]
    Live,
    /// The teacher uses the prototype values stored in its snapshot.
    Snapshot,
}

fn zero(tape: &Tape) -> Result<Var> {
    tape.constant_from(&[], vec![0.0])
}

fn batch_rows(tape: &Tape, logits: Var) -> Result<(usize, usize)> {
    match tape.shape(logits).as_slice() {
        [rows, classes] => Ok((*rows, *classes)),
        other => Err(Error::shape("loss", other, &[0, 0])),
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn hard_loss_main(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = batch_rows(tape, logits)?;
    if rows != labels.len() {
        return Err(Error::shape(
            "hard_loss_main",
            &[rows, classes],
            &[labels.len()],
        ));
    }
    let mut one_hot = vec![0.0; rows * classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        one_hot[i * classes + label] = 1.0;
    }
    let log_probs = tape.log_softmax(logits)?;
    let mask = tape.constant_from(&[rows, classes], one_hot)?;
    let picked = tape.sum(tape.mul(log_probs, mask)?);
    Ok(tape.scale(picked, -1.0 / rows as f64))
}

fn log_softmax_rows(values: &[f64], classes: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks(classes) {
        let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(scaled.iter().map(|v| v - lse));
    }
    out
}

/// Mean over the batch of `KL(softmax(old/T) ∥ softmax(new/T))`. The old
/// logits are treated as constants.
pub fn kl_distill(tape: &Tape, old_logits: Var, new_logits: Var, temperature: f64) -> Result<Var> {
    let old_shape = tape.shape(old_logits);
    let (rows, classes) = batch_rows(tape, new_logits)?;
    if old_shape != [rows, classes] {
        return Err(Error::shape("kl_distill", &old_shape, &[rows, classes]));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let teacher_log = log_softmax_rows(&tape.value(old_logits), classes, temperature);
    let teacher_prob: Vec<f64> = teacher_log.iter().map(|v| v.exp()).collect();
    let teacher_log = tape.constant_from(&[rows, classes], teacher_log)?;
    let teacher_prob = tape.constant_from(&[rows, classes], teacher_prob)?;

    let scaled = if temperature == 1.0 {
        new_logits
    } else {
        tape.scale(new_logits, 1.0 / temperature)
    };
    let student_log = tape.log_softmax(scaled)?;
    let gap = tape.sub(teacher_log, student_log)?;
    let kl = tape.sum(tape.mul(teacher_prob, gap)?);
    Ok(tape.scale(kl, 1.0 / rows as f64))
}

/// Soft main loss from precomputed features of the same input batch.
/// `old_features` come from the frozen model, `new_features` from the
/// live one; `k` is the current task.
pub fn soft_loss_main_from_features(
    old: &BoundModel<'_>,
    new: &BoundModel<'_>,
    old_features: Var,
    new_features: Var,
    k: usize,
    temperature: f64,
) -> Result<Var> {
    let tape = new.tape();
    if k <= 1 {
        return zero(tape);
    }
    let mut terms = Vec::with_capacity(k - 1);
    for j in 1..k {
        if old.model().prototypes.task(j).is_err() {
            return Err(Error::Protocol(format!(
                "frozen model has no task {j} while training task {k}"
            )));
        }
        let old_logits = head_forward(tape, old_features, &old.head_for_task(j)?)?;
        let new_logits = head_forward(tape, new_features, &new.head_for_task(j)?)?;
        terms.push(kl_distill(tape, old_logits, new_logits, temperature)?);
    }
    average(tape, &terms)
}

/// `1/(k−1) Σ_{j<k} KL(old(x | j) ∥ new(x | j))`; exactly zero for `k = 1`.
pub fn soft_loss_main(
    old: &BoundModel<'_>,
    new: &BoundModel<'_>,
    x: Var,
    k: usize,
    temperature: f64,
) -> Result<Var> {
    let tape = new.tape();
    if k <= 1 {
        return zero(tape);
    }
    let detached = tape.detach(x);
    let old_features = old.backbone_forward(detached)?;
    let new_features = new.backbone_forward(x)?;
    soft_loss_main_from_features(old, new, old_features, new_features, k, temperature)
}

/// `1/(k−1) Σ_{j<k} Σ_c KL(old(p_j^c | j) ∥ new(p_j^c | j))`; exactly zero
/// for `k = 1`. Prototypes are upsampled to the input resolution before
/// the backbone and also form the embedding that generates head `j`.
pub fn soft_loss_prototypes(
    old: &BoundModel<'_>,
    new: &BoundModel<'_>,
    k: usize,
    teacher: PrototypeTeacher,
    temperature: f64,
) -> Result<Var> {
    let tape = new.tape();
    if k <= 1 {
        return zero(tape);
    }
    let mut terms = Vec::with_capacity(k - 1);
    for j in 1..k {
        let student_protos = new.prototype_vars(j)?;
        let teacher_protos = match teacher {
            PrototypeTeacher::Live => student_protos.iter().map(|&p| tape.detach(p)).collect(),
            PrototypeTeacher::Snapshot => old.prototype_vars(j)?,
        };
        let logits = |model: &BoundModel<'_>, protos: &[Var]| -> Result<Var> {
            let head = model.hypernet_forward(model.embedding_from(protos)?)?;
            let features = model.backbone_forward(model.prototype_batch(protos)?)?;
            head_forward(tape, features, &head)
        };
        let old_logits = logits(old, &teacher_protos)?;
        let new_logits = logits(new, &student_protos)?;
        // kl_distill averages over the C prototype rows; the loss sums them.
        let mean = kl_distill(tape, old_logits, new_logits, temperature)?;
        terms.push(tape.scale(mean, student_protos.len() as f64));
    }
    average(tape, &terms)
}

fn average(tape: &Tape, terms: &[Var]) -> Result<Var> {
    let stacked = tape.concat(terms)?;
    Ok(tape.mean(stacked))
}

/// Weighted sum `hard + w_main·soft_main + w_proto·soft_prototypes` on the tape.
pub fn total_loss(
    tape: &Tape,
    hard: Var,
    soft_main: Var,
    soft_prototypes: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let sm = tape.scale(soft_main, weights.main_distill_weight());
    let sp = tape.scale(soft_prototypes, weights.prototype_distill_weight());
    let partial = tape.add(hard, sm)?;
    tape.add(partial, sp)
}

/// Plain-value form of [`total_loss`].
pub fn total_loss_value(
    hard: f64,
    soft_main: f64,
    soft_prototypes: f64,
    weights: &LossWeights,
) -> f64 {
    hard + weights.main_distill_weight() * soft_main
        + weights.prototype_distill_weight() * soft_prototypes
}
