use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{PahModel, ParamKey};

/// A model whose parameter tensors are addressable by key.
pub trait ParameterSet {
    type Key: Copy + Ord + Display;

    fn keyed_parameters(&self) -> Vec<(Self::Key, &Tensor)>;

    fn parameter_mut(&mut self, key: Self::Key) -> Option<&mut Tensor>;
}

impl ParameterSet for PahModel {
    type Key = ParamKey;

    fn keyed_parameters(&self) -> Vec<(ParamKey, &Tensor)> {
        self.parameters()
    }

    fn parameter_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        self.param_mut(key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// SGD or Adam over an explicit set of parameter keys.
///
/// Gradients are read from (and cleared on) the model's tensors. A
/// gradient found on any tensor outside the registered set is a protocol
/// error and nothing is updated.
#[derive(Debug, Clone)]
pub struct Optimizer<K = ParamKey> {
    settings: OptimizerSettings,
    registered: BTreeSet<K>,
    moments: BTreeMap<K, Moments>,
    steps: u64,
}

impl<K: Copy + Ord + Display> Optimizer<K> {
    pub fn new(settings: OptimizerSettings, keys: impl IntoIterator<Item = K>) -> Self {
        Optimizer {
            settings,
            registered: keys.into_iter().collect(),
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn registered(&self) -> &BTreeSet<K> {
        &self.registered
    }

    pub fn step<M: ParameterSet<Key = K>>(&mut self, model: &mut M) -> Result<()> {
        let stray: Vec<String> = model
            .keyed_parameters()
            .into_iter()
            .filter(|(k, t)| t.grad().is_some() && !self.registered.contains(k))
            .map(|(k, _)| k.to_string())
            .collect();
        if !stray.is_empty() {
            return Err(Error::Protocol(format!(
                "gradients present on parameters not owned by this optimizer: {}",
                stray.join(", ")
            )));
        }
        self.steps += 1;
        let s = self.settings;
        let t = self.steps as i32;
        for key in &self.registered {
            let Some(param) = model.parameter_mut(*key) else {
                continue;
            };
            let Some(grad) = param.take_grad() else {
                continue;
            };
            match s.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in param.data_mut().iter_mut().zip(&grad) {
                        *p -= s.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.moments.entry(*key).or_insert_with(|| Moments {
                        first: vec![0.0; grad.len()],
                        second: vec![0.0; grad.len()],
                    });
                    let c1 = 1.0 - s.beta1.powi(t);
                    let c2 = 1.0 - s.beta2.powi(t);
                    for (((p, g), m1), m2) in param
                        .data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .zip(m.first.iter_mut())
                        .zip(m.second.iter_mut())
                    {
                        *m1 = s.beta1 * *m1 + (1.0 - s.beta1) * g;
                        *m2 = s.beta2 * *m2 + (1.0 - s.beta2) * g * g;
                        *p -= s.learning_rate * (*m1 / c1) / ((*m2 / c2).sqrt() + s.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ImageShape;
    use crate::model::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> PahModel {
        let dims = ModelDims {
            input: ImageShape::new(1, 2, 2),
            backbone_hidden: vec![3],
            feature_dim: 2,
            hyper_hidden: 3,
            classes_per_task: 2,
            prototype: ImageShape::new(1, 1, 1),
        };
        PahModel::new(dims, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut m = model();
        let key = ParamKey::Backbone {
            layer: 0,
            bias: true,
        };
        let before = m.param_mut(key).unwrap().data().to_vec();
        m.param_mut(key)
            .unwrap()
            .accumulate_grad(&[1.0, -2.0, 0.0])
            .unwrap();
        let mut opt = Optimizer::new(
            OptimizerSettings {
                kind: OptimizerKind::Sgd,
                learning_rate: 0.5,
                ..OptimizerSettings::default()
            },
            [key],
        );
        opt.step(&mut m).unwrap();
        let after = m.param_mut(key).unwrap();
        assert_eq!(after.data()[0], before[0] - 0.5);
        assert_eq!(after.data()[1], before[1] + 1.0);
        assert!(after.grad().is_none());
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        let mut m = model();
        let key = ParamKey::Hypernet {
            layer: 1,
            bias: true,
        };
        let before = m.param_mut(key).unwrap().data().to_vec();
        m.param_mut(key)
            .unwrap()
            .accumulate_grad(&[3.0, -0.01, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let mut opt = Optimizer::new(OptimizerSettings::default(), [key]);
        opt.step(&mut m).unwrap();
        let after = m.param_mut(key).unwrap().data().to_vec();
        assert!((after[0] - (before[0] - 1e-3)).abs() < 1e-9);
        assert!((after[1] - (before[1] + 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn stray_gradient_is_rejected() {
        let mut m = model();
        let owned = ParamKey::Backbone {
            layer: 0,
            bias: true,
        };
        let foreign = ParamKey::Backbone {
            layer: 1,
            bias: true,
        };
        m.param_mut(foreign)
            .unwrap()
            .accumulate_grad(&[1.0, 1.0])
            .unwrap();
        let snapshot = m.clone();
        let mut opt = Optimizer::new(OptimizerSettings::default(), [owned]);
        assert!(matches!(opt.step(&mut m), Err(Error::Protocol(_))));
        assert_eq!(m, snapshot);
        assert_eq!(opt.steps(), 0);
    }
}
