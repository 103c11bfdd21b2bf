use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    split_dataset, ChannelStats, ImageShape, Samples, SourceDataset, SplitSpec, TaskDataset,
};
use crate::autodiff::resize::ResizePlan;
use crate::error::{Error, Result};

/// Gaussian blobs around smooth per-class template images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shape: ImageShape,
    /// Per-pixel noise standard deviation.
    pub noise: f64,
    /// Side of the coarse random grid each template is upsampled from.
    pub template_grid: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_tasks: 5,
            classes_per_task: 4,
            train_per_class: 64,
            test_per_class: 32,
            shape: ImageShape::new(3, 16, 16),
            noise: 0.3,
            template_grid: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSource {
    pub dataset: SourceDataset,
    /// One template image per global class.
    pub templates: Vec<Vec<f64>>,
}

/// Draws `K·C` templates with pixel values in `[0, 1]` and samples
/// `template + N(0, noise²)` for each split.
pub fn synthetic_source<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<SyntheticSource> {
    if spec.noise < 0.0 || !spec.noise.is_finite() {
        return Err(Error::Dataset(format!(
            "invalid noise level {}",
            spec.noise
        )));
    }
    let shape = spec.shape;
    let grid = spec.template_grid.max(1);
    let classes = spec.num_tasks * spec.classes_per_task;
    let upsample = ResizePlan::new(shape.channels, grid, grid, shape.height, shape.width);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let coarse: Vec<f64> = (0..shape.channels * grid * grid)
                .map(|_| rng.random::<f64>())
                .collect();
            upsample.forward(&coarse)
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise).expect("noise validated above");
    let draw = |count: usize, rng: &mut R| {
        let mut samples = Samples::default();
        for (class, template) in templates.iter().enumerate() {
            for _ in 0..count {
                let image: Vec<f64> = template.iter().map(|t| t + noise.sample(rng)).collect();
                samples.push(&image, class);
            }
        }
        samples
    };
    let train = draw(spec.train_per_class, rng);
    let test = draw(spec.test_per_class, rng);
    let stats = ChannelStats::compute(&train.images, shape);
    Ok(SyntheticSource {
        dataset: SourceDataset {
            name: "synthetic".into(),
            shape,
            class_names: (0..classes).map(|c| format!("template_{c}")).collect(),
            train,
            test,
            stats,
        },
        templates: templates.clone(),
    })
}

/// Synthetic source split into `spec.num_tasks` tasks.
pub fn make_synthetic_tasks<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Vec<TaskDataset>> {
    let source = synthetic_source(spec, rng)?;
    split_dataset(
        &source.dataset,
        &SplitSpec {
            num_tasks: spec.num_tasks,
            classes_per_task: spec.classes_per_task,
            seed: rng.random(),
        },
    )
}
