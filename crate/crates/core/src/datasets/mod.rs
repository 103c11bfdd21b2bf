//! Task-split data pipeline.
//!
//! A [`SourceDataset`] holds every class with global labels. [`split_dataset`]
//! shuffles the class ids and deals them into tasks of equal size; each
//! [`TaskDataset`] relabels its samples to local indices `0..C`.

mod archive;
mod synthetic;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use archive::{ingest_image_archive, write_image_archive, ArchiveManifest};
pub use synthetic::{make_synthetic_tasks, synthetic_source, SyntheticSpec};

use crate::autodiff::resize::ResizePlan;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Lower bound applied to per-channel standard deviations.
pub const STD_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Per-channel mean and (clamped) population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics over every pixel of every image in `images`.
    pub fn compute(images: &[f64], shape: ImageShape) -> Self {
        let plane = shape.plane();
        let count = (images.len() / shape.numel()) * plane;
        let mut mean = vec![0.0; shape.channels];
        let mut var = vec![0.0; shape.channels];
        if count == 0 {
            return ChannelStats {
                mean,
                std: vec![1.0; shape.channels],
            };
        }
        for image in images.chunks(shape.numel()) {
            for (c, channel) in image.chunks(plane).enumerate() {
                mean[c] += channel.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for image in images.chunks(shape.numel()) {
            for (c, channel) in image.chunks(plane).enumerate() {
                var[c] += channel.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count as f64).sqrt().max(STD_EPSILON))
            .collect();
        ChannelStats { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Standardizes a batch of `shape`-sized images in place.
    pub fn normalize(&self, images: &mut [f64], shape: ImageShape) {
        let plane = shape.plane();
        for image in images.chunks_mut(shape.numel()) {
            for (c, channel) in image.chunks_mut(plane).enumerate() {
                let (m, s) = (self.mean[c], self.std[c]);
                channel.iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
    }
}

/// Flat image storage with one label per image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Samples {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize, shape: ImageShape) -> &[f64] {
        let n = shape.numel();
        &self.images[index * n..(index + 1) * n]
    }

    pub fn push(&mut self, image: &[f64], label: usize) {
        self.images.extend_from_slice(image);
        self.labels.push(label);
    }

    /// Gathers the rows listed in `indices` into a `[len × numel]` batch.
    pub fn gather(&self, indices: &[usize], shape: ImageShape) -> (Vec<f64>, Vec<usize>) {
        let mut images = Vec::with_capacity(indices.len() * shape.numel());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i, shape));
            labels.push(self.labels[i]);
        }
        (images, labels)
    }
}

/// A labelled image collection before task splitting. Labels are global
/// class ids in `0..class_names.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDataset {
    pub name: String,
    pub shape: ImageShape,
    pub class_names: Vec<String>,
    pub train: Samples,
    pub test: Samples,
    /// Computed on the train split.
    pub stats: ChannelStats,
}

impl SourceDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    /// 1-based position in the task sequence.
    pub task_id: usize,
    /// Global class id for each local label.
    pub classes: Vec<usize>,
    pub shape: ImageShape,
    pub train: Samples,
    pub test: Samples,
    /// Computed on this task's train split.
    pub stats: ChannelStats,
}

impl TaskDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Train indices whose local label is `class`.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.train
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Copy with both splits standardized by `stats`.
    pub fn normalized(&self, stats: &ChannelStats) -> TaskDataset {
        let mut out = self.clone();
        stats.normalize(&mut out.train.images, self.shape);
        stats.normalize(&mut out.test.images, self.shape);
        out.stats = ChannelStats::compute(&out.train.images, self.shape);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub seed: u64,
}

/// Shuffles class ids with `spec.seed` and chunks them into
/// `spec.num_tasks` tasks of `spec.classes_per_task` classes. Classes
/// beyond `K·C` are left out.
pub fn split_dataset(source: &SourceDataset, spec: &SplitSpec) -> Result<Vec<TaskDataset>> {
    let needed = spec.num_tasks * spec.classes_per_task;
    if spec.num_tasks == 0 || spec.classes_per_task < 2 {
        return Err(Error::Dataset(format!(
            "split needs at least one task and two classes per task, got K={} C={}",
            spec.num_tasks, spec.classes_per_task
        )));
    }
    if needed > source.num_classes() {
        return Err(Error::Dataset(format!(
            "cannot split {} classes into {} tasks of {}",
            source.num_classes(),
            spec.num_tasks,
            spec.classes_per_task
        )));
    }
    let mut order: Vec<usize> = (0..source.num_classes()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    // global class -> (task index, local label)
    let mut assignment = vec![None; source.num_classes()];
    for (pos, &class) in order.iter().take(needed).enumerate() {
        assignment[class] = Some((pos / spec.classes_per_task, pos % spec.classes_per_task));
    }

    let mut tasks: Vec<TaskDataset> = order
        .chunks(spec.classes_per_task)
        .take(spec.num_tasks)
        .enumerate()
        .map(|(i, classes)| TaskDataset {
            task_id: i + 1,
            classes: classes.to_vec(),
            shape: source.shape,
            train: Samples::default(),
            test: Samples::default(),
            stats: ChannelStats::identity(source.shape.channels),
        })
        .collect();

    for (split, is_train) in [(&source.train, true), (&source.test, false)] {
        for (i, &label) in split.labels.iter().enumerate() {
            let global = *assignment.get(label).ok_or(Error::Label {
                label,
                classes: source.num_classes(),
            })?;
            if let Some((task, local)) = global {
                let target = if is_train {
                    &mut tasks[task].train
                } else {
                    &mut tasks[task].test
                };
                target.push(split.image(i, source.shape), local);
            }
        }
    }
    for task in &mut tasks {
        task.stats = ChannelStats::compute(&task.train.images, task.shape);
    }
    Ok(tasks)
}

/// Bilinear resize (half-pixel centres) of a `[ch, H, W]` image.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || height == 0 || width == 0 {
        return Err(Error::shape("resize_bilinear", shape, &[height, width]));
    }
    let plan = ResizePlan::new(shape[0], shape[1], shape[2], height, width);
    Tensor::new(vec![shape[0], height, width], plan.forward(image.data()))
}

/// Writes `task_id,local_label,global_class,train_count,test_count` rows.
pub fn write_split_csv(tasks: &[TaskDataset], mut out: impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "task_id,local_label,global_class,train_count,test_count"
    )?;
    for task in tasks {
        for (local, &global) in task.classes.iter().enumerate() {
            let train = task.train.labels.iter().filter(|&&l| l == local).count();
            let test = task.test.labels.iter().filter(|&&l| l == local).count();
            writeln!(out, "{},{local},{global},{train},{test}", task.task_id)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_source(classes: usize, per_class: usize) -> SourceDataset {
        let shape = ImageShape::new(1, 2, 2);
        let mut train = Samples::default();
        let mut test = Samples::default();
        for c in 0..classes {
            for i in 0..per_class {
                let v = (c * 100 + i) as f64;
                train.push(&[v, v + 0.25, v + 0.5, v + 0.75], c);
                test.push(&[-v, -v, -v, -v - 1.0], c);
            }
        }
        let stats = ChannelStats::compute(&train.images, shape);
        SourceDataset {
            name: "toy".into(),
            shape,
            class_names: (0..classes).map(|c| format!("c{c}")).collect(),
            train,
            test,
            stats,
        }
    }

    #[test]
    fn hundred_classes_into_ten_tasks() {
        let source = toy_source(100, 2);
        let spec = SplitSpec {
            num_tasks: 10,
            classes_per_task: 10,
            seed: 3,
        };
        let tasks = split_dataset(&source, &spec).unwrap();
        assert_eq!(tasks.len(), 10);
        let mut all: Vec<usize> = tasks.iter().flat_map(|t| t.classes.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for (i, t) in tasks.iter().enumerate() {
            assert_eq!(t.task_id, i + 1);
            assert_eq!(t.num_classes(), 10);
        }
        assert_eq!(tasks, split_dataset(&source, &spec).unwrap());
    }

    #[test]
    fn test_sets_partition_the_source() {
        let source = toy_source(12, 3);
        let spec = SplitSpec {
            num_tasks: 3,
            classes_per_task: 4,
            seed: 11,
        };
        let tasks = split_dataset(&source, &spec).unwrap();
        let mut rebuilt: Vec<(Vec<u64>, usize)> = tasks
            .iter()
            .flat_map(|t| {
                t.test
                    .images
                    .chunks(4)
                    .zip(&t.test.labels)
                    .map(|(img, &l)| (img.iter().map(|v| v.to_bits()).collect(), t.classes[l]))
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut original: Vec<(Vec<u64>, usize)> = source
            .test
            .images
            .chunks(4)
            .zip(&source.test.labels)
            .map(|(img, &l)| (img.iter().map(|v| v.to_bits()).collect(), l))
            .collect();
        rebuilt.sort();
        original.sort();
        assert_eq!(rebuilt, original);
    }

    #[test]
    fn local_labels_index_class_list() {
        let source = toy_source(6, 2);
        let tasks = split_dataset(
            &source,
            &SplitSpec {
                num_tasks: 2,
                classes_per_task: 3,
                seed: 0,
            },
        )
        .unwrap();
        for t in &tasks {
            for (i, &l) in t.train.labels.iter().enumerate() {
                let first = t.train.image(i, t.shape)[0];
                assert_eq!((first / 100.0).floor() as usize, t.classes[l]);
            }
        }
    }

    #[test]
    fn oversized_split_is_rejected() {
        let source = toy_source(10, 1);
        let spec = SplitSpec {
            num_tasks: 3,
            classes_per_task: 4,
            seed: 0,
        };
        assert!(matches!(
            split_dataset(&source, &spec),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn resize_examples() {
        let constant = Tensor::new(vec![2, 5, 7], vec![3.25; 70]).unwrap();
        let out = resize_bilinear(&constant, 10, 10).unwrap();
        assert!(out.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));

        let img = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 3, 3).unwrap(), img);

        let quad = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 4.0, 9.0]).unwrap();
        let avg = resize_bilinear(&quad, 1, 1).unwrap();
        assert!((avg.data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn downsample_by_two_is_block_mean() {
        let data: Vec<f64> = (0..400).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let img = Tensor::new(vec![1, 20, 20], data.clone()).unwrap();
        let out = resize_bilinear(&img, 10, 10).unwrap();
        for r in 0..10 {
            for c in 0..10 {
                let block = [
                    data[(2 * r) * 20 + 2 * c],
                    data[(2 * r) * 20 + 2 * c + 1],
                    data[(2 * r + 1) * 20 + 2 * c],
                    data[(2 * r + 1) * 20 + 2 * c + 1],
                ];
                let mean = block.iter().sum::<f64>() / 4.0;
                assert!((out.data()[r * 10 + c] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normalization_standardizes_train_split() {
        let source = toy_source(5, 4);
        let mut images = source.train.images.clone();
        source.stats.normalize(&mut images, source.shape);
        let after = ChannelStats::compute(&images, source.shape);
        assert!(after.mean[0].abs() < 1e-6);
        assert!((after.std[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_images_clamp_std() {
        let stats = ChannelStats::compute(&[0.0; 24], ImageShape::new(2, 2, 3));
        assert_eq!(stats.mean, vec![0.0, 0.0]);
        assert_eq!(stats.std, vec![STD_EPSILON, STD_EPSILON]);
    }

    #[test]
    fn split_csv_lists_every_class() {
        let source = toy_source(4, 2);
        let tasks = split_dataset(
            &source,
            &SplitSpec {
                num_tasks: 2,
                classes_per_task: 2,
                seed: 5,
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        write_split_csv(&tasks, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().skip(1).all(|l| l.ends_with(",2,2")));
    }
}
