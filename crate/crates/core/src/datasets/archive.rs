//! CIFAR-style binary archives.
//!
//! An archive is a flat sequence of records, train records first and then
//! test records. Each record is one label byte followed by `ch·H·W` pixel
//! bytes in channel-major, row-major order. Pixel bytes map to `b / 255`.
//!
//! The companion manifest uses the `key = value` format:
//!
//! ```text
//! name = cifar100-subset
//! channels = 3
//! height = 32
//! width = 32
//! classes = apple,aquarium_fish,baby
//! train_records = 1500
//! test_records = 300
//! ```

use std::fs;
use std::path::Path;

use super::{ChannelStats, ImageShape, Samples, SourceDataset};
use crate::error::{Error, Result};
use crate::kv;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveManifest {
    pub name: String,
    pub shape: ImageShape,
    pub class_names: Vec<String>,
    pub train_records: usize,
    pub test_records: usize,
}

impl ArchiveManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = String::from("archive");
        let (mut channels, mut height, mut width) = (None, None, None);
        let mut classes = None;
        let (mut train, mut test) = (None, None);
        for entry in kv::parse(text)? {
            match entry.key.as_str() {
                "name" => name = entry.value.clone(),
                "channels" => channels = Some(kv::parse_value(&entry)?),
                "height" => height = Some(kv::parse_value(&entry)?),
                "width" => width = Some(kv::parse_value(&entry)?),
                "classes" => {
                    classes = Some(
                        entry
                            .value
                            .split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect::<Vec<_>>(),
                    )
                }
                "train_records" => train = Some(kv::parse_value(&entry)?),
                "test_records" => test = Some(kv::parse_value(&entry)?),
                other => {
                    return Err(Error::Config {
                        line: entry.line,
                        detail: format!("unknown manifest key `{other}`"),
                    })
                }
            }
        }
        let missing = |key: &str| Error::Config {
            line: 0,
            detail: format!("manifest is missing `{key}`"),
        };
        let shape = ImageShape::new(
            channels.ok_or_else(|| missing("channels"))?,
            height.ok_or_else(|| missing("height"))?,
            width.ok_or_else(|| missing("width"))?,
        );
        if shape.numel() == 0 {
            return Err(Error::Dataset(
                "manifest declares an empty image shape".into(),
            ));
        }
        let class_names: Vec<String> = classes.ok_or_else(|| missing("classes"))?;
        if class_names.is_empty() || class_names.len() > 256 {
            return Err(Error::Dataset(format!(
                "manifest must declare 1..=256 classes, found {}",
                class_names.len()
            )));
        }
        Ok(ArchiveManifest {
            name,
            shape,
            class_names,
            train_records: train.ok_or_else(|| missing("train_records"))?,
            test_records: test.ok_or_else(|| missing("test_records"))?,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "name = {}\nchannels = {}\nheight = {}\nwidth = {}\nclasses = {}\ntrain_records = {}\ntest_records = {}\n",
            self.name,
            self.shape.channels,
            self.shape.height,
            self.shape.width,
            self.class_names.join(","),
            self.train_records,
            self.test_records
        )
    }

    fn record_len(&self) -> usize {
        1 + self.shape.numel()
    }
}

/// Decodes `archive` as described by the manifest at `manifest`. Either the
/// whole file decodes or an error is returned.
pub fn ingest_image_archive(archive: &Path, manifest: &Path) -> Result<SourceDataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let manifest = ArchiveManifest::parse(&text)?;
    let bytes = fs::read(archive).map_err(|e| Error::io(archive, e))?;
    decode(&manifest, &bytes)
}

fn decode(manifest: &ArchiveManifest, bytes: &[u8]) -> Result<SourceDataset> {
    let record = manifest.record_len();
    let records = manifest.train_records + manifest.test_records;
    let expected = records * record;
    if bytes.len() < expected {
        let complete = bytes.len() / record;
        return Err(Error::Parse {
            offset: (complete * record) as u64,
            detail: format!(
                "record {complete} is truncated ({} of {record} bytes present; expected {records} records)",
                bytes.len() - complete * record
            ),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Parse {
            offset: expected as u64,
            detail: format!(
                "{} trailing bytes after the last record",
                bytes.len() - expected
            ),
        });
    }
    let classes = manifest.class_names.len();
    let mut train = Samples::default();
    let mut test = Samples::default();
    for (i, chunk) in bytes.chunks(record).enumerate() {
        let label = chunk[0] as usize;
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let image: Vec<f64> = chunk[1..].iter().map(|&b| f64::from(b) / 255.0).collect();
        let target = if i < manifest.train_records {
            &mut train
        } else {
            &mut test
        };
        target.push(&image, label);
    }
    let stats = ChannelStats::compute(&train.images, manifest.shape);
    Ok(SourceDataset {
        name: manifest.name.clone(),
        shape: manifest.shape,
        class_names: manifest.class_names.clone(),
        train,
        test,
        stats,
    })
}

/// Quantizes `source` to bytes (values clamped to `[0, 1]`) and writes the
/// archive and its manifest.
pub fn write_image_archive(source: &SourceDataset, archive: &Path, manifest: &Path) -> Result<()> {
    if source.num_classes() > 256 {
        return Err(Error::Dataset("archives hold at most 256 classes".into()));
    }
    let info = ArchiveManifest {
        name: source.name.clone(),
        shape: source.shape,
        class_names: source.class_names.clone(),
        train_records: source.train.len(),
        test_records: source.test.len(),
    };
    let mut bytes =
        Vec::with_capacity((info.train_records + info.test_records) * info.record_len());
    for split in [&source.train, &source.test] {
        for (i, &label) in split.labels.iter().enumerate() {
            bytes.push(label as u8);
            bytes.extend(
                split
                    .image(i, source.shape)
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
            );
        }
    }
    fs::write(archive, bytes).map_err(|e| Error::io(archive, e))?;
    fs::write(manifest, info.to_text()).map_err(|e| Error::io(manifest, e))?;
    Ok(())
}
