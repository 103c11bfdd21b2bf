//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "PAHCKPT\0"
//! version      u32
//! dims         u32 × (3 + 1 + hidden + 4 + 3)
//!              input ch,h,w | hidden count | hidden widths |
//!              feature_dim | hyper_hidden | classes_per_task | num_tasks |
//!              prototype ch,h,w
//! groups       3 × { tag: 4 bytes, count: u64, values: f64 × count }
//!              "BKBN" backbone layers in order, weight then bias
//!              "HYPN" hypernetwork hidden then output, weight then bias
//!              "PROT" prototypes of tasks 1..=num_tasks, class order
//! ```
//!
//! Task and class ids are implied by position, so each registered task adds
//! exactly `C·ch·h_p·w_p` values. There is no head block: heads are
//! regenerated from the hypernetwork and the prototypes.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::datasets::ImageShape;
use crate::error::{Error, Result};
use crate::model::{Backbone, Hypernetwork, Linear, ModelDims, PahModel, Prototype, PrototypeBank};

pub const MAGIC: &[u8; 8] = b"PAHCKPT\0";
pub const VERSION: u32 = 1;

pub const BACKBONE_TAG: &[u8; 4] = b"BKBN";
pub const HYPERNET_TAG: &[u8; 4] = b"HYPN";
pub const PROTOTYPE_TAG: &[u8; 4] = b"PROT";

/// One parameter block as found in a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupInfo {
    pub tag: String,
    pub values: u64,
    /// Byte offset of the block's tag.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointLayout {
    pub version: u32,
    pub dims: ModelDims,
    pub num_tasks: usize,
    pub groups: Vec<GroupInfo>,
    pub total_bytes: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_group<'a>(out: &mut Vec<u8>, tag: &[u8; 4], tensors: impl IntoIterator<Item = &'a Tensor>) {
    let tensors: Vec<&Tensor> = tensors.into_iter().collect();
    let count: usize = tensors.iter().map(|t| t.numel()).sum();
    out.extend_from_slice(tag);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn to_bytes(model: &PahModel) -> Vec<u8> {
    let d = &model.dims;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in d.input.dims() {
        put_u32(&mut out, v);
    }
    put_u32(&mut out, d.backbone_hidden.len());
    for &w in &d.backbone_hidden {
        put_u32(&mut out, w);
    }
    put_u32(&mut out, d.feature_dim);
    put_u32(&mut out, d.hyper_hidden);
    put_u32(&mut out, d.classes_per_task);
    put_u32(&mut out, model.prototypes.num_tasks());
    for v in d.prototype.dims() {
        put_u32(&mut out, v);
    }
    fn linear_tensors<'a>(ls: impl IntoIterator<Item = &'a Linear>) -> Vec<&'a Tensor> {
        ls.into_iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }
    put_group(
        &mut out,
        BACKBONE_TAG,
        linear_tensors(&model.backbone.layers),
    );
    put_group(
        &mut out,
        HYPERNET_TAG,
        linear_tensors([&model.hypernet.hidden, &model.hypernet.output]),
    );
    put_group(
        &mut out,
        PROTOTYPE_TAG,
        model.prototypes.iter().map(|p| &p.values),
    );
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(Error::Parse {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn shape(&mut self, what: &str) -> Result<ImageShape> {
        Ok(ImageShape::new(
            self.u32(what)?,
            self.u32(what)?,
            self.u32(what)?,
        ))
    }
}

struct Parsed {
    layout: CheckpointLayout,
    blocks: Vec<Vec<f64>>,
}

fn parse(bytes: &[u8], with_values: bool) -> Result<Parsed> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: "bad magic bytes".into(),
        });
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let input = r.shape("input shape")?;
    let hidden_count = r.u32("hidden layer count")?;
    if hidden_count > 1024 {
        return Err(Error::Parse {
            offset: (r.pos - 4) as u64,
            detail: format!("implausible hidden layer count {hidden_count}"),
        });
    }
    let backbone_hidden = (0..hidden_count)
        .map(|_| r.u32("hidden width"))
        .collect::<Result<Vec<_>>>()?;
    let feature_dim = r.u32("feature dim")?;
    let hyper_hidden = r.u32("hypernet width")?;
    let classes_per_task = r.u32("classes per task")?;
    let num_tasks = r.u32("task count")?;
    let dims = ModelDims {
        input,
        backbone_hidden,
        feature_dim,
        hyper_hidden,
        classes_per_task,
        prototype: r.shape("prototype shape")?,
    };
    dims.validate().map_err(|e| Error::Parse {
        offset: r.pos as u64,
        detail: format!("invalid dimensions: {e}"),
    })?;

    let mut groups = Vec::new();
    let mut blocks = Vec::new();
    for tag in [BACKBONE_TAG, HYPERNET_TAG, PROTOTYPE_TAG] {
        let offset = r.pos as u64;
        let found = r.take(4, "group tag")?;
        if found != tag {
            return Err(Error::Parse {
                offset,
                detail: format!(
                    "expected group {}, found {:?}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(found)
                ),
            });
        }
        let count = r.u64("group length")?;
        let raw = r.take(
            usize::try_from(count)
                .ok()
                .and_then(|c| c.checked_mul(8))
                .ok_or(Error::Parse {
                    offset: offset + 4,
                    detail: format!("group length {count} overflows"),
                })?,
            "group values",
        )?;
        if with_values {
            blocks.push(
                raw.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            );
        }
        groups.push(GroupInfo {
            tag: String::from_utf8_lossy(tag).into_owned(),
            values: count,
            offset,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos as u64,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Parsed {
        layout: CheckpointLayout {
            version,
            dims,
            num_tasks,
            groups,
            total_bytes: bytes.len() as u64,
        },
        blocks,
    })
}

/// Header and block table without decoding parameter values.
pub fn inspect(bytes: &[u8]) -> Result<CheckpointLayout> {
    Ok(parse(bytes, false)?.layout)
}

fn split_tensors(
    values: &[f64],
    shapes: &[Vec<usize>],
    offset: u64,
    tag: &str,
) -> Result<Vec<Tensor>> {
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if values.len() != expected {
        return Err(Error::Parse {
            offset,
            detail: format!(
                "group {tag} holds {} values, dimensions imply {expected}",
                values.len()
            ),
        });
    }
    let mut rest = values;
    shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(Tensor::new(s.clone(), head.to_vec())?.learnable())
        })
        .collect()
}

fn linears(tensors: Vec<Tensor>) -> Vec<Linear> {
    let mut it = tensors.into_iter();
    let mut out = Vec::new();
    while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
        out.push(Linear { weight, bias });
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<PahModel> {
    let Parsed { layout, blocks } = parse(bytes, true)?;
    let dims = layout.dims;
    let widths: Vec<usize> = std::iter::once(dims.input.numel())
        .chain(dims.backbone_hidden.iter().copied())
        .chain(std::iter::once(dims.feature_dim))
        .collect();
    let linear_shapes = |widths: &[usize]| -> Vec<Vec<usize>> {
        widths
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    };
    let backbone = linears(split_tensors(
        &blocks[0],
        &linear_shapes(&widths),
        layout.groups[0].offset,
        "BKBN",
    )?);
    let mut hyper = linears(split_tensors(
        &blocks[1],
        &linear_shapes(&[
            dims.embedding_dim(),
            dims.hyper_hidden,
            dims.head_param_count(),
        ]),
        layout.groups[1].offset,
        "HYPN",
    )?);
    let output = hyper.pop().expect("two hypernet layers");
    let hidden = hyper.pop().expect("two hypernet layers");

    let per_task = vec![dims.prototype.dims().to_vec(); dims.classes_per_task];
    let proto_shapes: Vec<Vec<usize>> = (0..layout.num_tasks)
        .flat_map(|_| per_task.clone())
        .collect();
    let mut protos =
        split_tensors(&blocks[2], &proto_shapes, layout.groups[2].offset, "PROT")?.into_iter();
    let mut bank = PrototypeBank::new(dims.classes_per_task, dims.prototype);
    for task_id in 1..=layout.num_tasks {
        let prototypes = (0..dims.classes_per_task)
            .map(|class_id| Prototype {
                values: protos.next().expect("counted above"),
                task_id,
                class_id,
            })
            .collect();
        bank.register(task_id, prototypes)?;
    }
    Ok(PahModel {
        dims,
        backbone: Backbone { layers: backbone },
        hypernet: Hypernetwork { hidden, output },
        prototypes: bank,
    })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save(model: &PahModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(model)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<PahModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
