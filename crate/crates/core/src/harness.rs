//! Run orchestration behind the command-line tool: data loading, single
//! runs with persisted results, ablation sweeps and checkpoint evaluation.
//!
//! A run directory holds `results.json`, `matrix.csv`, `model.ckpt` and
//! `events.jsonl` (one JSON object per training epoch).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DatasetKind, RunConfig, SweepAxis};
use crate::datasets::{
    ingest_image_archive, make_synthetic_tasks, split_dataset, Samples, SplitSpec, TaskDataset,
};
use crate::error::{Error, Result};
use crate::metrics::{average_accuracy, forgetting, AccuracyMatrix};
use crate::trainer::{evaluate, run_sequence, EpochRecord, TrainObserver};

/// Environment variable naming the directory relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "PAH_OUTPUT_ROOT";

pub const RESULTS_FILE: &str = "results.json";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EVENTS_FILE: &str = "events.jsonl";

pub fn version_stamp() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Builds the task sequence described by `cfg.dataset`.
pub fn load_tasks(cfg: &RunConfig) -> Result<Vec<TaskDataset>> {
    let d = &cfg.dataset;
    match d.kind {
        DatasetKind::Synthetic => make_synthetic_tasks(
            &d.synthetic_spec(),
            &mut ChaCha8Rng::seed_from_u64(d.split_seed),
        ),
        DatasetKind::Archive => {
            let source = ingest_image_archive(&d.archive, &d.manifest)?;
            split_dataset(
                &source,
                &SplitSpec {
                    num_tasks: d.num_tasks,
                    classes_per_task: d.classes_per_task,
                    seed: d.split_seed,
                },
            )
        }
    }
}

/// `path` under the output root when it is relative and the root is set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config: RunConfig,
    pub matrix: AccuracyMatrix,
    pub average_accuracy: f64,
    /// Zero when undefined (single task); see `forgetting_defined`.
    pub forgetting: f64,
    pub forgetting_defined: bool,
    pub wallclock_s: f64,
    pub steps: u64,
    pub checkpoint_bytes: u64,
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    /// Recomputes AA and FM from `matrix` and returns the larger absolute
    /// difference to the stored values.
    pub fn audit(&self, matrix: &AccuracyMatrix) -> Result<f64> {
        let (aa, fm, defined) = summarize(matrix)?;
        if defined != self.forgetting_defined {
            return Err(Error::Metric("forgetting definedness differs".into()));
        }
        Ok((aa - self.average_accuracy)
            .abs()
            .max((fm - self.forgetting).abs()))
    }
}

fn summarize(matrix: &AccuracyMatrix) -> Result<(f64, f64, bool)> {
    let aa = average_accuracy(matrix)?;
    match forgetting(matrix) {
        Ok(fm) => Ok((aa, fm, true)),
        Err(_) if matrix.tasks() == 1 => Ok((aa, 0.0, false)),
        Err(e) => Err(e),
    }
}

/// Appends epoch records to a JSON-lines file and optionally echoes them.
pub struct EventLog {
    writer: Option<BufWriter<File>>,
    echo: bool,
    error: Option<Error>,
    path: PathBuf,
}

impl EventLog {
    pub fn create(path: &Path, echo: bool) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(EventLog {
            writer: Some(BufWriter::new(file)),
            echo,
            error: None,
            path: path.to_path_buf(),
        })
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        if let Some(mut w) = self.writer.take() {
            w.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

impl TrainObserver for EventLog {
    fn on_epoch(&mut self, record: &EpochRecord) {
        let line = serde_json::to_string(record).expect("plain record serializes");
        if self.echo {
            eprintln!("{line}");
        }
        if let (Some(w), None) = (self.writer.as_mut(), self.error.as_ref()) {
            if let Err(e) = writeln!(w, "{line}") {
                self.error = Some(Error::io(&self.path, e));
            }
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains the full sequence and writes the run directory `out_dir`.
pub fn train_run(cfg: &RunConfig, out_dir: &Path, echo: bool) -> Result<RunRecord> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut events = EventLog::create(&out_dir.join(EVENTS_FILE), echo)?;
    let started = Instant::now();
    let tasks = load_tasks(cfg)?;
    let outcome = run_sequence(&tasks, cfg, &mut events)?;
    let wallclock_s = started.elapsed().as_secs_f64();
    events.finish()?;

    let bytes = checkpoint::to_bytes(&outcome.model);
    let (aa, fm, defined) = summarize(&outcome.matrix)?;
    let record = RunRecord {
        version: version_stamp(),
        config: cfg.clone(),
        matrix: outcome.matrix,
        average_accuracy: aa,
        forgetting: fm,
        forgetting_defined: defined,
        wallclock_s,
        steps: outcome.steps,
        checkpoint_bytes: bytes.len() as u64,
        epochs: outcome.epochs,
    };
    write_file(&out_dir.join(CHECKPOINT_FILE), &bytes)?;
    write_file(
        &out_dir.join(MATRIX_FILE),
        record.matrix.to_csv().as_bytes(),
    )?;
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    write_file(&out_dir.join(RESULTS_FILE), json.as_bytes())?;
    Ok(record)
}

/// Reads back a run directory's record and matrix.
pub fn read_run(dir: &Path) -> Result<(RunRecord, AccuracyMatrix)> {
    let results = dir.join(RESULTS_FILE);
    let text = std::fs::read_to_string(&results).map_err(|e| Error::io(&results, e))?;
    let record: RunRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: e.column() as u64,
        detail: format!("{}: {e}", results.display()),
    })?;
    let matrix_path = dir.join(MATRIX_FILE);
    let csv = std::fs::read_to_string(&matrix_path).map_err(|e| Error::io(&matrix_path, e))?;
    Ok((record, AccuracyMatrix::from_csv(&csv)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub aa_percent: f64,
    pub fm_percent: f64,
    pub seed: u64,
    pub wallclock_s: f64,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn file_name(&self) -> String {
        format!("sweep_{}.csv", self.axis)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis_value,AA_percent,FM_percent,seed,wallclock_s\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.2},{:.2},{},{:.3}\n",
                r.axis_value, r.aa_percent, r.fm_percent, r.seed, r.wallclock_s
            ));
        }
        out
    }
}

/// Directory name of sweep point `index`.
fn point_dir(axis: SweepAxis, index: usize, value: &str) -> String {
    let safe: String = value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{axis}_{index}_{safe}")
}

/// One full run per value of `axis`, with seed `base seed + index`, under
/// `out_root`. Runs execute on a pool of `min(cores, values)` threads.
/// Writes `sweep_<axis>.csv` into `out_root`.
pub fn sweep(
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    out_root: &Path,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config {
            line: 0,
            detail: "sweep needs at least one value".into(),
        });
    }
    let configs = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut c = cfg.with_axis(axis, v)?;
            c.train.seed = cfg.train.seed + i as u64;
            c.output_dir = out_root.join(point_dir(axis, i, v));
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cores.min(values.len()))
        .build()
        .map_err(|e| Error::Config {
            line: 0,
            detail: format!("cannot start worker pool: {e}"),
        })?;
    let records = pool.install(|| {
        configs
            .par_iter()
            .map(|c| train_run(c, &c.output_dir, false))
            .collect::<Result<Vec<_>>>()
    })?;
    let rows = values
        .iter()
        .zip(configs.iter().zip(records))
        .map(|(v, (c, r))| SweepRow {
            axis_value: v.clone(),
            aa_percent: 100.0 * r.average_accuracy,
            fm_percent: 100.0 * r.forgetting,
            seed: c.train.seed,
            wallclock_s: r.wallclock_s,
            run_dir: c.output_dir.clone(),
        })
        .collect();
    let table = SweepTable { axis, rows };
    write_file(&out_root.join(table.file_name()), table.to_csv().as_bytes())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// `(task id, accuracy)` for every task stored in the checkpoint.
    pub accuracies: Vec<(usize, f64)>,
    pub average_accuracy: f64,
}

/// Scores a checkpoint on the test splits of the tasks described by `cfg`,
/// standardized with task 1's training statistics as during training.
pub fn eval_checkpoint(checkpoint_path: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    let model = checkpoint::load(checkpoint_path)?;
    let tasks = load_tasks(cfg)?;
    let stats = tasks
        .first()
        .ok_or_else(|| Error::Dataset("configuration yields no tasks".into()))?
        .stats
        .clone();
    let stored = model.prototypes.num_tasks();
    if stored > tasks.len() {
        return Err(Error::UnknownTask(stored));
    }
    let tests: Vec<Samples> = tasks[..stored]
        .iter()
        .map(|t| t.normalized(&stats).test)
        .collect();
    let accuracies = tests
        .par_iter()
        .enumerate()
        .map(|(i, test)| Ok((i + 1, evaluate(&model, i + 1, test)?)))
        .collect::<Result<Vec<_>>>()?;
    let average_accuracy = if accuracies.is_empty() {
        0.0
    } else {
        accuracies.iter().map(|(_, a)| a).sum::<f64>() / accuracies.len() as f64
    };
    Ok(EvalReport {
        accuracies,
        average_accuracy,
    })
}
