//! Run configuration, checkpoints and CSV artifacts.
//!
//! Checkpoints are JSON envelopes `{format_version, checksum, payload}` where
//! `checksum` is the CRC-32 of the payload re-serialized in canonical form
//! (sorted keys, compact). Floats are written as the shortest decimal that
//! parses back to the same `f64`, so a load reproduces every bit.
//! Dataset CSVs start with `# key=value` comment lines, the first of which
//! is `format_version`.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::condproc::ConditionProcessor;
use crate::coupling::{Coupling, NoiseSpec};
use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::flow::{LogRow, TrainConfig, TrainerState};
use crate::metrics::MetricsRecord;
use crate::nn::{AdamState, FlowModel, MlpSpec};
use crate::ode::SolverConfig;
use crate::tasks::{ConditionedDataset, TaskName};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TASK_SIZE: usize = 10_000;

/// Task name plus generator parameters. Deserializes from either a bare
/// name (`"fork"`) or an object.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub n: usize,
    pub seed: u64,
    pub horizon: Option<usize>,
}

impl TaskSpec {
    pub fn named(name: TaskName) -> Self {
        TaskSpec {
            name,
            n: DEFAULT_TASK_SIZE,
            seed: 0,
            horizon: None,
        }
    }

    pub fn generate(&self) -> Result<(ConditionedDataset, NoiseSpec)> {
        crate::tasks::generate(self.name, self.n, self.seed, self.horizon)
    }
}

fn default_task_size() -> usize {
    DEFAULT_TASK_SIZE
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskSpecObject {
    name: TaskName,
    #[serde(default = "default_task_size")]
    n: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    horizon: Option<usize>,
}

impl<'de> Deserialize<'de> for TaskSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct TaskVisitor;

        impl<'de> Visitor<'de> for TaskVisitor {
            type Value = TaskSpec;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a task name or a task object")
            }

            fn visit_str<E: de::Error>(self, s: &str) -> Result<TaskSpec, E> {
                s.parse::<TaskName>()
                    .map(TaskSpec::named)
                    .map_err(E::custom)
            }

            fn visit_map<A: MapAccess<'de>>(self, map: A) -> Result<TaskSpec, A::Error> {
                let o = TaskSpecObject::deserialize(de::value::MapAccessDeserializer::new(map))?;
                Ok(TaskSpec {
                    name: o.name,
                    n: o.n,
                    seed: o.seed,
                    horizon: o.horizon,
                })
            }
        }

        deserializer.deserialize_any(TaskVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_eval: usize,
    pub seeds: Vec<u64>,
    pub metrics: Vec<Metric>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_eval: 2000,
            seeds: vec![0],
            metrics: vec![Metric::W2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub couplings: Vec<Coupling>,
    /// Training seeds; each trains one model per coupling.
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            couplings: Coupling::ALL.to_vec(),
            seeds: vec![0],
        }
    }
}

fn default_solvers() -> Vec<SolverConfig> {
    vec![SolverConfig::euler(1), SolverConfig::euler(2)]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_solvers")]
    pub solver: Vec<SolverConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn new(task: TaskSpec) -> Self {
        RunConfig {
            format_version: FORMAT_VERSION,
            task,
            train: TrainConfig::default(),
            solver: default_solvers(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            output_dir: default_output_dir(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_version("config", self.format_version)?;
        self.train.validate()?;
        for s in &self.solver {
            s.validate()?;
        }
        if self.eval.n_eval == 0 {
            return Err(Error::InvalidArgument("eval.n_eval must be >= 1".into()));
        }
        if self.task.n == 0 {
            return Err(Error::InvalidArgument("task.n must be >= 1".into()));
        }
        Ok(())
    }

    /// Path of an artifact inside `output_dir`.
    pub fn output_path(&self, file: &str) -> PathBuf {
        self.output_dir.join(file)
    }
}

fn check_version(what: &'static str, found: u32) -> Result<()> {
    if found == FORMAT_VERSION {
        Ok(())
    } else {
        Err(Error::Version {
            what,
            found,
            expected: FORMAT_VERSION,
        })
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&read_to_string(path)?)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    write_string(path, &(serde_json::to_string_pretty(cfg)? + "\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelState {
    pub spec: MlpSpec,
    pub parameters: Vec<f64>,
    pub adam: AdamState,
}

impl ModelState {
    pub fn capture(model: &FlowModel) -> Self {
        ModelState {
            spec: model.spec().clone(),
            parameters: model.parameters().to_vec(),
            adam: model.adam_state().clone(),
        }
    }

    pub fn restore(&self) -> Result<FlowModel> {
        FlowModel::from_parts(
            self.spec.clone(),
            self.parameters.clone(),
            self.adam.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model: ModelState,
    pub condproc: Option<ConditionProcessor>,
    pub noise: NoiseSpec,
    pub task: Option<TaskSpec>,
    pub trainer: Option<TrainerState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format_version: u32,
    checksum: u32,
    payload: serde_json::Value,
}

fn canonical_checksum(payload: &serde_json::Value) -> Result<u32> {
    Ok(crc32fast::hash(serde_json::to_string(payload)?.as_bytes()))
}

pub fn checkpoint_to_string(ckpt: &Checkpoint) -> Result<String> {
    let payload = serde_json::to_value(ckpt)?;
    let envelope = Envelope {
        format_version: FORMAT_VERSION,
        checksum: canonical_checksum(&payload)?,
        payload,
    };
    Ok(serde_json::to_string(&envelope)? + "\n")
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_string(path, &checkpoint_to_string(ckpt)?)
}

/// Parses a checkpoint document; `source` names it in error messages.
pub fn parse_checkpoint(text: &str, source: &Path) -> Result<Checkpoint> {
    let envelope: Envelope = serde_json::from_str(text)?;
    check_version("checkpoint", envelope.format_version)?;
    let computed = canonical_checksum(&envelope.payload)?;
    if computed != envelope.checksum {
        return Err(Error::Checksum {
            path: source.to_path_buf(),
            stored: envelope.checksum,
            computed,
        });
    }
    Ok(serde_json::from_value(envelope.payload)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&read_to_string(path)?, path)
}

pub const METRICS_HEADER: &str = "task,coupling,solver,nfe,seed,w2_squared,tv,straightness";

/// Writes `records` to `path`, appending below an existing header when the
/// file already has one.
pub fn emit_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    append_csv(records, path, METRICS_HEADER)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    parse_csv_records(
        File::open(path).map_err(|e| Error::io(path, e))?,
        METRICS_HEADER,
        "metrics csv",
    )
}

pub fn parse_metrics<R: Read>(reader: R) -> Result<Vec<MetricsRecord>> {
    parse_csv_records(reader, METRICS_HEADER, "metrics csv")
}

pub const LOG_HEADER: &str = "step,loss,w2_nfe1,w2_nfe2";

/// Appends training-log rows (header written once).
pub fn append_log(rows: &[LogRow], path: &Path) -> Result<()> {
    append_csv(rows, path, LOG_HEADER)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    parse_csv_records(
        File::open(path).map_err(|e| Error::io(path, e))?,
        LOG_HEADER,
        "training log",
    )
}

fn append_csv<T: Serialize>(rows: &[T], path: &Path, header: &str) -> Result<()> {
    let has_header = match File::open(path) {
        Ok(f) => {
            let mut first = String::new();
            BufReader::new(f)
                .read_line(&mut first)
                .map_err(|e| Error::io(path, e))?;
            let first = first.trim_end();
            if !first.is_empty() && first != header {
                return Err(Error::Format {
                    what: "csv header",
                    message: format!(
                        "{} starts with `{first}`, expected `{header}`",
                        path.display()
                    ),
                });
            }
            !first.is_empty()
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
        Err(e) => return Err(Error::io(path, e)),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    if !has_header {
        writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_csv_records<R: Read, T: for<'de> Deserialize<'de>>(
    reader: R,
    header: &str,
    what: &'static str,
) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().from_reader(reader);
    let found = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if found != header {
        return Err(Error::Format {
            what,
            message: format!("header `{found}`, expected `{header}`"),
        });
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Dataset CSV: metadata comments, then `x_0..x_{d-1},c_0..c_{q-1}`.
pub fn dataset_to_string(ds: &ConditionedDataset) -> Result<String> {
    let mut out = format!("# format_version={FORMAT_VERSION}\n# task={}\n", ds.name);
    for (k, v) in &ds.metadata {
        out.push_str(&format!("# {k}={}\n", v.replace('\n', " ")));
    }
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let header: Vec<String> = (0..ds.sample_dim())
        .map(|i| format!("x_{i}"))
        .chain((0..ds.condition_dim()).map(|i| format!("c_{i}")))
        .collect();
    w.write_record(&header)?;
    for (x, c) in ds.samples.rows().into_iter().zip(ds.conditions.rows()) {
        let row: Vec<String> = x.iter().chain(c.iter()).map(|v| format_f64(*v)).collect();
        w.write_record(&row)?;
    }
    let body = w.into_inner().map_err(|e| Error::Format {
        what: "dataset csv",
        message: e.to_string(),
    })?;
    out.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
    Ok(out)
}

/// Shortest decimal that parses back to the same value.
pub fn format_f64(v: f64) -> String {
    let s = format!("{v:?}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

pub fn write_dataset(ds: &ConditionedDataset, path: &Path) -> Result<()> {
    write_string(path, &dataset_to_string(ds)?)
}

pub fn read_dataset(path: &Path) -> Result<ConditionedDataset> {
    parse_dataset(&read_to_string(path)?)
}

pub fn parse_dataset(text: &str) -> Result<ConditionedDataset> {
    let bad = |message: String| Error::Format {
        what: "dataset csv",
        message,
    };
    let mut metadata = std::collections::BTreeMap::new();
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        let Some(comment) = line.strip_prefix('#') else {
            break;
        };
        body_start += line.len();
        let (k, v) = comment
            .trim()
            .split_once('=')
            .ok_or_else(|| bad(format!("comment line without `=`: {}", line.trim_end())))?;
        metadata.insert(k.trim().to_string(), v.trim().to_string());
    }
    let version = metadata
        .remove("format_version")
        .ok_or_else(|| bad("missing format_version comment".into()))?;
    let version: u32 = version
        .parse()
        .map_err(|_| bad(format!("bad format_version `{version}`")))?;
    check_version("dataset", version)?;
    let name: TaskName = metadata
        .remove("task")
        .ok_or_else(|| bad("missing task comment".into()))?
        .parse()?;

    let mut r = csv::ReaderBuilder::new().from_reader(&text.as_bytes()[body_start..]);
    let headers = r.headers()?.clone();
    let d = headers.iter().take_while(|h| h.starts_with("x_")).count();
    let q = headers.len() - d;
    for (i, h) in headers.iter().enumerate() {
        let expect = if i < d {
            format!("x_{i}")
        } else {
            format!("c_{}", i - d)
        };
        if h != expect {
            return Err(bad(format!("column {i} is `{h}`, expected `{expect}`")));
        }
    }
    if d == 0 {
        return Err(bad("no sample columns".into()));
    }
    let mut xs = Vec::new();
    let mut cs = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != d + q {
            return Err(bad(format!(
                "row {} has {} fields, expected {}",
                n + 1,
                rec.len(),
                d + q
            )));
        }
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                bad(format!(
                    "row {} field {i}: `{field}` is not a number",
                    n + 1
                ))
            })?;
            if i < d {
                xs.push(v);
            } else {
                cs.push(v);
            }
        }
        n += 1;
    }
    Ok(ConditionedDataset {
        name,
        samples: Array2::from_shape_vec((n, d), xs).expect("row widths checked"),
        conditions: Array2::from_shape_vec((n, q), cs).expect("row widths checked"),
        metadata,
    })
}
