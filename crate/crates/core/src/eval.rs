//! Sample generation and population-level evaluation of a trained field.
//!
//! Generated samples reuse the conditions of a fresh target draw, so both
//! sets have the same condition multiset. The headline W2 depends on the
//! task: tasks with finitely many condition values compare label by label
//! (count-weighted mean); continuous-condition tasks compare joint
//! `(sample, condition)` vectors.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::NoiseSpec;
use crate::error::{check_dim, Error, Result};
use crate::metrics::{trajectory_variance, w2_squared};
use crate::ode::{integrate, straightness, SolverConfig, SolverReport, VectorField};
use crate::tasks::{generate as generate_task, rows_to_trajectories, ConditionedDataset, TaskName};

const TARGET_SEED_SALT: u64 = 0x5eed_7a56_e7d0_0001;
const NOISE_STREAM: u64 = 2;

/// Fresh target draw for evaluation seed `seed`, independent of any
/// training draw made with the same seed.
pub fn target_draw(
    task: TaskName,
    n: usize,
    seed: u64,
    horizon: Option<usize>,
) -> Result<ConditionedDataset> {
    Ok(generate_task(task, n, seed ^ TARGET_SEED_SALT, horizon)?.0)
}

/// Integrates fresh noise under the given conditions.
pub fn generate<F: VectorField + ?Sized>(
    field: &F,
    noise: &NoiseSpec,
    conditions: ArrayView2<f64>,
    solver: &SolverConfig,
    seed: u64,
) -> Result<SolverReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    let x0 = noise.sample(conditions.nrows(), &mut rng)?;
    integrate(field, x0.view(), conditions, solver)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelW2 {
    pub label: f64,
    pub count: usize,
    pub w2_squared: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct W2Breakdown {
    /// The task's headline number (stratified or joint, see module docs).
    pub task_metric: f64,
    /// Samples only, conditions ignored.
    pub marginal: f64,
    /// Per condition value; empty for continuous-condition tasks.
    pub per_label: Vec<LabelW2>,
}

/// Compares generated rows (aligned with `target.conditions`) with the target.
pub fn w2_breakdown(
    generated: ArrayView2<f64>,
    target: &ConditionedDataset,
) -> Result<W2Breakdown> {
    check_dim("generated rows", target.len(), generated.nrows())?;
    check_dim("generated width", target.sample_dim(), generated.ncols())?;
    let marginal = w2_squared(generated, target.samples.view())?;
    if target.name.has_discrete_conditions() {
        let per_label = stratified(generated, target)?;
        let total: usize = per_label.iter().map(|l| l.count).sum();
        let task_metric = per_label
            .iter()
            .map(|l| l.w2_squared * l.count as f64)
            .sum::<f64>()
            / total as f64;
        Ok(W2Breakdown {
            task_metric,
            marginal,
            per_label,
        })
    } else {
        let joint_gen = concatenate(Axis(1), &[generated, target.conditions.view()])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let joint_tgt = concatenate(Axis(1), &[target.samples.view(), target.conditions.view()])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(W2Breakdown {
            task_metric: w2_squared(joint_gen.view(), joint_tgt.view())?,
            marginal,
            per_label: Vec::new(),
        })
    }
}

fn stratified(generated: ArrayView2<f64>, target: &ConditionedDataset) -> Result<Vec<LabelW2>> {
    if target.condition_dim() != 1 {
        return Err(Error::InvalidArgument(
            "label-wise comparison needs a single condition column".into(),
        ));
    }
    let labels = target.conditions.column(0);
    let mut values: Vec<f64> = labels.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    values
        .into_iter()
        .map(|label| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
            let g = generated.select(Axis(0), &idx);
            let t = target.samples.select(Axis(0), &idx);
            Ok(LabelW2 {
                label,
                count: idx.len(),
                w2_squared: w2_squared(g.view(), t.view())?,
            })
        })
        .collect()
}

/// Generates `n` samples for `data.name` and reports the W2 breakdown.
pub fn evaluate_w2<F: VectorField + ?Sized>(
    field: &F,
    noise: &NoiseSpec,
    data: &ConditionedDataset,
    n: usize,
    seed: u64,
    solver: &SolverConfig,
) -> Result<W2Breakdown> {
    let horizon = (data.name == TaskName::TrajFork).then(|| data.sample_dim() / 2);
    let target = target_draw(data.name, n, seed, horizon)?;
    let report = generate(field, noise, target.conditions.view(), solver, seed)?;
    w2_breakdown(report.samples.view(), &target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    W2,
    Tv,
    Straightness,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w2" => Ok(Metric::W2),
            "tv" => Ok(Metric::Tv),
            "straightness" => Ok(Metric::Straightness),
            other => Err(Error::InvalidArgument(format!(
                "unknown metric `{other}` (expected w2, tv or straightness)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub nfe: usize,
    pub w2: Option<W2Breakdown>,
    pub tv: Option<f64>,
    pub straightness: Option<f64>,
}

/// One evaluation run against `target` (usually from [`target_draw`]).
/// Straightness forces a recorded path; TV treats each generated row as a
/// flattened 2-D trajectory.
pub fn evaluate<F: VectorField + ?Sized>(
    field: &F,
    noise: &NoiseSpec,
    target: &ConditionedDataset,
    solver: &SolverConfig,
    seed: u64,
    metrics: &[Metric],
) -> Result<Evaluation> {
    let mut solver = *solver;
    if metrics.contains(&Metric::Straightness) {
        solver.record_path = true;
    }
    let report = generate(field, noise, target.conditions.view(), &solver, seed)?;
    let w2 = metrics
        .contains(&Metric::W2)
        .then(|| w2_breakdown(report.samples.view(), target))
        .transpose()?;
    let tv = metrics
        .contains(&Metric::Tv)
        .then(|| tv_of_rows(&report.samples))
        .transpose()?;
    let straight = metrics
        .contains(&Metric::Straightness)
        .then(|| straightness(&report))
        .transpose()?;
    Ok(Evaluation {
        nfe: report.nfe,
        w2,
        tv,
        straightness: straight,
    })
}

/// Trajectory variance of rows holding flattened 2-D waypoints.
pub fn tv_of_rows(rows: &Array2<f64>) -> Result<f64> {
    trajectory_variance(&rows_to_trajectories(rows, 2)?)
}
