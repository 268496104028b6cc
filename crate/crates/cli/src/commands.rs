use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use cotflow::condproc::ConditionProcessor;
use cotflow::coupling::{Coupling, NoiseSpec};
use cotflow::eval::{evaluate, generate, target_draw, Metric};
use cotflow::flow::{LogRow, Trainer, TrainerState};
use cotflow::io::{
    append_log, emit_metrics, load_checkpoint, load_config, read_log, save_checkpoint, save_config,
    write_dataset, Checkpoint, ModelState, RunConfig, TaskSpec,
};
use cotflow::metrics::MetricsRecord;
use cotflow::nn::FlowModel;
use cotflow::ode::{SolverConfig, SolverKind};
use cotflow::ot::{condition_scale, solve_assignment, CostMatrix};
use cotflow::tasks::{ConditionedDataset, TaskName};
use cotflow::Error;

use crate::{EvalCommon, GenArgs, OtMatrixArgs, SampleArgs, SolverArgs, SweepArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const SWEEP_FILE: &str = "sweep.csv";
const OT_MATRIX_STREAM: u64 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(Error::Io { .. }) | CliError::Io { .. } => 1,
            CliError::Core(_) | CliError::Usage(_) => 2,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

/// Sizes the global pool from `COTFLOW_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("COTFLOW_THREADS") else {
        return Ok(());
    };
    let n = raw
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "COTFLOW_THREADS must be a positive integer, got `{raw}`"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn solver_config(args: &SolverArgs) -> Result<SolverConfig> {
    let cfg = match args.solver {
        SolverKind::Euler => SolverConfig::euler(args.steps),
        SolverKind::Midpoint => SolverConfig::midpoint(args.steps),
        SolverKind::Dopri5 => SolverConfig::dopri5(args.rtol, args.atol),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(CliError::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        _ => Ok(()),
    }
}

pub fn gen(args: &GenArgs) -> Result<()> {
    let (data, _) = cotflow::tasks::generate(args.task, args.n, args.seed, args.horizon)?;
    write_dataset(&data, &args.out)?;
    info!(
        "wrote {} rows of {} to {}",
        data.len(),
        args.task,
        args.out.display()
    );
    Ok(())
}

fn checkpoint_of(trainer: &Trainer<'_>, task: &TaskSpec) -> Checkpoint {
    Checkpoint {
        model: ModelState::capture(trainer.model()),
        condproc: trainer.condproc().cloned(),
        noise: *trainer.noise(),
        task: Some(task.clone()),
        trainer: Some(trainer.state()),
    }
}

/// Trainer state to continue from, with the step target taken from `cfg`.
/// Every other training field must match the checkpointed run.
fn resume_state(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<TrainerState> {
    let mut state = ckpt
        .trainer
        .clone()
        .ok_or_else(|| CliError::Usage("checkpoint carries no trainer state".into()))?;
    if ckpt.task.as_ref() != Some(&cfg.task) {
        return Err(CliError::Usage(
            "checkpoint was trained on a different task than the config names".into(),
        ));
    }
    let mut expected = cfg.train.clone();
    expected.steps = state.config.steps;
    if expected.coupling == Coupling::Cot && expected.clusters.is_none() {
        expected.clusters = Some(cfg.task.name.default_clusters());
    }
    if expected != state.config {
        return Err(CliError::Usage(
            "config differs from the checkpointed run in fields other than `steps`".into(),
        ));
    }
    if cfg.train.steps < state.step {
        return Err(CliError::Usage(format!(
            "checkpoint is at step {}, past the configured {} steps",
            state.step, cfg.train.steps
        )));
    }
    state.config.steps = cfg.train.steps;
    Ok(state)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    if args.checkpoint_every == Some(0) {
        return Err(CliError::Usage("--checkpoint-every must be >= 1".into()));
    }
    let cfg = load_config(&args.config)?;
    let (data, noise) = cfg.task.generate()?;
    let ckpt_path = cfg.output_path(CHECKPOINT_FILE);
    let log_path = cfg.output_path(LOG_FILE);
    let mut trainer = if args.resume {
        let ckpt = load_checkpoint(&ckpt_path)?;
        let state = resume_state(&cfg, &ckpt)?;
        // rows written after the last checkpoint are replayed
        let kept: Vec<LogRow> = match log_path.exists() {
            true => read_log(&log_path)?
                .into_iter()
                .filter(|r| r.step <= state.step)
                .collect(),
            false => Vec::new(),
        };
        remove_if_exists(&log_path)?;
        append_log(&kept, &log_path)?;
        info!("resuming from step {}", state.step);
        Trainer::resume(
            &data,
            ckpt.noise,
            ckpt.model.restore()?,
            ckpt.condproc,
            &state,
        )?
    } else {
        remove_if_exists(&log_path)?;
        Trainer::new(&data, noise, cfg.train.clone())?
    };
    let mut resolved = cfg.clone();
    resolved.train = trainer.config().clone();
    save_config(&resolved, &cfg.output_path(RESOLVED_CONFIG_FILE))?;

    let total = trainer.config().steps;
    let every = args.checkpoint_every.unwrap_or(total.max(1));
    let started = std::time::Instant::now();
    loop {
        let stop = trainer.step().saturating_add(every).min(total);
        let mut rows = Vec::new();
        let outcome = trainer.run_until(stop, |row| {
            rows.push(*row);
            Ok(())
        });
        append_log(&rows, &log_path)?;
        outcome?;
        save_checkpoint(&checkpoint_of(&trainer, &cfg.task), &ckpt_path)?;
        if let Some(last) = rows.last() {
            info!("step {}/{total} loss {:.5}", last.step, last.loss);
        }
        if trainer.step() >= total {
            break;
        }
    }
    info!(
        "trained {} ({}) in {:.1?}; checkpoint {}",
        cfg.task.name,
        trainer.config().coupling,
        started.elapsed(),
        ckpt_path.display()
    );
    Ok(())
}

fn task_of(ckpt: &Checkpoint) -> Result<&TaskSpec> {
    ckpt.task.as_ref().ok_or_else(|| {
        CliError::Usage("checkpoint records no task, so conditions cannot be drawn".into())
    })
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let task = task_of(&ckpt)?;
    let model = ckpt.model.restore()?;
    let mut solver = solver_config(&args.solver)?;
    solver.record_path = args.paths.is_some();
    let target = target_draw(task.name, args.n, args.seed, task.horizon)?;
    let report = generate(
        &model,
        &ckpt.noise,
        target.conditions.view(),
        &solver,
        args.seed,
    )?;
    let metadata = BTreeMap::from([
        ("solver".to_string(), solver.label().to_string()),
        ("nfe".to_string(), report.nfe.to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ]);
    let out = ConditionedDataset {
        name: task.name,
        samples: report.samples.clone(),
        conditions: target.conditions,
        metadata,
    };
    write_dataset(&out, &args.out)?;
    if let (Some(path), Some(points)) = (&args.paths, &report.path) {
        write_paths(path, points)?;
    }
    let summary = serde_json::json!({
        "solver": solver.label(),
        "nfe": report.nfe,
        "accepted": report.accepted,
        "rejected": report.rejected,
        "n": args.n,
    });
    println!("{summary}");
    Ok(())
}

fn write_paths(path: &Path, points: &[(f64, ndarray::Array2<f64>)]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let dim = points.first().map_or(0, |(_, x)| x.ncols());
    let mut header = vec!["sample".to_string(), "t".to_string()];
    header.extend((0..dim).map(|k| format!("x_{k}")));
    w.write_record(&header)?;
    for (t, x) in points {
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let mut rec = vec![i.to_string(), cotflow::io::format_f64(*t)];
            rec.extend(row.iter().map(|&v| cotflow::io::format_f64(v)));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn coupling_label(ckpt: &Checkpoint) -> String {
    ckpt.trainer
        .as_ref()
        .map_or_else(|| "unknown".to_string(), |s| s.config.coupling.to_string())
}

fn horizon_for(task: TaskName, model: &FlowModel) -> Option<usize> {
    (task == TaskName::TrajFork).then(|| model.spec().output_dim / 2)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_seeds(
    model: &FlowModel,
    noise: &NoiseSpec,
    task: TaskName,
    n: usize,
    solver: &SolverConfig,
    seeds: &[u64],
    metrics: &[Metric],
    coupling: &str,
) -> Result<Vec<MetricsRecord>, Error> {
    let horizon = horizon_for(task, model);
    seeds
        .par_iter()
        .map(|&seed| {
            let target = target_draw(task, n, seed, horizon)?;
            let e = evaluate(model, noise, &target, solver, seed, metrics)?;
            Ok(MetricsRecord {
                task: task.to_string(),
                coupling: coupling.to_string(),
                solver: solver.label().to_string(),
                nfe: e.nfe,
                seed,
                w2_squared: e.w2.map(|b| b.task_metric),
                tv: e.tv,
                straightness: e.straightness,
            })
        })
        .collect()
}

pub fn eval(args: &EvalCommon, metrics: &[Metric]) -> Result<()> {
    if args.seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    let ckpt = load_checkpoint(&args.ckpt)?;
    let task = match (args.task, &ckpt.task) {
        (Some(t), _) => t,
        (None, Some(spec)) => spec.name,
        (None, None) => {
            return Err(CliError::Usage(
                "checkpoint records no task; pass --task".into(),
            ))
        }
    };
    let model = ckpt.model.restore()?;
    let solver = solver_config(&args.solver)?;
    let records = evaluate_seeds(
        &model,
        &ckpt.noise,
        task,
        args.n,
        &solver,
        &args.seeds,
        metrics,
        &coupling_label(&ckpt),
    )?;
    emit_metrics(&records, &args.out)?;
    for r in &records {
        info!(
            "{} {} {} nfe={} seed={} w2={:?} tv={:?} straightness={:?}",
            r.task, r.coupling, r.solver, r.nfe, r.seed, r.w2_squared, r.tv, r.straightness
        );
    }
    Ok(())
}

/// One line of the sweep table.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub task: String,
    pub coupling: String,
    pub train_seed: u64,
    pub solver: String,
    /// Fixed-step solvers only.
    pub steps: Option<usize>,
    pub nfe: Option<usize>,
    pub eval_seed: u64,
    pub w2_squared: Option<f64>,
    pub tv: Option<f64>,
    pub straightness: Option<f64>,
    pub status: String,
}

fn sweep_cell(
    cfg: &RunConfig,
    data: &ConditionedDataset,
    noise: &NoiseSpec,
    coupling: Coupling,
    seed: u64,
) -> Vec<SweepRow> {
    let row = |solver: &SolverConfig, eval_seed: u64| SweepRow {
        task: cfg.task.name.to_string(),
        coupling: coupling.to_string(),
        train_seed: seed,
        solver: solver.label().to_string(),
        steps: (solver.kind != SolverKind::Dopri5).then_some(solver.steps),
        nfe: None,
        eval_seed,
        w2_squared: None,
        tv: None,
        straightness: None,
        status: "ok".to_string(),
    };
    let mut train_cfg = cfg.train.clone();
    train_cfg.coupling = coupling;
    train_cfg.seed = seed;
    let trained = Trainer::new(data, *noise, train_cfg).and_then(|mut t| {
        t.run(|_| Ok(()))?;
        let path = cfg.output_path(&format!("sweep/{coupling}_seed{seed}.ckpt.json"));
        save_checkpoint(&checkpoint_of(&t, &cfg.task), &path)?;
        Ok(t.into_parts().0)
    });
    let mut rows = Vec::new();
    for solver in &cfg.solver {
        for &eval_seed in &cfg.eval.seeds {
            let mut r = row(solver, eval_seed);
            let result = trained
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|model| {
                    evaluate_seeds(
                        model,
                        noise,
                        cfg.task.name,
                        cfg.eval.n_eval,
                        solver,
                        &[eval_seed],
                        &cfg.eval.metrics,
                        coupling.as_str(),
                    )
                    .map_err(|e| e.to_string())
                });
            match result {
                Ok(mut recs) => {
                    let rec = recs.remove(0);
                    r.nfe = Some(rec.nfe);
                    r.w2_squared = rec.w2_squared;
                    r.tv = rec.tv;
                    r.straightness = rec.straightness;
                }
                Err(msg) => r.status = format!("error: {msg}"),
            }
            rows.push(r);
        }
    }
    rows
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    if cfg.sweep.couplings.is_empty()
        || cfg.sweep.seeds.is_empty()
        || cfg.solver.is_empty()
        || cfg.eval.seeds.is_empty()
    {
        return Err(CliError::Usage(
            "sweep needs at least one coupling, training seed, solver and eval seed".into(),
        ));
    }
    let (data, noise) = cfg.task.generate()?;
    let cells: Vec<(Coupling, u64)> = cfg
        .sweep
        .couplings
        .iter()
        .flat_map(|&c| cfg.sweep.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(c, s)| sweep_cell(&cfg, &data, &noise, c, s))
        .collect::<Vec<_>>()
        .concat();
    let path = cfg.output_path(SWEEP_FILE);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::Io {
        path: path.clone(),
        source: e,
    })?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        warn!(
            "{failed} of {} sweep rows failed; see the status column",
            rows.len()
        );
    }
    info!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct OtMatrixRow {
    gamma: f64,
    gamma_eff: f64,
    row: usize,
    col: usize,
    cost: f64,
    assigned: bool,
}

pub fn ot_matrix(args: &OtMatrixArgs) -> Result<()> {
    if args.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
        return Err(CliError::Usage("gammas must be finite and >= 0".into()));
    }
    let (data, noise) = cotflow::tasks::generate(args.task, args.n, args.seed, None)?;
    let k = args
        .clusters
        .unwrap_or(args.task.default_clusters())
        .min(args.n);
    let proc = ConditionProcessor::fit(data.conditions.view(), None, k, args.seed)?;
    let c1 = proc.discretize_all(data.conditions.view())?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    rng.set_stream(OT_MATRIX_STREAM);
    let x0 = noise.sample(args.n, &mut rng)?;
    let mut perm: Vec<usize> = (0..args.n).collect();
    perm.shuffle(&mut rng);
    let c0 = c1.select(Axis(0), &perm);
    let scale = condition_scale(x0.view(), c0.view(), data.samples.view(), c1.view())?;

    let mut w = csv::Writer::from_path(&args.out)?;
    let mut previous: Option<Vec<usize>> = None;
    for &gamma in &args.gammas {
        let gamma_eff = gamma * scale;
        let cost = CostMatrix::conditional(
            x0.view(),
            c0.view(),
            data.samples.view(),
            c1.view(),
            gamma_eff,
        )?;
        let plan = solve_assignment(&cost)?;
        for i in 0..args.n {
            for j in 0..args.n {
                w.serialize(OtMatrixRow {
                    gamma,
                    gamma_eff,
                    row: i,
                    col: j,
                    cost: cost.get(i, j),
                    assigned: plan.assignment[i] == j,
                })?;
            }
        }
        let same = previous.as_ref().map(|p| *p == plan.assignment);
        info!(
            "gamma {gamma} (effective {gamma_eff:.4e}): total cost {:.6}, same as previous: {same:?}",
            plan.total_cost
        );
        previous = Some(plan.assignment);
    }
    w.flush().map_err(|e| CliError::Io {
        path: args.out.clone(),
        source: e,
    })?;
    Ok(())
}
