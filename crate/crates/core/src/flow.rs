//! Conditional flow-matching training.
//!
//! Each step draws a batch with replacement, pairs it with noise under the
//! configured coupling, samples `t ~ U(0, 1)` per row and regresses
//! `v(t, x_t | o)` onto `x1 - x0`. The raw condition `o` feeds the network;
//! discretized conditions only enter the `cot` pairing cost.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condproc::{ConditionProcessor, PcaSettings};
use crate::coupling::{pair_cot, pair_independent, pair_ot, Coupling, NoiseSpec, PairedBatch};
use crate::error::{check_dim, Error, Result};
use crate::eval;
use crate::nn::{assemble_inputs, FlowModel, MlpSpec, OptimizerConfig, DEFAULT_HIDDEN};
use crate::ode::SolverConfig;
use crate::ot::CostSpec;
use crate::tasks::ConditionedDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    Uniform,
    /// Every row uses the same `t`; meant for tests.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub coupling: Coupling,
    pub cost_spec: CostSpec,
    /// K-means cluster count for `cot`; the task default applies when unset.
    pub clusters: Option<usize>,
    pub pca: Option<PcaSettings>,
    pub seed: u64,
    /// Run the NFE 1/2 euler evaluation every this many steps.
    pub eval_every: Option<u64>,
    pub eval_samples: usize,
    pub hidden_dims: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub time_sampling: TimeSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50_000,
            batch_size: 256,
            coupling: Coupling::Cot,
            cost_spec: CostSpec::default(),
            clusters: None,
            pca: None,
            seed: 0,
            eval_every: None,
            eval_samples: 2000,
            hidden_dims: DEFAULT_HIDDEN.to_vec(),
            optimizer: OptimizerConfig::default(),
            time_sampling: TimeSampling::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.clusters == Some(0) {
            return Err(Error::InvalidArgument("clusters must be >= 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::InvalidArgument("eval_every must be >= 1".into()));
        }
        if let TimeSampling::Fixed(t) = self.time_sampling {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!(
                    "fixed t must lie in [0, 1], got {t}"
                )));
            }
        }
        if self.eval_every.is_some() && self.eval_samples == 0 {
            return Err(Error::InvalidArgument("eval_samples must be >= 1".into()));
        }
        self.cost_spec.validate()?;
        self.optimizer.validate()
    }
}

/// Point on the straight path from `x0` to `x1` and its constant velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolant {
    pub t: f64,
    pub x_t: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn make_interpolant(x0: &[f64], x1: &[f64], t: f64) -> Result<Interpolant> {
    check_dim("interpolant endpoints", x0.len(), x1.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "t must lie in [0, 1], got {t}"
        )));
    }
    Ok(Interpolant {
        t,
        x_t: x0.iter().zip(x1).map(|(&a, &b)| lerp(a, b, t)).collect(),
        target: x0.iter().zip(x1).map(|(&a, &b)| b - a).collect(),
    })
}

#[inline]
fn lerp(x0: f64, x1: f64, t: f64) -> f64 {
    t * x1 + (1.0 - t) * x0
}

/// One training-log row; the evaluation columns are filled on eval steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub w2_nfe1: Option<f64>,
    pub w2_nfe2: Option<f64>,
}

/// Serializable ChaCha8 position: seed, stream and word offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Format {
            what: "rng state",
            message: format!("bad word position `{}`", self.word_pos),
        })?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything besides the dataset needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
}

pub struct Trainer<'a> {
    data: &'a ConditionedDataset,
    noise: NoiseSpec,
    cfg: TrainConfig,
    model: FlowModel,
    condproc: Option<ConditionProcessor>,
    c_disc: Option<Array2<f64>>,
    rng: ChaCha8Rng,
    step: u64,
}

const TRAIN_STREAM: u64 = 1;

impl<'a> Trainer<'a> {
    /// Fresh run. For `cot` the condition processor is fitted on the whole
    /// dataset here, and a missing cluster count is filled from the task.
    pub fn new(
        data: &'a ConditionedDataset,
        noise: NoiseSpec,
        mut cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_data(data, &noise)?;
        if cfg.coupling == Coupling::Cot && cfg.clusters.is_none() {
            cfg.clusters = Some(data.name.default_clusters());
        }
        let condproc = match cfg.coupling {
            Coupling::Cot => Some(ConditionProcessor::fit(
                data.conditions.view(),
                cfg.pca,
                cfg.clusters.expect("filled above").min(data.len()),
                cfg.seed,
            )?),
            _ => None,
        };
        let spec = MlpSpec::new(
            data.sample_dim() + data.condition_dim() + 1,
            data.sample_dim(),
            cfg.seed,
        )
        .with_hidden(cfg.hidden_dims.clone());
        let model = FlowModel::new(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        Self::assemble(data, noise, cfg, model, condproc, rng, 0)
    }

    /// Continues a run from saved state.
    pub fn resume(
        data: &'a ConditionedDataset,
        noise: NoiseSpec,
        model: FlowModel,
        condproc: Option<ConditionProcessor>,
        state: &TrainerState,
    ) -> Result<Self> {
        state.config.validate()?;
        check_data(data, &noise)?;
        check_dim(
            "model input width",
            data.sample_dim() + data.condition_dim() + 1,
            model.spec().input_dim,
        )?;
        check_dim(
            "model output width",
            data.sample_dim(),
            model.spec().output_dim,
        )?;
        if state.config.coupling == Coupling::Cot && condproc.is_none() {
            return Err(Error::InvalidArgument(
                "cot run cannot resume without its condition processor".into(),
            ));
        }
        let rng = state.rng.restore()?;
        Self::assemble(
            data,
            noise,
            state.config.clone(),
            model,
            condproc,
            rng,
            state.step,
        )
    }

    fn assemble(
        data: &'a ConditionedDataset,
        noise: NoiseSpec,
        cfg: TrainConfig,
        model: FlowModel,
        condproc: Option<ConditionProcessor>,
        rng: ChaCha8Rng,
        step: u64,
    ) -> Result<Self> {
        let c_disc = match &condproc {
            Some(p) if cfg.coupling == Coupling::Cot => {
                Some(p.discretize_all(data.conditions.view())?)
            }
            _ => None,
        };
        Ok(Trainer {
            data,
            noise,
            cfg,
            model,
            condproc,
            c_disc,
            rng,
            step,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn condproc(&self) -> Option<&ConditionProcessor> {
        self.condproc.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            config: self.cfg.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn into_parts(self) -> (FlowModel, Option<ConditionProcessor>) {
        (self.model, self.condproc)
    }

    /// Draws and pairs the next batch without touching the model.
    pub fn next_batch(&mut self) -> Result<PairedBatch> {
        let n = self.data.len();
        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| self.rng.random_range(0..n))
            .collect();
        let x1 = self.data.samples.select(Axis(0), &idx);
        let c = self.data.conditions.select(Axis(0), &idx);
        match self.cfg.coupling {
            Coupling::Independent => {
                pair_independent(x1.view(), c.view(), &self.noise, &mut self.rng)
            }
            Coupling::Ot => pair_ot(x1.view(), c.view(), &self.noise, &mut self.rng),
            Coupling::Cot => {
                let disc = self
                    .c_disc
                    .as_ref()
                    .expect("cot trainer has discretized conditions");
                let cd = disc.select(Axis(0), &idx);
                pair_cot(
                    x1.view(),
                    c.view(),
                    cd.view(),
                    &self.noise,
                    &self.cfg.cost_spec,
                    &mut self.rng,
                )
            }
        }
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.next_batch()?;
        let n = batch.x1.nrows();
        let t: Array1<f64> = match self.cfg.time_sampling {
            TimeSampling::Uniform => (0..n).map(|_| self.rng.random::<f64>()).collect(),
            TimeSampling::Fixed(t) => Array1::from_elem(n, t),
        };
        let mut x_t = batch.x0.clone();
        for (i, mut row) in x_t.rows_mut().into_iter().enumerate() {
            let ti = t[i];
            row.zip_mut_with(&batch.x1.row(i), |a, &b| *a = lerp(*a, b, ti));
        }
        let target = &batch.x1 - &batch.x0;
        let inputs = assemble_inputs(x_t.view(), batch.c_raw.view(), t.view())?;
        let (loss, grad) = self.model.loss_and_grad(inputs.view(), target.view())?;
        self.step += 1;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss,
            });
        }
        self.model
            .adam_step(&grad, &self.cfg.optimizer)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    step: self.step,
                    loss,
                },
                other => other,
            })?;
        Ok(loss)
    }

    /// Trains until the configured step count, reporting each log row.
    pub fn run(&mut self, on_row: impl FnMut(&LogRow) -> Result<()>) -> Result<()> {
        self.run_until(self.cfg.steps, on_row)
    }

    /// Trains until step `stop` (capped at the configured step count).
    pub fn run_until(
        &mut self,
        stop: u64,
        mut on_row: impl FnMut(&LogRow) -> Result<()>,
    ) -> Result<()> {
        let stop = stop.min(self.cfg.steps);
        while self.step < stop {
            let loss = self.train_step()?;
            let mut row = LogRow {
                step: self.step,
                loss,
                w2_nfe1: None,
                w2_nfe2: None,
            };
            if let Some(every) = self.cfg.eval_every {
                if self.step.is_multiple_of(every) {
                    row.w2_nfe1 = Some(self.quick_w2(1)?);
                    row.w2_nfe2 = Some(self.quick_w2(2)?);
                }
            }
            on_row(&row)?;
        }
        Ok(())
    }

    fn quick_w2(&self, steps: usize) -> Result<f64> {
        let eval = eval::evaluate_w2(
            &self.model,
            &self.noise,
            self.data,
            self.cfg.eval_samples,
            self.cfg.seed,
            &SolverConfig::euler(steps),
        )?;
        Ok(eval.task_metric)
    }
}

fn check_data(data: &ConditionedDataset, noise: &NoiseSpec) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    check_dim(
        "dataset condition rows",
        data.len(),
        data.conditions.nrows(),
    )?;
    check_dim("noise dimension", data.sample_dim(), noise.dim)?;
    noise.validate()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    pub condproc: Option<ConditionProcessor>,
    pub log: Vec<LogRow>,
    pub state: TrainerState,
}

/// Full run from scratch.
pub fn train(
    data: &ConditionedDataset,
    noise: NoiseSpec,
    cfg: TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(data, noise, cfg)?;
    let mut log = Vec::with_capacity(trainer.config().steps as usize);
    trainer.run(|row| {
        log.push(*row);
        Ok(())
    })?;
    let state = trainer.state();
    let (model, condproc) = trainer.into_parts();
    Ok(TrainOutcome {
        model,
        condproc,
        log,
        state,
    })
}
