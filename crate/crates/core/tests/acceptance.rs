//! End-to-end acceptance checks, one printed PASS/FAIL line per criterion.
//!
//! Criteria 1-4 train every (task, coupling, seed) model once at the full
//! step budget and share them. That is 18 models, so this test takes hours on
//! one core. Setting `COTFLOW_ACCEPTANCE_CACHE=<dir>` stores and reuses trained
//! checkpoints between runs; a cached model is only reused when its recorded
//! training config matches. `COTFLOW_ACCEPTANCE_FAST_ONLY=1` runs only the
//! criteria that need no trained model.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use cotflow::condproc::ConditionProcessor;
use cotflow::coupling::{pair_cot, pair_cot_from_parts, pair_ot, Coupling, NoiseSpec};
use cotflow::eval::{evaluate, generate, target_draw, Metric};
use cotflow::flow::{train, TrainConfig};
use cotflow::io::{load_checkpoint, save_checkpoint, Checkpoint, ModelState, TaskSpec};
use cotflow::metrics::{
    dba_barycenter, dba_objective, dba_update, dtw, medoid, trajectory_variance, w2_squared,
    DbaConfig, Trajectory,
};
use cotflow::nn::{FlowModel, MlpSpec};
use cotflow::ode::{integrate, FnField, SolverConfig, SolverKind};
use cotflow::ot::{condition_scale, solve_assignment, CostMatrix, CostSpec};
use cotflow::tasks::{gen_moons, TaskName};
use cotflow_oracles::{brute_assignment, brute_dtw, covariance_trace, fd_gradient};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_STEPS: u64 = 50_000;
const EVAL_SAMPLES: usize = 2000;
const MODEL_BUDGET: Duration = Duration::from_secs(20 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: &str, name: &str, o: &Outcome) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {id} [{status}] {name}: {}", o.detail);
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn rows(a: ArrayView2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Evaluation numbers for one trained model.
struct ModelEval {
    train_time: Option<Duration>,
    final_loss: f64,
    w2_nfe1: f64,
    w2_nfe2: f64,
    marginal_nfe100: f64,
    per_label_nfe100: Vec<f64>,
    straightness_nfe100: f64,
    dopri5_nfe: usize,
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("COTFLOW_ACCEPTANCE_CACHE").map(PathBuf::from)
}

fn trained_model(
    task: TaskName,
    coupling: Coupling,
    seed: u64,
) -> (FlowModel, NoiseSpec, Option<Duration>, f64) {
    let spec = TaskSpec {
        seed,
        ..TaskSpec::named(task)
    };
    let (data, noise) = spec.generate().unwrap();
    let cfg = TrainConfig {
        steps: TRAIN_STEPS,
        coupling,
        seed,
        ..TrainConfig::default()
    };
    let cached = cache_dir().map(|d| d.join(format!("{task}_{coupling}_seed{seed}.json")));
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        let ckpt = load_checkpoint(path).unwrap();
        let mut recorded = ckpt.trainer.as_ref().map(|s| s.config.clone());
        if let Some(r) = recorded.as_mut() {
            r.clusters = cfg.clusters;
        }
        if recorded.as_ref() == Some(&cfg) && ckpt.task.as_ref() == Some(&spec) {
            return (
                ckpt.model.restore().unwrap(),
                ckpt.noise,
                None,
                loss_from_cache(path),
            );
        }
    }
    let started = Instant::now();
    let out = train(&data, noise, cfg).unwrap();
    let elapsed = started.elapsed();
    let tail = &out.log[out.log.len().saturating_sub(1000)..];
    let final_loss = mean(&tail.iter().map(|r| r.loss).collect::<Vec<_>>());
    if let Some(path) = cached {
        let ckpt = Checkpoint {
            model: ModelState::capture(&out.model),
            condproc: out.condproc.clone(),
            noise,
            task: Some(spec),
            trainer: Some(out.state.clone()),
        };
        save_checkpoint(&ckpt, &path).unwrap();
        std::fs::write(path.with_extension("loss"), final_loss.to_string()).unwrap();
    }
    (out.model, noise, Some(elapsed), final_loss)
}

fn loss_from_cache(path: &std::path::Path) -> f64 {
    std::fs::read_to_string(path.with_extension("loss"))
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(f64::NAN)
}

fn evaluate_model(task: TaskName, coupling: Coupling, seed: u64) -> ModelEval {
    let (model, noise, train_time, final_loss) = trained_model(task, coupling, seed);
    let target = target_draw(task, EVAL_SAMPLES, seed, None).unwrap();
    let w2 = |steps: usize| {
        evaluate(
            &model,
            &noise,
            &target,
            &SolverConfig::euler(steps),
            seed,
            &[Metric::W2],
        )
        .unwrap()
        .w2
        .unwrap()
    };
    let dense = evaluate(
        &model,
        &noise,
        &target,
        &SolverConfig::euler(100),
        seed,
        &[Metric::W2, Metric::Straightness],
    )
    .unwrap();
    let dense_w2 = dense.w2.unwrap();
    let dopri = generate(
        &model,
        &noise,
        target.conditions.view(),
        &SolverConfig::dopri5(1e-5, 1e-5),
        seed,
    )
    .unwrap();
    let e = ModelEval {
        train_time,
        final_loss,
        w2_nfe1: w2(1).task_metric,
        w2_nfe2: w2(2).task_metric,
        marginal_nfe100: dense_w2.marginal,
        per_label_nfe100: dense_w2.per_label.iter().map(|l| l.w2_squared).collect(),
        straightness_nfe100: dense.straightness.unwrap(),
        dopri5_nfe: dopri.nfe,
    };
    println!(
        "  trained {task} {coupling} seed {seed}: {} final loss {:.4}; W2 nfe1 {:.4} nfe2 {:.4}; nfe100 marginal {:.4} labels {:?}; straightness {:.4}; dopri5 nfe {}",
        e.train_time.map_or_else(|| "cached".to_string(), |t| format!("{:.0}s", t.as_secs_f64())),
        e.final_loss,
        e.w2_nfe1,
        e.w2_nfe2,
        e.marginal_nfe100,
        e.per_label_nfe100,
        e.straightness_nfe100,
        e.dopri5_nfe
    );
    e
}

type Grid = BTreeMap<(Coupling, u64), ModelEval>;

fn train_grid(task: TaskName) -> Grid {
    let mut grid = Grid::new();
    for coupling in Coupling::ALL {
        for seed in SEEDS {
            grid.insert((coupling, seed), evaluate_model(task, coupling, seed));
        }
    }
    grid
}

fn seed_mean(grid: &Grid, coupling: Coupling, f: impl Fn(&ModelEval) -> f64) -> f64 {
    mean(
        &SEEDS
            .iter()
            .map(|s| f(&grid[&(coupling, *s)]))
            .collect::<Vec<_>>(),
    )
}

fn slowest(grid: &Grid) -> Option<Duration> {
    grid.values().filter_map(|e| e.train_time).max()
}

fn fork_ordering(grid: &Grid) -> Outcome {
    let m = |c, nfe2: bool| seed_mean(grid, c, |e| if nfe2 { e.w2_nfe2 } else { e.w2_nfe1 });
    let (cot1, cfm1, ot1) = (
        m(Coupling::Cot, false),
        m(Coupling::Independent, false),
        m(Coupling::Ot, false),
    );
    let (cot2, cfm2) = (m(Coupling::Cot, true), m(Coupling::Independent, true));
    let time_ok = slowest(grid).is_none_or(|t| t <= MODEL_BUDGET);
    Outcome {
        pass: cot1 < cfm1 && cot1 < ot1 && cot2 <= 0.5 * cfm2 && time_ok,
        detail: format!(
            "nfe1 cot {cot1:.4} cfm {cfm1:.4} ot {ot1:.4}; nfe2 cot {cot2:.4} <= 0.5 x cfm {cfm2:.4}; slowest model {}",
            slowest(grid).map_or_else(|| "cached".to_string(), |t| format!("{:.0}s", t.as_secs_f64()))
        ),
    }
}

fn moons_ordering(grid: &Grid) -> Outcome {
    let m = |c, nfe2: bool| seed_mean(grid, c, |e| if nfe2 { e.w2_nfe2 } else { e.w2_nfe1 });
    let (cot1, ot1, cfm1) = (
        m(Coupling::Cot, false),
        m(Coupling::Ot, false),
        m(Coupling::Independent, false),
    );
    let cot2 = m(Coupling::Cot, true);
    let change = (cot2 - cot1).abs() / cot1;
    Outcome {
        pass: cot1 < ot1 && ot1 < cfm1 && change <= 0.3,
        detail: format!(
            "nfe1 cot {cot1:.4} < ot {ot1:.4} < cfm {cfm1:.4}; cot nfe2 {cot2:.4} ({:.1}% change)",
            100.0 * change
        ),
    }
}

fn bias_demo(grid: &Grid) -> Outcome {
    let labels = grid[&(Coupling::Cot, SEEDS[0])].per_label_nfe100.len();
    let per_label = |c| -> Vec<f64> {
        (0..labels)
            .map(|l| seed_mean(grid, c, |e| e.per_label_nfe100[l]))
            .collect()
    };
    let (ot, cot) = (per_label(Coupling::Ot), per_label(Coupling::Cot));
    let ratios: Vec<f64> = ot.iter().zip(&cot).map(|(o, c)| o / c).collect();
    let (m_ot, m_cot) = (
        seed_mean(grid, Coupling::Ot, |e| e.marginal_nfe100),
        seed_mean(grid, Coupling::Cot, |e| e.marginal_nfe100),
    );
    let marginal_ratio = m_ot.max(m_cot) / m_ot.min(m_cot);
    Outcome {
        pass: ratios.iter().any(|&r| r >= 2.0) && marginal_ratio <= 3.0,
        detail: format!(
            "per-label ot {ot:.4?} vs cot {cot:.4?} (ratios {ratios:.2?}); marginal ot {m_ot:.4} cot {m_cot:.4} (ratio {marginal_ratio:.2})"
        ),
    }
}

fn straightness_check(grid: &Grid) -> Outcome {
    let cot = seed_mean(grid, Coupling::Cot, |e| e.straightness_nfe100);
    let cfm = seed_mean(grid, Coupling::Independent, |e| e.straightness_nfe100);
    Outcome {
        pass: cot < cfm,
        detail: format!("mean straightness cot {cot:.5} < cfm {cfm:.5}"),
    }
}

fn k_limits() -> Outcome {
    let noise = NoiseSpec::standard(2);
    let (moons, _) = gen_moons(10_000, 0).unwrap();
    let single = ConditionProcessor::fit(moons.conditions.view(), None, 1, 0).unwrap();
    let mut k1_equal = 0;
    for b in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(b);
        let idx: Vec<usize> = (0..256).map(|_| rng.random_range(0..moons.len())).collect();
        let x1 = moons.samples.select(Axis(0), &idx);
        let c = moons.conditions.select(Axis(0), &idx);
        let disc = single.discretize_all(c.view()).unwrap();
        let ot = pair_ot(
            x1.view(),
            c.view(),
            &noise,
            &mut ChaCha8Rng::seed_from_u64(b),
        )
        .unwrap();
        let cot = pair_cot(
            x1.view(),
            c.view(),
            disc.view(),
            &noise,
            &CostSpec::default(),
            &mut ChaCha8Rng::seed_from_u64(b),
        )
        .unwrap();
        if ot.assignment == cot.assignment && ot.x0 == cot.x0 {
            k1_equal += 1;
        }
    }
    let mut kn_match = 0;
    for b in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + b);
        let n = 2 + (b as usize) % 5;
        let x1 = normal_matrix(&mut rng, n, 2);
        let c = normal_matrix(&mut rng, n, 2);
        let x0 = noise.sample(n, &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // K = N: every condition is its own cluster centre
        let batch = pair_cot_from_parts(
            x0.clone(),
            perm.clone(),
            x1.view(),
            c.view(),
            c.view(),
            &CostSpec::fixed(1e6),
        )
        .unwrap();
        let c0 = c.select(Axis(0), &perm);
        let cost = CostMatrix::conditional(x0.view(), c0.view(), x1.view(), c.view(), 1e6).unwrap();
        let m: Vec<Vec<f64>> = (0..n).map(|i| cost.row(i).to_vec()).collect();
        let (brute, _) = brute_assignment(&m).unwrap();
        if batch.assignment.as_ref() == Some(&perm) && brute == perm {
            kn_match += 1;
        }
    }
    Outcome {
        pass: k1_equal == 100 && kn_match == 100,
        detail: format!(
            "K=1 equals OT bitwise on {k1_equal}/100 batches; K=N, gamma=1e6 gives the condition-matching pairing on {kn_match}/100 batches"
        ),
    }
}

fn gamma_stability() -> Outcome {
    let (data, noise) = gen_moons(64, 7).unwrap();
    let proc = ConditionProcessor::fit(data.conditions.view(), None, 2, 7).unwrap();
    let c1 = proc.discretize_all(data.conditions.view()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = noise.sample(64, &mut rng).unwrap();
    let mut perm: Vec<usize> = (0..64).collect();
    perm.shuffle(&mut rng);
    let c0 = c1.select(Axis(0), &perm);
    let scale = condition_scale(x0.view(), c0.view(), data.samples.view(), c1.view()).unwrap();
    let assign = |gamma: f64| {
        pair_cot_from_parts(
            x0.clone(),
            perm.clone(),
            data.samples.view(),
            data.conditions.view(),
            c1.view(),
            &CostSpec::fixed(gamma * scale),
        )
        .unwrap()
        .assignment
        .unwrap()
    };
    let zero = assign(0.0);
    let stable: Vec<Vec<usize>> = [10.0, 100.0, 1000.0, 10000.0]
        .iter()
        .map(|&g| assign(g))
        .collect();
    let identical = stable.windows(2).all(|w| w[0] == w[1]);
    let differs = stable[0] != zero;
    Outcome {
        pass: identical && differs,
        detail: format!(
            "gamma in {{10,100,1000,10000}} x scale {scale:.4}: identical {identical}; differs from gamma=0 {differs}"
        ),
    }
}

fn tv_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for s in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n = 2 + (s as usize) % 30;
        let d = 1 + (s as usize) % 4;
        let start = normal_matrix(&mut rng, 1, d);
        let steps = normal_matrix(&mut rng, n, d);
        let set: Vec<Trajectory> = (0..n)
            .map(|i| {
                let mut p = Array2::zeros((2, d));
                p.row_mut(0).assign(&start.row(0));
                p.row_mut(1).assign(&(&start.row(0) + &steps.row(i)));
                Trajectory::new(p).unwrap()
            })
            .collect();
        let tv = trajectory_variance(&set).unwrap();
        worst = worst.max((tv - covariance_trace(&rows(steps.view()))).abs());
    }
    Outcome {
        pass: worst < 1e-8,
        detail: format!("max |TV - trace(cov)| over 50 sets = {worst:.3e}"),
    }
}

fn oracle_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut assignment_ok = 0;
    for case in 0..1000 {
        let n = 1 + case % 8;
        let m: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| match case % 3 {
                        // integer costs with many ties
                        0 => f64::from(rng.random_range(0u8..4)),
                        _ => rng.random_range(0.0..10.0),
                    })
                    .collect()
            })
            .collect();
        let plan = solve_assignment(&CostMatrix::from_rows(&m).unwrap()).unwrap();
        if brute_assignment(&m).unwrap() == (plan.assignment, plan.total_cost) {
            assignment_ok += 1;
        }
    }

    let mut dtw_ok = 0;
    for _ in 0..500 {
        let (a, b) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let d = rng.random_range(1..=3);
        let ta = normal_matrix(&mut rng, a, d);
        let tb = normal_matrix(&mut rng, b, d);
        let fast = dtw(
            &Trajectory::new(ta.clone()).unwrap(),
            &Trajectory::new(tb.clone()).unwrap(),
        )
        .unwrap();
        let slow = brute_dtw(&rows(ta.view()), &rows(tb.view())).unwrap();
        if (fast - slow).abs() <= 1e-12 * slow.max(1.0) {
            dtw_ok += 1;
        }
    }

    let mut grad_ok = 0;
    for case in 0..100u64 {
        let input = 1 + (case as usize) % 3;
        let output = 1 + (case as usize) % 2;
        let hidden = vec![2 + (case as usize) % 4; 1 + (case as usize) % 2];
        let model = FlowModel::new(MlpSpec::new(input, output, case).with_hidden(hidden)).unwrap();
        assert!(model.parameters().len() <= 100);
        let batch = 1 + (case as usize) % 5;
        let x = normal_matrix(&mut rng, batch, input);
        let y = normal_matrix(&mut rng, batch, output);
        let (_, grad) = model.loss_and_grad(x.view(), y.view()).unwrap();
        let mut probe = model.clone();
        let fd = fd_gradient(
            |theta| {
                probe.parameters_mut().copy_from_slice(theta);
                probe.loss_and_grad(x.view(), y.view()).unwrap().0
            },
            model.parameters(),
            1e-6,
        );
        if grad
            .iter()
            .zip(&fd)
            .all(|(g, f)| (g - f).abs() <= 1e-6 + 1e-3 * f.abs())
        {
            grad_ok += 1;
        }
    }

    let mut w2_ok = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let a = normal_matrix(&mut rng, n, 2);
        let b = normal_matrix(&mut rng, n, 2);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        a.row(i)
                            .iter()
                            .zip(b.row(j).iter())
                            .map(|(p, q)| (p - q) * (p - q))
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let (_, best) = brute_assignment(&cost).unwrap();
        let w2 = w2_squared(a.view(), b.view()).unwrap();
        if (w2 - best / n as f64).abs() <= 1e-12 * w2.max(1.0) {
            w2_ok += 1;
        }
    }

    let mut dba_ok = 0;
    for _ in 0..100 {
        let count = rng.random_range(2..=6);
        let set: Vec<Trajectory> = (0..count)
            .map(|_| {
                let len = rng.random_range(2..=6);
                Trajectory::new(normal_matrix(&mut rng, len, 2)).unwrap()
            })
            .collect();
        // raw updates from the medoid, without the guard in dba_barycenter
        let mut mu = set[medoid(&set).unwrap()].clone();
        let mut trace = vec![dba_objective(&set, &mu).unwrap()];
        for _ in 0..10 {
            mu = dba_update(&set, &mu).unwrap();
            trace.push(dba_objective(&set, &mu).unwrap());
        }
        let guarded = dba_barycenter(&set, &DbaConfig::default())
            .unwrap()
            .objective_trace;
        let monotone = |t: &[f64]| t.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].max(1.0));
        if monotone(&trace) && monotone(&guarded) {
            dba_ok += 1;
        }
    }
    Outcome {
        pass: assignment_ok == 1000 && dtw_ok == 500 && grad_ok == 100 && w2_ok == 200 && dba_ok == 100,
        detail: format!(
            "assignment {assignment_ok}/1000, dtw {dtw_ok}/500, gradients {grad_ok}/100, w2 {w2_ok}/200, dba monotone {dba_ok}/100"
        ),
    }
}

fn solver_orders() -> Outcome {
    let calls = std::cell::Cell::new(0usize);
    let field = FnField(|_t: f64, x: ArrayView2<f64>, _c: ArrayView2<f64>| {
        calls.set(calls.get() + 1);
        x.to_owned()
    });
    let x0 = Array2::from_elem((1, 1), 1.0);
    let c = Array2::zeros((1, 0));
    let mut nfe_ok = true;
    let mut run = |cfg: SolverConfig| {
        calls.set(0);
        let r = integrate(&field, x0.view(), c.view(), &cfg).unwrap();
        let expected = match cfg.kind {
            SolverKind::Euler => cfg.steps,
            SolverKind::Midpoint => 2 * cfg.steps,
            SolverKind::Dopri5 => 1 + 6 * (r.accepted + r.rejected),
        };
        nfe_ok &= r.nfe == expected && calls.get() == expected;
        (r.samples[[0, 0]] - std::f64::consts::E).abs()
    };
    let euler = run(SolverConfig::euler(32)) / run(SolverConfig::euler(64));
    let midpoint = run(SolverConfig::midpoint(32)) / run(SolverConfig::midpoint(64));
    let rtol = 1e-5;
    let dopri_err = run(SolverConfig::dopri5(rtol, 1e-8));
    Outcome {
        pass: (euler - 2.0).abs() <= 0.4
            && (midpoint - 4.0).abs() <= 0.8
            && dopri_err < 10.0 * rtol
            && nfe_ok,
        detail: format!(
            "euler ratio {euler:.3}, midpoint ratio {midpoint:.3}, dopri5 |x(1) - e| {dopri_err:.2e}, nfe bookkeeping exact {nfe_ok}"
        ),
    }
}

#[test]
fn acceptance() {
    let started = Instant::now();
    // cheap criteria first so their lines appear before the long training runs
    let mut results = vec![
        ("5", "K-limit pairings", k_limits()),
        ("6", "gamma stability", gamma_stability()),
        ("7", "TV covariance identity", tv_identity()),
        ("8", "oracle equivalence", oracle_suite()),
        ("9", "solver orders", solver_orders()),
    ];
    if std::env::var_os("COTFLOW_ACCEPTANCE_FAST_ONLY").is_some() {
        for (id, name, o) in &results {
            report(id, name, o);
        }
        return;
    }
    for (id, name, o) in &results {
        report(id, name, o);
    }

    let fork = train_grid(TaskName::Fork);
    let moons = train_grid(TaskName::Moons);
    let trained = vec![
        ("1", "fork ordering", fork_ordering(&fork)),
        ("2", "moons ordering", moons_ordering(&moons)),
        ("3", "bias demonstration", bias_demo(&moons)),
        ("4", "straightness", straightness_check(&moons)),
    ];
    for (id, name, o) in &trained {
        report(id, name, o);
    }
    results.extend(trained);

    // supplementary checks on the same models
    let loss_cot = seed_mean(&moons, Coupling::Cot, |e| e.final_loss);
    let loss_cfm = seed_mean(&moons, Coupling::Independent, |e| e.final_loss);
    let nfe: Vec<usize> = moons.values().map(|e| e.dopri5_nfe).collect();
    let extra = vec![
        (
            "moons final training loss cot < independent",
            loss_cot < loss_cfm,
            format!("{loss_cot:.4} vs {loss_cfm:.4}"),
        ),
        (
            "dopri5 nfe within [20, 500] on trained moons models",
            nfe.iter().all(|n| (20..=500).contains(n)),
            format!("{nfe:?}"),
        ),
    ];
    for (name, pass, detail) in &extra {
        println!(
            "check [{}] {name}: {detail}",
            if *pass { "PASS" } else { "FAIL" }
        );
    }

    results.sort_by(|a, b| a.0.cmp(b.0));
    println!("summary after {:.0}s:", started.elapsed().as_secs_f64());
    for (id, name, o) in &results {
        report(id, name, o);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
    assert!(extra.iter().all(|e| e.1), "a supplementary check failed");
}
