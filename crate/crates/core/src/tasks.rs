//! Seeded generators for the synthetic conditional tasks.
//!
//! * `moons`: two interleaved half circles, condition is the moon label,
//!   noise prior is a ring of eight Gaussians.
//! * `fork`: `y = 0` for `x <= 0`, `y = +-x` with equal odds for `x > 0`;
//!   condition is `x`, prior is a standard Gaussian.
//! * `traj_fork`: straight 2-D trajectories from the origin to `(1, +-1)`;
//!   the condition (start point) is constant, so the two modes cannot be
//!   told apart from it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coupling::{NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::metrics::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Moons,
    Fork,
    TrajFork,
}

impl TaskName {
    pub const ALL: [TaskName; 3] = [TaskName::Moons, TaskName::Fork, TaskName::TrajFork];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Moons => "moons",
            TaskName::Fork => "fork",
            TaskName::TrajFork => "traj_fork",
        }
    }

    /// Cluster count used for pairing when a config does not set one.
    pub fn default_clusters(self) -> usize {
        match self {
            TaskName::Moons | TaskName::Fork => 2,
            TaskName::TrajFork => crate::condproc::DEFAULT_CLUSTERS,
        }
    }

    /// Whether the conditions take finitely many values, so that evaluation
    /// can compare generated and target samples label by label.
    pub fn has_discrete_conditions(self) -> bool {
        matches!(self, TaskName::Moons)
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown task `{s}` (expected one of moons, fork, traj_fork)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedDataset {
    pub name: TaskName,
    /// `N x d` targets `x1`.
    pub samples: Array2<f64>,
    /// `N x q` raw conditions `o`.
    pub conditions: Array2<f64>,
    pub metadata: BTreeMap<String, String>,
}

impl ConditionedDataset {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn sample_dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn condition_dim(&self) -> usize {
        self.conditions.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoonsParams {
    pub scale: f64,
    pub jitter: f64,
}

impl Default for MoonsParams {
    fn default() -> Self {
        MoonsParams {
            scale: 3.0,
            jitter: 0.05,
        }
    }
}

pub const RING_MODES: usize = 8;
pub const RING_RADIUS: f64 = 8.0;
pub const RING_SIGMA: f64 = 0.5;

pub fn moons_prior() -> NoiseSpec {
    NoiseSpec {
        dim: 2,
        kind: NoiseKind::GaussianRing {
            modes: RING_MODES,
            radius: RING_RADIUS,
            sigma: RING_SIGMA,
        },
    }
}

pub fn gen_moons(n: usize, seed: u64) -> Result<(ConditionedDataset, NoiseSpec)> {
    gen_moons_with(n, seed, MoonsParams::default())
}

/// Row `i` gets label `i % 2`: 0 is the upper moon `(cos a, sin a)`, 1 the
/// lower moon `(1 - cos a, 0.5 - sin a)`, with `a ~ U(0, pi)`. Jitter is
/// added before scaling.
pub fn gen_moons_with(
    n: usize,
    seed: u64,
    params: MoonsParams,
) -> Result<(ConditionedDataset, NoiseSpec)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "moons needs n >= 2, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((n, 2));
    let mut conditions = Array2::zeros((n, 1));
    for i in 0..n {
        let label = i % 2;
        let a = rng.random::<f64>() * PI;
        let (mut x, mut y) = if label == 0 {
            (a.cos(), a.sin())
        } else {
            (1.0 - a.cos(), 0.5 - a.sin())
        };
        let jx: f64 = rng.sample(StandardNormal);
        let jy: f64 = rng.sample(StandardNormal);
        x += params.jitter * jx;
        y += params.jitter * jy;
        samples[[i, 0]] = params.scale * x;
        samples[[i, 1]] = params.scale * y;
        conditions[[i, 0]] = label as f64;
    }
    let metadata = meta(&[
        ("seed", seed.to_string()),
        ("n", n.to_string()),
        ("scale", params.scale.to_string()),
        ("jitter", params.jitter.to_string()),
        (
            "prior",
            format!("ring modes={RING_MODES} radius={RING_RADIUS} sigma={RING_SIGMA}"),
        ),
    ]);
    Ok((
        ConditionedDataset {
            name: TaskName::Moons,
            samples,
            conditions,
            metadata,
        },
        moons_prior(),
    ))
}

pub const FORK_RANGE: f64 = 2.0;

pub fn fork_prior() -> NoiseSpec {
    NoiseSpec {
        dim: 1,
        kind: NoiseKind::StandardGaussian,
    }
}

/// `x ~ U(-2, 2)`; samples are `y`, conditions are `x`.
pub fn gen_fork(n: usize, seed: u64) -> Result<(ConditionedDataset, NoiseSpec)> {
    if n < 1 {
        return Err(Error::InvalidArgument("fork needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((n, 1));
    let mut conditions = Array2::zeros((n, 1));
    for i in 0..n {
        let x = rng.random_range(-FORK_RANGE..FORK_RANGE);
        let flip = rng.random::<bool>();
        let y = if x <= 0.0 {
            0.0
        } else if flip {
            x
        } else {
            -x
        };
        samples[[i, 0]] = y;
        conditions[[i, 0]] = x;
    }
    let metadata = meta(&[
        ("seed", seed.to_string()),
        ("n", n.to_string()),
        ("x_range", format!("[-{FORK_RANGE}, {FORK_RANGE})")),
        ("prior", "standard_gaussian".into()),
    ]);
    Ok((
        ConditionedDataset {
            name: TaskName::Fork,
            samples,
            conditions,
            metadata,
        },
        fork_prior(),
    ))
}

pub const TRAJ_JITTER: f64 = 0.02;

pub fn gen_traj_fork(
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<(ConditionedDataset, NoiseSpec)> {
    gen_traj_fork_with(n, horizon, seed, TRAJ_JITTER)
}

/// Each row flattens `horizon` waypoints `(x, y)`. Waypoint `k` sits at
/// `k / (horizon - 1) * (1, +-1)` plus jitter; the start stays at the origin.
pub fn gen_traj_fork_with(
    n: usize,
    horizon: usize,
    seed: u64,
    jitter: f64,
) -> Result<(ConditionedDataset, NoiseSpec)> {
    if n < 2 || horizon < 2 {
        return Err(Error::InvalidArgument(format!(
            "traj_fork needs n >= 2 and horizon >= 2, got n={n}, horizon={horizon}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((n, 2 * horizon));
    let conditions = Array2::zeros((n, 2));
    for i in 0..n {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for k in 1..horizon {
            let s = k as f64 / (horizon - 1) as f64;
            let jx: f64 = rng.sample(StandardNormal);
            let jy: f64 = rng.sample(StandardNormal);
            samples[[i, 2 * k]] = s + jitter * jx;
            samples[[i, 2 * k + 1]] = sign * s + jitter * jy;
        }
    }
    let metadata = meta(&[
        ("seed", seed.to_string()),
        ("n", n.to_string()),
        ("horizon", horizon.to_string()),
        ("jitter", jitter.to_string()),
        ("prior", "standard_gaussian".into()),
    ]);
    Ok((
        ConditionedDataset {
            name: TaskName::TrajFork,
            samples,
            conditions,
            metadata,
        },
        NoiseSpec {
            dim: 2 * horizon,
            kind: NoiseKind::StandardGaussian,
        },
    ))
}

/// Splits flattened `(x, y)` rows back into trajectories.
pub fn rows_to_trajectories(rows: &Array2<f64>, point_dim: usize) -> Result<Vec<Trajectory>> {
    if point_dim == 0 || !rows.ncols().is_multiple_of(point_dim) {
        return Err(Error::InvalidArgument(format!(
            "row width {} is not a multiple of point dimension {point_dim}",
            rows.ncols()
        )));
    }
    rows.rows()
        .into_iter()
        .map(|r| {
            let points = Array2::from_shape_vec((rows.ncols() / point_dim, point_dim), r.to_vec())
                .expect("width checked above");
            Trajectory::new(points)
        })
        .collect()
}

pub const DEFAULT_HORIZON: usize = 8;

/// Dispatches to the generator for `name`.
pub fn generate(
    name: TaskName,
    n: usize,
    seed: u64,
    horizon: Option<usize>,
) -> Result<(ConditionedDataset, NoiseSpec)> {
    match name {
        TaskName::Moons => gen_moons(n, seed),
        TaskName::Fork => gen_fork(n, seed),
        TaskName::TrajFork => gen_traj_fork(n, horizon.unwrap_or(DEFAULT_HORIZON), seed),
    }
}

fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_stratified_labels() {
        let (ds, _) = gen_moons(4, 17).unwrap();
        let ones = ds.conditions.iter().filter(|&&c| c == 1.0).count();
        assert_eq!(ones, 2);
        assert!(gen_moons(1, 0).is_err());
    }

    #[test]
    fn noiseless_upper_moon_on_circle() {
        let (ds, _) = gen_moons_with(
            200,
            3,
            MoonsParams {
                scale: 3.0,
                jitter: 0.0,
            },
        )
        .unwrap();
        for i in (0..200).step_by(2) {
            let (x, y) = (ds.samples[[i, 0]], ds.samples[[i, 1]]);
            assert!(((x * x + y * y).sqrt() - 3.0).abs() < 1e-12);
            assert!(y >= -1e-12);
        }
    }

    #[test]
    fn moons_class_centroids() {
        // centroid of a unit half-circle arc is (0, 2/pi)
        let (ds, _) = gen_moons(10_000, 5).unwrap();
        let mut sums = [[0.0; 2]; 2];
        for i in 0..ds.len() {
            let l = ds.conditions[[i, 0]] as usize;
            sums[l][0] += ds.samples[[i, 0]];
            sums[l][1] += ds.samples[[i, 1]];
        }
        let m = 5000.0;
        let expect = [[0.0, 3.0 * 2.0 / PI], [3.0, 3.0 * (0.5 - 2.0 / PI)]];
        for l in 0..2 {
            for k in 0..2 {
                assert!(
                    (sums[l][k] / m - expect[l][k]).abs() < 0.05,
                    "label {l} coord {k}"
                );
            }
        }
    }

    #[test]
    fn fork_rule() {
        let (ds, prior) = gen_fork(10_000, 9).unwrap();
        assert_eq!(prior.dim, 1);
        let mut pos = 0usize;
        let mut up = 0usize;
        for i in 0..ds.len() {
            let (x, y) = (ds.conditions[[i, 0]], ds.samples[[i, 0]]);
            assert!((-2.0..2.0).contains(&x));
            if x <= 0.0 {
                assert_eq!(y, 0.0);
            } else {
                pos += 1;
                assert!(y == x || y == -x);
                up += (y == x) as usize;
            }
        }
        let frac = up as f64 / pos as f64;
        assert!((frac - 0.5).abs() < 0.03, "{frac}");
    }

    #[test]
    fn generators_are_reproducible() {
        assert_eq!(gen_fork(1, 4).unwrap().0, gen_fork(1, 4).unwrap().0);
        assert_eq!(gen_moons(50, 4).unwrap().0, gen_moons(50, 4).unwrap().0);
        assert_eq!(
            gen_traj_fork(20, 5, 4).unwrap().0,
            gen_traj_fork(20, 5, 4).unwrap().0
        );
        assert_ne!(gen_moons(50, 4).unwrap().0, gen_moons(50, 5).unwrap().0);
    }

    #[test]
    fn traj_fork_noiseless_has_two_modes() {
        let (ds, _) = gen_traj_fork_with(100, 5, 2, 0.0).unwrap();
        let mut distinct: Vec<Vec<f64>> = Vec::new();
        for r in ds.samples.rows() {
            let v = r.to_vec();
            if !distinct.contains(&v) {
                distinct.push(v);
            }
        }
        assert_eq!(distinct.len(), 2);
        assert!(ds.conditions.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn traj_fork_mode_balance() {
        let (ds, _) = gen_traj_fork(10_000, 3, 8).unwrap();
        let up = ds.samples.column(5).iter().filter(|&&y| y > 0.0).count();
        let frac = up as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.03, "{frac}");
    }

    #[test]
    fn task_names_parse() {
        assert_eq!("traj_fork".parse::<TaskName>().unwrap(), TaskName::TrajFork);
        assert!("maze".parse::<TaskName>().is_err());
    }
}
