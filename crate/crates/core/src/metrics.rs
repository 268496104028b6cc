//! Distribution and trajectory metrics.
//!
//! DTW uses squared Euclidean local costs summed along the best monotone
//! alignment (steps `(1,0)`, `(0,1)`, `(1,1)`), and reports the square root
//! of that sum. Under this convention the DBA averaging step is the exact
//! minimizer for fixed alignments, so its objective never increases.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::ot::{solve_assignment, CostMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    points: Array2<f64>,
}

impl Trajectory {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Empty("trajectory"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory"));
        }
        Ok(Trajectory { points })
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn into_points(self) -> Array2<f64> {
        self.points
    }
}

/// One row of the evaluation CSV. Metrics that were not requested are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: String,
    pub coupling: String,
    pub solver: String,
    pub nfe: usize,
    pub seed: u64,
    pub w2_squared: Option<f64>,
    pub tv: Option<f64>,
    pub straightness: Option<f64>,
}

/// Squared 2-Wasserstein distance between two equal-size empirical sets:
/// the optimal assignment cost divided by `N`.
pub fn w2_squared(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() == 0 {
        return Err(Error::Empty("wasserstein sample set"));
    }
    check_dim("wasserstein set sizes", a.nrows(), b.nrows())?;
    check_dim("wasserstein point width", a.ncols(), b.ncols())?;
    let plan = solve_assignment(&CostMatrix::unconditional(a, b)?)?;
    Ok(plan.total_cost / a.nrows() as f64)
}

#[inline]
fn local_cost(a: ArrayView2<f64>, i: usize, b: ArrayView2<f64>, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j).iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum()
}

fn accumulated(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = (a.nrows(), b.nrows());
    let mut acc = Array2::from_elem((n + 1, m + 1), f64::INFINITY);
    acc[[0, 0]] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let best = acc[[i - 1, j - 1]]
                .min(acc[[i - 1, j]])
                .min(acc[[i, j - 1]]);
            acc[[i, j]] = local_cost(a, i - 1, b, j - 1) + best;
        }
    }
    acc
}

fn check_pair(a: &Trajectory, b: &Trajectory) -> Result<()> {
    check_dim("dtw point width", a.dim(), b.dim())
}

/// DTW distance.
pub fn dtw(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    check_pair(a, b)?;
    let acc = accumulated(a.points(), b.points());
    Ok(acc[[a.len(), b.len()]].sqrt())
}

/// DTW distance and an optimal alignment path as `(index in a, index in b)`
/// pairs from `(0, 0)` to the last points. The backtrack prefers the diagonal
/// on ties, then the step in `a`.
pub fn dtw_path(a: &Trajectory, b: &Trajectory) -> Result<(f64, Vec<(usize, usize)>)> {
    check_pair(a, b)?;
    let acc = accumulated(a.points(), b.points());
    let (mut i, mut j) = (a.len(), b.len());
    let mut path = vec![(i - 1, j - 1)];
    while (i, j) != (1, 1) {
        let diag = acc[[i - 1, j - 1]];
        let up = acc[[i - 1, j]];
        let left = acc[[i, j - 1]];
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i - 1, j - 1));
    }
    path.reverse();
    Ok((acc[[a.len(), b.len()]].sqrt(), path))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbaConfig {
    /// Barycenter length; `None` keeps the medoid's length.
    pub length: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for DbaConfig {
    fn default() -> Self {
        DbaConfig {
            length: None,
            max_iter: 30,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbaResult {
    pub barycenter: Trajectory,
    /// `sum_i dtw(a_i, mu)^2` for the initial medoid and after every
    /// accepted update.
    pub objective_trace: Vec<f64>,
}

/// `sum_i dtw(a_i, mu)^2`.
pub fn dba_objective(set: &[Trajectory], mu: &Trajectory) -> Result<f64> {
    set.iter().map(|a| dtw(a, mu).map(|d| d * d)).sum()
}

/// Index of the set member with the smallest summed squared DTW to the others
/// (lowest index on ties).
pub fn medoid(set: &[Trajectory]) -> Result<usize> {
    if set.is_empty() {
        return Err(Error::Empty("trajectory set"));
    }
    let n = set.len();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = dtw(&set[i], &set[j])?;
            d2[i * n + j] = d * d;
            d2[j * n + i] = d * d;
        }
    }
    let mut best = (0, f64::INFINITY);
    for i in 0..n {
        let s: f64 = d2[i * n..(i + 1) * n].iter().sum();
        if s < best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// One DBA update: every barycenter point becomes the mean of the points
/// aligned to it.
pub fn dba_update(set: &[Trajectory], mu: &Trajectory) -> Result<Trajectory> {
    let (len, d) = (mu.len(), mu.dim());
    let mut sums = Array2::<f64>::zeros((len, d));
    let mut counts = vec![0usize; len];
    for a in set {
        let (_, path) = dtw_path(a, mu)?;
        for (i, j) in path {
            let mut row = sums.row_mut(j);
            row += &a.points().row(i);
            counts[j] += 1;
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        if c == 0 {
            sums.row_mut(j).assign(&mu.points().row(j));
        } else {
            sums.row_mut(j).mapv_inplace(|v| v / c as f64);
        }
    }
    Trajectory::new(sums)
}

/// Linear resampling to `len` points.
fn resample(t: &Trajectory, len: usize) -> Result<Trajectory> {
    if len == 0 {
        return Err(Error::InvalidArgument(
            "barycenter length must be >= 1".into(),
        ));
    }
    let src = t.points();
    let m = src.nrows();
    if m == len {
        return Ok(t.clone());
    }
    let mut out = Array2::zeros((len, t.dim()));
    for k in 0..len {
        let pos = if len == 1 {
            0.0
        } else {
            k as f64 * (m - 1) as f64 / (len - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(m - 1);
        let w = pos - lo as f64;
        let row = &src.row(lo) * (1.0 - w) + &src.row(hi) * w;
        out.row_mut(k).assign(&row);
    }
    Trajectory::new(out)
}

/// DTW barycenter averaging, started from the medoid. Stops when an update
/// improves the objective by less than `tol` or after `max_iter` updates; an
/// update that would raise the objective is discarded.
pub fn dba_barycenter(set: &[Trajectory], cfg: &DbaConfig) -> Result<DbaResult> {
    let start = medoid(set)?;
    let d = set[start].dim();
    for t in set {
        check_dim("trajectory point width", d, t.dim())?;
    }
    let mut mu = match cfg.length {
        Some(len) => resample(&set[start], len)?,
        None => set[start].clone(),
    };
    let mut obj = dba_objective(set, &mu)?;
    let mut trace = vec![obj];
    for _ in 0..cfg.max_iter {
        let next = dba_update(set, &mu)?;
        let next_obj = dba_objective(set, &next)?;
        if next_obj > obj {
            break;
        }
        let gain = obj - next_obj;
        mu = next;
        obj = next_obj;
        trace.push(obj);
        if gain < cfg.tol {
            break;
        }
    }
    Ok(DbaResult {
        barycenter: mu,
        objective_trace: trace,
    })
}

/// Mean squared DTW distance to the DBA barycenter.
pub fn trajectory_variance(set: &[Trajectory]) -> Result<f64> {
    let res = dba_barycenter(set, &DbaConfig::default())?;
    Ok(res.objective_trace.last().copied().unwrap_or(0.0) / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn traj(points: Array2<f64>) -> Trajectory {
        Trajectory::new(points).unwrap()
    }

    #[test]
    fn w2_examples() {
        let a = array![[0.0], [1.0], [5.0]];
        assert_eq!(w2_squared(a.view(), a.view()).unwrap(), 0.0);
        assert_eq!(
            w2_squared(array![[0.0]].view(), array![[3.0]].view()).unwrap(),
            9.0
        );
        assert!(w2_squared(a.view(), array![[0.0]].view()).is_err());
    }

    #[test]
    fn dtw_examples() {
        let a = traj(array![[0.0], [1.0], [2.0]]);
        assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        assert_eq!(
            dtw(&traj(array![[0.0]]), &traj(array![[3.0]])).unwrap(),
            3.0
        );
        // singleton against a 2-point path must visit both points
        let d = dtw(&traj(array![[0.0]]), &traj(array![[1.0], [2.0]])).unwrap();
        assert!((d * d - 5.0).abs() < 1e-12);
        assert!(dtw(&a, &traj(array![[0.0, 1.0]])).is_err());
    }

    #[test]
    fn dtw_path_prefers_diagonal() {
        let a = traj(array![[0.0], [0.0]]);
        let (_, path) = dtw_path(&a, &a).unwrap();
        assert_eq!(path, vec![(0, 0), (1, 1)]);
        let (d, path) = dtw_path(
            &traj(array![[0.0], [1.0], [1.0]]),
            &traj(array![[0.0], [1.0]]),
        )
        .unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(path, vec![(0, 0), (1, 1), (2, 1)]);
    }

    #[test]
    fn dba_examples() {
        let same = vec![traj(array![[1.0], [2.0]]); 3];
        let r = dba_barycenter(&same, &DbaConfig::default()).unwrap();
        assert_eq!(r.barycenter, same[0]);
        assert_eq!(trajectory_variance(&same).unwrap(), 0.0);

        let pair = vec![traj(array![[0.0]]), traj(array![[2.0]])];
        let r = dba_barycenter(&pair, &DbaConfig::default()).unwrap();
        assert_eq!(r.barycenter.points(), array![[1.0]]);
        assert!(dba_barycenter(&[], &DbaConfig::default()).is_err());
    }

    #[test]
    fn dba_resamples_to_requested_length() {
        let set = vec![traj(array![[0.0], [2.0]]), traj(array![[0.0], [2.0]])];
        let cfg = DbaConfig {
            length: Some(3),
            ..DbaConfig::default()
        };
        assert_eq!(dba_barycenter(&set, &cfg).unwrap().barycenter.len(), 3);
    }

    #[test]
    fn one_step_tv_is_covariance_trace() {
        let ends = array![[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0], [0.5, 0.5]];
        let set: Vec<_> = ends
            .rows()
            .into_iter()
            .map(|e| traj(array![[0.0, 0.0], [e[0], e[1]]]))
            .collect();
        let mean = ends.mean_axis(ndarray::Axis(0)).unwrap();
        let trace: f64 = ends
            .rows()
            .into_iter()
            .map(|e| (&e - &mean).mapv(|v| v * v).sum())
            .sum::<f64>()
            / 4.0;
        assert!((trajectory_variance(&set).unwrap() - trace).abs() < 1e-12);
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new(Array2::zeros((0, 2))).is_err());
        assert!(Trajectory::new(array![[f64::NAN]]).is_err());
    }
}
