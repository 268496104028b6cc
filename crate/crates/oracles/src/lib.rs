//! Slow, obviously-correct reference computations for tests.
//!
//! Nothing here depends on `cotflow`; every routine is written from the
//! definition (exhaustive enumeration, finite differences, dense linear
//! algebra from `nalgebra`).

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeError {
    pub what: &'static str,
    pub size: usize,
    pub cap: usize,
}

impl fmt::Display for SizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} of size {} exceeds oracle cap {}",
            self.what, self.size, self.cap
        )
    }
}

impl std::error::Error for SizeError {}

pub const ASSIGNMENT_CAP: usize = 8;
pub const DTW_CAP: usize = 4;

/// Minimum-cost permutation over all `N!` candidates, visited in
/// lexicographic order so the first minimum found is the lexicographically
/// smallest. Costs are summed in row order.
pub fn brute_assignment(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64), SizeError> {
    let n = cost.len();
    if n > ASSIGNMENT_CAP {
        return Err(SizeError {
            what: "assignment",
            size: n,
            cap: ASSIGNMENT_CAP,
        });
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    search(cost, &mut perm, &mut used, &mut best);
    Ok(best.unwrap_or((Vec::new(), 0.0)))
}

fn search(
    cost: &[Vec<f64>],
    perm: &mut Vec<usize>,
    used: &mut [bool],
    best: &mut Option<(Vec<usize>, f64)>,
) {
    let n = cost.len();
    if perm.len() == n {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if best.as_ref().is_none_or(|(_, b)| total < *b) {
            *best = Some((perm.clone(), total));
        }
        return;
    }
    for j in 0..n {
        if !used[j] {
            used[j] = true;
            perm.push(j);
            search(cost, perm, used, best);
            perm.pop();
            used[j] = false;
        }
    }
}

/// DTW by enumerating every monotone alignment path (steps right, down,
/// diagonal) between two trajectories of at most four points each. Local
/// cost is the squared Euclidean distance; returns the square root of the
/// cheapest path total.
pub fn brute_dtw(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, SizeError> {
    for (what, t) in [("dtw input a", a), ("dtw input b", b)] {
        if t.len() > DTW_CAP {
            return Err(SizeError {
                what,
                size: t.len(),
                cap: DTW_CAP,
            });
        }
    }
    assert!(
        !a.is_empty() && !b.is_empty(),
        "trajectories must be non-empty"
    );
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    Ok(best.sqrt())
}

fn walk(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, acc: f64, best: &mut f64) {
    let here: f64 = a[i].iter().zip(&b[j]).map(|(p, q)| (p - q) * (p - q)).sum();
    let acc = acc + here;
    if i + 1 == a.len() && j + 1 == b.len() {
        *best = best.min(acc);
        return;
    }
    if i + 1 < a.len() {
        walk(a, b, i + 1, j, acc, best);
    }
    if j + 1 < b.len() {
        walk(a, b, i, j + 1, acc, best);
    }
    if i + 1 < a.len() && j + 1 < b.len() {
        walk(a, b, i + 1, j + 1, acc, best);
    }
}

/// Central differences `(f(θ + h e_k) - f(θ - h e_k)) / 2h` per coordinate.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            probe[k] = theta[k] + h;
            let up = f(&probe);
            probe[k] = theta[k] - h;
            let down = f(&probe);
            probe[k] = theta[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn covariance(points: &[Vec<f64>], denom: f64) -> DMatrix<f64> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    let data = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean = data.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
    centered.transpose() * &centered / denom
}

/// Trace of the covariance with `1/n` normalization.
pub fn covariance_trace(points: &[Vec<f64>]) -> f64 {
    covariance(points, points.len() as f64).trace()
}

/// Eigenvalues of the `1/(n-1)` sample covariance, largest first.
pub fn covariance_eigenvalues(points: &[Vec<f64>]) -> Vec<f64> {
    let cov = covariance(points, points.len() as f64 - 1.0);
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_examples() {
        assert_eq!(brute_assignment(&[vec![0.0]]).unwrap(), (vec![0], 0.0));
        assert_eq!(
            brute_assignment(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap(),
            (vec![0, 1], 2.0)
        );
        assert_eq!(
            brute_assignment(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap(),
            (vec![1, 0], 2.0)
        );
        // all ties: lexicographically smallest is the identity
        assert_eq!(
            brute_assignment(&vec![vec![1.0; 3]; 3]).unwrap().0,
            vec![0, 1, 2]
        );
        assert!(brute_assignment(&vec![vec![0.0; 9]; 9]).is_err());
    }

    #[test]
    fn dtw_examples() {
        assert_eq!(brute_dtw(&[vec![1.0]], &[vec![1.0]]).unwrap(), 0.0);
        // singleton against two points: the only path visits both
        let d = brute_dtw(&[vec![0.0]], &[vec![1.0], vec![2.0]]).unwrap();
        assert!((d * d - 5.0).abs() < 1e-12);
        assert!(brute_dtw(&vec![vec![0.0]; 5], &[vec![0.0]]).is_err());
    }

    #[test]
    fn fd_examples() {
        let g = fd_gradient(|t| t[0] * t[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-6);
        assert_eq!(fd_gradient(|_| 4.0, &[1.0, 2.0], 1e-4), vec![0.0, 0.0]);
        // f = θᵀAθ with symmetric A has gradient 2Aθ
        let a = [[2.0, 0.5], [0.5, 1.0]];
        let theta = [0.3, -0.7];
        let f = |t: &[f64]| {
            (0..2)
                .map(|i| (0..2).map(|j| t[i] * a[i][j] * t[j]).sum::<f64>())
                .sum::<f64>()
        };
        let g = fd_gradient(f, &theta, 1e-4);
        for i in 0..2 {
            let exact = 2.0 * (a[i][0] * theta[0] + a[i][1] * theta[1]);
            assert!((g[i] - exact).abs() < 1e-8);
        }
    }

    #[test]
    fn covariance_examples() {
        let pts = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert!((covariance_trace(&pts) - 1.0).abs() < 1e-15);
        let eig = covariance_eigenvalues(&pts);
        assert!((eig[0] - 2.0).abs() < 1e-12 && eig[1].abs() < 1e-12);
    }
}
