//! Exact minibatch optimal transport between equal-size uniform batches.
//!
//! With uniform weights and equal batch sizes the earth mover's problem has a
//! permutation as an optimal vertex, so it is solved as a linear assignment
//! problem (Jonker-Volgenant shortest augmenting paths). Among all optimal
//! permutations the lexicographically smallest is returned.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// How the condition weight `gamma` of the conditional cost is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum GammaMode {
    Fixed {
        gamma: f64,
    },
    /// Per-batch ratio of sample to condition distances, times `multiplier`.
    Auto {
        multiplier: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub gamma_mode: GammaMode,
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec {
            gamma_mode: GammaMode::Auto { multiplier: 10.0 },
        }
    }
}

impl CostSpec {
    pub fn fixed(gamma: f64) -> Self {
        CostSpec {
            gamma_mode: GammaMode::Fixed { gamma },
        }
    }

    pub fn auto(multiplier: f64) -> Self {
        CostSpec {
            gamma_mode: GammaMode::Auto { multiplier },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.gamma_mode {
            GammaMode::Fixed { gamma } if gamma >= 0.0 && gamma.is_finite() => Ok(()),
            GammaMode::Auto { multiplier } if multiplier > 0.0 && multiplier.is_finite() => Ok(()),
            other => Err(Error::InvalidArgument(format!(
                "gamma must be >= 0 and the auto multiplier > 0, got {other:?}"
            ))),
        }
    }

    /// Resolves gamma for an index-aligned pair of batches.
    pub fn resolve(
        &self,
        x0: ArrayView2<f64>,
        c0: ArrayView2<f64>,
        x1: ArrayView2<f64>,
        c1: ArrayView2<f64>,
    ) -> Result<f64> {
        self.validate()?;
        match self.gamma_mode {
            GammaMode::Fixed { gamma } => Ok(gamma),
            GammaMode::Auto { multiplier } => auto_gamma(x0, c0, x1, c1, multiplier),
        }
    }
}

/// Squared Euclidean distance.
pub fn cost_unconditional(x0: &[f64], x1: &[f64]) -> Result<f64> {
    check_dim("cost operands", x0.len(), x1.len())?;
    Ok(sq_dist(x0, x1))
}

/// `||x0 - x1||^2 + gamma^2 ||c0 - c1||^2`.
pub fn cost_conditional(x0: &[f64], c0: &[f64], x1: &[f64], c1: &[f64], gamma: f64) -> Result<f64> {
    check_dim("cost operands", x0.len(), x1.len())?;
    check_dim("cost conditions", c0.len(), c1.len())?;
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gamma must be >= 0, got {gamma}"
        )));
    }
    Ok(sq_dist(x0, x1) + gamma * gamma * sq_dist(c0, c1))
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// `multiplier * sum_i ||x0_i - x1_i||^2 / sum_i ||c0_i - c1_i||^2` over
/// index-aligned rows. When the aligned conditions all coincide the ratio is
/// taken over all `(i, j)` pairs instead; it is zero only when every
/// condition in both batches is the same, where gamma has no effect.
pub fn auto_gamma(
    x0: ArrayView2<f64>,
    c0: ArrayView2<f64>,
    x1: ArrayView2<f64>,
    c1: ArrayView2<f64>,
    multiplier: f64,
) -> Result<f64> {
    let n = x0.nrows();
    if n == 0 {
        return Err(Error::Empty("auto gamma batch"));
    }
    check_dim("auto gamma batch", n, x1.nrows())?;
    check_dim("auto gamma conditions", n, c0.nrows())?;
    check_dim("auto gamma conditions", n, c1.nrows())?;
    check_dim("auto gamma sample width", x0.ncols(), x1.ncols())?;
    check_dim("auto gamma condition width", c0.ncols(), c1.ncols())?;
    let mut sample = 0.0;
    let mut cond = 0.0;
    for i in 0..n {
        sample += row_sq_dist(x0, i, x1, i);
        cond += row_sq_dist(c0, i, c1, i);
    }
    if cond == 0.0 {
        let mut cond_all = 0.0;
        let mut sample_all = 0.0;
        for i in 0..n {
            for j in 0..n {
                cond_all += row_sq_dist(c0, i, c1, j);
                sample_all += row_sq_dist(x0, i, x1, j);
            }
        }
        if cond_all == 0.0 {
            return Ok(0.0);
        }
        return Ok(multiplier * sample_all / cond_all);
    }
    Ok(multiplier * sample / cond)
}

/// `sqrt` of [`auto_gamma`] with multiplier 1. Weighting conditions by
/// `gamma * condition_scale(..)` makes `gamma = 1` balance the average
/// sample and condition terms of the batch, so gamma values are comparable
/// across data scales.
pub fn condition_scale(
    x0: ArrayView2<f64>,
    c0: ArrayView2<f64>,
    x1: ArrayView2<f64>,
    c1: ArrayView2<f64>,
) -> Result<f64> {
    Ok(auto_gamma(x0, c0, x1, c1, 1.0)?.sqrt())
}

#[inline]
fn row_sq_dist(a: ArrayView2<f64>, i: usize, b: ArrayView2<f64>, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j).iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum()
}

/// Dense square matrix of finite non-negative transport costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        check_dim("cost matrix entries", n * n, entries.len())?;
        if entries.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        if entries.iter().any(|&c| c < 0.0) {
            return Err(Error::InvalidArgument(
                "cost matrix has negative entries".into(),
            ));
        }
        Ok(CostMatrix { n, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        for row in rows {
            check_dim("cost matrix row", n, row.len())?;
        }
        CostMatrix::new(n, rows.concat())
    }

    /// Squared Euclidean costs between rows of `x0` and rows of `x1`.
    pub fn unconditional(x0: ArrayView2<f64>, x1: ArrayView2<f64>) -> Result<Self> {
        let n = x0.nrows();
        check_dim("cost batch sizes", n, x1.nrows())?;
        check_dim("cost sample width", x0.ncols(), x1.ncols())?;
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                entries.push(row_sq_dist(x0, i, x1, j));
            }
        }
        CostMatrix::new(n, entries)
    }

    /// Condition-augmented costs. With `gamma == 0` the entries are bitwise
    /// equal to [`CostMatrix::unconditional`].
    pub fn conditional(
        x0: ArrayView2<f64>,
        c0: ArrayView2<f64>,
        x1: ArrayView2<f64>,
        c1: ArrayView2<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let n = x0.nrows();
        check_dim("cost batch sizes", n, x1.nrows())?;
        check_dim("cost condition rows", n, c0.nrows())?;
        check_dim("cost condition rows", n, c1.nrows())?;
        check_dim("cost sample width", x0.ncols(), x1.ncols())?;
        check_dim("cost condition width", c0.ncols(), c1.ncols())?;
        if gamma.is_nan() || gamma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gamma must be >= 0, got {gamma}"
            )));
        }
        let g2 = gamma * gamma;
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                entries.push(row_sq_dist(x0, i, x1, j) + g2 * row_sq_dist(c0, i, c1, j));
            }
        }
        CostMatrix::new(n, entries)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Cost of pairing row `i` with column `assignment[i]`, summed in row order.
    pub fn cost_of(&self, assignment: &[usize]) -> f64 {
        assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| self.get(i, j))
            .sum()
    }
}

/// Permutation coupling: row `i` of the source batch is transported to row
/// `assignment[i]` of the target batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

impl CouplingPlan {
    /// `inverse()[j]` is the source row paired with target row `j`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.assignment.len()];
        for (i, &j) in self.assignment.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.assignment.len()];
        self.assignment
            .iter()
            .all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
    }
}

/// Minimum-cost permutation of `cost`, lexicographically smallest among ties.
pub fn solve_assignment(cost: &CostMatrix) -> Result<CouplingPlan> {
    let n = cost.n();
    if n == 0 {
        return Ok(CouplingPlan {
            assignment: Vec::new(),
            total_cost: 0.0,
        });
    }
    let mut lap = Lapjv::new(cost);
    lap.solve();
    let mut assignment: Vec<usize> = lap.x.iter().map(|&j| j as usize).collect();
    lex_smallest_optimum(cost, &lap.v, &mut assignment);
    let total_cost = cost.cost_of(&assignment);
    Ok(CouplingPlan {
        assignment,
        total_cost,
    })
}

/// Jonker-Volgenant: column reduction, then Dijkstra-style augmentation for
/// each remaining free row.
struct Lapjv<'a> {
    cost: &'a CostMatrix,
    n: usize,
    /// row -> column
    x: Vec<isize>,
    /// column -> row
    y: Vec<isize>,
    /// column duals
    v: Vec<f64>,
}

impl<'a> Lapjv<'a> {
    fn new(cost: &'a CostMatrix) -> Self {
        let n = cost.n();
        Lapjv {
            cost,
            n,
            x: vec![-1; n],
            y: vec![-1; n],
            v: vec![0.0; n],
        }
    }

    fn solve(&mut self) {
        let free = self.column_reduction();
        let mut pred = vec![0usize; self.n];
        for start in free {
            self.augment(start, &mut pred);
        }
    }

    fn column_reduction(&mut self) -> Vec<usize> {
        let n = self.n;
        let c = self.cost;
        let mut argmin = vec![0usize; n];
        self.v.iter_mut().for_each(|v| *v = f64::INFINITY);
        for i in 0..n {
            for (j, &cij) in c.row(i).iter().enumerate() {
                if cij < self.v[j] {
                    self.v[j] = cij;
                    argmin[j] = i;
                }
            }
        }
        let mut unique = vec![true; n];
        for j in (0..n).rev() {
            let i = argmin[j];
            if self.x[i] < 0 {
                self.x[i] = j as isize;
                self.y[j] = i as isize;
            } else {
                unique[i] = false;
                self.y[j] = -1;
            }
        }
        let mut free = Vec::new();
        for (i, &is_unique) in unique.iter().enumerate() {
            if self.x[i] < 0 {
                free.push(i);
            } else if is_unique {
                // reduction transfer
                let j = self.x[i] as usize;
                let mut min = f64::INFINITY;
                for (j2, &cij) in c.row(i).iter().enumerate() {
                    if j2 != j {
                        min = min.min(cij - self.v[j2]);
                    }
                }
                if min.is_finite() {
                    self.v[j] -= min;
                }
            }
        }
        free
    }

    /// Shortest augmenting path from free row `start`, updating duals of the
    /// scanned columns.
    fn augment(&mut self, start: usize, pred: &mut [usize]) {
        let n = self.n;
        let c = self.cost;
        let mut cols: Vec<usize> = (0..n).collect();
        let mut d: Vec<f64> = (0..n).map(|j| c.get(start, j) - self.v[j]).collect();
        pred.iter_mut().for_each(|p| *p = start);
        let mut lo = 0usize;
        let mut hi = 0usize;
        let mut n_ready = 0usize;
        let final_j;
        'search: loop {
            if lo == hi {
                n_ready = lo;
                // collect the columns at minimal distance into cols[lo..hi]
                hi = lo + 1;
                let mut mind = d[cols[lo]];
                let rest = hi;
                for k in rest..n {
                    let j = cols[k];
                    if d[j] <= mind {
                        if d[j] < mind {
                            hi = lo;
                            mind = d[j];
                        }
                        cols[k] = cols[hi];
                        cols[hi] = j;
                        hi += 1;
                    }
                }
                for &j in &cols[lo..hi] {
                    if self.y[j] < 0 {
                        final_j = j;
                        break 'search;
                    }
                }
            }
            // scan
            while lo != hi {
                let j = cols[lo];
                lo += 1;
                let i = self.y[j] as usize;
                let mind = d[j];
                let row = c.row(i);
                let h = row[j] - self.v[j] - mind;
                let mut k = hi;
                while k < n {
                    let j = cols[k];
                    let cred = row[j] - self.v[j] - h;
                    if cred < d[j] {
                        d[j] = cred;
                        pred[j] = i;
                        if cred == mind {
                            if self.y[j] < 0 {
                                final_j = j;
                                break 'search;
                            }
                            cols[k] = cols[hi];
                            cols[hi] = j;
                            hi += 1;
                        }
                    }
                    k += 1;
                }
            }
        }
        // cols[n_ready..hi] all sit at the final distance level
        let mind = d[cols[n_ready]];
        for &j in &cols[..n_ready] {
            self.v[j] += d[j] - mind;
        }
        let mut j = final_j;
        loop {
            let i = pred[j];
            self.y[j] = i as isize;
            let prev = self.x[i];
            self.x[i] = j as isize;
            if i == start {
                break;
            }
            j = prev as usize;
        }
    }
}

/// Rewrites an optimal `assignment` into the lexicographically smallest
/// optimal one. Optimal permutations are exactly the perfect matchings on the
/// zero-reduced-cost edges of any optimal dual, so rows are fixed in order,
/// each taking the smallest column reachable by an alternating cycle.
fn lex_smallest_optimum(cost: &CostMatrix, v: &[f64], assignment: &mut [usize]) {
    let n = cost.n();
    let scale = cost.entries().iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 4.0 * (n as f64) * f64::EPSILON * scale;

    let u: Vec<f64> = (0..n)
        .map(|i| {
            cost.row(i)
                .iter()
                .zip(v)
                .map(|(c, vj)| c - vj)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let tight = |i: usize, j: usize| cost.get(i, j) - v[j] - u[i] <= tol;
    if (0..n).any(|i| !tight(i, assignment[i])) {
        // duals are not complementary to the assignment; keep it as is
        return;
    }
    let equality: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| tight(i, j)).collect())
        .collect();
    if equality.iter().all(|cols| cols.len() == 1) {
        return;
    }

    let mut owner = vec![0usize; n];
    for (i, &j) in assignment.iter().enumerate() {
        owner[j] = i;
    }
    let mut col_fixed = vec![false; n];
    let mut parent_row = vec![usize::MAX; n];
    let mut parent_col = vec![usize::MAX; n];
    for i in 0..n {
        let current = assignment[i];
        for &j in &equality[i] {
            if j >= current {
                break;
            }
            if col_fixed[j] {
                continue;
            }
            // BFS over alternating paths from owner[j] back to column `current`
            let start = owner[j];
            parent_row.iter_mut().for_each(|p| *p = usize::MAX);
            parent_col.iter_mut().for_each(|p| *p = usize::MAX);
            parent_row[start] = start;
            let mut queue = std::collections::VecDeque::from([start]);
            let mut found = false;
            while let Some(r) = queue.pop_front() {
                for &jc in &equality[r] {
                    if col_fixed[jc] || jc == j || jc == assignment[r] {
                        continue;
                    }
                    if jc == current {
                        parent_col[jc] = r;
                        found = true;
                        break;
                    }
                    let next = owner[jc];
                    if next == i || parent_row[next] != usize::MAX {
                        continue;
                    }
                    parent_col[jc] = r;
                    parent_row[next] = r;
                    queue.push_back(next);
                }
                if found {
                    break;
                }
            }
            if !found {
                continue;
            }
            // rotate: walk back from `current`, each row takes the column that led out of it
            let mut col = current;
            loop {
                let r = parent_col[col];
                let old = assignment[r];
                assignment[r] = col;
                owner[col] = r;
                if r == start {
                    break;
                }
                col = old;
            }
            assignment[i] = j;
            owner[j] = i;
            break;
        }
        col_fixed[assignment[i]] = true;
    }
}
