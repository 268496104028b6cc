//! Condition processing for pairing: a PCA encoder followed by a K-means
//! discretizer that snaps each encoded condition to its cluster centroid.
//!
//! Both are fitted once on the full dataset before training. The
//! discretized conditions only enter the coupling cost; the flow itself is
//! conditioned on the raw observations.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const DEFAULT_PCA_COMPONENTS: usize = 100;
pub const DEFAULT_CLUSTERS: usize = 64;
const KMEANS_MAX_ITER: usize = 100;
const KMEANS_SHIFT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaEncoder {
    pub mean: Vec<f64>,
    /// `k x d`, row-major, orthonormal rows.
    pub components: Vec<Vec<f64>>,
    /// Squared singular values of the centered data divided by `n - 1`.
    pub explained_variance: Vec<f64>,
}

impl PcaEncoder {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// `components * (o - mean)`.
    pub fn encode(&self, o: &[f64]) -> Result<Vec<f64>> {
        check_dim("pca input", self.mean.len(), o.len())?;
        Ok(self
            .components
            .iter()
            .map(|comp| {
                comp.iter()
                    .zip(o.iter().zip(&self.mean))
                    .map(|(w, (x, m))| w * (x - m))
                    .sum()
            })
            .collect())
    }

    /// `mean + components^T e`.
    pub fn decode(&self, e: &[f64]) -> Result<Vec<f64>> {
        check_dim("pca code", self.k(), e.len())?;
        let mut out = self.mean.clone();
        for (comp, &coef) in self.components.iter().zip(e) {
            for (o, w) in out.iter_mut().zip(comp) {
                *o += coef * w;
            }
        }
        Ok(out)
    }
}

/// Principal axes of `data` (rows are observations) from a one-sided Jacobi
/// SVD of the centered matrix. `k` is clipped to `min(n, d)`.
pub fn fit_pca(data: ArrayView2<f64>, k: usize) -> Result<PcaEncoder> {
    let (n, d) = data.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 2 observations, got {n}"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PCA data"));
    }
    let k_eff = k.min(n).min(d);
    if k_eff < k {
        log::warn!("PCA components clipped from {k} to {k_eff} (n={n}, d={d})");
    }
    let mean = data.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &data - &mean;
    let (sigma, vt) = jacobi_svd(centered);

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k_eff);
    let mut explained = Vec::with_capacity(k_eff);
    for &idx in order.iter().take(k_eff) {
        let mut comp = vt.row(idx).to_vec();
        let pivot = comp
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| {
                if v.abs() > best.1 {
                    (i, v.abs())
                } else {
                    best
                }
            })
            .0;
        if comp[pivot] < 0.0 {
            comp.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(comp);
        explained.push(sigma[idx] * sigma[idx] / (n - 1) as f64);
    }
    Ok(PcaEncoder {
        mean: mean.to_vec(),
        components,
        explained_variance: explained,
    })
}

/// One-sided Jacobi (Hestenes) SVD of an `n x d` matrix. Orthogonalizes the
/// columns of `a` by plane rotations accumulated into `V`; returns the `d`
/// singular values and `V^T` (right singular vectors as rows).
fn jacobi_svd(mut a: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = a.ncols();
    let mut v = Array2::<f64>::eye(d);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let (alpha, beta, gamma) = {
                    let cp = a.column(p);
                    let cq = a.column(q);
                    (cp.dot(&cp), cq.dot(&cq), cp.dot(&cq))
                };
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma = (0..d)
        .map(|j| a.column(j).dot(&a.column(j)).sqrt())
        .collect();
    (sigma, v.reversed_axes())
}

fn rotate_columns(m: &mut Array2<f64>, p: usize, q: usize, c: f64, s: f64) {
    for mut row in m.rows_mut() {
        let xp = row[p];
        let xq = row[q];
        row[p] = c * xp - s * xq;
        row[q] = s * xp + c * xq;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansDiscretizer {
    /// `K x k`, row-major.
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub seed: u64,
    /// Inertia after every Lloyd iteration, initial assignment first.
    #[serde(default)]
    pub inertia_trace: Vec<f64>,
}

impl KMeansDiscretizer {
    pub fn clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Index of the nearest centroid; ties go to the lower index.
    pub fn nearest(&self, e: &[f64]) -> Result<usize> {
        check_dim("discretizer input", self.dim(), e.len())?;
        Ok(nearest_index(&self.centroids, e).0)
    }

    /// Nearest centroid itself.
    pub fn discretize(&self, e: &[f64]) -> Result<Vec<f64>> {
        Ok(self.centroids[self.nearest(e)?].clone())
    }
}

fn nearest_index(centroids: &[Vec<f64>], e: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (idx, c) in centroids.iter().enumerate() {
        let d: f64 = c.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (idx, d);
        }
    }
    best
}

/// One assignment + update pass. Returns the new centroids and the inertia of
/// the assignment made against the old centroids. Empty clusters are moved to
/// the point farthest from its assigned centroid.
pub fn lloyd_iteration(points: ArrayView2<f64>, centroids: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let k = centroids.len();
    let dim = points.ncols();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    let mut inertia = 0.0;
    let mut dists = Vec::with_capacity(points.nrows());
    for row in points.rows() {
        let p = row
            .as_slice()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| row.to_vec());
        let (idx, d) = nearest_index(centroids, &p);
        inertia += d;
        counts[idx] += 1;
        for (s, v) in sums[idx].iter_mut().zip(&p) {
            *s += v;
        }
        dists.push(d);
    }
    let mut next: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    for idx in 0..k {
        if counts[idx] == 0 {
            let far = dists
                .iter()
                .enumerate()
                .fold(
                    (0, -1.0),
                    |best, (i, &d)| if d > best.1 { (i, d) } else { best },
                )
                .0;
            next[idx] = points.row(far).to_vec();
            dists[far] = 0.0;
        }
    }
    (next, inertia)
}

/// K-means++ seeding, then Lloyd iterations until the largest centroid shift
/// drops below 1e-6 or 100 iterations have run.
pub fn fit_kmeans(points: ArrayView2<f64>, k: usize, seed: u64) -> Result<KMeansDiscretizer> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "K-means needs at least K={k} points, got {n}"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("K-means points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut trace = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let (next, inertia) = lloyd_iteration(points, &centroids);
        trace.push(inertia);
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        centroids = next;
        if shift < KMEANS_SHIFT_TOL {
            break;
        }
    }
    let inertia = points
        .rows()
        .into_iter()
        .map(|r| nearest_index(&centroids, &r.to_vec()).1)
        .sum();
    trace.push(inertia);
    Ok(KMeansDiscretizer {
        centroids,
        inertia,
        seed,
        inertia_trace: trace,
    })
}

fn kmeans_plus_plus(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.nrows();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points.row(first).to_vec()];
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|r| sq(&r, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                // rounding walked past the last positive weight
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // every point coincides with a centroid; take an unused index
            let unused: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen[pick] = true;
        let c = points.row(pick).to_vec();
        for (i, r) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq(&r, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn sq(a: &ArrayView1<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fitted encoder + discretizer for a dataset's raw conditions.
///
/// The first `encoded_dims` raw channels go through PCA; the remaining
/// channels (proprioception-like, already low-dimensional) are appended
/// unchanged before clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionProcessor {
    pub encoder: Option<PcaEncoder>,
    pub encoded_dims: usize,
    pub discretizer: KMeansDiscretizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaSettings {
    /// Number of leading raw condition channels fed to PCA.
    pub encoded_dims: usize,
    pub components: usize,
}

impl ConditionProcessor {
    pub fn fit(
        conditions: ArrayView2<f64>,
        pca: Option<PcaSettings>,
        clusters: usize,
        seed: u64,
    ) -> Result<Self> {
        let (encoder, encoded_dims) = match pca {
            Some(settings) => {
                if settings.encoded_dims == 0 || settings.encoded_dims > conditions.ncols() {
                    return Err(Error::InvalidArgument(format!(
                        "PCA channel count {} outside 1..={}",
                        settings.encoded_dims,
                        conditions.ncols()
                    )));
                }
                let enc = fit_pca(
                    conditions.slice(s![.., ..settings.encoded_dims]),
                    settings.components,
                )?;
                (Some(enc), settings.encoded_dims)
            }
            None => (None, 0),
        };
        let mut proc = ConditionProcessor {
            encoder,
            encoded_dims,
            discretizer: KMeansDiscretizer {
                centroids: Vec::new(),
                inertia: 0.0,
                seed,
                inertia_trace: Vec::new(),
            },
        };
        let encoded = proc.encode_all(conditions)?;
        proc.discretizer = fit_kmeans(encoded.view(), clusters, seed)?;
        Ok(proc)
    }

    pub fn encode(&self, o: &[f64]) -> Result<Vec<f64>> {
        match &self.encoder {
            Some(enc) => {
                if o.len() < self.encoded_dims {
                    return Err(Error::Shape {
                        context: "raw condition",
                        expected: self.encoded_dims,
                        actual: o.len(),
                    });
                }
                let mut e = enc.encode(&o[..self.encoded_dims])?;
                e.extend_from_slice(&o[self.encoded_dims..]);
                Ok(e)
            }
            None => Ok(o.to_vec()),
        }
    }

    pub fn encode_all(&self, conditions: ArrayView2<f64>) -> Result<Array2<f64>> {
        let rows = conditions
            .rows()
            .into_iter()
            .map(|r| self.encode(&r.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        to_matrix(rows, "encoded conditions")
    }

    /// `Q(E(o))` for every row.
    pub fn discretize_all(&self, conditions: ArrayView2<f64>) -> Result<Array2<f64>> {
        let rows = conditions
            .rows()
            .into_iter()
            .map(|r| self.discretizer.discretize(&self.encode(&r.to_vec())?))
            .collect::<Result<Vec<_>>>()?;
        to_matrix(rows, "discretized conditions")
    }
}

fn to_matrix(rows: Vec<Vec<f64>>, what: &'static str) -> Result<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, d), flat).map_err(|e| Error::Format {
        what,
        message: e.to_string(),
    })
}

/// Mean of the rows.
pub fn column_mean(points: ArrayView2<f64>) -> Array1<f64> {
    points
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(points.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rank_one_line() {
        let data = array![[-2.0, -2.0], [0.0, 0.0], [1.0, 1.0], [3.0, 3.0]];
        let pca = fit_pca(data.view(), 1).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((pca.components[0][0] - r).abs() < 1e-12);
        assert!((pca.components[0][1] - r).abs() < 1e-12);
        // the second singular direction carries nothing
        let full = fit_pca(data.view(), 2).unwrap();
        assert!(full.explained_variance[1].abs() < 1e-20);
    }

    #[test]
    fn full_rank_reconstructs() {
        let data = array![
            [1.0, 2.0, 0.5],
            [0.3, -1.0, 2.0],
            [4.0, 0.1, -0.7],
            [-2.0, 1.5, 1.1],
            [0.0, 0.0, 3.0]
        ];
        let pca = fit_pca(data.view(), 3).unwrap();
        for row in data.rows() {
            let o = row.to_vec();
            let back = pca.decode(&pca.encode(&o).unwrap()).unwrap();
            for (a, b) in o.iter().zip(&back) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        for (i, a) in pca.components.iter().enumerate() {
            for (j, b) in pca.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8);
            }
            let pivot = a
                .iter()
                .cloned()
                .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn encode_examples() {
        let data = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]];
        let pca = fit_pca(data.view(), 2).unwrap();
        assert_eq!(pca.encode(&pca.mean.clone()).unwrap(), vec![0.0, 0.0]);
        // first component is the y axis (variance 8/3 > 2/3)
        let e = pca.encode(&[0.0, 1.0]).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12 && e[1].abs() < 1e-12);
        assert!(pca.encode(&[1.0]).is_err());
    }

    #[test]
    fn clipped_components() {
        let data = array![[1.0, 2.0, 3.0], [0.0, 1.0, 0.0]];
        assert_eq!(fit_pca(data.view(), 100).unwrap().k(), 2);
        assert!(fit_pca(array![[1.0, 2.0]].view(), 1).is_err());
    }

    #[test]
    fn kmeans_two_pairs() {
        let pts = array![[0.0], [1.0], [10.0], [11.0]];
        let km = fit_kmeans(pts.view(), 2, 3).unwrap();
        let mut c: Vec<f64> = km.centroids.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.5, 10.5]);
        assert_eq!(km.inertia, 1.0);
    }

    #[test]
    fn kmeans_extremes() {
        let pts = array![[0.0, 1.0], [2.0, -1.0], [5.0, 5.0]];
        let km = fit_kmeans(pts.view(), 3, 0).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut got = km.centroids.clone();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![5.0, 5.0]]);

        let km = fit_kmeans(pts.view(), 1, 0).unwrap();
        assert!((km.centroids[0][0] - 7.0 / 3.0).abs() < 1e-12);
        assert!((km.centroids[0][1] - 5.0 / 3.0).abs() < 1e-12);

        assert!(fit_kmeans(pts.view(), 4, 0).is_err());
    }

    #[test]
    fn kmeans_duplicates_do_not_stall() {
        let pts = array![[1.0], [1.0], [1.0], [1.0]];
        let km = fit_kmeans(pts.view(), 2, 1).unwrap();
        assert_eq!(km.clusters(), 2);
        assert_eq!(km.inertia, 0.0);
    }

    #[test]
    fn discretize_rules() {
        let km = KMeansDiscretizer {
            centroids: vec![vec![0.0], vec![2.0]],
            inertia: 0.0,
            seed: 0,
            inertia_trace: vec![],
        };
        assert_eq!(km.discretize(&[2.0]).unwrap(), vec![2.0]);
        assert_eq!(km.discretize(&[1.0]).unwrap(), vec![0.0]);
        assert_eq!(km.discretize(&[1.5]).unwrap(), vec![2.0]);
        assert!(km.discretize(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn processor_passes_trailing_channels() {
        let data = array![
            [1.0, 1.0, 9.0],
            [2.0, 2.0, 9.0],
            [3.0, 3.0, -9.0],
            [4.0, 4.0, -9.0]
        ];
        let proc = ConditionProcessor::fit(
            data.view(),
            Some(PcaSettings {
                encoded_dims: 2,
                components: 1,
            }),
            2,
            0,
        )
        .unwrap();
        let e = proc.encode(&[1.0, 1.0, 9.0]).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[1], 9.0);
        let disc = proc.discretize_all(data.view()).unwrap();
        assert_eq!(disc.dim(), (4, 2));
    }
}
