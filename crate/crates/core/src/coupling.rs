//! Noise-sample pairing for the three training strategies.
//!
//! The rng stream is consumed in a fixed order: noise rows first, then (for
//! `cot`) the permutation assigning conditions to noise rows. The assignment
//! solve draws nothing.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::ot::{solve_assignment, CostMatrix, CostSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    Independent,
    Ot,
    Cot,
}

impl Coupling {
    pub const ALL: [Coupling; 3] = [Coupling::Independent, Coupling::Ot, Coupling::Cot];

    pub fn as_str(self) -> &'static str {
        match self {
            Coupling::Independent => "independent",
            Coupling::Ot => "ot",
            Coupling::Cot => "cot",
        }
    }
}

impl fmt::Display for Coupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Coupling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Coupling::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown coupling `{s}` (expected independent, ot or cot)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseKind {
    StandardGaussian,
    /// Equal-weight isotropic Gaussians centred on a circle (2-D only).
    GaussianRing {
        modes: usize,
        radius: f64,
        sigma: f64,
    },
}

/// The source distribution `p0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub dim: usize,
    pub kind: NoiseKind,
}

impl NoiseSpec {
    pub fn standard(dim: usize) -> Self {
        NoiseSpec {
            dim,
            kind: NoiseKind::StandardGaussian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument(
                "noise dimension must be >= 1".into(),
            ));
        }
        if let NoiseKind::GaussianRing {
            modes,
            radius,
            sigma,
        } = self.kind
        {
            if self.dim != 2
                || modes == 0
                || radius.is_nan()
                || radius < 0.0
                || sigma.is_nan()
                || sigma < 0.0
            {
                return Err(Error::InvalidArgument(format!(
                    "gaussian ring needs dim 2, modes >= 1 and non-negative radius/sigma, got {self:?}"
                )));
            }
        }
        Ok(())
    }

    /// `n` i.i.d. rows.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        self.validate()?;
        let mut out = Array2::zeros((n, self.dim));
        match self.kind {
            NoiseKind::StandardGaussian => {
                for v in out.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            NoiseKind::GaussianRing {
                modes,
                radius,
                sigma,
            } => {
                for mut row in out.rows_mut() {
                    let k = rng.random_range(0..modes);
                    let angle = 2.0 * PI * k as f64 / modes as f64;
                    let zx: f64 = rng.sample(StandardNormal);
                    let zy: f64 = rng.sample(StandardNormal);
                    row[0] = radius * angle.cos() + sigma * zx;
                    row[1] = radius * angle.sin() + sigma * zy;
                }
            }
        }
        Ok(out)
    }
}

/// One training minibatch. Row `i` pairs `x0[i]` with `x1[i]`; `x1` and
/// `c_raw` keep the order they were given in.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub c_raw: Array2<f64>,
    /// Discretized data-side conditions; zero columns unless `cot`.
    pub c_disc: Array2<f64>,
    /// Discretized conditions attached to each noise row, reordered with
    /// `x0`; zero columns unless `cot`.
    pub c_noise: Array2<f64>,
    pub strategy: Coupling,
    /// `assignment[i]` is the data row given to the i-th noise draw, or
    /// `None` for independent pairing.
    pub assignment: Option<Vec<usize>>,
    /// `condition_perm[i]` is the data row whose discretized condition the
    /// i-th noise draw received (`cot` only).
    pub condition_perm: Option<Vec<usize>>,
    /// Resolved condition weight (`cot` only).
    pub gamma: Option<f64>,
}

fn check_batch(x1: ArrayView2<f64>, c: ArrayView2<f64>, noise: &NoiseSpec) -> Result<()> {
    if x1.nrows() == 0 {
        return Err(Error::Empty("pairing batch"));
    }
    check_dim("batch conditions", x1.nrows(), c.nrows())?;
    check_dim("noise dimension", x1.ncols(), noise.dim)
}

fn empty_cols(n: usize) -> Array2<f64> {
    Array2::zeros((n, 0))
}

/// Reorders noise rows so that output row `j` holds the draw assigned to data row `j`.
fn align_to_data(rows: &Array2<f64>, assignment: &[usize]) -> Array2<f64> {
    let mut inverse = vec![0; assignment.len()];
    for (i, &j) in assignment.iter().enumerate() {
        inverse[j] = i;
    }
    rows.select(Axis(0), &inverse)
}

/// Independent coupling: fresh noise, paired by index.
pub fn pair_independent<R: Rng + ?Sized>(
    x1: ArrayView2<f64>,
    c: ArrayView2<f64>,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<PairedBatch> {
    check_batch(x1, c, noise)?;
    let n = x1.nrows();
    Ok(PairedBatch {
        x0: noise.sample(n, rng)?,
        x1: x1.to_owned(),
        c_raw: c.to_owned(),
        c_disc: empty_cols(n),
        c_noise: empty_cols(n),
        strategy: Coupling::Independent,
        assignment: None,
        condition_perm: None,
        gamma: None,
    })
}

/// Minibatch OT on squared Euclidean sample distances.
pub fn pair_ot<R: Rng + ?Sized>(
    x1: ArrayView2<f64>,
    c: ArrayView2<f64>,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<PairedBatch> {
    check_batch(x1, c, noise)?;
    let x0 = noise.sample(x1.nrows(), rng)?;
    pair_ot_from_noise(x0, x1, c)
}

/// [`pair_ot`] with the noise rows supplied by the caller.
pub fn pair_ot_from_noise(
    x0: Array2<f64>,
    x1: ArrayView2<f64>,
    c: ArrayView2<f64>,
) -> Result<PairedBatch> {
    check_dim("batch conditions", x1.nrows(), c.nrows())?;
    let n = x1.nrows();
    let plan = solve_assignment(&CostMatrix::unconditional(x0.view(), x1)?)?;
    Ok(PairedBatch {
        x0: align_to_data(&x0, &plan.assignment),
        x1: x1.to_owned(),
        c_raw: c.to_owned(),
        c_disc: empty_cols(n),
        c_noise: empty_cols(n),
        strategy: Coupling::Ot,
        assignment: Some(plan.assignment),
        condition_perm: None,
        gamma: None,
    })
}

/// Conditional OT: noise rows receive a uniformly permuted copy of the
/// discretized conditions, and pairing minimizes
/// `||x0 - x1||^2 + gamma^2 ||c0 - c1||^2`.
pub fn pair_cot<R: Rng + ?Sized>(
    x1: ArrayView2<f64>,
    c_raw: ArrayView2<f64>,
    c_disc: ArrayView2<f64>,
    noise: &NoiseSpec,
    cost_spec: &CostSpec,
    rng: &mut R,
) -> Result<PairedBatch> {
    check_batch(x1, c_raw, noise)?;
    let n = x1.nrows();
    let x0 = noise.sample(n, rng)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    pair_cot_from_parts(x0, perm, x1, c_raw, c_disc, cost_spec)
}

/// [`pair_cot`] with the noise rows and the condition permutation supplied
/// by the caller.
pub fn pair_cot_from_parts(
    x0: Array2<f64>,
    perm: Vec<usize>,
    x1: ArrayView2<f64>,
    c_raw: ArrayView2<f64>,
    c_disc: ArrayView2<f64>,
    cost_spec: &CostSpec,
) -> Result<PairedBatch> {
    let n = x1.nrows();
    check_dim("batch conditions", n, c_raw.nrows())?;
    check_dim("discretized conditions", n, c_disc.nrows())?;
    check_dim("condition permutation", n, perm.len())?;
    cost_spec.validate()?;
    let c0 = c_disc.select(Axis(0), &perm);
    let gamma = cost_spec.resolve(x0.view(), c0.view(), x1, c_disc)?;
    let plan = solve_assignment(&CostMatrix::conditional(
        x0.view(),
        c0.view(),
        x1,
        c_disc,
        gamma,
    )?)?;
    Ok(PairedBatch {
        x0: align_to_data(&x0, &plan.assignment),
        x1: x1.to_owned(),
        c_raw: c_raw.to_owned(),
        c_disc: c_disc.to_owned(),
        c_noise: align_to_data(&c0, &plan.assignment),
        strategy: Coupling::Cot,
        assignment: Some(plan.assignment),
        condition_perm: Some(perm),
        gamma: Some(gamma),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn independent_single_row() {
        let x1 = array![[1.0, 2.0]];
        let c = array![[0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = pair_independent(x1.view(), c.view(), &NoiseSpec::standard(2), &mut rng).unwrap();
        assert_eq!(b.x0.dim(), (1, 2));
        assert_eq!(b.x1, x1);
    }

    #[test]
    fn standard_noise_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = NoiseSpec::standard(2).sample(100_000, &mut rng).unwrap();
        for col in z.columns() {
            let mean = col.mean().unwrap();
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 0.02, "{mean}");
            assert!((var - 1.0).abs() < 0.02, "{var}");
        }
    }

    #[test]
    fn ring_noise_sits_near_circle() {
        let spec = NoiseSpec {
            dim: 2,
            kind: NoiseKind::GaussianRing {
                modes: 8,
                radius: 8.0,
                sigma: 0.0,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in spec.sample(100, &mut rng).unwrap().rows() {
            assert!(((r[0] * r[0] + r[1] * r[1]).sqrt() - 8.0).abs() < 1e-12);
        }
        let bad = NoiseSpec { dim: 3, ..spec };
        assert!(bad.sample(1, &mut rng).is_err());
    }

    #[test]
    fn ot_uncrosses_pairs() {
        let x1 = array![[-10.0, 0.0], [10.0, 0.0]];
        let x0 = array![[9.0, 0.0], [-9.0, 0.0]];
        let c = array![[0.0], [0.0]];
        let b = pair_ot_from_noise(x0, x1.view(), c.view()).unwrap();
        assert_eq!(b.assignment, Some(vec![1, 0]));
        assert_eq!(b.x0, array![[-9.0, 0.0], [9.0, 0.0]]);
    }

    #[test]
    fn cot_conditions_are_permutation() {
        let x1 = array![[0.0], [1.0], [2.0], [3.0]];
        let cd = array![[0.0], [0.0], [1.0], [1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = pair_cot(
            x1.view(),
            cd.view(),
            cd.view(),
            &NoiseSpec::standard(1),
            &CostSpec::default(),
            &mut rng,
        )
        .unwrap();
        let mut got: Vec<f64> = b.c_noise.iter().copied().collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(b.x1, x1);
    }

    #[test]
    fn coupling_names() {
        for c in Coupling::ALL {
            assert_eq!(c.as_str().parse::<Coupling>().unwrap(), c);
        }
        assert!("emd".parse::<Coupling>().is_err());
    }
}
