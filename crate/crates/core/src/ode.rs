//! Integration of `dx/dt = v(t, x | c)` from `t = 0` to `t = 1`.
//!
//! Every call to the field processes the whole batch and counts as one
//! function evaluation (NFE).

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{assemble_inputs, constant_time, FlowModel};

/// A batched, condition-dependent vector field.
pub trait VectorField {
    fn eval(&self, t: f64, x: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl VectorField for FlowModel {
    fn eval(&self, t: f64, x: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<Array2<f64>> {
        let inputs = assemble_inputs(x, c, constant_time(x.nrows(), t).view())?;
        self.forward_batch(inputs.view())
    }
}

/// Adapts a closure `(t, x, c) -> v` into a [`VectorField`].
pub struct FnField<F>(pub F);

impl<F> VectorField for FnField<F>
where
    F: Fn(f64, ArrayView2<f64>, ArrayView2<f64>) -> Array2<f64>,
{
    fn eval(&self, t: f64, x: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok((self.0)(t, x, c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Euler,
    Midpoint,
    Dopri5,
}

impl SolverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::Midpoint => "midpoint",
            SolverKind::Dopri5 => "dopri5",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SolverKind::Euler),
            "midpoint" => Ok(SolverKind::Midpoint),
            "dopri5" => Ok(SolverKind::Dopri5),
            other => Err(Error::InvalidArgument(format!(
                "unknown solver `{other}` (expected euler, midpoint or dopri5)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub kind: SolverKind,
    /// Grid size for the fixed-step kinds; ignored by dopri5.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_nfe: usize,
    /// Keep `(t, x)` after every accepted step.
    pub record_path: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            kind: SolverKind::Euler,
            steps: 1,
            rtol: 1e-5,
            atol: 1e-5,
            max_nfe: 10_000,
            record_path: false,
        }
    }
}

impl SolverConfig {
    pub fn euler(steps: usize) -> Self {
        SolverConfig {
            kind: SolverKind::Euler,
            steps,
            ..Self::default()
        }
    }

    pub fn midpoint(steps: usize) -> Self {
        SolverConfig {
            kind: SolverKind::Midpoint,
            steps,
            ..Self::default()
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            kind: SolverKind::Dopri5,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn with_path(mut self) -> Self {
        self.record_path = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("solver steps must be >= 1".into()));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "solver tolerances must be > 0, got rtol={} atol={}",
                self.rtol, self.atol
            )));
        }
        if self.max_nfe == 0 {
            return Err(Error::InvalidArgument("max_nfe must be >= 1".into()));
        }
        Ok(())
    }

    /// Short label used in CSV output, e.g. `euler` or `dopri5`.
    pub fn label(&self) -> &'static str {
        self.kind.as_str()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub samples: Array2<f64>,
    pub nfe: usize,
    pub path: Option<Vec<(f64, Array2<f64>)>>,
    pub accepted: usize,
    pub rejected: usize,
}

struct Counter<'a, F: ?Sized> {
    field: &'a F,
    c: ArrayView2<'a, f64>,
    nfe: usize,
    max_nfe: usize,
}

impl<F: VectorField + ?Sized> Counter<'_, F> {
    fn call(&mut self, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.nfe >= self.max_nfe {
            return Err(Error::MaxNfeExceeded {
                max_nfe: self.max_nfe,
                t,
            });
        }
        self.nfe += 1;
        let v = self.field.eval(t, x, self.c)?;
        check_dim("field output rows", x.nrows(), v.nrows())?;
        check_dim("field output width", x.ncols(), v.ncols())?;
        Ok(v)
    }
}

fn ensure_finite(x: &Array2<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("ode state"))
    }
}

/// Integrates every row of `x0` from `t = 0` to `t = 1`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    x0: ArrayView2<f64>,
    c: ArrayView2<f64>,
    cfg: &SolverConfig,
) -> Result<SolverReport> {
    cfg.validate()?;
    check_dim("solver conditions", x0.nrows(), c.nrows())?;
    ensure_finite(&x0.to_owned())?;
    let mut counter = Counter {
        field,
        c,
        nfe: 0,
        max_nfe: cfg.max_nfe,
    };
    match cfg.kind {
        SolverKind::Euler | SolverKind::Midpoint => fixed_step(&mut counter, x0, cfg),
        SolverKind::Dopri5 => dopri5(&mut counter, x0, cfg),
    }
}

fn fixed_step<F: VectorField + ?Sized>(
    f: &mut Counter<'_, F>,
    x0: ArrayView2<f64>,
    cfg: &SolverConfig,
) -> Result<SolverReport> {
    let n = cfg.steps;
    let h = 1.0 / n as f64;
    let mut x = x0.to_owned();
    let mut path = cfg.record_path.then(|| vec![(0.0, x.clone())]);
    for k in 0..n {
        let t = k as f64 / n as f64;
        match cfg.kind {
            SolverKind::Euler => {
                let v = f.call(t, x.view())?;
                x.scaled_add(h, &v);
            }
            _ => {
                let k1 = f.call(t, x.view())?;
                let mut mid = x.clone();
                mid.scaled_add(0.5 * h, &k1);
                let k2 = f.call(t + 0.5 * h, mid.view())?;
                x.scaled_add(h, &k2);
            }
        }
        ensure_finite(&x)?;
        if let Some(p) = path.as_mut() {
            p.push(((k + 1) as f64 / n as f64, x.clone()));
        }
    }
    Ok(SolverReport {
        samples: x,
        nfe: f.nfe,
        path,
        accepted: n,
        rejected: 0,
    })
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// error weights: 5th-order minus embedded 4th-order solution
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFE: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;

fn combo(x: &Array2<f64>, h: f64, terms: &[(f64, &Array2<f64>)]) -> Array2<f64> {
    let mut out = x.clone();
    for &(a, k) in terms {
        out.scaled_add(h * a, k);
    }
    out
}

/// RMS of componentwise errors scaled by `atol + rtol * max(|y|, |y_new|)`.
fn error_norm(err: &Array2<f64>, y: &Array2<f64>, y_new: &Array2<f64>, cfg: &SolverConfig) -> f64 {
    let mut acc = 0.0;
    Zip::from(err).and(y).and(y_new).for_each(|&e, &a, &b| {
        let sc = cfg.atol + cfg.rtol * a.abs().max(b.abs());
        acc += (e / sc) * (e / sc);
    });
    (acc / err.len().max(1) as f64).sqrt()
}

fn dopri5<F: VectorField + ?Sized>(
    f: &mut Counter<'_, F>,
    x0: ArrayView2<f64>,
    cfg: &SolverConfig,
) -> Result<SolverReport> {
    let mut y = x0.to_owned();
    let mut path = cfg.record_path.then(|| vec![(0.0, y.clone())]);
    let mut t = 0.0_f64;
    let mut k1 = f.call(t, y.view())?;
    ensure_finite(&k1)?;

    let zeros = Array2::zeros(y.raw_dim());
    let d0 = error_norm(&y, &zeros, &y, cfg);
    let d1 = error_norm(&k1, &zeros, &y, cfg);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h = h.min(1.0);

    let expo = 0.2 - 0.75 * BETA;
    let mut fac_old: f64 = 1e-4;
    let mut last_rejected = false;
    let (mut accepted, mut rejected) = (0, 0);

    while t < 1.0 {
        let last = t + h >= 1.0 - 1e-12;
        if last {
            h = 1.0 - t;
        }
        let k2 = f.call(t + C2 * h, combo(&y, h, &[(A21, &k1)]).view())?;
        let k3 = f.call(t + C3 * h, combo(&y, h, &[(A31, &k1), (A32, &k2)]).view())?;
        let k4 = f.call(
            t + C4 * h,
            combo(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]).view(),
        )?;
        let k5 = f.call(
            t + C5 * h,
            combo(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]).view(),
        )?;
        let k6 = f.call(
            t + h,
            combo(
                &y,
                h,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            )
            .view(),
        )?;
        let y_new = combo(
            &y,
            h,
            &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
        );
        let t_new = if last { 1.0 } else { t + h };
        let k7 = f.call(t_new, y_new.view())?;
        let err = combo(
            &zeros,
            h,
            &[
                (E1, &k1),
                (E3, &k3),
                (E4, &k4),
                (E5, &k5),
                (E6, &k6),
                (E7, &k7),
            ],
        );
        let err_norm = error_norm(&err, &y, &y_new, cfg);
        if !err_norm.is_finite() {
            return Err(Error::NonFinite("ode state"));
        }

        let fac11 = err_norm.powf(expo);
        if err_norm <= 1.0 {
            let fac = (fac11 / fac_old.powf(BETA) / SAFE).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            fac_old = err_norm.max(1e-4);
            accepted += 1;
            last_rejected = false;
            t = t_new;
            y = y_new;
            k1 = k7;
            if let Some(p) = path.as_mut() {
                p.push((t, y.clone()));
            }
            h = h_new;
        } else {
            h /= (fac11 / SAFE).min(1.0 / FAC_MIN);
            rejected += 1;
            last_rejected = true;
        }
    }
    Ok(SolverReport {
        samples: y,
        nfe: f.nfe,
        path,
        accepted,
        rejected,
    })
}

/// Maximum distance of the path points from the chord `p_first -> p_last`,
/// divided by the chord length. A zero-length chord leaves the deviation
/// unnormalized.
pub fn path_straightness(points: ArrayView2<f64>) -> f64 {
    let m = points.nrows();
    if m < 2 {
        return 0.0;
    }
    let start = points.row(0);
    let chord = &points.row(m - 1) - &start;
    let len = chord.dot(&chord).sqrt();
    let mut worst: f64 = 0.0;
    for p in points.rows() {
        let v = &p - &start;
        let dev = if len > 0.0 {
            let perp = &v - &(&chord * (v.dot(&chord) / (len * len)));
            perp.dot(&perp).sqrt()
        } else {
            v.dot(&v).sqrt()
        };
        worst = worst.max(dev);
    }
    if len > 0.0 {
        worst / len
    } else {
        worst
    }
}

/// Mean [`path_straightness`] over the samples of a report with a recorded path.
pub fn straightness(report: &SolverReport) -> Result<f64> {
    let path = report
        .path
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("straightness needs a recorded path".into()))?;
    if path.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "straightness needs at least 3 path points, got {}",
            path.len()
        )));
    }
    let n = report.samples.nrows();
    if n == 0 {
        return Err(Error::Empty("solver samples"));
    }
    let d = report.samples.ncols();
    let mut total = 0.0;
    let mut points = Array2::zeros((path.len(), d));
    for i in 0..n {
        for (k, (_, x)) in path.iter().enumerate() {
            points.row_mut(k).assign(&x.row(i));
        }
        total += path_straightness(points.view());
    }
    Ok(total / n as f64)
}
