//! Feed-forward vector field `v(t, x | c)` with hand-written reverse mode and Adam.
//!
//! Parameters live in one flat `Vec<f64>`. Layer `l` occupies a row-major
//! `fan_in x fan_out` weight block followed by a `fan_out` bias block, so a
//! batch propagates as `A_{l+1} = selu(A_l W_l + b_l)`. The output layer is
//! affine with no activation.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

pub const DEFAULT_HIDDEN: [usize; 4] = [64, 64, 64, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Selu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA * z
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp_m1()
                }
            }
        }
    }

    /// Derivative expressed through the activation output `a = apply(z)`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Selu => {
                if a > 0.0 {
                    SELU_LAMBDA
                } else {
                    a + SELU_LAMBDA * SELU_ALPHA
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    /// Spec with the default four hidden layers of width 64.
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims: DEFAULT_HIDDEN.to_vec(),
            output_dim,
            activation: Activation::Selu,
            seed,
        }
    }

    pub fn with_hidden(mut self, hidden_dims: Vec<usize>) -> Self {
        self.hidden_dims = hidden_dims;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidArgument(
                "hidden_dims must contain at least one layer".into(),
            ));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "all layer widths must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.eps > 0.0
            && self.beta1 > 0.0
            && self.beta1 < self.beta2
            && self.beta2 < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "optimizer needs lr > 0, eps > 0 and 0 < beta1 < beta2 < 1, got {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    fn zeros(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// MLP parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    spec: MlpSpec,
    params: Vec<f64>,
    adam: AdamState,
}

impl FlowModel {
    /// Seeded initialization. Weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer (the usual default for
    /// affine layers in deep-learning frameworks).
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::with_capacity(spec.parameter_count());
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                params.push(rng.random_range(-bound..bound));
            }
        }
        let adam = AdamState::zeros(params.len());
        Ok(FlowModel { spec, params, adam })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.parameter_count();
        Ok(FlowModel {
            spec,
            params: vec![0.0; n],
            adam: AdamState::zeros(n),
        })
    }

    pub fn from_parts(spec: MlpSpec, params: Vec<f64>, adam: AdamState) -> Result<Self> {
        spec.validate()?;
        let n = spec.parameter_count();
        check_dim("model parameters", n, params.len())?;
        check_dim("adam first moment", n, adam.m.len())?;
        check_dim("adam second moment", n, adam.v.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(FlowModel { spec, params, adam })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    /// Offsets of each layer's weight block in the flat parameter vector.
    fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let slot = LayerSlot {
                    offset,
                    fan_in,
                    fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                slot
            })
            .collect()
    }

    fn weights<'a>(
        params: &'a [f64],
        slot: &LayerSlot,
    ) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let w_len = slot.fan_in * slot.fan_out;
        let w = ArrayView2::from_shape(
            (slot.fan_in, slot.fan_out),
            &params[slot.offset..slot.offset + w_len],
        )
        .expect("layout matches spec");
        let b = ArrayView1::from(&params[slot.offset + w_len..slot.offset + w_len + slot.fan_out]);
        (w, b)
    }

    /// Evaluates `v(t, x | c)` for one point. The network input is `[x, c, t]`.
    pub fn forward(&self, t: f64, x: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        check_dim("forward input", self.spec.input_dim, x.len() + c.len() + 1)?;
        check_dim("forward output", self.spec.output_dim, x.len())?;
        let mut input = Array2::zeros((1, self.spec.input_dim));
        for (dst, src) in input.iter_mut().zip(x.iter().chain(c).chain([&t])) {
            *dst = *src;
        }
        Ok(self
            .forward_batch(input.view())?
            .into_raw_vec_and_offset()
            .0)
    }

    /// Batched evaluation on pre-assembled input rows.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("network input width", self.spec.input_dim, inputs.ncols())?;
        let layout = self.layout();
        let (last, hidden) = layout.split_last().expect("at least one layer");
        let mut act = inputs.to_owned();
        for slot in hidden {
            act = self.affine(act.view(), slot);
            act.mapv_inplace(|z| self.spec.activation.apply(z));
        }
        Ok(self.affine(act.view(), last))
    }

    fn affine(&self, input: ArrayView2<f64>, slot: &LayerSlot) -> Array2<f64> {
        let (w, b) = Self::weights(&self.params, slot);
        let mut out = Array2::zeros((input.nrows(), slot.fan_out));
        out.rows_mut()
            .into_iter()
            .for_each(|mut row| row.assign(&b));
        general_mat_mul(1.0, &input, &w, 1.0, &mut out);
        out
    }

    /// Mean over the batch of `||v(input_i) - target_i||^2` and its gradient
    /// with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        inputs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        let batch = inputs.nrows();
        if batch == 0 {
            return Err(Error::Empty("training batch"));
        }
        check_dim("batch targets", batch, targets.nrows())?;
        check_dim("network input width", self.spec.input_dim, inputs.ncols())?;
        check_dim(
            "network output width",
            self.spec.output_dim,
            targets.ncols(),
        )?;
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch inputs"));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch targets"));
        }

        let layout = self.layout();
        let activation = self.spec.activation;
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layout.len());
        acts.push(inputs.to_owned());
        for slot in &layout[..layout.len() - 1] {
            let mut a = self.affine(acts.last().expect("input pushed").view(), slot);
            a.mapv_inplace(|z| activation.apply(z));
            acts.push(a);
        }
        let out = self.affine(
            acts.last().expect("input pushed").view(),
            &layout[layout.len() - 1],
        );

        let mut delta = out - targets;
        let loss = delta.iter().map(|r| r * r).sum::<f64>() / batch as f64;
        delta *= 2.0 / batch as f64;

        let mut grad = vec![0.0; self.params.len()];
        for (l, slot) in layout.iter().enumerate().rev() {
            let w_len = slot.fan_in * slot.fan_out;
            let a_prev = &acts[l];
            {
                let (gw, gb) =
                    grad[slot.offset..slot.offset + w_len + slot.fan_out].split_at_mut(w_len);
                let mut gw = ArrayViewMut2::from_shape((slot.fan_in, slot.fan_out), gw)
                    .expect("layout matches spec");
                general_mat_mul(1.0, &a_prev.t(), &delta, 0.0, &mut gw);
                for (g, s) in gb.iter_mut().zip(delta.sum_axis(Axis(0)).iter()) {
                    *g = *s;
                }
            }
            if l > 0 {
                let (w, _) = Self::weights(&self.params, slot);
                let mut back = Array2::zeros((batch, slot.fan_in));
                general_mat_mul(1.0, &delta, &w.t(), 0.0, &mut back);
                back.zip_mut_with(a_prev, |d, &a| *d *= activation.derivative_from_output(a));
                delta = back;
            }
        }
        Ok((loss, grad))
    }

    /// Bias-corrected Adam update; increments the step counter.
    pub fn adam_step(&mut self, grad: &[f64], cfg: &OptimizerConfig) -> Result<()> {
        check_dim("gradient", self.params.len(), grad.len())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let state = &mut self.adam;
        state.step += 1;
        let step = state.step as i32;
        let corr1 = 1.0 - cfg.beta1.powi(step);
        let corr2 = 1.0 - cfg.beta2.powi(step);
        let lr = match cfg.schedule {
            Schedule::Constant => cfg.learning_rate,
        };
        for (((p, m), v), &g) in self
            .params
            .iter_mut()
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
            .zip(grad)
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    offset: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Builds network input rows `[x_i, c_i, t_i]`.
pub fn assemble_inputs(
    x: ArrayView2<f64>,
    c: ArrayView2<f64>,
    t: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    check_dim("condition rows", x.nrows(), c.nrows())?;
    check_dim("time rows", x.nrows(), t.len())?;
    let (n, d, q) = (x.nrows(), x.ncols(), c.ncols());
    let mut out = Array2::zeros((n, d + q + 1));
    out.slice_mut(ndarray::s![.., ..d]).assign(&x);
    out.slice_mut(ndarray::s![.., d..d + q]).assign(&c);
    out.column_mut(d + q).assign(&t);
    Ok(out)
}

/// Time column filled with one value, for solver passes.
pub fn constant_time(n: usize, t: f64) -> Array1<f64> {
    Array1::from_elem(n, t)
}
