//! Small MLP substrate with hand-written reverse mode.
//!
//! Each hidden block is `affine -> batch-norm -> softplus`; the last affine
//! layer is followed by a fixed per-output affine map and the double-softplus
//! bounding stage. `forward` records a [`Tape`] and `backward` consumes it.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite activation")]
    NonFinite,
    #[error("inverted output bounds: lower {lower} > upper {upper}")]
    InvertedBounds { lower: f64, upper: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Training,
    Inference,
}

/// `ln(1 + eᵗ)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1+e^{x−l}) − ln(1+e^{x−u}) + l`, a smooth monotone map into `[l, u]`.
///
/// Infinite bounds degrade gracefully: only `l` finite gives `l + softplus(x − l)`,
/// only `u` finite gives `u − softplus(u − x)`, neither gives the identity.
pub fn double_softplus(x: f64, lower: f64, upper: f64) -> Result<f64, NnError> {
    if lower > upper {
        return Err(NnError::InvertedBounds { lower, upper });
    }
    Ok(bounded(x, lower, upper))
}

fn bounded(x: f64, l: f64, u: f64) -> f64 {
    // sp(t) = t + sp(−t) gives two equal forms; each is used on the side of
    // the midpoint where its large terms cancel exactly.
    let lp = |t: f64| (-t.abs()).exp().ln_1p();
    match (l.is_finite(), u.is_finite()) {
        (true, true) => {
            let v = if x < 0.5 * (l + u) {
                let (a, b) = (x - l, x - u);
                l + ((a.max(0.0) - b.max(0.0)) + (lp(a) - lp(b)))
            } else {
                let (a, b) = (l - x, u - x);
                u + ((a.max(0.0) - b.max(0.0)) + (lp(a) - lp(b)))
            };
            v.clamp(l, u)
        }
        (true, false) => l + softplus(x - l),
        (false, true) => u - softplus(u - x),
        (false, false) => x,
    }
}

/// Derivative of [`double_softplus`] with respect to `x`.
pub fn double_softplus_grad(x: f64, l: f64, u: f64) -> f64 {
    match (l.is_finite(), u.is_finite()) {
        (true, true) => sigmoid(x - l) - sigmoid(x - u),
        (true, false) => sigmoid(x - l),
        (false, true) => sigmoid(u - x),
        (false, false) => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// in x out
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

/// Fixed output stage: `y = double_softplus(offset + scale · raw, lower, upper)`.
/// `None` bounds are infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputBounds {
    pub offset: Array1<f64>,
    pub scale: Array1<f64>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

impl OutputBounds {
    pub fn unbounded(dim: usize) -> Self {
        OutputBounds {
            offset: Array1::zeros(dim),
            scale: Array1::ones(dim),
            lower: vec![None; dim],
            upper: vec![None; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    fn limits(&self, k: usize) -> (f64, f64) {
        (
            self.lower[k].unwrap_or(f64::NEG_INFINITY),
            self.upper[k].unwrap_or(f64::INFINITY),
        )
    }

    fn validate(&self) -> Result<(), NnError> {
        let d = self.dim();
        for (what, got) in [
            ("scale", self.scale.len()),
            ("lower", self.lower.len()),
            ("upper", self.upper.len()),
        ] {
            if got != d {
                return Err(NnError::Dimension {
                    what,
                    expected: d,
                    got,
                });
            }
        }
        for k in 0..d {
            let (l, u) = self.limits(k);
            if l > u {
                return Err(NnError::InvertedBounds { lower: l, upper: u });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MLPParams {
    pub layers: Vec<Dense>,
    pub bn: Vec<BatchNorm>,
    pub out_bounds: OutputBounds,
    pub mode: Mode,
}

impl MLPParams {
    /// He-initialised network. `output_gain` additionally scales the last
    /// layer's weights.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        out_bounds: OutputBounds,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<MLPParams, NnError> {
        out_bounds.validate()?;
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(out_bounds.dim());
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let std = (2.0 / w[0].max(1) as f64).sqrt();
                let gain = if k == last { output_gain } else { 1.0 };
                let normal = Normal::new(0.0, std * gain).expect("positive std");
                Dense {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || normal.sample(rng)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        let bn = hidden.iter().map(|&w| BatchNorm::new(w)).collect();
        Ok(MLPParams {
            layers,
            bn,
            out_bounds,
            mode: Mode::Training,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.out_bounds.dim()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Trainable parameters in a fixed order: every layer's weight and bias,
    /// then every batch-norm's γ and β.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().unwrap());
            out.push(l.bias.as_slice().unwrap());
        }
        for b in &self.bn {
            out.push(b.gamma.as_slice().unwrap());
            out.push(b.beta.as_slice().unwrap());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().unwrap());
            out.push(l.bias.as_slice_mut().unwrap());
        }
        for b in &mut self.bn {
            out.push(b.gamma.as_slice_mut().unwrap());
            out.push(b.beta.as_slice_mut().unwrap());
        }
        out
    }

    /// Run the network on a batch (one row per sample). Pure: batch-norm
    /// running statistics are only touched by [`MLPParams::commit_batch_stats`].
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Tape), NnError> {
        if input.ncols() != self.input_dim() {
            return Err(NnError::Dimension {
                what: "input",
                expected: self.input_dim(),
                got: input.ncols(),
            });
        }
        let mut h = input.to_owned();
        let mut hidden = Vec::with_capacity(self.bn.len());
        for (layer, bn) in self.layers.iter().zip(&self.bn) {
            let z = h.dot(&layer.weight) + &layer.bias;
            let (mean, var) = match self.mode {
                Mode::Training => {
                    let mean = z.mean_axis(Axis(0)).unwrap();
                    let var = z.var_axis(Axis(0), 0.0);
                    (mean, var)
                }
                Mode::Inference => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
            let normed = (&z - &mean) * &inv_std;
            let pre = &normed * &bn.gamma + &bn.beta;
            let next = pre.mapv(softplus);
            hidden.push(HiddenRecord {
                input: std::mem::replace(&mut h, next),
                normed,
                inv_std,
                pre,
                mean,
                var,
            });
        }
        let last = self.layers.last().unwrap();
        let raw = h.dot(&last.weight) + &last.bias;
        let ob = &self.out_bounds;
        let mut pre_out = raw;
        for mut row in pre_out.rows_mut() {
            Zip::from(&mut row)
                .and(&ob.offset)
                .and(&ob.scale)
                .for_each(|v, &o, &s| *v = o + s * *v);
        }
        let mut out = pre_out.clone();
        for mut row in out.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                let (l, u) = ob.limits(k);
                *v = bounded(*v, l, u);
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite);
        }
        let tape = Tape {
            mode: self.mode,
            hidden,
            last_input: h,
            pre_out,
        };
        Ok((out, tape))
    }

    /// Momentum update of the running statistics from a training-mode tape.
    pub fn commit_batch_stats(&mut self, tape: &Tape) {
        if tape.mode != Mode::Training {
            return;
        }
        let n = tape.batch_size() as f64;
        for (bn, rec) in self.bn.iter_mut().zip(&tape.hidden) {
            // unbiased batch variance, as in common frameworks
            let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = bn.momentum;
            bn.running_mean = &bn.running_mean * (1.0 - m) + &rec.mean * m;
            bn.running_var = &bn.running_var * (1.0 - m) + &rec.var * (m * correction);
        }
    }

    /// Reverse pass. Consumes the tape, so a tape cannot be replayed.
    pub fn backward(&self, tape: Tape, upstream: ArrayView2<f64>) -> Result<Grads, NnError> {
        let (b, d) = (tape.pre_out.nrows(), tape.pre_out.ncols());
        if upstream.dim() != (b, d) {
            return Err(NnError::Dimension {
                what: "upstream gradient",
                expected: b * d,
                got: upstream.len(),
            });
        }
        let ob = &self.out_bounds;
        let mut g = upstream.to_owned();
        for (mut row, pre_row) in g.rows_mut().into_iter().zip(tape.pre_out.rows()) {
            for k in 0..d {
                let (l, u) = ob.limits(k);
                row[k] *= double_softplus_grad(pre_row[k], l, u) * ob.scale[k];
            }
        }

        let n_layers = self.layers.len();
        let mut layer_grads = vec![None; n_layers];
        let mut bn_grads = vec![None; self.bn.len()];

        let last = &self.layers[n_layers - 1];
        layer_grads[n_layers - 1] = Some(Dense {
            weight: standard(tape.last_input.t().dot(&g)),
            bias: g.sum_axis(Axis(0)),
        });
        let mut gh = g.dot(&last.weight.t());

        for (k, rec) in tape.hidden.iter().enumerate().rev() {
            let bn = &self.bn[k];
            let ga = gh * &rec.pre.mapv(sigmoid);
            let dgamma = (&ga * &rec.normed).sum_axis(Axis(0));
            let dbeta = ga.sum_axis(Axis(0));
            let gx = ga * &bn.gamma;
            let gz = match tape.mode {
                Mode::Training => {
                    let n = b as f64;
                    let sum_gx = gx.sum_axis(Axis(0));
                    let sum_gx_x = (&gx * &rec.normed).sum_axis(Axis(0));
                    let centered = &gx * n - &sum_gx - &rec.normed * &sum_gx_x;
                    centered * &rec.inv_std / n
                }
                Mode::Inference => gx * &rec.inv_std,
            };
            layer_grads[k] = Some(Dense {
                weight: standard(rec.input.t().dot(&gz)),
                bias: gz.sum_axis(Axis(0)),
            });
            bn_grads[k] = Some(BatchNormGrad {
                gamma: dgamma,
                beta: dbeta,
            });
            gh = gz.dot(&self.layers[k].weight.t());
        }
        Ok(Grads {
            layers: layer_grads.into_iter().map(Option::unwrap).collect(),
            bn: bn_grads.into_iter().map(Option::unwrap).collect(),
        })
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

#[derive(Debug, Clone)]
struct HiddenRecord {
    input: Array2<f64>,
    normed: Array2<f64>,
    inv_std: Array1<f64>,
    pre: Array2<f64>,
    mean: Array1<f64>,
    var: Array1<f64>,
}

/// Everything the reverse pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct Tape {
    mode: Mode,
    hidden: Vec<HiddenRecord>,
    last_input: Array2<f64>,
    pre_out: Array2<f64>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.pre_out.nrows()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrad {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Parameter gradients, shaped like [`MLPParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Dense>,
    pub bn: Vec<BatchNormGrad>,
}

impl Grads {
    /// Same ordering as [`MLPParams::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().unwrap());
            out.push(l.bias.as_slice().unwrap());
        }
        for b in &self.bn {
            out.push(b.gamma.as_slice().unwrap());
            out.push(b.beta.as_slice().unwrap());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MLPParams, lr: f64) -> AdamState {
        let shapes: Vec<usize> = params.param_slices().iter().map(|s| s.len()).collect();
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut MLPParams, grads: &Grads, state: &mut AdamState) -> Result<(), NnError> {
    let gs = grads.slices();
    let mut ps = params.param_slices_mut();
    if gs.len() != ps.len() || state.m.len() != ps.len() {
        return Err(NnError::Dimension {
            what: "parameter groups",
            expected: ps.len(),
            got: gs.len(),
        });
    }
    for (k, (p, g)) in ps.iter().zip(&gs).enumerate() {
        if p.len() != g.len() || state.m[k].len() != p.len() {
            return Err(NnError::Dimension {
                what: "parameter group",
                expected: p.len(),
                got: g.len(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (k, (p, g)) in ps.iter_mut().zip(&gs).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
