//! Feasibility layers: network outputs in, feasible primal and dual points out.
//!
//! The primal net predicts a dispatch inside the generator box, which the
//! proportional-response layer moves onto the power-balance hyperplane.
//! The dual net predicts `(λ, π)`; the remaining multipliers are completed
//! either smoothly (S3L, used for training) or optimally (DLL, inference).

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ed_model::{DualPoint, EDInstance, ModelError, PrimalPoint};
use crate::grid::Network;
use crate::nn::{MLPParams, Mode, NnError, OutputBounds};

pub const DEFAULT_SMOOTHING: f64 = 1e-2;
/// Below this a repair denominator is treated as zero.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;
/// Scale applied to the last layer at initialisation, so that untrained
/// outputs start near the centre of the output map.
pub const OUTPUT_GAIN: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ProxyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("zero range for {what} {index}")]
    ZeroRange { what: &'static str, index: usize },
    #[error("smoothing constant must be positive, got {0}")]
    Smoothing(f64),
    #[error("flow price {index} is {value}, outside [-M, M] with M = {bound}")]
    PriceOutOfRange { index: usize, value: f64, bound: f64 },
    #[error("total demand {demand} outside [{min}, {max}]")]
    InfeasibleDemand { demand: f64, min: f64, max: f64 },
    #[error("batch is empty")]
    EmptyBatch,
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ProxyError> {
    if expected == got {
        Ok(())
    } else {
        Err(ProxyError::Dimension {
            what,
            expected,
            got,
        })
    }
}

/// Input encoding shared by both nets: demand divided by total generating
/// capacity, then standardised with statistics of a training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub capacity: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputScaler {
    pub fn identity(network: &Network) -> InputScaler {
        let d = network.n_loads();
        InputScaler {
            capacity: network.total_capacity().max(1.0),
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn fit(network: &Network, demands: &[Vec<f64>]) -> InputScaler {
        let mut scaler = InputScaler::identity(network);
        if demands.is_empty() {
            return scaler;
        }
        let n = demands.len() as f64;
        for k in 0..scaler.mean.len() {
            let vals = demands.iter().map(|pd| pd[k] / scaler.capacity);
            let mean = vals.clone().sum::<f64>() / n;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            scaler.mean[k] = mean;
            // constant loads would otherwise blow up
            scaler.std[k] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        scaler
    }

    pub fn features(&self, batch: &[EDInstance]) -> Result<Array2<f64>, ProxyError> {
        let d = self.mean.len();
        let mut x = Array2::zeros((batch.len(), d));
        for (i, inst) in batch.iter().enumerate() {
            check_len("demand", d, inst.pd.len())?;
            for k in 0..d {
                x[[i, k]] = (inst.pd[k] / self.capacity - self.mean[k]) / self.std[k];
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalProxy {
    pub net: MLPParams,
}

impl PrimalProxy {
    pub fn new<R: Rng + ?Sized>(
        network: &Network,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<PrimalProxy, ProxyError> {
        let (lo, hi) = (&network.p_lower, &network.p_upper);
        let bounds = OutputBounds {
            offset: (lo + hi) * 0.5,
            scale: ((hi - lo) * 0.5).mapv(|h| h.max(1e-6)),
            lower: lo.iter().map(|&v| Some(v)).collect(),
            upper: hi.iter().map(|&v| Some(v)).collect(),
        };
        let net = MLPParams::new(network.n_loads(), hidden, bounds, OUTPUT_GAIN, rng)?;
        Ok(PrimalProxy { net })
    }
}

/// Dual net outputs `[λ, π_1 .. π_E]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualProxy {
    pub net: MLPParams,
    pub smoothing: f64,
}

impl DualProxy {
    pub fn new<R: Rng + ?Sized>(
        network: &Network,
        hidden: &[usize],
        smoothing: f64,
        rng: &mut R,
    ) -> Result<DualProxy, ProxyError> {
        if !(smoothing > 0.0) {
            return Err(ProxyError::Smoothing(smoothing));
        }
        let e = network.n_branches();
        let m = network.penalty();
        let cost = &network.cost;
        let c_min = cost.iter().cloned().fold(f64::INFINITY, f64::min);
        let c_max = cost.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut offset = Array1::zeros(1 + e);
        let mut scale = Array1::from_elem(1 + e, c_max.abs().max(1.0));
        offset[0] = cost.mean().unwrap_or(0.0);
        scale[0] = (c_max - c_min).max(1.0);
        let mut lower = vec![Some(-m); 1 + e];
        let mut upper = vec![Some(m); 1 + e];
        lower[0] = None;
        upper[0] = None;
        let bounds = OutputBounds {
            offset,
            scale,
            lower,
            upper,
        };
        let mut net = MLPParams::new(network.n_loads(), hidden, bounds, OUTPUT_GAIN, rng)?;
        // start from π = 0: any nonzero flow price costs f̄|π| in the dual
        // objective until the net learns where congestion actually occurs
        let last = net.layers.last_mut().unwrap();
        last.weight.columns_mut().into_iter().skip(1).for_each(|mut c| c.fill(0.0));
        Ok(DualProxy { net, smoothing })
    }
}

/// Both proxies and their shared input encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proxies {
    pub primal: PrimalProxy,
    pub dual: DualProxy,
    pub scaler: InputScaler,
}

impl Proxies {
    pub fn new<R: Rng + ?Sized>(
        network: &Network,
        hidden: &[usize],
        smoothing: f64,
        scaler: InputScaler,
        rng: &mut R,
    ) -> Result<Proxies, ProxyError> {
        let primal = PrimalProxy::new(network, hidden, rng)?;
        let dual = DualProxy::new(network, hidden, smoothing, rng)?;
        Ok(Proxies {
            primal,
            dual,
            scaler,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.primal.net.set_mode(mode);
        self.dual.net.set_mode(mode);
    }
}

/// Move a box-feasible dispatch onto `eᵀp = pd_total` by convex combination
/// with the upper bounds (deficit) or the lower bounds (surplus).
pub fn proportional_response(
    p_tilde: &[f64],
    pd_total: f64,
    p_lower: &[f64],
    p_upper: &[f64],
) -> Result<Vec<f64>, ProxyError> {
    let rep = Repair::new(p_tilde, pd_total, p_lower, p_upper)?;
    let target = if rep.up { p_upper } else { p_lower };
    Ok(p_tilde
        .iter()
        .zip(target)
        .map(|(&p, &b)| (1.0 - rep.eta) * p + rep.eta * b)
        .collect())
}

/// Vector-Jacobian product of [`proportional_response`] with respect to `p_tilde`.
pub fn proportional_response_vjp(
    p_tilde: &[f64],
    pd_total: f64,
    p_lower: &[f64],
    p_upper: &[f64],
    grad: &[f64],
) -> Result<Vec<f64>, ProxyError> {
    let rep = Repair::new(p_tilde, pd_total, p_lower, p_upper)?;
    check_len("repair gradient", p_tilde.len(), grad.len())?;
    let scale = 1.0 - rep.eta;
    if rep.degenerate {
        return Ok(grad.iter().map(|g| g * scale).collect());
    }
    let s: f64 = p_tilde.iter().sum();
    let (target, bound_total) = if rep.up {
        (p_upper, p_upper.iter().sum::<f64>())
    } else {
        (p_lower, p_lower.iter().sum::<f64>())
    };
    // ∂η/∂p̃_i is the same for every i
    let deta = (pd_total - bound_total) / ((bound_total - s) * (bound_total - s));
    let shared: f64 = grad
        .iter()
        .zip(target.iter().zip(p_tilde))
        .map(|(g, (b, p))| g * (b - p))
        .sum::<f64>()
        * deta;
    Ok(grad.iter().map(|g| scale * g + shared).collect())
}

struct Repair {
    up: bool,
    eta: f64,
    degenerate: bool,
}

impl Repair {
    fn new(p_tilde: &[f64], d: f64, p_lower: &[f64], p_upper: &[f64]) -> Result<Repair, ProxyError> {
        check_len("p_lower", p_tilde.len(), p_lower.len())?;
        check_len("p_upper", p_tilde.len(), p_upper.len())?;
        let lo: f64 = p_lower.iter().sum();
        let hi: f64 = p_upper.iter().sum();
        let slack = 1e-9 * d.abs().max(1.0);
        if !(d >= lo - slack && d <= hi + slack) {
            return Err(ProxyError::InfeasibleDemand {
                demand: d,
                min: lo,
                max: hi,
            });
        }
        let s: f64 = p_tilde.iter().sum();
        let up = s < d;
        let denom = if up { hi - s } else { s - lo };
        let (eta, degenerate) = if denom <= DEGENERATE_DENOMINATOR {
            (1.0, true)
        } else if up {
            ((d - s) / denom, false)
        } else {
            ((s - d) / denom, false)
        };
        Ok(Repair {
            up,
            eta: eta.clamp(0.0, 1.0),
            degenerate,
        })
    }
}

/// Feasible primal point from a raw box-feasible dispatch.
pub fn repair_dispatch(inst: &EDInstance, p_tilde: ArrayView1<f64>) -> Result<PrimalPoint, ProxyError> {
    let net = &inst.network;
    check_len("dispatch", net.n_generators(), p_tilde.len())?;
    let pg = proportional_response(
        &p_tilde.to_vec(),
        inst.total_demand(),
        net.p_lower.as_slice().unwrap(),
        net.p_upper.as_slice().unwrap(),
    )?;
    Ok(PrimalPoint::from_dispatch(inst, pg))
}

fn check_batch(batch: &[EDInstance]) -> Result<&Arc<Network>, ProxyError> {
    let first = batch.first().ok_or(ProxyError::EmptyBatch)?;
    Ok(&first.network)
}

/// Predict primal points for a batch. The net's own mode decides which
/// batch-norm statistics are used.
pub fn primal_predict_batch(
    proxy: &PrimalProxy,
    scaler: &InputScaler,
    batch: &[EDInstance],
) -> Result<Vec<PrimalPoint>, ProxyError> {
    let network = check_batch(batch)?;
    check_len("primal outputs", network.n_generators(), proxy.net.output_dim())?;
    let x = scaler.features(batch)?;
    let (out, _) = proxy.net.forward(x.view())?;
    batch
        .iter()
        .zip(out.rows())
        .map(|(inst, row)| repair_dispatch(inst, row))
        .collect()
}

pub fn primal_predict(proxy: &PrimalProxy, scaler: &InputScaler, inst: &EDInstance) -> Result<PrimalPoint, ProxyError> {
    Ok(primal_predict_batch(proxy, scaler, std::slice::from_ref(inst))?.remove(0))
}

/// `c − λe − (ΦA_g)ᵀπ`
pub fn reduced_costs(network: &Network, lambda: f64, pi: &[f64]) -> Array1<f64> {
    let pi = ArrayView1::from(pi);
    &network.cost - lambda - network.phi_g.t().dot(&pi)
}

/// Coefficients of every dual field in the dual objective, laid out as a
/// [`DualPoint`]. Useful as the upstream gradient of ψ.
pub fn dual_objective_weights(inst: &EDInstance) -> DualPoint {
    let net = &inst.network;
    DualPoint {
        lambda: inst.total_demand(),
        pi: inst.load_flows().to_vec(),
        mu_lower: net.f_lower.to_vec(),
        mu_upper: (-&net.f_upper).to_vec(),
        z_lower: net.p_lower.to_vec(),
        z_upper: (-&net.p_upper).to_vec(),
        y: vec![0.0; net.n_branches()],
    }
}

/// Result of the smooth completion. Indices in `negative_y` are branches
/// where `μ̲ + μ̄` exceeded `M`, so the point is not dual feasible there.
#[derive(Debug, Clone, PartialEq)]
pub struct S3lDual {
    pub dual: DualPoint,
    pub negative_y: Vec<usize>,
}

/// Smoothed pair with `a − b = v` and `a, b > 0`: `a = s + v/2 + r`,
/// `b = s − v/2 + r`, `r = √(s² + v²/4)`.
fn smooth_split(v: f64, s: f64) -> (f64, f64) {
    let r = (s * s + 0.25 * v * v).sqrt();
    (s + 0.5 * v + r, s - 0.5 * v + r)
}

fn smooth_split_grad(v: f64, s: f64) -> (f64, f64) {
    let r = (s * s + 0.25 * v * v).sqrt();
    let q = 0.25 * v / r;
    (0.5 + q, -0.5 + q)
}

fn check_dual_inputs(network: &Network, pi: &[f64]) -> Result<(), ProxyError> {
    check_len("pi", network.n_branches(), pi.len())
}

fn smoothing_scales(network: &Network, mu_s: f64) -> Result<(Vec<f64>, Vec<f64>), ProxyError> {
    if !(mu_s > 0.0) {
        return Err(ProxyError::Smoothing(mu_s));
    }
    let flow: Vec<f64> = network
        .f_upper
        .iter()
        .zip(&network.f_lower)
        .enumerate()
        .map(|(e, (hi, lo))| {
            if hi - lo > 0.0 {
                Ok(mu_s / (hi - lo))
            } else {
                Err(ProxyError::ZeroRange { what: "branch", index: e })
            }
        })
        .collect::<Result<_, _>>()?;
    let gen: Vec<f64> = network
        .p_upper
        .iter()
        .zip(&network.p_lower)
        .enumerate()
        .map(|(g, (hi, lo))| {
            if hi - lo > 0.0 {
                Ok(mu_s / (hi - lo))
            } else {
                Err(ProxyError::ZeroRange { what: "generator", index: g })
            }
        })
        .collect::<Result<_, _>>()?;
    Ok((flow, gen))
}

/// Smooth, everywhere-differentiable dual completion.
pub fn dual_complete_s3l(lambda: f64, pi: &[f64], inst: &EDInstance, mu_s: f64) -> Result<S3lDual, ProxyError> {
    let net = &inst.network;
    check_dual_inputs(net, pi)?;
    let (s_f, s_g) = smoothing_scales(net, mu_s)?;
    let m = net.penalty();
    let (mu_lower, mu_upper): (Vec<f64>, Vec<f64>) = pi.iter().zip(&s_f).map(|(&p, &s)| smooth_split(p, s)).unzip();
    let z = reduced_costs(net, lambda, pi);
    let (z_lower, z_upper): (Vec<f64>, Vec<f64>) = z.iter().zip(&s_g).map(|(&v, &s)| smooth_split(v, s)).unzip();
    let y: Vec<f64> = mu_lower.iter().zip(&mu_upper).map(|(a, b)| m - a - b).collect();
    let negative_y = y.iter().enumerate().filter(|(_, v)| **v < 0.0).map(|(e, _)| e).collect();
    Ok(S3lDual {
        dual: DualPoint {
            lambda,
            pi: pi.to_vec(),
            mu_lower,
            mu_upper,
            z_lower,
            z_upper,
            y,
        },
        negative_y,
    })
}

/// Vector-Jacobian product of [`dual_complete_s3l`]: `upstream` holds the
/// gradient with respect to every field of the completed point; returns the
/// gradient with respect to `(λ, π)`.
pub fn dual_complete_s3l_vjp(
    lambda: f64,
    pi: &[f64],
    inst: &EDInstance,
    mu_s: f64,
    upstream: &DualPoint,
) -> Result<(f64, Vec<f64>), ProxyError> {
    let net = &inst.network;
    check_dual_inputs(net, pi)?;
    let (e, g) = (net.n_branches(), net.n_generators());
    for (what, got) in [
        ("pi gradient", upstream.pi.len()),
        ("mu_lower gradient", upstream.mu_lower.len()),
        ("mu_upper gradient", upstream.mu_upper.len()),
        ("y gradient", upstream.y.len()),
    ] {
        check_len(what, e, got)?;
    }
    check_len("z_lower gradient", g, upstream.z_lower.len())?;
    check_len("z_upper gradient", g, upstream.z_upper.len())?;
    let (s_f, s_g) = smoothing_scales(net, mu_s)?;
    let z = reduced_costs(net, lambda, pi);
    let gz: Array1<f64> = (0..g)
        .map(|k| {
            let (da, db) = smooth_split_grad(z[k], s_g[k]);
            upstream.z_lower[k] * da + upstream.z_upper[k] * db
        })
        .collect();
    let g_lambda = upstream.lambda - gz.sum();
    let through_z = net.phi_g.dot(&gz);
    let g_pi = (0..e)
        .map(|k| {
            let (da, db) = smooth_split_grad(pi[k], s_f[k]);
            let gy = upstream.y[k];
            upstream.pi[k] + (upstream.mu_lower[k] - gy) * da + (upstream.mu_upper[k] - gy) * db - through_z[k]
        })
        .collect();
    Ok((g_lambda, g_pi))
}

/// Optimal completion for fixed `(λ, π)`.
pub fn dual_complete_dll(lambda: f64, pi: &[f64], inst: &EDInstance) -> Result<DualPoint, ProxyError> {
    let net = &inst.network;
    check_dual_inputs(net, pi)?;
    let m = net.penalty();
    if let Some((index, &value)) = pi.iter().enumerate().find(|(_, p)| !(p.abs() <= m)) {
        return Err(ProxyError::PriceOutOfRange { index, value, bound: m });
    }
    let z = reduced_costs(net, lambda, pi);
    Ok(DualPoint {
        lambda,
        pi: pi.to_vec(),
        mu_lower: pi.iter().map(|p| p.max(0.0)).collect(),
        mu_upper: pi.iter().map(|p| (-p).max(0.0)).collect(),
        z_lower: z.iter().map(|v| v.max(0.0)).collect(),
        z_upper: z.iter().map(|v| (-v).max(0.0)).collect(),
        y: pi.iter().map(|p| m - p.abs()).collect(),
    })
}

/// Raw `(λ̂, π̂)` for a batch.
pub fn dual_outputs_batch(
    proxy: &DualProxy,
    scaler: &InputScaler,
    batch: &[EDInstance],
) -> Result<Vec<(f64, Vec<f64>)>, ProxyError> {
    let network = check_batch(batch)?;
    check_len("dual outputs", 1 + network.n_branches(), proxy.net.output_dim())?;
    let x = scaler.features(batch)?;
    let (out, _) = proxy.net.forward(x.view())?;
    Ok(out
        .rows()
        .into_iter()
        .map(|r| (r[0], r.iter().skip(1).cloned().collect()))
        .collect())
}

/// Dual prediction; `mode` selects the completion (training: S3L,
/// inference: DLL) and nothing else.
pub fn dual_predict_batch(
    proxy: &DualProxy,
    scaler: &InputScaler,
    batch: &[EDInstance],
    mode: Mode,
) -> Result<Vec<DualPoint>, ProxyError> {
    let raw = dual_outputs_batch(proxy, scaler, batch)?;
    batch
        .iter()
        .zip(raw)
        .map(|(inst, (lambda, pi))| match mode {
            Mode::Training => Ok(dual_complete_s3l(lambda, &pi, inst, proxy.smoothing)?.dual),
            Mode::Inference => dual_complete_dll(lambda, &pi, inst),
        })
        .collect()
}

pub fn dual_predict(proxy: &DualProxy, scaler: &InputScaler, inst: &EDInstance, mode: Mode) -> Result<DualPoint, ProxyError> {
    Ok(dual_predict_batch(proxy, scaler, std::slice::from_ref(inst), mode)?.remove(0))
}

/// Anything that maps an instance to a primal-dual pair.
pub trait PrimalDualPredictor {
    fn predict(&self, inst: &EDInstance) -> Result<(PrimalPoint, DualPoint), ProxyError>;

    fn predict_batch(&self, batch: &[EDInstance]) -> Result<Vec<(PrimalPoint, DualPoint)>, ProxyError> {
        batch.iter().map(|inst| self.predict(inst)).collect()
    }
}

impl PrimalDualPredictor for Proxies {
    fn predict(&self, inst: &EDInstance) -> Result<(PrimalPoint, DualPoint), ProxyError> {
        let x = primal_predict(&self.primal, &self.scaler, inst)?;
        let y = dual_predict(&self.dual, &self.scaler, inst, Mode::Inference)?;
        Ok((x, y))
    }

    fn predict_batch(&self, batch: &[EDInstance]) -> Result<Vec<(PrimalPoint, DualPoint)>, ProxyError> {
        let xs = primal_predict_batch(&self.primal, &self.scaler, batch)?;
        let ys = dual_predict_batch(&self.dual, &self.scaler, batch, Mode::Inference)?;
        Ok(xs.into_iter().zip(ys).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::ed_model::{check_dual_feasible, check_primal_feasible, dual_objective, DEFAULT_FEAS_TOL};
    use crate::grid::{Branch, Generator, Grid, Load};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal, Uniform};

    fn toy() -> Arc<Network> {
        Arc::new(Network::new(cases::toy14()).unwrap())
    }

    fn two_gen() -> Arc<Network> {
        let grid = Grid {
            buses: vec![1, 2],
            branches: vec![Branch {
                from: 1,
                to: 2,
                x: 0.1,
                f_lower: -5.0,
                f_upper: 5.0,
            }],
            generators: vec![
                Generator {
                    bus: 1,
                    cost: 1.0,
                    p_lower: 0.0,
                    p_upper: 10.0,
                },
                Generator {
                    bus: 2,
                    cost: 2.0,
                    p_lower: 0.0,
                    p_upper: 10.0,
                },
            ],
            loads: vec![Load { bus: 2, demand: 6.0 }],
            slack: 1,
            penalty: 1000.0,
        };
        Arc::new(Network::new(grid).unwrap())
    }

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn repair_balanced_input_is_unchanged() {
        let out = proportional_response(&[3.0, 4.0], 7.0, &[0.0, 0.0], &[10.0, 10.0]).unwrap();
        assert_eq!(out, vec![3.0, 4.0]);
    }

    #[test]
    fn repair_full_stretch() {
        let out = proportional_response(&[1.0, 2.0], 25.0, &[1.0, 2.0], &[10.0, 15.0]).unwrap();
        assert_eq!(out, vec![10.0, 15.0]);
    }

    #[test]
    fn repair_worked_example() {
        let out = proportional_response(&[2.0, 4.0], 9.0, &[0.0, 0.0], &[10.0, 10.0]).unwrap();
        // η = (9 − 6)/(20 − 6) = 3/14
        let eta = 3.0 / 14.0;
        assert!(approx(out[0], (1.0 - eta) * 2.0 + eta * 10.0, 1e-15));
        assert!(approx(out[0], 26.0 / 7.0, 1e-14));
        assert!(approx(out[1], 37.0 / 7.0, 1e-14));
        assert!(approx(out[0] + out[1], 9.0, 1e-14));
    }

    #[test]
    fn repair_degenerate_denominator_snaps_to_bound() {
        let out = proportional_response(&[10.0, 10.0], 20.0, &[0.0, 0.0], &[10.0, 10.0]).unwrap();
        assert_eq!(out, vec![10.0, 10.0]);
        let out = proportional_response(&[0.0, 0.0], 0.0, &[0.0, 0.0], &[10.0, 10.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn repair_zero_demand() {
        let out = proportional_response(&[3.0, 1.0], 0.0, &[0.0, 0.0], &[10.0, 10.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn repair_rejects_infeasible_total() {
        let err = proportional_response(&[3.0, 1.0], 25.0, &[0.0, 0.0], &[10.0, 10.0]).unwrap_err();
        assert!(matches!(err, ProxyError::InfeasibleDemand { .. }));
    }

    fn fd_check_repair(p: &[f64], d: f64, lo: &[f64], hi: &[f64], g: &[f64]) {
        let analytic = proportional_response_vjp(p, d, lo, hi, g).unwrap();
        let f = |q: &[f64]| -> f64 {
            let out = proportional_response(q, d, lo, hi).unwrap();
            out.iter().zip(g).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..p.len() {
            let mut up = p.to_vec();
            let mut dn = p.to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!(
                (analytic[i] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "idx {i}: analytic {} fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn repair_vjp_matches_finite_differences() {
        let lo = [1.0, 0.0, 2.0];
        let hi = [10.0, 8.0, 12.0];
        let g = [0.3, -1.2, 0.7];
        // deficit branch
        fd_check_repair(&[3.0, 2.0, 4.0], 15.0, &lo, &hi, &g);
        // surplus branch
        fd_check_repair(&[9.0, 7.0, 11.0], 12.0, &lo, &hi, &g);
    }

    proptest! {
        #[test]
        fn repair_is_feasible(
            seed in 0u64..1000, frac in 0.0f64..=1.0
        ) {
            let mut r = rng::stream(seed, "repair", 0);
            let n = 5;
            let lo: Vec<f64> = (0..n).map(|_| r.random_range(0.0..5.0)).collect();
            let hi: Vec<f64> = lo.iter().map(|l| l + r.random_range(0.1..20.0)).collect();
            let p: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| r.random_range(*l..=*h)).collect();
            let (tl, th): (f64, f64) = (lo.iter().sum(), hi.iter().sum());
            let d = tl + frac * (th - tl);
            let out = proportional_response(&p, d, &lo, &hi).unwrap();
            let total: f64 = out.iter().sum();
            prop_assert!((total - d).abs() <= 1e-9 * d.max(1.0));
            for k in 0..n {
                prop_assert!(out[k] >= lo[k] - 1e-12 && out[k] <= hi[k] + 1e-12);
            }
        }
    }

    #[test]
    fn s3l_symmetric_case() {
        assert_eq!(smooth_split(0.0, 0.5), (1.0, 1.0));
    }

    #[test]
    fn s3l_worked_example() {
        let (a, b) = smooth_split(3.0, 0.5);
        let r = 2.5f64.sqrt();
        assert!(approx(a, 2.0 + r, 1e-15));
        assert!(approx(b, -1.0 + r, 1e-15));
        assert!(approx(a, 3.5811, 1e-4));
        assert!(approx(b, 0.5811, 1e-4));
        assert!(approx(a - b, 3.0, 1e-15));
    }

    #[test]
    fn s3l_satisfies_stationarity_exactly() {
        let net = toy();
        let inst = EDInstance::new(net.clone(), net.reference_demand.to_vec()).unwrap();
        let mut r = rng::stream(11, "s3l", 0);
        let normal = Normal::new(0.0, 50.0).unwrap();
        for _ in 0..100 {
            let pi: Vec<f64> = (0..net.n_branches()).map(|_| normal.sample(&mut r)).collect();
            let lambda = normal.sample(&mut r);
            let out = dual_complete_s3l(lambda, &pi, &inst, DEFAULT_SMOOTHING).unwrap();
            assert!(out.negative_y.is_empty());
            let y = &out.dual;
            for e in 0..pi.len() {
                assert!((-pi[e] + y.mu_lower[e] - y.mu_upper[e]).abs() <= 1e-12 * (1.0 + pi[e].abs()));
                assert!(y.mu_lower[e] > 0.0 && y.mu_upper[e] > 0.0);
            }
            let z = reduced_costs(&net, lambda, &pi);
            for g in 0..z.len() {
                assert!((y.z_lower[g] - y.z_upper[g] - z[g]).abs() <= 1e-10 * (1.0 + z[g].abs()));
                assert!(y.z_lower[g] > 0.0 && y.z_upper[g] > 0.0);
            }
            let report = check_dual_feasible(&inst, y, DEFAULT_FEAS_TOL);
            assert!(report.passed(), "{:?}", report.first_violation());
        }
    }

    #[test]
    fn s3l_flags_negative_y_near_penalty() {
        let net = toy();
        let inst = EDInstance::new(net.clone(), net.reference_demand.to_vec()).unwrap();
        let mut pi = vec![0.0; net.n_branches()];
        pi[3] = net.penalty();
        let out = dual_complete_s3l(0.0, &pi, &inst, 1.0).unwrap();
        assert_eq!(out.negative_y, vec![3]);
    }

    #[test]
    fn s3l_rejects_bad_smoothing_and_zero_range() {
        let net = toy();
        let inst = EDInstance::new(net.clone(), net.reference_demand.to_vec()).unwrap();
        let pi = vec![0.0; net.n_branches()];
        assert_eq!(dual_complete_s3l(0.0, &pi, &inst, 0.0).unwrap_err(), ProxyError::Smoothing(0.0));

        let mut grid = net.grid.clone();
        grid.generators[0].p_upper = grid.generators[0].p_lower;
        let flat = Arc::new(Network::new(grid).unwrap());
        let inst = EDInstance::new(flat.clone(), flat.reference_demand.to_vec()).unwrap();
        assert!(matches!(
            dual_complete_s3l(0.0, &pi, &inst, 1e-2).unwrap_err(),
            ProxyError::ZeroRange { what: "generator", index: 0 }
        ));
    }

    #[test]
    fn s3l_vjp_matches_finite_differences() {
        let net = toy();
        let inst = EDInstance::new(net.clone(), net.reference_demand.to_vec()).unwrap();
        for seed in 0..10 {
            let mut r = rng::stream(seed, "s3l-fd", 0);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let e = net.n_branches();
            let g = net.n_generators();
            let pi: Vec<f64> = (0..e).map(|_| 5.0 * normal.sample(&mut r)).collect();
            let lambda = 30.0 + 5.0 * normal.sample(&mut r);
            let mu_s = 0.5;
            let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut r)).collect() };
            let up = DualPoint {
                lambda: 0.7,
                pi: v(e),
                mu_lower: v(e),
                mu_upper: v(e),
                z_lower: v(g),
                z_upper: v(g),
                y: v(e),
            };
            let value = |lambda: f64, pi: &[f64]| -> f64 {
                let d = dual_complete_s3l(lambda, pi, &inst, mu_s).unwrap().dual;
                let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                up.lambda * d.lambda
                    + dot(&up.pi, &d.pi)
                    + dot(&up.mu_lower, &d.mu_lower)
                    + dot(&up.mu_upper, &d.mu_upper)
                    + dot(&up.z_lower, &d.z_lower)
                    + dot(&up.z_upper, &d.z_upper)
                    + dot(&up.y, &d.y)
            };
            let (gl, gp) = dual_complete_s3l_vjp(lambda, &pi, &inst, mu_s, &up).unwrap();
            let h = 1e-5;
            let fd = (value(lambda + h, &pi) - value(lambda - h, &pi)) / (2.0 * h);
            assert!((gl - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "lambda: {gl} vs {fd}");
            for k in 0..e {
                let mut a = pi.clone();
                let mut b = pi.clone();
                a[k] += h;
                b[k] -= h;
                let fd = (value(lambda, &a) - value(lambda, &b)) / (2.0 * h);
                assert!((gp[k] - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "pi[{k}]: {} vs {fd}", gp[k]);
            }
        }
    }

    #[test]
    fn dll_componentwise_example() {
        let net = two_gen();
        let inst = EDInstance::new(net.clone(), vec![6.0]).unwrap();
        let y = dual_complete_dll(1.5, &[0.0], &inst).unwrap();
        assert_eq!(y.z_lower, vec![0.0, 0.5]);
        assert_eq!(y.z_upper, vec![0.5, 0.0]);
        assert_eq!(y.y, vec![1000.0]);
        assert!(check_dual_feasible(&inst, &y, DEFAULT_FEAS_TOL).passed());
    }

    #[test]
    fn dll_rejects_out_of_range_price() {
        let net = two_gen();
        let inst = EDInstance::new(net.clone(), vec![6.0]).unwrap();
        assert!(matches!(
            dual_complete_dll(1.5, &[1000.5], &inst).unwrap_err(),
            ProxyError::PriceOutOfRange { index: 0, .. }
        ));
        assert!(dual_complete_dll(1.5, &[-1000.0], &inst).is_ok());
    }

    #[test]
    fn dll_dominates_s3l_and_perturbations() {
        let net = toy();
        let inst = EDInstance::new(net.clone(), net.reference_demand.to_vec()).unwrap();
        let mut r = rng::stream(5, "dll", 0);
        let normal = Normal::new(0.0, 20.0).unwrap();
        let unit = Uniform::new(0.0, 1.0).unwrap();
        for _ in 0..100 {
            let pi: Vec<f64> = (0..net.n_branches()).map(|_| normal.sample(&mut r)).collect();
            let lambda = 35.0 + normal.sample(&mut r);
            let dll = dual_complete_dll(lambda, &pi, &inst).unwrap();
            let psi_dll = dual_objective(&inst, &dll).unwrap();
            let s3l = dual_complete_s3l(lambda, &pi, &inst, DEFAULT_SMOOTHING).unwrap().dual;
            assert!(psi_dll >= dual_objective(&inst, &s3l).unwrap() - 1e-9);
            // any feasible completion adds the same t ≥ 0 to both halves of a split
            let mut other = dll.clone();
            for e in 0..pi.len() {
                let t = unit.sample(&mut r) * other.y[e] / 2.0;
                other.mu_lower[e] += t;
                other.mu_upper[e] += t;
                other.y[e] -= 2.0 * t;
            }
            for g in 0..other.z_lower.len() {
                let t = unit.sample(&mut r) * 10.0;
                other.z_lower[g] += t;
                other.z_upper[g] += t;
            }
            assert!(check_dual_feasible(&inst, &other, DEFAULT_FEAS_TOL).passed());
            assert!(psi_dll >= dual_objective(&inst, &other).unwrap() - 1e-9);
        }
    }

    #[test]
    fn untrained_predictions_are_feasible() {
        let net = toy();
        let mut r = rng::stream(9, "init", 0);
        let scaler = InputScaler::identity(&net);
        let mut proxies = Proxies::new(&net, &[16, 16], DEFAULT_SMOOTHING, scaler, &mut r).unwrap();
        proxies.set_mode(Mode::Inference);
        let batch: Vec<EDInstance> = (0..50)
            .map(|k| {
                let f = 0.5 + k as f64 / 50.0;
                EDInstance::new(net.clone(), net.reference_demand.iter().map(|d| d * f).collect()).unwrap()
            })
            .collect();
        for (inst, (x, y)) in batch.iter().zip(proxies.predict_batch(&batch).unwrap()) {
            assert!(check_primal_feasible(inst, &x, DEFAULT_FEAS_TOL).passed());
            assert!(check_dual_feasible(inst, &y, DEFAULT_FEAS_TOL).passed());
        }
    }

    #[test]
    fn completion_mode_only_changes_completion() {
        let net = toy();
        let mut r = rng::stream(10, "init", 0);
        let mut proxies = Proxies::new(&net, &[8], DEFAULT_SMOOTHING, InputScaler::identity(&net), &mut r).unwrap();
        proxies.set_mode(Mode::Inference);
        let inst = EDInstance::new(net.clone(), net.reference_demand.to_vec()).unwrap();
        let a = dual_predict(&proxies.dual, &proxies.scaler, &inst, Mode::Training).unwrap();
        let b = dual_predict(&proxies.dual, &proxies.scaler, &inst, Mode::Inference).unwrap();
        assert_eq!(a.lambda, b.lambda);
        assert_eq!(a.pi, b.pi);
        assert!(dual_objective(&inst, &b).unwrap() >= dual_objective(&inst, &a).unwrap() - 1e-9);
    }

    #[test]
    fn zero_demand_prediction() {
        let net = two_gen();
        let mut r = rng::stream(12, "init", 0);
        let mut proxies = Proxies::new(&net, &[4], DEFAULT_SMOOTHING, InputScaler::identity(&net), &mut r).unwrap();
        proxies.set_mode(Mode::Inference);
        let inst = EDInstance::new(net.clone(), vec![0.0]).unwrap();
        let x = primal_predict(&proxies.primal, &proxies.scaler, &inst).unwrap();
        assert_eq!(x.pg, vec![0.0, 0.0]);
    }

    #[test]
    fn scaler_standardises_sample() {
        let net = two_gen();
        let demands = vec![vec![2.0], vec![4.0], vec![6.0]];
        let s = InputScaler::fit(&net, &demands);
        let batch: Vec<EDInstance> = demands.iter().map(|d| EDInstance::new(net.clone(), d.clone()).unwrap()).collect();
        let x = s.features(&batch).unwrap();
        assert!(x.sum().abs() < 1e-12);
        assert!((x.mapv(|v| v * v).sum() / 3.0 - 1.0).abs() < 1e-12);
    }
}
