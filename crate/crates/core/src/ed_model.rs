//! Economic dispatch primal/dual data, objectives, gaps and feasibility checks.
//!
//! Primal:
//!
//! ```text
//! min  cᵀpg + M eᵀξ
//! s.t. Φ A_g pg − pf = Φ A_d pd          [π]
//!      eᵀpg = eᵀpd                        [λ]
//!      p_lower ≤ pg ≤ p_upper             [z_lower, z_upper]
//!      f_lower − ξ ≤ pf ≤ f_upper + ξ     [μ_lower, μ_upper]
//!      ξ ≥ 0                              [y]
//! ```
//!
//! The dual maximises `λ eᵀpd + (Φ A_d pd)ᵀπ + f_lowerᵀμ_lower − f_upperᵀμ_upper
//! + p_lowerᵀz_lower − p_upperᵀz_upper` subject to
//! `λe + (ΦA_g)ᵀπ + z_lower − z_upper = c`, `−π + μ_lower − μ_upper = 0`,
//! `μ_lower + μ_upper + y = Me` and nonnegativity of μ, z, y.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Network;

/// Base feasibility tolerance; checks scale it by `max(1, eᵀpd)`.
pub const DEFAULT_FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("demand must be finite and nonnegative (load {0})")]
    InvalidDemand(usize),
    #[error("denominator not positive ({0})")]
    NonPositiveDenominator(f64),
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::Dimension {
            what,
            expected,
            got,
        })
    }
}

/// One parametric query: a demand vector over a network.
#[derive(Debug, Clone)]
pub struct EDInstance {
    pub network: Arc<Network>,
    pub pd: Vec<f64>,
}

impl EDInstance {
    pub fn new(network: Arc<Network>, pd: Vec<f64>) -> Result<EDInstance, ModelError> {
        check_len("pd", network.n_loads(), pd.len())?;
        if let Some(i) = pd.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(ModelError::InvalidDemand(i));
        }
        Ok(EDInstance { network, pd })
    }

    pub fn total_demand(&self) -> f64 {
        self.pd.iter().sum()
    }

    /// `Φ A_d pd`, the flow contribution of the loads.
    pub fn load_flows(&self) -> Array1<f64> {
        self.network.phi_d.dot(&Array1::from(self.pd.clone()))
    }

    /// `max(1, eᵀpd)`, the magnitude used to scale feasibility tolerances.
    pub fn scale(&self) -> f64 {
        self.total_demand().max(1.0)
    }

    /// Whether total demand lies within aggregate generator limits.
    pub fn balance_feasible(&self) -> bool {
        let total = self.total_demand();
        total >= self.network.total_min_output() && total <= self.network.total_capacity()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalPoint {
    pub pg: Vec<f64>,
    pub pf: Vec<f64>,
    pub xi: Vec<f64>,
}

impl PrimalPoint {
    /// Complete a dispatch with the flows it induces and the resulting
    /// overflows: `pf = ΦA_g pg − ΦA_d pd`, `ξ = max(0, pf − f_upper, f_lower − pf)`.
    pub fn from_dispatch(inst: &EDInstance, pg: Vec<f64>) -> PrimalPoint {
        let net = &inst.network;
        let gen_flows = net.phi_g.dot(&Array1::from(pg.clone()));
        let pf: Vec<f64> = (&gen_flows - &inst.load_flows()).to_vec();
        let xi = overflow(&pf, net.f_lower.as_slice().unwrap(), net.f_upper.as_slice().unwrap());
        PrimalPoint { pg, pf, xi }
    }
}

/// Elementwise `max(0, pf − f_upper, f_lower − pf)`.
pub fn overflow(pf: &[f64], f_lower: &[f64], f_upper: &[f64]) -> Vec<f64> {
    pf.iter()
        .zip(f_lower.iter().zip(f_upper))
        .map(|(&f, (&lo, &hi))| (f - hi).max(0.0).max((lo - f).max(0.0)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPoint {
    pub lambda: f64,
    pub pi: Vec<f64>,
    pub mu_lower: Vec<f64>,
    pub mu_upper: Vec<f64>,
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
    pub y: Vec<f64>,
}

impl DualPoint {
    pub fn zeros(n_gen: usize, n_branch: usize) -> DualPoint {
        DualPoint {
            lambda: 0.0,
            pi: vec![0.0; n_branch],
            mu_lower: vec![0.0; n_branch],
            mu_upper: vec![0.0; n_branch],
            z_lower: vec![0.0; n_gen],
            z_upper: vec![0.0; n_gen],
            y: vec![0.0; n_branch],
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_primal_dims(inst: &EDInstance, x: &PrimalPoint) -> Result<(), ModelError> {
    let net = &inst.network;
    check_len("pg", net.n_generators(), x.pg.len())?;
    check_len("pf", net.n_branches(), x.pf.len())?;
    check_len("xi", net.n_branches(), x.xi.len())
}

fn check_dual_dims(inst: &EDInstance, y: &DualPoint) -> Result<(), ModelError> {
    let (g, e) = (inst.network.n_generators(), inst.network.n_branches());
    check_len("pi", e, y.pi.len())?;
    check_len("mu_lower", e, y.mu_lower.len())?;
    check_len("mu_upper", e, y.mu_upper.len())?;
    check_len("y", e, y.y.len())?;
    check_len("z_lower", g, y.z_lower.len())?;
    check_len("z_upper", g, y.z_upper.len())
}

/// `cᵀpg + M eᵀξ`
pub fn primal_objective(inst: &EDInstance, x: &PrimalPoint) -> Result<f64, ModelError> {
    check_primal_dims(inst, x)?;
    let net = &inst.network;
    Ok(dot(net.cost.as_slice().unwrap(), &x.pg) + net.penalty() * x.xi.iter().sum::<f64>())
}

pub fn dual_objective(inst: &EDInstance, y: &DualPoint) -> Result<f64, ModelError> {
    check_dual_dims(inst, y)?;
    let net = &inst.network;
    let load_flows = inst.load_flows();
    Ok(y.lambda * inst.total_demand()
        + dot(load_flows.as_slice().unwrap(), &y.pi)
        + dot(net.f_lower.as_slice().unwrap(), &y.mu_lower)
        - dot(net.f_upper.as_slice().unwrap(), &y.mu_upper)
        + dot(net.p_lower.as_slice().unwrap(), &y.z_lower)
        - dot(net.p_upper.as_slice().unwrap(), &y.z_upper))
}

/// `φ(x) − ψ(y)`; nonnegative whenever both points are feasible.
pub fn duality_gap(inst: &EDInstance, x: &PrimalPoint, y: &DualPoint) -> Result<f64, ModelError> {
    Ok(primal_objective(inst, x)? - dual_objective(inst, y)?)
}

/// Gap relative to the dual objective. Because ψ(y) bounds the optimum from
/// below, this value bounds both true relative suboptimalities from above.
pub fn normalized_gap(inst: &EDInstance, x: &PrimalPoint, y: &DualPoint) -> Result<f64, ModelError> {
    let phi = primal_objective(inst, x)?;
    let psi = dual_objective(inst, y)?;
    normalized_gap_from(phi, psi)
}

pub fn normalized_gap_from(phi: f64, psi: f64) -> Result<f64, ModelError> {
    if psi > 0.0 {
        Ok((phi - psi) / psi)
    } else {
        Err(ModelError::NonPositiveDenominator(psi))
    }
}

/// Gap relative to the midpoint `(φ + ψ)/2`. Only used to normalise the
/// training loss; it certifies nothing.
pub fn midpoint_gap(inst: &EDInstance, x: &PrimalPoint, y: &DualPoint) -> Result<f64, ModelError> {
    let phi = primal_objective(inst, x)?;
    let psi = dual_objective(inst, y)?;
    midpoint_gap_from(phi, psi)
}

pub fn midpoint_gap_from(phi: f64, psi: f64) -> Result<f64, ModelError> {
    let mid = 0.5 * (phi + psi);
    if mid > 0.0 {
        Ok((phi - psi) / mid)
    } else {
        Err(ModelError::NonPositiveDenominator(mid))
    }
}

/// `max(gap − eps, 0)`
pub fn hinge_gap(gap: f64, eps: f64) -> f64 {
    (gap - eps).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub constraint: &'static str,
    pub index: Option<usize>,
    pub residual: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{}] residual {:.3e}", self.constraint, i, self.residual),
            None => write!(f, "{} residual {:.3e}", self.constraint, self.residual),
        }
    }
}

/// Outcome of a feasibility check: the largest residual of every constraint
/// family plus each individual entry that exceeded the tolerance.
#[derive(Debug, Clone, Default)]
pub struct FeasibilityReport {
    pub tolerance: f64,
    pub max_residuals: BTreeMap<&'static str, f64>,
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    fn new(tolerance: f64) -> Self {
        FeasibilityReport {
            tolerance,
            ..Default::default()
        }
    }

    fn record(&mut self, constraint: &'static str, index: Option<usize>, residual: f64) {
        let entry = self.max_residuals.entry(constraint).or_insert(0.0);
        // NaN residuals must register as violations
        if residual.is_nan() || residual > *entry {
            *entry = residual;
        }
        if residual.is_nan() || residual > self.tolerance {
            self.violations.push(Violation {
                constraint,
                index,
                residual,
            });
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first_violation(&self) -> Option<&Violation> {
        self.violations.first()
    }
}

fn bound_excess(v: f64, lo: f64, hi: f64) -> f64 {
    (lo - v).max(v - hi).max(0.0)
}

/// Check Φ A_g pg − pf = Φ A_d pd, power balance, generator bounds, flow
/// bounds with overflow, and ξ ≥ 0. Residuals are compared against
/// `tol · max(1, eᵀpd)`.
pub fn check_primal_feasible(inst: &EDInstance, x: &PrimalPoint, tol: f64) -> FeasibilityReport {
    let mut report = FeasibilityReport::new(tol * inst.scale());
    if let Err(ModelError::Dimension { what, .. }) = check_primal_dims(inst, x) {
        report.record(what, None, f64::NAN);
        return report;
    }
    let net = &inst.network;
    let gen_flows = net.phi_g.dot(&Array1::from(x.pg.clone()));
    let load_flows = inst.load_flows();
    for i in 0..net.n_branches() {
        report.record("ptdf", Some(i), (gen_flows[i] - x.pf[i] - load_flows[i]).abs());
    }
    let balance = x.pg.iter().sum::<f64>() - inst.total_demand();
    report.record("balance", None, balance.abs());
    for (j, &p) in x.pg.iter().enumerate() {
        report.record("pg_bounds", Some(j), bound_excess(p, net.p_lower[j], net.p_upper[j]));
    }
    for i in 0..net.n_branches() {
        let slack = x.xi[i];
        report.record(
            "flow_bounds",
            Some(i),
            bound_excess(x.pf[i], net.f_lower[i] - slack, net.f_upper[i] + slack),
        );
        report.record("xi_nonneg", Some(i), (-slack).max(0.0));
    }
    report
}

/// Check the three dual equality families and nonnegativity of μ, z and y.
pub fn check_dual_feasible(inst: &EDInstance, y: &DualPoint, tol: f64) -> FeasibilityReport {
    let mut report = FeasibilityReport::new(tol * inst.scale());
    if let Err(ModelError::Dimension { what, .. }) = check_dual_dims(inst, y) {
        report.record(what, None, f64::NAN);
        return report;
    }
    let net = &inst.network;
    let m = net.penalty();
    let flow_prices = net.phi_g.t().dot(&Array1::from(y.pi.clone()));
    for j in 0..net.n_generators() {
        let r = y.lambda + flow_prices[j] + y.z_lower[j] - y.z_upper[j] - net.cost[j];
        report.record("stationarity_pg", Some(j), r.abs());
        report.record("z_lower_nonneg", Some(j), (-y.z_lower[j]).max(0.0));
        report.record("z_upper_nonneg", Some(j), (-y.z_upper[j]).max(0.0));
    }
    for i in 0..net.n_branches() {
        report.record(
            "stationarity_pf",
            Some(i),
            (-y.pi[i] + y.mu_lower[i] - y.mu_upper[i]).abs(),
        );
        report.record(
            "stationarity_xi",
            Some(i),
            (y.mu_lower[i] + y.mu_upper[i] + y.y[i] - m).abs(),
        );
        report.record("mu_lower_nonneg", Some(i), (-y.mu_lower[i]).max(0.0));
        report.record("mu_upper_nonneg", Some(i), (-y.mu_upper[i]).max(0.0));
        report.record("y_nonneg", Some(i), (-y.y[i]).max(0.0));
    }
    report
}
