//! Network case files, validation and the DC sensitivity matrices.
//!
//! A case file is a single JSON object:
//!
//! ```json
//! {
//!   "buses": [1, 2],
//!   "branches": [{"from": 1, "to": 2, "x": 0.1, "f_lower": -50, "f_upper": 50}],
//!   "generators": [{"bus": 1, "cost": 10, "p_lower": 0, "p_upper": 100}],
//!   "loads": [{"bus": 2, "demand": 40}],
//!   "slack": 1,
//!   "penalty_M": 150000
//! }
//! ```
//!
//! `penalty_M` is optional and defaults to [`DEFAULT_PENALTY`].

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Thermal violation penalty used when a case does not set one ($/MWh).
pub const DEFAULT_PENALTY: f64 = 150_000.0;

pub type BusId = u32;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("cannot read case file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed case file at `{path}`: {message}")]
    Syntax { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("reduced susceptance matrix is singular (network disconnected?)")]
    SingularSusceptance,
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> GridError {
    GridError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    /// Series reactance in p.u.
    pub x: f64,
    pub f_lower: f64,
    pub f_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub bus: BusId,
    /// Marginal cost in $/MWh.
    pub cost: f64,
    pub p_lower: f64,
    pub p_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Load {
    pub bus: BusId,
    /// Reference demand in MW.
    pub demand: f64,
}

fn default_penalty() -> f64 {
    DEFAULT_PENALTY
}

/// Static network description. Construct through [`Grid::from_json`],
/// [`parse_case`] or [`Grid::validate`]; the fields are public so tests can
/// build small grids by hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub buses: Vec<BusId>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub slack: BusId,
    #[serde(rename = "penalty_M", default = "default_penalty")]
    pub penalty: f64,
}

/// Read and validate a case file.
pub fn parse_case(path: impl AsRef<Path>) -> Result<Grid, GridError> {
    let text = std::fs::read_to_string(path)?;
    Grid::from_json(&text)
}

impl Grid {
    pub fn from_json(text: &str) -> Result<Grid, GridError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let grid: Grid = serde_path_to_error::deserialize(de).map_err(|e| GridError::Syntax {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serialization is infallible")
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn n_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn n_loads(&self) -> usize {
        self.loads.len()
    }

    /// Map from bus identifier to its position in `buses`.
    pub fn bus_index(&self) -> HashMap<BusId, usize> {
        self.buses.iter().enumerate().map(|(i, &b)| (b, i)).collect()
    }

    pub fn max_cost(&self) -> f64 {
        self.generators
            .iter()
            .map(|g| g.cost)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Check every structural invariant; errors carry the offending field path.
    pub fn validate(&self) -> Result<(), GridError> {
        if self.buses.is_empty() {
            return Err(invalid("buses", "at least one bus is required"));
        }
        if self.generators.is_empty() {
            return Err(invalid("generators", "at least one generator is required"));
        }
        let index = self.bus_index();
        if index.len() != self.buses.len() {
            return Err(invalid("buses", "duplicate bus identifier"));
        }
        let known = |path: String, bus: BusId| {
            if index.contains_key(&bus) {
                Ok(())
            } else {
                Err(invalid(path, format!("unknown bus {bus}")))
            }
        };
        known("slack".into(), self.slack)?;

        for (i, br) in self.branches.iter().enumerate() {
            known(format!("branches[{i}].from"), br.from)?;
            known(format!("branches[{i}].to"), br.to)?;
            if br.from == br.to {
                return Err(invalid(format!("branches[{i}]"), "self-loop branch"));
            }
            if !br.x.is_finite() || br.x == 0.0 {
                return Err(invalid(
                    format!("branches[{i}].x"),
                    "reactance must be finite and nonzero",
                ));
            }
            if !(br.f_lower.is_finite() && br.f_upper.is_finite()) {
                return Err(invalid(format!("branches[{i}]"), "flow bounds must be finite"));
            }
            if br.f_lower > br.f_upper {
                return Err(invalid(format!("branches[{i}]"), "inverted flow bounds"));
            }
        }
        for (i, g) in self.generators.iter().enumerate() {
            known(format!("generators[{i}].bus"), g.bus)?;
            if !(g.cost.is_finite() && g.p_lower.is_finite() && g.p_upper.is_finite()) {
                return Err(invalid(format!("generators[{i}]"), "values must be finite"));
            }
            if g.p_lower > g.p_upper {
                return Err(invalid(format!("generators[{i}]"), "inverted generator bounds"));
            }
        }
        for (i, l) in self.loads.iter().enumerate() {
            known(format!("loads[{i}].bus"), l.bus)?;
            if !l.demand.is_finite() || l.demand < 0.0 {
                return Err(invalid(
                    format!("loads[{i}].demand"),
                    "demand must be finite and nonnegative",
                ));
            }
        }
        if !(self.penalty.is_finite() && self.penalty > 0.0) {
            return Err(invalid("penalty_M", "penalty must be positive"));
        }
        if self.penalty <= self.max_cost() {
            return Err(invalid(
                "penalty_M",
                "penalty must exceed every generator cost",
            ));
        }
        if !self.is_connected() {
            return Err(invalid("branches", "network is not connected"));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let index = self.bus_index();
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            let (a, b) = (index[&br.from], index[&br.to]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// PTDF matrix and the generator/load incidence matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PtdfModel {
    /// E x N, slack column identically zero.
    pub phi: Array2<f64>,
    /// N x G
    pub a_g: Array2<f64>,
    /// N x D
    pub a_d: Array2<f64>,
}

/// Build Φ from the slack-reduced bus susceptance matrix.
///
/// Flow convention: `f_e = (θ_from - θ_to) / x_e`, injections positive into
/// the bus, the slack bus absorbing the imbalance.
pub fn compute_ptdf(grid: &Grid) -> Result<PtdfModel, GridError> {
    let index = grid.bus_index();
    let n = grid.n_buses();
    let e = grid.n_branches();
    let slack = index[&grid.slack];

    let mut b = DMatrix::<f64>::zeros(n, n);
    for br in &grid.branches {
        let (i, j) = (index[&br.from], index[&br.to]);
        let s = 1.0 / br.x;
        b[(i, i)] += s;
        b[(j, j)] += s;
        b[(i, j)] -= s;
        b[(j, i)] -= s;
    }
    // reduced position of every non-slack bus
    let reduced: Vec<Option<usize>> = (0..n)
        .scan(0usize, |k, i| {
            Some(if i == slack {
                None
            } else {
                *k += 1;
                Some(*k - 1)
            })
        })
        .collect();
    let nr = n - 1;

    let mut phi = Array2::<f64>::zeros((e, n));
    if nr > 0 {
        let b_red = DMatrix::from_fn(nr, nr, |r, c| {
            let i = reduced.iter().position(|&x| x == Some(r)).unwrap();
            let j = reduced.iter().position(|&x| x == Some(c)).unwrap();
            b[(i, j)]
        });
        let lu = b_red.lu();
        // One solve per branch: Φ_e,: = (1/x_e) (row_from - row_to) B_r^{-1},
        // i.e. B_r^T φ_e = (1/x_e)(e_from - e_to) with B_r symmetric.
        let mut rhs = DMatrix::<f64>::zeros(nr, e);
        for (k, br) in grid.branches.iter().enumerate() {
            let s = 1.0 / br.x;
            if let Some(r) = reduced[index[&br.from]] {
                rhs[(r, k)] += s;
            }
            if let Some(r) = reduced[index[&br.to]] {
                rhs[(r, k)] -= s;
            }
        }
        let sol = lu.solve(&rhs).ok_or(GridError::SingularSusceptance)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(GridError::SingularSusceptance);
        }
        for k in 0..e {
            for i in 0..n {
                if let Some(r) = reduced[i] {
                    phi[[k, i]] = sol[(r, k)];
                }
            }
        }
    }

    let mut a_g = Array2::<f64>::zeros((n, grid.n_generators()));
    for (k, g) in grid.generators.iter().enumerate() {
        a_g[[index[&g.bus], k]] = 1.0;
    }
    let mut a_d = Array2::<f64>::zeros((n, grid.n_loads()));
    for (k, l) in grid.loads.iter().enumerate() {
        a_d[[index[&l.bus], k]] = 1.0;
    }
    Ok(PtdfModel { phi, a_g, a_d })
}

/// A validated grid together with the dense data of the dispatch LP.
#[derive(Debug, Clone)]
pub struct Network {
    pub grid: Grid,
    pub ptdf: PtdfModel,
    /// Φ A_g, E x G.
    pub phi_g: Array2<f64>,
    /// Φ A_d, E x D.
    pub phi_d: Array2<f64>,
    pub cost: Array1<f64>,
    pub p_lower: Array1<f64>,
    pub p_upper: Array1<f64>,
    pub f_lower: Array1<f64>,
    pub f_upper: Array1<f64>,
    pub reference_demand: Array1<f64>,
}

impl Network {
    pub fn new(grid: Grid) -> Result<Network, GridError> {
        grid.validate()?;
        let ptdf = compute_ptdf(&grid)?;
        let phi_g = ptdf.phi.dot(&ptdf.a_g);
        let phi_d = ptdf.phi.dot(&ptdf.a_d);
        let cost = grid.generators.iter().map(|g| g.cost).collect();
        let p_lower = grid.generators.iter().map(|g| g.p_lower).collect();
        let p_upper = grid.generators.iter().map(|g| g.p_upper).collect();
        let f_lower = grid.branches.iter().map(|b| b.f_lower).collect();
        let f_upper = grid.branches.iter().map(|b| b.f_upper).collect();
        let reference_demand = grid.loads.iter().map(|l| l.demand).collect();
        Ok(Network {
            grid,
            ptdf,
            phi_g,
            phi_d,
            cost,
            p_lower,
            p_upper,
            f_lower,
            f_upper,
            reference_demand,
        })
    }

    pub fn n_branches(&self) -> usize {
        self.grid.n_branches()
    }

    pub fn n_generators(&self) -> usize {
        self.grid.n_generators()
    }

    pub fn n_loads(&self) -> usize {
        self.grid.n_loads()
    }

    pub fn penalty(&self) -> f64 {
        self.grid.penalty
    }

    pub fn total_capacity(&self) -> f64 {
        self.p_upper.sum()
    }

    pub fn total_min_output(&self) -> f64 {
        self.p_lower.sum()
    }
}
