//! Exact reference solver for the dispatch LP.
//!
//! Both entry points build a bounded-variable LP over a subset of branches and
//! solve it with [`simplex`]. For a monitored branch `i` the flow is split as
//! `pf_i = w_i + ξ⁺_i − ξ⁻_i` with `w_i ∈ [f_lower, f_upper]` and
//! `ξ± ≥ 0` costing `M`, so the PTDF row is a single equality and every
//! variable carries simple bounds. At an optimum at most one of `ξ±` is
//! positive and `ξ⁺ + ξ⁻` equals the overflow of the original model.

pub mod simplex;

use std::cell::Cell;
use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ed_model::{overflow, primal_objective, DualPoint, EDInstance, PrimalPoint};
use simplex::{BoundedLp, SimplexError, SimplexOptions};

/// Branches whose recovered overflow exceeds this many MW are activated.
const ACTIVATION_TOL: f64 = 1e-9;

thread_local! {
    static SOLVE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of dispatch LP solves started on the current thread.
pub fn solve_calls() -> u64 {
    SOLVE_CALLS.with(|c| c.get())
}

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("infeasible balance: demand {demand} outside generation range [{min}, {max}]")]
    InfeasibleBalance { demand: f64, min: f64, max: f64 },
    #[error("numerical failure: {0}")]
    Numerical(SimplexError),
}

#[derive(Debug, Clone)]
pub struct LPSolveResult {
    pub primal: PrimalPoint,
    pub dual: DualPoint,
    pub objective: f64,
    pub iterations: usize,
    pub lazy_rounds: usize,
    pub activated_branches: BTreeSet<usize>,
    /// Size of the activated set after each round.
    pub activation_history: Vec<usize>,
    /// Solve time, model assembly excluded.
    pub wall_time: Duration,
}

/// Solve with every PTDF row present.
pub fn solve_ed_full(inst: &EDInstance) -> Result<LPSolveResult, SolverError> {
    SOLVE_CALLS.with(|c| c.set(c.get() + 1));
    check_balance(inst)?;
    let all: Vec<usize> = (0..inst.network.n_branches()).collect();
    let lp = build(inst, &all);
    let start = Instant::now();
    let sol = simplex::solve(&lp, SimplexOptions::default()).map_err(SolverError::Numerical)?;
    let (primal, dual) = extract(inst, &all, &sol);
    let wall_time = start.elapsed();
    finish(inst, primal, dual, sol.iterations, 1, all.into_iter().collect(), vec![], wall_time)
}

/// Lazy PTDF loop: start with no flow rows, solve, recover flows and
/// overflows from the dispatch, activate every violated branch, repeat until
/// nothing new is violated.
pub fn solve_ed_lazy(inst: &EDInstance) -> Result<LPSolveResult, SolverError> {
    SOLVE_CALLS.with(|c| c.set(c.get() + 1));
    check_balance(inst)?;
    let net = &inst.network;
    let f_lower = net.f_lower.as_slice().unwrap();
    let f_upper = net.f_upper.as_slice().unwrap();

    let mut active: BTreeSet<usize> = BTreeSet::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut wall_time = Duration::ZERO;
    loop {
        let rows: Vec<usize> = active.iter().copied().collect();
        let lp = build(inst, &rows);
        let start = Instant::now();
        let sol = simplex::solve(&lp, SimplexOptions::default()).map_err(SolverError::Numerical)?;
        iterations += sol.iterations;
        let (primal, dual) = extract(inst, &rows, &sol);
        let xi = overflow(&primal.pf, f_lower, f_upper);
        let before = active.len();
        for (i, &v) in xi.iter().enumerate() {
            if v > ACTIVATION_TOL {
                active.insert(i);
            }
        }
        wall_time += start.elapsed();
        history.push(active.len());
        if active.len() == before {
            let rounds = history.len();
            return finish(inst, primal, dual, iterations, rounds, active, history, wall_time);
        }
    }
}

fn check_balance(inst: &EDInstance) -> Result<(), SolverError> {
    if inst.balance_feasible() {
        Ok(())
    } else {
        Err(SolverError::InfeasibleBalance {
            demand: inst.total_demand(),
            min: inst.network.total_min_output(),
            max: inst.network.total_capacity(),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    inst: &EDInstance,
    primal: PrimalPoint,
    dual: DualPoint,
    iterations: usize,
    lazy_rounds: usize,
    activated_branches: BTreeSet<usize>,
    activation_history: Vec<usize>,
    wall_time: Duration,
) -> Result<LPSolveResult, SolverError> {
    let objective = primal_objective(inst, &primal).expect("solver output has model dimensions");
    Ok(LPSolveResult {
        primal,
        dual,
        objective,
        iterations,
        lazy_rounds,
        activated_branches,
        activation_history,
        wall_time,
    })
}

/// Variables: `pg` (G), then `(w, ξ⁺, ξ⁻)` per monitored branch.
/// Rows: power balance, then one PTDF row per monitored branch.
fn build(inst: &EDInstance, rows: &[usize]) -> BoundedLp {
    let net = &inst.network;
    let g = net.n_generators();
    let k = rows.len();
    let m = 1 + k;
    let n = g + 3 * k;
    let big_m = net.penalty();
    let load_flows = inst.load_flows().to_vec();

    let mut a = DMatrix::<f64>::zeros(m, n);
    let mut b = DVector::<f64>::zeros(m);
    let mut c = vec![0.0; n];
    let mut lower = vec![0.0; n];
    let mut upper = vec![f64::INFINITY; n];

    for j in 0..g {
        a[(0, j)] = 1.0;
        c[j] = net.cost[j];
        lower[j] = net.p_lower[j];
        upper[j] = net.p_upper[j];
    }
    b[0] = inst.total_demand();
    for (r, &i) in rows.iter().enumerate() {
        for j in 0..g {
            a[(1 + r, j)] = net.phi_g[[i, j]];
        }
        let (w, up, down) = (g + 3 * r, g + 3 * r + 1, g + 3 * r + 2);
        a[(1 + r, w)] = -1.0;
        a[(1 + r, up)] = -1.0;
        a[(1 + r, down)] = 1.0;
        lower[w] = net.f_lower[i];
        upper[w] = net.f_upper[i];
        c[up] = big_m;
        c[down] = big_m;
        b[1 + r] = load_flows[i];
    }
    BoundedLp { a, b, c, lower, upper }
}

/// Primal: dispatch with recovered flows and overflows. Dual: λ and π from the
/// row duals (π = 0 on unmonitored branches), z split from the dispatch
/// reduced costs by sign, μ split from π by sign, y = M − μ_lower − μ_upper.
fn extract(
    inst: &EDInstance,
    rows: &[usize],
    sol: &simplex::LpSolution,
) -> (PrimalPoint, DualPoint) {
    let net = &inst.network;
    let g = net.n_generators();
    let e = net.n_branches();
    let big_m = net.penalty();

    let pg: Vec<f64> = (0..g)
        .map(|j| sol.x[j].clamp(net.p_lower[j], net.p_upper[j]))
        .collect();
    let primal = PrimalPoint::from_dispatch(inst, pg);

    let mut dual = DualPoint::zeros(g, e);
    dual.lambda = sol.duals[0];
    for (r, &i) in rows.iter().enumerate() {
        // |π| ≤ M holds at optimality; clamp rounding noise
        dual.pi[i] = sol.duals[1 + r].clamp(-big_m, big_m);
    }
    let flow_prices = net.phi_g.t().dot(&ndarray::Array1::from(dual.pi.clone()));
    for j in 0..g {
        let d = net.cost[j] - dual.lambda - flow_prices[j];
        dual.z_lower[j] = d.max(0.0);
        dual.z_upper[j] = (-d).max(0.0);
    }
    for i in 0..e {
        dual.mu_lower[i] = dual.pi[i].max(0.0);
        dual.mu_upper[i] = (-dual.pi[i]).max(0.0);
        dual.y[i] = big_m - dual.mu_lower[i] - dual.mu_upper[i];
    }
    (primal, dual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ed_model::{check_dual_feasible, check_primal_feasible, dual_objective};
    use crate::grid::{Branch, Generator, Grid, Load, Network, DEFAULT_PENALTY};
    use std::sync::Arc;

    fn gen(bus: u32, cost: f64, cap: f64) -> Generator {
        Generator {
            bus,
            cost,
            p_lower: 0.0,
            p_upper: cap,
        }
    }

    fn two_bus(limit: f64) -> Arc<Network> {
        let grid = Grid {
            buses: vec![1, 2],
            branches: vec![Branch {
                from: 1,
                to: 2,
                x: 1.0,
                f_lower: -limit,
                f_upper: limit,
            }],
            generators: vec![gen(1, 1.0, 10.0), gen(2, 2.0, 10.0)],
            loads: vec![Load {
                bus: 2,
                demand: 15.0,
            }],
            slack: 1,
            penalty: DEFAULT_PENALTY,
        };
        Arc::new(Network::new(grid).unwrap())
    }

    fn assert_certified(inst: &EDInstance, res: &LPSolveResult) {
        assert!(check_primal_feasible(inst, &res.primal, 1e-7).passed());
        let report = check_dual_feasible(inst, &res.dual, 1e-7);
        assert!(report.passed(), "{:?}", report.violations);
        let psi = dual_objective(inst, &res.dual).unwrap();
        assert!((res.objective - psi).abs() <= 1e-7 * res.objective.abs().max(1.0));
    }

    #[test]
    fn single_generator_uncongested() {
        let grid = Grid {
            buses: vec![1, 2],
            branches: vec![Branch {
                from: 1,
                to: 2,
                x: 1.0,
                f_lower: -100.0,
                f_upper: 100.0,
            }],
            generators: vec![gen(1, 10.0, 10.0)],
            loads: vec![Load { bus: 2, demand: 5.0 }],
            slack: 1,
            penalty: DEFAULT_PENALTY,
        };
        let inst = EDInstance::new(Arc::new(Network::new(grid).unwrap()), vec![5.0]).unwrap();
        let res = solve_ed_full(&inst).unwrap();
        assert!((res.objective - 50.0).abs() < 1e-9);
        assert!((res.dual.lambda - 10.0).abs() < 1e-9);
        assert_certified(&inst, &res);
    }

    #[test]
    fn congested_two_bus_full_and_lazy() {
        let inst = EDInstance::new(two_bus(6.0), vec![15.0]).unwrap();
        let full = solve_ed_full(&inst).unwrap();
        assert!((full.primal.pg[0] - 6.0).abs() < 1e-9);
        assert!((full.primal.pg[1] - 9.0).abs() < 1e-9);
        assert!((full.objective - 24.0).abs() < 1e-9);
        assert!(full.primal.xi.iter().all(|&v| v == 0.0));
        assert_certified(&inst, &full);

        let lazy = solve_ed_lazy(&inst).unwrap();
        assert_eq!(lazy.activated_branches, BTreeSet::from([0]));
        assert!((lazy.objective - full.objective).abs() <= 1e-6 * full.objective);
        assert_certified(&inst, &lazy);
        assert!(lazy.activation_history.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn uncongested_lazy_single_round() {
        let inst = EDInstance::new(two_bus(100.0), vec![15.0]).unwrap();
        let lazy = solve_ed_lazy(&inst).unwrap();
        assert_eq!(lazy.lazy_rounds, 1);
        assert!(lazy.activated_branches.is_empty());
        // merit order: 10 from the cheap unit, 5 from the other
        assert!((lazy.objective - 20.0).abs() < 1e-9);
        let full = solve_ed_full(&inst).unwrap();
        assert!((lazy.objective - full.objective).abs() < 1e-9);
        assert_certified(&inst, &lazy);
    }

    #[test]
    fn unavoidable_overflow_is_priced_at_penalty() {
        // 15 MW load behind a 4 MW line with only 10 MW local capacity
        let inst = EDInstance::new(two_bus(4.0), vec![15.0]).unwrap();
        let full = solve_ed_full(&inst).unwrap();
        assert!((full.primal.xi[0] - 1.0).abs() < 1e-9);
        assert!((full.objective - (5.0 + 20.0 + DEFAULT_PENALTY)).abs() < 1e-6);
        assert_certified(&inst, &full);
        let lazy = solve_ed_lazy(&inst).unwrap();
        assert!((lazy.objective - full.objective).abs() <= 1e-6 * full.objective);
        assert_certified(&inst, &lazy);
    }

    #[test]
    fn infeasible_balance() {
        let inst = EDInstance::new(two_bus(6.0), vec![25.0]).unwrap();
        assert!(matches!(
            solve_ed_full(&inst),
            Err(SolverError::InfeasibleBalance { .. })
        ));
        assert!(solve_ed_lazy(&inst)
            .unwrap_err()
            .to_string()
            .contains("infeasible balance"));
    }

    #[test]
    fn call_counter_counts_solves() {
        let inst = EDInstance::new(two_bus(6.0), vec![15.0]).unwrap();
        let before = solve_calls();
        solve_ed_full(&inst).unwrap();
        solve_ed_lazy(&inst).unwrap();
        assert_eq!(solve_calls() - before, 2);
    }
}
