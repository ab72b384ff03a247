//! Dense revised simplex for `min cᵀx s.t. Ax = b, l ≤ x ≤ u`.
//!
//! Bounds are handled natively (nonbasic variables sit at a bound, bound
//! flips happen without a basis change). Phase 1 adds one artificial per row,
//! signed so the all-artificial basis is feasible; phase 2 fixes them at zero.
//! The basis inverse is kept explicitly, updated by one Gauss-Jordan pivot per
//! basis change and rebuilt from an LU factorisation every `refactor_every`
//! pivots.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SimplexError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("problem is unbounded")]
    Unbounded,
    #[error("basis matrix became singular")]
    Singular,
    #[error("iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct BoundedLp {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    pub pivot_tol: f64,
    pub opt_tol: f64,
    pub feas_tol: f64,
    pub refactor_every: usize,
    pub max_iterations: Option<usize>,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            pivot_tol: 1e-9,
            opt_tol: 1e-9,
            feas_tol: 1e-9,
            refactor_every: 100,
            max_iterations: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    /// Row duals `y` with reduced costs `c − Aᵀy`.
    pub duals: Vec<f64>,
    pub reduced_costs: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Index of the basic variable of every row (artificials are `≥ n`).
    pub basis: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Basic,
    AtLower,
    AtUpper,
    Free,
}

struct Tableau<'a> {
    lp: &'a BoundedLp,
    opts: SimplexOptions,
    m: usize,
    n: usize,
    /// `[A | diag(sign)]`
    cols: DMatrix<f64>,
    cost: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    x: Vec<f64>,
    status: Vec<Status>,
    basis: Vec<usize>,
    binv: DMatrix<f64>,
    since_refactor: usize,
    iterations: usize,
    degenerate_run: usize,
}

impl<'a> Tableau<'a> {
    fn new(lp: &'a BoundedLp, opts: SimplexOptions) -> Tableau<'a> {
        let (m, n) = lp.a.shape();
        let total = n + m;
        let mut x = vec![0.0; total];
        let mut status = vec![Status::Basic; total];
        for j in 0..n {
            let (l, u) = (lp.lower[j], lp.upper[j]);
            (x[j], status[j]) = if l.is_finite() {
                (l, Status::AtLower)
            } else if u.is_finite() {
                (u, Status::AtUpper)
            } else {
                (0.0, Status::Free)
            };
        }
        let residual = &lp.b - &lp.a * DVector::from_column_slice(&x[..n]);
        let mut cols = DMatrix::<f64>::zeros(m, total);
        cols.columns_mut(0, n).copy_from(&lp.a);
        let mut binv = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            let sign = if residual[i] >= 0.0 { 1.0 } else { -1.0 };
            cols[(i, n + i)] = sign;
            binv[(i, i)] = sign;
            x[n + i] = residual[i].abs();
        }
        let mut lower = lp.lower.clone();
        lower.extend(std::iter::repeat_n(0.0, m));
        let mut upper = lp.upper.clone();
        upper.extend(std::iter::repeat_n(f64::INFINITY, m));
        let mut cost = vec![0.0; n];
        cost.extend(std::iter::repeat_n(1.0, m));
        Tableau {
            lp,
            opts,
            m,
            n,
            cols,
            cost,
            lower,
            upper,
            x,
            status,
            basis: (n..total).collect(),
            binv,
            since_refactor: 0,
            iterations: 0,
            degenerate_run: 0,
        }
    }

    fn total(&self) -> usize {
        self.n + self.m
    }

    fn refactor(&mut self) -> Result<(), SimplexError> {
        let b = DMatrix::from_fn(self.m, self.m, |i, r| self.cols[(i, self.basis[r])]);
        self.binv = b.lu().try_inverse().ok_or(SimplexError::Singular)?;
        if self.binv.iter().any(|v| !v.is_finite()) {
            return Err(SimplexError::Singular);
        }
        let mut rhs = self.lp.b.clone();
        for j in 0..self.total() {
            if self.status[j] != Status::Basic && self.x[j] != 0.0 {
                rhs.axpy(-self.x[j], &self.cols.column(j), 1.0);
            }
        }
        let xb = &self.binv * rhs;
        for (r, &j) in self.basis.iter().enumerate() {
            self.x[j] = xb[r];
        }
        self.since_refactor = 0;
        Ok(())
    }

    fn duals(&self) -> DVector<f64> {
        let cb = DVector::from_iterator(self.m, self.basis.iter().map(|&j| self.cost[j]));
        self.binv.tr_mul(&cb)
    }

    fn reduced_cost(&self, j: usize, y: &DVector<f64>) -> f64 {
        self.cost[j] - self.cols.column(j).dot(y)
    }

    fn run(&mut self) -> Result<(), SimplexError> {
        let limit = self
            .opts
            .max_iterations
            .unwrap_or(50 * (self.m + self.total()) + 10_000);
        let bland_after = 10 * (self.m + self.total());
        loop {
            if self.iterations >= limit {
                return Err(SimplexError::IterationLimit);
            }
            if self.since_refactor >= self.opts.refactor_every {
                self.refactor()?;
            }
            let y = self.duals();
            let bland = self.degenerate_run > bland_after;

            // pricing
            let mut entering: Option<(usize, f64, f64)> = None; // (var, direction, |d|)
            for j in 0..self.total() {
                if self.status[j] == Status::Basic || self.lower[j] == self.upper[j] {
                    continue;
                }
                let d = self.reduced_cost(j, &y);
                let dir = match self.status[j] {
                    Status::AtLower if d < -self.opts.opt_tol => 1.0,
                    Status::AtUpper if d > self.opts.opt_tol => -1.0,
                    Status::Free if d.abs() > self.opts.opt_tol => -d.signum(),
                    _ => continue,
                };
                if bland {
                    entering = Some((j, dir, d.abs()));
                    break;
                }
                if entering.is_none_or(|(_, _, best)| d.abs() > best) {
                    entering = Some((j, dir, d.abs()));
                }
            }
            let Some((q, dir, _)) = entering else {
                return Ok(());
            };

            let alpha = &self.binv * self.cols.column(q);

            // ratio test; x_B(t) = x_B − dir·t·alpha
            let flip = self.upper[q] - self.lower[q];
            let mut step = flip;
            let mut leaving: Option<(usize, f64)> = None; // (row, dir·alpha)
            for r in 0..self.m {
                let delta = dir * alpha[r];
                let j = self.basis[r];
                let t = if delta > self.opts.pivot_tol {
                    (self.x[j] - self.lower[j]) / delta
                } else if delta < -self.opts.pivot_tol {
                    (self.upper[j] - self.x[j]) / -delta
                } else {
                    continue;
                };
                if !t.is_finite() {
                    continue;
                }
                let t = t.max(0.0);
                // ties prefer a bound flip, then Bland's index or the larger pivot
                let better = if t < step - 1e-12 {
                    true
                } else if (t - step).abs() <= 1e-12 {
                    match leaving {
                        None => false,
                        Some((row, _)) if bland => j < self.basis[row],
                        Some((_, best)) => delta.abs() > best.abs(),
                    }
                } else {
                    false
                };
                if better {
                    step = t;
                    leaving = Some((r, delta));
                }
            }
            if !step.is_finite() {
                return Err(SimplexError::Unbounded);
            }

            for r in 0..self.m {
                let j = self.basis[r];
                self.x[j] -= dir * step * alpha[r];
            }
            self.x[q] += dir * step;

            match leaving {
                None => {
                    // bound flip
                    if dir > 0.0 {
                        self.x[q] = self.upper[q];
                        self.status[q] = Status::AtUpper;
                    } else {
                        self.x[q] = self.lower[q];
                        self.status[q] = Status::AtLower;
                    }
                }
                Some((r, delta)) => {
                    let out = self.basis[r];
                    if delta > 0.0 {
                        self.x[out] = self.lower[out];
                        self.status[out] = Status::AtLower;
                    } else {
                        self.x[out] = self.upper[out];
                        self.status[out] = Status::AtUpper;
                    }
                    self.basis[r] = q;
                    self.status[q] = Status::Basic;
                    self.pivot(r, &alpha);
                }
            }
            if step <= 1e-12 {
                self.degenerate_run += 1;
            } else {
                self.degenerate_run = 0;
            }
            self.iterations += 1;
        }
    }

    fn pivot(&mut self, r: usize, alpha: &DVector<f64>) {
        let piv = alpha[r];
        let row: Vec<f64> = (0..self.m).map(|c| self.binv[(r, c)] / piv).collect();
        for i in 0..self.m {
            let factor = if i == r { 0.0 } else { alpha[i] };
            for (c, &v) in row.iter().enumerate() {
                if i == r {
                    self.binv[(i, c)] = v;
                } else if factor != 0.0 {
                    self.binv[(i, c)] -= factor * v;
                }
            }
        }
        self.since_refactor += 1;
    }
}

/// Solve a bounded-variable LP in equality form.
pub fn solve(lp: &BoundedLp, opts: SimplexOptions) -> Result<LpSolution, SimplexError> {
    let (m, n) = lp.a.shape();
    assert_eq!(lp.b.len(), m);
    assert_eq!(lp.c.len(), n);
    assert_eq!(lp.lower.len(), n);
    assert_eq!(lp.upper.len(), n);
    if lp.lower.iter().zip(&lp.upper).any(|(l, u)| l > u) {
        return Err(SimplexError::Infeasible);
    }

    let mut tab = Tableau::new(lp, opts);
    let scale = lp.b.amax().max(1.0);

    // phase 1
    tab.run()?;
    tab.refactor()?;
    let infeasibility: f64 = tab.x[n..].iter().sum();
    if infeasibility > opts.feas_tol * scale {
        return Err(SimplexError::Infeasible);
    }

    // phase 2: artificials fixed at zero
    for i in n..n + m {
        tab.upper[i] = 0.0;
        tab.cost[i] = 0.0;
        if tab.status[i] != Status::Basic {
            tab.status[i] = Status::AtLower;
            tab.x[i] = 0.0;
        }
    }
    tab.cost[..n].copy_from_slice(&lp.c);
    tab.degenerate_run = 0;
    tab.refactor()?;
    tab.run()?;
    tab.refactor()?;

    let y = tab.duals();
    let reduced_costs = (0..n).map(|j| tab.reduced_cost(j, &y)).collect();
    let x: Vec<f64> = tab.x[..n].to_vec();
    let objective = x.iter().zip(&lp.c).map(|(a, b)| a * b).sum();
    Ok(LpSolution {
        x,
        duals: y.iter().copied().collect(),
        reduced_costs,
        objective,
        iterations: tab.iterations,
        basis: tab.basis.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lp(a: &[&[f64]], b: &[f64], c: &[f64], lower: &[f64], upper: &[f64]) -> BoundedLp {
        let m = a.len();
        let n = c.len();
        BoundedLp {
            a: DMatrix::from_fn(m, n, |i, j| a[i][j]),
            b: DVector::from_column_slice(b),
            c: c.to_vec(),
            lower: lower.to_vec(),
            upper: upper.to_vec(),
        }
    }

    #[test]
    fn merit_order_with_bounds() {
        // min x1 + 2 x2 + 3 x3, x1 + x2 + x3 = 12, each in [0, 5]
        let p = lp(&[&[1.0, 1.0, 1.0]], &[12.0], &[1.0, 2.0, 3.0], &[0.0; 3], &[5.0; 3]);
        let s = solve(&p, SimplexOptions::default()).unwrap();
        assert!((s.objective - (5.0 + 10.0 + 6.0)).abs() < 1e-9);
        assert!((s.duals[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_detected() {
        let p = lp(&[&[1.0, 1.0]], &[30.0], &[1.0, 1.0], &[0.0; 2], &[10.0; 2]);
        assert_eq!(solve(&p, SimplexOptions::default()).unwrap_err(), SimplexError::Infeasible);
    }

    #[test]
    fn unbounded_detected() {
        let p = lp(
            &[&[1.0, -1.0]],
            &[0.0],
            &[-1.0, 0.0],
            &[0.0, 0.0],
            &[f64::INFINITY, f64::INFINITY],
        );
        assert_eq!(solve(&p, SimplexOptions::default()).unwrap_err(), SimplexError::Unbounded);
    }

    #[test]
    fn free_variables() {
        // min |x| style: x − s⁺ + s⁻ = -3 with free x costing 0, slacks costing 1
        // and x ≥ -1 enforced through bounds on a second copy
        let p = lp(
            &[&[1.0, -1.0, 1.0]],
            &[-3.0],
            &[0.0, 1.0, 1.0],
            &[-1.0, 0.0, 0.0],
            &[f64::INFINITY, f64::INFINITY, f64::INFINITY],
        );
        let s = solve(&p, SimplexOptions::default()).unwrap();
        assert!((s.objective - 2.0).abs() < 1e-9);
    }

    /// KKT conditions are a complete optimality certificate for an LP.
    fn assert_kkt(p: &BoundedLp, s: &LpSolution) {
        let tol = 1e-7;
        let x = DVector::from_column_slice(&s.x);
        let r = &p.a * &x - &p.b;
        assert!(r.amax() < tol, "primal residual {}", r.amax());
        for j in 0..s.x.len() {
            let (l, u, v, d) = (p.lower[j], p.upper[j], s.x[j], s.reduced_costs[j]);
            assert!(v >= l - tol && v <= u + tol);
            if d > tol {
                assert!((v - l).abs() < tol, "positive reduced cost off lower bound");
            }
            if d < -tol {
                assert!((v - u).abs() < tol, "negative reduced cost off upper bound");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn random_boxed_lps_satisfy_kkt(
            m in 1usize..5,
            n in 2usize..9,
            seed_vals in proptest::collection::vec(-3.0f64..3.0, 100),
        ) {
            let n = n.max(m + 1);
            let mut k = 0;
            let mut next = || { k += 1; seed_vals[k % seed_vals.len()] * (1.0 + k as f64 * 0.01) };
            let a = DMatrix::from_fn(m, n, |_, _| next());
            let lower: Vec<f64> = (0..n).map(|_| next().min(0.0)).collect();
            let upper: Vec<f64> = lower.iter().map(|l| l + 1.0 + next().abs()).collect();
            // b from an interior point keeps the problem feasible
            let x0 = DVector::from_iterator(n, lower.iter().zip(&upper).map(|(l, u)| 0.5 * (l + u)));
            let b = &a * x0;
            let c: Vec<f64> = (0..n).map(|_| next()).collect();
            let p = BoundedLp { a, b, c, lower, upper };
            match solve(&p, SimplexOptions::default()) {
                Ok(s) => assert_kkt(&p, &s),
                Err(SimplexError::Singular) => {}
                Err(e) => panic!("unexpected {e}"),
            }
        }
    }
}
