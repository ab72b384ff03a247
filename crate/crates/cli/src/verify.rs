//! Invariant suite behind `certdispatch verify`.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use certdispatch::cases;
use certdispatch::ed_model::{
    check_dual_feasible, check_primal_feasible, dual_objective, primal_objective, DualPoint, EDInstance, PrimalPoint,
    DEFAULT_FEAS_TOL,
};
use certdispatch::grid::Network;
use certdispatch::hybrid::certify_solve;
use certdispatch::lp_solver::{solve_ed_full, solve_ed_lazy};
use certdispatch::nn::{double_softplus, double_softplus_grad, MLPParams, Mode, OutputBounds};
use certdispatch::proxies::{
    dual_complete_dll, dual_complete_s3l, dual_complete_s3l_vjp, proportional_response, proportional_response_vjp,
    repair_dispatch, PrimalDualPredictor, Proxies, ProxyError,
};
use certdispatch::rng::stream;
use certdispatch::training::{init_proxies, TrainConfig};

/// One named check: `Ok(detail)` when it held, `Err(detail)` otherwise.
type Check = Result<String, String>;

/// Run every check; returns overall success and a report, one line per check.
pub fn run(case: &str, seed: u64, n: usize) -> Result<(bool, String), String> {
    if n == 0 {
        return Err("--n must be at least 1".into());
    }
    let grid = cases::load(case).map_err(|e| e.to_string())?;
    let net = Arc::new(Network::new(grid).map_err(|e| e.to_string())?);
    let instances = mixed_instances(&net, n, seed);
    let cfg = TrainConfig {
        seed,
        hidden: vec![32, 32],
        train_samples_per_epoch: 256,
        ..TrainConfig::default()
    };
    let mut proxies = init_proxies(&net, &cfg).map_err(|e| e.to_string())?;
    // nonzero flow prices, otherwise the π path is never exercised
    let mut r = stream(seed, "verify-pi", 0);
    let last = proxies.dual.net.layers.last_mut().unwrap();
    for mut col in last.weight.columns_mut().into_iter().skip(1) {
        col.mapv_inplace(|_| r.random_range(-0.02..0.02));
    }
    proxies.set_mode(Mode::Inference);

    let optima: Vec<_> = instances
        .iter()
        .map(solve_ed_full)
        .collect::<Result<_, _>>()
        .map_err(|e| format!("oracle solve failed: {e}"))?;
    let phi_star: Vec<f64> = optima.iter().map(|s| s.objective).collect();

    let checks: Vec<(&str, Check)> = vec![
        ("certificate soundness", soundness(&instances, &proxies, &phi_star)),
        ("lazy/full equivalence", lazy_full(&instances, &phi_star)),
        ("construction feasibility", feasibility(&instances, &proxies, seed)),
        ("DLL dominance", dll_dominance(&instances, seed)),
        ("gradient checks", gradients(&net, seed)),
        ("optimality guarantee", guarantee(&instances, &proxies, &phi_star, seed)),
    ];
    let ok = checks.iter().all(|(_, c)| c.is_ok());
    let lines: Vec<String> = checks
        .into_iter()
        .map(|(name, c)| match c {
            Ok(d) => format!("ok   {name}: {d}"),
            Err(d) => format!("FAIL {name}: {d}"),
        })
        .collect();
    Ok((ok, lines.join("\n")))
}

/// Demands from 0.7x to 1.7x the reference, so the batch spans uncongested,
/// congested and overflow regimes.
fn mixed_instances(net: &Arc<Network>, n: usize, seed: u64) -> Vec<EDInstance> {
    let mut r = stream(seed, "verify-instances", 0);
    let lo = net.total_min_output();
    let hi = net.total_capacity();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let s = if n == 1 { 1.0 } else { 0.7 + k as f64 / (n - 1) as f64 };
        let mut pd: Vec<f64> = net
            .reference_demand
            .iter()
            .map(|d| d * s * (1.0 + r.random_range(-0.05..0.05)))
            .collect();
        let total: f64 = pd.iter().sum();
        let clamped = total.clamp(lo, 0.98 * hi);
        if total > 0.0 {
            pd.iter_mut().for_each(|v| *v *= clamped / total);
        }
        out.push(EDInstance::new(net.clone(), pd).expect("demand scaled into the feasible range"));
    }
    out
}

fn soundness(instances: &[EDInstance], proxies: &Proxies, phi_star: &[f64]) -> Check {
    let mut certified = 0;
    for (i, inst) in instances.iter().enumerate() {
        let (x, y) = proxies.predict(inst).map_err(|e| format!("instance {i}: {e}"))?;
        let (phi, psi) = objectives(inst, &x, &y)?;
        if psi <= 0.0 {
            continue;
        }
        certified += 1;
        let cert = (phi - psi) / psi;
        let primal = (phi - phi_star[i]) / phi_star[i];
        let dual = (phi_star[i] - psi) / phi_star[i];
        if cert + 1e-7 < primal || cert + 1e-7 < dual {
            return Err(format!(
                "instance {i}: certificate {cert:e} below true gaps ({primal:e}, {dual:e})"
            ));
        }
    }
    Ok(format!("{certified} of {} certificates bound the true gaps", instances.len()))
}

fn lazy_full(instances: &[EDInstance], phi_star: &[f64]) -> Check {
    let mut overflow = 0;
    for (i, inst) in instances.iter().enumerate() {
        let lazy = solve_ed_lazy(inst).map_err(|e| format!("instance {i}: {e}"))?;
        if (lazy.objective - phi_star[i]).abs() > 1e-6 * phi_star[i].abs().max(1.0) {
            return Err(format!("instance {i}: lazy {} full {}", lazy.objective, phi_star[i]));
        }
        if lazy.primal.xi.iter().any(|&v| v > 1e-9) {
            overflow += 1;
        }
    }
    Ok(format!("{} instances agree, {overflow} with active overflow", instances.len()))
}

fn feasibility(instances: &[EDInstance], proxies: &Proxies, seed: u64) -> Check {
    let mut r = stream(seed, "verify-feasibility", 0);
    let mut count = 0;
    for (i, inst) in instances.iter().enumerate() {
        let (x, y) = proxies.predict(inst).map_err(|e| format!("instance {i}: {e}"))?;
        report(check_primal_feasible(inst, &x, DEFAULT_FEAS_TOL), i, "primal")?;
        report(check_dual_feasible(inst, &y, DEFAULT_FEAS_TOL), i, "dual")?;
        // raw dispatches anywhere in the box, including the corners
        let net = &inst.network;
        let p: Array1<f64> = (0..net.n_generators())
            .map(|g| match r.random_range(0..4) {
                0 => net.p_lower[g],
                1 => net.p_upper[g],
                _ => r.random_range(net.p_lower[g]..=net.p_upper[g]),
            })
            .collect();
        let x = repair_dispatch(inst, p.view()).map_err(|e| format!("instance {i}: {e}"))?;
        report(check_primal_feasible(inst, &x, DEFAULT_FEAS_TOL), i, "repaired")?;
        let (lambda, pi) = random_prices(net, &mut r);
        let y = dual_complete_dll(lambda, &pi, inst).map_err(|e| format!("instance {i}: {e}"))?;
        report(check_dual_feasible(inst, &y, DEFAULT_FEAS_TOL), i, "completed dual")?;
        count += 4;
    }
    Ok(format!("{count} constructed points feasible"))
}

fn report(rep: certdispatch::ed_model::FeasibilityReport, i: usize, what: &str) -> Result<(), String> {
    match rep.first_violation() {
        None => Ok(()),
        Some(v) => Err(format!("instance {i}: {what} point violates {v:?}")),
    }
}

fn random_prices<R: Rng>(net: &Network, r: &mut R) -> (f64, Vec<f64>) {
    let c_max = net.cost.iter().cloned().fold(0.0, f64::max);
    let lambda = r.random_range(-0.5 * c_max..1.5 * c_max);
    let pi = (0..net.n_branches())
        .map(|_| if r.random_bool(0.5) { 0.0 } else { r.random_range(-2.0 * c_max..2.0 * c_max) })
        .collect();
    (lambda, pi)
}

fn dll_dominance(instances: &[EDInstance], seed: u64) -> Check {
    let mut r = stream(seed, "verify-dll", 0);
    let draws = instances.len().min(100);
    for i in 0..draws {
        let inst = &instances[i * instances.len() / draws];
        let (lambda, pi) = random_prices(&inst.network, &mut r);
        let dll = dual_complete_dll(lambda, &pi, inst).map_err(|e| e.to_string())?;
        let psi = dual_objective(inst, &dll).map_err(|e| e.to_string())?;
        let tol = 1e-9 * psi.abs().max(1.0);
        for mu_s in [1e-3, 1e-2, 1.0] {
            let s3l = dual_complete_s3l(lambda, &pi, inst, mu_s).map_err(|e| e.to_string())?;
            let other = dual_objective(inst, &s3l.dual).map_err(|e| e.to_string())?;
            if psi < other - tol {
                return Err(format!("draw {i}: DLL {psi} below S3L {other} (smoothing {mu_s})"));
            }
        }
        let other = dual_objective(inst, &perturbed(&dll, inst, &mut r)).map_err(|e| e.to_string())?;
        if psi < other - tol {
            return Err(format!("draw {i}: DLL {psi} below a perturbed completion {other}"));
        }
    }
    Ok(format!("{draws} price draws"))
}

/// Another feasible completion of the same (λ, π): shift both sides of each
/// split by a nonnegative amount.
fn perturbed<R: Rng>(y: &DualPoint, inst: &EDInstance, r: &mut R) -> DualPoint {
    let mut out = y.clone();
    for e in 0..out.pi.len() {
        let d = r.random_range(0.0..=out.y[e].clamp(0.0, 10.0)) / 2.0;
        out.mu_lower[e] += d;
        out.mu_upper[e] += d;
        out.y[e] -= 2.0 * d;
    }
    for g in 0..inst.network.n_generators() {
        let d = r.random_range(0.0..10.0);
        out.z_lower[g] += d;
        out.z_upper[g] += d;
    }
    out
}

fn rel_ok(a: f64, fd: f64, floor: f64) -> bool {
    (a - fd).abs() <= 1e-4 * fd.abs().max(floor)
}

fn gradients(net: &Arc<Network>, seed: u64) -> Check {
    let mut worst = 0.0f64;
    let mut track = |a: f64, fd: f64, floor: f64, what: String| -> Result<(), String> {
        if !rel_ok(a, fd, floor) {
            return Err(format!("{what}: analytic {a} finite difference {fd}"));
        }
        worst = worst.max((a - fd).abs() / fd.abs().max(floor));
        Ok(())
    };
    let normal = Normal::new(0.0, 1.0).unwrap();
    for s in 0..10u64 {
        let mut r = stream(seed, "verify-grad", s);

        // network with batch norm in training mode and mixed output bounds
        let bounds = OutputBounds {
            offset: Array1::from(vec![0.2, -0.1, 0.0]),
            scale: Array1::from(vec![1.5, 0.7, 2.0]),
            lower: vec![Some(-1.0), None, Some(0.0)],
            upper: vec![Some(2.0), Some(1.0), None],
        };
        let mut mlp = MLPParams::new(4, &[6, 5], bounds, 1.0, &mut r).map_err(|e| e.to_string())?;
        mlp.set_mode(Mode::Training);
        let x = Array2::from_shape_simple_fn((7, 4), || normal.sample(&mut r));
        let w = Array2::from_shape_simple_fn((7, 3), || normal.sample(&mut r));
        let loss = |m: &MLPParams| (&m.forward(x.view()).unwrap().0 * &w).sum();
        let (_, tape) = mlp.forward(x.view()).map_err(|e| e.to_string())?;
        let analytic = mlp.backward(tape, w.view()).map_err(|e| e.to_string())?.slices().concat();
        let floor = 1e-3 * analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let h = 1e-6;
        let mut k = 0;
        for g in 0..mlp.param_slices().len() {
            for i in 0..mlp.param_slices()[g].len() {
                let orig = mlp.param_slices()[g][i];
                mlp.param_slices_mut()[g][i] = orig + h;
                let up = loss(&mlp);
                mlp.param_slices_mut()[g][i] = orig - h;
                let dn = loss(&mlp);
                mlp.param_slices_mut()[g][i] = orig;
                track(analytic[k], (up - dn) / (2.0 * h), floor, format!("seed {s} parameter {k}"))?;
                k += 1;
            }
        }

        // double softplus on both sides of its midpoint
        for _ in 0..8 {
            let l = r.random_range(-5.0..5.0);
            let u = l + r.random_range(0.1..10.0);
            let t = r.random_range(l - 3.0..u + 3.0);
            let f = |v: f64| double_softplus(v, l, u).unwrap();
            let fd = (f(t + 1e-6) - f(t - 1e-6)) / 2e-6;
            track(double_softplus_grad(t, l, u), fd, 1e-3, format!("seed {s} double softplus at {t}"))?;
        }

        // proportional response, deficit and surplus branches
        let lo = net.p_lower.to_vec();
        let hi = net.p_upper.to_vec();
        let gvec: Vec<f64> = (0..lo.len()).map(|_| normal.sample(&mut r)).collect();
        let p: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| a + (b - a) * r.random_range(0.2..0.8)).collect();
        let sum: f64 = p.iter().sum();
        let (lo_sum, hi_sum): (f64, f64) = (lo.iter().sum(), hi.iter().sum());
        for d in [(sum + hi_sum) / 2.0, (sum + lo_sum) / 2.0] {
            let a = proportional_response_vjp(&p, d, &lo, &hi, &gvec).map_err(|e| e.to_string())?;
            let f = |q: &[f64]| -> f64 {
                let out = proportional_response(q, d, &lo, &hi).unwrap();
                out.iter().zip(&gvec).map(|(o, g)| o * g).sum()
            };
            for i in 0..p.len() {
                let h = 1e-6 * (hi[i] - lo[i]).max(1.0);
                let (mut up, mut dn) = (p.clone(), p.clone());
                up[i] += h;
                dn[i] -= h;
                track(a[i], (f(&up) - f(&dn)) / (2.0 * h), 1e-3, format!("seed {s} repair {i}"))?;
            }
        }

        // S3L completion
        let inst = EDInstance::new(net.clone(), net.reference_demand.to_vec()).map_err(|e| e.to_string())?;
        let (e, g) = (net.n_branches(), net.n_generators());
        let pi: Vec<f64> = (0..e).map(|_| 5.0 * normal.sample(&mut r)).collect();
        let lambda = 30.0 + 5.0 * normal.sample(&mut r);
        let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut r)).collect() };
        let upstream = DualPoint {
            lambda: 0.7,
            pi: v(e),
            mu_lower: v(e),
            mu_upper: v(e),
            z_lower: v(g),
            z_upper: v(g),
            y: v(e),
        };
        let mu_s = 0.5;
        let value = |lambda: f64, pi: &[f64]| -> f64 {
            let d = dual_complete_s3l(lambda, pi, &inst, mu_s).unwrap().dual;
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            // y = M − μ̲ − μ̄ stored at the scale of M loses the digits a finite
            // difference needs; −(μ̲ + μ̄) is the same up to a constant
            let y: Vec<f64> = d.mu_lower.iter().zip(&d.mu_upper).map(|(a, b)| -a - b).collect();
            upstream.lambda * d.lambda
                + dot(&upstream.pi, &d.pi)
                + dot(&upstream.mu_lower, &d.mu_lower)
                + dot(&upstream.mu_upper, &d.mu_upper)
                + dot(&upstream.z_lower, &d.z_lower)
                + dot(&upstream.z_upper, &d.z_upper)
                + dot(&upstream.y, &y)
        };
        let (gl, gp) = dual_complete_s3l_vjp(lambda, &pi, &inst, mu_s, &upstream).map_err(|e| e.to_string())?;
        track(gl, five_point(|t| value(lambda + t, &pi)), 1e-3, format!("seed {s} S3L lambda"))?;
        for k in 0..e {
            let fd = five_point(|t| {
                let mut a = pi.clone();
                a[k] += t;
                value(lambda, &a)
            });
            track(gp[k], fd, 1e-3, format!("seed {s} S3L pi {k}"))?;
        }
    }
    Ok(format!("10 seeds, worst relative error {worst:.2e}"))
}

/// Fourth-order central difference at 0; the smoothed splits curve on a
/// scale of 1e-3, too tight for the three-point rule.
fn five_point(f: impl Fn(f64) -> f64) -> f64 {
    let h = 1e-5;
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

/// Optimal pair with λ lowered and a nudged dispatch; the size of the nudge
/// decides which side of ε each instance lands on.
struct Nudged<'a> {
    optima: Vec<(PrimalPoint, f64)>,
    instances: &'a [EDInstance],
}

impl PrimalDualPredictor for Nudged<'_> {
    fn predict(&self, inst: &EDInstance) -> Result<(PrimalPoint, DualPoint), ProxyError> {
        let i = self
            .instances
            .iter()
            .position(|other| std::ptr::eq(other, inst))
            .expect("instance from the verified batch");
        let (x, lambda) = &self.optima[i];
        let pi = vec![0.0; inst.network.n_branches()];
        Ok((x.clone(), dual_complete_dll(*lambda, &pi, inst)?))
    }
}

fn guarantee(instances: &[EDInstance], proxies: &Proxies, phi_star: &[f64], seed: u64) -> Check {
    let mut r = stream(seed, "verify-guarantee", 0);
    let mut optima = Vec::with_capacity(instances.len());
    for inst in instances {
        let sol = solve_ed_full(inst).map_err(|e| e.to_string())?;
        let net = &inst.network;
        let shift: Array1<f64> = sol
            .primal
            .pg
            .iter()
            .enumerate()
            .map(|(g, p)| (p + r.random_range(-0.005..0.005) * (net.p_upper[g] - net.p_lower[g])).clamp(net.p_lower[g], net.p_upper[g]))
            .collect();
        let x = repair_dispatch(inst, shift.view()).map_err(|e| e.to_string())?;
        let lambda = sol.dual.lambda - r.random_range(0.0..0.05) * sol.dual.lambda.abs().max(1.0);
        optima.push((x, lambda));
    }
    let nudged = Nudged { optima, instances };
    let mut accepted = 0;
    let mut total = 0;
    for eps in [0.005, 0.01, 0.02] {
        for (i, inst) in instances.iter().enumerate() {
            for predictor in [proxies as &dyn PrimalDualPredictor, &nudged] {
                let s = certify_solve(inst, predictor, eps).map_err(|e| format!("instance {i}: {e}"))?;
                let phi = primal_objective(inst, &s.primal).map_err(|e| e.to_string())?;
                let true_gap = (phi - phi_star[i]) / phi_star[i].abs().max(1e-12);
                if true_gap > eps + 1e-7 {
                    return Err(format!("instance {i} at eps {eps}: true gap {true_gap:e}"));
                }
                if s.source == certdispatch::hybrid::Source::Proxy {
                    accepted += 1;
                }
                total += 1;
            }
        }
    }
    Ok(format!("{total} certified solves within tolerance, {accepted} accepted predictions"))
}

fn objectives(inst: &EDInstance, x: &PrimalPoint, y: &DualPoint) -> Result<(f64, f64), String> {
    let phi = primal_objective(inst, x).map_err(|e| e.to_string())?;
    let psi = dual_objective(inst, y).map_err(|e| e.to_string())?;
    Ok((phi, psi))
}
