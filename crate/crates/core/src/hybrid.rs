//! Certify-or-fallback inference and batch speedup accounting.
//!
//! A prediction is returned when its normalized duality gap is at most ε;
//! otherwise the exact lazy solver runs. Batch timing follows the ideal
//! makespan bound over `w` parallel solver workers.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ed_model::{dual_objective, normalized_gap_from, primal_objective, DualPoint, EDInstance, PrimalPoint};
use crate::lp_solver::{solve_ed_lazy, LPSolveResult, SolverError};
use crate::proxies::PrimalDualPredictor;

pub const DEFAULT_WORKERS: usize = 24;
/// Speedup levels for the inverse metric.
pub const SPEEDUP_TARGETS: [f64; 3] = [100.0, 500.0, 1000.0];

#[derive(Debug, Error)]
pub enum HybridError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("epsilon must be nonnegative, got {0}")]
    Epsilon(f64),
    #[error("workers must be at least 1")]
    Workers,
    #[error("synthetic timing has {got} entries for {expected} instances")]
    Timing { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Proxy,
    Fallback,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Proxy => "proxy",
            Source::Fallback => "fallback",
        }
    }
}

/// Which gap is compared against ε.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GapMode {
    #[default]
    Normalized,
    Absolute,
}

/// Certificate of a predicted pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub gap: f64,
    /// `None` when the dual objective is not positive.
    pub norm_gap: Option<f64>,
}

impl Certificate {
    pub fn of(inst: &EDInstance, x: &PrimalPoint, y: &DualPoint) -> Option<Certificate> {
        let phi = primal_objective(inst, x).ok()?;
        let psi = dual_objective(inst, y).ok()?;
        Some(Certificate {
            gap: phi - psi,
            norm_gap: normalized_gap_from(phi, psi).ok(),
        })
    }

    /// Accept when the selected gap is at most `eps` (ties accepted).
    pub fn accepts(&self, eps: f64, mode: GapMode) -> bool {
        match mode {
            GapMode::Normalized => self.norm_gap.is_some_and(|g| g <= eps),
            GapMode::Absolute => self.gap <= eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedSolution {
    pub primal: PrimalPoint,
    pub dual: DualPoint,
    /// Gap of the returned pair.
    pub gap: f64,
    pub norm_gap: Option<f64>,
    pub source: Source,
    pub epsilon: f64,
    /// Certificate of the prediction, whichever pair is returned.
    pub proxy_certificate: Option<Certificate>,
    /// Prediction plus certificate, in seconds.
    pub proxy_time: f64,
    /// Fallback solve, in seconds; zero on the proxy path.
    pub solver_time: f64,
}

fn pair_gaps(inst: &EDInstance, x: &PrimalPoint, y: &DualPoint) -> (f64, Option<f64>) {
    match Certificate::of(inst, x, y) {
        Some(c) => (c.gap, c.norm_gap),
        None => (f64::NAN, None),
    }
}

/// Predict, certify, and fall back to the exact solver when the certificate
/// exceeds `eps`. A failed prediction or a nonpositive dual objective also
/// triggers the fallback.
pub fn certify_solve<P: PrimalDualPredictor + ?Sized>(
    inst: &EDInstance,
    predictor: &P,
    eps: f64,
) -> Result<CertifiedSolution, HybridError> {
    certify_solve_with(inst, predictor, eps, GapMode::Normalized)
}

pub fn certify_solve_with<P: PrimalDualPredictor + ?Sized>(
    inst: &EDInstance,
    predictor: &P,
    eps: f64,
    mode: GapMode,
) -> Result<CertifiedSolution, HybridError> {
    if !(eps >= 0.0) {
        return Err(HybridError::Epsilon(eps));
    }
    let start = Instant::now();
    let predicted = predictor.predict(inst).ok();
    let cert = predicted.as_ref().and_then(|(x, y)| Certificate::of(inst, x, y));
    let proxy_time = start.elapsed().as_secs_f64();
    match (predicted, cert) {
        (Some((x, y)), Some(c)) if c.accepts(eps, mode) => Ok(CertifiedSolution {
            primal: x,
            dual: y,
            gap: c.gap,
            norm_gap: c.norm_gap,
            source: Source::Proxy,
            epsilon: eps,
            proxy_certificate: Some(c),
            proxy_time,
            solver_time: 0.0,
        }),
        (_, cert) => {
            let r = solve_ed_lazy(inst)?;
            Ok(fallback_solution(inst, r, eps, cert, proxy_time))
        }
    }
}

fn fallback_solution(
    inst: &EDInstance,
    r: LPSolveResult,
    eps: f64,
    cert: Option<Certificate>,
    proxy_time: f64,
) -> CertifiedSolution {
    let (gap, norm_gap) = pair_gaps(inst, &r.primal, &r.dual);
    CertifiedSolution {
        primal: r.primal,
        dual: r.dual,
        gap,
        norm_gap,
        source: Source::Fallback,
        epsilon: eps,
        proxy_certificate: cert,
        proxy_time,
        solver_time: r.wall_time.as_secs_f64(),
    }
}

/// `max(Σt / w, max t)`; zero for no tasks.
pub fn makespan(times: &[f64], workers: usize) -> Result<f64, HybridError> {
    if workers == 0 {
        return Err(HybridError::Workers);
    }
    let sum: f64 = times.iter().sum();
    let max = times.iter().cloned().fold(0.0, f64::max);
    Ok((sum / workers as f64).max(max))
}

/// Where per-instance times come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TimingModel {
    Measured,
    /// Fixed proxy and solver seconds per instance, replacing measurements.
    Synthetic { proxy: Vec<f64>, solver: Vec<f64> },
}

/// Everything needed to evaluate the hybrid at any ε: the prediction and
/// its certificate, and the exact solution, for every instance.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub predictions: Vec<Option<(PrimalPoint, DualPoint)>>,
    pub certificates: Vec<Option<Certificate>>,
    pub solutions: Vec<LPSolveResult>,
    pub proxy_times: Vec<f64>,
    pub solver_times: Vec<f64>,
}

/// Per-instance line of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    #[serde(rename = "instance_id")]
    pub id: usize,
    /// Certificate of the prediction (absolute and normalized).
    pub gap: f64,
    pub norm_gap: f64,
    pub source: Source,
    pub proxy_time: f64,
    /// Exact solve time of the instance, used for the baseline.
    pub solver_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub epsilon: f64,
    pub workers: usize,
    pub instances: Vec<InstanceSummary>,
    pub fallback_count: usize,
    pub inference_time: f64,
    pub fallback_makespan: f64,
    pub baseline_time: f64,
    pub hybrid_time: f64,
    pub speedup: f64,
}

/// Predict and certify every instance, and solve every instance exactly once
/// for the baseline.
pub fn evaluate_batch<P: PrimalDualPredictor + ?Sized>(
    instances: &[EDInstance],
    predictor: &P,
    timing: &TimingModel,
) -> Result<BatchEvaluation, HybridError> {
    if instances.is_empty() {
        return Err(HybridError::EmptyBatch);
    }
    if let TimingModel::Synthetic { proxy, solver } = timing {
        for got in [proxy.len(), solver.len()] {
            if got != instances.len() {
                return Err(HybridError::Timing {
                    expected: instances.len(),
                    got,
                });
            }
        }
    }
    let n = instances.len();
    let mut ev = BatchEvaluation {
        predictions: Vec::with_capacity(n),
        certificates: Vec::with_capacity(n),
        solutions: Vec::with_capacity(n),
        proxy_times: Vec::with_capacity(n),
        solver_times: Vec::with_capacity(n),
    };
    for inst in instances {
        let start = Instant::now();
        let predicted = predictor.predict(inst).ok();
        let cert = predicted.as_ref().and_then(|(x, y)| Certificate::of(inst, x, y));
        ev.proxy_times.push(start.elapsed().as_secs_f64());
        ev.predictions.push(predicted);
        ev.certificates.push(cert);
        let r = solve_ed_lazy(inst)?;
        ev.solver_times.push(r.wall_time.as_secs_f64());
        ev.solutions.push(r);
    }
    if let TimingModel::Synthetic { proxy, solver } = timing {
        ev.proxy_times = proxy.clone();
        ev.solver_times = solver.clone();
    }
    Ok(ev)
}

impl BatchEvaluation {
    pub fn len(&self) -> usize {
        self.solutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.solutions.is_empty()
    }

    pub fn accepted(&self, i: usize, eps: f64, mode: GapMode) -> bool {
        self.certificates[i].is_some_and(|c| c.accepts(eps, mode))
    }

    /// The pair the hybrid returns for instance `i` at `eps`.
    pub fn solution(&self, instances: &[EDInstance], i: usize, eps: f64) -> CertifiedSolution {
        let inst = &instances[i];
        let cert = self.certificates[i];
        if self.accepted(i, eps, GapMode::Normalized) {
            let (x, y) = self.predictions[i].clone().expect("accepted prediction exists");
            let c = cert.unwrap();
            CertifiedSolution {
                primal: x,
                dual: y,
                gap: c.gap,
                norm_gap: c.norm_gap,
                source: Source::Proxy,
                epsilon: eps,
                proxy_certificate: cert,
                proxy_time: self.proxy_times[i],
                solver_time: 0.0,
            }
        } else {
            let mut s = fallback_solution(inst, self.solutions[i].clone(), eps, cert, self.proxy_times[i]);
            s.solver_time = self.solver_times[i];
            s
        }
    }

    pub fn report(&self, eps: f64, workers: usize) -> Result<BatchReport, HybridError> {
        report_from_parts(
            &self.norm_gaps(),
            &self.abs_gaps(),
            &self.proxy_times,
            &self.solver_times,
            eps,
            workers,
        )
    }

    fn norm_gaps(&self) -> Vec<f64> {
        self.certificates
            .iter()
            .map(|c| c.and_then(|c| c.norm_gap).unwrap_or(f64::INFINITY))
            .collect()
    }

    fn abs_gaps(&self) -> Vec<f64> {
        self.certificates.iter().map(|c| c.map_or(f64::INFINITY, |c| c.gap)).collect()
    }
}

/// Report from cached per-instance certificates and times. Infinite
/// normalized gaps mark predictions without a valid certificate.
pub fn report_from_parts(
    norm_gaps: &[f64],
    gaps: &[f64],
    proxy_times: &[f64],
    solver_times: &[f64],
    eps: f64,
    workers: usize,
) -> Result<BatchReport, HybridError> {
    if norm_gaps.is_empty() {
        return Err(HybridError::EmptyBatch);
    }
    if !(eps >= 0.0) {
        return Err(HybridError::Epsilon(eps));
    }
    let n = norm_gaps.len();
    for got in [gaps.len(), proxy_times.len(), solver_times.len()] {
        if got != n {
            return Err(HybridError::Timing { expected: n, got });
        }
    }
    let mut instances = Vec::with_capacity(n);
    let mut fallback_times = Vec::new();
    for i in 0..n {
        let source = if norm_gaps[i] <= eps { Source::Proxy } else { Source::Fallback };
        if source == Source::Fallback {
            fallback_times.push(solver_times[i]);
        }
        instances.push(InstanceSummary {
            id: i,
            gap: gaps[i],
            norm_gap: norm_gaps[i],
            source,
            proxy_time: proxy_times[i],
            solver_time: solver_times[i],
        });
    }
    let inference_time: f64 = proxy_times.iter().sum();
    let fallback_makespan = makespan(&fallback_times, workers)?;
    let baseline_time = makespan(solver_times, workers)?;
    let hybrid_time = inference_time + fallback_makespan;
    Ok(BatchReport {
        epsilon: eps,
        workers,
        fallback_count: fallback_times.len(),
        instances,
        inference_time,
        fallback_makespan,
        baseline_time,
        hybrid_time,
        speedup: baseline_time / hybrid_time,
    })
}

/// Run the hybrid over a batch at one tolerance.
pub fn batch_solve<P: PrimalDualPredictor + ?Sized>(
    instances: &[EDInstance],
    predictor: &P,
    eps: f64,
    timing: &TimingModel,
    workers: usize,
) -> Result<BatchReport, HybridError> {
    evaluate_batch(instances, predictor, timing)?.report(eps, workers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub eps: f64,
    pub speedup: f64,
    pub fallback_fraction: f64,
    /// Largest certified gap among accepted predictions; zero when none.
    pub max_certified_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupCurve {
    pub rows: Vec<CurveRow>,
    /// Smallest ε reaching each speedup target, if any does.
    pub inverse: Vec<(f64, Option<f64>)>,
}

/// Speedup as a function of ε over a grid, from one cached report (any ε).
pub fn speedup_curve(base: &BatchReport, eps_grid: &[f64]) -> Result<SpeedupCurve, HybridError> {
    let norm: Vec<f64> = base.instances.iter().map(|r| r.norm_gap).collect();
    let gaps: Vec<f64> = base.instances.iter().map(|r| r.gap).collect();
    let pt: Vec<f64> = base.instances.iter().map(|r| r.proxy_time).collect();
    let st: Vec<f64> = base.instances.iter().map(|r| r.solver_time).collect();
    let n = norm.len() as f64;
    let at = |eps: f64| report_from_parts(&norm, &gaps, &pt, &st, eps, base.workers);
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let r = at(eps)?;
        let max_certified_gap = norm.iter().cloned().filter(|&g| g <= eps).fold(0.0, f64::max);
        rows.push(CurveRow {
            eps,
            speedup: r.speedup,
            fallback_fraction: r.fallback_count as f64 / n,
            max_certified_gap,
        });
    }
    // N(ε) only changes where ε crosses a certified gap, so those values
    // (and 0) are the only candidates for the smallest ε.
    let mut candidates: Vec<f64> = norm.iter().cloned().filter(|g| g.is_finite()).map(|g| g.max(0.0)).collect();
    candidates.push(0.0);
    candidates.sort_by(|a, b| a.total_cmp(b));
    candidates.dedup();
    let mut speedups = Vec::with_capacity(candidates.len());
    for &c in &candidates {
        speedups.push(at(c)?.speedup);
    }
    let inverse = SPEEDUP_TARGETS
        .iter()
        .map(|&t| (t, candidates.iter().zip(&speedups).find(|(_, &s)| s >= t).map(|(&c, _)| c)))
        .collect();
    Ok(SpeedupCurve { rows, inverse })
}

pub const SAMPLES_HEADER: &str = "instance_id,gap,norm_gap,source,proxy_time,solver_time";
pub const CURVE_HEADER: &str = "eps,N,fallback_fraction,max_certified_gap";

fn write_rows<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

pub fn samples_csv(report: &BatchReport) -> String {
    write_rows(&report.instances)
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("expected header {expected:?}, found {found:?}")]
    Header { expected: &'static str, found: String },
    #[error(transparent)]
    Parse(#[from] csv::Error),
    #[error(transparent)]
    Report(#[from] HybridError),
}

/// Parse a per-sample CSV back into a report at the given ε and workers.
pub fn report_from_samples_csv(text: &str, eps: f64, workers: usize) -> Result<BatchReport, CsvError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let found = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if found != SAMPLES_HEADER {
        return Err(CsvError::Header {
            expected: SAMPLES_HEADER,
            found,
        });
    }
    let rows: Vec<InstanceSummary> = rdr.deserialize().collect::<Result<_, _>>()?;
    let col = |f: fn(&InstanceSummary) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    Ok(report_from_parts(
        &col(|r| r.norm_gap),
        &col(|r| r.gap),
        &col(|r| r.proxy_time),
        &col(|r| r.solver_time),
        eps,
        workers,
    )?)
}

#[derive(Serialize)]
struct CurveCsvRow {
    eps: f64,
    #[serde(rename = "N")]
    speedup: f64,
    fallback_fraction: f64,
    max_certified_gap: f64,
}

pub fn curve_csv(curve: &SpeedupCurve) -> String {
    write_rows(curve.rows.iter().map(|r| CurveCsvRow {
        eps: r.eps,
        speedup: r.speedup,
        fallback_fraction: r.fallback_fraction,
        max_certified_gap: r.max_certified_gap,
    }))
}

/// Self-contained SVG line plot of N against ε.
pub fn curve_svg(curve: &SpeedupCurve) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let rows = &curve.rows;
    let x_max = rows.iter().map(|r| r.eps).fold(0.0, f64::max).max(1e-12);
    let y_max = rows.iter().map(|r| r.speedup).filter(|v| v.is_finite()).fold(0.0, f64::max).max(1e-12) * 1.1;
    let px = |e: f64| pad + (w - 2.0 * pad) * e / x_max;
    let py = |n: f64| h - pad - (h - 2.0 * pad) * n / y_max;
    let points: Vec<String> = rows
        .iter()
        .filter(|r| r.speedup.is_finite())
        .map(|r| format!("{:.2},{:.2}", px(r.eps), py(r.speedup)))
        .collect();
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    )
    .unwrap();
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{:.3}%</text>"#,
            px(f * x_max),
            h - pad + 16.0,
            100.0 * f * x_max
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{:.1}x</text>"#,
            pad - 6.0,
            py(f * y_max) + 4.0,
            f * y_max
        )
        .unwrap();
    }
    writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">optimality tolerance</text>"#, w / 2.0, h - 15.0).unwrap();
    writeln!(s, r#"<text x="15" y="{}" font-size="13" transform="rotate(-90 15 {})" text-anchor="middle">speedup N</text>"#, h / 2.0, h / 2.0).unwrap();
    s.push_str("</svg>\n");
    s
}

/// Default ε grid: 0 to 5% in steps of 0.1%.
pub fn default_eps_grid() -> Vec<f64> {
    (0..=50).map(|k| k as f64 / 1000.0).collect()
}
