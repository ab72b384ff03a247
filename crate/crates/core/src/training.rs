//! Label-free joint training of the primal and dual proxies.
//!
//! The loss is the hinge of the midpoint-normalised duality gap, with the
//! midpoint treated as a constant when differentiating. No instance is ever
//! solved: the gap needs only the two predicted points.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ed_model::{
    hinge_gap, normalized_gap_from, primal_objective, dual_objective, EDInstance, ModelError,
    PrimalPoint,
};
use crate::grid::{Grid, Network};
use crate::nn::{adam_step, AdamState, Grads, MLPParams, Mode, NnError, Tape};
use crate::proxies::{
    dual_complete_s3l, dual_complete_s3l_vjp, dual_objective_weights, proportional_response,
    proportional_response_vjp, InputScaler, PrimalDualPredictor, Proxies, ProxyError,
    DEFAULT_SMOOTHING,
};
use crate::rng;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("reference demand is zero everywhere")]
    ZeroReference,
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite training loss at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Option<Box<Checkpoint>>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub global_scale_range: (f64, f64),
    pub per_load_noise_range: (f64, f64),
    pub capacity_margin: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            global_scale_range: (0.8, 1.2),
            per_load_noise_range: (-0.05, 0.05),
            capacity_margin: 0.98,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let (a, b) = self.global_scale_range;
        let (c, d) = self.per_load_noise_range;
        if !(a <= b && a >= 0.0) {
            return Err(TrainError::Config("global scale range must be ordered and nonnegative".into()));
        }
        if !(c <= d && c > -1.0) {
            return Err(TrainError::Config("per-load noise range must be ordered and above -1".into()));
        }
        if !(self.capacity_margin > 0.0 && self.capacity_margin <= 1.0) {
            return Err(TrainError::Config("capacity margin must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub eps_target: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_samples_per_epoch: usize,
    pub val_samples: usize,
    pub lr_init: f64,
    pub lr_floor: f64,
    pub lr_factor: f64,
    pub patience_epochs: usize,
    pub min_improvement: f64,
    pub seed: u64,
    pub smoothing: f64,
    pub hidden: Vec<usize>,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eps_target: 0.0,
            epochs: 5000,
            batch_size: 1024,
            train_samples_per_epoch: 20480,
            val_samples: 10240,
            lr_init: 1e-3,
            lr_floor: 1e-5,
            lr_factor: 0.95,
            patience_epochs: 50,
            min_improvement: 1e-4,
            seed: 0,
            smoothing: DEFAULT_SMOOTHING,
            hidden: vec![256; 4],
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.eps_target >= 0.0) {
            return bad("eps_target must be nonnegative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.val_samples == 0 {
            return bad("epochs, batch size and validation size must be positive");
        }
        if self.batch_size > self.train_samples_per_epoch {
            return bad("batch size exceeds samples per epoch");
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_init) {
            return bad("need 0 < lr_floor <= lr_init");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad("lr_factor must lie in (0, 1]");
        }
        if !(self.min_improvement >= 0.0) {
            return bad("min_improvement must be nonnegative");
        }
        if !(self.smoothing > 0.0) {
            return bad("smoothing must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        self.sampler.validate()
    }

    /// sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn draw_demand<R: Rng + ?Sized>(network: &Network, cfg: &SamplerConfig, rng: &mut R) -> (f64, Vec<f64>) {
    let (a, b) = cfg.global_scale_range;
    let (c, d) = cfg.per_load_noise_range;
    let gamma = if a < b { Uniform::new(a, b).unwrap().sample(rng) } else { a };
    let noise = (c < d).then(|| Uniform::new(c, d).unwrap());
    let mut pd: Vec<f64> = network
        .reference_demand
        .iter()
        .map(|&r| {
            let u = noise.as_ref().map_or(c, |n| n.sample(rng));
            gamma * (1.0 + u) * r
        })
        .collect();
    let total: f64 = pd.iter().sum();
    let cap = cfg.capacity_margin * network.total_capacity();
    let floor = network.total_min_output();
    let target = if total > cap {
        Some(cap)
    } else if total < floor {
        Some(floor)
    } else {
        None
    };
    if let Some(t) = target {
        if total > 0.0 {
            pd.iter_mut().for_each(|v| *v *= t / total);
        }
    }
    (gamma, pd)
}

/// Draw `n` instances from an explicit generator.
pub fn sample_demands_with<R: Rng + ?Sized>(
    network: &Arc<Network>,
    cfg: &SamplerConfig,
    n: usize,
    rng: &mut R,
) -> Result<Vec<EDInstance>, TrainError> {
    cfg.validate()?;
    if network.reference_demand.iter().all(|&d| d == 0.0) {
        return Err(TrainError::ZeroReference);
    }
    (0..n)
        .map(|_| Ok(EDInstance::new(network.clone(), draw_demand(network, cfg, rng).1)?))
        .collect()
}

/// `pd = γ(1 + u) ⊙ pd_ref`, rescaled into `[eᵀp̲, margin · eᵀp̄]`.
pub fn sample_demands(
    network: &Arc<Network>,
    cfg: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<EDInstance>, TrainError> {
    if n == 0 {
        return Err(TrainError::Config("sample count must be positive".into()));
    }
    sample_demands_with(network, cfg, n, &mut rng::stream(seed, "sampler", 0))
}

/// Loss value and per-network gradients for one batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub primal: Grads,
    pub dual: Grads,
    /// Midpoint denominators, one per sample, as used for the gradient.
    pub denominators: Vec<f64>,
    /// Samples whose S3L completion had a negative `y` somewhere.
    pub negative_y: usize,
}

struct Evaluation {
    loss: f64,
    denominators: Vec<f64>,
    negative_y: usize,
    primal_tape: Tape,
    dual_tape: Tape,
    primal_upstream: Array2<f64>,
    dual_upstream: Array2<f64>,
}

/// Midpoint `(φ + ψ)/2`, kept away from zero. A nonpositive midpoint only
/// happens when ψ is badly negative, where its magnitude is a fair scale.
pub fn midpoint_denominator(phi: f64, psi: f64) -> f64 {
    (0.5 * (phi + psi)).abs().max(1e-6 * phi.abs().max(1.0))
}

/// Gradient of φ with respect to the dispatch: `c + M (ΦA_g)ᵀ sign(overflow)`.
fn primal_objective_grad(inst: &EDInstance, x: &PrimalPoint) -> Vec<f64> {
    let net = &inst.network;
    let m = net.penalty();
    let s: ndarray::Array1<f64> = x
        .pf
        .iter()
        .enumerate()
        .map(|(e, &f)| {
            if f > net.f_upper[e] {
                m
            } else if f < net.f_lower[e] {
                -m
            } else {
                0.0
            }
        })
        .collect();
    (&net.cost + &net.phi_g.t().dot(&s)).to_vec()
}

fn evaluate(
    proxies: &Proxies,
    batch: &[EDInstance],
    eps: f64,
    frozen: Option<&[f64]>,
) -> Result<Evaluation, TrainError> {
    if batch.is_empty() {
        return Err(ProxyError::EmptyBatch.into());
    }
    let net = &batch[0].network;
    let (g, e) = (net.n_generators(), net.n_branches());
    let x = proxies.scaler.features(batch)?;
    let (p_tilde, primal_tape) = proxies.primal.net.forward(x.view())?;
    let (raw_dual, dual_tape) = proxies.dual.net.forward(x.view())?;
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let mu_s = proxies.dual.smoothing;

    let mut primal_upstream = Array2::zeros((b, g));
    let mut dual_upstream = Array2::zeros((b, 1 + e));
    let mut denominators = Vec::with_capacity(b);
    let mut loss = 0.0;
    let mut negative_y = 0;
    for (i, inst) in batch.iter().enumerate() {
        let pt = p_tilde.row(i).to_vec();
        let lo = inst.network.p_lower.as_slice().unwrap();
        let hi = inst.network.p_upper.as_slice().unwrap();
        let d = inst.total_demand();
        let pg = proportional_response(&pt, d, lo, hi)?;
        let xp = PrimalPoint::from_dispatch(inst, pg);
        let lambda = raw_dual[[i, 0]];
        let pi: Vec<f64> = raw_dual.row(i).iter().skip(1).cloned().collect();
        let s3l = dual_complete_s3l(lambda, &pi, inst, mu_s)?;
        if !s3l.negative_y.is_empty() {
            negative_y += 1;
        }
        let phi = primal_objective(inst, &xp)?;
        let psi = dual_objective(inst, &s3l.dual)?;
        let den = match frozen {
            Some(f) => f[i],
            None => midpoint_denominator(phi, psi),
        };
        denominators.push(den);
        let value = hinge_gap((phi - psi) / den, eps);
        loss += value * inv_b;
        if value > 0.0 {
            let w = inv_b / den;
            let gphi = primal_objective_grad(inst, &xp);
            let gphi: Vec<f64> = gphi.iter().map(|v| v * w).collect();
            let gp = proportional_response_vjp(&pt, d, lo, hi, &gphi)?;
            primal_upstream.row_mut(i).assign(&ndarray::ArrayView1::from(&gp[..]));
            let mut up = dual_objective_weights(inst);
            scale_dual(&mut up, -w);
            let (gl, gpi) = dual_complete_s3l_vjp(lambda, &pi, inst, mu_s, &up)?;
            dual_upstream[[i, 0]] = gl;
            for k in 0..e {
                dual_upstream[[i, 1 + k]] = gpi[k];
            }
        }
    }
    Ok(Evaluation {
        loss,
        denominators,
        negative_y,
        primal_tape,
        dual_tape,
        primal_upstream,
        dual_upstream,
    })
}

fn scale_dual(y: &mut crate::ed_model::DualPoint, w: f64) {
    y.lambda *= w;
    for v in [&mut y.pi, &mut y.mu_lower, &mut y.mu_upper, &mut y.z_lower, &mut y.z_upper, &mut y.y] {
        v.iter_mut().for_each(|x| *x *= w);
    }
}

fn finish(proxies: &Proxies, ev: Evaluation) -> Result<LossOutput, TrainError> {
    let primal = proxies.primal.net.backward(ev.primal_tape, ev.primal_upstream.view())?;
    let dual = proxies.dual.net.backward(ev.dual_tape, ev.dual_upstream.view())?;
    Ok(LossOutput {
        loss: ev.loss,
        primal,
        dual,
        denominators: ev.denominators,
        negative_y: ev.negative_y,
    })
}

/// Mean hinge of the midpoint-normalised gap over the batch, with gradients.
/// Uses the nets' current mode; training uses batch statistics.
pub fn training_loss(batch: &[EDInstance], proxies: &Proxies, eps: f64) -> Result<LossOutput, TrainError> {
    training_loss_with(batch, proxies, eps, None)
}

/// As [`training_loss`], optionally with the denominators held at given values.
pub fn training_loss_with(
    batch: &[EDInstance],
    proxies: &Proxies,
    eps: f64,
    denominators: Option<&[f64]>,
) -> Result<LossOutput, TrainError> {
    if let Some(d) = denominators {
        if d.len() != batch.len() {
            return Err(TrainError::Config("one denominator per sample required".into()));
        }
    }
    let ev = evaluate(proxies, batch, eps, denominators)?;
    if !ev.loss.is_finite() {
        return Err(TrainError::Diverged { epoch: 0, last_good: None });
    }
    finish(proxies, ev)
}

/// One optimizer step on both nets. Returns the batch loss before the step.
pub fn training_step(
    proxies: &mut Proxies,
    batch: &[EDInstance],
    eps: f64,
    primal_state: &mut AdamState,
    dual_state: &mut AdamState,
) -> Result<(f64, usize), TrainError> {
    let ev = evaluate(proxies, batch, eps, None)?;
    if !ev.loss.is_finite() {
        return Err(TrainError::Diverged { epoch: 0, last_good: None });
    }
    proxies.primal.net.commit_batch_stats(&ev.primal_tape);
    proxies.dual.net.commit_batch_stats(&ev.dual_tape);
    let out = finish(proxies, ev)?;
    adam_step(&mut proxies.primal.net, &out.primal, primal_state)?;
    adam_step(&mut proxies.dual.net, &out.dual, dual_state)?;
    Ok((out.loss, out.negative_y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationResult {
    /// Mean proper normalised gap; infinite when any certificate failed.
    pub mean_gap: f64,
    /// Mean over the samples that did produce a certificate.
    pub finite_mean: f64,
    pub invalid_count: usize,
    pub gaps: Vec<Option<f64>>,
}

impl ValidationResult {
    pub fn from_gaps(gaps: Vec<Option<f64>>) -> ValidationResult {
        let finite: Vec<f64> = gaps.iter().flatten().cloned().collect();
        let invalid_count = gaps.len() - finite.len();
        let finite_mean = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let mean_gap = if invalid_count > 0 { f64::INFINITY } else { finite_mean };
        ValidationResult {
            mean_gap,
            finite_mean,
            invalid_count,
            gaps,
        }
    }
}

/// Mean proper normalised gap of the predictor over a fixed set.
pub fn validate<P: PrimalDualPredictor + ?Sized>(val: &[EDInstance], predictor: &P) -> ValidationResult {
    let pairs = predictor.predict_batch(val);
    let gaps = match pairs {
        Ok(pairs) => val
            .iter()
            .zip(pairs)
            .map(|(inst, (x, y))| {
                let phi = primal_objective(inst, &x).ok()?;
                let psi = dual_objective(inst, &y).ok()?;
                normalized_gap_from(phi, psi).ok()
            })
            .collect(),
        Err(_) => vec![None; val.len()],
    };
    ValidationResult::from_gaps(gaps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub grid: Grid,
    pub config: TrainConfig,
    pub config_hash: String,
    pub proxies: Proxies,
    /// `None` until some epoch produced a finite validation gap.
    pub best_val_gap: Option<f64>,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Checkpoint, TrainError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let ck: Checkpoint = serde_path_to_error::deserialize(de)
            .map_err(|e| TrainError::Format(format!("{}: {}", e.path(), e.inner())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(TrainError::Format(format!("unsupported version {}", ck.version)));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(TrainError::Format("config hash mismatch".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Checkpoint, TrainError> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }

    /// Proxies ready for inference.
    pub fn inference_proxies(&self) -> Proxies {
        let mut p = self.proxies.clone();
        p.set_mode(Mode::Inference);
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_gap: f64,
    pub lr: f64,
    pub wall_time: f64,
    pub negative_y: usize,
    pub invalid_val: usize,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_gap,lr,wall_time";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{:.6}", self.epoch, self.train_loss, self.val_gap, self.lr, self.wall_time)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Fresh proxies for a network, with the input scaler fitted on a dedicated
/// sample.
pub fn init_proxies(network: &Arc<Network>, cfg: &TrainConfig) -> Result<Proxies, TrainError> {
    let fit_sample = sample_demands_with(
        network,
        &cfg.sampler,
        cfg.train_samples_per_epoch,
        &mut rng::stream(cfg.seed, "scaler", 0),
    )?;
    let demands: Vec<Vec<f64>> = fit_sample.into_iter().map(|i| i.pd).collect();
    let scaler = InputScaler::fit(network, &demands);
    Ok(Proxies::new(
        network,
        &cfg.hidden,
        cfg.smoothing,
        scaler,
        &mut rng::stream(cfg.seed, "init", 0),
    )?)
}

/// Joint training with per-epoch resampling, best-so-far LR scheduling and
/// checkpointing on the best validation gap. Every epoch is appended to
/// `log` as a CSV row when given.
pub fn train_joint(
    network: Arc<Network>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let val = sample_demands_with(&network, &cfg.sampler, cfg.val_samples, &mut rng::stream(cfg.seed, "validation", 0))?;
    let mut proxies = init_proxies(&network, cfg)?;
    let mut primal_state = AdamState::new(&proxies.primal.net, cfg.lr_init);
    let mut dual_state = AdamState::new(&proxies.dual.net, cfg.lr_init);
    let hash = cfg.hash();
    let snapshot = |p: &Proxies, gap: Option<f64>, epoch: usize| Checkpoint {
        version: CHECKPOINT_VERSION,
        grid: network.grid.clone(),
        config: cfg.clone(),
        config_hash: hash.clone(),
        proxies: p.clone(),
        best_val_gap: gap,
        best_epoch: epoch,
    };
    let mut best = snapshot(&proxies, None, 0);
    let mut reference = f64::INFINITY;
    let mut stale = 0;
    let mut lr = cfg.lr_init;
    let mut history = Vec::with_capacity(cfg.epochs);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        proxies.set_mode(Mode::Training);
        let train = sample_demands_with(
            &network,
            &cfg.sampler,
            cfg.train_samples_per_epoch,
            &mut rng::stream(cfg.seed, "train", epoch as u64),
        )?;
        let mut total = 0.0;
        let mut negative_y = 0;
        for chunk in train.chunks(cfg.batch_size) {
            primal_state.lr = lr;
            dual_state.lr = lr;
            match training_step(&mut proxies, chunk, cfg.eps_target, &mut primal_state, &mut dual_state) {
                Ok((l, neg)) => {
                    total += l * chunk.len() as f64;
                    negative_y += neg;
                }
                Err(TrainError::Diverged { .. }) | Err(TrainError::Nn(NnError::NonFinite)) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        last_good: Some(Box::new(best)),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = total / train.len() as f64;

        let mut eval = proxies.clone();
        eval.set_mode(Mode::Inference);
        let v = validate(&val, &eval);

        if v.mean_gap < best.best_val_gap.unwrap_or(f64::INFINITY) {
            best = snapshot(&eval, Some(v.mean_gap), epoch);
        }
        if v.mean_gap.is_finite() && v.mean_gap <= reference - cfg.min_improvement {
            reference = v.mean_gap;
            stale = 0;
        } else {
            if v.mean_gap < reference {
                reference = v.mean_gap;
            }
            stale += 1;
            if stale >= cfg.patience_epochs {
                lr = (lr * cfg.lr_factor).max(cfg.lr_floor);
                stale = 0;
            }
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_gap: v.mean_gap,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
            negative_y,
            invalid_val: v.invalid_count,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", rec.csv_row())?;
        }
        history.push(rec);
    }
    Ok(TrainOutcome { checkpoint: best, history })
}

/// Parameters of a network flattened in [`MLPParams::param_slices`] order.
pub fn flat_params(net: &MLPParams) -> Vec<f64> {
    net.param_slices().concat()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::ed_model::{check_dual_feasible, DualPoint, DEFAULT_FEAS_TOL};
    use crate::grid::{Branch, Generator, Load};
    use crate::lp_solver::{self, solve_ed_full};

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
            loads: vec![Load { bus: 2, demand: 8.0 }],
            slack: 1,
            penalty: 1000.0,
        };
        Arc::new(Network::new(grid).unwrap())
    }

    fn small_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            train_samples_per_epoch: 64,
            val_samples: 32,
            hidden: vec![8, 8],
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_match_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 1024);
        assert_eq!((c.lr_init, c.lr_floor, c.lr_factor), (1e-3, 1e-5, 0.95));
        assert_eq!(c.patience_epochs, 50);
        assert_eq!(c.min_improvement, 1e-4);
        assert_eq!(c.epochs, 5000);
        assert_eq!(c.train_samples_per_epoch, 20480);
        assert_eq!(c.val_samples, 10240);
        assert_eq!(c.hidden, vec![256; 4]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg(0);
        c.batch_size = 1000;
        assert!(c.validate().is_err());
        let mut c = small_cfg(0);
        c.lr_floor = 1.0;
        assert!(c.validate().is_err());
        let mut c = small_cfg(0);
        c.sampler.global_scale_range = (1.2, 0.8);
        assert!(c.validate().is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_bounded() {
        let net = toy();
        let cfg = SamplerConfig::default();
        let a = sample_demands(&net, &cfg, 500, 7).unwrap();
        let b = sample_demands(&net, &cfg, 500, 7).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.pd == y.pd));
        let ref_total = net.reference_demand.sum();
        let cap = cfg.capacity_margin * net.total_capacity();
        for inst in &a {
            let t = inst.total_demand();
            assert!(t <= cap + 1e-9);
            assert!(t >= 0.8 * 0.95 * ref_total - 1e-9);
            assert!(inst.balance_feasible());
        }
        assert!(sample_demands(&net, &cfg, 0, 7).is_err());
    }

    #[test]
    fn sampler_rescales_into_capacity() {
        let net = toy();
        let cfg = SamplerConfig {
            global_scale_range: (3.0, 3.0),
            per_load_noise_range: (0.0, 0.0),
            capacity_margin: 0.9,
        };
        let s = sample_demands(&net, &cfg, 3, 1).unwrap();
        for inst in s {
            assert!((inst.total_demand() - 0.9 * net.total_capacity()).abs() < 1e-9);
        }
    }

    #[test]
    fn sampler_scale_mean() {
        let net = toy();
        let cfg = SamplerConfig::default();
        let mut r = rng::stream(3, "mc", 0);
        let n = 100_000;
        let mean = (0..n).map(|_| draw_demand(&net, &cfg, &mut r).0).sum::<f64>() / n as f64;
        // uniform on (0.8, 1.2): σ = 0.4/√12
        let sigma = 0.4 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn zero_reference_demand_is_rejected() {
        let mut grid = cases::toy14();
        grid.loads.iter_mut().for_each(|l| l.demand = 0.0);
        let net = Arc::new(Network::new(grid).unwrap());
        assert!(matches!(
            sample_demands(&net, &SamplerConfig::default(), 4, 0),
            Err(TrainError::ZeroReference)
        ));
    }

    fn batch_for(net: &Arc<Network>, totals: &[f64]) -> Vec<EDInstance> {
        totals.iter().map(|&t| EDInstance::new(net.clone(), vec![t]).unwrap()).collect()
    }

    fn toy_proxies(net: &Arc<Network>, seed: u64) -> Proxies {
        let demands: Vec<Vec<f64>> = (0..10).map(|k| vec![4.0 + k as f64]).collect();
        let scaler = InputScaler::fit(net, &demands);
        Proxies::new(net, &[6, 5], 0.5, scaler, &mut rng::stream(seed, "init", 0)).unwrap()
    }

    #[test]
    fn eps_zero_loss_is_mean_midpoint_gap() {
        let net = two_gen();
        let proxies = toy_proxies(&net, 1);
        let batch = batch_for(&net, &[5.0, 8.0, 12.0, 15.0]);
        let out = training_loss(&batch, &proxies, 0.0).unwrap();
        let x = crate::proxies::primal_predict_batch(&proxies.primal, &proxies.scaler, &batch).unwrap();
        let raw = crate::proxies::dual_outputs_batch(&proxies.dual, &proxies.scaler, &batch).unwrap();
        let mut expected = 0.0;
        for ((inst, x), (l, pi)) in batch.iter().zip(&x).zip(&raw) {
            let y = dual_complete_s3l(*l, pi, inst, 0.5).unwrap().dual;
            let phi = primal_objective(inst, x).unwrap();
            let psi = dual_objective(inst, &y).unwrap();
            expected += crate::ed_model::midpoint_gap_from(phi, psi).unwrap() / 4.0;
        }
        assert!((out.loss - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn flat_hinge_gives_zero_loss_and_gradients() {
        let net = two_gen();
        let proxies = toy_proxies(&net, 2);
        let batch = batch_for(&net, &[5.0, 8.0, 12.0]);
        let out = training_loss(&batch, &proxies, 1e6).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.primal.is_zero());
        assert!(out.dual.is_zero());
    }

    fn frozen_loss(batch: &[EDInstance], p: &Proxies, eps: f64, dens: &[f64]) -> f64 {
        training_loss_with(batch, p, eps, Some(dens)).unwrap().loss
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let net = two_gen();
        for seed in 0..5 {
            let proxies = toy_proxies(&net, seed);
            // totals on both sides of the congestion threshold
            let batch = batch_for(&net, &[3.0, 7.5, 11.0, 16.0, 19.0]);
            for eps in [0.0, 0.05] {
                let out = training_loss(&batch, &proxies, eps).unwrap();
                let dens = out.denominators.clone();
                let scale_of = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let h = 1e-6;
                for (which, analytic) in [(0, out.primal.slices().concat()), (1, out.dual.slices().concat())] {
                    let mut p = proxies.clone();
                    let n = analytic.len();
                    // components far below the largest one are compared absolutely
                    let floor = 1e-3 * scale_of(&analytic);
                    for k in 0..n {
                        let set = |p: &mut Proxies, v: f64| {
                            let net = if which == 0 { &mut p.primal.net } else { &mut p.dual.net };
                            let mut i = k;
                            for s in net.param_slices_mut() {
                                if i < s.len() {
                                    s[i] = v;
                                    return;
                                }
                                i -= s.len();
                            }
                        };
                        let orig = if which == 0 { flat_params(&p.primal.net)[k] } else { flat_params(&p.dual.net)[k] };
                        set(&mut p, orig + h);
                        let up = frozen_loss(&batch, &p, eps, &dens);
                        set(&mut p, orig - h);
                        let down = frozen_loss(&batch, &p, eps, &dens);
                        set(&mut p, orig);
                        let fd = (up - down) / (2.0 * h);
                        assert!(
                            (analytic[k] - fd).abs() <= 1e-4 * fd.abs().max(floor),
                            "seed {seed} eps {eps} net {which} param {k}: {} vs {fd}",
                            analytic[k]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn primal_gradient_is_independent_of_dual_net() {
        let net = two_gen();
        let a = toy_proxies(&net, 3);
        let mut b = a.clone();
        b.dual = toy_proxies(&net, 4).dual;
        let batch = batch_for(&net, &[4.0, 9.0, 14.0]);
        let dens = training_loss(&batch, &a, 0.0).unwrap().denominators;
        let ga = training_loss_with(&batch, &a, 0.0, Some(&dens)).unwrap();
        let gb = training_loss_with(&batch, &b, 0.0, Some(&dens)).unwrap();
        assert_eq!(ga.primal, gb.primal);
        assert_ne!(ga.dual, gb.dual);
    }

    #[test]
    fn one_small_step_decreases_batch_loss() {
        let net = two_gen();
        let mut proxies = toy_proxies(&net, 5);
        let batch = batch_for(&net, &[3.0, 7.5, 11.0, 16.0, 19.0]);
        let before = training_loss(&batch, &proxies, 0.0).unwrap().loss;
        let mut ps = AdamState::new(&proxies.primal.net, 1e-4);
        let mut ds = AdamState::new(&proxies.dual.net, 1e-4);
        training_step(&mut proxies, &batch, 0.0, &mut ps, &mut ds).unwrap();
        let after = training_loss(&batch, &proxies, 0.0).unwrap().loss;
        assert!(after < before, "{after} >= {before}");
    }

    struct Oracle;

    impl PrimalDualPredictor for Oracle {
        fn predict(&self, inst: &EDInstance) -> Result<(PrimalPoint, DualPoint), ProxyError> {
            let r = solve_ed_full(inst).unwrap();
            Ok((r.primal, r.dual))
        }
    }

    #[test]
    fn validate_with_optimal_oracle_is_zero() {
        let net = toy();
        let val = sample_demands(&net, &SamplerConfig::default(), 20, 2).unwrap();
        let v = validate(&val, &Oracle);
        assert_eq!(v.invalid_count, 0);
        assert!(v.mean_gap.abs() <= 1e-7, "{}", v.mean_gap);
    }

    #[test]
    fn validation_mean_and_sentinel() {
        let v = ValidationResult::from_gaps(vec![Some(0.01), Some(0.03)]);
        assert!((v.mean_gap - 0.02).abs() < 1e-15);
        let v = ValidationResult::from_gaps(vec![Some(0.01), None, Some(0.03)]);
        assert_eq!(v.mean_gap, f64::INFINITY);
        assert!((v.finite_mean - 0.02).abs() < 1e-15);
        assert_eq!(v.invalid_count, 1);
    }

    #[test]
    fn validate_is_repeatable() {
        let net = toy();
        let cfg = small_cfg(1);
        let p = init_proxies(&net, &cfg).unwrap();
        let mut p = p;
        p.set_mode(Mode::Inference);
        let val = sample_demands(&net, &cfg.sampler, 16, 1).unwrap();
        assert_eq!(validate(&val, &p), validate(&val, &p));
        for inst in &val {
            let (_, y) = p.predict(inst).unwrap();
            assert!(check_dual_feasible(inst, &y, DEFAULT_FEAS_TOL).passed());
        }
    }

    #[test]
    fn training_is_label_free_deterministic_and_monotone() {
        let net = toy();
        let cfg = small_cfg(9);
        let calls = lp_solver::solve_calls();
        let mut log = Vec::new();
        let a = train_joint(net.clone(), &cfg, Some(&mut log)).unwrap();
        assert_eq!(lp_solver::solve_calls(), calls);
        let b = train_joint(net.clone(), &cfg, None).unwrap();
        assert_eq!(a.checkpoint.to_json(), b.checkpoint.to_json());

        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), cfg.epochs + 1);

        let mut best = f64::INFINITY;
        let mut lr = cfg.lr_init;
        for r in &a.history {
            best = best.min(r.val_gap);
            assert!(r.lr <= lr && r.lr >= cfg.lr_floor);
            lr = r.lr;
        }
        assert!(best.is_finite());
        assert_eq!(a.checkpoint.best_val_gap, Some(best));
    }

    #[test]
    fn lr_decays_after_patience() {
        let net = toy();
        let cfg = TrainConfig {
            epochs: 6,
            patience_epochs: 1,
            // nothing counts as an improvement
            min_improvement: 1e9,
            lr_floor: 5e-4,
            lr_factor: 0.5,
            ..small_cfg(2)
        };
        let out = train_joint(net, &cfg, None).unwrap();
        let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
        // the first finite gap always improves on the initial +∞
        assert_eq!(lrs, vec![1e-3, 5e-4, 5e-4, 5e-4, 5e-4, 5e-4]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = toy();
        let cfg = TrainConfig {
            epochs: 2,
            ..small_cfg(4)
        };
        let out = train_joint(net, &cfg, None).unwrap();
        let text = out.checkpoint.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, out.checkpoint);
        let tampered = text.replacen("\"eps_target\": 0.0", "\"eps_target\": 0.5", 1);
        assert!(matches!(Checkpoint::from_json(&tampered), Err(TrainError::Format(_))));
    }
}
