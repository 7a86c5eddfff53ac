//! Two-stage training of the gain network: observation-prediction warm
//! start, then PnL maximization through the surrogate policy.
//!
//! Gradients use truncated backpropagation through time implemented as a
//! chunked replay: a float forward pass records the filter memory at every
//! step, and each chunk of `bptt_truncation` steps is re-run on the tape
//! from its detached starting memory with the loss adjoints of that chunk's
//! outputs as seeds.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Session, Var};
use crate::data::QuoteSeries;
use crate::engine::{execute, CloseKind, ExecutedTrade};
use crate::error::{Error, Result};
use crate::gainnet::{GainNetwork, KnetState};
use crate::indicator::{window_std, RollingStd, DEFAULT_MIN_SAMPLES, DEFAULT_WINDOW};
use crate::ledger::{leg_value, Transaction};
use crate::policy::{soft_decisions, PolicyMode, PolicyState, SurrogateConfig, DEFAULT_GAMMA};
use crate::scalar::Real;
use crate::ssmodel::StateSpaceSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub epochs1: usize,
    pub epochs2: usize,
    pub batch_count: usize,
    pub bptt_truncation: usize,
    pub surrogate_gamma: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub zscore_window: usize,
    pub zscore_min_samples: usize,
    pub hidden_size: usize,
    pub proj_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta1: 1e-3,
            eta2: 1e-4,
            epochs1: 50,
            epochs2: 30,
            batch_count: 10,
            bptt_truncation: 40,
            surrogate_gamma: DEFAULT_GAMMA,
            grad_clip: 1.0,
            seed: 0,
            zscore_window: DEFAULT_WINDOW,
            zscore_min_samples: DEFAULT_MIN_SAMPLES,
            hidden_size: crate::gainnet::DEFAULT_HIDDEN,
            proj_size: crate::gainnet::DEFAULT_PROJ,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.eta1 >= 0.0 && self.eta2 >= 0.0) {
            return bad("step sizes must be non-negative");
        }
        if self.batch_count == 0 {
            return bad("batch_count must be at least 1");
        }
        if self.bptt_truncation == 0 {
            return bad("bptt_truncation must be at least 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        SurrogateConfig::new(self.surrogate_gamma)?;
        Ok(())
    }

    pub fn network_config(&self, spec: &StateSpaceSpec) -> crate::gainnet::GainConfig {
        let mut c = crate::gainnet::GainConfig::for_spec(spec);
        c.hidden_size = self.hidden_size;
        c.proj_size = self.proj_size;
        c
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            gamma: self.surrogate_gamma,
        }
    }
}

/// A training sequence together with the model it is filtered under.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub spec: StateSpaceSpec,
    pub series: &'a QuoteSeries,
    /// Filter state before the first observation.
    pub x0: Vec<f64>,
}

/// Float forward pass over a sequence.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Filter memory before each step.
    pub states: Vec<KnetState<f64>>,
    pub final_state: KnetState<f64>,
    /// Innovation of every observation component, per step.
    pub innovations: Vec<Vec<f64>>,
    pub x_hat: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

impl Trace {
    pub fn primary_innovations(&self) -> Vec<f64> {
        self.innovations.iter().map(|v| v[0]).collect()
    }

    pub fn hedges(&self, spec: &StateSpaceSpec) -> Vec<f64> {
        self.x_hat.iter().map(|x| spec.hedge(x)).collect()
    }

    pub fn mse(&self) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for v in &self.innovations {
            for e in v {
                s += e * e;
                n += 1;
            }
        }
        s / n.max(1) as f64
    }
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Runs the learned-gain filter over `range` of the data, starting from
/// `start`, with parameters `theta`.
pub fn run_trace(
    net: &GainNetwork,
    theta: &[f64],
    data: &TrainData,
    start: KnetState<f64>,
    range: std::ops::Range<usize>,
) -> Result<Trace> {
    let n = range.len();
    let mut tr = Trace {
        states: Vec::with_capacity(n),
        final_state: start.clone(),
        innovations: Vec::with_capacity(n),
        x_hat: Vec::with_capacity(n),
        features: Vec::with_capacity(n),
    };
    let mut st = start;
    for t in range {
        let (a, b) = (data.series.alpha()[t], data.series.beta()[t]);
        let y = data.spec.observation::<f64>(a, b);
        let (next, out) = net
            .step(theta, &data.spec, &st, a, &y)
            .map_err(|e| diverged(e, t))?;
        tr.states.push(st);
        tr.innovations.push(out.innovation);
        tr.x_hat.push(next.x_hat.clone());
        tr.features.push(out.features);
        st = next;
    }
    tr.final_state = st;
    Ok(tr)
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Divergence { step },
        other => other,
    }
}

pub fn full_trace(net: &GainNetwork, theta: &[f64], data: &TrainData) -> Result<Trace> {
    run_trace(net, theta, data, net.initial_state(data.x0.clone()), 0..data.series.len())
}

/// Mean squared one-step observation prediction error.
pub fn loss_stage1(net: &GainNetwork, data: &TrainData) -> Result<f64> {
    if data.series.len() < 2 {
        return Err(Error::SeriesTooShort {
            needed: 2,
            got: data.series.len(),
        });
    }
    Ok(full_trace(net, &net.theta, data)?.mse())
}

/// Per-step adjoints of the loss with respect to the step outputs.
struct Seeds<'a> {
    innovation: &'a dyn Fn(usize, usize) -> f64,
    hedge: Option<&'a dyn Fn(usize) -> f64>,
}

/// Replays `range` chunk by chunk on the tape and accumulates `θ` gradients.
fn replay_gradient(
    net: &GainNetwork,
    data: &TrainData,
    trace: &Trace,
    offset: usize,
    range: std::ops::Range<usize>,
    truncation: usize,
    seeds: &Seeds,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; net.theta.len()];
    let hedge_idx = data.spec.hedge_index();
    let mut start = range.start;
    while start < range.end {
        let end = (start + truncation).min(range.end);
        let session = Session::new();
        let theta = session.vars(&net.theta);
        let mut st: KnetState<Var> = trace.states[start - offset].lift();
        let mut seed_list: Vec<(Var, f64)> = Vec::new();
        for t in start..end {
            let (a, b) = (data.series.alpha()[t], data.series.beta()[t]);
            let y = data.spec.observation::<Var>(a, b);
            let (next, out) = net.step(&theta, &data.spec, &st, a, &y).map_err(|e| diverged(e, t))?;
            for (k, &e) in out.innovation.iter().enumerate() {
                let s = (seeds.innovation)(t, k);
                if s != 0.0 {
                    seed_list.push((e, s));
                }
            }
            if let (Some(h), Some(i)) = (seeds.hedge, hedge_idx) {
                let s = h(t);
                if s != 0.0 {
                    seed_list.push((next.x_hat[i], s));
                }
            }
            st = next;
        }
        if !seed_list.is_empty() {
            let adj = session.backward(&seed_list);
            for (g, v) in grad.iter_mut().zip(&theta) {
                *g += adj.wrt(*v);
            }
        }
        start = end;
    }
    Ok(grad)
}

/// Stage-1 loss and its truncated-BPTT gradient over `range`, starting
/// from `start`. Returns `(loss, grad, trace)`.
pub fn grad_stage1(
    net: &GainNetwork,
    data: &TrainData,
    start: KnetState<f64>,
    range: std::ops::Range<usize>,
    truncation: usize,
) -> Result<(f64, Vec<f64>, Trace)> {
    let offset = range.start;
    let trace = run_trace(net, &net.theta, data, start, range.clone())?;
    let count = (range.len() * data.spec.obs_dim()) as f64;
    let innov = |t: usize, k: usize| 2.0 * trace.innovations[t - offset][k] / count;
    let seeds = Seeds {
        innovation: &innov,
        hedge: None,
    };
    let grad = replay_gradient(net, data, &trace, offset, range, truncation, &seeds)?;
    Ok((trace.mse(), grad, trace))
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage1_loss: Vec<f64>,
    pub stage1_mse_db: Option<f64>,
    pub stage2_pnl: Vec<f64>,
    pub stage2_best_epoch: Option<usize>,
    pub stage2_mse_db: Option<f64>,
    pub aborted: Option<String>,
    #[serde(default)]
    pub checkpoints: Vec<String>,
}

/// Fits the normalizer to the network's own features on the data.
pub fn calibrate_normalizer(net: &mut GainNetwork, data: &TrainData) -> Result<()> {
    let tr = full_trace(net, &net.theta, data)?;
    net.norm.fit(&tr.features);
    Ok(())
}

/// Observation-prediction warm start over `batch_count` contiguous batches;
/// the filter memory carries across batches within an epoch.
pub fn train_stage1(net: &GainNetwork, data: &TrainData, cfg: &TrainConfig) -> Result<(GainNetwork, TrainReport)> {
    cfg.validate()?;
    let len = data.series.len();
    if len < 2 * cfg.batch_count {
        return Err(Error::SeriesTooShort {
            needed: 2 * cfg.batch_count,
            got: len,
        });
    }
    let mut net = net.clone();
    net.norm.frozen = false;
    let mut report = TrainReport::default();
    if cfg.epochs1 == 0 {
        report.stage1_mse_db = Some(to_db(loss_stage1(&net, data)?));
        return Ok((net, report));
    }
    let mut adam = Adam::new(net.theta.len(), cfg.eta1);
    let bounds: Vec<usize> = (0..=cfg.batch_count).map(|k| k * len / cfg.batch_count).collect();
    'epochs: for _ in 0..cfg.epochs1 {
        let epoch_start = net.clone();
        let mut state = net.initial_state(data.x0.clone());
        let mut total = 0.0;
        for w in bounds.windows(2) {
            let step = grad_stage1(&net, data, state, w[0]..w[1], cfg.bptt_truncation);
            let (loss, mut grad, trace) = match step {
                Ok(v) if v.0.is_finite() && v.1.iter().all(|g| g.is_finite()) => v,
                Ok(_) => {
                    report.aborted = Some("non-finite stage-1 loss".into());
                    net = epoch_start;
                    break 'epochs;
                }
                Err(e) => {
                    report.aborted = Some(e.to_string());
                    net = epoch_start;
                    break 'epochs;
                }
            };
            total += loss * w[1].saturating_sub(w[0]) as f64;
            clip_grad(&mut grad, cfg.grad_clip);
            adam.step(&mut net.theta, &grad);
            net.norm.update(&trace.features);
            state = trace.final_state;
        }
        report.stage1_loss.push(total / len as f64);
    }
    net.norm.frozen = true;
    report.stage1_mse_db = loss_stage1(&net, data).ok().map(to_db);
    Ok((net, report))
}

/// Z-scores and trades of a float pass, for the policy objective.
#[derive(Clone, Debug)]
pub struct Episode {
    pub trace: Trace,
    pub zs: Vec<Option<f64>>,
    pub hedges: Vec<f64>,
    pub trades: Vec<ExecutedTrade>,
    pub pnl: f64,
}

pub fn zscores(innovations: &[f64], window: usize, min_samples: usize) -> Vec<Option<f64>> {
    let mut r = RollingStd::new(window, min_samples);
    innovations.iter().map(|&e| r.update_and_score(e)).collect()
}

pub fn run_episode(net: &GainNetwork, theta: &[f64], data: &TrainData, cfg: &TrainConfig) -> Result<Episode> {
    let trace = full_trace(net, theta, data)?;
    let innov = trace.primary_innovations();
    let zs = zscores(&innov, cfg.zscore_window, cfg.zscore_min_samples);
    let hedges = trace.hedges(&data.spec);
    let trades = execute(data.series, &hedges, &zs, PolicyMode::Cumulative);
    let pnl = trades.iter().map(|t| t.tx.reward).sum();
    Ok(Episode {
        trace,
        zs,
        hedges,
        trades,
        pnl,
    })
}

/// Surrogate-factor anchors `(op_soft, cp_soft)` per trade, evaluated at the
/// parameters that produced the trajectory.
pub type Anchors = Vec<(f64, Option<f64>)>;

fn z_at<T: Real>(innov: &[T], day: usize, window: usize) -> T {
    let lo = (day + 1).saturating_sub(window);
    innov[day] / window_std(&innov[lo..=day])
}

/// Straight-through policy objective `−Σ r_i` over a fixed set of executed
/// trades: values come from the hard decisions, gradients flow through the
/// surrogate open/close factors and the hedge-dependent reward terms.
///
/// With `anchors = None` the anchors are taken from the current values, so
/// the objective equals the realized loss; passing the anchors computed at
/// `θ₀` gives the function whose gradient at `θ₀` the trainer follows.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_objective<T: Real>(
    innov: &[T],
    hedges: &[T],
    trades: &[ExecutedTrade],
    window: usize,
    sur: &SurrogateConfig,
    anchors: Option<&Anchors>,
) -> (T, Anchors) {
    let mut total = T::zero();
    let mut used = Vec::with_capacity(trades.len());
    for (i, tr) in trades.iter().enumerate() {
        let tx: &Transaction = &tr.tx;
        let (d_o, d_c) = (tx.t_open, tx.t_close);
        let gate_state = PolicyState::with_gap(tr.open_gap);
        let z_o = z_at(innov, d_o, window);
        let (op_soft, _) = soft_decisions(z_o, T::zero(), &gate_state, sur);
        let op_anchor = anchors.map_or(op_soft.value(), |a| a[i].0);
        let op = T::from_f64(tx.op_open as f64) + (op_soft - T::from_f64(op_anchor));

        let (cp, cp_anchor) = match tr.close {
            CloseKind::Policy { gap, z_prev_day } => {
                let z_c = z_at(innov, d_c, window);
                let z_p = z_at(innov, z_prev_day, window);
                let (_, cp_soft) = soft_decisions(z_c, z_p, &PolicyState::with_gap(gap), sur);
                let a = anchors.map_or(cp_soft.value(), |a| a[i].1.unwrap_or(0.0));
                (T::one() + (cp_soft - T::from_f64(a)), Some(a))
            }
            CloseKind::Instantaneous | CloseKind::Forced => (T::one(), None),
        };

        let f = T::from_f64;
        let a_o = leg_value(hedges[d_o], f(tx.alpha_open), f(tx.beta_open));
        let a_c = leg_value(hedges[d_c], f(tx.alpha_close), f(tx.beta_close));
        let r = op * f(tx.zeta as f64) * cp * (a_c - a_o);
        total -= r;
        used.push((op_anchor, cp_anchor));
    }
    (total, used)
}

/// `−Σ r_i` of the hard policy on the network's own trajectory.
pub fn loss_stage2(net: &GainNetwork, data: &TrainData, cfg: &TrainConfig) -> Result<f64> {
    Ok(-run_episode(net, &net.theta, data, cfg)?.pnl)
}

/// Stage-2 loss and gradient at the network's current parameters.
pub fn grad_stage2(
    net: &GainNetwork,
    data: &TrainData,
    cfg: &TrainConfig,
    truncation: usize,
) -> Result<(f64, Vec<f64>, Episode)> {
    let ep = run_episode(net, &net.theta, data, cfg)?;
    let loss = -ep.pnl;
    let n = data.series.len();
    if ep.trades.is_empty() {
        return Ok((loss, vec![0.0; net.theta.len()], ep));
    }

    // Adjoints of the objective with respect to innovations and hedges.
    let (adj_innov, adj_hedge) = {
        let session = Session::new();
        let innov = session.vars(&ep.trace.primary_innovations());
        let hedges = session.vars(&ep.hedges);
        let (obj, _) = surrogate_objective(
            &innov,
            &hedges,
            &ep.trades,
            cfg.zscore_window,
            &cfg.surrogate(),
            None,
        );
        let adj = session.backward(&[(obj, 1.0)]);
        (adj.wrt_all(&innov), adj.wrt_all(&hedges))
    };

    let innov_seed = |t: usize, k: usize| if k == 0 { adj_innov[t] } else { 0.0 };
    let hedge_seed = |t: usize| adj_hedge[t];
    let hedge_ref: Option<&dyn Fn(usize) -> f64> = if data.spec.hedge_index().is_some() {
        Some(&hedge_seed)
    } else {
        None
    };
    let seeds = Seeds {
        innovation: &innov_seed,
        hedge: hedge_ref,
    };
    let grad = replay_gradient(net, data, &ep.trace, 0, 0..n, truncation, &seeds)?;
    Ok((loss, grad, ep))
}

/// PnL-driven fine-tuning with full-sequence gradients. The normalizer
/// stays frozen and the best-PnL parameters seen (including the starting
/// point) are returned.
pub fn train_stage2(net: &GainNetwork, data: &TrainData, cfg: &TrainConfig) -> Result<(GainNetwork, TrainReport)> {
    cfg.validate()?;
    let mut net = net.clone();
    net.norm.frozen = true;
    let mut report = TrainReport::default();
    let mut adam = Adam::new(net.theta.len(), cfg.eta2);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for epoch in 0..=cfg.epochs2 {
        let last = epoch == cfg.epochs2;
        let result = if last {
            loss_stage2(&net, data, cfg).map(|l| (l, Vec::new()))
        } else {
            grad_stage2(&net, data, cfg, cfg.bptt_truncation).map(|(l, g, _)| (l, g))
        };
        let (loss, mut grad) = match result {
            Ok(v) if v.0.is_finite() && v.1.iter().all(|g| g.is_finite()) => v,
            Ok(_) => {
                report.aborted = Some("non-finite stage-2 loss".into());
                break;
            }
            Err(e) => {
                report.aborted = Some(e.to_string());
                break;
            }
        };
        let pnl = -loss;
        report.stage2_pnl.push(pnl);
        if best.as_ref().is_none_or(|(b, _, _)| pnl > *b) {
            best = Some((pnl, epoch, net.theta.clone()));
        }
        if last {
            break;
        }
        clip_grad(&mut grad, cfg.grad_clip);
        adam.step(&mut net.theta, &grad);
    }
    if let Some((_, epoch, theta)) = best {
        net.theta = theta;
        report.stage2_best_epoch = Some(epoch);
    }
    report.stage2_mse_db = loss_stage1(&net, data).ok().map(to_db);
    Ok((net, report))
}

/// Initializes, calibrates and runs both stages.
pub fn train_full(data: &TrainData, cfg: &TrainConfig) -> Result<(GainNetwork, TrainReport, GainNetwork)> {
    let mut net = GainNetwork::new(cfg.network_config(&data.spec), cfg.seed)?;
    calibrate_normalizer(&mut net, data)?;
    let (stage1, mut report) = train_stage1(&net, data, cfg)?;
    let (stage2, r2) = train_stage2(&stage1, data, cfg)?;
    report.stage2_pnl = r2.stage2_pnl;
    report.stage2_best_epoch = r2.stage2_best_epoch;
    report.stage2_mse_db = r2.stage2_mse_db;
    if report.aborted.is_none() {
        report.aborted = r2.aborted;
    }
    Ok((stage2, report, stage1))
}
