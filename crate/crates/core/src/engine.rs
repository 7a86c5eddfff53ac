//! Day-by-day backtests of the trading pipelines and side-by-side comparison.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, QuoteSeries};
use crate::error::{Error, Result};
use crate::gainnet::{load_checkpoint_file, GainNetwork};
use crate::kalman::{
    ci_indicator, estimate_ar1, estimate_noise, initial_covariance, initialize, ls_residuals, run_filter, spread_indicator, LogGrid,
    NoiseParams, DEFAULT_Q_GRID, DEFAULT_R_GRID, INIT_WINDOW,
};
use crate::ledger::{compute_stats, pnl_series, TradeStats, Transaction};
use crate::linalg::Matrix;
use crate::policy::{PolicyMode, PolicyState};
use crate::ssmodel::{ModelKind, StateSpaceSpec};
use crate::training::{full_trace, train_full, zscores, TrainConfig, TrainData, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tracker {
    Kf,
    LearnedGain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorKind {
    /// Innovation over the filter's own predicted observation std.
    FilterVariance,
    /// Tracked spread over its posterior std.
    TrackedSpread,
    /// Innovation over a rolling-window std.
    RollingStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub name: String,
    pub tracker: Tracker,
    pub model: ModelKind,
    pub indicator: IndicatorKind,
    pub policy_mode: PolicyMode,
    pub checkpoint: Option<PathBuf>,
}

impl PipelineSpec {
    fn make(name: &str, tracker: Tracker, model: ModelKind, indicator: IndicatorKind) -> Self {
        PipelineSpec {
            name: name.into(),
            tracker,
            model,
            indicator,
            policy_mode: PolicyMode::Cumulative,
            checkpoint: None,
        }
    }

    /// Model-based filter on the cointegration model.
    pub fn b1() -> Self {
        Self::make("B1", Tracker::Kf, ModelKind::Ci, IndicatorKind::FilterVariance)
    }

    /// Model-based filter on the static-hedge partial-cointegration model.
    pub fn b2() -> Self {
        Self::make("B2", Tracker::Kf, ModelKind::PciClegg, IndicatorKind::TrackedSpread)
    }

    /// Learned gain on the cointegration model.
    pub fn b3() -> Self {
        Self::make("B3", Tracker::LearnedGain, ModelKind::Ci, IndicatorKind::RollingStd)
    }

    /// Learned gain on the partial-cointegration model with tracked hedge.
    pub fn kbpt() -> Self {
        Self::make("KBPT", Tracker::LearnedGain, ModelKind::PciProposed, IndicatorKind::RollingStd)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.trim().to_ascii_uppercase().as_str() {
            "B1" => Ok(Self::b1()),
            "B2" => Ok(Self::b2()),
            "B3" => Ok(Self::b3()),
            "KBPT" => Ok(Self::kbpt()),
            other => Err(Error::Config(format!("unknown pipeline {other:?}"))),
        }
    }

    pub fn with_mode(mut self, mode: PolicyMode) -> Self {
        self.policy_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match (self.tracker, self.indicator) {
            (Tracker::Kf, IndicatorKind::FilterVariance) => true,
            (Tracker::Kf, IndicatorKind::TrackedSpread) => self.model != ModelKind::Ci,
            (_, IndicatorKind::RollingStd) => true,
            (Tracker::LearnedGain, _) => false,
        };
        if !ok {
            return Err(Error::InvalidSpec(format!(
                "pipeline {} combines {:?} with {:?} on {:?}",
                self.name, self.tracker, self.indicator, self.model
            )));
        }
        Ok(())
    }
}

/// Settings shared by every pipeline in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub zscore_window: usize,
    pub zscore_min_samples: usize,
    pub q_grid: LogGrid,
    pub r_grid: LogGrid,
    /// Estimate the baseline noise variances on the evaluation series.
    pub baseline_fit_on_test: bool,
    /// Overrides the fitted autoregression coefficient when set.
    pub rho: Option<f64>,
    /// Overrides the fitted static hedge when set.
    pub static_hedge: Option<f64>,
    /// Filter through the in-sample segment before trading the evaluation one.
    pub warm_start: bool,
    pub train: TrainConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            zscore_window: crate::indicator::DEFAULT_WINDOW,
            zscore_min_samples: crate::indicator::DEFAULT_MIN_SAMPLES,
            q_grid: DEFAULT_Q_GRID,
            r_grid: DEFAULT_R_GRID,
            baseline_fit_on_test: false,
            rho: None,
            static_hedge: None,
            warm_start: true,
            train: TrainConfig::default(),
        }
    }
}

/// Static parameters fitted on the in-sample data.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub spec: StateSpaceSpec,
    /// Filter state before the first evaluation observation.
    pub x0: Vec<f64>,
    pub p0: Matrix<f64>,
    /// Filter state before the first in-sample observation.
    pub x0_in_sample: Vec<f64>,
    pub noise: NoiseParams<f64>,
    /// Set when the autoregression fit saw all-zero residuals.
    pub rho_degenerate: bool,
}

pub fn calibrate(model: ModelKind, split: &DatasetSplit, cfg: &EngineConfig) -> Result<Calibration> {
    let ins = &split.in_sample;
    let (h, _, resid) = ls_residuals(ins.alpha(), ins.beta())?;
    let (rho, degenerate) = match model {
        ModelKind::Ci => (0.0, false),
        _ => match cfg.rho {
            Some(r) => (r, false),
            None => {
                let e = estimate_ar1(&resid)?;
                (e.rho, e.degenerate)
            }
        },
    };
    let static_hedge = match model {
        ModelKind::PciClegg => cfg.static_hedge.unwrap_or(h),
        _ => 0.0,
    };
    let spec = StateSpaceSpec::new(model, rho, static_hedge)?;
    let (x0_in_sample, _) = initialize(&spec, ins)?;
    let (x0, p0) = initialize(&spec, &ins.tail(INIT_WINDOW))?;
    let noise_series = if cfg.baseline_fit_on_test {
        &split.out_of_sample
    } else {
        ins
    };
    let noise = estimate_noise(noise_series, &spec, &cfg.q_grid, &cfg.r_grid)?;
    Ok(Calibration {
        spec,
        x0,
        p0,
        x0_in_sample,
        noise,
        rho_degenerate: degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloseKind {
    /// Cumulative close on a z-score sign change; `gap` is `τ_cp − τ_op`
    /// before the check and `z_prev_day` the day of the previous z-score.
    Policy { gap: i64, z_prev_day: usize },
    Instantaneous,
    /// End of horizon.
    Forced,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutedTrade {
    pub tx: Transaction,
    /// `τ_cp − τ_op` when the open decision was taken.
    pub open_gap: i64,
    pub close: CloseKind,
}

/// Runs the hard policy over per-day z-scores and hedges. Day `d` maps to
/// policy time `d + 1`; nothing opens on the final day and an open position
/// is force-closed there.
pub fn execute(series: &QuoteSeries, hedges: &[f64], zs: &[Option<f64>], mode: PolicyMode) -> Vec<ExecutedTrade> {
    let n = zs.len().min(hedges.len()).min(series.len());
    let (alpha, beta) = (series.alpha(), series.beta());
    let mut state = PolicyState::new();
    let mut out = Vec::new();
    let mut pending: Option<(usize, i8, i64)> = None;
    let mut last_z_day: Option<usize> = None;
    let close_tx = |(d_o, op, gap): (usize, i8, i64), d_c: usize, kind: CloseKind| ExecutedTrade {
        tx: Transaction::new(
            d_o,
            d_c,
            op,
            hedges[d_o],
            hedges[d_c],
            (alpha[d_o], alpha[d_c]),
            (beta[d_o], beta[d_c]),
            kind == CloseKind::Forced,
        ),
        open_gap: gap,
        close: kind,
    };
    for d in 0..n {
        let t = d as i64 + 1;
        let pre = state;
        let action = state.advance(t, zs[d], mode, d + 1 < n);
        if action.close {
            let kind = match mode {
                PolicyMode::Cumulative => CloseKind::Policy {
                    gap: pre.tau_close() - pre.tau_open(),
                    z_prev_day: last_z_day.expect("cumulative close needs a previous z-score"),
                },
                PolicyMode::Instantaneous => CloseKind::Instantaneous,
            };
            if let Some(p) = pending.take() {
                out.push(close_tx(p, d, kind));
            }
        }
        if action.open != 0 {
            let tau_close = if action.close { t } else { pre.tau_close() };
            pending = Some((d, action.open, tau_close - pre.tau_open()));
        }
        if zs[d].is_some() {
            last_z_day = Some(d);
        }
    }
    if let Some(p) = pending {
        if state.force_close(n as i64) {
            out.push(close_tx(p, n - 1, CloseKind::Forced));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct BacktestResult {
    pub name: String,
    pub trades: Vec<ExecutedTrade>,
    pub ledger: Vec<Transaction>,
    pub pnl: Vec<f64>,
    pub stats: TradeStats,
    pub zs: Vec<Option<f64>>,
    pub hedges: Vec<f64>,
    pub innovations: Vec<f64>,
    /// Filter failure that truncated the run, if any.
    pub error: Option<String>,
}

impl BacktestResult {
    pub fn final_pnl(&self) -> f64 {
        self.pnl.last().copied().unwrap_or(0.0)
    }

    /// Mean squared primary innovation.
    pub fn observation_mse(&self) -> f64 {
        let n = self.innovations.len().max(1) as f64;
        self.innovations.iter().map(|e| e * e).sum::<f64>() / n
    }
}

struct Signals {
    zs: Vec<Option<f64>>,
    hedges: Vec<f64>,
    innovations: Vec<f64>,
    error: Option<String>,
}

fn kf_signals(p: &PipelineSpec, cal: &Calibration, series: &QuoteSeries, x0: &[f64], p0: &Matrix<f64>) -> Result<Signals> {
    let (mut zs, mut hedges, mut innovations): (Vec<Option<f64>>, Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new(), Vec::new());
    let mut error = None;
    // Run step by step so a failure keeps the prefix.
    let f = cal.spec.evolution_matrix::<f64>();
    let mut st = crate::kalman::FilterState::initial(x0.to_vec(), p0.clone(), cal.spec.obs_dim());
    for t in 0..series.len() {
        let (a, b) = (series.alpha()[t], series.beta()[t]);
        let g = cal.spec.observation_operator::<f64>(a)?;
        let next = match crate::kalman::kf_step(&st, &f, &g, &cal.spec.observation(a, b), &cal.noise) {
            Ok(s) if s.x_hat.iter().all(|x| x.is_finite()) => s,
            Ok(_) => {
                error = Some(Error::Divergence { step: t }.to_string());
                break;
            }
            Err(e) => {
                error = Some(format!("step {t}: {e}"));
                break;
            }
        };
        let z = match p.indicator {
            IndicatorKind::FilterVariance => ci_indicator(&next).ok(),
            IndicatorKind::TrackedSpread => spread_indicator(&cal.spec, &next).ok(),
            IndicatorKind::RollingStd => None,
        };
        zs.push(z);
        hedges.push(cal.spec.hedge(&next.x_hat));
        innovations.push(next.innovation[0]);
        st = next;
    }
    Ok(Signals {
        zs,
        hedges,
        innovations,
        error,
    })
}

fn learned_signals(net: &GainNetwork, cal: &Calibration, series: &QuoteSeries, x0: &[f64]) -> Signals {
    let data = TrainData {
        spec: cal.spec,
        series,
        x0: x0.to_vec(),
    };
    // Re-run step by step on failure to keep the valid prefix.
    let (trace, error) = match full_trace(net, &net.theta, &data) {
        Ok(tr) => (tr, None),
        Err(e) => {
            let step = match e {
                Error::Divergence { step } => step,
                _ => 0,
            };
            let prefix = series.window(0..step);
            let pdata = TrainData {
                series: &prefix,
                ..data.clone()
            };
            let tr = if step > 0 {
                full_trace(net, &net.theta, &pdata).ok()
            } else {
                None
            };
            match tr {
                Some(tr) => (tr, Some(e.to_string())),
                None => {
                    return Signals {
                        zs: Vec::new(),
                        hedges: Vec::new(),
                        innovations: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            }
        }
    };
    Signals {
        zs: Vec::new(),
        hedges: trace.hedges(&cal.spec),
        innovations: trace.primary_innovations(),
        error,
    }
}

/// One pipeline over `series`, filtering from the calibrated evaluation
/// start state. A filter failure truncates the run: positions are
/// force-closed at the last valid day and the error is reported alongside
/// the partial ledger.
pub fn run_backtest(
    p: &PipelineSpec,
    cal: &Calibration,
    net: Option<&GainNetwork>,
    series: &QuoteSeries,
    cfg: &EngineConfig,
) -> Result<BacktestResult> {
    backtest_from(p, cal, net, series, (&cal.x0, &cal.p0), 0, cfg)
}

/// Filters through the in-sample segment first and trades only on the
/// evaluation segment, so the evaluation starts from a tracked state and a
/// filled z-score window.
pub fn run_backtest_warm(
    p: &PipelineSpec,
    cal: &Calibration,
    net: Option<&GainNetwork>,
    split: &DatasetSplit,
    cfg: &EngineConfig,
) -> Result<BacktestResult> {
    let joined = split.in_sample.concat(&split.out_of_sample)?;
    let p0 = initial_covariance(&cal.x0_in_sample);
    backtest_from(p, cal, net, &joined, (&cal.x0_in_sample, &p0), split.in_sample.len(), cfg)
}

fn backtest_from(
    p: &PipelineSpec,
    cal: &Calibration,
    net: Option<&GainNetwork>,
    series: &QuoteSeries,
    (x0, p0): (&[f64], &Matrix<f64>),
    offset: usize,
    cfg: &EngineConfig,
) -> Result<BacktestResult> {
    p.validate()?;
    if cal.spec.kind() != p.model {
        return Err(Error::InvalidSpec(format!(
            "calibration is for {:?}, pipeline {} needs {:?}",
            cal.spec.kind(),
            p.name,
            p.model
        )));
    }
    let mut sig = match p.tracker {
        Tracker::Kf => kf_signals(p, cal, series, x0, p0)?,
        Tracker::LearnedGain => {
            let net = net.ok_or_else(|| Error::Config(format!("pipeline {} needs a trained network", p.name)))?;
            learned_signals(net, cal, series, x0)
        }
    };
    if p.indicator == IndicatorKind::RollingStd {
        sig.zs = zscores(&sig.innovations, cfg.zscore_window, cfg.zscore_min_samples);
    }
    sig.zs.drain(..offset.min(sig.zs.len()));
    sig.hedges.drain(..offset.min(sig.hedges.len()));
    sig.innovations.drain(..offset.min(sig.innovations.len()));
    let eval = series.window(offset..series.len());
    let trades = execute(&eval, &sig.hedges, &sig.zs, p.policy_mode);
    let ledger: Vec<Transaction> = trades.iter().map(|t| t.tx.clone()).collect();
    let pnl = pnl_series(&ledger, eval.len())?;
    let stats = compute_stats(&ledger, eval.len())?;
    Ok(BacktestResult {
        name: p.name.clone(),
        trades,
        ledger,
        pnl,
        stats,
        zs: sig.zs,
        hedges: sig.hedges,
        innovations: sig.innovations,
        error: sig.error,
    })
}

/// Calibration plus, for learned pipelines, the network to run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub pipeline: PipelineSpec,
    pub calibration: Calibration,
    pub net: Option<GainNetwork>,
    pub report: Option<TrainReport>,
}

/// Calibrates a pipeline and loads or trains its network.
pub fn prepare(p: &PipelineSpec, split: &DatasetSplit, cfg: &EngineConfig) -> Result<Prepared> {
    p.validate()?;
    let calibration = calibrate(p.model, split, cfg)?;
    let (net, report) = match p.tracker {
        Tracker::Kf => (None, None),
        Tracker::LearnedGain => match &p.checkpoint {
            Some(path) => {
                let (net, meta) = load_checkpoint_file(path)?;
                if meta.model.kind() != p.model {
                    return Err(Error::Checkpoint(format!(
                        "{} holds a {:?} network, pipeline {} needs {:?}",
                        path.display(),
                        meta.model.kind(),
                        p.name,
                        p.model
                    )));
                }
                (Some(net), None)
            }
            None => {
                let data = TrainData {
                    spec: calibration.spec,
                    series: &split.in_sample,
                    x0: calibration.x0_in_sample.clone(),
                };
                let (net, report, _) = train_full(&data, &cfg.train)?;
                (Some(net), Some(report))
            }
        },
    };
    Ok(Prepared {
        pipeline: p.clone(),
        calibration,
        net,
        report,
    })
}

/// Prepares and backtests one pipeline on the out-of-sample segment.
pub fn run_pipeline(p: &PipelineSpec, split: &DatasetSplit, cfg: &EngineConfig) -> Result<(Prepared, BacktestResult)> {
    let prep = prepare(p, split, cfg)?;
    let net = prep.net.as_ref();
    let res = if cfg.warm_start {
        run_backtest_warm(p, &prep.calibration, net, split, cfg)?
    } else {
        run_backtest(p, &prep.calibration, net, &split.out_of_sample, cfg)?
    };
    Ok((prep, res))
}

/// Runs every pipeline in parallel; each entry carries its own outcome.
pub fn compare(
    specs: &[PipelineSpec],
    split: &DatasetSplit,
    cfg: &EngineConfig,
) -> Vec<(String, Result<(Prepared, BacktestResult)>)> {
    std::thread::scope(|s| {
        let handles: Vec<_> = specs
            .iter()
            .map(|p| (p.name.clone(), s.spawn(move || run_pipeline(p, split, cfg))))
            .collect();
        handles
            .into_iter()
            .map(|(name, h)| {
                let r = h
                    .join()
                    .unwrap_or_else(|_| Err(Error::InvalidSpec(format!("pipeline {name} panicked"))));
                (name, r)
            })
            .collect()
    })
}

/// Reruns a model-based filter over the whole series (diagnostics).
pub fn kf_innovations(cal: &Calibration, series: &QuoteSeries) -> Result<Vec<f64>> {
    Ok(run_filter(&cal.spec, series, &cal.x0, &cal.p0, &cal.noise)?
        .iter()
        .map(|s| s.innovation[0])
        .collect())
}
