//! Acceptance suite. Runs each criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kbpt::config::RunConfig;
use kbpt::data::{generate_synthetic, load_csv, split, QuoteSeries, SyntheticSpec};
use kbpt::engine::{self, calibrate, BacktestResult, EngineConfig, PipelineSpec};
use kbpt::gainnet::{knet_step, FeatureSet, GainConfig, GainNetwork, KnetState};
use kbpt::kalman::{kf_step, FilterState, NoiseParams};
use kbpt::ledger::{pnl_series, Transaction};
use kbpt::linalg::Matrix;
use kbpt::policy::{PolicyMode, PolicyState};
use kbpt::ssmodel::{ModelKind, StateSpaceSpec};
use kbpt::training::{
    full_trace, grad_stage1, grad_stage2, loss_stage1, loss_stage2, surrogate_objective, to_db, train_full,
    TrainConfig, TrainData,
};

type Outcome = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1. Learned-gain step with the analytic gain plugged in reproduces the filter.

fn filter_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for (kind, truth) in [(ModelKind::Ci, vec![1.2, 0.3]), (ModelKind::PciProposed, vec![1.2, 0.3, 0.0])] {
        let rho = 0.8;
        let q = vec![1e-3; truth.len()];
        let synth = SyntheticSpec::gaussian(kind, rho, 1000, q.clone(), 1e-2, truth.clone(), 21);
        let (series, _) = generate_synthetic(&synth).map_err(|e| e.to_string())?;
        let spec = StateSpaceSpec::new(kind, rho, 0.0).map_err(|e| e.to_string())?;
        let noise = NoiseParams::new(q.iter().map(|v| v * v).collect(), vec![1e-4]).unwrap();
        let f = spec.evolution_matrix::<f64>();
        let mut kf = FilterState::initial(truth.clone(), Matrix::from_diag(&vec![1e-2; truth.len()]), 1);
        let mut kn = KnetState::initial(truth, 8);
        let set = FeatureSet::default();
        for t in 0..series.len() {
            let (a, b) = (series.alpha()[t], series.beta()[t]);
            let g = spec.observation_operator::<f64>(a).unwrap();
            let next = kf_step(&kf, &f, &g, &[b], &noise).map_err(|e| e.to_string())?;
            let gain = next.gain.clone();
            let (kn_next, _) = knet_step(&spec, &set, &kn, a, &[b], |_, h| Ok((gain, h.to_vec())))
                .map_err(|e| e.to_string())?;
            for (x, y) in next.x_hat.iter().zip(&kn_next.x_hat) {
                worst = worst.max((x - y).abs() / x.abs().max(1e-12));
            }
            kf = next;
            kn = kn_next;
        }
    }
    check(worst < 1e-10, format!("max relative state error {worst:.2e} (limit 1e-10)"))
}

// 2. Analytic gradients against central finite differences.

fn central_fd(theta: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let h = 1e-6 * theta[i].abs().max(1e-2);
            p[i] = theta[i] + h;
            let up = f(&p);
            p[i] = theta[i] - h;
            let dn = f(&p);
            p[i] = theta[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Fraction of coordinates within `tol` relative error. Coordinates whose
/// magnitude is below 1e-6 of the largest are compared against that floor.
fn agreement(analytic: &[f64], fd: &[f64], tol: f64) -> (f64, f64) {
    let floor = 1e-6 * analytic.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    let errs: Vec<f64> = analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .collect();
    let ok = errs.iter().filter(|e| **e < tol).count();
    let mut sorted = errs.clone();
    sorted.sort_by(f64::total_cmp);
    (ok as f64 / errs.len() as f64, sorted[sorted.len() / 2])
}

fn toy_net(spec: &StateSpaceSpec, seed: u64) -> GainNetwork {
    let mut c = GainConfig::for_spec(spec);
    c.hidden_size = 10;
    c.proj_size = 5;
    let mut net = GainNetwork::new(c, seed).unwrap();
    let head = net.head_range();
    let b = 1.0 / (net.config.hidden_size as f64).sqrt();
    for (i, v) in net.theta[head].iter_mut().enumerate() {
        *v = b * (i as f64 * 1.37 + 0.5).sin();
    }
    net.norm.scale = vec![0.01; net.norm.scale.len()];
    net
}

fn gradient_suite() -> Outcome {
    let spec = StateSpaceSpec::pci_proposed(0.7).unwrap();

    let s = SyntheticSpec::gaussian(ModelKind::PciProposed, 0.7, 5, vec![1e-3, 1e-3, 2e-2], 5e-3, vec![1.0, 0.3, 0.0], 4);
    let series = generate_synthetic(&s).unwrap().0;
    let net = toy_net(&spec, 5);
    let data = TrainData {
        spec,
        series: &series,
        x0: vec![0.9, 0.35, 0.05],
    };
    let (_, g1, _) = grad_stage1(&net, &data, net.initial_state(data.x0.clone()), 0..5, 100).map_err(|e| e.to_string())?;
    let fd1 = central_fd(&net.theta, |th| {
        let mut n = net.clone();
        n.theta = th.to_vec();
        loss_stage1(&n, &data).unwrap()
    });
    let (frac1, med1) = agreement(&g1, &fd1, 1e-4);

    // A spread spike that reverts, so the policy opens and closes a trade.
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    for t in 0..60 {
        let a = 1.0 + 0.01 * ((t as f64) * 0.7).sin();
        let mut sp = 0.004 * ((t as f64) * 1.9).cos();
        if (30..34).contains(&t) {
            sp += 0.05;
        }
        if (40..44).contains(&t) {
            sp -= 0.03;
        }
        alpha.push(a);
        beta.push(1.2 * a + 0.3 + sp);
    }
    let series2 = QuoteSeries::from_prices("spike", alpha, beta).unwrap();
    let net2 = toy_net(&spec, 6);
    let cfg = TrainConfig {
        zscore_window: 20,
        ..TrainConfig::default()
    };
    let data2 = TrainData {
        spec,
        series: &series2,
        x0: vec![1.2, 0.3, 0.0],
    };
    let (_, g2, ep) = grad_stage2(&net2, &data2, &cfg, 1000).map_err(|e| e.to_string())?;
    if ep.trades.is_empty() {
        return Err("stage-2 toy sequence produced no trades".into());
    }
    let innov0 = ep.trace.primary_innovations();
    let (_, anchors) = surrogate_objective(&innov0, &ep.hedges, &ep.trades, cfg.zscore_window, &cfg.surrogate(), None);
    let fd2 = central_fd(&net2.theta, |th| {
        let tr = full_trace(&net2, th, &data2).unwrap();
        surrogate_objective(
            &tr.primary_innovations(),
            &tr.hedges(&spec),
            &ep.trades,
            cfg.zscore_window,
            &cfg.surrogate(),
            Some(&anchors),
        )
        .0
    });
    let (frac2, med2) = agreement(&g2, &fd2, 1e-3);
    check(
        frac1 >= 0.95 && frac2 >= 0.95,
        format!(
            "stage 1: {:.1}% of {} params within 1e-4 (median rel err {med1:.1e}); stage 2: {:.1}% within 1e-3 (median {med2:.1e}); need 95%",
            frac1 * 100.0,
            g1.len(),
            frac2 * 100.0
        ),
    )
}

// 3. Stage-1 tracking against the oracle filter on linear-Gaussian data.

fn synthetic_tracking() -> Outcome {
    let rho = 0.8;
    let q_sd = vec![1e-3, 1e-3, 5e-3];
    let r_sd = 2e-3;
    let mut s = SyntheticSpec::gaussian(ModelKind::PciProposed, rho, 3000, q_sd.clone(), r_sd, vec![1.0, 0.2, 0.0], 42);
    s.alpha.volatility = 0.01;
    let (series, truth) = generate_synthetic(&s).map_err(|e| e.to_string())?;
    let spec = StateSpaceSpec::pci_proposed(rho).unwrap();
    let (n_train, n_test) = (2000, 1000);

    // Oracle: the true model and noise, started at the true state.
    let noise = NoiseParams::new(q_sd.iter().map(|v| v * v).collect(), vec![r_sd * r_sd]).unwrap();
    let f = spec.evolution_matrix::<f64>();
    let mut st = FilterState::initial(truth[0].clone(), Matrix::from_diag(&[1e-4; 3]), 1);
    let mut kf_sq = 0.0;
    for t in 0..series.len() {
        let (a, b) = (series.alpha()[t], series.beta()[t]);
        let g = spec.observation_operator::<f64>(a).unwrap();
        st = kf_step(&st, &f, &g, &[b], &noise).map_err(|e| e.to_string())?;
        if t >= n_train {
            kf_sq += st.innovation[0].powi(2);
        }
    }
    let kf_db = to_db(kf_sq / n_test as f64);

    let train = series.window(0..n_train);
    let (x0, _) = kbpt::kalman::initialize(&spec, &train).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default();
    let data = TrainData {
        spec,
        series: &train,
        x0: x0.clone(),
    };
    let mut net = GainNetwork::new(cfg.network_config(&spec), cfg.seed).map_err(|e| e.to_string())?;
    kbpt::training::calibrate_normalizer(&mut net, &data).map_err(|e| e.to_string())?;
    let (net, _) = kbpt::training::train_stage1(&net, &data, &cfg).map_err(|e| e.to_string())?;
    let full = TrainData {
        spec,
        series: &series,
        x0,
    };
    let tr = full_trace(&net, &net.theta, &full).map_err(|e| e.to_string())?;
    let held: f64 = tr.innovations[n_train..].iter().map(|v| v[0] * v[0]).sum::<f64>() / n_test as f64;
    let net_db = to_db(held);
    check(
        net_db - kf_db <= 3.0,
        format!("held-out MSE {net_db:.2} dB vs oracle {kf_db:.2} dB (gap {:.2} dB, limit 3)", net_db - kf_db),
    )
}

// 4. Stage 2 trades MSE for PnL on a misspecified scenario.

fn load_run(name: &str) -> Result<(RunConfig, kbpt::data::DatasetSplit), String> {
    let cfg = RunConfig::load(&fixtures().join(format!("{name}.toml"))).map_err(|e| e.to_string())?;
    let load = load_csv(cfg.data.as_ref().unwrap()).map_err(|e| e.to_string())?;
    let data = split(&load.series, cfg.in_sample_len).map_err(|e| e.to_string())?;
    Ok((cfg, data))
}

fn stage2_tradeoff() -> Outcome {
    let (cfg, data) = load_run("mismatch")?;
    let ecfg = cfg.engine_config();
    let cal = calibrate(ModelKind::PciProposed, &data, &ecfg).map_err(|e| e.to_string())?;
    let td = TrainData {
        spec: cal.spec,
        series: &data.in_sample,
        x0: cal.x0_in_sample.clone(),
    };
    let (net2, report, net1) = train_full(&td, &ecfg.train).map_err(|e| e.to_string())?;
    let pnl = |n: &GainNetwork| -loss_stage2(n, &td, &ecfg.train).unwrap_or(f64::NAN);
    let mse = |n: &GainNetwork| to_db(loss_stage1(n, &td).unwrap_or(f64::NAN));
    let (p1, p2) = (pnl(&net1), pnl(&net2));
    let (m1, m2) = (mse(&net1), mse(&net2));
    check(
        p2 > p1 && m2 > m1,
        format!(
            "training PnL {p1:.4} -> {p2:.4}, observation MSE {m1:.2} -> {m2:.2} dB (best epoch {}, eta2 {})",
            report.stage2_best_epoch.map_or("none".into(), |e| e.to_string()),
            ecfg.train.eta2
        ),
    )
}

// 5. Trade count and PnL ordering on the CHF-EURO stand-in.

fn chf_eur_direction() -> Outcome {
    let (cfg, data) = load_run("chf_eur")?;
    let ecfg = cfg.engine_config();
    let specs = [PipelineSpec::b1(), PipelineSpec::b2(), PipelineSpec::kbpt()];
    let rows = engine::compare(&specs, &data, &ecfg);
    let mut res: Vec<BacktestResult> = Vec::new();
    for (name, r) in rows {
        res.push(r.map_err(|e| format!("{name}: {e}"))?.1);
    }
    let (b1, b2, k) = (&res[0], &res[1], &res[2]);
    check(
        k.stats.n_trades < b1.stats.n_trades && k.final_pnl() > b1.final_pnl() && k.final_pnl() > b2.final_pnl(),
        format!(
            "trades KBPT {} vs B1 {}; final PnL KBPT {:.4}, B1 {:.4}, B2 {:.4} (seed {})",
            k.stats.n_trades,
            b1.stats.n_trades,
            k.final_pnl(),
            b1.final_pnl(),
            b2.final_pnl(),
            cfg.seed
        ),
    )
}

// 6. Randomized z-streams never open twice or close nothing.

fn policy_state_machine() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0usize;
    let (mut opens, mut closes) = (0usize, 0usize);
    for mode in [PolicyMode::Cumulative, PolicyMode::Instantaneous] {
        let mut st = PolicyState::new();
        let mut held = false;
        for t in 1..=100_000i64 {
            let z = if rng.random::<f64>() < 0.05 {
                None
            } else {
                Some((rng.random::<f64>() - 0.5) * 5.0)
            };
            let act = st.advance(t, z, mode, true);
            if act.close {
                if !held {
                    violations += 1;
                }
                held = false;
                closes += 1;
            }
            if act.open != 0 {
                if held {
                    violations += 1;
                }
                held = true;
                opens += 1;
            }
        }
    }
    check(
        violations == 0 && opens > 1000,
        format!("{violations} violations over 2 x 100000 steps ({opens} opens, {closes} closes)"),
    )
}

// 7. Every ledger reward recomputes from prices and hedges by direct substitution.

fn oracle_reward(tx: &Transaction, hedges: &[f64], series: &QuoteSeries) -> f64 {
    let (a, b) = (series.alpha(), series.beta());
    let (o, c) = (tx.t_open, tx.t_close);
    let (ho, hc) = (hedges[o].abs(), hedges[c].abs());
    let zeta = if b[o] - hedges[o] * a[o] >= 0.0 { 1.0 } else { -1.0 };
    let d = tx.op_open as f64 * zeta;
    let r_beta = d * (b[c] / (1.0 + hc) - b[o] / (1.0 + ho));
    let r_alpha = d * (ho * a[o] / (1.0 + ho) - hc * a[c] / (1.0 + hc));
    r_beta + r_alpha
}

fn ledger_oracle() -> Outcome {
    let mut checked = 0usize;
    let mut bad = 0usize;
    let mut s = SyntheticSpec::gaussian(ModelKind::PciProposed, 0.7, 1500, vec![2e-4, 1e-4, 2e-2], 1e-3, vec![1.0, 0.5, 0.0], 9);
    s.alpha.volatility = 0.01;
    let (series, _) = generate_synthetic(&s).map_err(|e| e.to_string())?;
    let data = split(&series, 1000).map_err(|e| e.to_string())?;
    // Coarse noise grids keep ledger generation inside the time budget.
    let grid = |min, max| kbpt::kalman::LogGrid { min, max, points: 5 };
    let ecfg = EngineConfig {
        q_grid: grid(1e-8, 1e-2),
        r_grid: grid(1e-8, 1e-2),
        ..EngineConfig::default()
    };
    for p in [
        PipelineSpec::b1(),
        PipelineSpec::b2(),
        PipelineSpec::b1().with_mode(PolicyMode::Instantaneous),
    ] {
        let (_, res) = engine::run_pipeline(&p, &data, &ecfg).map_err(|e| e.to_string())?;
        let eval = &data.out_of_sample;
        for tx in &res.ledger {
            checked += 1;
            if tx.reward != oracle_reward(tx, &res.hedges, eval) {
                bad += 1;
            }
        }
        let brute: Vec<f64> = (0..eval.len())
            .map(|t| res.ledger.iter().filter(|x| x.t_close <= t).map(|x| x.reward).sum())
            .collect();
        let series_pnl = pnl_series(&res.ledger, eval.len()).map_err(|e| e.to_string())?;
        if brute.iter().zip(&series_pnl).any(|(a, b)| (a - b).abs() > 1e-12) || series_pnl != res.pnl {
            bad += 1;
        }
    }
    check(
        bad == 0 && checked > 0,
        format!("{checked} transactions recomputed, {bad} mismatches (rewards exact, PnL within 1e-12)"),
    )
}

// 8. Byte-identical pnl.csv across two identical CLI runs.

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("run.toml");
    let text = format!(
        "data = {:?}\nin_sample_len = 2000\npipelines = [\"B1\", \"B2\", \"KBPT\"]\nseed = 3\nepochs1 = 3\nepochs2 = 2\n",
        fixtures().join("chf_eur.csv").display().to_string()
    );
    std::fs::write(&cfg_path, text).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_kbpt"))
            .args(["backtest", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("run {run} exited with {status}"));
        }
        outputs.push(std::fs::read(out.join("pnl.csv")).map_err(|e| e.to_string())?);
    }
    check(
        outputs[0] == outputs[1] && !outputs[0].is_empty(),
        format!("two runs, pnl.csv {} bytes each, identical: {}", outputs[0].len(), outputs[0] == outputs[1]),
    )
}

fn main() {
    let criteria: [(u8, &str, Duration, fn() -> Outcome); 8] = [
        (1, "filter equivalence", Duration::from_secs(1), filter_equivalence),
        (2, "gradient suite", Duration::from_secs(30), gradient_suite),
        (3, "synthetic tracking", Duration::from_secs(15 * 60), synthetic_tracking),
        (4, "stage-2 MSE/PnL trade-off", Duration::from_secs(30 * 60), stage2_tradeoff),
        (5, "CHF-EURO trade count and PnL ordering", Duration::from_secs(45 * 60), chf_eur_direction),
        (6, "policy state machine", Duration::from_secs(5), policy_state_machine),
        (7, "ledger oracle", Duration::from_secs(1), ledger_oracle),
        (8, "determinism", Duration::from_secs(15 * 60), determinism),
    ];
    let only: Option<u8> = std::env::var("KBPT_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = run();
        let took = t0.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= limit => (true, d),
            Ok(d) => (false, format!("{d}; over time limit")),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "acceptance {id} {}: {name}: {detail} [{:.2}s, limit {}s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
