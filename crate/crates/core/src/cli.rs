//! Command-line front end. Every command writes plain CSV/JSON artifacts
//! whose first line records the config hash and seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::{config_hash, RunConfig, SynthConfig};
use crate::data::{generate_synthetic, load_csv, split, DatasetSplit, QuoteSeries};
use crate::engine::{self, calibrate, BacktestResult, PipelineSpec, Prepared, Tracker};
use crate::error::{Error, Result};
use crate::gainnet::{save_checkpoint_file, CheckpointMeta};
use crate::ledger::{compute_stats, read_named_ledgers_csv, write_named_ledgers_csv};
use crate::policy::PolicyMode;
use crate::ssmodel::ModelKind;
use crate::training::{to_db, train_full, TrainData};

#[derive(Debug, Parser)]
#[command(name = "kbpt", version, about = "Pairs-trading backtests with model-based and learned-gain Kalman filters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run pipelines one after another and write pnl.csv, ledger.csv, stats.json.
    Backtest(RunArgs),
    /// Like backtest, but pipelines run in parallel and a failing one does not stop the rest.
    Compare(RunArgs),
    /// Train the learned-gain pipelines on the in-sample segment and write checkpoints.
    Train(RunArgs),
    /// Generate a synthetic price CSV.
    Synth(SynthArgs),
    /// Recompute trade statistics from a ledger CSV.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated pipeline names, e.g. `B1,B2,B3,KBPT`.
    #[arg(long, value_delimiter = ',')]
    pub pipelines: Option<Vec<String>>,
    /// `cumulative` or `instantaneous`.
    #[arg(long)]
    pub policy_mode: Option<PolicyMode>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output CSV path (overrides `out` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub ledger: PathBuf,
    /// Evaluation length in days; read from the ledger header when omitted.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Directory for stats.json; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status for an error: 2 for bad input (paths, config, data), 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. }
        | Error::Malformed { .. }
        | Error::TooFewRows
        | Error::SplitOutOfRange { .. }
        | Error::NonPositivePrice(_)
        | Error::Unsorted
        | Error::Checkpoint(_)
        | Error::Config(_)
        | Error::InvalidSpec(_) => 2,
        _ => 1,
    }
}

/// Single-line JSON description of an error, for stderr.
pub fn error_line(e: &Error) -> String {
    let kind = match e {
        Error::Io { .. } => "io",
        Error::Malformed { .. } => "malformed",
        Error::Config(_) => "config",
        Error::Checkpoint(_) => "checkpoint",
        Error::InvalidSpec(_) => "invalid_spec",
        _ => "runtime",
    };
    let path = match e {
        Error::Io { path, .. } => Some(path.display().to_string()),
        _ => None,
    };
    json!({ "error": kind, "path": path, "message": e.to_string() }).to_string()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Backtest(a) => cmd_backtest(&a, false),
        Command::Compare(a) => cmd_backtest(&a, true),
        Command::Train(a) => cmd_train(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Stats(a) => cmd_stats(&a),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.into(),
        source: e,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn header_line(hash: &str, seed: u64) -> String {
    format!("config_hash={hash}, seed={seed}")
}

/// Loads the config and applies command-line overrides.
pub fn resolve_run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = &a.pipelines {
        cfg.pipelines = p.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if let Some(m) = a.policy_mode {
        cfg.policy_mode = m;
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    for p in [&cfg.checkpoint_b3, &cfg.checkpoint_kbpt].into_iter().flatten() {
        if !p.exists() {
            return Err(Error::Io {
                path: p.clone(),
                source: std::io::ErrorKind::NotFound.into(),
            });
        }
    }
    Ok(cfg)
}

fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `data` path".into()))?;
    let load = load_csv(path)?;
    if load.dropped > 0 {
        log::warn!("{}: skipped {} rows with missing or non-positive prices", path.display(), load.dropped);
    }
    split(&load.series, cfg.in_sample_len)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| Error::Config("no output directory: set `out` or pass --out".into()))
}

type Outcome = (String, Result<(Prepared, BacktestResult)>);

fn cmd_backtest(a: &RunArgs, parallel: bool) -> Result<()> {
    let cfg = resolve_run_config(a)?;
    let out = out_dir(&cfg)?;
    let data = load_split(&cfg)?;
    let specs = cfg.pipeline_specs()?;
    let ecfg = cfg.engine_config();
    let outcomes: Vec<Outcome> = if parallel {
        engine::compare(&specs, &data, &ecfg)
    } else {
        let mut v = Vec::new();
        for p in &specs {
            v.push((p.name.clone(), Ok(engine::run_pipeline(p, &data, &ecfg)?)));
        }
        v
    };
    write_outputs(&out, &cfg, &data.out_of_sample, &outcomes)
}

/// Writes pnl.csv, ledger.csv and stats.json for a set of pipeline outcomes.
pub fn write_outputs(out: &Path, cfg: &RunConfig, series: &QuoteSeries, outcomes: &[Outcome]) -> Result<()> {
    let hash = cfg.hash();
    let header = header_line(&hash, cfg.seed);
    let ok: Vec<&BacktestResult> = outcomes.iter().filter_map(|(_, r)| r.as_ref().ok().map(|x| &x.1)).collect();

    let path = out.join("pnl.csv");
    let mut w = create(&path)?;
    let mut body = format!("# {header}\nday,date");
    for r in &ok {
        body.push(',');
        body.push_str(&r.name);
    }
    body.push('\n');
    for (d, date) in series.dates().iter().enumerate() {
        body.push_str(&format!("{d},{date}"));
        for r in &ok {
            body.push_str(&format!(",{}", r.pnl[d]));
        }
        body.push('\n');
    }
    w.write_all(body.as_bytes()).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;

    let path = out.join("ledger.csv");
    let named: Vec<(&str, &[_])> = ok.iter().map(|r| (r.name.as_str(), r.ledger.as_slice())).collect();
    write_named_ledgers_csv(create(&path)?, &named, &[header, format!("horizon={}", series.len())])?;

    let entries: Vec<serde_json::Value> = outcomes
        .iter()
        .map(|(name, r)| match r {
            Ok((prep, res)) => json!({
                "name": name,
                "pipeline": prep.pipeline,
                "stats": res.stats,
                "observation_mse_db": to_db(res.observation_mse()),
                "rho": (prep.pipeline.model != ModelKind::Ci).then(|| prep.calibration.spec.rho()),
                "train_report": prep.report,
                "error": res.error,
            }),
            Err(e) => json!({ "name": name, "error": e.to_string() }),
        })
        .collect();
    let doc = json!({
        "config_hash": hash,
        "seed": cfg.seed,
        "horizon_days": series.len(),
        "first_date": series.dates().first(),
        "forced_close_at_horizon": true,
        "pipelines": entries,
    });
    write_json(&out.join("stats.json"), &doc)
}

fn write_json(path: &Path, doc: &serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, doc).map_err(|e| io_err(path)(e.into()))?;
    writeln!(w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = resolve_run_config(a)?;
    let out = out_dir(&cfg)?;
    let data = load_split(&cfg)?;
    let ecfg = cfg.engine_config();
    let learned: Vec<PipelineSpec> = cfg
        .pipeline_specs()?
        .into_iter()
        .filter(|p| p.tracker == Tracker::LearnedGain)
        .collect();
    if learned.is_empty() {
        return Err(Error::Config("no learned-gain pipeline (B3 or KBPT) selected".into()));
    }
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let hash = cfg.hash();
    let mut reports = Vec::new();
    for p in &learned {
        let cal = calibrate(p.model, &data, &ecfg)?;
        let td = TrainData {
            spec: cal.spec,
            series: &data.in_sample,
            x0: cal.x0_in_sample.clone(),
        };
        let (net2, mut report, net1) = train_full(&td, &ecfg.train)?;
        let train_json = serde_json::to_value(&ecfg.train).expect("train config serializes");
        for (stage, net) in [(1u8, &net1), (2u8, &net2)] {
            let file = out.join(format!("{}_stage{stage}.ckpt", p.name.to_lowercase()));
            let meta = CheckpointMeta {
                seed: cfg.seed,
                stage,
                model: cal.spec,
                train: json!({ "config_hash": hash, "train": train_json }),
            };
            save_checkpoint_file(&file, net, &meta)?;
            report.checkpoints.push(file.display().to_string());
        }
        reports.push(json!({ "name": p.name, "report": report }));
    }
    let doc = json!({ "config_hash": hash, "seed": cfg.seed, "pipelines": reports });
    write_json(&out.join("train_report.json"), &doc)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.spec.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    let path = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output file: set `out` or pass --out".into()))?;
    let (series, _) = generate_synthetic(&cfg.spec)?;
    let mut w = create(&path)?;
    let mut body = format!("# {}\n# synthetic: {}\ndate,alpha,beta\n", header_line(&config_hash(&cfg.spec), cfg.spec.seed), cfg.spec.label);
    for ((d, a), b) in series.dates().iter().zip(series.alpha()).zip(series.beta()) {
        body.push_str(&format!("{d},{a},{b}\n"));
    }
    w.write_all(body.as_bytes()).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))
}

/// Reads `key=value` pairs from the leading `#` comment lines of a file.
fn header_value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .flat_map(|l| l.trim_start_matches('#').split(','))
        .filter_map(|kv| kv.trim().split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v.trim().to_string())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.ledger).map_err(io_err(&a.ledger))?;
    let horizon = match a.horizon {
        Some(h) => h,
        None => header_value(&text, "horizon")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config(format!("{} has no horizon header; pass --horizon", a.ledger.display())))?,
    };
    let groups = read_named_ledgers_csv(text.as_bytes())?;
    let mut entries = Vec::new();
    for (name, ledger) in &groups {
        entries.push(json!({ "name": name, "stats": compute_stats(ledger, horizon)? }));
    }
    let doc = json!({
        "config_hash": header_value(&text, "config_hash"),
        "seed": header_value(&text, "seed").and_then(|s| s.parse::<u64>().ok()),
        "horizon_days": horizon,
        "pipelines": entries,
    });
    match &a.out {
        Some(dir) => write_json(&dir.join("stats.json"), &doc),
        None => {
            println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
            Ok(())
        }
    }
}
