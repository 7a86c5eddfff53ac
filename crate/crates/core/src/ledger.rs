//! Transaction accounting: rewards with a time-varying hedge, cumulative
//! PnL and trade statistics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub t_open: usize,
    pub t_close: usize,
    pub op_open: i8,
    pub zeta: i8,
    pub h_open: f64,
    pub h_close: f64,
    pub alpha_open: f64,
    pub alpha_close: f64,
    pub beta_open: f64,
    pub beta_close: f64,
    pub reward: f64,
    /// Closed by the end of the horizon rather than by the policy.
    #[serde(default)]
    pub forced: bool,
}

/// `sign(β − ĥ α)` with `sign(0) = +1`.
pub fn zeta(beta: f64, hedge: f64, alpha: f64) -> i8 {
    if beta - hedge * alpha >= 0.0 {
        1
    } else {
        -1
    }
}

/// Value of the $1 split position at one end: `(β − |h| α) / (1 + |h|)`.
pub fn leg_value<T: Real>(hedge: T, alpha: T, beta: T) -> T {
    let ah = hedge.abs();
    (beta - ah * alpha) / (T::one() + ah)
}

/// `r_β + r_α` for a transaction, generic so it can sit on the tape.
/// `direction` is `op_open · ζ`.
pub fn reward_terms<T: Real>(direction: T, h_open: T, h_close: T, a_open: T, a_close: T, b_open: T, b_close: T) -> T {
    let one = T::one();
    let (ho, hc) = (h_open.abs(), h_close.abs());
    let r_beta = (b_close / (one + hc) - b_open / (one + ho)) * direction;
    let r_alpha = (ho * a_open / (one + ho) - hc * a_close / (one + hc)) * direction;
    r_beta + r_alpha
}

impl Transaction {
    /// Builds a transaction and fills in its reward.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        t_open: usize,
        t_close: usize,
        op_open: i8,
        h_open: f64,
        h_close: f64,
        alpha: (f64, f64),
        beta: (f64, f64),
        forced: bool,
    ) -> Self {
        let mut tx = Transaction {
            t_open,
            t_close,
            op_open,
            zeta: zeta(beta.0, h_open, alpha.0),
            h_open,
            h_close,
            alpha_open: alpha.0,
            alpha_close: alpha.1,
            beta_open: beta.0,
            beta_close: beta.1,
            reward: 0.0,
            forced,
        };
        tx.reward = transaction_reward(&tx);
        tx
    }
}

pub fn transaction_reward(tx: &Transaction) -> f64 {
    reward_terms(
        (tx.op_open * tx.zeta) as f64,
        tx.h_open,
        tx.h_close,
        tx.alpha_open,
        tx.alpha_close,
        tx.beta_open,
        tx.beta_close,
    )
}

/// Cumulative realized PnL per day over `0..horizon`.
pub fn pnl_series(ledger: &[Transaction], horizon: usize) -> Result<Vec<f64>> {
    if ledger.windows(2).any(|w| w[1].t_close < w[0].t_close) {
        return Err(Error::Unsorted);
    }
    let mut out = Vec::with_capacity(horizon);
    let mut acc = 0.0;
    let mut next = 0;
    for t in 0..horizon {
        while next < ledger.len() && ledger[next].t_close <= t {
            acc += ledger[next].reward;
            next += 1;
        }
        out.push(acc);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeStats {
    pub n_trades: usize,
    pub final_pnl: f64,
    pub annual_return_pct: f64,
    pub mean_return_per_trade_pct: Option<f64>,
    pub avg_holding_days: Option<f64>,
    pub avg_days_between_returns: Option<f64>,
    pub forced_closes: usize,
}

pub fn compute_stats(ledger: &[Transaction], horizon_days: usize) -> Result<TradeStats> {
    if horizon_days == 0 {
        return Err(Error::InvalidSpec("horizon must be positive".into()));
    }
    let n = ledger.len();
    // Folding from +0.0 keeps an empty ledger from reporting -0.0.
    let total = ledger.iter().fold(0.0, |acc, t| acc + t.reward);
    let mean = |xs: &mut dyn Iterator<Item = f64>, k: usize| {
        if k == 0 {
            None
        } else {
            Some(xs.sum::<f64>() / k as f64)
        }
    };
    Ok(TradeStats {
        n_trades: n,
        final_pnl: total,
        annual_return_pct: total * 100.0 * TRADING_DAYS_PER_YEAR / horizon_days as f64,
        mean_return_per_trade_pct: mean(&mut ledger.iter().map(|t| t.reward * 100.0), n),
        avg_holding_days: mean(&mut ledger.iter().map(|t| (t.t_close - t.t_open) as f64), n),
        avg_days_between_returns: mean(
            &mut ledger.windows(2).map(|w| w[1].t_close as f64 - w[0].t_close as f64),
            n.saturating_sub(1),
        ),
        forced_closes: ledger.iter().filter(|t| t.forced).count(),
    })
}

/// One transaction per row, with optional leading `#` comment lines.
pub fn write_ledger_csv<W: Write>(mut out: W, ledger: &[Transaction], comments: &[String]) -> Result<()> {
    let io = |e: std::io::Error| Error::Io {
        path: "<ledger>".into(),
        source: e,
    };
    for c in comments {
        writeln!(out, "# {c}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(out);
    if ledger.is_empty() {
        w.write_record(LEDGER_HEADER).map_err(|e| Error::Io {
            path: "<ledger>".into(),
            source: e.into(),
        })?;
    }
    for tx in ledger {
        w.serialize(tx).map_err(|e| Error::Io {
            path: "<ledger>".into(),
            source: e.into(),
        })?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

const LEDGER_HEADER: [&str; 12] = [
    "t_open",
    "t_close",
    "op_open",
    "zeta",
    "h_open",
    "h_close",
    "alpha_open",
    "alpha_close",
    "beta_open",
    "beta_close",
    "reward",
    "forced",
];

pub fn read_ledger_csv<R: Read>(input: R) -> Result<Vec<Transaction>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        let tx: Transaction = rec.map_err(|e| Error::Malformed {
            row: i + 2,
            message: e.to_string(),
        })?;
        out.push(tx);
    }
    Ok(out)
}

/// Several ledgers in one file, keyed by a leading `pipeline` column.
pub fn write_named_ledgers_csv<W: Write>(
    mut out: W,
    ledgers: &[(&str, &[Transaction])],
    comments: &[String],
) -> Result<()> {
    let io = |e: std::io::Error| Error::Io {
        path: "<ledger>".into(),
        source: e,
    };
    for c in comments {
        writeln!(out, "# {c}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io {
        path: "<ledger>".into(),
        source: e.into(),
    };
    let mut header = vec!["pipeline"];
    header.extend(LEDGER_HEADER);
    w.write_record(&header).map_err(csv_err)?;
    for (name, ledger) in ledgers {
        for tx in ledger.iter() {
            w.write_record([
                name.to_string(),
                tx.t_open.to_string(),
                tx.t_close.to_string(),
                tx.op_open.to_string(),
                tx.zeta.to_string(),
                tx.h_open.to_string(),
                tx.h_close.to_string(),
                tx.alpha_open.to_string(),
                tx.alpha_close.to_string(),
                tx.beta_open.to_string(),
                tx.beta_close.to_string(),
                tx.reward.to_string(),
                tx.forced.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads a ledger file, grouping rows by their `pipeline` column in order of
/// first appearance. Files without that column form one unnamed group.
pub fn read_named_ledgers_csv<R: Read>(input: R) -> Result<Vec<(String, Vec<Transaction>)>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let malformed = |row: usize, e: csv::Error| Error::Malformed {
        row,
        message: e.to_string(),
    };
    let headers = r.headers().map_err(|e| malformed(1, e))?.clone();
    let name_col = headers.iter().position(|h| h == "pipeline");
    let mut out: Vec<(String, Vec<Transaction>)> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| malformed(i + 2, e))?;
        let tx: Transaction = rec.deserialize(Some(&headers)).map_err(|e| malformed(i + 2, e))?;
        let name = name_col.and_then(|c| rec.get(c)).unwrap_or("").to_string();
        match out.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => v.push(tx),
            None => out.push((name, vec![tx])),
        }
    }
    Ok(out)
}
