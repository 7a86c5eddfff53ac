//! Asset-pair price series: CSV ingest, splitting and synthetic generation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssmodel::ModelKind;

/// Aligned daily prices of the pair `(α, β)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuoteSeries {
    pub label: String,
    day_index: Vec<usize>,
    dates: Vec<String>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

/// Result of [`load_csv`].
#[derive(Clone, Debug)]
pub struct CsvLoad {
    pub series: QuoteSeries,
    /// Rows skipped because a price was missing or non-positive.
    pub dropped: usize,
}

impl QuoteSeries {
    /// Builds a series with day indices `first_day..first_day + len`.
    pub fn new(
        label: impl Into<String>,
        first_day: usize,
        dates: Vec<String>,
        alpha: Vec<f64>,
        beta: Vec<f64>,
    ) -> Result<Self> {
        if alpha.len() != beta.len() || dates.len() != alpha.len() {
            return Err(Error::InvalidSpec(format!(
                "column lengths differ: dates={}, alpha={}, beta={}",
                dates.len(),
                alpha.len(),
                beta.len()
            )));
        }
        if let Some(&p) = alpha.iter().chain(&beta).find(|p| !(**p > 0.0) || !p.is_finite()) {
            return Err(Error::NonPositivePrice(p));
        }
        let day_index = (first_day..first_day + alpha.len()).collect();
        Ok(QuoteSeries {
            label: label.into(),
            day_index,
            dates,
            alpha,
            beta,
        })
    }

    /// Convenience constructor with placeholder dates.
    pub fn from_prices(label: impl Into<String>, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let dates = (0..alpha.len()).map(|i| format!("d{i}")).collect();
        Self::new(label, 0, dates, alpha, beta)
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn day_index(&self) -> &[usize] {
        &self.day_index
    }

    pub fn first_day(&self) -> usize {
        self.day_index.first().copied().unwrap_or(0)
    }

    /// Contiguous sub-series; day indices are preserved.
    pub fn window(&self, range: Range<usize>) -> QuoteSeries {
        QuoteSeries {
            label: self.label.clone(),
            day_index: self.day_index[range.clone()].to_vec(),
            dates: self.dates[range.clone()].to_vec(),
            alpha: self.alpha[range.clone()].to_vec(),
            beta: self.beta[range].to_vec(),
        }
    }

    /// This series followed by `next`, which must continue its day indices.
    pub fn concat(&self, next: &QuoteSeries) -> Result<QuoteSeries> {
        if let (Some(&a), Some(&b)) = (self.day_index.last(), next.day_index.first()) {
            if b != a + 1 {
                return Err(Error::InvalidSpec(format!("series do not join: day {a} then day {b}")));
            }
        }
        let join = |x: &[f64], y: &[f64]| [x, y].concat();
        Ok(QuoteSeries {
            label: self.label.clone(),
            day_index: [self.day_index.as_slice(), next.day_index.as_slice()].concat(),
            dates: [self.dates.as_slice(), next.dates.as_slice()].concat(),
            alpha: join(&self.alpha, &next.alpha),
            beta: join(&self.beta, &next.beta),
        })
    }

    /// Last `n` rows (or all of them when shorter).
    pub fn tail(&self, n: usize) -> QuoteSeries {
        let start = self.len().saturating_sub(n);
        self.window(start..self.len())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "date,alpha,beta").map_err(io)?;
        for i in 0..self.len() {
            // `{}` on f64 prints the shortest string that parses back to the same bits.
            writeln!(w, "{},{},{}", self.dates[i], self.alpha[i], self.beta[i]).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Reads a `date,alpha,beta` CSV. Rows with a missing or non-positive price
/// are dropped and counted; the remaining rows are re-indexed from 0.
pub fn load_csv(path: &Path) -> Result<CsvLoad> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);

    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(_) => return Err(Error::TooFewRows),
    };
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(date_col), Some(alpha_col), Some(beta_col)) = (col("date"), col("alpha"), col("beta"))
    else {
        if headers.is_empty() {
            return Err(Error::TooFewRows);
        }
        return Err(Error::Malformed {
            row: 1,
            message: "header must name columns date, alpha, beta".into(),
        });
    };

    let mut dates = Vec::new();
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    let mut dropped = 0;
    for (i, record) in reader.records().enumerate() {
        // Header is row 1.
        let row = i + 2;
        let record = record.map_err(|e| Error::Malformed {
            row,
            message: e.to_string(),
        })?;
        let date = record.get(date_col).unwrap_or("").to_string();
        if !date.is_empty() && NaiveDate::parse_from_str(&date, "%Y-%m-%d").is_err() {
            return Err(Error::Malformed {
                row,
                message: format!("date {date:?} is not YYYY-MM-DD"),
            });
        }
        let parse = |field: Option<&str>, name: &str| -> Result<Option<f64>> {
            match field.unwrap_or("") {
                "" => Ok(None),
                s => s.parse::<f64>().map(Some).map_err(|_| Error::Malformed {
                    row,
                    message: format!("{name} value {s:?} is not a number"),
                }),
            }
        };
        let a = parse(record.get(alpha_col), "alpha")?;
        let b = parse(record.get(beta_col), "beta")?;
        match (a, b) {
            (Some(a), Some(b)) if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() => {
                dates.push(date);
                alpha.push(a);
                beta.push(b);
            }
            _ => dropped += 1,
        }
    }
    if alpha.len() < 2 {
        return Err(Error::TooFewRows);
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} rows with missing or non-positive prices", path.display());
    }
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let series = QuoteSeries::new(label, 0, dates, alpha, beta)?;
    Ok(CsvLoad { series, dropped })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub in_sample: QuoteSeries,
    pub out_of_sample: QuoteSeries,
}

pub fn split(series: &QuoteSeries, in_sample_len: usize) -> Result<DatasetSplit> {
    if in_sample_len == 0 || in_sample_len >= series.len() {
        return Err(Error::SplitOutOfRange {
            in_sample_len,
            len: series.len(),
        });
    }
    Ok(DatasetSplit {
        in_sample: series.window(0..in_sample_len),
        out_of_sample: series.window(in_sample_len..series.len()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    /// Unit-variance-normalized Student-t with `dof` degrees of freedom.
    StudentT { dof: f64 },
}

/// Geometric random walk driving the exogenous asset α.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaProcess {
    pub start: f64,
    pub drift: f64,
    pub volatility: f64,
}

impl Default for AlphaProcess {
    fn default() -> Self {
        AlphaProcess {
            start: 1.0,
            drift: 0.0,
            volatility: 0.005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub model: ModelKind,
    /// Autoregression coefficient of the spread; `|rho| ≤ 1` is accepted here.
    pub rho: f64,
    /// Hedge used in the observation row of the Clegg model.
    #[serde(default)]
    pub static_hedge: f64,
    pub length: usize,
    pub noise_family: NoiseFamily,
    /// Standard deviation of each state's process noise.
    pub state_scales: Vec<f64>,
    pub obs_scale: f64,
    pub initial_state: Vec<f64>,
    #[serde(default)]
    pub alpha: AlphaProcess,
    /// Deterministic per-step drift added to the hedge component.
    #[serde(default)]
    pub hedge_trend: f64,
    pub seed: u64,
    #[serde(default = "default_start_date")]
    pub start_date: String,
    #[serde(default = "default_label")]
    pub label: String,
}

fn default_start_date() -> String {
    "2000-01-03".into()
}

fn default_label() -> String {
    "synthetic".into()
}

impl SyntheticSpec {
    /// A Gaussian spec for `model` with the given scales; everything else defaulted.
    pub fn gaussian(
        model: ModelKind,
        rho: f64,
        length: usize,
        state_scales: Vec<f64>,
        obs_scale: f64,
        initial_state: Vec<f64>,
        seed: u64,
    ) -> Self {
        SyntheticSpec {
            model,
            rho,
            static_hedge: 0.0,
            length,
            noise_family: NoiseFamily::Gaussian,
            state_scales,
            obs_scale,
            initial_state,
            alpha: AlphaProcess::default(),
            hedge_trend: 0.0,
            seed,
            start_date: default_start_date(),
            label: default_label(),
        }
    }

    fn state_dim(&self) -> usize {
        match self.model {
            ModelKind::Ci => 2,
            _ => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.length < 2 {
            return bad(format!("length must be >= 2, got {}", self.length));
        }
        if let NoiseFamily::StudentT { dof } = self.noise_family {
            if !(dof > 2.0) {
                return bad(format!("student-t dof must be > 2, got {dof}"));
            }
        }
        let n = self.state_dim();
        if self.state_scales.len() != n || self.initial_state.len() != n {
            return bad(format!("state vectors must have length {n}"));
        }
        if self
            .state_scales
            .iter()
            .chain([&self.obs_scale, &self.alpha.volatility])
            .any(|s| !(*s >= 0.0))
        {
            return bad("noise scales must be >= 0".into());
        }
        if !(self.rho.abs() <= 1.0) {
            return bad(format!("|rho| must be <= 1, got {}", self.rho));
        }
        if self.model != ModelKind::PciClegg && !(self.alpha.start > 0.0) {
            return bad("alpha start must be positive".into());
        }
        if NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d").is_err() {
            return bad(format!("start date {:?} is not YYYY-MM-DD", self.start_date));
        }
        Ok(())
    }
}

struct NoiseSampler {
    family: NoiseFamily,
    student: Option<StudentT<f64>>,
}

impl NoiseSampler {
    fn new(family: NoiseFamily) -> Self {
        let student = match family {
            NoiseFamily::StudentT { dof } => Some(StudentT::new(dof).expect("dof validated")),
            NoiseFamily::Gaussian => None,
        };
        NoiseSampler { family, student }
    }

    /// Zero-mean, unit-variance draw.
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match (self.family, &self.student) {
            (NoiseFamily::StudentT { dof }, Some(t)) => t.sample(rng) * ((dof - 2.0) / dof).sqrt(),
            _ => StandardNormal.sample(rng),
        }
    }
}

/// Consecutive weekdays starting at `start` (rolled forward off weekends).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Simulates the chosen dynamics forward. Returns the price series and the
/// ground-truth state trajectory (one state vector per day).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(QuoteSeries, Vec<Vec<f64>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = NoiseSampler::new(spec.noise_family);
    let n = spec.state_dim();
    let diag: Vec<f64> = match spec.model {
        ModelKind::Ci => vec![1.0, 1.0],
        ModelKind::PciClegg => vec![1.0, spec.rho, 1.0],
        ModelKind::PciProposed => vec![1.0, 1.0, spec.rho],
    };

    let mut x = spec.initial_state.clone();
    let mut alpha_t = spec.alpha.start;
    let mut alpha = Vec::with_capacity(spec.length);
    let mut beta = Vec::with_capacity(spec.length);
    let mut states = Vec::with_capacity(spec.length);

    for t in 0..spec.length {
        // Draw order per step: α shock, state shocks, observation shock.
        let alpha_shock: f64 = StandardNormal.sample(&mut rng);
        let state_shocks: Vec<f64> = (0..n).map(|_| noise.draw(&mut rng)).collect();
        let obs_shock = noise.draw(&mut rng);

        if t > 0 {
            alpha_t *= (spec.alpha.drift + spec.alpha.volatility * alpha_shock).exp();
            for i in 0..n {
                x[i] = diag[i] * x[i] + spec.state_scales[i] * state_shocks[i];
            }
            if spec.model != ModelKind::PciClegg {
                x[0] += spec.hedge_trend;
            }
        }
        let v = spec.obs_scale * obs_shock;
        let (a, b) = match spec.model {
            ModelKind::Ci => (alpha_t, x[0] * alpha_t + x[1] + v),
            ModelKind::PciProposed => (alpha_t, x[0] * alpha_t + x[1] + x[2] + v),
            ModelKind::PciClegg => (x[0], spec.static_hedge * x[0] + x[1] + x[2] + v),
        };
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "simulated non-positive price at step {t} (alpha={a}, beta={b})"
            )));
        }
        alpha.push(a);
        beta.push(b);
        states.push(x.clone());
    }

    let start = NaiveDate::parse_from_str(&spec.start_date, "%Y-%m-%d").expect("validated");
    let dates = business_days(start, spec.length)
        .into_iter()
        .map(|d| d.format("%Y-%m-%d").to_string())
        .collect();
    let series = QuoteSeries::new(spec.label.clone(), 0, dates, alpha, beta)?;
    Ok((series, states))
}
