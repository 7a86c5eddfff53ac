//! Model-based Kalman filtering over any [`StateSpaceSpec`] and estimation
//! of the static parameters the baselines need.

use serde::{Deserialize, Serialize};

use crate::data::QuoteSeries;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::ssmodel::{ModelKind, StateSpaceSpec};

/// Number of leading points used for the least-squares warm start.
pub const INIT_WINDOW: usize = 100;

#[derive(Clone, Debug)]
pub struct FilterState<T> {
    /// Posterior estimate `x̂_t`.
    pub x_hat: Vec<T>,
    /// Prior estimate `x̂_{t|t-1}`.
    pub x_prior: Vec<T>,
    /// Posterior covariance.
    pub p: Matrix<T>,
    pub y_pred: Vec<T>,
    pub innovation: Vec<T>,
    /// `G P_{t|t-1} Gᵀ + R`.
    pub innovation_cov: Matrix<T>,
    pub gain: Matrix<T>,
}

impl<T: Real> FilterState<T> {
    /// State before the first observation.
    pub fn initial(x0: Vec<T>, p0: Matrix<T>, obs_dim: usize) -> Self {
        let n = x0.len();
        FilterState {
            x_prior: x0.clone(),
            x_hat: x0,
            p: p0,
            y_pred: vec![T::zero(); obs_dim],
            innovation: vec![T::zero(); obs_dim],
            innovation_cov: Matrix::zeros(obs_dim, obs_dim),
            gain: Matrix::zeros(n, obs_dim),
        }
    }

    /// Scalar innovation variance `σ_t^y²` (first observation component).
    pub fn innovation_var(&self) -> T {
        self.innovation_cov[(0, 0)]
    }
}

/// Per-state process-noise and per-observation noise variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams<T> {
    pub q: Vec<T>,
    pub r: Vec<T>,
}

impl<T: Real> NoiseParams<T> {
    pub fn new(q: Vec<T>, r: Vec<T>) -> Result<Self> {
        if q.iter().chain(&r).any(|v| !(v.value() >= 0.0)) {
            return Err(Error::InvalidSpec("noise variances must be non-negative".into()));
        }
        Ok(NoiseParams { q, r })
    }
}

/// One predict/update cycle with a Joseph-form covariance update.
///
/// When the predicted covariance is identically zero the prediction is
/// certain and the gain is zero, whatever the innovation covariance.
pub fn kf_step<T: Real>(
    state: &FilterState<T>,
    f: &Matrix<T>,
    g: &Matrix<T>,
    y: &[T],
    noise: &NoiseParams<T>,
) -> Result<FilterState<T>> {
    let n = state.x_hat.len();
    let m = y.len();
    let x_prior = f.matvec(&state.x_hat);
    let mut p_prior = f.matmul(&state.p).matmul(&f.transpose());
    for i in 0..n {
        p_prior[(i, i)] += noise.q[i];
    }
    let p_prior = p_prior.symmetrized();

    let y_pred = g.matvec(&x_prior);
    let innovation: Vec<T> = y.iter().zip(&y_pred).map(|(&a, &b)| a - b).collect();
    let gt = g.transpose();
    let mut s = g.matmul(&p_prior).matmul(&gt);
    for i in 0..m {
        s[(i, i)] += noise.r[i];
    }

    let certain = p_prior.as_slice().iter().all(|v| v.value() == 0.0);
    let gain = if certain {
        Matrix::zeros(n, m)
    } else {
        p_prior.matmul(&gt).matmul(&s.inverse()?)
    };

    let correction = gain.matvec(&innovation);
    let x_hat: Vec<T> = x_prior.iter().zip(&correction).map(|(&a, &b)| a + b).collect();

    let i_kg = Matrix::identity(n).sub(&gain.matmul(g));
    let r = Matrix::from_diag(&noise.r);
    let p = i_kg
        .matmul(&p_prior)
        .matmul(&i_kg.transpose())
        .add(&gain.matmul(&r).matmul(&gain.transpose()))
        .symmetrized();

    Ok(FilterState {
        x_hat,
        x_prior,
        p,
        y_pred,
        innovation,
        innovation_cov: s,
        gain,
    })
}

/// `z_t = Δy_t / σ_t^y` from the filter's own innovation variance.
pub fn ci_indicator<T: Real>(state: &FilterState<T>) -> Result<T> {
    let var = state.innovation_var();
    if !(var.value() > 0.0) {
        return Err(Error::NonPositiveVariance);
    }
    Ok(state.innovation[0] / var.sqrt())
}

/// `z_t = ŝ_t / σ_t^s` using the posterior variance of the spread component.
pub fn spread_indicator<T: Real>(spec: &StateSpaceSpec, state: &FilterState<T>) -> Result<T> {
    let i = spec
        .spread_index()
        .ok_or_else(|| Error::InvalidSpec("model has no spread state".into()))?;
    let var = state.p[(i, i)];
    if !(var.value() > 0.0) {
        return Err(Error::NonPositiveVariance);
    }
    Ok(state.x_hat[i] / var.sqrt())
}

/// Least-squares fit of `β = h α + μ`. Returns `(h, μ)`.
pub fn estimate_ci_params(alpha: &[f64], beta: &[f64]) -> Result<(f64, f64)> {
    let n = alpha.len();
    if n < 2 || beta.len() != n {
        return Err(Error::SeriesTooShort { needed: 2, got: n });
    }
    let nf = n as f64;
    let ma = alpha.iter().sum::<f64>() / nf;
    let mb = beta.iter().sum::<f64>() / nf;
    let (mut sab, mut saa) = (0.0, 0.0);
    for (&a, &b) in alpha.iter().zip(beta) {
        sab += (a - ma) * (b - mb);
        saa += (a - ma) * (a - ma);
    }
    if !(saa > f64::EPSILON * ma.abs().max(1.0) * nf * f64::EPSILON) || saa == 0.0 {
        return Err(Error::ConstantRegressor);
    }
    let h = sab / saa;
    Ok((h, mb - h * ma))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ar1Estimate {
    pub rho: f64,
    /// Set when every residual was zero and `rho` defaulted to 0.
    pub degenerate: bool,
}

pub const AR1_CLAMP: f64 = 0.999;

/// Least-squares slope of `s_t` on `s_{t-1}` (no intercept), clamped to
/// `[-0.999, 0.999]`.
pub fn estimate_ar1(residuals: &[f64]) -> Result<Ar1Estimate> {
    if residuals.len() < 3 {
        return Err(Error::SeriesTooShort {
            needed: 3,
            got: residuals.len(),
        });
    }
    let (mut num, mut den) = (0.0, 0.0);
    for w in residuals.windows(2) {
        num += w[1] * w[0];
        den += w[0] * w[0];
    }
    if den == 0.0 {
        log::warn!("all-zero residuals; autoregression coefficient defaults to 0");
        return Ok(Ar1Estimate {
            rho: 0.0,
            degenerate: true,
        });
    }
    Ok(Ar1Estimate {
        rho: (num / den).clamp(-AR1_CLAMP, AR1_CLAMP),
        degenerate: false,
    })
}

/// Least-squares residual spread `β − h α − μ` over a window.
pub fn ls_residuals(alpha: &[f64], beta: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
    let (h, mu) = estimate_ci_params(alpha, beta)?;
    let res = alpha.iter().zip(beta).map(|(&a, &b)| b - h * a - mu).collect();
    Ok((h, mu, res))
}

/// Warm-start state and covariance from a least-squares fit over the
/// first [`INIT_WINDOW`] points of `window`.
pub fn initialize(spec: &StateSpaceSpec, window: &QuoteSeries) -> Result<(Vec<f64>, Matrix<f64>)> {
    let n = window.len().min(INIT_WINDOW);
    let (a, b) = (&window.alpha()[..n], &window.beta()[..n]);
    let (h, mu) = match spec.kind() {
        // The hedge is fixed, so only the intercept is fitted.
        ModelKind::PciClegg => {
            let h = spec.static_hedge();
            let mu = a.iter().zip(b).map(|(a, b)| b - h * a).sum::<f64>() / n as f64;
            (h, mu)
        }
        _ => estimate_ci_params(a, b)?,
    };
    let x0 = spec.initial_state(h, mu, window.alpha()[n - 1]);
    let p0 = initial_covariance(&x0);
    Ok((x0, p0))
}

/// `diag(0.1 |x̂_0|² + 1e-4)`.
pub fn initial_covariance(x0: &[f64]) -> Matrix<f64> {
    let d: Vec<f64> = x0.iter().map(|x| 0.1 * x * x + 1e-4).collect();
    Matrix::from_diag(&d)
}

/// Log-spaced candidate grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl LogGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.points <= 1 {
            return vec![self.min];
        }
        let (lo, hi) = (self.min.log10(), self.max.log10());
        (0..self.points)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (self.points - 1) as f64))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max >= self.min && self.points >= 1) {
            return Err(Error::InvalidSpec(format!("bad grid {self:?}")));
        }
        Ok(())
    }
}

pub const DEFAULT_Q_GRID: LogGrid = LogGrid {
    min: 1e-10,
    max: 1e-2,
    points: 17,
};

pub const DEFAULT_R_GRID: LogGrid = LogGrid {
    min: 1e-8,
    max: 1e0,
    points: 17,
};

/// Runs the filter over a whole series, returning every intermediate state.
pub fn run_filter(
    spec: &StateSpaceSpec,
    series: &QuoteSeries,
    x0: &[f64],
    p0: &Matrix<f64>,
    noise: &NoiseParams<f64>,
) -> Result<Vec<FilterState<f64>>> {
    let f = spec.evolution_matrix::<f64>();
    let mut state = FilterState::initial(x0.to_vec(), p0.clone(), spec.obs_dim());
    let mut out = Vec::with_capacity(series.len());
    for t in 0..series.len() {
        let (a, b) = (series.alpha()[t], series.beta()[t]);
        let g = spec.observation_operator::<f64>(a)?;
        state = kf_step(&state, &f, &g, &spec.observation(a, b), noise)?;
        if state.x_hat.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step: t });
        }
        out.push(state.clone());
    }
    Ok(out)
}

/// Gaussian innovation log-likelihood of a filter run.
pub fn innovation_log_likelihood(states: &[FilterState<f64>]) -> Result<f64> {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut ll = 0.0;
    for st in states {
        let s = &st.innovation_cov;
        let m = s.rows();
        let det = match m {
            1 => s[(0, 0)],
            2 => s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)],
            _ => return Err(Error::InvalidSpec("observation dimension > 2".into())),
        };
        if !(det > 0.0) {
            return Err(Error::NonPositiveVariance);
        }
        let si = s.inverse()?;
        let quad = T2::quad(&si, &st.innovation);
        ll -= 0.5 * (det.ln() + quad + m as f64 * ln2pi);
    }
    Ok(ll)
}

struct T2;

impl T2 {
    fn quad(a: &Matrix<f64>, v: &[f64]) -> f64 {
        let av = a.matvec(v);
        av.iter().zip(v).map(|(x, y)| x * y).sum()
    }
}

/// Builds the noise parameters for one `(q, r)` grid candidate.
///
/// The Clegg regressor state carries the empirical variance of α's daily
/// changes and its observation row is noiseless; `q` and `r` apply to the
/// remaining components.
pub fn noise_for(spec: &StateSpaceSpec, series: &QuoteSeries, q: f64, r: f64) -> NoiseParams<f64> {
    match spec.kind() {
        ModelKind::PciClegg => {
            let diffs: Vec<f64> = series.alpha().windows(2).map(|w| w[1] - w[0]).collect();
            let n = diffs.len().max(1) as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
            NoiseParams {
                q: vec![var.max(1e-12), q, q],
                r: vec![r, 0.0],
            }
        }
        _ => NoiseParams {
            q: vec![q; spec.state_dim()],
            r: vec![r],
        },
    }
}

/// Grid search over `(q, r)` maximizing the innovation log-likelihood.
/// Candidates whose run fails (divergence, singular covariance) are skipped.
pub fn estimate_noise(
    series: &QuoteSeries,
    spec: &StateSpaceSpec,
    q_grid: &LogGrid,
    r_grid: &LogGrid,
) -> Result<NoiseParams<f64>> {
    if series.len() < INIT_WINDOW {
        return Err(Error::SeriesTooShort {
            needed: INIT_WINDOW,
            got: series.len(),
        });
    }
    q_grid.validate()?;
    r_grid.validate()?;
    let (x0, p0) = initialize(spec, series)?;
    let mut best: Option<(f64, NoiseParams<f64>)> = None;
    for &q in &q_grid.values() {
        for &r in &r_grid.values() {
            let noise = noise_for(spec, series, q, r);
            let Ok(states) = run_filter(spec, series, &x0, &p0, &noise) else {
                continue;
            };
            let Ok(ll) = innovation_log_likelihood(&states) else {
                continue;
            };
            // Strict improvement keeps the first (smallest) candidate on ties.
            if best.as_ref().is_none_or(|(b, _)| ll > *b) {
                best = Some((ll, noise));
            }
        }
    }
    best.map(|(_, n)| n)
        .ok_or_else(|| Error::InvalidSpec("no noise candidate produced a valid filter run".into()))
}
