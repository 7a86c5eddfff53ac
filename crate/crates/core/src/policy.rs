//! Bollinger-band open/close rules, in hard form for execution and in
//! Gaussian-CDF surrogate form for gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Strict unit step: 1 for `x > 0`, else 0.
pub fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Hold until the z-score changes sign.
    #[default]
    Cumulative,
    /// Close on the day after every open.
    Instantaneous,
}

impl std::str::FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cumulative" => Ok(PolicyMode::Cumulative),
            "instantaneous" => Ok(PolicyMode::Instantaneous),
            other => Err(Error::Config(format!("unknown policy mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PolicyMode::Cumulative => "cumulative",
            PolicyMode::Instantaneous => "instantaneous",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyState {
    tau_open: i64,
    tau_close: i64,
    open_dir: i8,
    z_prev: Option<f64>,
    /// Open action taken on the previous day.
    last_op: i8,
}

impl Default for PolicyState {
    fn default() -> Self {
        PolicyState {
            tau_open: -1,
            tau_close: 0,
            open_dir: 0,
            z_prev: None,
            last_op: 0,
        }
    }
}

/// What the policy did on one day.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Action {
    pub close: bool,
    /// Direction opened today, 0 when nothing opened.
    pub open: i8,
}

impl PolicyState {
    pub fn new() -> Self {
        Self::default()
    }

    /// A state whose only relevant content is `τ_cp − τ_op = gap`, used to
    /// re-evaluate the timing gate of an executed decision.
    pub fn with_gap(gap: i64) -> Self {
        PolicyState {
            tau_open: 0,
            tau_close: gap,
            open_dir: if gap > 0 { 0 } else { 1 },
            ..Self::default()
        }
    }

    pub fn tau_open(&self) -> i64 {
        self.tau_open
    }

    pub fn tau_close(&self) -> i64 {
        self.tau_close
    }

    pub fn open_dir(&self) -> i8 {
        self.open_dir
    }

    pub fn z_prev(&self) -> Option<f64> {
        self.z_prev
    }

    pub fn last_op(&self) -> i8 {
        self.last_op
    }

    pub fn is_open(&self) -> bool {
        self.open_dir != 0
    }

    /// `u(τ_cp − τ_op)`: 1 when no position is held.
    pub fn flat_gate(&self) -> f64 {
        step((self.tau_close - self.tau_open) as f64)
    }

    /// Runs one day: close check, then open check. `z` is `None` while the
    /// indicator is warming up; `allow_open` is false on the final day.
    pub fn advance(&mut self, t: i64, z: Option<f64>, mode: PolicyMode, allow_open: bool) -> Action {
        let close = match mode {
            PolicyMode::Cumulative => z.is_some_and(|z| close_cumulative(z, self) == 1),
            PolicyMode::Instantaneous => close_instantaneous(self) == 1,
        };
        if close {
            self.tau_close = t;
            self.open_dir = 0;
        }
        let open = match z {
            Some(z) if allow_open => open_decision(z, self),
            _ => 0,
        };
        if open != 0 {
            self.tau_open = t;
            self.open_dir = open;
        }
        self.last_op = open;
        if z.is_some() {
            self.z_prev = z;
        }
        Action { close, open }
    }

    /// Closes any open position without consulting the indicator.
    pub fn force_close(&mut self, t: i64) -> bool {
        if !self.is_open() {
            return false;
        }
        self.tau_close = t;
        self.open_dir = 0;
        true
    }
}

/// `op_t = (u(−1−z) − u(z−1))·u(τ_cp − τ_op)`.
pub fn open_decision(z: f64, state: &PolicyState) -> i8 {
    let raw = step(-1.0 - z) - step(z - 1.0);
    (raw * state.flat_gate()) as i8
}

/// `cp_t = u(−z_{t−1} z_t)·(1 − u(τ_cp − τ_op))`.
pub fn close_cumulative(z: f64, state: &PolicyState) -> u8 {
    let Some(z_prev) = state.z_prev else {
        return 0;
    };
    (step(-z_prev * z) * (1.0 - state.flat_gate())) as u8
}

/// `cp_t = u(|op_{t−1}|)`.
pub fn close_instantaneous(state: &PolicyState) -> u8 {
    step(state.last_op.abs() as f64) as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub gamma: f64,
}

pub const DEFAULT_GAMMA: f64 = 0.2;

impl SurrogateConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("surrogate gamma must be > 0, got {gamma}")));
        }
        Ok(SurrogateConfig { gamma })
    }
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            gamma: DEFAULT_GAMMA,
        }
    }
}

/// `Φ(x/γ)`, the smooth replacement of the unit step.
pub fn surrogate_step<T: Real>(x: T, cfg: &SurrogateConfig) -> T {
    x.normal_cdf(cfg.gamma)
}

/// Soft open and cumulative-close decisions. The position-timing gate is
/// evaluated from the executed trajectory and enters as a constant.
pub fn soft_decisions<T: Real>(z: T, z_prev: T, state: &PolicyState, cfg: &SurrogateConfig) -> (T, T) {
    let gate = T::from_f64(crate::scalar::std_normal_cdf(
        (state.tau_close - state.tau_open) as f64 / cfg.gamma,
    ));
    let neg_one = T::from_f64(-1.0);
    let one = T::one();
    let op = (surrogate_step(neg_one - z, cfg) - surrogate_step(z - one, cfg)) * gate;
    let cp = surrogate_step(-(z_prev * z), cfg) * (one - gate);
    (op, cp)
}
