//! Recurrent gain network and the learned-gain filter step.
//!
//! Architecture: per-feature normalization, a linear input projection, one
//! gated recurrent cell (reset/update/candidate gates in that order) and a
//! linear head emitting the `state_dim × obs_dim` gain row-major.
//!
//! The output head starts at zero, so a fresh network filters by pure
//! prediction; a randomly initialized head can push the closed loop
//! `(I − K gᵀ) F` outside the unit circle and diverge before training starts.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::ssmodel::StateSpaceSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    /// `y_t − y_{t−1}`
    pub obs_diff: bool,
    /// `Δy_t`
    pub innovation: bool,
    /// `x̂_{t−1} − x̂_{t−1|t−2}`
    pub update_diff: bool,
    /// `x̂_{t−1} − x̂_{t−2}`
    pub evolution_diff: bool,
}

impl Default for FeatureSet {
    fn default() -> Self {
        FeatureSet {
            obs_diff: true,
            innovation: true,
            update_diff: true,
            evolution_diff: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainConfig {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub hidden_size: usize,
    pub proj_size: usize,
    pub features: FeatureSet,
}

pub const DEFAULT_HIDDEN: usize = 40;
pub const DEFAULT_PROJ: usize = 16;

impl GainConfig {
    pub fn for_spec(spec: &StateSpaceSpec) -> Self {
        GainConfig {
            state_dim: spec.state_dim(),
            obs_dim: spec.obs_dim(),
            hidden_size: DEFAULT_HIDDEN,
            proj_size: DEFAULT_PROJ,
            features: FeatureSet::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim;
        if n == 0 || self.obs_dim == 0 {
            return Err(Error::InvalidSpec("empty state or observation".into()));
        }
        if self.hidden_size < n * n {
            return Err(Error::InvalidSpec(format!(
                "hidden size {} below state_dim² = {}",
                self.hidden_size,
                n * n
            )));
        }
        if self.proj_size == 0 || self.input_dim() == 0 {
            return Err(Error::InvalidSpec("network has no inputs".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        let f = &self.features;
        let m = self.obs_dim;
        let n = self.state_dim;
        m * (f.obs_diff as usize + f.innovation as usize) + n * (f.update_diff as usize + f.evolution_diff as usize)
    }

    pub fn gain_len(&self) -> usize {
        self.state_dim * self.obs_dim
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub input: usize,
    pub proj: usize,
    pub hidden: usize,
    pub out: usize,
    w_proj: usize,
    b_proj: usize,
    w_ih: usize,
    b_ih: usize,
    w_hh: usize,
    b_hh: usize,
    w_out: usize,
    b_out: usize,
    pub len: usize,
}

impl Layout {
    fn new(cfg: &GainConfig) -> Self {
        let (i, p, h, o) = (cfg.input_dim(), cfg.proj_size, cfg.hidden_size, cfg.gain_len());
        let w_proj = 0;
        let b_proj = w_proj + p * i;
        let w_ih = b_proj + p;
        let b_ih = w_ih + 3 * h * p;
        let w_hh = b_ih + 3 * h;
        let b_hh = w_hh + 3 * h * h;
        let w_out = b_hh + 3 * h;
        let b_out = w_out + o * h;
        Layout {
            input: i,
            proj: p,
            hidden: h,
            out: o,
            w_proj,
            b_proj,
            w_ih,
            b_ih,
            w_hh,
            b_hh,
            w_out,
            b_out,
            len: b_out + o,
        }
    }

    /// `(range, fan_in)` of every block, for initialization; the output
    /// head is last.
    fn blocks(&self) -> [(std::ops::Range<usize>, usize); 8] {
        [
            (self.w_proj..self.b_proj, self.input),
            (self.b_proj..self.w_ih, self.input),
            (self.w_ih..self.b_ih, self.proj),
            (self.b_ih..self.w_hh, self.proj),
            (self.w_hh..self.b_hh, self.hidden),
            (self.b_hh..self.w_out, self.hidden),
            (self.w_out..self.b_out, self.hidden),
            (self.b_out..self.len, self.hidden),
        ]
    }
}

/// Running per-feature mean and scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub momentum: f64,
    pub frozen: bool,
}

pub const NORM_MOMENTUM: f64 = 0.99;

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            momentum: NORM_MOMENTUM,
            frozen: false,
        }
    }

    fn batch_stats(rows: &[Vec<f64>], dim: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Some((mean, scale))
    }

    /// Sets the statistics directly from a batch of feature rows.
    pub fn fit(&mut self, rows: &[Vec<f64>]) {
        if let Some((m, s)) = Self::batch_stats(rows, self.mean.len()) {
            self.mean = m;
            self.scale = s;
        }
    }

    /// Momentum update from a batch of feature rows; no-op when frozen.
    pub fn update(&mut self, rows: &[Vec<f64>]) {
        if self.frozen {
            return;
        }
        if let Some((m, s)) = Self::batch_stats(rows, self.mean.len()) {
            let k = self.momentum;
            for (a, b) in self.mean.iter_mut().zip(m) {
                *a = k * *a + (1.0 - k) * b;
            }
            for (a, b) in self.scale.iter_mut().zip(s) {
                *a = k * *a + (1.0 - k) * b;
            }
        }
    }

    pub fn apply<T: Real>(&self, f: &[T]) -> Vec<T> {
        f.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&x, (&m, &s))| (x - T::from_f64(m)) * T::from_f64(1.0 / s))
            .collect()
    }
}

/// `(K_t, hidden')` from the flat parameters, normalized features and
/// the previous hidden state.
pub fn gain_forward<T: Real>(
    cfg: &GainConfig,
    theta: &[T],
    norm: &Normalizer,
    hidden: &[T],
    features: &[T],
) -> Result<(Matrix<T>, Vec<T>)> {
    let l = cfg.layout();
    debug_assert_eq!(theta.len(), l.len);
    if features.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite("gain network features"));
    }
    let x = norm.apply(features);
    let (i, p, h) = (l.input, l.proj, l.hidden);

    let proj: Vec<T> = (0..p)
        .map(|r| T::affine(&theta[l.w_proj + r * i..l.w_proj + (r + 1) * i], &x, theta[l.b_proj + r]))
        .collect();
    let gi = |r: usize| T::affine(&theta[l.w_ih + r * p..l.w_ih + (r + 1) * p], &proj, theta[l.b_ih + r]);
    let gh = |r: usize| T::affine(&theta[l.w_hh + r * h..l.w_hh + (r + 1) * h], hidden, theta[l.b_hh + r]);

    let mut next = Vec::with_capacity(h);
    for k in 0..h {
        let r = (gi(k) + gh(k)).sigmoid();
        let z = (gi(h + k) + gh(h + k)).sigmoid();
        let n = (gi(2 * h + k) + r * gh(2 * h + k)).tanh();
        next.push(n + z * (hidden[k] - n));
    }

    let gain: Vec<T> = (0..l.out)
        .map(|r| T::affine(&theta[l.w_out + r * h..l.w_out + (r + 1) * h], &next, theta[l.b_out + r]))
        .collect();
    if gain.iter().chain(&next).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gain network activation"));
    }
    Ok((Matrix::from_rows(cfg.state_dim, cfg.obs_dim, gain), next))
}

/// Filter memory carried between learned-gain steps.
#[derive(Clone, Debug, PartialEq)]
pub struct KnetState<T> {
    /// `x̂_{t−1}`
    pub x_hat: Vec<T>,
    /// `x̂_{t−1|t−2}`
    pub x_prior: Vec<T>,
    /// `x̂_{t−2}`
    pub x_hat_prev: Vec<T>,
    pub y_prev: Option<Vec<T>>,
    pub hidden: Vec<T>,
}

impl KnetState<f64> {
    pub fn initial(x0: Vec<f64>, hidden_size: usize) -> Self {
        KnetState {
            x_prior: x0.clone(),
            x_hat_prev: x0.clone(),
            x_hat: x0,
            y_prev: None,
            hidden: vec![0.0; hidden_size],
        }
    }

    /// Lifts a float state into another scalar type (detaching it).
    pub fn lift<U: Real>(&self) -> KnetState<U> {
        let f = |v: &Vec<f64>| v.iter().map(|&x| U::from_f64(x)).collect::<Vec<U>>();
        KnetState {
            x_hat: f(&self.x_hat),
            x_prior: f(&self.x_prior),
            x_hat_prev: f(&self.x_hat_prev),
            y_prev: self.y_prev.as_ref().map(f),
            hidden: f(&self.hidden),
        }
    }
}

impl<T: Real> KnetState<T> {
    pub fn values(&self) -> KnetState<f64> {
        let f = |v: &Vec<T>| v.iter().map(|x| x.value()).collect::<Vec<f64>>();
        KnetState {
            x_hat: f(&self.x_hat),
            x_prior: f(&self.x_prior),
            x_hat_prev: f(&self.x_hat_prev),
            y_prev: self.y_prev.as_ref().map(f),
            hidden: f(&self.hidden),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOut<T> {
    pub y_pred: Vec<T>,
    pub innovation: Vec<T>,
    pub gain: Matrix<T>,
    /// Raw (unnormalized) features fed to the gain source.
    pub features: Vec<T>,
}

fn sub<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// Raw feature vector for the step that consumes `y` with prediction `y_pred`.
pub fn features<T: Real>(set: &FeatureSet, state: &KnetState<T>, y: &[T], y_pred: &[T]) -> Vec<T> {
    let mut f = Vec::new();
    if set.obs_diff {
        match &state.y_prev {
            Some(prev) => f.extend(sub(y, prev)),
            None => f.extend(std::iter::repeat_n(T::zero(), y.len())),
        }
    }
    if set.innovation {
        f.extend(sub(y, y_pred));
    }
    if set.update_diff {
        f.extend(sub(&state.x_hat, &state.x_prior));
    }
    if set.evolution_diff {
        f.extend(sub(&state.x_hat, &state.x_hat_prev));
    }
    f
}

/// One learned-gain filter step. `gain` maps `(features, hidden)` to
/// `(K_t, hidden')`.
pub fn knet_step<T: Real>(
    spec: &StateSpaceSpec,
    set: &FeatureSet,
    state: &KnetState<T>,
    alpha: f64,
    y: &[T],
    gain: impl FnOnce(&[T], &[T]) -> Result<(Matrix<T>, Vec<T>)>,
) -> Result<(KnetState<T>, StepOut<T>)> {
    let g = spec.observation_operator::<T>(alpha)?;
    let x_prior = spec.predict_state(&state.x_hat);
    let y_pred = g.matvec(&x_prior);
    let innovation = sub(y, &y_pred);
    let feats = features(set, state, y, &y_pred);
    let (k, hidden) = gain(&feats, &state.hidden)?;
    let corr = k.matvec(&innovation);
    let x_hat: Vec<T> = x_prior.iter().zip(&corr).map(|(&a, &b)| a + b).collect();
    if x_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("learned-gain state"));
    }
    let next = KnetState {
        x_hat,
        x_prior,
        x_hat_prev: state.x_hat.clone(),
        y_prev: Some(y.to_vec()),
        hidden,
    };
    Ok((
        next,
        StepOut {
            y_pred,
            innovation,
            gain: k,
            features: feats,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainNetwork {
    pub config: GainConfig,
    pub theta: Vec<f64>,
    pub norm: Normalizer,
}

impl GainNetwork {
    /// Uniform `±1/√fan_in` initialization from `seed`, output head at zero.
    pub fn new(config: GainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; layout.len];
        for (range, fan_in) in layout.blocks().into_iter().take(6) {
            let b = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-b, b).map_err(|e| Error::InvalidSpec(e.to_string()))?;
            for v in &mut theta[range] {
                *v = dist.sample(&mut rng);
            }
        }
        let norm = Normalizer::identity(layout.input);
        Ok(GainNetwork { config, theta, norm })
    }

    pub fn zeros(config: GainConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        Ok(GainNetwork {
            theta: vec![0.0; layout.len],
            norm: Normalizer::identity(layout.input),
            config,
        })
    }

    /// Parameter range of the output head.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        let l = self.config.layout();
        l.w_out..l.len
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn forward<T: Real>(&self, theta: &[T], hidden: &[T], features: &[T]) -> Result<(Matrix<T>, Vec<T>)> {
        gain_forward(&self.config, theta, &self.norm, hidden, features)
    }

    /// One filter step with this network's gain, using `theta` (which may
    /// be tape variables standing in for `self.theta`).
    pub fn step<T: Real>(
        &self,
        theta: &[T],
        spec: &StateSpaceSpec,
        state: &KnetState<T>,
        alpha: f64,
        y: &[T],
    ) -> Result<(KnetState<T>, StepOut<T>)> {
        knet_step(spec, &self.config.features, state, alpha, y, |f, h| self.forward(theta, h, f))
    }

    pub fn initial_state(&self, x0: Vec<f64>) -> KnetState<f64> {
        KnetState::initial(x0, self.config.hidden_size)
    }
}

/// Descriptive fields stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub stage: u8,
    pub model: StateSpaceSpec,
    /// Free-form training settings kept alongside the weights.
    #[serde(default)]
    pub train: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: GainConfig,
    meta: CheckpointMeta,
    norm_momentum: f64,
    n_theta: usize,
    n_norm: usize,
}

const CHECKPOINT_FORMAT: &str = "kbpt-gain-v1";

/// Writes a JSON header line followed by the little-endian `f64` payload
/// `theta ‖ norm.mean ‖ norm.scale`.
pub fn save_checkpoint<W: Write>(mut out: W, net: &GainNetwork, meta: &CheckpointMeta) -> Result<()> {
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        config: net.config.clone(),
        meta: meta.clone(),
        norm_momentum: net.norm.momentum,
        n_theta: net.theta.len(),
        n_norm: net.norm.mean.len(),
    };
    let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
    let line = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.write_all(line.as_bytes()).map_err(io)?;
    out.write_all(b"\n").map_err(io)?;
    let mut buf = Vec::with_capacity(8 * (net.theta.len() + 2 * header.n_norm));
    for v in net.theta.iter().chain(&net.norm.mean).chain(&net.norm.scale) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(input: R) -> Result<(GainNetwork, CheckpointMeta)> {
    let mut r = BufReader::new(input);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
    }
    header.config.validate()?;
    let layout = header.config.layout();
    if header.n_theta != layout.len || header.n_norm != layout.input {
        return Err(Error::Checkpoint("payload sizes disagree with the network config".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let want = 8 * (header.n_theta + 2 * header.n_norm);
    if bytes.len() != want {
        return Err(Error::Checkpoint(format!("expected {want} payload bytes, found {}", bytes.len())));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (theta, rest) = vals.split_at(header.n_theta);
    let (mean, scale) = rest.split_at(header.n_norm);
    let net = GainNetwork {
        config: header.config,
        theta: theta.to_vec(),
        norm: Normalizer {
            mean: mean.to_vec(),
            scale: scale.to_vec(),
            momentum: header.norm_momentum,
            frozen: true,
        },
    };
    Ok((net, header.meta))
}

pub fn save_checkpoint_file(path: &Path, net: &GainNetwork, meta: &CheckpointMeta) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(f);
    save_checkpoint(&mut w, net, meta)?;
    w.flush().map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

pub fn load_checkpoint_file(path: &Path) -> Result<(GainNetwork, CheckpointMeta)> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    load_checkpoint(f)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::Session;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::kalman::{kf_step, FilterState, NoiseParams};
    use crate::ssmodel::ModelKind;

    pub(crate) fn randomize_head(net: &mut GainNetwork) {
        let r = net.head_range();
        let b = 1.0 / (net.config.hidden_size as f64).sqrt();
        for (i, v) in net.theta[r].iter_mut().enumerate() {
            *v = b * (i as f64 * 1.37 + 0.5).sin();
        }
    }

    fn cfg() -> GainConfig {
        GainConfig::for_spec(&StateSpaceSpec::pci_proposed(0.8).unwrap())
    }

    #[test]
    fn zero_network_gives_zero_gain() {
        let net = GainNetwork::zeros(cfg()).unwrap();
        let f = vec![0.3; net.config.input_dim()];
        let (k, h) = net.forward(&net.theta, &vec![0.0; 40], &f).unwrap();
        assert!(k.as_slice().iter().all(|&v| v == 0.0));
        assert!(h.iter().all(|&v| v == 0.0));
        assert_eq!((k.rows(), k.cols()), (3, 1));
    }

    #[test]
    fn forward_is_deterministic() {
        let a = GainNetwork::new(cfg(), 7).unwrap();
        let b = GainNetwork::new(cfg(), 7).unwrap();
        assert_eq!(a.theta, b.theta);
        let f: Vec<f64> = (0..a.config.input_dim()).map(|i| i as f64 * 0.1 - 0.3).collect();
        let h = vec![0.05; 40];
        let (k1, h1) = a.forward(&a.theta, &h, &f).unwrap();
        let (k2, h2) = a.forward(&a.theta, &h, &f).unwrap();
        assert_eq!(k1, k2);
        assert_eq!(h1, h2);
        assert_ne!(GainNetwork::new(cfg(), 8).unwrap().theta, a.theta);
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let net = GainNetwork::new(cfg(), 1).unwrap();
        let l = net.config.layout();
        for (range, fan_in) in l.blocks() {
            let b = 1.0 / (fan_in as f64).sqrt();
            assert!(net.theta[range].iter().all(|v| v.abs() <= b));
        }
        assert!(net.theta[net.head_range()].iter().all(|&v| v == 0.0));
        assert!(net.theta[..net.head_range().start].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn hidden_size_must_cover_gain() {
        let mut c = cfg();
        c.hidden_size = 8;
        assert!(GainNetwork::new(c, 0).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut net = GainNetwork::new(cfg(), 3).unwrap();
        randomize_head(&mut net);
        let f: Vec<f64> = (0..net.config.input_dim()).map(|i| (i as f64 * 0.7).sin()).collect();
        let h0: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).cos() * 0.2).collect();
        let out = |theta: &[f64]| net.forward(theta, &h0, &f).unwrap().0[(1, 0)];

        let s = Session::new();
        let th = s.vars(&net.theta);
        let h: Vec<_> = h0.iter().map(|&v| crate::autodiff::Var::constant(v)).collect();
        let fv: Vec<_> = f.iter().map(|&v| crate::autodiff::Var::constant(v)).collect();
        let (k, _) = net.forward(&th, &h, &fv).unwrap();
        let grad = s.backward(&[(k[(1, 0)], 1.0)]).wrt_all(&th);

        let eps = 1e-6;
        for idx in (0..net.theta.len()).step_by(37) {
            let mut p = net.theta.clone();
            p[idx] += eps;
            let up = out(&p);
            p[idx] -= 2.0 * eps;
            let dn = out(&p);
            let fd = (up - dn) / (2.0 * eps);
            assert!((fd - grad[idx]).abs() < 1e-7, "param {idx}: fd {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn forced_zero_gain_is_pure_prediction() {
        let spec = StateSpaceSpec::pci_proposed(0.5).unwrap();
        let set = FeatureSet::default();
        let st = KnetState::initial(vec![1.0, 0.5, 0.2], 4);
        let (next, out) = knet_step(&spec, &set, &st, 2.0, &[9.0], |_, h| Ok((Matrix::zeros(3, 1), h.to_vec()))).unwrap();
        assert_eq!(next.x_hat, vec![1.0, 0.5, 0.1]);
        assert_eq!(out.y_pred, vec![2.0 + 0.5 + 0.1]);
        assert_eq!(out.innovation, vec![9.0 - 2.6]);
    }

    fn equivalence(kind: ModelKind, rho: f64) -> f64 {
        let truth = match kind {
            ModelKind::Ci => vec![1.2, 0.3],
            _ => vec![1.2, 0.3, 0.0],
        };
        let q = vec![1e-3; truth.len()];
        let synth = SyntheticSpec::gaussian(kind, rho, 1000, q.clone(), 1e-2, truth.clone(), 4);
        let (series, _) = generate_synthetic(&synth).unwrap();
        let spec = StateSpaceSpec::new(kind, rho, 0.0).unwrap();
        let noise = NoiseParams::new(q.iter().map(|v| v * v).collect(), vec![1e-4]).unwrap();
        let f = spec.evolution_matrix::<f64>();
        let p0 = Matrix::from_diag(&vec![1e-2; truth.len()]);
        let mut kf = FilterState::initial(truth.clone(), p0, 1);
        let mut kn = KnetState::initial(truth, 4);
        let set = FeatureSet::default();
        let mut worst: f64 = 0.0;
        for t in 0..series.len() {
            let (a, b) = (series.alpha()[t], series.beta()[t]);
            let g = spec.observation_operator::<f64>(a).unwrap();
            let next = kf_step(&kf, &f, &g, &[b], &noise).unwrap();
            let gain = next.gain.clone();
            let (kn_next, _) = knet_step(&spec, &set, &kn, a, &[b], |_, h| Ok((gain, h.to_vec()))).unwrap();
            for (x, y) in next.x_hat.iter().zip(&kn_next.x_hat) {
                worst = worst.max((x - y).abs() / x.abs().max(1e-12));
            }
            kf = next;
            kn = kn_next;
        }
        worst
    }

    #[test]
    fn clamped_gain_reproduces_kalman_filter() {
        assert!(equivalence(ModelKind::Ci, 0.0) < 1e-10);
        assert!(equivalence(ModelKind::PciProposed, 0.8) < 1e-10);
    }

    #[test]
    fn perfect_model_has_zero_innovations() {
        let truth = vec![1.1, 0.4, 0.3];
        let synth = SyntheticSpec::gaussian(ModelKind::PciProposed, 0.6, 200, vec![0.0; 3], 0.0, truth.clone(), 2);
        let (series, _) = generate_synthetic(&synth).unwrap();
        let spec = StateSpaceSpec::pci_proposed(0.6).unwrap();
        let mut net = GainNetwork::new(cfg(), 5).unwrap();
        randomize_head(&mut net);
        // The recorded truth at t=0 is the state after the first evolution,
        // so start from its predecessor.
        let x0 = vec![truth[0], truth[1], truth[2] / 0.6];
        let mut st = net.initial_state(x0);
        for t in 0..series.len() {
            let (next, out) = net.step(&net.theta, &spec, &st, series.alpha()[t], &[series.beta()[t]]).unwrap();
            assert!(out.innovation[0].abs() < 1e-12, "t={t}: {}", out.innovation[0]);
            st = next;
        }
    }

    #[test]
    fn repeated_sequences_match_after_reset() {
        let spec = StateSpaceSpec::pci_proposed(0.8).unwrap();
        let mut net = GainNetwork::new(cfg(), 9).unwrap();
        randomize_head(&mut net);
        let ys = [2.0, 2.1, 2.05, 2.2, 2.15];
        let run = || {
            let mut st = net.initial_state(vec![1.0, 1.0, 0.0]);
            let mut out = Vec::new();
            for &y in &ys {
                let (n, o) = net.step(&net.theta, &spec, &st, 1.0, &[y]).unwrap();
                out.push(o.innovation[0]);
                st = n;
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut net = GainNetwork::new(cfg(), 11).unwrap();
        net.norm.mean = vec![0.1 + 0.2; net.config.input_dim()];
        net.norm.scale = vec![1.0 / 3.0; net.config.input_dim()];
        let meta = CheckpointMeta {
            seed: 11,
            stage: 1,
            model: StateSpaceSpec::pci_proposed(0.8).unwrap(),
            train: serde_json::json!({"eta1": 1e-3}),
        };
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &net, &meta).unwrap();
        let (back, m) = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(m, meta);
        assert!(back.theta.iter().zip(&net.theta).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.norm.mean, net.norm.mean);
        assert_eq!(back.norm.scale, net.norm.scale);

        let truncated = &buf[..buf.len() - 3];
        assert!(load_checkpoint(truncated).is_err());
    }
}
