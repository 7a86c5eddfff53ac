//! State-space formulations of the pair relationship.
//!
//! | kind           | state              | observation | evolution       |
//! |----------------|--------------------|-------------|-----------------|
//! | `Ci`           | `[h, μ]`           | `β`         | `I₂`            |
//! | `PciClegg`     | `[p, s, μ]`        | `[β, α]`    | `diag(1, ρ, 1)` |
//! | `PciProposed`  | `[h, μ, s]`        | `β`         | `diag(1, 1, ρ)` |
//!
//! For `PciClegg` the first state component is the regressor price (the
//! asset quoted as α) tracked as a random walk; its observation row is
//! noiseless and the hedge ratio is the static `static_hedge`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ci,
    PciClegg,
    PciProposed,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ci" => Ok(ModelKind::Ci),
            "pci_clegg" | "clegg" => Ok(ModelKind::PciClegg),
            "pci_proposed" | "pci" => Ok(ModelKind::PciProposed),
            other => Err(Error::InvalidSpec(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceSpec {
    #[serde(rename = "model_kind")]
    kind: ModelKind,
    #[serde(default)]
    rho: f64,
    #[serde(default)]
    static_hedge: f64,
}

impl StateSpaceSpec {
    pub fn new(kind: ModelKind, rho: f64, static_hedge: f64) -> Result<Self> {
        if kind != ModelKind::Ci && !(rho.abs() < 1.0) {
            return Err(Error::InvalidSpec(format!("|rho| must be < 1, got {rho}")));
        }
        if !static_hedge.is_finite() {
            return Err(Error::InvalidSpec("static hedge must be finite".into()));
        }
        Ok(StateSpaceSpec {
            kind,
            rho,
            static_hedge,
        })
    }

    pub fn ci() -> Self {
        StateSpaceSpec {
            kind: ModelKind::Ci,
            rho: 0.0,
            static_hedge: 0.0,
        }
    }

    pub fn pci_proposed(rho: f64) -> Result<Self> {
        Self::new(ModelKind::PciProposed, rho, 0.0)
    }

    pub fn pci_clegg(rho: f64, static_hedge: f64) -> Result<Self> {
        Self::new(ModelKind::PciClegg, rho, static_hedge)
    }

    /// Re-checks invariants after deserialization.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.kind, self.rho, self.static_hedge)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn static_hedge(&self) -> f64 {
        self.static_hedge
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            ModelKind::Ci => 2,
            ModelKind::PciClegg | ModelKind::PciProposed => 3,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            ModelKind::PciClegg => 2,
            ModelKind::Ci | ModelKind::PciProposed => 1,
        }
    }

    /// Diagonal of the evolution matrix.
    pub fn evolution_diag(&self) -> Vec<f64> {
        match self.kind {
            ModelKind::Ci => vec![1.0, 1.0],
            ModelKind::PciClegg => vec![1.0, self.rho, 1.0],
            ModelKind::PciProposed => vec![1.0, 1.0, self.rho],
        }
    }

    pub fn evolution_matrix<T: Real>(&self) -> Matrix<T> {
        let diag: Vec<T> = self.evolution_diag().into_iter().map(T::from_f64).collect();
        Matrix::from_diag(&diag)
    }

    /// `F x` for the diagonal evolution.
    pub fn predict_state<T: Real>(&self, x: &[T]) -> Vec<T> {
        self.evolution_diag()
            .into_iter()
            .zip(x)
            .map(|(f, &xi)| if f == 1.0 { xi } else { T::from_f64(f) * xi })
            .collect()
    }

    /// Observation operator, `obs_dim × state_dim`.
    pub fn observation_operator<T: Real>(&self, alpha: f64) -> Result<Matrix<T>> {
        if !(alpha > 0.0) {
            return Err(Error::NonPositivePrice(alpha));
        }
        let a = T::from_f64(alpha);
        let (o, z) = (T::one(), T::zero());
        Ok(match self.kind {
            ModelKind::Ci => Matrix::from_rows(1, 2, vec![a, o]),
            ModelKind::PciProposed => Matrix::from_rows(1, 3, vec![a, o, o]),
            ModelKind::PciClegg => {
                let h = T::from_f64(self.static_hedge);
                Matrix::from_rows(2, 3, vec![h, o, o, o, z, z])
            }
        })
    }

    /// Observation vector built from the day's prices.
    pub fn observation<T: Real>(&self, alpha: f64, beta: f64) -> Vec<T> {
        match self.kind {
            ModelKind::PciClegg => vec![T::from_f64(beta), T::from_f64(alpha)],
            _ => vec![T::from_f64(beta)],
        }
    }

    /// Hedge ratio implied by a state estimate.
    pub fn hedge<T: Real>(&self, x: &[T]) -> T {
        match self.kind {
            ModelKind::Ci | ModelKind::PciProposed => x[0],
            ModelKind::PciClegg => T::from_f64(self.static_hedge),
        }
    }

    /// Index of the hedge component in the state, when the hedge is tracked.
    pub fn hedge_index(&self) -> Option<usize> {
        match self.kind {
            ModelKind::Ci | ModelKind::PciProposed => Some(0),
            ModelKind::PciClegg => None,
        }
    }

    pub fn spread_index(&self) -> Option<usize> {
        match self.kind {
            ModelKind::Ci => None,
            ModelKind::PciClegg => Some(1),
            ModelKind::PciProposed => Some(2),
        }
    }

    /// Initial state from a least-squares fit `β ≈ h α + μ`; the spread
    /// starts at zero and the Clegg regressor state at the first α.
    pub fn initial_state(&self, hedge: f64, intercept: f64, alpha0: f64) -> Vec<f64> {
        match self.kind {
            ModelKind::Ci => vec![hedge, intercept],
            ModelKind::PciProposed => vec![hedge, intercept, 0.0],
            ModelKind::PciClegg => vec![alpha0, 0.0, intercept],
        }
    }
}
