//! Robust M-estimator kernels applied by rescaling a factor's information.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::models::MeasurementModel;

/// Smallest scale a robust factor is ever given; far outliers weaken but
/// never vanish entirely.
pub const MIN_ROBUST_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobustKind {
    None,
    /// Quadratic up to the threshold, linear beyond.
    Huber,
    /// Quadratic up to the threshold, constant beyond.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustKernel {
    pub kind: RobustKind,
    /// Mahalanobis threshold `N_σ`.
    pub n_sigma: f64,
}

impl Default for RobustKernel {
    fn default() -> Self {
        Self::none()
    }
}

impl RobustKernel {
    pub const fn none() -> Self {
        Self {
            kind: RobustKind::None,
            n_sigma: f64::INFINITY,
        }
    }

    pub fn huber(n_sigma: f64) -> Self {
        assert!(n_sigma > 0.0, "Huber threshold must be positive");
        Self {
            kind: RobustKind::Huber,
            n_sigma,
        }
    }

    pub fn constant(n_sigma: f64) -> Self {
        assert!(n_sigma > 0.0, "robust threshold must be positive");
        Self {
            kind: RobustKind::Constant,
            n_sigma,
        }
    }

    pub fn is_robust(&self) -> bool {
        self.kind != RobustKind::None
    }
}

/// Outcome of the robust check during the most recent message pass of a factor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "state", content = "k", rename_all = "lowercase")]
pub enum RobustState {
    #[default]
    Gaussian,
    Scaled(f64),
}

/// Mahalanobis distance `√((z−h)ᵀΛ(z−h))` for an explicit precision.
pub fn mahalanobis_with(
    z: &DVector<f64>,
    predicted: &DVector<f64>,
    precision: &DMatrix<f64>,
) -> f64 {
    let r = z - predicted;
    r.dot(&(precision * &r)).max(0.0).sqrt()
}

/// Mahalanobis distance of the model's measurement at state `x_s`.
pub fn mahalanobis(model: &dyn MeasurementModel, x_s: &DVector<f64>) -> f64 {
    mahalanobis_with(model.measurement(), &model.predict(x_s), model.precision())
}

/// Energy scale factor `k_R` for Mahalanobis distance `m`.
///
/// Huber: `2N/M − N²/M²` beyond the threshold. Constant: `N²/M²`. Both are 1 at
/// and below the threshold, and the result is clamped to [`MIN_ROBUST_SCALE`].
pub fn robust_scale(kernel: &RobustKernel, m: f64) -> f64 {
    let n = kernel.n_sigma;
    if kernel.kind == RobustKind::None || m <= n {
        return 1.0;
    }
    let k = match kernel.kind {
        RobustKind::Huber => 2.0 * n / m - (n * n) / (m * m),
        RobustKind::Constant => (n * n) / (m * m),
        RobustKind::None => unreachable!(),
    };
    k.clamp(MIN_ROBUST_SCALE, 1.0)
}
