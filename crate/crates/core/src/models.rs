//! Measurement models: the `(h, J, z, Λ)` content of a factor.
//!
//! All of the concrete models here are linear; the trait allows non-linear
//! ones and the message-passing code relinearizes those on demand.

use std::fmt;

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{GbpError, Result};

/// The probabilistic content of one factor.
///
/// `x` passed to [`predict`](Self::predict) and [`jacobian`](Self::jacobian)
/// is the stacked state of the connected variables, in connection order.
pub trait MeasurementModel: fmt::Debug + Send + Sync {
    /// Short tag used in snapshots (`"anchor"`, `"relative"`, ...).
    fn kind(&self) -> &'static str;
    /// Dimension of each connected variable, in connection order.
    fn block_dims(&self) -> Vec<usize>;
    /// Observed measurement `z`.
    fn measurement(&self) -> &DVector<f64>;
    /// Measurement precision `Λ_s`.
    fn precision(&self) -> &DMatrix<f64>;
    /// Measurement function `h(x)`.
    fn predict(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `∂h/∂x` evaluated at `x`.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn is_linear(&self) -> bool {
        true
    }

    fn state_dim(&self) -> usize {
        self.block_dims().iter().sum()
    }
}

fn isotropic_precision(dim: usize, sigma: f64) -> DMatrix<f64> {
    DMatrix::identity(dim, dim) / (sigma * sigma)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(GbpError::InvalidArgument(format!(
            "standard deviation must be positive, got {sigma}"
        )))
    }
}

/// Fraction of the way from `x_m1` to `x_m2` at which `x_s` sits.
pub fn interp_lambda(x_s: f64, x_m1: f64, x_m2: f64) -> Result<f64> {
    if !(x_m1 < x_m2) {
        return Err(GbpError::InvalidArgument(format!(
            "span endpoints must satisfy x_m1 < x_m2, got [{x_m1}, {x_m2}]"
        )));
    }
    if !(x_m1..=x_m2).contains(&x_s) {
        return Err(GbpError::OutOfSpan {
            x: x_s,
            lo: x_m1,
            hi: x_m2,
        });
    }
    Ok((x_s - x_m1) / (x_m2 - x_m1))
}

/// Interpolated height and its Jacobian row `[1-λ, λ]`.
pub fn height_h(lambda: f64, y1: f64, y2: f64) -> (f64, [f64; 2]) {
    ((1.0 - lambda) * y1 + lambda * y2, [1.0 - lambda, lambda])
}

/// Height difference `y2 - y1` and its Jacobian row `[-1, 1]`.
pub fn smoothness_h(y1: f64, y2: f64) -> (f64, [f64; 2]) {
    (y2 - y1, [-1.0, 1.0])
}

/// Displacement `x_j - x_i`.
pub fn relative_pose_h(x_i: &Vector2<f64>, x_j: &Vector2<f64>) -> Vector2<f64> {
    x_j - x_i
}

pub fn anchor_h(x: &DVector<f64>) -> DVector<f64> {
    x.clone()
}

/// Height measurement interpolated between the two neighbouring grid variables.
#[derive(Debug, Clone)]
pub struct HeightMeasurementModel {
    pub x_s: f64,
    pub lambda_interp: f64,
    pub sigma_m: f64,
    z: DVector<f64>,
    precision: DMatrix<f64>,
}

impl HeightMeasurementModel {
    pub fn new(x_s: f64, x_m1: f64, x_m2: f64, y_obs: f64, sigma_m: f64) -> Result<Self> {
        let lambda = interp_lambda(x_s, x_m1, x_m2)?;
        Self::with_lambda(x_s, lambda, y_obs, sigma_m)
    }

    pub fn with_lambda(x_s: f64, lambda_interp: f64, y_obs: f64, sigma_m: f64) -> Result<Self> {
        check_sigma(sigma_m)?;
        if !(0.0..=1.0).contains(&lambda_interp) {
            return Err(GbpError::InvalidArgument(format!(
                "interpolation weight {lambda_interp} outside [0, 1]"
            )));
        }
        Ok(Self {
            x_s,
            lambda_interp,
            sigma_m,
            z: DVector::from_element(1, y_obs),
            precision: isotropic_precision(1, sigma_m),
        })
    }

    pub fn y_obs(&self) -> f64 {
        self.z[0]
    }
}

impl MeasurementModel for HeightMeasurementModel {
    fn kind(&self) -> &'static str {
        "height"
    }
    fn block_dims(&self) -> Vec<usize> {
        vec![1, 1]
    }
    fn measurement(&self) -> &DVector<f64> {
        &self.z
    }
    fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
    fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, height_h(self.lambda_interp, x[0], x[1]).0)
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let (_, row) = height_h(self.lambda_interp, 0.0, 0.0);
        DMatrix::from_row_slice(1, 2, &row)
    }
}

/// Smoothness prior on consecutive heights: `h = y2 - y1`, `z = 0`.
#[derive(Debug, Clone)]
pub struct SmoothnessModel {
    pub sigma_p: f64,
    z: DVector<f64>,
    precision: DMatrix<f64>,
}

impl SmoothnessModel {
    pub fn new(sigma_p: f64) -> Result<Self> {
        check_sigma(sigma_p)?;
        Ok(Self {
            sigma_p,
            z: DVector::zeros(1),
            precision: isotropic_precision(1, sigma_p),
        })
    }
}

impl MeasurementModel for SmoothnessModel {
    fn kind(&self) -> &'static str {
        "smoothness"
    }
    fn block_dims(&self) -> Vec<usize> {
        vec![1, 1]
    }
    fn measurement(&self) -> &DVector<f64> {
        &self.z
    }
    fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
    fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, smoothness_h(x[0], x[1]).0)
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &smoothness_h(0.0, 0.0).1)
    }
}

/// 2D displacement between two points, `h = x_j - x_i`, isotropic noise.
///
/// Used both for pose-graph constraints and for SLAM odometry and landmark
/// observations.
#[derive(Debug, Clone)]
pub struct RelativePose2dModel {
    pub sigma_m: f64,
    z: DVector<f64>,
    precision: DMatrix<f64>,
}

impl RelativePose2dModel {
    pub fn new(z: Vector2<f64>, sigma_m: f64) -> Result<Self> {
        check_sigma(sigma_m)?;
        Ok(Self {
            sigma_m,
            z: DVector::from_column_slice(z.as_slice()),
            precision: isotropic_precision(2, sigma_m),
        })
    }
}

impl MeasurementModel for RelativePose2dModel {
    fn kind(&self) -> &'static str {
        "relative"
    }
    fn block_dims(&self) -> Vec<usize> {
        vec![2, 2]
    }
    fn measurement(&self) -> &DVector<f64> {
        &self.z
    }
    fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
    fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        let h = relative_pose_h(&Vector2::new(x[0], x[1]), &Vector2::new(x[2], x[3]));
        DVector::from_column_slice(h.as_slice())
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            4,
            &[
                -1.0, 0.0, 1.0, 0.0, //
                0.0, -1.0, 0.0, 1.0,
            ],
        )
    }
}

/// Absolute prior on a single variable: identity measurement function.
#[derive(Debug, Clone)]
pub struct UnaryAnchorModel {
    pub sigma: f64,
    z: DVector<f64>,
    precision: DMatrix<f64>,
}

impl UnaryAnchorModel {
    pub fn new(z: DVector<f64>, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if z.is_empty() {
            return Err(GbpError::InvalidArgument(
                "anchor needs a non-empty value".into(),
            ));
        }
        let dim = z.len();
        Ok(Self {
            sigma,
            z,
            precision: isotropic_precision(dim, sigma),
        })
    }
}

impl MeasurementModel for UnaryAnchorModel {
    fn kind(&self) -> &'static str {
        "anchor"
    }
    fn block_dims(&self) -> Vec<usize> {
        vec![self.z.len()]
    }
    fn measurement(&self) -> &DVector<f64> {
        &self.z
    }
    fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
    fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        anchor_h(x)
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.z.len(), self.z.len())
    }
}

/// Several models over the same variables, stacked into one factor.
///
/// The stacked precision is block diagonal, so the linearization is the sum
/// of the parts' linearizations.
#[derive(Debug)]
pub struct CompoundModel {
    parts: Vec<Box<dyn MeasurementModel>>,
    block_dims: Vec<usize>,
    z: DVector<f64>,
    precision: DMatrix<f64>,
}

impl CompoundModel {
    pub fn new(parts: Vec<Box<dyn MeasurementModel>>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| GbpError::InvalidArgument("compound model needs parts".into()))?;
        let block_dims = first.block_dims();
        for p in &parts {
            if p.block_dims() != block_dims {
                return Err(GbpError::DimensionMismatch {
                    expected: block_dims.iter().sum(),
                    actual: p.state_dim(),
                });
            }
        }
        let m: usize = parts.iter().map(|p| p.measurement().len()).sum();
        let mut z = DVector::zeros(m);
        let mut precision = DMatrix::zeros(m, m);
        let mut row = 0;
        for p in &parts {
            let k = p.measurement().len();
            z.rows_mut(row, k).copy_from(p.measurement());
            precision
                .view_mut((row, row), (k, k))
                .copy_from(p.precision());
            row += k;
        }
        Ok(Self {
            parts,
            block_dims,
            z,
            precision,
        })
    }

    pub fn parts(&self) -> &[Box<dyn MeasurementModel>] {
        &self.parts
    }

    fn stack(&self, f: impl Fn(&dyn MeasurementModel) -> DMatrix<f64>) -> DMatrix<f64> {
        let blocks: Vec<DMatrix<f64>> = self.parts.iter().map(|p| f(p.as_ref())).collect();
        let rows = blocks.iter().map(|b| b.nrows()).sum();
        let cols = blocks[0].ncols();
        let mut out = DMatrix::zeros(rows, cols);
        let mut r = 0;
        for b in blocks {
            out.view_mut((r, 0), (b.nrows(), cols)).copy_from(&b);
            r += b.nrows();
        }
        out
    }
}

impl MeasurementModel for CompoundModel {
    fn kind(&self) -> &'static str {
        "compound"
    }
    fn block_dims(&self) -> Vec<usize> {
        self.block_dims.clone()
    }
    fn measurement(&self) -> &DVector<f64> {
        &self.z
    }
    fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
    fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.stack(|p| {
            let h = p.predict(x);
            DMatrix::from_column_slice(h.len(), 1, h.as_slice())
        });
        DVector::from_column_slice(m.as_slice())
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.stack(|p| p.jacobian(x))
    }
    fn is_linear(&self) -> bool {
        self.parts.iter().all(|p| p.is_linear())
    }
}
