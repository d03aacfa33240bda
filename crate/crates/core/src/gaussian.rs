//! Information-form Gaussians.
//!
//! A [`GaussianInfo`] stores `(η, Λ)` with `η = Λμ` and `Λ = Σ⁻¹`. The all-zero
//! instance is valid and stands for "no information"; it has no moment form.
//! Every constructor symmetrizes `Λ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{GbpError, Result};

/// Default cap on the condition number accepted by [`GaussianInfo::from_moments`].
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianInfo {
    eta: DVector<f64>,
    lambda: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentGaussian {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl MomentGaussian {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
            return Err(GbpError::DimensionMismatch {
                expected: mu.len(),
                actual: sigma.nrows(),
            });
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl GaussianInfo {
    pub fn new(eta: DVector<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        if lambda.nrows() != eta.len() || lambda.ncols() != eta.len() {
            return Err(GbpError::DimensionMismatch {
                expected: eta.len(),
                actual: lambda.nrows().max(lambda.ncols()),
            });
        }
        Ok(Self {
            lambda: symmetrize(&lambda),
            eta,
        })
    }

    /// The uninformative Gaussian of dimension `dim`.
    pub fn zeros(dim: usize) -> Self {
        Self {
            eta: DVector::zeros(dim),
            lambda: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    pub fn eta(&self) -> &DVector<f64> {
        &self.eta
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.eta, self.lambda)
    }

    /// True when the precision carries any information at all.
    pub fn is_informative(&self) -> bool {
        self.lambda.iter().any(|v| *v != 0.0)
    }

    pub fn from_moments(m: &MomentGaussian) -> Result<Self> {
        Self::from_moments_with_cap(m, DEFAULT_CONDITION_CAP)
    }

    pub fn from_moments_with_cap(m: &MomentGaussian, condition_cap: f64) -> Result<Self> {
        let sigma = symmetrize(&m.sigma);
        let singular_values = sigma.clone().svd(false, false).singular_values;
        let max = singular_values.max();
        let min = singular_values.min();
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= condition_cap) {
            return Err(GbpError::SingularCovariance { condition });
        }
        let lambda = sigma
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(GbpError::SingularCovariance { condition })?;
        let lambda = symmetrize(&lambda);
        let eta = &lambda * &m.mu;
        Ok(Self { eta, lambda })
    }

    pub fn to_moments(&self) -> Result<MomentGaussian> {
        let chol = self
            .lambda
            .clone()
            .cholesky()
            .ok_or(GbpError::SingularPrecision)?;
        let sigma = symmetrize(&chol.inverse());
        let mu = chol.solve(&self.eta);
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(GbpError::SingularPrecision);
        }
        Ok(MomentGaussian { mu, sigma })
    }

    /// Mean `Λ⁻¹η`, or `None` when `Λ` is not invertible.
    pub fn mean(&self) -> Option<DVector<f64>> {
        let chol = self.lambda.clone().cholesky()?;
        let mu = chol.solve(&self.eta);
        mu.iter().all(|v| v.is_finite()).then_some(mu)
    }

    /// Mean with the zero vector standing in for an unconstrained estimate.
    pub fn mean_or_zero(&self) -> DVector<f64> {
        self.mean().unwrap_or_else(|| DVector::zeros(self.dim()))
    }

    pub fn product(&self, other: &GaussianInfo) -> Result<GaussianInfo> {
        if self.dim() != other.dim() {
            return Err(GbpError::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(GaussianInfo {
            eta: &self.eta + &other.eta,
            lambda: &self.lambda + &other.lambda,
        })
    }

    /// In-place product; panics on dimension mismatch (internal hot path).
    pub(crate) fn accumulate(&mut self, other: &GaussianInfo) {
        self.eta += &other.eta;
        self.lambda += &other.lambda;
    }

    /// Multiplies both `η` and `Λ` by `k`, which scales the exponent by `k`.
    pub fn scaled(&self, k: f64) -> GaussianInfo {
        GaussianInfo {
            eta: &self.eta * k,
            lambda: &self.lambda * k,
        }
    }

    /// Componentwise `(1 - beta) * self + beta * previous`.
    pub fn blend(&self, previous: &GaussianInfo, beta: f64) -> GaussianInfo {
        GaussianInfo {
            eta: &self.eta * (1.0 - beta) + &previous.eta * beta,
            lambda: &self.lambda * (1.0 - beta) + &previous.lambda * beta,
        }
    }

    /// Unnormalized log density `-½xᵀΛx + ηᵀx`.
    pub fn log_density_unnormalized(&self, x: &DVector<f64>) -> f64 {
        -0.5 * x.dot(&(&self.lambda * x)) + self.eta.dot(x)
    }

    /// Permutes whole blocks. `block_dims` partitions the state and
    /// `perm[i]` names the old block that ends up at position `i`.
    pub fn reorder(&self, block_dims: &[usize], perm: &[usize]) -> Result<GaussianInfo> {
        let total: usize = block_dims.iter().sum();
        if total != self.dim() {
            return Err(GbpError::InvalidPermutation(format!(
                "blocks cover {total} dimensions but the Gaussian has {}",
                self.dim()
            )));
        }
        if perm.len() != block_dims.len() {
            return Err(GbpError::InvalidPermutation(format!(
                "permutation has {} entries for {} blocks",
                perm.len(),
                block_dims.len()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(GbpError::InvalidPermutation(format!(
                    "{perm:?} is not a permutation"
                )));
            }
            seen[p] = true;
        }
        let offsets = block_offsets(block_dims);
        let index: Vec<usize> = perm
            .iter()
            .flat_map(|&b| offsets[b]..offsets[b] + block_dims[b])
            .collect();
        Ok(self.select(&index))
    }

    /// Gathers the listed scalar indices, in order.
    fn select(&self, index: &[usize]) -> GaussianInfo {
        let n = index.len();
        let eta = DVector::from_fn(n, |i, _| self.eta[index[i]]);
        let lambda = DMatrix::from_fn(n, n, |i, j| self.lambda[(index[i], index[j])]);
        GaussianInfo { eta, lambda }
    }

    /// Schur-complement marginalization onto the scalar indices in `keep`
    /// (result ordered as `keep`).
    ///
    /// `Λ_ββ` is factorized with Cholesky; if that fails the diagonal gets a
    /// single jitter of `1e-9·(tr(Λ_ββ)/dim + 1)` before giving up with
    /// [`GbpError::SingularBlock`].
    pub fn marginalize(&self, keep: &[usize]) -> Result<GaussianInfo> {
        let n = self.dim();
        if keep.is_empty() {
            return Err(GbpError::InvalidArgument(
                "marginalize needs a non-empty keep set".into(),
            ));
        }
        let mut kept = vec![false; n];
        for &k in keep {
            if k >= n || kept[k] {
                return Err(GbpError::InvalidArgument(format!(
                    "keep set {keep:?} is invalid for dimension {n}"
                )));
            }
            kept[k] = true;
        }
        let drop: Vec<usize> = (0..n).filter(|i| !kept[*i]).collect();
        let alpha = self.select(keep);
        if drop.is_empty() {
            return Ok(alpha);
        }

        let nb = drop.len();
        let eta_b = DVector::from_fn(nb, |i, _| self.eta[drop[i]]);
        let lambda_bb = DMatrix::from_fn(nb, nb, |i, j| self.lambda[(drop[i], drop[j])]);
        let lambda_ab = DMatrix::from_fn(keep.len(), nb, |i, j| self.lambda[(keep[i], drop[j])]);

        let chol = match lambda_bb.clone().cholesky() {
            Some(c) => c,
            None => {
                let eps = 1e-9 * (lambda_bb.trace() / nb as f64 + 1.0);
                let jittered = &lambda_bb + DMatrix::identity(nb, nb) * eps;
                jittered.cholesky().ok_or(GbpError::SingularBlock)?
            }
        };

        // Λ_ββ⁻¹ [η_β | Λ_βα] in one solve.
        let mut rhs = DMatrix::zeros(nb, 1 + keep.len());
        rhs.set_column(0, &eta_b);
        rhs.columns_mut(1, keep.len())
            .copy_from(&lambda_ab.transpose());
        let solved = chol.solve(&rhs);
        if solved.iter().any(|v| !v.is_finite()) {
            return Err(GbpError::SingularBlock);
        }

        let eta = &alpha.eta - &lambda_ab * solved.column(0);
        let lambda = &alpha.lambda - &lambda_ab * solved.columns(1, keep.len());
        Ok(GaussianInfo {
            eta,
            lambda: symmetrize(&lambda),
        })
    }
}

pub(crate) fn block_offsets(block_dims: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(block_dims.len());
    let mut acc = 0;
    for d in block_dims {
        offsets.push(acc);
        acc += d;
    }
    offsets
}
