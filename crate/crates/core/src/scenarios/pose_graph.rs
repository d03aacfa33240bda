//! Seeded random 2D pose graphs with relative measurements and anchors.

use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GbpError, Result};
use crate::graph::{FactorGraph, FactorId};
use crate::models::{RelativePose2dModel, UnaryAnchorModel};

pub const WEAK_ANCHOR_SIGMA: f64 = 100.0;
pub const STRONG_ANCHOR_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraphConfig {
    pub n_vars: usize,
    pub n_meas: usize,
    /// Side of the square the ground truth is scattered over.
    pub scene_scale: f64,
    pub sigma_m: f64,
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    /// Std dev of the offset between a weak anchor and the ground truth.
    pub weak_anchor_noise: f64,
}

impl Default for PoseGraphConfig {
    fn default() -> Self {
        let scene_scale = 10.0;
        Self {
            n_vars: 20,
            n_meas: 50,
            scene_scale,
            sigma_m: 0.05 * scene_scale,
            weak_sigma: WEAK_ANCHOR_SIGMA,
            strong_sigma: STRONG_ANCHOR_SIGMA,
            weak_anchor_noise: 0.1 * scene_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraphScenario {
    pub seed: u64,
    pub config: PoseGraphConfig,
    pub ground_truth: Vec<Vector2<f64>>,
    pub anchor_index: usize,
    pub measurement_factors: Vec<FactorId>,
    pub anchor_factors: Vec<FactorId>,
}

impl PoseGraphScenario {
    pub fn ground_truth_vectors(&self) -> Vec<DVector<f64>> {
        self.ground_truth
            .iter()
            .map(|p| DVector::from_column_slice(p.as_slice()))
            .collect()
    }
}

pub fn gen_pose_graph(seed: u64) -> Result<(PoseGraphScenario, FactorGraph)> {
    gen_pose_graph_with(seed, &PoseGraphConfig::default())
}

/// Random ground truth in a square, `n_meas` noisy relative measurements
/// between random distinct pairs, a weak anchor near every variable and one
/// strong anchor at the variable nearest the bottom centre of the scene.
pub fn gen_pose_graph_with(
    seed: u64,
    config: &PoseGraphConfig,
) -> Result<(PoseGraphScenario, FactorGraph)> {
    if config.n_vars < 2 {
        return Err(GbpError::InvalidArgument(
            "need at least 2 variables".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.scene_scale;
    let ground_truth: Vec<Vector2<f64>> = (0..config.n_vars)
        .map(|_| Vector2::new(rng.random_range(0.0..s), rng.random_range(0.0..s)))
        .collect();

    let mut graph = FactorGraph::new();
    let vars = (0..config.n_vars)
        .map(|i| graph.add_variable(2, format!("pose{i}")))
        .collect::<Result<Vec<_>>>()?;

    let meas_noise =
        Normal::new(0.0, config.sigma_m).map_err(|e| GbpError::InvalidArgument(e.to_string()))?;
    let mut measurement_factors = Vec::with_capacity(config.n_meas);
    for _ in 0..config.n_meas {
        let i = rng.random_range(0..config.n_vars);
        let mut j = rng.random_range(0..config.n_vars - 1);
        if j >= i {
            j += 1;
        }
        let noise = Vector2::new(meas_noise.sample(&mut rng), meas_noise.sample(&mut rng));
        let z = ground_truth[j] - ground_truth[i] + noise;
        let f = graph.add_factor(
            RelativePose2dModel::new(z, config.sigma_m)?,
            &[vars[i], vars[j]],
        )?;
        measurement_factors.push(f);
    }

    let bottom_centre = Vector2::new(s / 2.0, 0.0);
    let anchor_index = (0..config.n_vars)
        .min_by(|a, b| {
            let da = (ground_truth[*a] - bottom_centre).norm();
            let db = (ground_truth[*b] - bottom_centre).norm();
            da.total_cmp(&db)
        })
        .expect("n_vars >= 2");

    let anchor_noise = Normal::new(0.0, config.weak_anchor_noise)
        .map_err(|e| GbpError::InvalidArgument(e.to_string()))?;
    let mut anchor_factors = Vec::with_capacity(config.n_vars);
    for (i, gt) in ground_truth.iter().enumerate() {
        let offset = Vector2::new(anchor_noise.sample(&mut rng), anchor_noise.sample(&mut rng));
        let (z, sigma) = if i == anchor_index {
            (*gt, config.strong_sigma)
        } else {
            (gt + offset, config.weak_sigma)
        };
        let model = UnaryAnchorModel::new(DVector::from_column_slice(z.as_slice()), sigma)?;
        anchor_factors.push(graph.add_factor(model, &[vars[i]])?);
    }

    Ok((
        PoseGraphScenario {
            seed,
            config: config.clone(),
            ground_truth,
            anchor_index,
            measurement_factors,
            anchor_factors,
        },
        graph,
    ))
}

/// Multiplies the precision of every relative-measurement factor by
/// `multiplier`, refreshing linearizations in place. Messages and anchors
/// are left alone, so message passing can simply continue.
pub fn scale_measurement_precision(graph: &mut FactorGraph, multiplier: f64) -> Result<()> {
    if !(multiplier > 0.0 && multiplier.is_finite()) {
        return Err(GbpError::InvalidArgument(format!(
            "precision multiplier must be positive, got {multiplier}"
        )));
    }
    let targets: Vec<(FactorId, f64)> = graph
        .factors()
        .iter()
        .filter(|f| f.model.kind() == "relative")
        .map(|f| (f.id, f.precision_scale() * multiplier))
        .collect();
    for (id, scale) in targets {
        graph.set_precision_scale(id, scale)?;
    }
    Ok(())
}
