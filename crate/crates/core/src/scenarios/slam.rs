//! Incremental 2D SLAM world: a robot steered on a grid of commands leaves
//! a trail of poses, observes nearby landmarks and occasionally receives a
//! grossly wrong measurement.

use std::collections::BTreeSet;

use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GbpError, Result};
use crate::graph::{FactorGraph, FactorId, VariableId};
use crate::models::{RelativePose2dModel, UnaryAnchorModel};
use crate::robust::RobustKernel;

/// Two laps of a 5x5 square and one of a 2x2 square, so most landmarks are
/// seen from many poses and the trail closes loops.
pub const DEFAULT_SCRIPT: &str = "dddddwwwwwaaaaasssssdddddwwwwwaaaaasssssddwwaass";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Up,
    Down,
    Left,
    Right,
}

impl Command {
    /// Maps `w`, `a`, `s`, `d` (either case).
    pub fn from_key(key: char) -> Option<Self> {
        match key.to_ascii_lowercase() {
            'w' => Some(Command::Up),
            'a' => Some(Command::Left),
            's' => Some(Command::Down),
            'd' => Some(Command::Right),
            _ => None,
        }
    }

    pub fn parse_script(script: &str) -> Result<Vec<Self>> {
        script
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| {
                Self::from_key(c)
                    .ok_or_else(|| GbpError::InvalidArgument(format!("unknown command key {c:?}")))
            })
            .collect()
    }

    pub fn direction(self) -> Vector2<f64> {
        match self {
            Command::Up => Vector2::new(0.0, 1.0),
            Command::Down => Vector2::new(0.0, -1.0),
            Command::Left => Vector2::new(-1.0, 0.0),
            Command::Right => Vector2::new(1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub step_size: f64,
    pub obs_radius: f64,
    pub sigma_odometry: f64,
    pub sigma_observation: f64,
    pub outlier_prob: f64,
    pub outlier_magnitude: f64,
    pub huber_threshold: f64,
    /// Landmarks per unit area.
    pub landmark_density: f64,
    /// Landmarks fill the square `[-extent, extent]²`.
    pub world_extent: f64,
    pub anchor_sigma: f64,
    /// Corrupt observations with probability `outlier_prob`.
    pub inject_outliers: bool,
    /// Give every factor a Huber kernel.
    pub robust: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            obs_radius: 2.5,
            sigma_odometry: 0.05,
            sigma_observation: 0.05,
            outlier_prob: 1.0 / 50.0,
            outlier_magnitude: 5.0,
            huber_threshold: 4.0,
            landmark_density: 0.5,
            world_extent: 8.0,
            anchor_sigma: 0.01,
            inject_outliers: false,
            robust: false,
        }
    }
}

impl WorldConfig {
    /// Defaults with outlier injection and Huber kernels both on.
    pub fn robust() -> Self {
        Self {
            inject_outliers: true,
            robust: true,
            ..Self::default()
        }
    }

    fn kernel(&self) -> RobustKernel {
        if self.robust {
            RobustKernel::huber(self.huber_threshold)
        } else {
            RobustKernel::none()
        }
    }
}

/// Factors added by one [`world_step`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepObservation {
    pub pose: Option<VariableId>,
    pub factors: Vec<FactorId>,
    pub new_landmarks: Vec<VariableId>,
    pub outliers: Vec<FactorId>,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub seed: u64,
    pub config: WorldConfig,
    pub robot_gt: Vector2<f64>,
    pub pose_history_gt: Vec<Vector2<f64>>,
    pub landmarks_gt: Vec<Vector2<f64>>,
    pub pose_vars: Vec<VariableId>,
    landmark_vars: Vec<Option<VariableId>>,
    /// Ground truth of every graph variable, by id.
    variable_gt: Vec<Vector2<f64>>,
    /// Factors injected as outliers. Evaluation only.
    pub outlier_ledger: BTreeSet<FactorId>,
    rng: ChaCha8Rng,
}

impl WorldState {
    /// Scatters landmarks, places the robot at the origin with a strongly
    /// anchored first pose, and records its first observations.
    pub fn new(seed: u64, config: WorldConfig) -> Result<(Self, FactorGraph, StepObservation)> {
        if !(config.step_size > 0.0 && config.obs_radius > 0.0) {
            return Err(GbpError::InvalidArgument(
                "step size and observation radius must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&config.outlier_prob) {
            return Err(GbpError::InvalidArgument(
                "outlier probability must be in [0, 1]".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.world_extent;
        let count = (config.landmark_density * (2.0 * e) * (2.0 * e)).round() as usize;
        let landmarks_gt = (0..count)
            .map(|_| Vector2::new(rng.random_range(-e..e), rng.random_range(-e..e)))
            .collect::<Vec<_>>();
        let mut world = WorldState {
            seed,
            config,
            robot_gt: Vector2::zeros(),
            pose_history_gt: Vec::new(),
            landmark_vars: vec![None; landmarks_gt.len()],
            landmarks_gt,
            pose_vars: Vec::new(),
            variable_gt: Vec::new(),
            outlier_ledger: BTreeSet::new(),
            rng,
        };
        let mut graph = FactorGraph::new();
        let pose = world.add_pose(&mut graph)?;
        let anchor = UnaryAnchorModel::new(DVector::zeros(2), world.config.anchor_sigma)?;
        let anchor_id = graph.add_factor(anchor, &[pose])?;
        graph.set_robust_kernel(anchor_id, world.config.kernel())?;
        let mut obs = StepObservation {
            pose: Some(pose),
            factors: vec![anchor_id],
            ..Default::default()
        };
        world.observe(&mut graph, pose, &mut obs)?;
        Ok((world, graph, obs))
    }

    pub fn variable_ground_truth(&self, id: VariableId) -> Option<Vector2<f64>> {
        self.variable_gt.get(id.0).copied()
    }

    /// Ground truth of every variable, by id.
    pub fn ground_truth_vectors(&self) -> Vec<DVector<f64>> {
        self.variable_gt
            .iter()
            .map(|p| DVector::from_column_slice(p.as_slice()))
            .collect()
    }

    pub fn landmark_variable(&self, landmark: usize) -> Option<VariableId> {
        self.landmark_vars.get(landmark).copied().flatten()
    }

    fn add_pose(&mut self, graph: &mut FactorGraph) -> Result<VariableId> {
        let id = graph.add_variable(2, format!("pose{}", self.pose_vars.len()))?;
        self.pose_vars.push(id);
        self.pose_history_gt.push(self.robot_gt);
        self.record_gt(id, self.robot_gt);
        Ok(id)
    }

    fn record_gt(&mut self, id: VariableId, gt: Vector2<f64>) {
        if self.variable_gt.len() <= id.0 {
            self.variable_gt.resize(id.0 + 1, Vector2::zeros());
        }
        self.variable_gt[id.0] = gt;
    }

    fn noise(&mut self, sigma: f64) -> Vector2<f64> {
        let n = Normal::new(0.0, sigma).expect("positive sigma");
        Vector2::new(n.sample(&mut self.rng), n.sample(&mut self.rng))
    }

    fn observe(
        &mut self,
        graph: &mut FactorGraph,
        pose: VariableId,
        obs: &mut StepObservation,
    ) -> Result<()> {
        let visible: Vec<usize> = (0..self.landmarks_gt.len())
            .filter(|l| (self.landmarks_gt[*l] - self.robot_gt).norm() <= self.config.obs_radius)
            .collect();
        for l in visible {
            let var = match self.landmark_vars[l] {
                Some(v) => v,
                None => {
                    let v = graph.add_variable(2, format!("landmark{l}"))?;
                    self.landmark_vars[l] = Some(v);
                    self.record_gt(v, self.landmarks_gt[l]);
                    obs.new_landmarks.push(v);
                    v
                }
            };
            let sigma = self.config.sigma_observation;
            let mut z = self.landmarks_gt[l] - self.robot_gt + self.noise(sigma);
            let outlier =
                self.config.inject_outliers && self.rng.random_bool(self.config.outlier_prob);
            if outlier {
                let angle = self.rng.random_range(0.0..std::f64::consts::TAU);
                z += self.config.outlier_magnitude * Vector2::new(angle.cos(), angle.sin());
            }
            let f = graph.add_factor(RelativePose2dModel::new(z, sigma)?, &[pose, var])?;
            graph.set_robust_kernel(f, self.config.kernel())?;
            if outlier {
                self.outlier_ledger.insert(f);
                obs.outliers.push(f);
            }
            obs.factors.push(f);
        }
        Ok(())
    }
}

/// Moves the robot one step, adds the new pose with its odometry factor and
/// one observation factor per landmark in range.
pub fn world_step(
    world: &mut WorldState,
    graph: &mut FactorGraph,
    command: Command,
) -> Result<StepObservation> {
    let prev = *world.pose_vars.last().expect("world starts with a pose");
    let delta = command.direction() * world.config.step_size;
    world.robot_gt += delta;
    let pose = world.add_pose(graph)?;
    let z = delta + world.noise(world.config.sigma_odometry);
    let odo = graph.add_factor(
        RelativePose2dModel::new(z, world.config.sigma_odometry)?,
        &[prev, pose],
    )?;
    graph.set_robust_kernel(odo, world.config.kernel())?;
    let mut obs = StepObservation {
        pose: Some(pose),
        factors: vec![odo],
        ..Default::default()
    };
    world.observe(graph, pose, &mut obs)?;
    Ok(obs)
}

/// Switches robust estimation and outlier injection together.
pub fn set_robust_mode(world: &mut WorldState, graph: &mut FactorGraph, on: bool) -> Result<()> {
    world.config.robust = on;
    world.config.inject_outliers = on;
    let kernel = world.config.kernel();
    for i in 0..graph.num_factors() {
        graph.set_robust_kernel(FactorId(i), kernel)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobustClass {
    /// Consistent at both the estimate and the ground truth.
    Grey,
    /// An outlier that the estimate also rejects.
    White,
    /// An outlier the estimate has absorbed.
    Red,
    /// A good measurement the estimate disagrees with.
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorClassification {
    pub factor: FactorId,
    pub class: RobustClass,
    pub m_est: f64,
    pub m_gt: f64,
}

/// Classifies every factor by its Mahalanobis distance at the current
/// belief means and at the ground truth, against the Huber threshold.
pub fn classify_factors(
    world: &WorldState,
    graph: &FactorGraph,
) -> Result<Vec<FactorClassification>> {
    let threshold = world.config.huber_threshold;
    graph
        .factors()
        .iter()
        .map(|f| {
            let x_est = graph.factor_belief_state(f.id)?;
            let mut x_gt = DVector::zeros(x_est.len());
            for (slot, v) in f.variables.iter().enumerate() {
                let gt = world
                    .variable_ground_truth(*v)
                    .ok_or(GbpError::UnknownVariable(*v))?;
                x_gt.rows_mut(2 * slot, 2).copy_from(&gt);
            }
            let m_est = f.mahalanobis(&x_est);
            let m_gt = f.mahalanobis(&x_gt);
            let class = match (m_est >= threshold, m_gt >= threshold) {
                (false, false) => RobustClass::Grey,
                (true, true) => RobustClass::White,
                (false, true) => RobustClass::Red,
                (true, false) => RobustClass::Yellow,
            };
            Ok(FactorClassification {
                factor: f.id,
                class,
                m_est,
                m_gt,
            })
        })
        .collect()
}

/// Root-mean-square distance between belief means and ground truth over
/// every variable.
pub fn rms_error(world: &WorldState, graph: &FactorGraph) -> Result<f64> {
    let mut sum = 0.0;
    for v in graph.variables() {
        let gt = world
            .variable_ground_truth(v.id)
            .ok_or(GbpError::UnknownVariable(v.id))?;
        let mu = graph.belief(v.id)?.mean_or_zero();
        sum += (Vector2::new(mu[0], mu[1]) - gt).norm_squared();
    }
    Ok((sum / graph.num_variables().max(1) as f64).sqrt())
}
