//! Library side of the `gbp` command: scenario runs that write snapshots and
//! metrics, and snapshot replay.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use gbp_core::batch::{self, Divergence};
use gbp_core::graph::FactorGraph;
use gbp_core::message::DampingConfig;
use gbp_core::nalgebra::{DVector, Vector2};
use gbp_core::scenarios::pose_graph::gen_pose_graph;
use gbp_core::scenarios::slam::{
    self, classify_factors, world_step, Command, RobustClass, WorldConfig, WorldState,
};
use gbp_core::scenarios::surface::{build_surface_graph, load_surface, SurfaceScenario};
use gbp_core::schedule::{ConvergenceReport, ScheduleKind, Scheduler};
use gbp_core::snapshot::Snapshot;
use gbp_core::GbpError;
use serde::Serialize;

/// Schedule iterations run after every scripted SLAM move.
pub const SLAM_STEPS_PER_MOVE: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScenarioSpec {
    /// Bundled dataset, or a measurement file.
    Surface(Option<PathBuf>),
    PoseGraph,
    Slam,
}

impl FromStr for ScenarioSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "surface1d" => Ok(ScenarioSpec::Surface(None)),
            "posegraph2d" => Ok(ScenarioSpec::PoseGraph),
            "slam" => Ok(ScenarioSpec::Slam),
            _ => match s.strip_prefix("surface1d:") {
                Some(path) if !path.is_empty() => Ok(ScenarioSpec::Surface(Some(path.into()))),
                _ => Err(format!(
                    "unknown scenario {s:?}; expected surface1d[:PATH], posegraph2d or slam"
                )),
            },
        }
    }
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioSpec::Surface(None) => write!(f, "surface1d"),
            ScenarioSpec::Surface(Some(p)) => write!(f, "surface1d:{}", p.display()),
            ScenarioSpec::PoseGraph => write!(f, "posegraph2d"),
            ScenarioSpec::Slam => write!(f, "slam"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Sync,
    Random,
    Floodfill,
}

#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// surface1d[:PATH], posegraph2d or slam
    #[arg(long, default_value = "surface1d")]
    pub scenario: ScenarioSpec,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Sync)]
    pub schedule: ScheduleArg,
    /// Iteration cap for the convergence phase.
    #[arg(long = "iters", default_value_t = 5000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Message damping factor in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    pub damping: f64,
    /// Huber kernels and outlier injection (slam only).
    #[arg(long)]
    pub robust: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Steering keys for slam, one move per character.
    #[arg(long)]
    pub script: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub snapshot_every: usize,
    #[arg(long = "out", default_value = "gbp-out")]
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(scenario: ScenarioSpec, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenario,
            schedule: ScheduleArg::Sync,
            max_iters: 5000,
            tol: 1e-8,
            damping: 0.0,
            robust: false,
            seed: 0,
            script: None,
            snapshot_every: 100,
            out_dir: out_dir.into(),
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.snapshot_every == 0 {
            bail!("--snapshot-every must be at least 1");
        }
        if !(self.tol > 0.0) {
            bail!("--tol must be positive");
        }
        if self.max_iters == 0 {
            bail!("--iters must be at least 1");
        }
        if self.script.is_some() && self.scenario != ScenarioSpec::Slam {
            bail!("--script only applies to the slam scenario");
        }
        Ok(())
    }

    fn schedule_kind(&self) -> ScheduleKind {
        match self.schedule {
            ScheduleArg::Sync => ScheduleKind::Synchronous,
            ScheduleArg::Random => ScheduleKind::Random { seed: self.seed },
            ScheduleArg::Floodfill => ScheduleKind::Floodfill,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationSummary {
    pub grey: usize,
    pub white: usize,
    pub red: usize,
    pub yellow: usize,
    pub outliers: Vec<usize>,
    pub outliers_white: usize,
    pub max_pose_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub schedule: String,
    pub seed: u64,
    pub damping: f64,
    pub report: ConvergenceReport,
    /// `None` when the batch system is singular.
    pub comparison: Option<Divergence>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationSummary>,
}

struct Scene {
    graph: FactorGraph,
    ground_truth: Option<Vec<DVector<f64>>>,
    world: Option<WorldState>,
}

fn build_scene(config: &RunConfig) -> anyhow::Result<Scene> {
    Ok(match &config.scenario {
        ScenarioSpec::Surface(path) => {
            let scn = match path {
                Some(p) => load_surface(p).with_context(|| format!("loading {}", p.display()))?,
                None => SurfaceScenario::bundled(),
            };
            Scene {
                graph: build_surface_graph(&scn)?,
                ground_truth: None,
                world: None,
            }
        }
        ScenarioSpec::PoseGraph => {
            let (scn, graph) = gen_pose_graph(config.seed)?;
            Scene {
                graph,
                ground_truth: Some(scn.ground_truth_vectors()),
                world: None,
            }
        }
        ScenarioSpec::Slam => {
            let world_config = WorldConfig {
                robust: config.robust,
                inject_outliers: config.robust,
                ..WorldConfig::default()
            };
            let (world, graph, _) = WorldState::new(config.seed, world_config)?;
            Scene {
                graph,
                ground_truth: None,
                world: Some(world),
            }
        }
    })
}

struct Progress {
    iterations: usize,
    messages: usize,
    residual: f64,
}

fn snapshot_of(scene: &Scene, seed: u64, progress: &Progress) -> anyhow::Result<Snapshot> {
    let mut snap = Snapshot::capture(
        &scene.graph,
        seed,
        progress.messages as u64,
        progress.residual,
    );
    if let Some(gt) = &scene.ground_truth {
        snap = snap.with_ground_truth(gt);
    }
    if let Some(world) = &scene.world {
        snap = snap.with_ground_truth(&world.ground_truth_vectors());
        if world.config.robust {
            snap = snap.with_classification(&classify_factors(world, &scene.graph)?);
        }
    }
    Ok(snap)
}

fn write_json(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn iterate(
    scheduler: &mut Scheduler,
    scene: &mut Scene,
    progress: &mut Progress,
    config: &RunConfig,
    snapshot_dir: &Path,
) -> anyhow::Result<()> {
    let (stats, residual) = scheduler.iterate(&mut scene.graph)?;
    progress.iterations += 1;
    progress.messages += stats.messages_sent;
    progress.residual = residual;
    if progress.iterations.is_multiple_of(config.snapshot_every) {
        let snap = snapshot_of(scene, config.seed, progress)?;
        let path = snapshot_dir.join(format!("iter_{:06}.json", progress.iterations));
        write_json(&path, &snap.to_json())?;
    }
    Ok(())
}

fn summarize(world: &WorldState, graph: &FactorGraph) -> anyhow::Result<ClassificationSummary> {
    let classes = classify_factors(world, graph)?;
    let count = |c: RobustClass| classes.iter().filter(|x| x.class == c).count();
    let outliers: Vec<usize> = world.outlier_ledger.iter().map(|f| f.0).collect();
    let outliers_white = outliers
        .iter()
        .filter(|f| classes[**f].class == RobustClass::White)
        .count();
    let mut max_pose_error = 0.0f64;
    for v in &world.pose_vars {
        let mu = graph.belief(*v)?.mean_or_zero();
        let gt = world
            .variable_ground_truth(*v)
            .expect("poses have ground truth");
        max_pose_error = max_pose_error.max((Vector2::new(mu[0], mu[1]) - gt).norm());
    }
    Ok(ClassificationSummary {
        grey: count(RobustClass::Grey),
        white: count(RobustClass::White),
        red: count(RobustClass::Red),
        yellow: count(RobustClass::Yellow),
        outliers,
        outliers_white,
        max_pose_error,
    })
}

/// Runs a scenario and writes `snapshots/iter_NNNNNN.json` every
/// `snapshot_every` iterations, `final.json` (with the batch solution
/// embedded when it exists) and `metrics.json` under `out_dir`.
pub fn run(config: &RunConfig) -> anyhow::Result<RunMetrics> {
    config.validate()?;
    let damping = DampingConfig::new(config.damping)?;
    let kind = config.schedule_kind();
    let commands = match (&config.scenario, &config.script) {
        (ScenarioSpec::Slam, Some(s)) => Command::parse_script(s)?,
        (ScenarioSpec::Slam, None) => Command::parse_script(slam::DEFAULT_SCRIPT)?,
        _ => Vec::new(),
    };
    let snapshot_dir = config.out_dir.join("snapshots");
    fs::create_dir_all(&snapshot_dir)
        .with_context(|| format!("creating {}", snapshot_dir.display()))?;

    let mut scene = build_scene(config)?;
    let mut scheduler = Scheduler::new(kind, damping);
    let mut progress = Progress {
        iterations: 0,
        messages: 0,
        residual: f64::INFINITY,
    };

    for cmd in commands {
        let world = scene.world.as_mut().expect("slam scene has a world");
        world_step(world, &mut scene.graph, cmd)?;
        for _ in 0..SLAM_STEPS_PER_MOVE {
            iterate(
                &mut scheduler,
                &mut scene,
                &mut progress,
                config,
                &snapshot_dir,
            )?;
        }
    }

    let mut converged = false;
    for _ in 0..config.max_iters {
        iterate(
            &mut scheduler,
            &mut scene,
            &mut progress,
            config,
            &snapshot_dir,
        )?;
        if progress.residual <= config.tol {
            converged = true;
            break;
        }
    }

    let solution = match batch::reference_solution(&scene.graph) {
        Ok(s) => Some(s),
        Err(GbpError::SingularSystem) => None,
        Err(e) => return Err(e.into()),
    };
    let mut final_snap = snapshot_of(&scene, config.seed, &progress)?;
    if let Some(sol) = &solution {
        final_snap = final_snap.with_batch(&scene.graph, sol, true);
    }
    write_json(
        &config.out_dir.join("final.json"),
        &final_snap.to_json_pretty(),
    )?;

    let classification = match &scene.world {
        Some(world) if world.config.robust => Some(summarize(world, &scene.graph)?),
        _ => None,
    };
    let metrics = RunMetrics {
        scenario: config.scenario.to_string(),
        schedule: format!("{:?}", config.schedule).to_lowercase(),
        seed: config.seed,
        damping: config.damping,
        report: ConvergenceReport {
            iterations: progress.iterations,
            messages_sent: progress.messages,
            max_message_residual: progress.residual,
            converged,
            wall_notes: scheduler.describe(&scene.graph),
        },
        comparison: solution.as_ref().map(|s| batch::compare(&scene.graph, s)),
        classification,
    };
    write_json(
        &config.out_dir.join("metrics.json"),
        &serde_json::to_string_pretty(&metrics)?,
    )?;
    Ok(metrics)
}

/// Human-readable summary of a snapshot file.
pub fn replay(path: &Path) -> anyhow::Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let snap = Snapshot::from_json(&text)?;
    let mut out = String::new();
    out.push_str(&format!("iteration: {}\n", snap.iteration));
    out.push_str(&format!("seed: {}\n", snap.seed));
    out.push_str(&format!(
        "variables: {}, factors: {}, messages sent: {}\n",
        snap.variables.len(),
        snap.factors.len(),
        snap.metrics.messages_sent
    ));
    match snap.mean_errors_vs_batch() {
        None => out.push_str("no oracle embedded\n"),
        Some(errors) => {
            let max = errors.iter().copied().fold(0.0, f64::max);
            out.push_str(&format!("max mean error vs batch: {max:e}\n"));
            for (v, e) in snap.variables.iter().zip(&errors) {
                out.push_str(&format!("  {} ({}): {e:e}\n", v.id, v.label));
            }
        }
    }
    if let Some(census) = &snap.metrics.cov_ratio_census {
        out.push_str(&format!(
            "overconfident fraction: {}\n",
            census.overconfident_fraction
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_parsing() {
        assert_eq!("surface1d".parse(), Ok(ScenarioSpec::Surface(None)));
        assert_eq!(
            "surface1d:data/x.txt".parse(),
            Ok(ScenarioSpec::Surface(Some("data/x.txt".into())))
        );
        assert_eq!("posegraph2d".parse(), Ok(ScenarioSpec::PoseGraph));
        assert_eq!("slam".parse(), Ok(ScenarioSpec::Slam));
        assert!("surface1d:".parse::<ScenarioSpec>().is_err());
        assert!("mars".parse::<ScenarioSpec>().is_err());
        for s in ["surface1d", "surface1d:a/b", "posegraph2d", "slam"] {
            assert_eq!(s.parse::<ScenarioSpec>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn config_validation() {
        let dir = PathBuf::from("unused");
        let mut c = RunConfig::new(ScenarioSpec::PoseGraph, &dir);
        assert!(c.validate().is_ok());
        c.snapshot_every = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::new(ScenarioSpec::PoseGraph, &dir);
        c.tol = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::new(ScenarioSpec::PoseGraph, &dir);
        c.script = Some("wasd".into());
        assert!(c.validate().is_err());
    }
}
