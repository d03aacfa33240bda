//! wasm-bindgen wrappers used by `www/index.html`. Every demo hands its
//! state to JavaScript as a snapshot JSON string.

use gbp_core::batch::{reference_solution, BatchSolution};
use gbp_core::graph::FactorGraph;
use gbp_core::message::DampingConfig;
use gbp_core::scenarios::pose_graph::{gen_pose_graph, scale_measurement_precision};
use gbp_core::scenarios::slam::{
    classify_factors, set_robust_mode, world_step, Command, WorldConfig, WorldState,
};
use gbp_core::scenarios::surface::{build_surface_graph, SurfaceScenario};
use gbp_core::schedule::{floodfill_sweep, ScheduleKind, Scheduler};
use gbp_core::snapshot::Snapshot;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

struct Counters {
    messages: u64,
    residual: f64,
}

impl Counters {
    fn new() -> Self {
        Self {
            messages: 0,
            residual: f64::INFINITY,
        }
    }
}

/// 1D surface reconstruction on the bundled dataset.
#[wasm_bindgen]
pub struct SurfaceDemo {
    scenario: SurfaceScenario,
    graph: FactorGraph,
    random: Scheduler,
    counters: Counters,
    batch: BatchSolution,
}

#[wasm_bindgen]
impl SurfaceDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<SurfaceDemo, String> {
        let scenario = SurfaceScenario::bundled();
        let graph = build_surface_graph(&scenario).map_err(js_err)?;
        let batch = reference_solution(&graph).map_err(js_err)?;
        Ok(Self {
            scenario,
            graph,
            random: Scheduler::new(ScheduleKind::Random { seed }, DampingConfig::none()),
            counters: Counters::new(),
            batch,
        })
    }

    /// One left-to-right then right-to-left sweep.
    pub fn floodfill(&mut self) -> Result<(), String> {
        let stats = floodfill_sweep(&mut self.graph).map_err(js_err)?;
        self.counters.messages += stats.messages_sent as u64;
        Ok(())
    }

    /// `iterations` rounds of 2E random messages.
    pub fn random(&mut self, iterations: u32) -> Result<(), String> {
        for _ in 0..iterations {
            let (stats, residual) = self.random.iterate(&mut self.graph).map_err(js_err)?;
            self.counters.messages += stats.messages_sent as u64;
            self.counters.residual = residual;
        }
        Ok(())
    }

    /// Measurement points as a flat `[x0, y0, x1, y1, ...]` array.
    pub fn measurements(&self) -> Vec<f64> {
        self.scenario
            .measurements
            .iter()
            .flat_map(|&(x, y)| [x, y])
            .collect()
    }

    /// Grid x positions of the variables.
    pub fn grid(&self) -> Vec<f64> {
        (0..self.scenario.n_vars)
            .map(|k| self.scenario.grid_x(k))
            .collect()
    }

    pub fn snapshot(&self) -> String {
        capture(&self.graph, 0, &self.counters)
            .with_batch(&self.graph, &self.batch, true)
            .to_json()
    }
}

/// 2D loopy pose graph with adjustable measurement strength.
#[wasm_bindgen]
pub struct PoseGraphDemo {
    seed: u64,
    graph: FactorGraph,
    truth: Vec<gbp_core::nalgebra::DVector<f64>>,
    scheduler: Scheduler,
    counters: Counters,
    batch: Option<BatchSolution>,
}

#[wasm_bindgen]
impl PoseGraphDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<PoseGraphDemo, String> {
        let (scenario, graph) = gen_pose_graph(seed).map_err(js_err)?;
        Ok(Self {
            seed,
            graph,
            truth: scenario.ground_truth_vectors(),
            scheduler: Scheduler::new(ScheduleKind::Synchronous, DampingConfig::none()),
            counters: Counters::new(),
            batch: None,
        })
    }

    pub fn step(&mut self, iterations: u32) -> Result<(), String> {
        for _ in 0..iterations {
            let (stats, residual) = self.scheduler.iterate(&mut self.graph).map_err(js_err)?;
            self.counters.messages += stats.messages_sent as u64;
            self.counters.residual = residual;
        }
        Ok(())
    }

    /// Multiplies the precision of every relative measurement in place.
    pub fn scale_precision(&mut self, multiplier: f64) -> Result<(), String> {
        scale_measurement_precision(&mut self.graph, multiplier).map_err(js_err)?;
        self.batch = None;
        Ok(())
    }

    pub fn snapshot(&mut self) -> Result<String, String> {
        if self.batch.is_none() {
            self.batch = Some(reference_solution(&self.graph).map_err(js_err)?);
        }
        let batch = self.batch.as_ref().expect("just solved");
        Ok(capture(&self.graph, self.seed, &self.counters)
            .with_ground_truth(&self.truth)
            .with_batch(&self.graph, batch, true)
            .to_json())
    }
}

/// Keyboard-steered SLAM with optional robust mode.
#[wasm_bindgen]
pub struct SlamDemo {
    seed: u64,
    world: WorldState,
    graph: FactorGraph,
    scheduler: Scheduler,
    counters: Counters,
}

#[wasm_bindgen]
impl SlamDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<SlamDemo, String> {
        let (world, graph, _) = WorldState::new(seed, WorldConfig::default()).map_err(js_err)?;
        Ok(Self {
            seed,
            world,
            graph,
            scheduler: Scheduler::new(ScheduleKind::Synchronous, DampingConfig::none()),
            counters: Counters::new(),
        })
    }

    /// Moves the robot one step for a w/a/s/d key.
    pub fn key(&mut self, key: char) -> Result<(), String> {
        let cmd = Command::from_key(key).ok_or_else(|| format!("no move bound to {key:?}"))?;
        world_step(&mut self.world, &mut self.graph, cmd).map_err(js_err)?;
        Ok(())
    }

    pub fn set_robust(&mut self, on: bool) -> Result<(), String> {
        set_robust_mode(&mut self.world, &mut self.graph, on).map_err(js_err)
    }

    pub fn robust(&self) -> bool {
        self.world.config.robust
    }

    pub fn step(&mut self, iterations: u32) -> Result<(), String> {
        for _ in 0..iterations {
            let (stats, residual) = self.scheduler.iterate(&mut self.graph).map_err(js_err)?;
            self.counters.messages += stats.messages_sent as u64;
            self.counters.residual = residual;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<String, String> {
        let mut snap = capture(&self.graph, self.seed, &self.counters)
            .with_ground_truth(&self.world.ground_truth_vectors());
        if self.world.config.robust {
            snap = snap
                .with_classification(&classify_factors(&self.world, &self.graph).map_err(js_err)?);
        }
        Ok(snap.to_json())
    }
}

fn capture(graph: &FactorGraph, seed: u64, c: &Counters) -> Snapshot {
    Snapshot::capture(graph, seed, c.messages, c.residual)
}
