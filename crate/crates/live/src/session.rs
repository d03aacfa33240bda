use gbp_core::batch::{reference_solution, BatchSolution};
use gbp_core::error::{GbpError, Result};
use gbp_core::graph::FactorGraph;
use gbp_core::message::DampingConfig;
use gbp_core::scenarios::pose_graph::scale_measurement_precision;
use gbp_core::scenarios::slam::{
    classify_factors, set_robust_mode, world_step, WorldConfig, WorldState,
};
use gbp_core::schedule::{ScheduleKind, Scheduler};
use gbp_core::snapshot::Snapshot;

use crate::protocol::{ClientCommand, ScheduleName, ServerFrame};

/// The single SLAM world a service hosts. Commands and steps are applied
/// one at a time by whoever owns it, so frames never see half an update.
pub struct Session {
    seed: u64,
    world: WorldState,
    graph: FactorGraph,
    scheduler: Scheduler,
    iteration: u64,
    messages_sent: u64,
    residual: f64,
    paused: bool,
    overlay_requested: bool,
    batch: Option<BatchSolution>,
}

impl Session {
    pub fn new(seed: u64, config: WorldConfig) -> Result<Self> {
        let (world, graph, _) = WorldState::new(seed, config)?;
        Ok(Self {
            seed,
            world,
            graph,
            scheduler: Scheduler::new(ScheduleKind::Synchronous, DampingConfig::none()),
            iteration: 0,
            messages_sent: 0,
            residual: f64::INFINITY,
            paused: false,
            overlay_requested: false,
            batch: None,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn schedule(&self) -> ScheduleKind {
        self.scheduler.kind()
    }

    /// Applies `cmd` and returns the ack, or an error frame if the command
    /// could not be applied. A rejected command leaves the session untouched.
    pub fn apply_command(&mut self, cmd: &ClientCommand) -> ServerFrame {
        match self.apply(cmd) {
            Ok(()) => ServerFrame::Ack {
                cmd: cmd.clone(),
                iteration: self.iteration,
            },
            Err(e) => ServerFrame::Error {
                detail: e.to_string(),
            },
        }
    }

    fn apply(&mut self, cmd: &ClientCommand) -> Result<()> {
        match *cmd {
            ClientCommand::Move { dir } => {
                world_step(&mut self.world, &mut self.graph, dir.command())?;
                self.batch = None;
            }
            ClientCommand::SetRobust { on } => {
                set_robust_mode(&mut self.world, &mut self.graph, on)?;
                self.batch = None;
            }
            ClientCommand::ScalePrecision { multiplier } => {
                scale_measurement_precision(&mut self.graph, multiplier)?;
                self.batch = None;
            }
            ClientCommand::SetSchedule { kind } => {
                let kind = match kind {
                    ScheduleName::Sync => ScheduleKind::Synchronous,
                    ScheduleName::Random => ScheduleKind::Random { seed: self.seed },
                    ScheduleName::Floodfill => {
                        return Err(GbpError::InvalidArgument(
                            "floodfill needs a chain; the SLAM graph has loops".into(),
                        ))
                    }
                };
                self.scheduler = Scheduler::new(kind, self.scheduler.damping());
            }
            ClientCommand::Pause {} => self.paused = true,
            ClientCommand::Resume {} => self.paused = false,
            ClientCommand::RequestBatchOverlay {} => self.overlay_requested = true,
        }
        Ok(())
    }

    /// Runs one schedule iteration unless paused. Returns whether it ran.
    pub fn step(&mut self) -> Result<bool> {
        if self.paused {
            return Ok(false);
        }
        let (stats, residual) = self.scheduler.iterate(&mut self.graph)?;
        self.iteration += 1;
        self.messages_sent += stats.messages_sent as u64;
        self.residual = residual;
        Ok(true)
    }

    /// The current state as a snapshot frame. A pending overlay request is
    /// served here and cleared; the batch solve is reused until the graph
    /// changes.
    pub fn frame(&mut self) -> Result<ServerFrame> {
        let mut snap = Snapshot::capture(&self.graph, self.seed, self.messages_sent, self.residual)
            .with_ground_truth(&self.world.ground_truth_vectors());
        snap.iteration = self.iteration;
        if self.world.config.robust {
            snap = snap.with_classification(&classify_factors(&self.world, &self.graph)?);
        }
        if std::mem::take(&mut self.overlay_requested) {
            if self.batch.is_none() {
                self.batch = Some(reference_solution(&self.graph)?);
            }
            if let Some(b) = &self.batch {
                snap = snap.with_batch(&self.graph, b, true);
            }
        }
        Ok(ServerFrame::Snapshot(snap))
    }

    pub fn batch_cached(&self) -> bool {
        self.batch.is_some()
    }
}
