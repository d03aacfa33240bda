//! Gaussian belief propagation on factor graphs.
//!
//! Gaussians are kept in information form. Factors hold a cached linear
//! approximation and exchange messages with their variables along edges;
//! schedules decide which messages are sent and when. A dense batch solver
//! provides reference marginals.
//!
//! ```
//! use gbp_core::prelude::*;
//! use nalgebra::{dvector, Vector2};
//!
//! let mut g = FactorGraph::new();
//! let a = g.add_variable(2, "a").unwrap();
//! let b = g.add_variable(2, "b").unwrap();
//! g.add_factor(UnaryAnchorModel::new(dvector![0.0, 0.0], 0.01).unwrap(), &[a]).unwrap();
//! g.add_factor(RelativePose2dModel::new(Vector2::new(1.0, 2.0), 0.1).unwrap(), &[a, b]).unwrap();
//! run_until(&mut g, ScheduleKind::Synchronous, 100, 1e-10, DampingConfig::none()).unwrap();
//! let mean = g.belief(b).unwrap().mean().unwrap();
//! assert!((mean[1] - 2.0).abs() < 1e-9);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod error;
pub mod gaussian;
pub mod graph;
pub mod message;
pub mod models;
pub mod robust;
pub mod scenarios;
pub mod schedule;
pub mod snapshot;

pub use error::{GbpError, Result};
pub use nalgebra;

pub mod prelude {
    pub use crate::batch::{compare, reference_solution, solve, BatchSolution, Divergence};
    pub use crate::error::{GbpError, Result};
    pub use crate::gaussian::{GaussianInfo, MomentGaussian};
    pub use crate::graph::{Direction, FactorGraph, FactorId, RelinearizationPolicy, VariableId};
    pub use crate::message::DampingConfig;
    pub use crate::models::{
        CompoundModel, HeightMeasurementModel, MeasurementModel, RelativePose2dModel,
        SmoothnessModel, UnaryAnchorModel,
    };
    pub use crate::robust::{RobustKernel, RobustKind, RobustState};
    pub use crate::schedule::{run_until, ConvergenceReport, ScheduleKind};
    pub use crate::snapshot::Snapshot;
}
