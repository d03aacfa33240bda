//! One-dimensional surface reconstruction from point height measurements.

use std::path::Path;

use nalgebra::dvector;

use crate::error::{GbpError, Result};
use crate::graph::FactorGraph;
use crate::models::{
    CompoundModel, HeightMeasurementModel, MeasurementModel, SmoothnessModel, UnaryAnchorModel,
};

pub const DEFAULT_GRID_SIZE: usize = 41;
pub const DEFAULT_SIGMA_M: f64 = 0.1;
pub const DEFAULT_SIGMA_P: f64 = 0.1;
/// Gauge-fixing anchor used only when there are no measurements.
pub const WEAK_ANCHOR_SIGMA: f64 = 100.0;

/// The bundled example dataset.
pub const BUNDLED_DATASET: &str = include_str!("../../data/surface1d.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceScenario {
    pub measurements: Vec<(f64, f64)>,
    pub n_vars: usize,
    pub span: (f64, f64),
    pub sigma_m: f64,
    pub sigma_p: f64,
}

impl SurfaceScenario {
    /// Scenario with default grid and noise, spanning the data's extent.
    pub fn new(measurements: Vec<(f64, f64)>) -> Result<Self> {
        if measurements.is_empty() {
            return Err(GbpError::EmptyDataset);
        }
        let lo = measurements
            .iter()
            .map(|m| m.0)
            .fold(f64::INFINITY, f64::min);
        let hi = measurements
            .iter()
            .map(|m| m.0)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            measurements,
            n_vars: DEFAULT_GRID_SIZE,
            span: (lo, hi),
            sigma_m: DEFAULT_SIGMA_M,
            sigma_p: DEFAULT_SIGMA_P,
        })
    }

    pub fn with_span(mut self, lo: f64, hi: f64) -> Self {
        self.span = (lo, hi);
        self
    }

    pub fn with_grid(mut self, n_vars: usize) -> Self {
        self.n_vars = n_vars;
        self
    }

    pub fn bundled() -> Self {
        parse_surface(BUNDLED_DATASET).expect("bundled dataset parses")
    }

    /// Horizontal coordinate of grid variable `k`.
    pub fn grid_x(&self, k: usize) -> f64 {
        let (lo, hi) = self.span;
        lo + (hi - lo) * k as f64 / (self.n_vars - 1) as f64
    }

    /// Index of the grid span containing `x`: the largest `k` with
    /// `x_k ≤ x`, capped so the last grid point falls in the final span.
    pub fn span_index(&self, x: f64) -> Result<usize> {
        let (lo, hi) = self.span;
        if !(lo..=hi).contains(&x) {
            return Err(GbpError::OutOfSpan { x, lo, hi });
        }
        let grid: Vec<f64> = (0..self.n_vars).map(|k| self.grid_x(k)).collect();
        let k = grid.partition_point(|g| *g <= x).saturating_sub(1);
        Ok(k.min(self.n_vars - 2))
    }

    fn validate(&self) -> Result<()> {
        if self.n_vars < 2 {
            return Err(GbpError::InvalidArgument(
                "grid needs at least 2 variables".into(),
            ));
        }
        let (lo, hi) = self.span;
        if !(lo < hi) {
            return Err(GbpError::InvalidArgument(format!(
                "empty span [{lo}, {hi}]"
            )));
        }
        if !(self.sigma_m > 0.0 && self.sigma_p > 0.0) {
            return Err(GbpError::InvalidArgument(
                "noise levels must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Parses whitespace-separated `x y` lines; `#` lines and blank lines are
/// skipped.
pub fn parse_surface(text: &str) -> Result<SurfaceScenario> {
    let mut measurements = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |detail: String| GbpError::Parse {
            line: i + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(format!(
                "expected 2 fields, found {}",
                fields.len()
            )));
        }
        let x: f64 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad number {:?}", fields[0])))?;
        let y: f64 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad number {:?}", fields[1])))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(parse_err("non-finite value".into()));
        }
        measurements.push((x, y));
    }
    SurfaceScenario::new(measurements)
}

pub fn load_surface(path: impl AsRef<Path>) -> Result<SurfaceScenario> {
    parse_surface(&std::fs::read_to_string(path)?)
}

/// Builds the chain: `n_vars` heights, and per consecutive pair one
/// compound factor holding the smoothness term and every measurement in
/// that span.
pub fn build_surface_graph(scn: &SurfaceScenario) -> Result<FactorGraph> {
    scn.validate()?;
    let mut graph = FactorGraph::new();
    let vars = (0..scn.n_vars)
        .map(|k| graph.add_variable(1, format!("y{k}")))
        .collect::<Result<Vec<_>>>()?;

    let mut per_span: Vec<Vec<Box<dyn MeasurementModel>>> = (0..scn.n_vars - 1)
        .map(|_| -> Vec<Box<dyn MeasurementModel>> {
            vec![Box::new(
                SmoothnessModel::new(scn.sigma_p).expect("validated"),
            )]
        })
        .collect();
    for &(x, y) in &scn.measurements {
        let k = scn.span_index(x)?;
        let model =
            HeightMeasurementModel::new(x, scn.grid_x(k), scn.grid_x(k + 1), y, scn.sigma_m)?;
        per_span[k].push(Box::new(model));
    }
    for (k, parts) in per_span.into_iter().enumerate() {
        graph.add_factor(CompoundModel::new(parts)?, &[vars[k], vars[k + 1]])?;
    }
    if scn.measurements.is_empty() {
        graph.add_factor(
            UnaryAnchorModel::new(dvector![0.0], WEAK_ANCHOR_SIGMA)?,
            &[vars[0]],
        )?;
    }
    Ok(graph)
}
