//! Factor graph data model.
//!
//! Nodes hold structure only. All message state lives on [`Edge`]s, each of
//! which carries one double-buffered [`Mailbox`] per direction. A schedule
//! either stages messages and commits them together (synchronous semantics)
//! or writes straight through (sequential schedules).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GbpError, Result};
use crate::gaussian::{block_offsets, GaussianInfo};
use crate::message::linearize_scaled;
use crate::models::MeasurementModel;
use crate::robust::{mahalanobis_with, RobustKernel, RobustState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VariableId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FactorId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub usize);

/// A Gaussian in the state space of the edge's variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub payload: GaussianInfo,
    pub iteration_stamp: u64,
}

impl Message {
    pub fn zeros(dim: usize) -> Self {
        Self {
            payload: GaussianInfo::zeros(dim),
            iteration_stamp: 0,
        }
    }
}

/// One direction of an edge: the committed message, the one it replaced, and
/// an optional staged successor.
#[derive(Debug, Clone)]
pub struct Mailbox {
    committed: Message,
    previous: Message,
    staged: Option<Message>,
}

impl Mailbox {
    fn new(dim: usize) -> Self {
        Self {
            committed: Message::zeros(dim),
            previous: Message::zeros(dim),
            staged: None,
        }
    }

    pub fn committed(&self) -> &Message {
        &self.committed
    }

    pub fn previous(&self) -> &Message {
        &self.previous
    }

    pub fn has_staged(&self) -> bool {
        self.staged.is_some()
    }

    pub(crate) fn stage(&mut self, msg: Message) {
        self.staged = Some(msg);
    }

    pub(crate) fn commit(&mut self) -> bool {
        match self.staged.take() {
            Some(msg) => {
                self.previous = std::mem::replace(&mut self.committed, msg);
                true
            }
            None => false,
        }
    }

    pub(crate) fn write_through(&mut self, msg: Message) {
        self.staged = Some(msg);
        self.commit();
    }

    /// `‖Δη‖∞ + ‖ΔΛ‖∞` between the last two commits.
    pub fn residual(&self) -> f64 {
        let a = &self.committed.payload;
        let b = &self.previous.payload;
        (a.eta() - b.eta()).amax() + (a.lambda() - b.lambda()).amax()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    VariableToFactor,
    FactorToVariable,
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub id: EdgeId,
    pub variable: VariableId,
    pub factor: FactorId,
    /// Position of this edge's variable within the factor's block partition.
    pub slot: usize,
    pub var_to_factor: Mailbox,
    pub factor_to_var: Mailbox,
}

impl Edge {
    pub fn mailbox(&self, dir: Direction) -> &Mailbox {
        match dir {
            Direction::VariableToFactor => &self.var_to_factor,
            Direction::FactorToVariable => &self.factor_to_var,
        }
    }

    pub(crate) fn mailbox_mut(&mut self, dir: Direction) -> &mut Mailbox {
        match dir {
            Direction::VariableToFactor => &mut self.var_to_factor,
            Direction::FactorToVariable => &mut self.factor_to_var,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariableNode {
    pub id: VariableId,
    pub dim: usize,
    pub label: String,
    pub edges: Vec<EdgeId>,
}

/// Cached linear factor `(η_s, Λ'_s)` and the point it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub factor: GaussianInfo,
    pub x0: DVector<f64>,
}

/// When non-linear factors are relinearized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelinearizationPolicy {
    #[default]
    AtConstruction,
    EverySyncSteps(u64),
    EveryMessage,
}

#[derive(Clone)]
pub struct FactorNode {
    pub id: FactorId,
    pub label: String,
    pub model: Arc<dyn MeasurementModel>,
    pub variables: Vec<VariableId>,
    pub edges: Vec<EdgeId>,
    pub robust: RobustKernel,
    pub robust_state: RobustState,
    precision_scale: f64,
    precision: DMatrix<f64>,
    linearization: Linearization,
}

impl fmt::Debug for FactorNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FactorNode")
            .field("id", &self.id)
            .field("label", &self.label)
            .field("variables", &self.variables)
            .field("robust", &self.robust)
            .field("precision_scale", &self.precision_scale)
            .finish_non_exhaustive()
    }
}

impl FactorNode {
    pub fn block_dims(&self) -> Vec<usize> {
        self.model.block_dims()
    }

    /// Measurement precision in effect: the model's `Λ_s` times the
    /// dynamic precision multiplier.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn precision_scale(&self) -> f64 {
        self.precision_scale
    }

    pub fn linearization(&self) -> &Linearization {
        &self.linearization
    }

    pub(crate) fn set_linearization(&mut self, lin: Linearization) {
        self.linearization = lin;
    }

    pub fn mahalanobis(&self, x_s: &DVector<f64>) -> f64 {
        mahalanobis_with(
            self.model.measurement(),
            &self.model.predict(x_s),
            &self.precision,
        )
    }

    pub fn energy(&self, x_s: &DVector<f64>) -> f64 {
        let m = self.mahalanobis(x_s);
        m * m
    }
}

#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    variables: Vec<VariableNode>,
    factors: Vec<FactorNode>,
    edges: Vec<Edge>,
    iteration: u64,
    pub relinearization: RelinearizationPolicy,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, dim: usize, label: impl Into<String>) -> Result<VariableId> {
        if dim == 0 {
            return Err(GbpError::InvalidArgument(
                "variables need dimension >= 1".into(),
            ));
        }
        let id = VariableId(self.variables.len());
        self.variables.push(VariableNode {
            id,
            dim,
            label: label.into(),
            edges: Vec::new(),
        });
        Ok(id)
    }

    pub fn add_factor<M: MeasurementModel + 'static>(
        &mut self,
        model: M,
        variables: &[VariableId],
    ) -> Result<FactorId> {
        self.add_shared_factor(Arc::new(model), variables)
    }

    /// Adds a factor and one edge per connected variable. The factor is
    /// linearized immediately at `x0 = 0`.
    pub fn add_shared_factor(
        &mut self,
        model: Arc<dyn MeasurementModel>,
        variables: &[VariableId],
    ) -> Result<FactorId> {
        let dims = model.block_dims();
        if dims.len() != variables.len() {
            return Err(GbpError::DimensionMismatch {
                expected: dims.len(),
                actual: variables.len(),
            });
        }
        for (i, (v, d)) in variables.iter().zip(&dims).enumerate() {
            let node = self
                .variables
                .get(v.0)
                .ok_or(GbpError::UnknownVariable(*v))?;
            if node.dim != *d {
                return Err(GbpError::DimensionMismatch {
                    expected: *d,
                    actual: node.dim,
                });
            }
            if variables[..i].contains(v) {
                return Err(GbpError::InvalidArgument(format!(
                    "variable {v:?} connected twice to one factor"
                )));
            }
        }
        let m = model.measurement().len();
        if model.precision().shape() != (m, m) {
            return Err(GbpError::DimensionMismatch {
                expected: m,
                actual: model.precision().nrows(),
            });
        }

        let id = FactorId(self.factors.len());
        let mut edges = Vec::with_capacity(variables.len());
        for (slot, v) in variables.iter().enumerate() {
            let eid = EdgeId(self.edges.len());
            let dim = self.variables[v.0].dim;
            self.edges.push(Edge {
                id: eid,
                variable: *v,
                factor: id,
                slot,
                var_to_factor: Mailbox::new(dim),
                factor_to_var: Mailbox::new(dim),
            });
            self.variables[v.0].edges.push(eid);
            edges.push(eid);
        }
        let x0 = DVector::zeros(model.state_dim());
        let precision = model.precision().clone();
        let linearization = linearize_scaled(model.as_ref(), &precision, &x0);
        self.factors.push(FactorNode {
            id,
            label: model.kind().to_string(),
            model,
            variables: variables.to_vec(),
            edges,
            robust: RobustKernel::none(),
            robust_state: RobustState::Gaussian,
            precision_scale: 1.0,
            precision,
            linearization,
        });
        Ok(id)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub(crate) fn advance_iteration(&mut self) {
        self.iteration += 1;
    }

    pub fn variables(&self) -> &[VariableNode] {
        &self.variables
    }

    pub fn factors(&self) -> &[FactorNode] {
        &self.factors
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn variable(&self, id: VariableId) -> Result<&VariableNode> {
        self.variables
            .get(id.0)
            .ok_or(GbpError::UnknownVariable(id))
    }

    pub fn factor(&self, id: FactorId) -> Result<&FactorNode> {
        self.factors.get(id.0).ok_or(GbpError::UnknownFactor(id))
    }

    pub(crate) fn factor_mut(&mut self, id: FactorId) -> Result<&mut FactorNode> {
        self.factors
            .get_mut(id.0)
            .ok_or(GbpError::UnknownFactor(id))
    }

    pub fn edge(&self, id: EdgeId) -> Result<&Edge> {
        self.edges.get(id.0).ok_or(GbpError::MissingEdge(id))
    }

    pub(crate) fn edge_mut(&mut self, id: EdgeId) -> Result<&mut Edge> {
        self.edges.get_mut(id.0).ok_or(GbpError::MissingEdge(id))
    }

    pub fn edge_between(&self, variable: VariableId, factor: FactorId) -> Result<EdgeId> {
        let f = self.factor(factor)?;
        f.edges
            .iter()
            .copied()
            .find(|e| self.edges[e.0].variable == variable)
            .ok_or(GbpError::UnknownEdge { variable, factor })
    }

    pub fn set_factor_label(&mut self, id: FactorId, label: impl Into<String>) -> Result<()> {
        self.factor_mut(id)?.label = label.into();
        Ok(())
    }

    pub fn set_robust_kernel(&mut self, id: FactorId, kernel: RobustKernel) -> Result<()> {
        let f = self.factor_mut(id)?;
        f.robust = kernel;
        if !kernel.is_robust() {
            f.robust_state = RobustState::Gaussian;
        }
        Ok(())
    }

    /// Multiplies the factor's measurement precision by `multiplier`
    /// (relative to the model's own precision) and refreshes its linearization
    /// at the current point. Messages already on the edges are kept.
    pub fn set_precision_scale(&mut self, id: FactorId, multiplier: f64) -> Result<()> {
        if !(multiplier > 0.0 && multiplier.is_finite()) {
            return Err(GbpError::InvalidArgument(format!(
                "precision multiplier must be positive, got {multiplier}"
            )));
        }
        let f = self.factor_mut(id)?;
        f.precision_scale = multiplier;
        f.precision = f.model.precision() * multiplier;
        let lin = linearize_scaled(f.model.as_ref(), &f.precision, &f.linearization.x0);
        f.linearization = lin;
        Ok(())
    }

    /// Product of all committed factor-to-variable messages at `id`.
    pub fn belief(&self, id: VariableId) -> Result<GaussianInfo> {
        let v = self.variable(id)?;
        let mut acc = GaussianInfo::zeros(v.dim);
        for e in &v.edges {
            acc.accumulate(&self.edges[e.0].factor_to_var.committed().payload);
        }
        Ok(acc)
    }

    /// Stacked state of the factor's variables built from the means of the
    /// committed variable-to-factor messages, with zero standing in for
    /// uninformative blocks. Also returns how many blocks were informative.
    pub fn factor_state_estimate(&self, id: FactorId) -> Result<(DVector<f64>, usize)> {
        let f = self.factor(id)?;
        let dims = f.block_dims();
        let offsets = block_offsets(&dims);
        let mut x = DVector::zeros(dims.iter().sum());
        let mut informative = 0;
        for (slot, e) in f.edges.iter().enumerate() {
            let payload = &self.edges[e.0].var_to_factor.committed().payload;
            if let Some(mu) = payload.mean() {
                x.rows_mut(offsets[slot], dims[slot]).copy_from(&mu);
                informative += 1;
            }
        }
        Ok((x, informative))
    }

    /// Stacked state of the factor's variables taken from current beliefs.
    pub fn factor_belief_state(&self, id: FactorId) -> Result<DVector<f64>> {
        let f = self.factor(id)?;
        let dims = f.block_dims();
        let offsets = block_offsets(&dims);
        let mut x = DVector::zeros(dims.iter().sum());
        for (slot, v) in f.variables.iter().enumerate() {
            x.rows_mut(offsets[slot], dims[slot])
                .copy_from(&self.belief(*v)?.mean_or_zero());
        }
        Ok(x)
    }

    /// Least-squares energy `(z−h)ᵀΛ(z−h)` at the state assembled from the
    /// incoming variable-to-factor message means.
    pub fn factor_energy(&self, id: FactorId) -> Result<f64> {
        let (x, _) = self.factor_state_estimate(id)?;
        Ok(self.factor(id)?.energy(&x))
    }
}
