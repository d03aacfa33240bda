//! Message schedules and convergence driving.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GbpError, Result};
use crate::graph::{Direction, EdgeId, FactorGraph, FactorId, Message, RelinearizationPolicy};
use crate::message::{
    factor_message_on_edge, relinearize, variable_message_on_edge, DampingConfig,
};
use crate::robust::RobustState;

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Every variable sends, then every factor sends; reads only the
    /// previous commit.
    Synchronous,
    /// One uniformly random (edge, direction) message at a time.
    Random { seed: u64 },
    /// Left-to-right then right-to-left along a chain.
    Floodfill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub messages_sent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub messages_sent: usize,
    pub max_message_residual: f64,
    pub converged: bool,
    pub wall_notes: String,
}

fn compute(
    graph: &FactorGraph,
    edge: EdgeId,
    dir: Direction,
    damping: DampingConfig,
) -> Result<(Message, Option<RobustState>)> {
    match dir {
        Direction::VariableToFactor => Ok((variable_message_on_edge(graph, edge)?, None)),
        Direction::FactorToVariable => {
            let (m, s) = factor_message_on_edge(graph, edge, damping)?;
            Ok((m, Some(s)))
        }
    }
}

fn compute_phase(
    graph: &FactorGraph,
    dir: Direction,
    damping: DampingConfig,
) -> Result<Vec<(Message, Option<RobustState>)>> {
    let ids: Vec<EdgeId> = graph.edges().iter().map(|e| e.id).collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ids.par_iter()
            .map(|e| compute(graph, *e, dir, damping))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ids.iter()
            .map(|e| compute(graph, *e, dir, damping))
            .collect()
    }
}

fn stage_and_commit(
    graph: &mut FactorGraph,
    dir: Direction,
    staged: Vec<(Message, Option<RobustState>)>,
) -> Result<()> {
    for (i, (msg, state)) in staged.into_iter().enumerate() {
        let edge = graph.edge_mut(EdgeId(i))?;
        let factor = edge.factor;
        edge.mailbox_mut(dir).stage(msg);
        if let Some(s) = state {
            graph.factor_mut(factor)?.robust_state = s;
        }
    }
    for i in 0..graph.num_edges() {
        graph.edge_mut(EdgeId(i))?.mailbox_mut(dir).commit();
    }
    Ok(())
}

fn relinearize_all(graph: &mut FactorGraph) -> Result<()> {
    for i in 0..graph.num_factors() {
        relinearize(graph, FactorId(i))?;
    }
    Ok(())
}

/// One synchronous iteration: all variable-to-factor messages from the
/// committed state, commit, then all factor-to-variable messages, commit.
pub fn sync_step(graph: &mut FactorGraph, damping: DampingConfig) -> Result<StepStats> {
    let to_factors = compute_phase(graph, Direction::VariableToFactor, damping)?;
    stage_and_commit(graph, Direction::VariableToFactor, to_factors)?;

    let relin = match graph.relinearization {
        RelinearizationPolicy::AtConstruction => false,
        RelinearizationPolicy::EverySyncSteps(k) => k > 0 && graph.iteration().is_multiple_of(k),
        RelinearizationPolicy::EveryMessage => true,
    };
    if relin {
        relinearize_all(graph)?;
    }

    let to_variables = compute_phase(graph, Direction::FactorToVariable, damping)?;
    stage_and_commit(graph, Direction::FactorToVariable, to_variables)?;
    graph.advance_iteration();
    Ok(StepStats {
        messages_sent: 2 * graph.num_edges(),
    })
}

/// Computes one message and commits it immediately.
pub fn send_message(
    graph: &mut FactorGraph,
    edge: EdgeId,
    dir: Direction,
    damping: DampingConfig,
) -> Result<()> {
    if dir == Direction::FactorToVariable
        && graph.relinearization == RelinearizationPolicy::EveryMessage
    {
        let factor = graph.edge(edge)?.factor;
        relinearize(graph, factor)?;
    }
    let (msg, state) = compute(graph, edge, dir, damping)?;
    let e = graph.edge_mut(edge)?;
    let factor = e.factor;
    e.mailbox_mut(dir).write_through(msg);
    if let Some(s) = state {
        graph.factor_mut(factor)?.robust_state = s;
    }
    Ok(())
}

/// Sends one uniformly chosen message (edge and direction both random).
pub fn random_step<R: Rng + ?Sized>(
    graph: &mut FactorGraph,
    rng: &mut R,
    damping: DampingConfig,
) -> Result<StepStats> {
    let n = graph.num_edges();
    if n == 0 {
        return Err(GbpError::EmptyGraph);
    }
    let pick = rng.random_range(0..2 * n);
    let dir = if pick % 2 == 0 {
        Direction::FactorToVariable
    } else {
        Direction::VariableToFactor
    };
    send_message(graph, EdgeId(pick / 2), dir, damping)?;
    graph.advance_iteration();
    Ok(StepStats { messages_sent: 1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    Var(usize),
    Fac(usize),
}

/// Orders the graph's nodes along its single path, starting from the end
/// with the lowest-numbered variable.
fn chain_path(graph: &FactorGraph) -> Result<Vec<Node>> {
    if graph.num_variables() == 0 {
        return Ok(Vec::new());
    }
    for f in graph.factors() {
        if f.variables.len() > 2 {
            return Err(GbpError::NotAChain(format!(
                "factor {:?} has arity {}",
                f.id,
                f.variables.len()
            )));
        }
    }
    for v in graph.variables() {
        if v.edges.len() > 2 {
            return Err(GbpError::NotAChain(format!(
                "variable {:?} has {} factors",
                v.id,
                v.edges.len()
            )));
        }
    }
    let degree = |n: Node| match n {
        Node::Var(i) => graph.variables()[i].edges.len(),
        Node::Fac(i) => graph.factors()[i].variables.len(),
    };
    let neighbours = |n: Node| -> Vec<Node> {
        match n {
            Node::Var(i) => graph.variables()[i]
                .edges
                .iter()
                .map(|e| Node::Fac(graph.edges()[e.0].factor.0))
                .collect(),
            Node::Fac(i) => graph.factors()[i]
                .variables
                .iter()
                .map(|v| Node::Var(v.0))
                .collect(),
        }
    };
    let start = (0..graph.num_variables())
        .map(Node::Var)
        .chain((0..graph.num_factors()).map(Node::Fac))
        .find(|n| degree(*n) <= 1)
        .ok_or_else(|| GbpError::NotAChain("graph contains a cycle".into()))?;

    let mut path = vec![start];
    let mut prev: Option<Node> = None;
    let mut cur = start;
    loop {
        let next = neighbours(cur).into_iter().find(|n| Some(*n) != prev);
        match next {
            Some(n) => {
                prev = Some(cur);
                cur = n;
                path.push(n);
            }
            None => break,
        }
    }
    if path.len() != graph.num_variables() + graph.num_factors() {
        return Err(GbpError::NotAChain("graph is not connected".into()));
    }
    Ok(path)
}

fn edge_for(graph: &FactorGraph, a: Node, b: Node) -> Result<(EdgeId, Direction)> {
    match (a, b) {
        (Node::Var(v), Node::Fac(f)) => Ok((
            graph.edge_between(crate::graph::VariableId(v), FactorId(f))?,
            Direction::VariableToFactor,
        )),
        (Node::Fac(f), Node::Var(v)) => Ok((
            graph.edge_between(crate::graph::VariableId(v), FactorId(f))?,
            Direction::FactorToVariable,
        )),
        _ => Err(GbpError::NotAChain("path is not bipartite".into())),
    }
}

/// Sequential sweep along a chain, one end to the other and back, each
/// message committed as soon as it is computed. On a chain every belief is
/// exact afterwards.
pub fn floodfill_sweep(graph: &mut FactorGraph) -> Result<StepStats> {
    let path = chain_path(graph)?;
    let mut sent = 0;
    let hops: Vec<(Node, Node)> = path
        .windows(2)
        .map(|w| (w[0], w[1]))
        .chain(path.windows(2).rev().map(|w| (w[1], w[0])))
        .collect();
    for (a, b) in hops {
        let (edge, dir) = edge_for(graph, a, b)?;
        send_message(graph, edge, dir, DampingConfig::none())?;
        sent += 1;
    }
    graph.advance_iteration();
    Ok(StepStats {
        messages_sent: sent,
    })
}

/// Largest change between the last two commits of any mailbox.
pub fn message_residual(graph: &FactorGraph) -> f64 {
    graph
        .edges()
        .iter()
        .flat_map(|e| [e.var_to_factor.residual(), e.factor_to_var.residual()])
        .fold(0.0, f64::max)
}

/// Largest change that recomputing every message from the committed state
/// would produce, without committing anything.
pub fn fixed_point_residual(graph: &FactorGraph, damping: DampingConfig) -> Result<f64> {
    let mut worst = 0.0f64;
    for dir in [Direction::VariableToFactor, Direction::FactorToVariable] {
        let fresh = compute_phase(graph, dir, damping)?;
        for (edge, (msg, _)) in graph.edges().iter().zip(fresh) {
            let old = &edge.mailbox(dir).committed().payload;
            let r = (msg.payload.eta() - old.eta()).amax()
                + (msg.payload.lambda() - old.lambda()).amax();
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// Drives one schedule an iteration at a time, keeping the random
/// schedule's generator between calls.
///
/// One iteration is a synchronous step, `2E` random messages, or one
/// floodfill sweep. Synchronous runs monitor [`message_residual`]. The
/// sequential schedules leave most mailboxes untouched between any two
/// writes, so they are monitored with [`fixed_point_residual`] instead.
#[derive(Debug, Clone)]
pub struct Scheduler {
    kind: ScheduleKind,
    damping: DampingConfig,
    rng: Option<ChaCha8Rng>,
}

impl Scheduler {
    pub fn new(kind: ScheduleKind, damping: DampingConfig) -> Self {
        let rng = match kind {
            ScheduleKind::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        Self { kind, damping, rng }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn damping(&self) -> DampingConfig {
        self.damping
    }

    /// Runs one iteration and returns its message count and the residual
    /// after it.
    pub fn iterate(&mut self, graph: &mut FactorGraph) -> Result<(StepStats, f64)> {
        let stats = match self.kind {
            ScheduleKind::Synchronous => sync_step(graph, self.damping)?,
            ScheduleKind::Random { .. } => {
                let rng = self.rng.as_mut().expect("seeded in new");
                let mut total = StepStats::default();
                for _ in 0..2 * graph.num_edges().max(1) {
                    total.messages_sent += random_step(graph, rng, self.damping)?.messages_sent;
                }
                total
            }
            ScheduleKind::Floodfill => floodfill_sweep(graph)?,
        };
        let residual = match self.kind {
            ScheduleKind::Synchronous => message_residual(graph),
            ScheduleKind::Random { .. } => fixed_point_residual(graph, self.damping)?,
            ScheduleKind::Floodfill => fixed_point_residual(graph, DampingConfig::none())?,
        };
        Ok((stats, residual))
    }

    pub fn describe(&self, graph: &FactorGraph) -> String {
        format!(
            "{} schedule, {} edges, damping {}",
            match self.kind {
                ScheduleKind::Synchronous => "synchronous".to_string(),
                ScheduleKind::Random { seed } => format!("random(seed {seed})"),
                ScheduleKind::Floodfill => "floodfill".to_string(),
            },
            graph.num_edges(),
            self.damping.beta()
        )
    }
}

/// Repeats iterations of `kind` until the residual drops to `tol` or
/// `max_iters` is reached. See [`Scheduler`] for what an iteration is.
pub fn run_until(
    graph: &mut FactorGraph,
    kind: ScheduleKind,
    max_iters: usize,
    tol: f64,
    damping: DampingConfig,
) -> Result<ConvergenceReport> {
    if max_iters == 0 {
        return Err(GbpError::InvalidArgument("max_iters must be >= 1".into()));
    }
    let mut scheduler = Scheduler::new(kind, damping);
    let mut report = ConvergenceReport {
        iterations: 0,
        messages_sent: 0,
        max_message_residual: f64::INFINITY,
        converged: false,
        wall_notes: String::new(),
    };
    while report.iterations < max_iters {
        let (stats, residual) = scheduler.iterate(graph)?;
        report.iterations += 1;
        report.messages_sent += stats.messages_sent;
        report.max_message_residual = residual;
        if residual <= tol {
            report.converged = true;
            break;
        }
    }
    report.wall_notes = scheduler.describe(graph);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch;
    use crate::graph::VariableId;
    use crate::models::{RelativePose2dModel, SmoothnessModel, UnaryAnchorModel};
    use nalgebra::{dvector, Vector2};

    fn chain(n: usize) -> FactorGraph {
        let mut g = FactorGraph::new();
        let vars: Vec<_> = (0..n).map(|_| g.add_variable(1, "h").unwrap()).collect();
        g.add_factor(
            UnaryAnchorModel::new(dvector![1.0], 0.5).unwrap(),
            &[vars[0]],
        )
        .unwrap();
        for w in vars.windows(2) {
            g.add_factor(SmoothnessModel::new(0.3).unwrap(), &[w[0], w[1]])
                .unwrap();
        }
        g
    }

    fn loop_graph() -> FactorGraph {
        let mut g = FactorGraph::new();
        let vars: Vec<_> = (0..4).map(|_| g.add_variable(2, "pose").unwrap()).collect();
        g.add_factor(
            UnaryAnchorModel::new(dvector![0.0, 0.0], 0.01).unwrap(),
            &[vars[0]],
        )
        .unwrap();
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        for i in 0..4 {
            let j = (i + 1) % 4;
            let z = Vector2::new(pts[j].0 - pts[i].0 + 0.05, pts[j].1 - pts[i].1 - 0.02);
            g.add_factor(
                RelativePose2dModel::new(z, 0.1).unwrap(),
                &[vars[i], vars[j]],
            )
            .unwrap();
        }
        g
    }

    #[test]
    fn sync_step_counts_messages() {
        let mut g = chain(5);
        let stats = sync_step(&mut g, DampingConfig::none()).unwrap();
        assert_eq!(stats.messages_sent, 2 * g.num_edges());
        assert_eq!(g.iteration(), 1);

        let mut empty = FactorGraph::new();
        assert_eq!(
            sync_step(&mut empty, DampingConfig::none())
                .unwrap()
                .messages_sent,
            0
        );
    }

    #[test]
    fn sync_step_reads_only_the_previous_commit() {
        let mut g = loop_graph();
        for _ in 0..3 {
            sync_step(&mut g, DampingConfig::none()).unwrap();
        }
        let before = g.clone();
        sync_step(&mut g, DampingConfig::none()).unwrap();

        // Phase 1 from `before` alone.
        let mut expected = before.clone();
        for e in before.edges() {
            let m = variable_message_on_edge(&before, e.id).unwrap();
            expected
                .edge_mut(e.id)
                .unwrap()
                .var_to_factor
                .write_through(m);
        }
        let snapshot = expected.clone();
        for e in snapshot.edges() {
            let (m, _) = factor_message_on_edge(&snapshot, e.id, DampingConfig::none()).unwrap();
            expected
                .edge_mut(e.id)
                .unwrap()
                .factor_to_var
                .write_through(m);
        }
        for (a, b) in g.edges().iter().zip(expected.edges()) {
            assert_eq!(
                a.var_to_factor.committed().payload,
                b.var_to_factor.committed().payload
            );
            assert_eq!(
                a.factor_to_var.committed().payload,
                b.factor_to_var.committed().payload
            );
            assert!(!a.var_to_factor.has_staged() && !a.factor_to_var.has_staged());
        }
    }

    #[test]
    fn random_step_is_seeded() {
        let mut a = chain(6);
        let mut b = chain(6);
        let mut ra = ChaCha8Rng::seed_from_u64(7);
        let mut rb = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            assert_eq!(
                random_step(&mut a, &mut ra, DampingConfig::none())
                    .unwrap()
                    .messages_sent,
                1
            );
            random_step(&mut b, &mut rb, DampingConfig::none()).unwrap();
        }
        for (x, y) in a.edges().iter().zip(b.edges()) {
            assert_eq!(x.factor_to_var.committed(), y.factor_to_var.committed());
            assert_eq!(x.var_to_factor.committed(), y.var_to_factor.committed());
        }
        let mut empty = FactorGraph::new();
        empty.add_variable(1, "x").unwrap();
        assert_eq!(
            random_step(&mut empty, &mut ra, DampingConfig::none()),
            Err(GbpError::EmptyGraph)
        );
    }

    #[test]
    fn floodfill_is_exact_on_a_chain() {
        let mut g = chain(8);
        let stats = floodfill_sweep(&mut g).unwrap();
        assert_eq!(stats.messages_sent, 2 * g.num_edges());
        let batch = batch::solve(&g).unwrap();
        for v in g.variables() {
            let m = g.belief(v.id).unwrap().to_moments().unwrap();
            let b = &batch.per_variable[v.id.0];
            assert!((m.mu[0] - b.mu[0]).abs() < 1e-9);
            assert!((m.sigma[(0, 0)] - b.sigma[(0, 0)]).abs() < 1e-9 * b.sigma[(0, 0)]);
        }
        assert!(fixed_point_residual(&g, DampingConfig::none()).unwrap() < 1e-12);
    }

    #[test]
    fn floodfill_edge_cases() {
        let mut single = FactorGraph::new();
        single.add_variable(1, "x").unwrap();
        assert_eq!(floodfill_sweep(&mut single).unwrap().messages_sent, 0);

        let mut g = loop_graph();
        assert!(matches!(
            floodfill_sweep(&mut g),
            Err(GbpError::NotAChain(_))
        ));

        let mut star = FactorGraph::new();
        let c = star.add_variable(1, "c").unwrap();
        for _ in 0..3 {
            let leaf = star.add_variable(1, "l").unwrap();
            star.add_factor(SmoothnessModel::new(1.0).unwrap(), &[c, leaf])
                .unwrap();
        }
        assert!(matches!(
            floodfill_sweep(&mut star),
            Err(GbpError::NotAChain(_))
        ));

        let mut split = chain(3);
        split.add_variable(1, "island").unwrap();
        assert!(matches!(
            floodfill_sweep(&mut split),
            Err(GbpError::NotAChain(_))
        ));
    }

    #[test]
    fn residual_is_zero_for_identical_commits() {
        let mut g = chain(3);
        assert_eq!(message_residual(&g), 0.0);
        let e = g.edges()[0].id;
        let msg = g.edges()[0].factor_to_var.committed().clone();
        g.edge_mut(e).unwrap().factor_to_var.write_through(msg);
        assert_eq!(message_residual(&g), 0.0);
    }

    #[test]
    fn run_until_infinite_tolerance_stops_after_one_iteration() {
        let mut g = chain(4);
        let r = run_until(
            &mut g,
            ScheduleKind::Synchronous,
            10,
            f64::INFINITY,
            DampingConfig::none(),
        )
        .unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert!(run_until(
            &mut g,
            ScheduleKind::Synchronous,
            0,
            1.0,
            DampingConfig::none()
        )
        .is_err());
    }

    #[test]
    fn run_until_tree_converges_within_diameter() {
        let n = 6;
        let mut g = chain(n);
        // Path length in factor hops is n - 1 plus the anchor.
        let r = run_until(
            &mut g,
            ScheduleKind::Synchronous,
            100,
            1e-12,
            DampingConfig::none(),
        )
        .unwrap();
        assert!(r.converged);
        assert!(r.iterations <= n + 2, "took {} iterations", r.iterations);
        let batch = batch::solve(&g).unwrap();
        for v in 0..n {
            let mu = g.belief(VariableId(v)).unwrap().mean().unwrap();
            assert!((mu[0] - batch.per_variable[v].mu[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn schedules_agree_on_the_fixed_point() {
        let mut sync = chain(7);
        let mut random = chain(7);
        let mut flood = chain(7);
        run_until(
            &mut sync,
            ScheduleKind::Synchronous,
            500,
            1e-12,
            DampingConfig::none(),
        )
        .unwrap();
        let r = run_until(
            &mut random,
            ScheduleKind::Random { seed: 3 },
            500,
            1e-12,
            DampingConfig::none(),
        )
        .unwrap();
        assert!(r.converged);
        run_until(
            &mut flood,
            ScheduleKind::Floodfill,
            5,
            1e-12,
            DampingConfig::none(),
        )
        .unwrap();
        for v in 0..7 {
            let a = sync.belief(VariableId(v)).unwrap().mean().unwrap()[0];
            let b = random.belief(VariableId(v)).unwrap().mean().unwrap()[0];
            let c = flood.belief(VariableId(v)).unwrap().mean().unwrap()[0];
            assert!(
                (a - b).abs() < 1e-6 && (a - c).abs() < 1e-6,
                "{v}: {a} {b} {c}"
            );
        }
    }

    #[test]
    fn loopy_sync_matches_batch_means() {
        let mut g = loop_graph();
        let r = run_until(
            &mut g,
            ScheduleKind::Synchronous,
            2000,
            1e-12,
            DampingConfig::none(),
        )
        .unwrap();
        assert!(r.converged);
        let batch = batch::solve(&g).unwrap();
        let cmp = batch::compare(&g, &batch);
        assert!(cmp.max_mean_error < 1e-6);
    }
}
