//! Dense batch solve of the whole linearized graph.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GbpError, Result};
use crate::gaussian::MomentGaussian;
use crate::graph::{FactorGraph, VariableId};
use crate::robust::robust_scale;

/// Covariance ratios within this distance of 1 are not counted as
/// overconfident, so round-off on exact solutions does not register.
pub const CENSUS_TOLERANCE: f64 = 1e-9;

/// Squared pivot ratio below which the system counts as singular.
const PIVOT_RATIO_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSolution {
    /// Offset of each variable's block in the full state, indexed by id.
    pub ordering: Vec<usize>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Marginals indexed by variable id.
    pub per_variable: Vec<MomentGaussian>,
}

/// How far GBP beliefs sit from a batch solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub mean_errors: Vec<f64>,
    pub max_mean_error: f64,
    /// `trace(Σ_gbp) / trace(Σ_batch)` per variable.
    pub cov_ratios: Vec<f64>,
    /// Fraction of variables whose ratio is below `1 − CENSUS_TOLERANCE`.
    pub overconfident_fraction: f64,
}

fn offsets_for(graph: &FactorGraph, order: &[VariableId]) -> Result<(Vec<usize>, usize)> {
    let n = graph.num_variables();
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(GbpError::InvalidPermutation(format!(
            "ordering has {} entries for {n} variables",
            order.len()
        )));
    }
    let mut offsets = vec![0; n];
    let mut at = 0;
    for v in order {
        if v.0 >= n || seen[v.0] {
            return Err(GbpError::InvalidPermutation(format!("bad entry {:?}", v)));
        }
        seen[v.0] = true;
        offsets[v.0] = at;
        at += graph.variable(*v)?.dim;
    }
    Ok((offsets, at))
}

fn natural_order(graph: &FactorGraph) -> Vec<VariableId> {
    (0..graph.num_variables()).map(VariableId).collect()
}

fn assemble_scaled(
    graph: &FactorGraph,
    offsets: &[usize],
    total: usize,
    scales: Option<&[f64]>,
) -> (DVector<f64>, DMatrix<f64>) {
    let mut eta = DVector::zeros(total);
    let mut lambda = DMatrix::zeros(total, total);
    for (fi, f) in graph.factors().iter().enumerate() {
        let k = scales.map_or(1.0, |s| s[fi]);
        let lin = &f.linearization().factor;
        let dims = f.block_dims();
        let local: Vec<usize> = dims
            .iter()
            .scan(0, |acc, d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect();
        for (a, va) in f.variables.iter().enumerate() {
            let (ga, la, da) = (offsets[va.0], local[a], dims[a]);
            for r in 0..da {
                eta[ga + r] += k * lin.eta()[la + r];
            }
            for (b, vb) in f.variables.iter().enumerate() {
                let (gb, lb, db) = (offsets[vb.0], local[b], dims[b]);
                for r in 0..da {
                    for c in 0..db {
                        lambda[(ga + r, gb + c)] += k * lin.lambda()[(la + r, lb + c)];
                    }
                }
            }
        }
    }
    let lambda = (&lambda + lambda.transpose()) * 0.5;
    (eta, lambda)
}

/// Scatters every factor's cached linearization into one information vector
/// and matrix, variables laid out in id order.
pub fn assemble(graph: &FactorGraph) -> (DVector<f64>, DMatrix<f64>) {
    assemble_with_ordering(graph, &natural_order(graph)).expect("natural order is valid")
}

/// As [`assemble`], with variables laid out in the given order.
pub fn assemble_with_ordering(
    graph: &FactorGraph,
    order: &[VariableId],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (offsets, total) = offsets_for(graph, order)?;
    Ok(assemble_scaled(graph, &offsets, total, None))
}

fn factorize(lambda: DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let chol = Cholesky::new(lambda).ok_or(GbpError::SingularSystem)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    if !(lo > 0.0) || (lo / hi).powi(2) < PIVOT_RATIO_FLOOR {
        return Err(GbpError::SingularSystem);
    }
    Ok(chol)
}

fn finish(
    graph: &FactorGraph,
    offsets: Vec<usize>,
    eta: DVector<f64>,
    lambda: DMatrix<f64>,
) -> Result<BatchSolution> {
    if graph.num_variables() == 0 {
        return Err(GbpError::EmptyGraph);
    }
    let chol = factorize(lambda)?;
    let mean = chol.solve(&eta);
    let covariance = chol.inverse();
    let per_variable = graph
        .variables()
        .iter()
        .map(|v| {
            let o = offsets[v.id.0];
            MomentGaussian {
                mu: mean.rows(o, v.dim).into_owned(),
                sigma: covariance.view((o, o), (v.dim, v.dim)).into_owned(),
            }
        })
        .collect();
    Ok(BatchSolution {
        ordering: offsets,
        mean,
        covariance,
        per_variable,
    })
}

/// Mean and covariance of every variable under the full linear system.
/// Robust kernels are ignored.
pub fn solve(graph: &FactorGraph) -> Result<BatchSolution> {
    solve_with_ordering(graph, &natural_order(graph))
}

pub fn solve_with_ordering(graph: &FactorGraph, order: &[VariableId]) -> Result<BatchSolution> {
    let (offsets, total) = offsets_for(graph, order)?;
    let (eta, lambda) = assemble_scaled(graph, &offsets, total, None);
    finish(graph, offsets, eta, lambda)
}

/// Iteratively reweighted solve: each outer iteration rescales every robust
/// factor by its kernel weight at the previous mean.
pub fn solve_robust(graph: &FactorGraph, outer_iters: usize) -> Result<BatchSolution> {
    let order = natural_order(graph);
    let (offsets, total) = offsets_for(graph, &order)?;
    let mut scales = vec![1.0; graph.num_factors()];
    let mut solution = None;
    for _ in 0..outer_iters.max(1) {
        let (eta, lambda) = assemble_scaled(graph, &offsets, total, Some(&scales));
        let sol = finish(graph, offsets.clone(), eta, lambda)?;
        for (fi, f) in graph.factors().iter().enumerate() {
            if !f.robust.is_robust() {
                continue;
            }
            let x = DVector::from_iterator(
                f.block_dims().iter().sum(),
                f.variables
                    .iter()
                    .flat_map(|v| sol.per_variable[v.0].mu.iter().copied().collect::<Vec<_>>()),
            );
            scales[fi] = robust_scale(&f.robust, f.mahalanobis(&x));
        }
        solution = Some(sol);
    }
    Ok(solution.expect("at least one iteration"))
}

/// IRLS passes used by [`reference_solution`] on robust graphs.
pub const ROBUST_OUTER_ITERS: usize = 20;

/// The oracle a graph's beliefs should be compared with: a plain solve, or
/// IRLS when any factor carries a robust kernel.
pub fn reference_solution(graph: &FactorGraph) -> Result<BatchSolution> {
    if graph.factors().iter().any(|f| f.robust.is_robust()) {
        solve_robust(graph, ROBUST_OUTER_ITERS)
    } else {
        solve(graph)
    }
}

/// Compares current beliefs against a batch solution computed on the same
/// linearizations. Variables whose belief has no mean count as infinitely
/// wrong.
pub fn compare(graph: &FactorGraph, batch: &BatchSolution) -> Divergence {
    let mut mean_errors = Vec::with_capacity(graph.num_variables());
    let mut cov_ratios = Vec::with_capacity(graph.num_variables());
    for v in graph.variables() {
        let reference = &batch.per_variable[v.id.0];
        match graph.belief(v.id).and_then(|b| b.to_moments()) {
            Ok(m) => {
                mean_errors.push((&m.mu - &reference.mu).norm());
                cov_ratios.push(m.sigma.trace() / reference.sigma.trace());
            }
            Err(_) => {
                mean_errors.push(f64::INFINITY);
                cov_ratios.push(f64::INFINITY);
            }
        }
    }
    let max_mean_error = mean_errors.iter().copied().fold(0.0, f64::max);
    let overconfident = cov_ratios
        .iter()
        .filter(|r| **r < 1.0 - CENSUS_TOLERANCE)
        .count();
    let overconfident_fraction = if cov_ratios.is_empty() {
        0.0
    } else {
        overconfident as f64 / cov_ratios.len() as f64
    };
    Divergence {
        mean_errors,
        max_mean_error,
        cov_ratios,
        overconfident_fraction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::DampingConfig;
    use crate::models::{RelativePose2dModel, SmoothnessModel, UnaryAnchorModel};
    use crate::robust::RobustKernel;
    use crate::schedule::{run_until, ScheduleKind};
    use nalgebra::{dmatrix, dvector, Vector2};
    use proptest::prelude::*;

    fn pose_chain() -> FactorGraph {
        let mut g = FactorGraph::new();
        let a = g.add_variable(2, "a").unwrap();
        let b = g.add_variable(2, "b").unwrap();
        let c = g.add_variable(2, "c").unwrap();
        g.add_factor(
            UnaryAnchorModel::new(dvector![1.0, -1.0], 0.01).unwrap(),
            &[a],
        )
        .unwrap();
        g.add_factor(
            RelativePose2dModel::new(Vector2::new(2.0, 0.5), 0.1).unwrap(),
            &[a, b],
        )
        .unwrap();
        g.add_factor(
            RelativePose2dModel::new(Vector2::new(-1.0, 1.0), 0.2).unwrap(),
            &[b, c],
        )
        .unwrap();
        g.add_factor(
            RelativePose2dModel::new(Vector2::new(1.2, 1.4), 0.3).unwrap(),
            &[a, c],
        )
        .unwrap();
        g
    }

    #[test]
    fn single_unary_assembles_to_its_linearization() {
        let mut g = FactorGraph::new();
        let a = g.add_variable(2, "a").unwrap();
        g.add_factor(
            UnaryAnchorModel::new(dvector![1.0, 2.0], 1.0).unwrap(),
            &[a],
        )
        .unwrap();
        let (eta, lambda) = assemble(&g);
        assert_eq!(&eta, g.factors()[0].linearization().factor.eta());
        assert_eq!(&lambda, g.factors()[0].linearization().factor.lambda());

        let sol = solve(&g).unwrap();
        assert!((&sol.mean - dvector![1.0, 2.0]).amax() < 1e-12);
        assert!((&sol.covariance - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn disjoint_unaries_are_block_diagonal() {
        let mut g = FactorGraph::new();
        let a = g.add_variable(2, "a").unwrap();
        let b = g.add_variable(1, "b").unwrap();
        g.add_factor(
            UnaryAnchorModel::new(dvector![1.0, 2.0], 1.0).unwrap(),
            &[a],
        )
        .unwrap();
        g.add_factor(UnaryAnchorModel::new(dvector![3.0], 0.5).unwrap(), &[b])
            .unwrap();
        let (_, lambda) = assemble(&g);
        assert_eq!(
            lambda,
            dmatrix![1.0, 0.0, 0.0; 0.0, 1.0, 0.0; 0.0, 0.0, 4.0]
        );
    }

    #[test]
    fn chain_is_tridiagonal() {
        let mut g = FactorGraph::new();
        let vars: Vec<_> = (0..6).map(|_| g.add_variable(1, "h").unwrap()).collect();
        g.add_factor(
            UnaryAnchorModel::new(dvector![0.0], 1.0).unwrap(),
            &[vars[0]],
        )
        .unwrap();
        for w in vars.windows(2) {
            g.add_factor(SmoothnessModel::new(0.5).unwrap(), &[w[0], w[1]])
                .unwrap();
        }
        let (_, lambda) = assemble(&g);
        for i in 0..6usize {
            for j in 0..6 {
                if i.abs_diff(j) > 1usize {
                    assert_eq!(lambda[(i, j)], 0.0);
                } else {
                    assert!(lambda[(i, j)] != 0.0);
                }
            }
        }
    }

    #[test]
    fn relative_composition_is_exact() {
        let mut g = FactorGraph::new();
        let a = g.add_variable(2, "a").unwrap();
        let b = g.add_variable(2, "b").unwrap();
        g.add_factor(
            UnaryAnchorModel::new(dvector![1.0, 1.0], 0.01).unwrap(),
            &[a],
        )
        .unwrap();
        g.add_factor(
            RelativePose2dModel::new(Vector2::new(3.0, 4.0), 0.1).unwrap(),
            &[a, b],
        )
        .unwrap();
        let sol = solve(&g).unwrap();
        assert!((&sol.per_variable[1].mu - dvector![4.0, 5.0]).amax() < 1e-12);
    }

    #[test]
    fn unanchored_graph_is_singular() {
        let mut g = FactorGraph::new();
        let a = g.add_variable(2, "a").unwrap();
        let b = g.add_variable(2, "b").unwrap();
        g.add_factor(
            RelativePose2dModel::new(Vector2::new(3.0, 4.0), 0.1).unwrap(),
            &[a, b],
        )
        .unwrap();
        assert_eq!(solve(&g), Err(GbpError::SingularSystem));
        assert_eq!(solve(&FactorGraph::new()), Err(GbpError::EmptyGraph));
    }

    #[test]
    fn marginals_are_sub_blocks() {
        let sol = solve(&pose_chain()).unwrap();
        for (i, m) in sol.per_variable.iter().enumerate() {
            let o = sol.ordering[i];
            assert_eq!(m.mu, sol.mean.rows(o, 2).into_owned());
            assert_eq!(m.sigma, sol.covariance.view((o, o), (2, 2)).into_owned());
        }
    }

    #[test]
    fn bad_orderings_are_rejected() {
        let g = pose_chain();
        assert!(solve_with_ordering(&g, &[VariableId(0)]).is_err());
        assert!(solve_with_ordering(&g, &[VariableId(0), VariableId(0), VariableId(1)]).is_err());
    }

    #[test]
    fn compare_against_self_and_tree() {
        let mut g = FactorGraph::new();
        let vars: Vec<_> = (0..5).map(|_| g.add_variable(1, "h").unwrap()).collect();
        g.add_factor(
            UnaryAnchorModel::new(dvector![2.0], 0.3).unwrap(),
            &[vars[0]],
        )
        .unwrap();
        for w in vars.windows(2) {
            g.add_factor(SmoothnessModel::new(0.5).unwrap(), &[w[0], w[1]])
                .unwrap();
        }
        let sol = solve(&g).unwrap();
        // Unconverged: beliefs carry no information yet.
        assert!(compare(&g, &sol).max_mean_error.is_infinite());

        run_until(
            &mut g,
            ScheduleKind::Floodfill,
            1,
            0.0,
            DampingConfig::none(),
        )
        .unwrap();
        let d = compare(&g, &sol);
        assert!(d.max_mean_error <= 1e-9);
        for r in &d.cov_ratios {
            assert!((r - 1.0).abs() <= 1e-9);
        }
        assert_eq!(d.overconfident_fraction, 0.0);
    }

    #[test]
    fn robust_batch_downweights_outlier() {
        let mut g = FactorGraph::new();
        let a = g.add_variable(1, "a").unwrap();
        for z in [0.0, 0.1, -0.1, 0.05, 10.0] {
            let f = g
                .add_factor(UnaryAnchorModel::new(dvector![z], 0.1).unwrap(), &[a])
                .unwrap();
            g.set_robust_kernel(f, RobustKernel::huber(4.0)).unwrap();
        }
        let plain = solve(&g).unwrap().mean[0];
        let robust = solve_robust(&g, 20).unwrap().mean[0];
        assert!(plain > 1.5);
        assert!(robust.abs() < plain.abs() / 4.0);
        assert_eq!(reference_solution(&g).unwrap().mean[0], robust);
        assert_eq!(
            reference_solution(&pose_chain()).unwrap().mean,
            solve(&pose_chain()).unwrap().mean
        );
    }

    proptest! {
        #[test]
        fn ordering_does_not_change_marginals(seed in 0u64..1000) {
            let g = pose_chain();
            let mut order = vec![VariableId(0), VariableId(1), VariableId(2)];
            let k = (seed % 6) as usize;
            order.rotate_left(k % 3);
            if k >= 3 {
                order.swap(0, 1);
            }
            let a = solve(&g).unwrap();
            let b = solve_with_ordering(&g, &order).unwrap();
            for i in 0..3 {
                prop_assert!((&a.per_variable[i].mu - &b.per_variable[i].mu).amax() < 1e-12);
                prop_assert!((&a.per_variable[i].sigma - &b.per_variable[i].sigma).amax() < 1e-12);
            }
        }
    }
}
