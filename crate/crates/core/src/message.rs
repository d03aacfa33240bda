//! The GBP kernel: linearization and the two message rules.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GbpError, Result};
use crate::gaussian::{block_offsets, symmetrize, GaussianInfo};
use crate::graph::{EdgeId, FactorGraph, FactorId, Linearization, Message, VariableId};
use crate::models::MeasurementModel;
use crate::robust::{robust_scale, RobustState};

pub use crate::robust::mahalanobis;

/// Weight on the previous message when blending a new one in.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DampingConfig {
    beta: f64,
}

impl DampingConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if (0.0..1.0).contains(&beta) {
            Ok(Self { beta })
        } else {
            Err(GbpError::InvalidArgument(format!(
                "damping must lie in [0, 1), got {beta}"
            )))
        }
    }

    pub const fn none() -> Self {
        Self { beta: 0.0 }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Linear factor at `x0`: `η = JᵀΛ(J x0 + z − h(x0))`, `Λ' = JᵀΛJ`.
pub fn linearize(model: &dyn MeasurementModel, x0: &DVector<f64>) -> GaussianInfo {
    linearize_scaled(model, model.precision(), x0).factor
}

pub(crate) fn linearize_scaled(
    model: &dyn MeasurementModel,
    precision: &DMatrix<f64>,
    x0: &DVector<f64>,
) -> Linearization {
    let j = model.jacobian(x0);
    let jt_lambda = j.transpose() * precision;
    let innovation = &j * x0 + model.measurement() - model.predict(x0);
    let eta = &jt_lambda * innovation;
    let lambda = symmetrize(&(&jt_lambda * &j));
    Linearization {
        factor: GaussianInfo::new(eta, lambda).expect("linearization shapes agree"),
        x0: x0.clone(),
    }
}

/// Product of the committed factor-to-variable messages on every edge of
/// `variable` except the one leading to `target`.
pub fn variable_to_factor_message(
    graph: &FactorGraph,
    variable: VariableId,
    target: FactorId,
) -> Result<Message> {
    let edge = graph.edge_between(variable, target)?;
    variable_message_on_edge(graph, edge)
}

pub(crate) fn variable_message_on_edge(graph: &FactorGraph, edge: EdgeId) -> Result<Message> {
    let e = graph.edge(edge)?;
    let v = graph.variable(e.variable)?;
    let mut acc = GaussianInfo::zeros(v.dim);
    for other in v.edges.iter().filter(|id| **id != edge) {
        acc.accumulate(&graph.edge(*other)?.factor_to_var.committed().payload);
    }
    Ok(Message {
        payload: acc,
        iteration_stamp: graph.iteration(),
    })
}

/// Message from `factor` to `target`: condition the (possibly robust-scaled)
/// linear factor on every other incoming message, move the target block to
/// the front, marginalize the rest and blend with the previous message.
pub fn factor_to_variable_message(
    graph: &FactorGraph,
    factor: FactorId,
    target: VariableId,
    damping: DampingConfig,
) -> Result<Message> {
    let edge = graph.edge_between(target, factor)?;
    Ok(factor_message_on_edge(graph, edge, damping)?.0)
}

/// Robust scale the factor would apply right now, from the means of all
/// its committed incoming messages.
pub fn robust_state(graph: &FactorGraph, factor: FactorId) -> Result<RobustState> {
    let f = graph.factor(factor)?;
    if !f.robust.is_robust() {
        return Ok(RobustState::Gaussian);
    }
    let (x, informative) = graph.factor_state_estimate(factor)?;
    if informative == 0 {
        return Ok(RobustState::Gaussian);
    }
    let k = robust_scale(&f.robust, f.mahalanobis(&x));
    Ok(if k < 1.0 {
        RobustState::Scaled(k)
    } else {
        RobustState::Gaussian
    })
}

pub(crate) fn factor_message_on_edge(
    graph: &FactorGraph,
    edge: EdgeId,
    damping: DampingConfig,
) -> Result<(Message, RobustState)> {
    let e = graph.edge(edge)?;
    let f = graph.factor(e.factor)?;
    let state = robust_state(graph, f.id)?;
    let linear = &f.linearization().factor;
    let dims = f.block_dims();

    let mut conditioned = match state {
        RobustState::Gaussian => linear.clone(),
        RobustState::Scaled(k) => linear.scaled(k),
    };

    let message = if dims.len() == 1 {
        conditioned
    } else {
        let offsets = block_offsets(&dims);
        let (mut eta, mut lambda) = conditioned.into_parts();
        for (slot, other) in f.edges.iter().enumerate() {
            if slot == e.slot {
                continue;
            }
            let incoming = &graph.edge(*other)?.var_to_factor.committed().payload;
            let (o, d) = (offsets[slot], dims[slot]);
            let mut eta_block = eta.rows_mut(o, d);
            eta_block += incoming.eta();
            let mut lambda_block = lambda.view_mut((o, o), (d, d));
            lambda_block += incoming.lambda();
        }
        conditioned = GaussianInfo::new(eta, lambda)?;

        let mut perm = Vec::with_capacity(dims.len());
        perm.push(e.slot);
        perm.extend((0..dims.len()).filter(|s| *s != e.slot));
        let reordered = conditioned.reorder(&dims, &perm)?;
        let keep: Vec<usize> = (0..dims[e.slot]).collect();
        reordered.marginalize(&keep)?
    };

    let payload = if damping.beta() > 0.0 {
        message.blend(&e.factor_to_var.committed().payload, damping.beta())
    } else {
        message
    };
    Ok((
        Message {
            payload,
            iteration_stamp: graph.iteration(),
        },
        state,
    ))
}

/// Relinearizes a factor at the current incoming-message means. Linear
/// factors keep their cached linearization untouched.
pub fn relinearize(graph: &mut FactorGraph, factor: FactorId) -> Result<()> {
    let f = graph.factor(factor)?;
    if f.model.is_linear() {
        return Ok(());
    }
    let (x0, _) = graph.factor_state_estimate(factor)?;
    let f = graph.factor(factor)?;
    let lin = linearize_scaled(f.model.as_ref(), f.precision(), &x0);
    graph.factor_mut(factor)?.set_linearization(lin);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Direction;
    use crate::models::{RelativePose2dModel, UnaryAnchorModel};
    use crate::robust::RobustKernel;
    use nalgebra::{dmatrix, dvector, Vector2};

    /// Scalar `h(x) = x²`, the simplest non-linear model.
    #[derive(Debug)]
    struct Square {
        z: DVector<f64>,
        precision: DMatrix<f64>,
    }

    impl MeasurementModel for Square {
        fn kind(&self) -> &'static str {
            "square"
        }
        fn block_dims(&self) -> Vec<usize> {
            vec![1]
        }
        fn measurement(&self) -> &DVector<f64> {
            &self.z
        }
        fn precision(&self) -> &DMatrix<f64> {
            &self.precision
        }
        fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
            dvector![x[0] * x[0]]
        }
        fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            dmatrix![2.0 * x[0]]
        }
        fn is_linear(&self) -> bool {
            false
        }
    }

    fn write(
        g: &mut FactorGraph,
        edge: EdgeId,
        dir: Direction,
        eta: DVector<f64>,
        lam: DMatrix<f64>,
    ) {
        g.edge_mut(edge)
            .unwrap()
            .mailbox_mut(dir)
            .write_through(Message {
                payload: GaussianInfo::new(eta, lam).unwrap(),
                iteration_stamp: 0,
            });
    }

    #[test]
    fn linearize_linear_model_ignores_x0() {
        let model = RelativePose2dModel::new(Vector2::new(1.0, 2.0), 1.0).unwrap();
        let at_zero = linearize(&model, &DVector::zeros(4));
        let elsewhere = linearize(&model, &dvector![3.0, -1.0, 0.5, 7.0]);
        assert!((at_zero.eta() - elsewhere.eta()).amax() < 1e-12);
        assert_eq!(at_zero.eta(), &dvector![-1.0, -2.0, 1.0, 2.0]);
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.0, -1.0, 0.0,
            0.0, 1.0, 0.0, -1.0,
            -1.0, 0.0, 1.0, 0.0,
            0.0, -1.0, 0.0, 1.0,
        ]);
        assert_eq!(at_zero.lambda(), &expected);

        let anchor = UnaryAnchorModel::new(dvector![1.0, 2.0], 1.0).unwrap();
        let lin = linearize(&anchor, &DVector::zeros(2));
        assert_eq!(lin.eta(), &dvector![1.0, 2.0]);
        assert_eq!(lin.lambda(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn linearize_nonlinear_scalar_by_hand() {
        let model = Square {
            z: dvector![1.0],
            precision: dmatrix![1.0],
        };
        let lin = linearize(&model, &dvector![1.0]);
        assert_eq!(lin.lambda()[(0, 0)], 4.0);
        assert_eq!(lin.eta()[0], 4.0);
    }

    #[test]
    fn quadratic_surrogate_gradient_matches_finite_differences() {
        let model = Square {
            z: dvector![2.0],
            precision: dmatrix![3.0],
        };
        for &x0 in &[-1.3, 0.4, 0.9, 2.2] {
            let lin = linearize(&model, &dvector![x0]);
            // Surrogate energy xᵀΛ'x − 2ηᵀx (+const) has gradient 2(Λ'x0 − η).
            let surrogate_grad = 2.0 * (lin.lambda()[(0, 0)] * x0 - lin.eta()[0]);
            let energy = |x: f64| {
                let r = 2.0 - x * x;
                3.0 * r * r
            };
            let h = 1e-6;
            let fd = (energy(x0 + h) - energy(x0 - h)) / (2.0 * h);
            assert!(
                (surrogate_grad - fd).abs() < 1e-5,
                "x0={x0}: {surrogate_grad} vs {fd}"
            );
        }
    }

    #[test]
    fn relinearize_linear_is_bitwise_noop_and_nonlinear_updates() {
        let mut g = FactorGraph::new();
        let v = g.add_variable(2, "pose").unwrap();
        let w = g.add_variable(1, "x").unwrap();
        let fa = g
            .add_factor(
                UnaryAnchorModel::new(dvector![1.0, 2.0], 0.5).unwrap(),
                &[v],
            )
            .unwrap();
        let before = g.factor(fa).unwrap().linearization().clone();
        relinearize(&mut g, fa).unwrap();
        assert_eq!(g.factor(fa).unwrap().linearization(), &before);

        let fs = g
            .add_factor(
                Square {
                    z: dvector![1.0],
                    precision: dmatrix![1.0],
                },
                &[w],
            )
            .unwrap();
        let e = g.edge_between(w, fs).unwrap();
        write(
            &mut g,
            e,
            Direction::VariableToFactor,
            dvector![1.0],
            dmatrix![1.0],
        );
        relinearize(&mut g, fs).unwrap();
        let lin = g.factor(fs).unwrap().linearization();
        assert_eq!(lin.x0, dvector![1.0]);
        assert_eq!(lin.factor.lambda()[(0, 0)], 4.0);
        assert_eq!(lin.factor.eta()[0], 4.0);
    }

    #[test]
    fn variable_messages() {
        let mut g = FactorGraph::new();
        let v = g.add_variable(1, "x").unwrap();
        let target = g
            .add_factor(UnaryAnchorModel::new(dvector![0.0], 1.0).unwrap(), &[v])
            .unwrap();
        let leaf = variable_to_factor_message(&g, v, target).unwrap();
        assert!(!leaf.payload.is_informative());

        let f1 = g
            .add_factor(UnaryAnchorModel::new(dvector![0.0], 1.0).unwrap(), &[v])
            .unwrap();
        let f2 = g
            .add_factor(UnaryAnchorModel::new(dvector![0.0], 1.0).unwrap(), &[v])
            .unwrap();
        for (f, eta, lam) in [(f1, 1.0, 2.0), (f2, 3.0, 4.0), (target, 10.0, 10.0)] {
            let e = g.edge_between(v, f).unwrap();
            write(
                &mut g,
                e,
                Direction::FactorToVariable,
                dvector![eta],
                dmatrix![lam],
            );
        }
        let out = variable_to_factor_message(&g, v, target).unwrap();
        assert_eq!(out.payload.eta()[0], 4.0);
        assert_eq!(out.payload.lambda()[(0, 0)], 6.0);

        // Belief minus the target's own contribution.
        let belief = g.belief(v).unwrap();
        assert!((belief.eta()[0] - 10.0 - out.payload.eta()[0]).abs() < 1e-12);

        let other = g.add_variable(1, "y").unwrap();
        assert!(matches!(
            variable_to_factor_message(&g, other, target),
            Err(GbpError::UnknownEdge { .. })
        ));
    }

    #[test]
    fn unary_factor_message_is_the_linearized_factor() {
        let mut g = FactorGraph::new();
        let v = g.add_variable(2, "pose").unwrap();
        let f = g
            .add_factor(
                UnaryAnchorModel::new(dvector![1.0, 2.0], 0.5).unwrap(),
                &[v],
            )
            .unwrap();
        let msg = factor_to_variable_message(&g, f, v, DampingConfig::none()).unwrap();
        assert_eq!(msg.payload, g.factor(f).unwrap().linearization().factor);
    }

    #[test]
    fn binary_factor_message_matches_dense_joint_oracle() {
        let mut g = FactorGraph::new();
        let a = g.add_variable(2, "pose").unwrap();
        let b = g.add_variable(2, "pose").unwrap();
        let f = g
            .add_factor(
                RelativePose2dModel::new(Vector2::new(1.5, -0.5), 0.3).unwrap(),
                &[a, b],
            )
            .unwrap();
        let ea = g.edge_between(a, f).unwrap();
        let incoming_eta = dvector![0.7, -1.1];
        let incoming_lam = dmatrix![2.0, 0.3; 0.3, 1.5];
        write(
            &mut g,
            ea,
            Direction::VariableToFactor,
            incoming_eta.clone(),
            incoming_lam.clone(),
        );

        let msg = factor_to_variable_message(&g, f, b, DampingConfig::none()).unwrap();

        // Dense oracle: joint over (a, b), add incoming on a, invert, read b.
        let lin = linearize(g.factor(f).unwrap().model.as_ref(), &DVector::zeros(4));
        let mut lam = lin.lambda().clone();
        let mut eta = lin.eta().clone();
        lam.view_mut((0, 0), (2, 2)).add_assign(&incoming_lam);
        eta.rows_mut(0, 2).add_assign(&incoming_eta);
        let sigma = lam.try_inverse().unwrap();
        let mu = &sigma * eta;
        let sigma_b = sigma.view((2, 2), (2, 2)).into_owned();
        let lam_b = sigma_b.try_inverse().unwrap();
        let eta_b = &lam_b * mu.rows(2, 2);
        assert!((msg.payload.eta() - eta_b).amax() < 1e-10);
        assert!((msg.payload.lambda() - lam_b).amax() < 1e-10);
    }

    use std::ops::AddAssign;

    #[test]
    fn damping_blends_with_previous_message() {
        let mut g = FactorGraph::new();
        let v = g.add_variable(1, "x").unwrap();
        let f = g
            .add_factor(UnaryAnchorModel::new(dvector![2.0], 1.0).unwrap(), &[v])
            .unwrap();
        let e = g.edge_between(v, f).unwrap();
        write(
            &mut g,
            e,
            Direction::FactorToVariable,
            dvector![10.0],
            dmatrix![5.0],
        );
        let damping = DampingConfig::new(0.4).unwrap();
        let msg = factor_to_variable_message(&g, f, v, damping).unwrap();
        assert!((msg.payload.eta()[0] - (0.6 * 2.0 + 0.4 * 10.0)).abs() < 1e-12);
        assert!((msg.payload.lambda()[(0, 0)] - (0.6 * 1.0 + 0.4 * 5.0)).abs() < 1e-12);
        assert!(DampingConfig::new(1.0).is_err());
        assert!(DampingConfig::new(-0.1).is_err());
    }

    #[test]
    fn robust_scaling_applies_to_messages() {
        let mut g = FactorGraph::new();
        let v = g.add_variable(1, "x").unwrap();
        let f = g
            .add_factor(UnaryAnchorModel::new(dvector![0.0], 1.0).unwrap(), &[v])
            .unwrap();
        g.set_robust_kernel(f, RobustKernel::huber(4.0)).unwrap();
        let e = g.edge_between(v, f).unwrap();

        // No informative input yet: no rescaling.
        let plain = factor_to_variable_message(&g, f, v, DampingConfig::none()).unwrap();
        assert_eq!(robust_state(&g, f).unwrap(), RobustState::Gaussian);

        // Inside the threshold: bit-identical to the non-robust message.
        write(
            &mut g,
            e,
            Direction::VariableToFactor,
            dvector![3.0],
            dmatrix![1.0],
        );
        let inside = factor_to_variable_message(&g, f, v, DampingConfig::none()).unwrap();
        assert_eq!(inside.payload, plain.payload);

        // Beyond it: scaled by k_R.
        write(
            &mut g,
            e,
            Direction::VariableToFactor,
            dvector![8.0],
            dmatrix![1.0],
        );
        assert_eq!(robust_state(&g, f).unwrap(), RobustState::Scaled(0.75));
        let outside = factor_to_variable_message(&g, f, v, DampingConfig::none()).unwrap();
        assert_eq!(outside.payload, plain.payload.scaled(0.75));
    }

    #[test]
    fn scaling_information_scales_energy() {
        // For a scalar factor, E(x) = λx² − 2ηx + c; scaling (η, λ) by k
        // scales the x-dependent part by exactly k.
        let lin = GaussianInfo::new(dvector![1.5], dmatrix![2.0]).unwrap();
        let k = 0.37;
        let scaled = lin.scaled(k);
        for &x in &[-2.0, 0.3, 1.7] {
            let e = |g: &GaussianInfo| g.lambda()[(0, 0)] * x * x - 2.0 * g.eta()[0] * x;
            assert!((e(&scaled) - k * e(&lin)).abs() < 1e-12);
        }
    }
}
