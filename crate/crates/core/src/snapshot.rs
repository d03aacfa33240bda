//! JSON snapshot of a graph's beliefs, factors and run metrics.
//!
//! Numbers are written in the shortest form that parses back to the same
//! `f64`, so a snapshot round-trips exactly. Non-finite values become `null`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::batch::{compare, BatchSolution};
use crate::error::{GbpError, Result};
use crate::graph::FactorGraph;
use crate::scenarios::slam::{FactorClassification, RobustClass};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema_version: u32,
    pub iteration: u64,
    pub seed: u64,
    pub variables: Vec<VariableSnapshot>,
    pub factors: Vec<FactorSnapshot>,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<BatchBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSnapshot {
    pub id: usize,
    pub label: String,
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSnapshot {
    pub id: usize,
    pub var_ids: Vec<usize>,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robust_class: Option<RobustClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_est: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_gt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovRatioCensus {
    pub ratios: Vec<Option<f64>>,
    pub overconfident_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub messages_sent: u64,
    /// `null` until two commits exist to compare.
    pub max_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_err_vs_batch: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_ratio_census: Option<CovRatioCensus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchVariable {
    pub id: usize,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchBlock {
    pub variables: Vec<BatchVariable>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

impl BatchBlock {
    pub fn from_solution(batch: &BatchSolution) -> Self {
        Self {
            variables: batch
                .per_variable
                .iter()
                .enumerate()
                .map(|(id, m)| BatchVariable {
                    id,
                    mean: m.mu.iter().copied().collect(),
                    cov: rows(&m.sigma),
                })
                .collect(),
        }
    }
}

impl Snapshot {
    /// Beliefs and factor structure of `graph`. Variables whose belief has no
    /// covariance yet report a zero mean and omit `cov`.
    pub fn capture(graph: &FactorGraph, seed: u64, messages_sent: u64, max_residual: f64) -> Self {
        let variables = graph
            .variables()
            .iter()
            .map(|v| {
                let moments = graph.belief(v.id).and_then(|b| b.to_moments()).ok();
                VariableSnapshot {
                    id: v.id.0,
                    label: v.label.clone(),
                    mean: moments
                        .as_ref()
                        .map_or_else(|| vec![0.0; v.dim], |m| m.mu.iter().copied().collect()),
                    cov: moments.as_ref().map(|m| rows(&m.sigma)),
                    gt: None,
                }
            })
            .collect();
        let factors = graph
            .factors()
            .iter()
            .map(|f| FactorSnapshot {
                id: f.id.0,
                var_ids: f.variables.iter().map(|v| v.0).collect(),
                kind: f.model.kind().to_string(),
                robust_class: None,
                m_est: None,
                m_gt: None,
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            iteration: graph.iteration(),
            seed,
            variables,
            factors,
            metrics: Metrics {
                messages_sent,
                max_residual: finite(max_residual),
                mean_err_vs_batch: None,
                cov_ratio_census: None,
            },
            batch: None,
        }
    }

    pub fn with_ground_truth(mut self, gt: &[DVector<f64>]) -> Self {
        for (v, g) in self.variables.iter_mut().zip(gt) {
            v.gt = Some(g.iter().copied().collect());
        }
        self
    }

    pub fn with_classification(mut self, classes: &[FactorClassification]) -> Self {
        for c in classes {
            if let Some(f) = self.factors.get_mut(c.factor.0) {
                f.robust_class = Some(c.class);
                f.m_est = finite(c.m_est);
                f.m_gt = finite(c.m_gt);
            }
        }
        self
    }

    /// Fills the batch comparison metrics and, if `embed`, the per-variable
    /// batch block.
    pub fn with_batch(mut self, graph: &FactorGraph, batch: &BatchSolution, embed: bool) -> Self {
        let d = compare(graph, batch);
        self.metrics.mean_err_vs_batch = finite(d.max_mean_error);
        self.metrics.cov_ratio_census = Some(CovRatioCensus {
            ratios: d.cov_ratios.iter().copied().map(finite).collect(),
            overconfident_fraction: d.overconfident_fraction,
        });
        if embed {
            self.batch = Some(BatchBlock::from_solution(batch));
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot is always serializable")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot is always serializable")
    }

    /// Parses and validates a snapshot.
    pub fn from_json(text: &str) -> Result<Self> {
        let snap: Snapshot =
            serde_json::from_str(text).map_err(|e| GbpError::Schema(e.to_string()))?;
        snap.validate()?;
        Ok(snap)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(GbpError::Schema(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        for v in &self.variables {
            if let Some(cov) = &v.cov {
                if cov.len() != v.mean.len() || cov.iter().any(|r| r.len() != v.mean.len()) {
                    return Err(GbpError::Schema(format!(
                        "variable {} has a malformed cov",
                        v.id
                    )));
                }
            }
            if v.gt.as_ref().is_some_and(|g| g.len() != v.mean.len()) {
                return Err(GbpError::Schema(format!(
                    "variable {} has a malformed gt",
                    v.id
                )));
            }
        }
        let n = self.variables.len();
        for f in &self.factors {
            if f.var_ids.iter().any(|id| *id >= n) {
                return Err(GbpError::Schema(format!(
                    "factor {} names an unknown variable",
                    f.id
                )));
            }
        }
        if let Some(b) = &self.batch {
            if b.variables.len() != n {
                return Err(GbpError::Schema(
                    "batch block does not cover every variable".into(),
                ));
            }
        }
        Ok(())
    }

    /// Per-variable distance between snapshot means and the embedded batch
    /// means, if a batch block is present.
    pub fn mean_errors_vs_batch(&self) -> Option<Vec<f64>> {
        let b = self.batch.as_ref()?;
        Some(
            self.variables
                .iter()
                .zip(&b.variables)
                .map(|(v, bv)| {
                    v.mean
                        .iter()
                        .zip(&bv.mean)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch;
    use crate::message::DampingConfig;
    use crate::scenarios::pose_graph::gen_pose_graph;
    use crate::schedule::{run_until, ScheduleKind};

    #[test]
    fn round_trip_is_lossless() {
        let (scn, mut g) = gen_pose_graph(11).unwrap();
        let r = run_until(
            &mut g,
            ScheduleKind::Synchronous,
            50,
            0.0,
            DampingConfig::none(),
        )
        .unwrap();
        let b = batch::solve(&g).unwrap();
        let snap = Snapshot::capture(&g, 11, r.messages_sent as u64, r.max_message_residual)
            .with_ground_truth(&scn.ground_truth_vectors())
            .with_batch(&g, &b, true);
        let back = Snapshot::from_json(&snap.to_json()).unwrap();
        assert_eq!(back, snap);
        let back = Snapshot::from_json(&snap.to_json_pretty()).unwrap();
        assert_eq!(back, snap);
    }

    #[test]
    fn optional_fields_are_omitted() {
        let (_, g) = gen_pose_graph(1).unwrap();
        let snap = Snapshot::capture(&g, 1, 0, f64::INFINITY);
        let v: serde_json::Value = serde_json::from_str(&snap.to_json()).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert!(v["metrics"]["max_residual"].is_null());
        assert!(v.get("batch").is_none());
        assert!(v["variables"][0].get("cov").is_none());
        assert!(v["variables"][0].get("gt").is_none());
        assert!(v["factors"][0].get("robust_class").is_none());
        assert!(v["metrics"].get("mean_err_vs_batch").is_none());
        assert_eq!(snap.mean_errors_vs_batch(), None);
    }

    #[test]
    fn schema_violations_are_rejected() {
        assert!(matches!(
            Snapshot::from_json("{}"),
            Err(GbpError::Schema(_))
        ));
        assert!(matches!(
            Snapshot::from_json("not json"),
            Err(GbpError::Schema(_))
        ));
        let (_, g) = gen_pose_graph(1).unwrap();
        let mut snap = Snapshot::capture(&g, 1, 0, 0.0);
        snap.schema_version = 2;
        assert!(matches!(
            Snapshot::from_json(&snap.to_json()),
            Err(GbpError::Schema(_))
        ));
        let mut snap = Snapshot::capture(&g, 1, 0, 0.0);
        snap.factors[0].var_ids = vec![999];
        assert!(matches!(
            Snapshot::from_json(&snap.to_json()),
            Err(GbpError::Schema(_))
        ));
    }

    #[test]
    fn extreme_values_survive() {
        for x in [
            1e-300,
            0.1 + 0.2,
            std::f64::consts::PI,
            -123456.789e10,
            f64::MIN_POSITIVE,
        ] {
            let s = serde_json::to_string(&x).unwrap();
            assert_eq!(
                serde_json::from_str::<f64>(&s).unwrap().to_bits(),
                x.to_bits()
            );
        }
    }
}
