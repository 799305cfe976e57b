//! Demonstrations, their scalar safety rewards, and the safe / semisafe /
//! unsafe partition consumed by the learner.

use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsKind, DynamicsModel};
use crate::error::{Error, Result};

/// ℓ∞ radius used to decide that two demonstrated states are "the same".
pub const SAME_STATE_DELTA: f64 = 0.02;

/// Default cap on points per demonstration before QP assembly.
pub const DEFAULT_MAX_POINTS_PER_DEMO: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoPoint {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSource {
    Synthetic,
    Recorded,
}

/// Whether the demonstrator completed the task. When absent on a demo it is
/// inferred from the sign of the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub reward: f64,
    pub source: DemoSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    pub points: Vec<DemoPoint>,
}

impl Demonstration {
    pub fn outcome(&self) -> Outcome {
        self.outcome.unwrap_or(if self.reward < 0.0 {
            Outcome::Failure
        } else {
            Outcome::Success
        })
    }

    pub fn is_failure(&self) -> bool {
        self.outcome() == Outcome::Failure
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardThresholds {
    /// Optional upper bound on failure rewards; must itself be negative.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_max: Option<f64>,
    /// Successful demos with reward at or above this are "safe", below it
    /// "semisafe". Defaults to the median successful reward.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semisafe_split: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoCorpus {
    pub dynamics: DynamicsKind,
    pub thresholds: RewardThresholds,
    pub demos: Vec<Demonstration>,
}

/// One demonstrated `(x, u)` pair tagged with its demo's reward.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub reward: f64,
    pub demo_id: String,
    /// Index of the point within its demonstration.
    pub index: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartitionedPoints {
    pub safe: Vec<LabeledPoint>,
    pub semisafe: Vec<LabeledPoint>,
    pub unsafe_points: Vec<LabeledPoint>,
    /// Split actually used between safe and semisafe.
    pub semisafe_split: f64,
}

impl PartitionedPoints {
    pub fn len(&self) -> usize {
        self.safe.len() + self.semisafe.len() + self.unsafe_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of unsafe points lying within `delta` (ℓ∞) of some safe or
    /// semisafe point. Diagnostic only.
    pub fn overlap_count(&self, delta: f64) -> usize {
        self.unsafe_points
            .iter()
            .filter(|p| {
                self.safe
                    .iter()
                    .chain(&self.semisafe)
                    .any(|q| linf(&p.x, &q.x) <= delta)
            })
            .count()
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Uniformly spaced indices into `0..n`, at most `max` of them, always
/// keeping the first and last point.
pub fn subsample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max || max == 0 {
        return (0..n).collect();
    }
    if max == 1 {
        return vec![n - 1];
    }
    (0..max)
        .map(|k| ((k as f64) * (n - 1) as f64 / (max - 1) as f64).round() as usize)
        .collect()
}

impl DemoCorpus {
    pub fn new(dynamics: DynamicsKind, demos: Vec<Demonstration>) -> Self {
        Self {
            dynamics,
            thresholds: RewardThresholds::default(),
            demos,
        }
    }

    pub fn total_points(&self) -> usize {
        self.demos.iter().map(|d| d.points.len()).sum()
    }

    /// Reports every reward-sign, dimension and finiteness violation. An
    /// empty list means the corpus is valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let model = DynamicsModel::new(self.dynamics);
        let (n, m) = (model.state_dim(), model.control_dim());

        if let Some(fm) = self.thresholds.failure_max {
            if !(fm < 0.0) {
                out.push(format!("failure_max threshold must be negative, got {fm}"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.demos {
            if !seen.insert(d.id.as_str()) {
                out.push(format!("demo {}: duplicate id", d.id));
            }
            if !d.reward.is_finite() {
                out.push(format!("demo {}: reward is not finite", d.id));
                continue;
            }
            match d.outcome() {
                Outcome::Failure => {
                    if d.reward >= 0.0 {
                        out.push(format!(
                            "demo {}: failure reward must be negative, got {}",
                            d.id, d.reward
                        ));
                    } else if let Some(fm) = self.thresholds.failure_max {
                        if d.reward > fm {
                            out.push(format!(
                                "demo {}: failure reward {} exceeds failure_max {fm}",
                                d.id, d.reward
                            ));
                        }
                    }
                }
                Outcome::Success => {
                    if d.reward < 0.0 {
                        out.push(format!(
                            "demo {}: successful demo reward must be nonnegative, got {}",
                            d.id, d.reward
                        ));
                    }
                }
            }
            if d.points.is_empty() {
                out.push(format!("demo {}: no points", d.id));
            }
            for (i, p) in d.points.iter().enumerate() {
                if p.x.len() != n {
                    out.push(format!(
                        "demo {} point {i}: state has dimension {}, {} expects {n}",
                        d.id,
                        p.x.len(),
                        model.name()
                    ));
                }
                if p.u.len() != m {
                    out.push(format!(
                        "demo {} point {i}: control has dimension {}, {} expects {m}",
                        d.id,
                        p.u.len(),
                        model.name()
                    ));
                }
                if p.x.iter().chain(&p.u).any(|v| !v.is_finite()) {
                    out.push(format!("demo {} point {i}: non-finite value", d.id));
                }
            }
        }
        out
    }

    /// The safe/semisafe split: explicit threshold, or the median reward of
    /// the successful demos.
    pub fn semisafe_split(&self) -> f64 {
        if let Some(s) = self.thresholds.semisafe_split {
            return s;
        }
        let mut rewards: Vec<f64> = self
            .demos
            .iter()
            .filter(|d| !d.is_failure())
            .map(|d| d.reward)
            .collect();
        median(&mut rewards).unwrap_or(0.0)
    }

    /// Splits every demonstrated point into the safe, semisafe or unsafe set
    /// according to its demonstration's outcome and reward.
    pub fn partition(&self) -> Result<PartitionedPoints> {
        if self.demos.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let violations = self.validate();
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let split = self.semisafe_split();
        let mut out = PartitionedPoints {
            semisafe_split: split,
            ..Default::default()
        };
        for d in &self.demos {
            let target = if d.is_failure() {
                &mut out.unsafe_points
            } else if d.reward >= split {
                &mut out.safe
            } else {
                &mut out.semisafe
            };
            target.extend(d.points.iter().enumerate().map(|(i, p)| LabeledPoint {
                x: p.x.clone(),
                u: p.u.clone(),
                reward: d.reward,
                demo_id: d.id.clone(),
                index: i,
            }));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo(id: &str, reward: f64, n: usize, dim: usize) -> Demonstration {
        Demonstration {
            id: id.into(),
            reward,
            source: DemoSource::Synthetic,
            outcome: None,
            points: (0..n)
                .map(|i| DemoPoint {
                    x: vec![i as f64 * 0.01; dim],
                    u: vec![0.5, 0.0],
                    t: i as u64,
                })
                .collect(),
        }
    }

    #[test]
    fn single_failed_demo_goes_to_unsafe() {
        let c = DemoCorpus::new(DynamicsKind::Integrator2d, vec![demo("f", -0.5, 10, 2)]);
        let p = c.partition().unwrap();
        assert_eq!(p.unsafe_points.len(), 10);
        assert!(p.safe.is_empty() && p.semisafe.is_empty());
        assert!(p.unsafe_points.iter().all(|q| q.reward == -0.5));
    }

    #[test]
    fn explicit_split() {
        let mut c = DemoCorpus::new(DynamicsKind::Integrator2d, vec![demo("s", 1.5, 7, 2)]);
        c.thresholds.semisafe_split = Some(1.0);
        let p = c.partition().unwrap();
        assert_eq!(p.safe.len(), 7);
        assert!(p.semisafe.is_empty());
    }

    #[test]
    fn median_split_default() {
        let c = DemoCorpus::new(
            DynamicsKind::Integrator2d,
            vec![
                demo("a", 0.6, 3, 2),
                demo("b", 1.0, 3, 2),
                demo("c", 1.5, 3, 2),
                demo("d", 2.0, 3, 2),
            ],
        );
        assert_eq!(c.semisafe_split(), 1.25);
        let p = c.partition().unwrap();
        assert_eq!(p.semisafe.len(), 6);
        assert_eq!(p.safe.len(), 6);
    }

    #[test]
    fn validate_reports_sign_and_dimension() {
        let mut bad = demo("f", 0.2, 3, 2);
        bad.outcome = Some(Outcome::Failure);
        let c = DemoCorpus::new(DynamicsKind::Integrator2d, vec![bad]);
        let v = c.validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("failure reward must be negative"));

        let c = DemoCorpus::new(DynamicsKind::Integrator2d, vec![demo("d3", 1.0, 1, 3)]);
        let v = c.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("dimension 3"));

        let mut s = demo("s", -1.0, 2, 2);
        s.outcome = Some(Outcome::Success);
        assert_eq!(DemoCorpus::new(DynamicsKind::Integrator2d, vec![s]).validate().len(), 1);
    }

    #[test]
    fn partition_errors() {
        let c = DemoCorpus::new(DynamicsKind::Integrator2d, vec![]);
        assert!(matches!(c.partition(), Err(Error::EmptyCorpus)));
        let c = DemoCorpus::new(DynamicsKind::Integrator2d, vec![demo("x", f64::NAN, 2, 2)]);
        assert!(matches!(c.partition(), Err(Error::Validation(_))));
    }

    #[test]
    fn subsampling_keeps_endpoints() {
        assert_eq!(subsample_indices(5, 200), vec![0, 1, 2, 3, 4]);
        let idx = subsample_indices(1000, 200);
        assert_eq!(idx.len(), 200);
        assert_eq!(idx[0], 0);
        assert_eq!(*idx.last().unwrap(), 999);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn overlap_uses_linf_ball() {
        let mut p = PartitionedPoints::default();
        let lp = |x: f64, y: f64| LabeledPoint {
            x: vec![x, y],
            u: vec![0.0, 0.0],
            reward: 0.0,
            demo_id: "d".into(),
            index: 0,
        };
        p.safe.push(lp(0.0, 0.0));
        p.unsafe_points.push(lp(0.019, 0.019));
        p.unsafe_points.push(lp(0.021, 0.0));
        assert_eq!(p.overlap_count(SAME_STATE_DELTA), 1);
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<(f64, usize)>> {
        prop::collection::vec(
            (prop_oneof![(-2.0..-0.01f64), (0.0..3.0f64)], 1usize..6),
            1..8,
        )
    }

    proptest! {
        #[test]
        fn partition_is_total_and_respects_sign(spec in arb_corpus(), rot in 0usize..8) {
            let demos: Vec<_> = spec
                .iter()
                .enumerate()
                .map(|(i, &(r, n))| demo(&format!("d{i}"), r, n, 2))
                .collect();
            let c = DemoCorpus::new(DynamicsKind::Integrator2d, demos.clone());
            let p = c.partition().unwrap();
            prop_assert_eq!(p.len(), c.total_points());
            prop_assert!(p.unsafe_points.iter().all(|q| q.reward < 0.0));
            prop_assert!(p.safe.iter().chain(&p.semisafe).all(|q| q.reward >= 0.0));

            let mut rotated = demos;
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let p2 = DemoCorpus::new(DynamicsKind::Integrator2d, rotated).partition().unwrap();
            let key = |v: &[LabeledPoint]| {
                let mut k: Vec<_> = v.iter().map(|q| (q.demo_id.clone(), q.index)).collect();
                k.sort();
                k
            };
            prop_assert_eq!(key(&p.safe), key(&p2.safe));
            prop_assert_eq!(key(&p.semisafe), key(&p2.semisafe));
            prop_assert_eq!(key(&p.unsafe_points), key(&p2.unsafe_points));
        }
    }
}
