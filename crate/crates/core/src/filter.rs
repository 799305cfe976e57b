//! Runtime safety filter: the smallest change to a reference control that
//! keeps `∇h·(f + gu) + α(h − τ) ≥ 0` inside the control box.

use serde::{Deserialize, Serialize};

use crate::demonstrations::DemoCorpus;
use crate::dynamics::{Bound, DynamicsKind, DynamicsModel};
use crate::error::{Error, Result};
use crate::rbf::SafetyModel;

/// Controls closer than this are reported as unchanged.
pub const INTERVENTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub alpha_gain: f64,
    /// User safety level `τ`; the filter keeps `h` above it.
    pub tolerance_tau: f64,
    /// Overrides the dynamics' own control bounds when set.
    pub control_bounds: Option<Vec<Bound>>,
    /// Weight on the squared constraint violation when no control in the
    /// box satisfies the constraint.
    pub slack_penalty_filter: f64,
    /// Extra margin required on top of the CBF condition.
    pub runtime_margin: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            alpha_gain: 1.0,
            tolerance_tau: 0.0,
            control_bounds: None,
            slack_penalty_filter: 1e4,
            runtime_margin: 0.0,
        }
    }
}

impl FilterConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.alpha_gain > 0.0) || !self.alpha_gain.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha_gain must be positive, got {}",
                self.alpha_gain
            )));
        }
        if !(self.slack_penalty_filter > 0.0) {
            return Err(Error::InvalidArgument("slack_penalty_filter must be positive".into()));
        }
        if !self.tolerance_tau.is_finite() || !self.runtime_margin.is_finite() {
            return Err(Error::InvalidArgument("tolerance_tau and runtime_margin must be finite".into()));
        }
        Ok(())
    }

    fn bounds<'a>(&'a self, dynamics: &'a DynamicsModel) -> Result<&'a [Bound]> {
        let b = self.control_bounds.as_deref().unwrap_or(&dynamics.control_bounds);
        if b.len() != dynamics.control_dim() {
            return Err(Error::Dimension {
                expected: dynamics.control_dim(),
                got: b.len(),
            });
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub u_out: Vec<f64>,
    pub intervened: bool,
    /// `∇h·(f + g u_out) + α(h − τ)`.
    pub constraint_value: f64,
    /// `||u_out − u_ref||`.
    pub deviation: f64,
    pub infeasible_softened: bool,
}

/// The CBF condition at `x` written as `a·u ≥ c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub a: Vec<f64>,
    pub c: f64,
    /// `∇h·f + α(h − τ)`, the part of the condition that does not depend on `u`.
    pub offset: f64,
}

impl Halfspace {
    pub fn value(&self, u: &[f64]) -> f64 {
        self.offset + dot(&self.a, u)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Builds the affine-in-`u` CBF condition at `x`.
pub fn halfspace(model: &SafetyModel, dynamics: &DynamicsModel, x: &[f64], cfg: &FilterConfig) -> Result<Halfspace> {
    if model.dim() != x.len() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: x.len(),
        });
    }
    let (h, grad) = model.value_and_gradient(x)?;
    let f = dynamics.drift(x)?;
    let g = dynamics.actuation(x)?;
    let a: Vec<f64> = (0..g.ncols())
        .map(|j| (0..g.nrows()).map(|i| g[(i, j)] * grad[i]).sum())
        .collect();
    let offset = dot(&grad, &f) + cfg.alpha_gain * (h - cfg.tolerance_tau);
    Ok(Halfspace {
        a,
        c: cfg.runtime_margin - offset,
        offset,
    })
}

/// `∇h(x)·(f(x) + g(x)u) + α(h(x) − τ)`.
pub fn cbf_constraint(
    model: &SafetyModel,
    dynamics: &DynamicsModel,
    x: &[f64],
    u: &[f64],
    cfg: &FilterConfig,
) -> Result<f64> {
    if u.len() != dynamics.control_dim() {
        return Err(Error::Dimension {
            expected: dynamics.control_dim(),
            got: u.len(),
        });
    }
    Ok(halfspace(model, dynamics, x, cfg)?.value(u))
}

/// Minimizer of `||u − u_ref||²` subject to `a·u ≥ c` and the box, or of the
/// softened problem when the box admits no such `u`.
pub fn filter(
    model: &SafetyModel,
    dynamics: &DynamicsModel,
    x: &[f64],
    u_ref: &[f64],
    cfg: &FilterConfig,
) -> Result<FilterDecision> {
    cfg.check()?;
    if u_ref.len() != dynamics.control_dim() {
        return Err(Error::Dimension {
            expected: dynamics.control_dim(),
            got: u_ref.len(),
        });
    }
    let bounds = cfg.bounds(dynamics)?;
    let hs = halfspace(model, dynamics, x, cfg)?;
    let (u_out, softened) = project(&hs.a, hs.c, u_ref, bounds, cfg.slack_penalty_filter);
    let deviation = dist(&u_out, u_ref);
    Ok(FilterDecision {
        intervened: u_out.iter().zip(u_ref).any(|(a, b)| (a - b).abs() > INTERVENTION_TOL),
        constraint_value: hs.value(&u_out),
        deviation,
        u_out,
        infeasible_softened: softened,
    })
}

/// Core of [`filter`] on the raw half-space; returns the control and whether
/// the constraint had to be softened.
pub fn project(a: &[f64], c: f64, u_ref: &[f64], bounds: &[Bound], rho: f64) -> (Vec<f64>, bool) {
    let clamped: Vec<f64> = u_ref.iter().zip(bounds).map(|(u, b)| b.clamp(*u)).collect();
    if dot(a, &clamped) >= c {
        return (clamped, false);
    }
    let best_in_box: f64 = a.iter().zip(bounds).map(|(ai, b)| (ai * b.lo).max(ai * b.hi)).sum();
    if best_in_box < c {
        return (soft_project(a, c, u_ref, bounds, rho), true);
    }
    let aa = dot(a, a);
    let shift = (c - dot(a, u_ref)) / aa;
    let half: Vec<f64> = u_ref.iter().zip(a).map(|(u, ai)| u + ai * shift).collect();
    if half.iter().zip(bounds).all(|(u, b)| b.contains(*u)) {
        return (half, false);
    }
    // constraint active; try every pattern of coordinates pinned to a bound
    let mut best: Option<(f64, Vec<f64>)> = None;
    for pattern in box_patterns(a.len()) {
        let mut u = u_ref.to_vec();
        let mut rest = c;
        let mut a_free = 0.0;
        for (i, p) in pattern.iter().enumerate() {
            match p {
                Pin::Lo => u[i] = bounds[i].lo,
                Pin::Hi => u[i] = bounds[i].hi,
                Pin::Free => {
                    a_free += a[i] * a[i];
                    continue;
                }
            }
            rest -= a[i] * u[i];
        }
        let free_dot: f64 = (0..a.len())
            .filter(|i| pattern[*i] == Pin::Free)
            .map(|i| a[i] * u_ref[i])
            .sum();
        if a_free > 0.0 {
            let t = (rest - free_dot) / a_free;
            for i in 0..a.len() {
                if pattern[i] == Pin::Free {
                    u[i] = u_ref[i] + a[i] * t;
                }
            }
        }
        let slack = 1e-12 * (1.0 + c.abs());
        if dot(a, &u) < c - slack || !u.iter().zip(bounds).all(|(v, b)| b.contains(*v)) {
            continue;
        }
        let d = dist(&u, u_ref);
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, u));
        }
    }
    match best {
        Some((_, u)) => (u, false),
        // unreachable unless rounding hides the feasible vertex
        None => (soft_project(a, c, u_ref, bounds, rho), true),
    }
}

/// Minimizes `||u − u_ref||² + ρ(c − a·u)²` over the box, which is the soft
/// problem with its nonnegative slack eliminated (the slack is positive at
/// every box point here).
fn soft_project(a: &[f64], c: f64, u_ref: &[f64], bounds: &[Bound], rho: f64) -> Vec<f64> {
    let objective = |u: &[f64]| {
        let v = (c - dot(a, u)).max(0.0);
        dist(u, u_ref).powi(2) + rho * v * v
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for pattern in box_patterns(a.len()) {
        let mut u = u_ref.to_vec();
        let mut rest = c;
        for (i, p) in pattern.iter().enumerate() {
            match p {
                Pin::Lo => u[i] = bounds[i].lo,
                Pin::Hi => u[i] = bounds[i].hi,
                Pin::Free => continue,
            }
            rest -= a[i] * u[i];
        }
        // (I + ρ a_G a_Gᵀ) u_G = r_G + ρ a_G rest, by Sherman–Morrison
        let free: Vec<usize> = (0..a.len()).filter(|i| pattern[*i] == Pin::Free).collect();
        let a_g: f64 = free.iter().map(|&i| a[i] * a[i]).sum();
        let r_dot: f64 = free.iter().map(|&i| a[i] * u_ref[i]).sum();
        let t = rho * (rest - r_dot) / (1.0 + rho * a_g);
        for &i in &free {
            u[i] = u_ref[i] + a[i] * t;
        }
        if !u.iter().zip(bounds).all(|(v, b)| b.contains(*v)) {
            continue;
        }
        let o = objective(&u);
        if best.as_ref().is_none_or(|(bo, _)| o < *bo) {
            best = Some((o, u));
        }
    }
    best.map(|(_, u)| u)
        .unwrap_or_else(|| u_ref.iter().zip(bounds).map(|(u, b)| b.clamp(*u)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pin {
    Free,
    Lo,
    Hi,
}

fn box_patterns(m: usize) -> Vec<Vec<Pin>> {
    let mut out = vec![Vec::new()];
    for _ in 0..m {
        out = out
            .into_iter()
            .flat_map(|p| {
                [Pin::Free, Pin::Lo, Pin::Hi].into_iter().map(move |q| {
                    let mut p = p.clone();
                    p.push(q);
                    p
                })
            })
            .collect();
    }
    out
}

/// `τ` for a set of demonstrations the user marked acceptable: the lowest
/// reward among them, so every acceptable demo lies in `{h ≥ τ}`.
pub fn tau_from_acceptable(corpus: &DemoCorpus, acceptable: &[String]) -> Result<f64> {
    let mut tau = f64::INFINITY;
    for id in acceptable {
        let demo = corpus
            .demos
            .iter()
            .find(|d| &d.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown demonstration '{id}'")))?;
        tau = tau.min(demo.reward);
    }
    if tau.is_finite() {
        Ok(tau)
    } else {
        Err(Error::InvalidArgument("no acceptable demonstrations given".into()))
    }
}

/// Closed-loop simulation with every reference control passed through the
/// filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredRollout {
    pub states: Vec<Vec<f64>>,
    pub decisions: Vec<FilterDecision>,
    /// Smallest `h` over all visited states.
    pub min_h: f64,
}

impl FilteredRollout {
    pub fn intervention_rate(&self) -> f64 {
        if self.decisions.is_empty() {
            return 0.0;
        }
        self.decisions.iter().filter(|d| d.intervened).count() as f64 / self.decisions.len() as f64
    }
}

pub fn filtered_rollout(
    model: &SafetyModel,
    dynamics: &DynamicsModel,
    cfg: &FilterConfig,
    x0: &[f64],
    dt: f64,
    steps: usize,
    mut reference: impl FnMut(&[f64]) -> Vec<f64>,
) -> Result<FilteredRollout> {
    let mut x = x0.to_vec();
    let mut min_h = model.evaluate(&x)?;
    let mut states = vec![x.clone()];
    let mut decisions = Vec::with_capacity(steps);
    for _ in 0..steps {
        let u_ref = reference(&x);
        let d = filter(model, dynamics, &x, &u_ref, cfg)?;
        x = dynamics.step(&x, &d.u_out, dt)?.state;
        min_h = min_h.min(model.evaluate(&x)?);
        states.push(x.clone());
        decisions.push(d);
    }
    Ok(FilteredRollout { states, decisions, min_h })
}

/// Saturated proportional controller driving the planar position toward
/// `goal`. Useful as an adversarial or teleop-like reference.
pub fn goal_reference(dynamics: &DynamicsModel, x: &[f64], goal: [f64; 2], gain: f64) -> Vec<f64> {
    let (dx, dy) = (goal[0] - x[0], goal[1] - x[1]);
    let raw = match dynamics.kind {
        DynamicsKind::Integrator2d => vec![gain * dx, gain * dy],
        DynamicsKind::Unicycle => {
            let err = crate::simgen::wrap_angle(dy.atan2(dx) - x[2]);
            vec![gain * dx.hypot(dy) * err.cos().max(0.0), 4.0 * err]
        }
    };
    dynamics.clamp_control(&raw).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demonstrations::{DemoSource, Demonstration};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `h(x) = θ φ(x, c) + b` with a single wide center, so `∇h` is close to
    /// constant near the origin.
    fn ramp() -> SafetyModel {
        SafetyModel::new(vec![vec![0.0, 0.0]], vec![-1.0], 1.5, 1.0).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng) -> SafetyModel {
        let n = rng.gen_range(2..6);
        let centers = (0..n).map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
        let theta = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        SafetyModel::new(centers, theta, rng.gen_range(-0.5..0.5), rng.gen_range(0.1..0.5)).unwrap()
    }

    #[test]
    fn plug_in_values() {
        // h = 0.5 + x0 near the origin
        let m = SafetyModel::new(vec![vec![0.0, 0.0]], vec![0.0], 0.5, 1.0).unwrap();
        let lin = |tau: f64| {
            let hs = Halfspace {
                a: vec![1.0, 0.0],
                c: 0.0,
                offset: 1.0 * (0.5 - tau),
            };
            hs.value(&[0.0, 0.0])
        };
        assert_eq!(lin(0.0), 0.5);
        assert_eq!(lin(0.5), 0.0);
        let d = DynamicsModel::integrator2d();
        let cfg = FilterConfig::default();
        assert!((cbf_constraint(&m, &d, &[0.3, 0.3], &[0.0, 0.0], &cfg).unwrap() - 0.5).abs() < 1e-12);
        let cfg = FilterConfig {
            tolerance_tau: 0.5,
            ..FilterConfig::default()
        };
        assert!(cbf_constraint(&m, &d, &[0.3, 0.3], &[0.0, 0.0], &cfg).unwrap().abs() < 1e-12);
    }

    #[test]
    fn unicycle_constraint_is_affine_in_control() {
        let m = SafetyModel::new(vec![vec![0.2, 0.1, 0.3]], vec![1.0], 0.0, 0.5).unwrap();
        let d = DynamicsModel::unicycle();
        let cfg = FilterConfig::default();
        let x = [0.0, 0.0, 0.0];
        let g = m.gradient(&x).unwrap();
        let base = cbf_constraint(&m, &d, &x, &[0.0, 0.0], &cfg).unwrap();
        let dv = cbf_constraint(&m, &d, &x, &[1.0, 0.0], &cfg).unwrap() - base;
        let dw = cbf_constraint(&m, &d, &x, &[0.0, 1.0], &cfg).unwrap() - base;
        assert!((dv - g[0]).abs() < 1e-12);
        assert!((dw - g[2]).abs() < 1e-12);
        let both = cbf_constraint(&m, &d, &x, &[0.3, -0.7], &cfg).unwrap();
        assert!((both - (base + 0.3 * dv - 0.7 * dw)).abs() < 1e-12);
    }

    #[test]
    fn safe_reference_passes_through() {
        let m = ramp();
        let d = DynamicsModel::integrator2d();
        let out = filter(&m, &d, &[0.1, 0.0], &[0.2, -0.3], &FilterConfig::default()).unwrap();
        assert_eq!(out.u_out, vec![0.2, -0.3]);
        assert!(!out.intervened && !out.infeasible_softened);
        assert_eq!(out.deviation, 0.0);
    }

    #[test]
    fn one_dimensional_projection() {
        // u + 1 ≥ 0 with u_ref = -2, no box
        let b = [Bound::new(-10.0, 10.0)];
        let (u, soft) = project(&[1.0], -1.0, &[-2.0], &b, 1e4);
        assert_eq!(u, vec![-1.0]);
        assert!(!soft);
    }

    #[test]
    fn halfspace_law_when_box_inactive() {
        let a = [0.6, -0.8];
        let c = 0.5;
        let u_ref = [0.1, 0.2];
        let b = [Bound::new(-5.0, 5.0), Bound::new(-5.0, 5.0)];
        let (u, _) = project(&a, c, &u_ref, &b, 1e4);
        let shift = (c - (a[0] * u_ref[0] + a[1] * u_ref[1])) / (a[0] * a[0] + a[1] * a[1]);
        for i in 0..2 {
            assert!((u[i] - (u_ref[i] + a[i] * shift)).abs() < 1e-15);
        }
    }

    #[test]
    fn box_clipping_slides_along_constraint() {
        // u0 + u1 ≥ 1.5 in [-1,1]², u_ref = (1, -1): the answer pins u0 = 1
        let b = [Bound::new(-1.0, 1.0), Bound::new(-1.0, 1.0)];
        let (u, soft) = project(&[1.0, 1.0], 1.5, &[1.0, -1.0], &b, 1e4);
        assert!(!soft);
        assert!((u[0] - 1.0).abs() < 1e-12 && (u[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn infeasible_box_is_softened() {
        let b = [Bound::new(-1.0, 1.0), Bound::new(-1.0, 1.0)];
        let (u, soft) = project(&[1.0, 0.0], 3.0, &[0.0, 0.5], &b, 1e4);
        assert!(soft);
        assert_eq!(u, vec![1.0, 0.5]);
    }

    #[test]
    fn matches_grid_search_over_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = DynamicsModel::integrator2d();
        let cfg = FilterConfig::default();
        let mut checked = 0;
        while checked < 50 {
            let m = random_model(&mut rng);
            let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let u_ref = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let out = filter(&m, &d, &x, &u_ref, &cfg).unwrap();
            if out.infeasible_softened {
                continue;
            }
            checked += 1;
            let hs = halfspace(&m, &d, &x, &cfg).unwrap();
            let mut best = f64::INFINITY;
            for i in 0..=400 {
                for j in 0..=400 {
                    let u = [-1.0 + 0.005 * i as f64, -1.0 + 0.005 * j as f64];
                    if hs.value(&u) >= 0.0 {
                        best = best.min(dist(&u, &u_ref));
                    }
                }
            }
            assert!(best.is_finite());
            assert!(out.deviation <= best + 1e-9);
            assert!((out.deviation - best).abs() < 1e-2, "{} vs {best}", out.deviation);
        }
    }

    #[test]
    fn tau_is_lowest_acceptable_reward() {
        let demo = |id: &str, r: f64| Demonstration {
            id: id.into(),
            reward: r,
            source: DemoSource::Recorded,
            outcome: None,
            points: vec![],
        };
        let c = DemoCorpus::new(
            DynamicsKind::Integrator2d,
            vec![demo("a", 1.5), demo("b", 0.7), demo("c", 1.1)],
        );
        assert_eq!(tau_from_acceptable(&c, &["a".into(), "c".into()]).unwrap(), 1.1);
        assert!(tau_from_acceptable(&c, &[]).is_err());
        assert!(tau_from_acceptable(&c, &["zz".into()]).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let d = DynamicsModel::integrator2d();
        assert!(filter(&ramp(), &d, &[0.0, 0.0, 0.0], &[0.0, 0.0], &FilterConfig::default()).is_err());
        assert!(filter(&ramp(), &d, &[0.0, 0.0], &[0.0], &FilterConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn output_in_box_and_minimal(
            seed in 0u64..1000,
            ux in -1.5f64..1.5, uy in -1.5f64..1.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng);
            let d = DynamicsModel::integrator2d();
            let cfg = FilterConfig::default();
            let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let u_ref = [ux, uy];
            let out = filter(&m, &d, &x, &u_ref, &cfg).unwrap();
            prop_assert!(d.control_in_bounds(&out.u_out));
            prop_assert!(out.deviation >= 0.0);
            if !out.infeasible_softened {
                prop_assert!(out.constraint_value >= -1e-9);
                let hs = halfspace(&m, &d, &x, &cfg).unwrap();
                for _ in 0..200 {
                    let u = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
                    if hs.value(&u) >= 0.0 {
                        prop_assert!(out.deviation <= dist(&u, &u_ref) + 1e-6);
                    }
                }
            }
        }

        #[test]
        fn idempotent_on_safe_reference(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng);
            let d = DynamicsModel::integrator2d();
            let cfg = FilterConfig::default();
            let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let u_ref = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if cbf_constraint(&m, &d, &x, &u_ref, &cfg).unwrap() >= 0.0 {
                let out = filter(&m, &d, &x, &u_ref, &cfg).unwrap();
                prop_assert_eq!(out.u_out, u_ref.to_vec());
                prop_assert!(!out.intervened);
            }
        }
    }
}
