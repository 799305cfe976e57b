//! Control-affine dynamics `ẋ = f(x) + g(x)u` and the two concrete models
//! used by the simulator: a planar single integrator and a unicycle.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval for one control axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
}

impl Bound {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lo).min(self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DynamicsKind {
    /// `ẋ = u`, state `(x, y)`, control `(vx, vy)`.
    #[serde(rename = "integrator2d")]
    Integrator2d,
    /// State `(x, y, θ)`, control `(v, ω)`. Experimental.
    #[serde(rename = "unicycle")]
    Unicycle,
}

impl DynamicsKind {
    pub fn id(&self) -> &'static str {
        match self {
            DynamicsKind::Integrator2d => "integrator2d",
            DynamicsKind::Unicycle => "unicycle",
        }
    }
}

impl std::str::FromStr for DynamicsKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "integrator2d" => Ok(DynamicsKind::Integrator2d),
            "unicycle" => Ok(DynamicsKind::Unicycle),
            other => Err(Error::UnknownDynamics(other.to_string())),
        }
    }
}

/// A control-affine model together with its actuator limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub kind: DynamicsKind,
    pub control_bounds: Vec<Bound>,
}

/// Result of one explicit-Euler step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    /// Control actually applied, after clamping to the bounds.
    pub applied: Vec<f64>,
    pub clamped: bool,
}

impl DynamicsModel {
    pub fn integrator2d() -> Self {
        Self {
            kind: DynamicsKind::Integrator2d,
            control_bounds: vec![Bound::new(-1.0, 1.0); 2],
        }
    }

    pub fn unicycle() -> Self {
        Self {
            kind: DynamicsKind::Unicycle,
            control_bounds: vec![
                Bound::new(-1.0, 1.0),
                Bound::new(-std::f64::consts::PI, std::f64::consts::PI),
            ],
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Ok(Self::new(id.parse()?))
    }

    pub fn new(kind: DynamicsKind) -> Self {
        match kind {
            DynamicsKind::Integrator2d => Self::integrator2d(),
            DynamicsKind::Unicycle => Self::unicycle(),
        }
    }

    /// Replaces the control bounds. Fails if the axis count is wrong or any
    /// interval is inverted.
    pub fn with_bounds(mut self, bounds: Vec<Bound>) -> Result<Self> {
        if bounds.len() != self.control_dim() {
            return Err(Error::Dimension {
                expected: self.control_dim(),
                got: bounds.len(),
            });
        }
        if let Some(b) = bounds.iter().find(|b| !(b.lo <= b.hi)) {
            return Err(Error::InvalidArgument(format!(
                "control bound lo {} exceeds hi {}",
                b.lo, b.hi
            )));
        }
        self.control_bounds = bounds;
        Ok(self)
    }

    pub fn name(&self) -> &'static str {
        self.kind.id()
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            DynamicsKind::Integrator2d => 2,
            DynamicsKind::Unicycle => 3,
        }
    }

    pub fn control_dim(&self) -> usize {
        2
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension {
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_control(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.control_dim() {
            return Err(Error::Dimension {
                expected: self.control_dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// Drift term `f(x)`. Both models are driftless.
    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        Ok(vec![0.0; self.state_dim()])
    }

    /// Actuation matrix `g(x)`, `n × m`.
    pub fn actuation(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        Ok(match self.kind {
            DynamicsKind::Integrator2d => DMatrix::identity(2, 2),
            DynamicsKind::Unicycle => {
                let (s, c) = x[2].sin_cos();
                DMatrix::from_row_slice(3, 2, &[c, 0.0, s, 0.0, 0.0, 1.0])
            }
        })
    }

    /// `f(x) + g(x)u` without any clamping.
    pub fn velocity(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_control(u)?;
        let f = self.drift(x)?;
        let g = self.actuation(x)?;
        Ok((0..self.state_dim())
            .map(|i| f[i] + (0..u.len()).map(|j| g[(i, j)] * u[j]).sum::<f64>())
            .collect())
    }

    /// Clamps `u` into the control box, reporting whether anything changed.
    pub fn clamp_control(&self, u: &[f64]) -> (Vec<f64>, bool) {
        let mut clamped = false;
        let out = u
            .iter()
            .zip(&self.control_bounds)
            .map(|(&v, b)| {
                let c = b.clamp(v);
                clamped |= c != v;
                c
            })
            .collect();
        (out, clamped)
    }

    pub fn control_in_bounds(&self, u: &[f64]) -> bool {
        u.iter()
            .zip(&self.control_bounds)
            .all(|(&v, b)| b.contains(v))
    }

    /// Explicit Euler step `x + (f(x) + g(x)u)·dt`, with `u` clamped first.
    pub fn step(&self, x: &[f64], u: &[f64], dt: f64) -> Result<StepOutcome> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "time step must be positive, got {dt}"
            )));
        }
        self.check_state(x)?;
        self.check_control(u)?;
        let (applied, clamped) = self.clamp_control(u);
        let v = self.velocity(x, &applied)?;
        let state = x.iter().zip(&v).map(|(xi, vi)| xi + vi * dt).collect();
        Ok(StepOutcome {
            state,
            applied,
            clamped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn driftless_models() {
        let int = DynamicsModel::integrator2d();
        assert_eq!(int.drift(&[0.3, 0.7]).unwrap(), vec![0.0, 0.0]);
        let uni = DynamicsModel::unicycle();
        assert_eq!(uni.drift(&[0.0, 0.0, 1.3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn actuation_matrices() {
        let int = DynamicsModel::integrator2d();
        assert_eq!(int.actuation(&[4.0, -2.0]).unwrap(), DMatrix::identity(2, 2));

        let uni = DynamicsModel::unicycle();
        let g0 = uni.actuation(&[0.2, 0.1, 0.0]).unwrap();
        assert_eq!(g0, DMatrix::from_row_slice(3, 2, &[1., 0., 0., 0., 0., 1.]));
        let g1 = uni.actuation(&[0.2, 0.1, FRAC_PI_2]).unwrap();
        let want = DMatrix::from_row_slice(3, 2, &[0., 0., 1., 0., 0., 1.]);
        assert!((g1 - want).abs().max() < 1e-15);
    }

    #[test]
    fn euler_steps() {
        let int = DynamicsModel::integrator2d();
        let s = int.step(&[0.0, 0.0], &[1.0, 0.0], 0.1).unwrap();
        assert_eq!(s.state, vec![0.1, 0.0]);
        assert!(!s.clamped);
        let s = int.step(&[0.5, 0.4], &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(s.state, vec![0.5, 0.4]);

        let uni = DynamicsModel::unicycle();
        let s = uni.step(&[0.0, 0.0, 0.0], &[1.0, 0.0], 0.1).unwrap();
        assert_eq!(s.state, vec![0.1, 0.0, 0.0]);
    }

    #[test]
    fn step_clamps_and_reports() {
        let int = DynamicsModel::integrator2d();
        let s = int.step(&[0.0, 0.0], &[3.0, -0.5], 0.1).unwrap();
        assert!(s.clamped);
        assert_eq!(s.applied, vec![1.0, -0.5]);
        assert_eq!(s.state, vec![0.1, -0.05]);
    }

    #[test]
    fn errors() {
        let int = DynamicsModel::integrator2d();
        assert!(matches!(int.step(&[0.0, 0.0], &[0.0, 0.0], 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(int.drift(&[0.0; 3]), Err(Error::Dimension { expected: 2, got: 3 })));
        assert!(matches!(int.actuation(&[0.0]), Err(Error::Dimension { .. })));
        assert!(DynamicsModel::from_id("bicycle").is_err());
        assert!(int.with_bounds(vec![Bound::new(1.0, 0.0); 2]).is_err());
    }

    proptest! {
        #[test]
        fn zero_control_is_identity(x in -5.0..5.0f64, y in -5.0..5.0f64, dt in 1e-4..1.0f64) {
            let s = DynamicsModel::integrator2d().step(&[x, y], &[0.0, 0.0], dt).unwrap();
            prop_assert_eq!(s.state, vec![x, y]);
        }

        #[test]
        fn euler_matches_velocity(x in -1.0..1.0f64, y in -1.0..1.0f64, th in -4.0..4.0f64,
                                  v in -1.0..1.0f64, w in -3.0..3.0f64, dt in 1e-3..0.5f64) {
            let m = DynamicsModel::unicycle();
            let xs = [x, y, th];
            let s = m.step(&xs, &[v, w], dt).unwrap();
            let vel = m.velocity(&xs, &[v, w]).unwrap();
            for i in 0..3 {
                prop_assert_eq!(s.state[i], xs[i] + dt * vel[i]);
            }
        }

        #[test]
        fn unicycle_heading_column_unit_norm(th in -10.0..10.0f64) {
            let g = DynamicsModel::unicycle().actuation(&[0.0, 0.0, th]).unwrap();
            let n = (g[(0, 0)].powi(2) + g[(1, 0)].powi(2) + g[(2, 0)].powi(2)).sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
