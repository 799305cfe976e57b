//! Gaussian RBF expansion `h(x) = Σ θ_i φ(x, c_i) + b` used as the safety
//! value function, with its analytic gradient.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian kernel `exp(-||x - c||² / 2σ²)`.
pub fn phi(x: &[f64], c: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if x.len() != c.len() {
        return Err(Error::Dimension {
            expected: c.len(),
            got: x.len(),
        });
    }
    Ok(phi_unchecked(x, c, sigma))
}

#[inline]
pub(crate) fn phi_unchecked(x: &[f64], c: &[f64], sigma: f64) -> f64 {
    (-sq_dist(x, c) / (2.0 * sigma * sigma)).exp()
}

/// Gram matrix `K_ij = φ(c_i, c_j)`.
pub fn kernel_matrix(centers: &[Vec<f64>], sigma: f64) -> DMatrix<f64> {
    let n = centers.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = phi_unchecked(&centers[i], &centers[j], sigma);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// The learned safety value function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyModel {
    pub centers: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub bias: f64,
    pub sigma: f64,
}

impl SafetyModel {
    pub fn new(centers: Vec<Vec<f64>>, theta: Vec<f64>, bias: f64, sigma: f64) -> Result<Self> {
        let m = Self {
            centers,
            theta,
            bias,
            sigma,
        };
        m.check()?;
        Ok(m)
    }

    /// Checks the structural invariants (matching lengths, positive width,
    /// uniform dimension, finite parameters).
    pub fn check(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one center".into()));
        }
        if self.centers.len() != self.theta.len() {
            return Err(Error::Dimension {
                expected: self.centers.len(),
                got: self.theta.len(),
            });
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive and finite, got {}",
                self.sigma
            )));
        }
        let d = self.centers[0].len();
        if let Some(c) = self.centers.iter().find(|c| c.len() != d) {
            return Err(Error::Dimension {
                expected: d,
                got: c.len(),
            });
        }
        let finite = self.bias.is_finite()
            && self.theta.iter().all(|t| t.is_finite())
            && self.centers.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("model has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Feature vector `φ(x, c_i)` for every center.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(self
            .centers
            .iter()
            .map(|c| phi_unchecked(x, c, self.sigma))
            .collect())
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        self.centers
            .iter()
            .zip(&self.theta)
            .map(|(c, t)| t * phi_unchecked(x, c, self.sigma))
            .sum::<f64>()
            + self.bias
    }

    /// `∇h(x) = Σ θ_i φ(x, c_i) (c_i - x) / σ²`.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(self.value_and_gradient_unchecked(x).1)
    }

    /// `h(x)` and `∇h(x)` in one pass over the centers.
    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_point(x)?;
        Ok(self.value_and_gradient_unchecked(x))
    }

    fn value_and_gradient_unchecked(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        let mut grad = vec![0.0; x.len()];
        let mut val = self.bias;
        for (c, t) in self.centers.iter().zip(&self.theta) {
            let w = t * phi_unchecked(x, c, self.sigma);
            val += w;
            for ((g, ci), xi) in grad.iter_mut().zip(c).zip(x) {
                *g += w * (ci - xi) * inv_s2;
            }
        }
        (val, grad)
    }

    /// Upper bound on `|h(x)|` over the whole space.
    pub fn sup_bound(&self) -> f64 {
        self.theta.iter().map(|t| t.abs()).sum::<f64>() + self.bias.abs()
    }
}

/// Greedy farthest-point subsample of at most `max_centers` points, seeded
/// at the point closest to the centroid. Ties go to the lowest index.
pub fn select_centers(points: &[Vec<f64>], max_centers: usize) -> Result<Vec<Vec<f64>>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("cannot select centers from no points".into()));
    }
    if max_centers == 0 {
        return Err(Error::InvalidArgument("max_centers must be at least 1".into()));
    }
    if points.len() <= max_centers {
        return Ok(points.to_vec());
    }
    let d = points[0].len();
    let mut centroid = vec![0.0; d];
    for p in points {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= points.len() as f64);

    let argbest = |score: &dyn Fn(usize) -> f64, maximize: bool| {
        let mut best = 0;
        for i in 1..points.len() {
            let (s, b) = (score(i), score(best));
            if (maximize && s > b) || (!maximize && s < b) {
                best = i;
            }
        }
        best
    };

    let first = argbest(&|i| sq_dist(&points[i], &centroid), false);
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while chosen.len() < max_centers {
        let next = argbest(&|i| nearest[i], true);
        chosen.push(next);
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(sq_dist(p, &points[next]));
        }
    }
    Ok(chosen.into_iter().map(|i| points[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phi_values() {
        assert_eq!(phi(&[0.3, 0.2], &[0.3, 0.2], 0.1).unwrap(), 1.0);
        let s = 0.25;
        let r = s * 2f64.sqrt();
        let v = phi(&[r, 0.0], &[0.0, 0.0], s).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        let mut prev = 1.0;
        for k in 1..50 {
            let v = phi(&[k as f64 * 0.1], &[0.0], 0.3).unwrap();
            assert!(v < prev && v >= 0.0);
            prev = v;
        }
        assert!(phi(&[0.0], &[0.0], 0.0).is_err());
        assert!(phi(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let m = SafetyModel::new(vec![vec![0.0, 0.0]], vec![1.0], 0.0, 0.1).unwrap();
        assert_eq!(m.evaluate(&[0.0, 0.0]).unwrap(), 1.0);
        let m = SafetyModel::new(vec![vec![0.1, 0.2], vec![0.5, 0.5]], vec![0.0, 0.0], 0.7, 0.1)
            .unwrap();
        assert_eq!(m.evaluate(&[0.9, -3.0]).unwrap(), 0.7);
        let m = SafetyModel::new(vec![vec![0.2, -0.1], vec![-0.2, 0.1]], vec![1.0, -1.0], 0.0, 0.3)
            .unwrap();
        assert!(m.evaluate(&[0.0, 0.0]).unwrap().abs() < 1e-15);
        assert!(m.evaluate(&[0.0]).is_err());
    }

    #[test]
    fn gradient_examples() {
        let m = SafetyModel::new(vec![vec![0.4, 0.4]], vec![2.0], 0.1, 0.1).unwrap();
        assert_eq!(m.gradient(&[0.4, 0.4]).unwrap(), vec![0.0, 0.0]);
        let m = SafetyModel::new(vec![vec![0.4, 0.4], vec![0.0, 1.0]], vec![0.0, 0.0], 1.0, 0.1)
            .unwrap();
        assert_eq!(m.gradient(&[0.13, 0.77]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(SafetyModel::new(vec![], vec![], 0.0, 1.0).is_err());
        assert!(SafetyModel::new(vec![vec![0.0]], vec![1.0, 2.0], 0.0, 1.0).is_err());
        assert!(SafetyModel::new(vec![vec![0.0]], vec![1.0], 0.0, -1.0).is_err());
        assert!(SafetyModel::new(vec![vec![0.0], vec![0.0, 1.0]], vec![1.0, 1.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn select_centers_small_and_collinear() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 0.0]).collect();
        assert_eq!(select_centers(&pts, 10).unwrap(), pts);

        let line = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert_eq!(select_centers(&line, 2).unwrap(), vec![vec![1.0], vec![0.0]]);
        assert!(select_centers(&[], 3).is_err());
    }

    #[test]
    fn kernel_matrix_is_symmetric_unit_diagonal() {
        let c = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![0.0, 0.3]];
        let k = kernel_matrix(&c, 0.2);
        assert_eq!(k, k.transpose());
        assert!((0..3).all(|i| k[(i, i)] == 1.0));
        assert!((k[(0, 1)] - (-0.125f64).exp()).abs() < 1e-15);
    }

    fn arb_model() -> impl Strategy<Value = (SafetyModel, Vec<f64>)> {
        (1usize..8, 1usize..4).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(prop::collection::vec(-1.0..1.0f64, d), n),
                prop::collection::vec(-3.0..3.0f64, n),
                -2.0..2.0f64,
                0.05..1.0f64,
                prop::collection::vec(-1.5..1.5f64, d),
            )
                .prop_map(|(c, t, b, s, x)| (SafetyModel::new(c, t, b, s).unwrap(), x))
        })
    }

    proptest! {
        #[test]
        fn evaluate_bounded((m, x) in arb_model()) {
            prop_assert!(m.evaluate(&x).unwrap().abs() <= m.sup_bound() + 1e-12);
        }

        #[test]
        fn evaluate_linear_in_params((m, x) in arb_model(), a in -2.0..2.0f64, b in -2.0..2.0f64,
                                     seed in prop::collection::vec(-1.0..1.0f64, 8)) {
            let t2: Vec<f64> = (0..m.len()).map(|i| seed[i % seed.len()]).collect();
            let m2 = SafetyModel { theta: t2.clone(), bias: 0.3, ..m.clone() };
            let mix = SafetyModel {
                theta: m.theta.iter().zip(&t2).map(|(p, q)| a * p + b * q).collect(),
                bias: a * m.bias + b * 0.3,
                ..m.clone()
            };
            let lhs = mix.evaluate(&x).unwrap();
            let rhs = a * m.evaluate(&x).unwrap() + b * m2.evaluate(&x).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn select_centers_deterministic(pts in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 2), 1..40),
                                        k in 1usize..20) {
            let a = select_centers(&pts, k).unwrap();
            let b = select_centers(&pts, k).unwrap();
            prop_assert_eq!(a.len(), pts.len().min(k));
            prop_assert_eq!(a, b);
        }
    }
}
