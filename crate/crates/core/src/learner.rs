//! Slack-relaxed convex program over `(θ, b, ξ)` that fits the safety value
//! function to demonstrations, and the credit assignment read off its
//! solution.
//!
//! Decision vector layout: `z = [θ_0 .. θ_{N-1}, b, ξ_0 .. ξ_{U-1}]` where `N`
//! is the number of RBF centers and `U` the number of unsafe points.
//!
//! Constraint rows, all written as `aᵀz ≤ rhs`:
//!
//! | tag          | meaning                                  |
//! |--------------|------------------------------------------|
//! | `safe_lb`    | `h(x_i) ≥ r_i` for safe points           |
//! | `unsafe_ub`  | `h(x_j) - ξ_j ≤ r_j` for unsafe points   |
//! | `slack_lb`   | `ξ_j ≥ ε`                                |
//! | `semisafe_lb`| `h(x_k) ≥ r_k` for semisafe points       |
//! | `dyn_lb`     | `∇h(x_k)·(f + g u_k) + α h(x_k) ≥ γ_dyn` |

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::demonstrations::{subsample_indices, DemoCorpus, LabeledPoint, PartitionedPoints};
use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::qp::{InteriorPoint, QpSolution, QpSolver, QuadraticProgram, SolverSettings, SolverStatus, SparseRow};
use crate::rbf::{kernel_matrix, phi_unchecked, select_centers, SafetyModel};

/// Diagonal jitter added to the Gram matrix before the PSD check.
pub const GRAM_JITTER: f64 = 1e-8;

/// How the function norm enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `||h|| + C Σξ`, solved as a short sequence of QPs.
    Norm,
    /// `½||h||² + C Σξ`, a single QP.
    SquaredNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// `½ θᵀKθ`, the squared RKHS norm of the expansion.
    Rkhs,
    /// `½ ||θ||²`.
    L2Theta,
}

/// Lower bounds used for safe and semisafe rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BoundMode {
    /// Each point is bounded below by its own demonstration's reward.
    PerPoint,
    /// Fixed `r_s` for every safe point and `r_b` for every semisafe point.
    Constant { safe: f64, semisafe: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    /// Penalty on the total slack.
    #[serde(rename = "C")]
    pub slack_penalty: f64,
    pub gamma_dyn: f64,
    /// Slope of the linear class-K term `α(h) = alpha_gain · h`.
    pub alpha_gain: f64,
    pub sigma: f64,
    pub max_centers: usize,
    pub norm: NormKind,
    pub objective: Objective,
    pub epsilon_slack: f64,
    pub apply_dyn_to_safe: bool,
    pub bound_mode: BoundMode,
    pub credit_threshold: f64,
    pub max_points_per_demo: usize,
    pub solver: SolverSettings,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            slack_penalty: 1.0,
            gamma_dyn: 0.1,
            alpha_gain: 1.0,
            sigma: 0.1,
            max_centers: 150,
            norm: NormKind::Rkhs,
            objective: Objective::Norm,
            epsilon_slack: 0.0,
            apply_dyn_to_safe: false,
            bound_mode: BoundMode::PerPoint,
            credit_threshold: 0.0,
            max_points_per_demo: crate::demonstrations::DEFAULT_MAX_POINTS_PER_DEMO,
            solver: SolverSettings::default(),
        }
    }
}

impl LearnConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.slack_penalty > 0.0) || !self.slack_penalty.is_finite() {
            return bad(format!("C must be positive, got {}", self.slack_penalty));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.epsilon_slack >= 0.0) {
            return bad(format!("epsilon_slack must be nonnegative, got {}", self.epsilon_slack));
        }
        if self.max_centers == 0 {
            return bad("max_centers must be at least 1".into());
        }
        if !self.gamma_dyn.is_finite() || !self.alpha_gain.is_finite() || !self.credit_threshold.is_finite() {
            return bad("gamma_dyn, alpha_gain and credit_threshold must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    SafeLb,
    UnsafeUb,
    SlackLb,
    SemisafeLb,
    DynLb,
}

/// Which point a constraint row came from: `point` indexes the matching set
/// of [`LearnProblem::points`] (safe for `SafeLb`, unsafe for `UnsafeUb` and
/// `SlackLb`, semisafe for the rest, or safe for `DynLb` rows added by
/// `apply_dyn_to_safe`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowTag {
    pub kind: RowKind,
    pub point: usize,
    #[serde(default)]
    pub on_safe: bool,
}

#[derive(Debug, Clone)]
pub struct LearnProblem {
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
    pub dynamics: DynamicsModel,
    /// The (subsampled) points the rows were built from.
    pub points: PartitionedPoints,
    pub qp: QuadraticProgram,
    pub tags: Vec<RowTag>,
    /// Column of `ξ_j` for unsafe point `j`.
    pub slack_index: Vec<usize>,
    pub epsilon_slack: f64,
    pub slack_penalty: f64,
    pub objective: Objective,
}

impl LearnProblem {
    pub fn n_centers(&self) -> usize {
        self.centers.len()
    }

    pub fn bias_index(&self) -> usize {
        self.centers.len()
    }

    pub fn n_vars(&self) -> usize {
        self.qp.n_vars()
    }

    pub fn n_rows(&self) -> usize {
        self.qp.n_constraints()
    }

    pub fn count(&self, kind: RowKind) -> usize {
        self.tags.iter().filter(|t| t.kind == kind).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Credit {
    CausedFailure,
    Absolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditLabel {
    pub demo_id: String,
    pub index: usize,
    pub x: Vec<f64>,
    pub h: f64,
    pub slack: f64,
    pub label: Credit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnResult {
    pub model: SafetyModel,
    /// `ξ_j` for every unsafe point, in problem order.
    pub slacks: Vec<f64>,
    pub objective_value: f64,
    /// `||h||` at the solution (`√θᵀKθ` or `||θ||`).
    pub norm: f64,
    /// Slack penalty of the last QP solved; equals `C` for the squared
    /// objective and `C·||h||` at the fixed point for the plain norm.
    pub effective_penalty: f64,
    pub solver_status: SolverStatus,
    /// Interior-point iterations summed over all QP solves.
    pub iterations: usize,
    pub qp_solves: usize,
    /// Largest constraint violation at the returned point.
    pub residuals: f64,
    pub credit: Vec<CreditLabel>,
}

impl LearnResult {
    pub fn total_slack(&self) -> f64 {
        self.slacks.iter().sum()
    }

    pub fn is_optimal(&self) -> bool {
        self.solver_status == SolverStatus::Optimal
    }
}

/// Slack totals over the unsafe points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackSummary {
    pub count: usize,
    pub total: f64,
    pub max: f64,
    /// Points whose slack exceeds the slack floor by more than `1e-6`.
    pub active: usize,
}

/// What a learn run reports besides the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    pub solver_status: SolverStatus,
    pub objective_value: f64,
    pub norm: f64,
    pub effective_penalty: f64,
    pub iterations: usize,
    pub qp_solves: usize,
    pub residuals: f64,
    pub slack: SlackSummary,
    pub credit: Vec<CreditLabel>,
}

impl LearnResult {
    pub fn report(&self, epsilon_slack: f64) -> LearnReport {
        LearnReport {
            solver_status: self.solver_status,
            objective_value: self.objective_value,
            norm: self.norm,
            effective_penalty: self.effective_penalty,
            iterations: self.iterations,
            qp_solves: self.qp_solves,
            residuals: self.residuals,
            slack: SlackSummary {
                count: self.slacks.len(),
                total: self.total_slack(),
                max: self.slacks.iter().copied().fold(0.0, f64::max),
                active: self.slacks.iter().filter(|s| **s > epsilon_slack + 1e-6).count(),
            },
            credit: self.credit.clone(),
        }
    }
}

fn subsample(points: Vec<LabeledPoint>, max_per_demo: usize) -> Vec<LabeledPoint> {
    // points of one demo are contiguous and in order
    let mut out = Vec::with_capacity(points.len());
    let mut start = 0;
    while start < points.len() {
        let id = &points[start].demo_id;
        let end = start + points[start..].iter().take_while(|p| &p.demo_id == id).count();
        for k in subsample_indices(end - start, max_per_demo) {
            out.push(points[start + k].clone());
        }
        start = end;
    }
    out
}

fn features(centers: &[Vec<f64>], sigma: f64, x: &[f64]) -> Vec<f64> {
    centers.iter().map(|c| phi_unchecked(x, c, sigma)).collect()
}

/// `∇_x φ(x, c_i) · vel` for each center, given the precomputed `φ` values.
fn directional(centers: &[Vec<f64>], sigma: f64, x: &[f64], vel: &[f64], phis: &[f64]) -> Vec<f64> {
    let inv_s2 = 1.0 / (sigma * sigma);
    centers
        .iter()
        .zip(phis)
        .map(|(c, p)| p * inv_s2 * c.iter().zip(x).zip(vel).map(|((ci, xi), vi)| (ci - xi) * vi).sum::<f64>())
        .collect()
}

/// Builds the QP from a corpus.
pub fn assemble(corpus: &DemoCorpus, cfg: &LearnConfig) -> Result<LearnProblem> {
    cfg.check()?;
    let part = corpus.partition()?;
    let points = PartitionedPoints {
        safe: subsample(part.safe, cfg.max_points_per_demo),
        semisafe: subsample(part.semisafe, cfg.max_points_per_demo),
        unsafe_points: subsample(part.unsafe_points, cfg.max_points_per_demo),
        semisafe_split: part.semisafe_split,
    };
    let all: Vec<Vec<f64>> = points
        .safe
        .iter()
        .chain(&points.semisafe)
        .chain(&points.unsafe_points)
        .map(|p| p.x.clone())
        .collect();
    if points.unsafe_points.is_empty() && points.safe.is_empty() && points.semisafe.is_empty() {
        return Err(Error::NothingToLearn);
    }
    let centers = select_centers(&all, cfg.max_centers)?;
    assemble_with_centers(points, centers, DynamicsModel::new(corpus.dynamics), cfg)
}

/// Builds the QP for already partitioned points and a fixed center set.
pub fn assemble_with_centers(
    points: PartitionedPoints,
    centers: Vec<Vec<f64>>,
    dynamics: DynamicsModel,
    cfg: &LearnConfig,
) -> Result<LearnProblem> {
    cfg.check()?;
    if points.unsafe_points.is_empty() && points.safe.is_empty() && points.semisafe.is_empty() {
        return Err(Error::NothingToLearn);
    }
    let sigma = cfg.sigma;
    let n_c = centers.len();
    let n_u = points.unsafe_points.len();
    let n_vars = n_c + 1 + n_u;
    let bias = n_c;

    let mut p = DMatrix::zeros(n_vars, n_vars);
    match cfg.norm {
        NormKind::Rkhs => {
            let mut k = kernel_matrix(&centers, sigma);
            for i in 0..n_c {
                k[(i, i)] += GRAM_JITTER;
            }
            if k.clone().cholesky().is_none() {
                return Err(Error::NotPsd);
            }
            p.view_mut((0, 0), (n_c, n_c)).copy_from(&k);
        }
        NormKind::L2Theta => {
            for i in 0..n_c {
                p[(i, i)] = 1.0;
            }
        }
    }
    let mut q = DVector::zeros(n_vars);
    for j in 0..n_u {
        q[n_c + 1 + j] = cfg.slack_penalty;
    }

    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut tags = Vec::new();
    let h_row = |phis: &[f64], sign: f64| -> Vec<(usize, f64)> {
        phis.iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, sign * v))
            .chain(std::iter::once((bias, sign)))
            .collect()
    };
    let lower = |reward: f64, safe: bool| match cfg.bound_mode {
        BoundMode::PerPoint => reward,
        BoundMode::Constant { safe: rs, semisafe: rb } => {
            if safe {
                rs
            } else {
                rb
            }
        }
    };
    let dyn_row = |pt: &LabeledPoint, phis: &[f64]| -> Result<Vec<(usize, f64)>> {
        let vel = dynamics.velocity(&pt.x, &pt.u)?;
        let dir = directional(&centers, sigma, &pt.x, &vel, phis);
        Ok(dir
            .iter()
            .zip(phis)
            .enumerate()
            .map(|(i, (d, f))| (i, -(d + cfg.alpha_gain * f)))
            .filter(|(_, v)| *v != 0.0)
            .chain(std::iter::once((bias, -cfg.alpha_gain)))
            .collect())
    };

    for (i, pt) in points.safe.iter().enumerate() {
        let phis = features(&centers, sigma, &pt.x);
        rows.push(SparseRow::new(h_row(&phis, -1.0)));
        rhs.push(-lower(pt.reward, true));
        tags.push(RowTag { kind: RowKind::SafeLb, point: i, on_safe: true });
        if cfg.apply_dyn_to_safe {
            rows.push(SparseRow::new(dyn_row(pt, &phis)?));
            rhs.push(-cfg.gamma_dyn);
            tags.push(RowTag { kind: RowKind::DynLb, point: i, on_safe: true });
        }
    }
    let mut slack_index = Vec::with_capacity(n_u);
    for (j, pt) in points.unsafe_points.iter().enumerate() {
        let col = n_c + 1 + j;
        slack_index.push(col);
        let phis = features(&centers, sigma, &pt.x);
        let mut r = h_row(&phis, 1.0);
        r.push((col, -1.0));
        rows.push(SparseRow::new(r));
        rhs.push(pt.reward);
        tags.push(RowTag { kind: RowKind::UnsafeUb, point: j, on_safe: false });
        rows.push(SparseRow::new(vec![(col, -1.0)]));
        rhs.push(-cfg.epsilon_slack);
        tags.push(RowTag { kind: RowKind::SlackLb, point: j, on_safe: false });
    }
    for (k, pt) in points.semisafe.iter().enumerate() {
        let phis = features(&centers, sigma, &pt.x);
        rows.push(SparseRow::new(h_row(&phis, -1.0)));
        rhs.push(-lower(pt.reward, false));
        tags.push(RowTag { kind: RowKind::SemisafeLb, point: k, on_safe: false });
        rows.push(SparseRow::new(dyn_row(pt, &phis)?));
        rhs.push(-cfg.gamma_dyn);
        tags.push(RowTag { kind: RowKind::DynLb, point: k, on_safe: false });
    }

    Ok(LearnProblem {
        centers,
        sigma,
        dynamics,
        points,
        qp: QuadraticProgram { p, q, a: rows, b: rhs },
        tags,
        slack_index,
        epsilon_slack: cfg.epsilon_slack,
        slack_penalty: cfg.slack_penalty,
        objective: cfg.objective,
    })
}

/// Relative tolerance on the penalty fixed point `C' = C·||h(C')||`.
const PENALTY_FIXED_POINT_TOL: f64 = 1e-4;
const MAX_PENALTY_SOLVES: usize = 25;
/// Width in `ln C'` below which the bracketed search stops.
const PENALTY_BRACKET_TOL: f64 = 1e-3;

impl LearnProblem {
    fn qp_with_penalty(&self, penalty: f64) -> QuadraticProgram {
        let mut qp = self.qp.clone();
        for &col in &self.slack_index {
            qp.q[col] = penalty;
        }
        qp
    }

    /// `√(θᵀPθ)` over the θ block.
    pub fn norm_of(&self, theta: &[f64]) -> f64 {
        let n = self.n_centers();
        let t = DVector::from_column_slice(theta);
        let block = self.qp.p.view((0, 0), (n, n));
        t.dot(&(block * &t)).max(0.0).sqrt()
    }
}

/// Solves an assembled problem.
///
/// For [`Objective::Norm`] the minimizer of `||h|| + CΣξ` is the minimizer
/// of `½||h||² + C'Σξ` with `C' = C·||h*||`; `C'` is found by a safeguarded
/// secant search in `ln C'`. Slacks are finally reset to their exact partial
/// minimizer `max(ε, h(x_j) - r_j)` given the returned `(θ, b)`.
pub fn solve(problem: &LearnProblem, solver: &dyn QpSolver) -> Result<LearnResult> {
    let c = problem.slack_penalty;
    let solves = std::cell::Cell::new(0usize);
    let iterations = std::cell::Cell::new(0usize);
    let run = |penalty: f64| {
        let sol = solver.solve(&problem.qp_with_penalty(penalty));
        solves.set(solves.get() + 1);
        iterations.set(iterations.get() + sol.iterations);
        sol
    };

    let (sol, penalty) = match problem.objective {
        Objective::SquaredNorm => (run(c), c),
        Objective::Norm => {
            // G(x) = ln(C·n(e^x)) - x, decreasing in x
            let mut x = c.ln();
            let mut sol = run(c);
            let mut penalty = c;
            let mut lo: Option<(f64, f64)> = None;
            let mut hi: Option<(f64, f64)> = None;
            let mut prev: Option<(f64, f64)> = None;
            // (|G|, solution, penalty) of the most consistent solve so far
            let mut best: Option<(f64, QpSolution, f64)> = None;
            loop {
                if sol.status != SolverStatus::Optimal {
                    break;
                }
                let n = problem.norm_of(&sol.z[..problem.n_centers()]);
                if n <= 1e-12 {
                    break;
                }
                let g = (c * n).ln() - x;
                log::trace!("penalty search: C' {:.6e} ||h|| {n:.6e} residual {g:.3e}", x.exp());
                if best.as_ref().is_none_or(|(bg, _, _)| g.abs() < *bg) {
                    best = Some((g.abs(), sol.clone(), penalty));
                }
                if g.abs() <= PENALTY_FIXED_POINT_TOL || solves.get() >= MAX_PENALTY_SOLVES {
                    break;
                }
                if g > 0.0 {
                    lo = Some((x, g));
                } else {
                    hi = Some((x, g));
                }
                let mut next = match prev {
                    Some((xp, gp)) if gp != g => x - g * (x - xp) / (g - gp),
                    _ => x + g,
                };
                if let (Some((xl, _)), Some((xh, _))) = (lo, hi) {
                    // near the root ||h|| is only as accurate as the QP solve,
                    // so stop once the bracket is narrower than that noise
                    if (xl - xh).abs() <= PENALTY_BRACKET_TOL {
                        break;
                    }
                    if !(next > xl.min(xh) && next < xl.max(xh)) {
                        next = 0.5 * (xl + xh);
                    }
                }
                prev = Some((x, g));
                x = next;
                penalty = x.exp();
                sol = run(penalty);
            }
            match best {
                Some((_, b, p)) => (b, p),
                None => (sol, penalty),
            }
        }
    };

    let n_c = problem.n_centers();
    let mut z = sol.z.clone();
    let theta = z[..n_c].to_vec();
    let bias = z[n_c];
    let model = SafetyModel::new(problem.centers.clone(), theta, bias, problem.sigma)?;

    let mut slacks = Vec::with_capacity(problem.slack_index.len());
    for (pt, &col) in problem.points.unsafe_points.iter().zip(&problem.slack_index) {
        let xi = (model.eval_unchecked(&pt.x) - pt.reward).max(problem.epsilon_slack);
        z[col] = xi;
        slacks.push(xi);
    }
    let residuals = problem.qp.max_violation(&z);
    let mut status = sol.status;
    if status == SolverStatus::Optimal && residuals > 1e-6 {
        status = SolverStatus::NumericalFailure;
    }
    let norm = problem.norm_of(&z[..n_c]);
    let total_slack: f64 = slacks.iter().sum();
    let objective_value = match problem.objective {
        Objective::Norm => norm + c * total_slack,
        Objective::SquaredNorm => 0.5 * norm * norm + c * total_slack,
    };
    log::debug!(
        "learn: {} vars, {} rows, {:?} after {} QP solves ({} iterations), C' {:.4}, residual {:.2e}",
        problem.n_vars(),
        problem.n_rows(),
        status,
        solves.get(),
        iterations.get(),
        penalty,
        residuals
    );
    Ok(LearnResult {
        objective_value,
        norm,
        effective_penalty: penalty,
        model,
        slacks,
        solver_status: status,
        iterations: iterations.get(),
        qp_solves: solves.get(),
        residuals,
        credit: Vec::new(),
    })
}

/// Labels each unsafe point `caused_failure` when the learned value there is
/// at or below `threshold`, `absolved` otherwise.
pub fn assign_credit(mut result: LearnResult, unsafe_points: &[LabeledPoint], threshold: f64) -> LearnResult {
    result.credit = unsafe_points
        .iter()
        .enumerate()
        .map(|(j, pt)| {
            let h = result.model.eval_unchecked(&pt.x);
            CreditLabel {
                demo_id: pt.demo_id.clone(),
                index: pt.index,
                x: pt.x.clone(),
                h,
                slack: result.slacks.get(j).copied().unwrap_or(0.0),
                label: if h <= threshold {
                    Credit::CausedFailure
                } else {
                    Credit::Absolved
                },
            }
        })
        .collect();
    result
}

/// Partition, center selection, assembly, solve and credit assignment.
pub fn learn(corpus: &DemoCorpus, cfg: &LearnConfig) -> Result<LearnResult> {
    let problem = assemble(corpus, cfg)?;
    let solver = InteriorPoint::new(cfg.solver);
    let result = solve(&problem, &solver)?;
    Ok(assign_credit(result, &problem.points.unsafe_points, cfg.credit_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demonstrations::{DemoPoint, DemoSource, Demonstration};
    use crate::dynamics::DynamicsKind;

    fn lp(x: Vec<f64>, reward: f64, id: &str, index: usize) -> LabeledPoint {
        LabeledPoint {
            x,
            u: vec![0.5, 0.0],
            reward,
            demo_id: id.into(),
            index,
        }
    }

    fn line_demo(id: &str, reward: f64, y: f64, n: usize) -> Demonstration {
        Demonstration {
            id: id.into(),
            reward,
            source: DemoSource::Synthetic,
            outcome: None,
            points: (0..n)
                .map(|i| DemoPoint {
                    x: vec![0.1 + 0.8 * i as f64 / n as f64, y],
                    u: vec![0.5, 0.0],
                    t: i as u64,
                })
                .collect(),
        }
    }

    fn small_corpus() -> DemoCorpus {
        DemoCorpus::new(
            DynamicsKind::Integrator2d,
            vec![
                line_demo("safe", 1.5, 0.8, 8),
                line_demo("semi", 0.6, 0.6, 8),
                line_demo("fail", -0.5, 0.4, 8),
            ],
        )
    }

    fn toy(objective: Objective) -> LearnProblem {
        let points = PartitionedPoints {
            safe: vec![lp(vec![0.0], 1.0, "s", 0)],
            semisafe: vec![],
            unsafe_points: vec![lp(vec![1.0], -0.5, "f", 0)],
            semisafe_split: 1.0,
        };
        let cfg = LearnConfig {
            sigma: 0.5,
            objective,
            ..LearnConfig::default()
        };
        assemble_with_centers(points, vec![vec![0.0], vec![1.0]], DynamicsModel::integrator2d(), &cfg).unwrap()
    }

    /// Brute force over θ on a 0.005 grid; `b` is the smallest grid value
    /// meeting the safe bound since the objective never decreases in `b`.
    fn toy_oracle(objective: Objective) -> f64 {
        let k = (-2.0f64).exp();
        let grid = |lo: f64, i: i64| lo + 0.005 * i as f64;
        let mut best = f64::INFINITY;
        for i in 0..=2000 {
            let t0 = grid(-5.0, i);
            for j in 0..=2000 {
                let t1 = grid(-5.0, j);
                let b_min = 1.0 - (t0 + k * t1);
                let steps = ((b_min + 3.0) / 0.005 - 1e-9).ceil().max(0.0);
                let b = -3.0 + 0.005 * steps;
                if b > 3.0 {
                    continue;
                }
                let xi = (t0 * k + t1 + b + 0.5).max(0.0);
                let sq = t0 * t0 + 2.0 * k * t0 * t1 + t1 * t1;
                let obj = match objective {
                    Objective::Norm => sq.sqrt() + xi,
                    Objective::SquaredNorm => 0.5 * sq + xi,
                };
                best = best.min(obj);
            }
        }
        best
    }

    #[test]
    fn row_counts_without_semisafe() {
        let safe: Vec<_> = (0..10).map(|i| lp(vec![i as f64 * 0.1, 0.9], 1.0, "s", i)).collect();
        let unsafe_points: Vec<_> = (0..10).map(|i| lp(vec![i as f64 * 0.1, 0.1], -0.5, "f", i)).collect();
        let centers: Vec<_> = (0..20).map(|i| vec![i as f64 * 0.05, 0.5]).collect();
        let points = PartitionedPoints {
            safe,
            semisafe: vec![],
            unsafe_points,
            semisafe_split: 1.0,
        };
        let p = assemble_with_centers(points, centers, DynamicsModel::integrator2d(), &LearnConfig::default()).unwrap();
        assert_eq!(p.n_vars(), 31);
        assert_eq!(p.n_rows(), 30);
        assert_eq!(p.count(RowKind::SafeLb), 10);
        assert_eq!(p.count(RowKind::UnsafeUb), 10);
        assert_eq!(p.count(RowKind::SlackLb), 10);
        assert_eq!(p.slack_index, (21..31).collect::<Vec<_>>());
    }

    #[test]
    fn semisafe_points_add_two_rows_each() {
        let p = assemble(&small_corpus(), &LearnConfig::default()).unwrap();
        assert_eq!(p.count(RowKind::SemisafeLb), 8);
        assert_eq!(p.count(RowKind::DynLb), 8);
        assert_eq!(p.n_rows(), 8 + 2 * 8 + 2 * 8);
        let with_safe = assemble(
            &small_corpus(),
            &LearnConfig {
                apply_dyn_to_safe: true,
                ..LearnConfig::default()
            },
        )
        .unwrap();
        assert_eq!(with_safe.count(RowKind::DynLb), 16);
    }

    #[test]
    fn dyn_row_matches_directional_derivative() {
        let p = assemble(&small_corpus(), &LearnConfig::default()).unwrap();
        let n = p.n_centers();
        let theta: Vec<f64> = (0..n).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let bias = 0.2;
        let model = SafetyModel::new(p.centers.clone(), theta.clone(), bias, p.sigma).unwrap();
        let mut z = theta;
        z.push(bias);
        z.extend(std::iter::repeat_n(0.0, p.slack_index.len()));
        for (row, (tag, rhs)) in p.qp.a.iter().zip(p.tags.iter().zip(&p.qp.b)) {
            if tag.kind != RowKind::DynLb {
                continue;
            }
            let pt = &p.points.semisafe[tag.point];
            let (h, g) = model.value_and_gradient(&pt.x).unwrap();
            let vel = p.dynamics.velocity(&pt.x, &pt.u).unwrap();
            let q = g.iter().zip(&vel).map(|(a, b)| a * b).sum::<f64>() + h;
            assert!((-row.dot(&z) - q).abs() < 1e-12);
            assert_eq!(*rhs, -0.1);
        }
    }

    #[test]
    fn toy_squared_matches_grid_oracle() {
        let r = solve(&toy(Objective::SquaredNorm), &InteriorPoint::default()).unwrap();
        assert!(r.is_optimal());
        let oracle = toy_oracle(Objective::SquaredNorm);
        assert!((r.objective_value - oracle).abs() < 1e-2, "{} vs {oracle}", r.objective_value);
        // analytic optimum: θ = t(1, -1), ξ = 0
        assert!(r.slacks[0].abs() < 1e-6);
        assert!((r.model.theta[0] + r.model.theta[1]).abs() < 1e-4);
    }

    #[test]
    fn toy_norm_matches_grid_oracle() {
        let r = solve(&toy(Objective::Norm), &InteriorPoint::default()).unwrap();
        assert!(r.is_optimal());
        let oracle = toy_oracle(Objective::Norm);
        assert!((r.objective_value - oracle).abs() < 1e-2, "{} vs {oracle}", r.objective_value);
    }

    #[test]
    fn slack_identity_and_feasibility() {
        for objective in [Objective::Norm, Objective::SquaredNorm] {
            let cfg = LearnConfig {
                objective,
                ..LearnConfig::default()
            };
            let r = learn(&small_corpus(), &cfg).unwrap();
            assert!(r.is_optimal());
            assert!(r.residuals <= 1e-6);
            let p = assemble(&small_corpus(), &cfg).unwrap();
            for (pt, xi) in p.points.unsafe_points.iter().zip(&r.slacks) {
                let want = (r.model.evaluate(&pt.x).unwrap() - pt.reward).max(0.0);
                assert!((xi - want).abs() <= 1e-6);
            }
            for pt in p.points.safe.iter().chain(&p.points.semisafe) {
                assert!(r.model.evaluate(&pt.x).unwrap() >= pt.reward - 1e-6);
            }
        }
    }

    #[test]
    fn larger_penalty_never_adds_slack() {
        let run = |c: f64| {
            let cfg = LearnConfig {
                slack_penalty: c,
                ..LearnConfig::default()
            };
            learn(&small_corpus(), &cfg).unwrap().total_slack()
        };
        assert!(run(10.0) <= run(1.0) + 1e-6);
    }

    #[test]
    fn deterministic() {
        let a = learn(&small_corpus(), &LearnConfig::default()).unwrap();
        let b = learn(&small_corpus(), &LearnConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn only_safe_points() {
        let corpus = DemoCorpus::new(DynamicsKind::Integrator2d, vec![line_demo("safe", 1.5, 0.5, 10)]);
        let r = learn(&corpus, &LearnConfig::default()).unwrap();
        assert!(r.is_optimal());
        assert!(r.slacks.is_empty());
        for p in &corpus.demos[0].points {
            assert!(r.model.evaluate(&p.x).unwrap() >= 1.5 - 1e-6);
        }
    }

    #[test]
    fn no_successful_demos_means_every_point_caused_failure() {
        let corpus = DemoCorpus::new(
            DynamicsKind::Integrator2d,
            vec![line_demo("f0", -0.5, 0.4, 6), line_demo("f1", -0.5, 0.5, 6)],
        );
        let r = learn(&corpus, &LearnConfig::default()).unwrap();
        assert_eq!(r.credit.len(), 12);
        assert!(r.credit.iter().all(|c| c.label == Credit::CausedFailure));
    }

    #[test]
    fn zero_slack_point_caused_failure() {
        let r = learn(&small_corpus(), &LearnConfig::default()).unwrap();
        for c in &r.credit {
            if c.slack <= 1e-9 {
                assert_eq!(c.label, Credit::CausedFailure);
            }
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        let corpus = DemoCorpus::new(DynamicsKind::Integrator2d, vec![]);
        assert!(learn(&corpus, &LearnConfig::default()).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            LearnConfig {
                slack_penalty: 0.0,
                ..LearnConfig::default()
            },
            LearnConfig {
                sigma: -1.0,
                ..LearnConfig::default()
            },
            LearnConfig {
                epsilon_slack: -0.1,
                ..LearnConfig::default()
            },
        ] {
            assert!(matches!(cfg.check(), Err(Error::InvalidArgument(_))));
        }
    }
}
