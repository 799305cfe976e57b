//! Convex quadratic programs `min ½zᵀPz + qᵀz  s.t.  Az ≤ b` and a dense
//! primal-dual interior-point solver (Mehrotra predictor-corrector).
//!
//! Constraint rows are stored sparsely; the Newton system
//! `P + Aᵀ diag(λ/s) A` is formed densely and factored by Cholesky, which is
//! the right trade-off for a few hundred variables and a few thousand rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A sparse constraint row `Σ a_k z_{idx_k} ≤ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub entries: Vec<(usize, f64)>,
}

impl SparseRow {
    pub fn new(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by_key(|e| e.0);
        Self { entries }
    }

    pub fn dot(&self, z: &[f64]) -> f64 {
        self.entries.iter().map(|&(j, a)| a * z[j]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: Vec<SparseRow>,
    pub b: Vec<f64>,
}

impl QuadraticProgram {
    pub fn n_vars(&self) -> usize {
        self.q.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.a.len()
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let zv = DVector::from_column_slice(z);
        0.5 * zv.dot(&(&self.p * &zv)) + self.q.dot(&zv)
    }

    /// Largest positive constraint violation `max_i (a_iᵀz - b_i)_+`.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(r, b)| (r.dot(z) - b).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Optimal,
    MaxIterations,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: Vec<f64>,
    pub duals: Option<Vec<f64>>,
    pub status: SolverStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
}

/// Anything that can solve a convex [`QuadraticProgram`]. Implementations
/// must return a point feasible to within `1e-6` when reporting
/// [`SolverStatus::Optimal`].
pub trait QpSolver {
    fn solve(&self, qp: &QuadraticProgram) -> QpSolution;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Residual and gap level at which iteration stops early.
    pub target_tol: f64,
    /// Primal/dual residual accepted for an `Optimal` status.
    pub feasibility_tol: f64,
    /// Relative duality gap accepted for an `Optimal` status.
    pub duality_tol: f64,
    pub max_iterations: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            target_tol: 1e-10,
            feasibility_tol: 1e-6,
            duality_tol: 1e-8,
            max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InteriorPoint {
    pub settings: SolverSettings,
}

impl InteriorPoint {
    pub fn new(settings: SolverSettings) -> Self {
        Self { settings }
    }
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest `α ∈ (0, 1]` keeping `v + α dv ≥ 0`.
fn step_to_boundary(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

struct Residuals {
    dual: DVector<f64>,
    primal: DVector<f64>,
    mu: f64,
}

impl InteriorPoint {
    fn a_mul(qp: &QuadraticProgram, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(qp.a.len(), qp.a.iter().map(|r| r.dot(z.as_slice())))
    }

    fn at_mul(qp: &QuadraticProgram, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(qp.n_vars());
        for (r, yi) in qp.a.iter().zip(y.iter()) {
            for &(j, a) in &r.entries {
                out[j] += a * yi;
            }
        }
        out
    }

    fn residuals(
        qp: &QuadraticProgram,
        z: &DVector<f64>,
        s: &DVector<f64>,
        lam: &DVector<f64>,
        b: &DVector<f64>,
    ) -> Residuals {
        let dual = &qp.p * z + &qp.q + Self::at_mul(qp, lam);
        let primal = Self::a_mul(qp, z) + s - b;
        let mu = if s.is_empty() {
            0.0
        } else {
            s.dot(lam) / s.len() as f64
        };
        Residuals { dual, primal, mu }
    }

    /// `P v + Aᵀ W A v` without forming the matrix.
    fn newton_apply(qp: &QuadraticProgram, w: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &qp.p * v + Self::at_mul(qp, &w.component_mul(&Self::a_mul(qp, v)))
    }
}

/// A slack-like variable: enters `P` only on the diagonal and shares at most
/// one constraint row with other variables. Such columns are eliminated from
/// the Newton system in closed form, which keeps the dense factorization
/// small and avoids the cancellation that huge barrier weights on their
/// bound rows would otherwise cause.
#[derive(Debug, Clone)]
struct Eliminated {
    var: usize,
    /// Row shared with core variables and this variable's coefficient in it.
    coupled: Option<(usize, f64)>,
    /// Every row containing the variable, with its coefficient.
    rows: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
struct Structure {
    core: Vec<usize>,
    core_pos: Vec<Option<usize>>,
    elim: Vec<Eliminated>,
    /// For each row, the eliminated variable it is coupled to.
    coupled_of_row: Vec<Option<usize>>,
}

impl Structure {
    fn analyze(qp: &QuadraticProgram) -> Self {
        let n = qp.n_vars();
        let mut rows_of: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (r, row) in qp.a.iter().enumerate() {
            for &(j, a) in &row.entries {
                if a != 0.0 {
                    rows_of[j].push((r, a));
                }
            }
        }
        let mut row_taken = vec![false; qp.a.len()];
        let mut is_elim = vec![false; n];
        let mut elim = Vec::new();
        for j in 0..n {
            let diag_only = (0..n).all(|i| i == j || (qp.p[(i, j)] == 0.0 && qp.p[(j, i)] == 0.0));
            if !diag_only || (rows_of[j].is_empty() && !(qp.p[(j, j)] > 0.0)) {
                continue;
            }
            let shared: Vec<_> = rows_of[j]
                .iter()
                .filter(|(r, _)| qp.a[*r].entries.iter().any(|&(k, a)| k != j && a != 0.0))
                .copied()
                .collect();
            if shared.len() > 1 || shared.iter().any(|(r, _)| row_taken[*r]) {
                continue;
            }
            // a shared row must not touch an already eliminated variable
            if shared
                .iter()
                .any(|(r, _)| qp.a[*r].entries.iter().any(|&(k, _)| k != j && is_elim[k]))
            {
                continue;
            }
            if let Some((r, _)) = shared.first() {
                row_taken[*r] = true;
            }
            is_elim[j] = true;
            elim.push(Eliminated {
                var: j,
                coupled: shared.first().copied(),
                rows: rows_of[j].clone(),
            });
        }
        let core: Vec<usize> = (0..n).filter(|j| !is_elim[*j]).collect();
        let mut core_pos = vec![None; n];
        for (p, &j) in core.iter().enumerate() {
            core_pos[j] = Some(p);
        }
        let mut coupled_of_row = vec![None; qp.a.len()];
        for (e, el) in elim.iter().enumerate() {
            if let Some((r, _)) = el.coupled {
                coupled_of_row[r] = Some(e);
            }
        }
        Self {
            core,
            core_pos,
            elim,
            coupled_of_row,
        }
    }
}

/// Factored Newton system for one interior-point iteration.
struct NewtonFactor<'a> {
    st: &'a Structure,
    /// `D_j = P_jj + Σ_r w_r a_rj²` for each eliminated variable.
    d: Vec<f64>,
    w: &'a DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl<'a> NewtonFactor<'a> {
    fn new(qp: &QuadraticProgram, st: &'a Structure, w: &'a DVector<f64>) -> Option<Self> {
        let nc = st.core.len();
        let d: Vec<f64> = st
            .elim
            .iter()
            .map(|e| qp.p[(e.var, e.var)] + e.rows.iter().map(|&(r, a)| w[r] * a * a).sum::<f64>())
            .collect();
        let mut m = DMatrix::zeros(nc, nc);
        for (a, &i) in st.core.iter().enumerate() {
            for (b, &j) in st.core.iter().enumerate() {
                m[(a, b)] = qp.p[(i, j)];
            }
        }
        for (r, row) in qp.a.iter().enumerate() {
            let weight = match st.coupled_of_row[r] {
                Some(e) => {
                    let el = &st.elim[e];
                    // w_r (D_j - w_r a_rj²) / D_j, with the difference summed directly
                    let rest = qp.p[(el.var, el.var)]
                        + el.rows.iter().filter(|(rr, _)| *rr != r).map(|&(rr, a)| w[rr] * a * a).sum::<f64>();
                    w[r] * rest / d[e]
                }
                None => w[r],
            };
            let core_entries: Vec<(usize, f64)> = row
                .entries
                .iter()
                .filter_map(|&(j, a)| st.core_pos[j].map(|p| (p, a)))
                .collect();
            for &(k, ak) in &core_entries {
                let f = weight * ak;
                for &(j, aj) in &core_entries {
                    m[(j, k)] += f * aj;
                }
            }
        }
        let scale = (0..nc).fold(0.0f64, |acc, i| acc.max(m[(i, i)].abs())).max(1.0);
        let mut reg = 0.0;
        loop {
            let mut mm = m.clone();
            for i in 0..nc {
                mm[(i, i)] += reg;
            }
            if let Some(chol) = mm.cholesky() {
                return Some(Self { st, d, w, chol });
            }
            reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
            if reg > 1e-4 * scale {
                return None;
            }
        }
    }

    fn solve_once(&self, qp: &QuadraticProgram, rhs: &DVector<f64>) -> DVector<f64> {
        let st = self.st;
        let mut t = DVector::from_iterator(st.core.len(), st.core.iter().map(|&j| rhs[j]));
        for (e, el) in st.elim.iter().enumerate() {
            if let Some((r, aj)) = el.coupled {
                let f = self.w[r] * aj * rhs[el.var] / self.d[e];
                for &(k, a) in &qp.a[r].entries {
                    if let Some(p) = st.core_pos[k] {
                        t[p] -= f * a;
                    }
                }
            }
        }
        let dc = self.chol.solve(&t);
        let mut out = DVector::zeros(rhs.len());
        for (p, &j) in st.core.iter().enumerate() {
            out[j] = dc[p];
        }
        for (e, el) in st.elim.iter().enumerate() {
            let mut v = rhs[el.var];
            if let Some((r, aj)) = el.coupled {
                let ac: f64 = qp.a[r]
                    .entries
                    .iter()
                    .filter_map(|&(k, a)| st.core_pos[k].map(|p| a * dc[p]))
                    .sum();
                v -= self.w[r] * aj * ac;
            }
            out[el.var] = v / self.d[e];
        }
        out
    }

    /// Solve with iterative refinement against the exact operator, stopping
    /// once the residual no longer shrinks.
    fn solve(&self, qp: &QuadraticProgram, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = self.solve_once(qp, rhs);
        let mut r = rhs - InteriorPoint::newton_apply(qp, self.w, &x);
        let mut r_norm = max_abs(&r);
        for _ in 0..MAX_REFINEMENT_STEPS {
            if r_norm <= 1e-15 * (1.0 + max_abs(rhs)) {
                break;
            }
            let x_new = &x + self.solve_once(qp, &r);
            let r_new = rhs - InteriorPoint::newton_apply(qp, self.w, &x_new);
            let n_new = max_abs(&r_new);
            if n_new >= r_norm {
                break;
            }
            (x, r, r_norm) = (x_new, r_new, n_new);
        }
        x
    }
}

const MAX_REFINEMENT_STEPS: usize = 20;

/// Merit with the `(z, s, λ)` it was measured at.
type ScoredIterate = (f64, DVector<f64>, DVector<f64>, DVector<f64>);

impl InteriorPoint {
    /// Solves the reduced Newton system for complementarity rhs `rc`.
    fn direction(
        qp: &QuadraticProgram,
        factor: &NewtonFactor,
        res: &Residuals,
        s: &DVector<f64>,
        w: &DVector<f64>,
        rc: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let s_inv_rc = rc.component_div(s);
        let rhs = -&res.dual - Self::at_mul(qp, &w.component_mul(&res.primal)) + Self::at_mul(qp, &s_inv_rc);
        let dz = factor.solve(qp, &rhs);
        let adz = Self::a_mul(qp, &dz);
        let dlam = w.component_mul(&(&adz + &res.primal)) - &s_inv_rc;
        let ds = -&res.primal - adz;
        (dz, ds, dlam)
    }
}

impl QpSolver for InteriorPoint {
    fn solve(&self, qp: &QuadraticProgram) -> QpSolution {
        let st = &self.settings;
        let n = qp.n_vars();
        let m = qp.n_constraints();
        let b = DVector::from_column_slice(&qp.b);

        let structure = Structure::analyze(qp);
        let mut z = DVector::zeros(n);
        let mut s = DVector::from_iterator(m, b.iter().map(|bi| bi.max(1.0)));
        let mut lam = DVector::from_element(m, 1.0);

        let q_scale0 = 1.0 + max_abs(&qp.q);
        let b_scale = 1.0 + max_abs(&b);
        let mut status = SolverStatus::MaxIterations;
        let mut iterations = 0;
        let mut res = Self::residuals(qp, &z, &s, &lam, &b);

        // one affine step from the trivial point, then move s and λ away
        // from zero so that both start on the scale of the solution
        if m > 0 {
            let w = DVector::from_iterator(m, lam.iter().zip(s.iter()).map(|(l, si)| l / si));
            if let Some(factor) = NewtonFactor::new(qp, &structure, &w) {
                let (dz, ds, dl) = Self::direction(qp, &factor, &res, &s, &w, &s.component_mul(&lam));
                if dz.iter().chain(ds.iter()).chain(dl.iter()).all(|v| v.is_finite()) {
                    z += dz;
                    s = (&s + ds).map(|v| v.abs().max(1.0));
                    lam = (&lam + dl).map(|v| v.abs().max(1.0));
                    res = Self::residuals(qp, &z, &s, &lam, &b);
                }
            }
        }

        let rel_gap = |qp: &QuadraticProgram, z: &DVector<f64>, mu: f64| {
            let obj = qp.objective(z.as_slice());
            mu * m as f64 / (1.0 + obj.abs())
        };

        // size of the terms that cancel in each dual residual component,
        // which bounds the rounding error of that component
        let p_abs = qp.p.abs();
        let dual_scale = |z: &DVector<f64>, lam: &DVector<f64>| {
            let mut terms = &p_abs * z.abs();
            for (r, l) in qp.a.iter().zip(lam.iter()) {
                for &(j, a) in &r.entries {
                    terms[j] += (a * l).abs();
                }
            }
            q_scale0.max(max_abs(&terms))
        };
        // best iterate so far by scaled merit, and iterations since it improved
        let mut best: Option<ScoredIterate> = None;
        let mut stalled = 0;

        for it in 0..st.max_iterations {
            iterations = it;
            let q_scale = dual_scale(&z, &lam);
            let rp = max_abs(&res.primal);
            let rd = max_abs(&res.dual);
            let gap = rel_gap(qp, &z, res.mu);
            log::trace!("ipm it {it}: rp {rp:.2e} rd {rd:.2e} mu {:.2e}", res.mu);
            if rp <= st.target_tol * b_scale && rd <= st.target_tol * q_scale && gap <= st.target_tol {
                status = SolverStatus::Optimal;
                break;
            }
            let merit = (rp / b_scale).max(rd / q_scale).max(gap);
            match &best {
                Some((m_best, ..)) if merit >= 0.5 * m_best => stalled += 1,
                _ => stalled = 0,
            }
            if best.as_ref().is_none_or(|(m_best, ..)| merit < *m_best) {
                best = Some((merit, z.clone(), s.clone(), lam.clone()));
            }
            // near the rounding floor of the normal equations the target may
            // be out of reach; stop at the first acceptable point once
            // progress slows
            let acceptable =
                rp <= st.feasibility_tol && rd <= st.feasibility_tol * q_scale && gap <= st.duality_tol;
            if acceptable && stalled >= 1 {
                status = SolverStatus::Optimal;
                break;
            }

            let w = DVector::from_iterator(m, lam.iter().zip(s.iter()).map(|(l, si)| l / si));
            // ill-conditioning near the end; judge the last iterate below
            let Some(factor) = NewtonFactor::new(qp, &structure, &w) else {
                break;
            };

            let direction = |rc: &DVector<f64>| Self::direction(qp, &factor, &res, &s, &w, rc);

            let rc_aff = s.component_mul(&lam);
            let (_, ds_a, dl_a) = direction(&rc_aff);
            let alpha_aff = step_to_boundary(&s, &ds_a).min(step_to_boundary(&lam, &dl_a)).min(1.0);
            let mu_aff = if m == 0 {
                0.0
            } else {
                (&s + alpha_aff * &ds_a).dot(&(&lam + alpha_aff * &dl_a)) / m as f64
            };
            let sigma = if res.mu > 0.0 {
                (mu_aff / res.mu).powi(3).clamp(0.0, 1.0)
            } else {
                0.0
            };

            let rc = &rc_aff + ds_a.component_mul(&dl_a) - DVector::from_element(m, sigma * res.mu);
            let (dz, ds, dl) = direction(&rc);
            let alpha = (0.99 * step_to_boundary(&s, &ds).min(step_to_boundary(&lam, &dl))).min(1.0);

            z += alpha * &dz;
            s += alpha * &ds;
            lam += alpha * &dl;
            if !z.iter().all(|v| v.is_finite()) {
                status = SolverStatus::NumericalFailure;
                break;
            }
            res = Self::residuals(qp, &z, &s, &lam, &b);
            iterations = it + 1;
        }

        if status != SolverStatus::Optimal {
            if let Some((m_best, bz, bs, bl)) = best {
                let q_scale = dual_scale(&z, &lam);
                let current = (max_abs(&res.primal) / b_scale)
                    .max(max_abs(&res.dual) / q_scale)
                    .max(rel_gap(qp, &z, res.mu));
                if m_best < current || !current.is_finite() {
                    (z, s, lam) = (bz, bs, bl);
                    res = Self::residuals(qp, &z, &s, &lam, &b);
                    if status == SolverStatus::NumericalFailure {
                        status = SolverStatus::MaxIterations;
                    }
                }
            }
        }
        let rp = max_abs(&res.primal);
        let rd = max_abs(&res.dual);
        let gap = rel_gap(qp, &z, res.mu);
        if status == SolverStatus::MaxIterations {
            let q_scale = dual_scale(&z, &lam);
            status = if rp <= st.feasibility_tol && rd <= st.feasibility_tol * q_scale && gap <= st.duality_tol {
                SolverStatus::Optimal
            } else if rp > st.feasibility_tol && max_abs(&lam) > 1e8 {
                SolverStatus::Infeasible
            } else {
                SolverStatus::MaxIterations
            };
        }
        QpSolution {
            z: z.iter().copied().collect(),
            duals: Some(lam.iter().copied().collect()),
            status,
            iterations,
            primal_residual: rp,
            dual_residual: rd,
            gap,
        }
    }
}
