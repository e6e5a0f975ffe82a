//! Dense primal log-det barrier solver for small semidefinite programs
//!
//! ```text
//! minimize    cᵀy
//! subject to  F_b0 + Σᵢ yᵢ F_bi ⪰ 0   for every block b
//! ```
//!
//! A phase-I problem with a shared slack finds a strictly feasible start,
//! then a path-following barrier method with damped Newton centering drives
//! the duality-gap bound `m/t` below the objective tolerance.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::symmetrize;

/// One linear matrix inequality `constant + Σ y_i · F_i ⪰ 0`. Only the
/// variables that actually appear are stored.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub constant: DMatrix<f64>,
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl LmiBlock {
    pub fn size(&self) -> usize {
        self.constant.nrows()
    }

    pub fn evaluate(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (i, f) in &self.terms {
            m += f * y[*i];
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub objective: DVector<f64>,
    pub blocks: Vec<LmiBlock>,
}

impl SdpProblem {
    pub fn new(objective: DVector<f64>) -> Self {
        Self {
            objective,
            blocks: Vec::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    /// Adds a block, dropping all-zero coefficient matrices.
    pub fn add_block(&mut self, constant: DMatrix<f64>, terms: Vec<(usize, DMatrix<f64>)>) -> Result<()> {
        let k = constant.nrows();
        check_dim("LMI block columns", k, constant.ncols())?;
        let asym = |m: &DMatrix<f64>| (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0);
        if asym(&constant) {
            return Err(Error::Config("LMI constant term is not symmetric".into()));
        }
        let mut kept = Vec::with_capacity(terms.len());
        for (i, f) in terms {
            if i >= self.n_vars() {
                return Err(Error::Dimension {
                    what: "LMI variable index",
                    expected: self.n_vars(),
                    got: i,
                });
            }
            check_dim("LMI coefficient rows", k, f.nrows())?;
            check_dim("LMI coefficient columns", k, f.ncols())?;
            if asym(&f) {
                return Err(Error::Config(format!("LMI coefficient of variable {i} is not symmetric")));
            }
            if f.amax() > 0.0 {
                kept.push((i, f));
            }
        }
        self.blocks.push(LmiBlock { constant, terms: kept });
        Ok(())
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(LmiBlock::size).sum()
    }

    /// Minimum eigenvalue of every block residual at `y`.
    pub fn block_min_eigenvalues(&self, y: &DVector<f64>) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| crate::linalg::min_eigenvalue(&b.evaluate(y)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SdpOptions {
    pub tol_psd: f64,
    pub tol_obj: f64,
    /// Newton-step budget per phase.
    pub max_iter: usize,
    /// Radius of the ball bounding the variables, relative to `1 + ‖y₀‖`.
    pub radius: f64,
    pub record_trace: bool,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self {
            tol_psd: 1e-8,
            tol_obj: 1e-7,
            max_iter: 200,
            radius: 1e4,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, Copy)]
pub struct SdpIterate {
    pub phase: u8,
    pub iteration: usize,
    pub t: f64,
    pub objective: f64,
    pub decrement: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub y: DVector<f64>,
    pub objective: f64,
    pub block_min_eigenvalues: Vec<f64>,
    pub status: SdpStatus,
    pub iterations: usize,
    pub trace: Vec<SdpIterate>,
}

impl SdpSolution {
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# schema=1")?;
        writeln!(out, "phase,iteration,t,objective,decrement,step")?;
        for it in &self.trace {
            writeln!(
                out,
                "{},{},{:e},{:e},{:e},{:e}",
                it.phase, it.iteration, it.t, it.objective, it.decrement, it.step
            )?;
        }
        Ok(())
    }
}

/// Barrier subproblem over a stacked variable vector. Phase I appends the
/// shared slack `s` (added to every block diagonal) as the last variable.
struct Barrier<'a> {
    prob: &'a SdpProblem,
    cost: DVector<f64>,
    with_slack: bool,
    /// Ball `‖y‖ ≤ radius` keeping zero-cost directions bounded.
    radius: f64,
}

impl Barrier<'_> {
    fn dim(&self) -> usize {
        self.cost.len()
    }

    fn block_matrix(&self, b: &LmiBlock, v: &DVector<f64>) -> DMatrix<f64> {
        let mut m = b.constant.clone();
        for (i, f) in &b.terms {
            m += f * v[*i];
        }
        if self.with_slack {
            let s = v[self.dim() - 1];
            for d in 0..m.nrows() {
                m[(d, d)] += s;
            }
        }
        m
    }

    fn ball_slack(&self, v: &DVector<f64>) -> f64 {
        let d = self.prob.n_vars();
        self.radius * self.radius - v.rows(0, d).norm_squared()
    }

    /// `t cᵀv - Σ log det F_b(v) - log(R² - ‖y‖²)`, or `None` outside the domain.
    fn value(&self, v: &DVector<f64>, t: f64) -> Option<f64> {
        let r = self.ball_slack(v);
        if !(r > 0.0) {
            return None;
        }
        let mut val = t * self.cost.dot(v) - r.ln();
        for b in &self.prob.blocks {
            let chol = symmetrize(&self.block_matrix(b, v)).cholesky()?;
            let l = chol.l_dirty();
            for d in 0..l.nrows() {
                let ld = l[(d, d)];
                if ld <= 0.0 || !ld.is_finite() {
                    return None;
                }
                val -= 2.0 * ld.ln();
            }
        }
        Some(val)
    }

    /// Gradient and Hessian of `t cᵀv - Σ log det F_b(v)`.
    fn derivatives(&self, v: &DVector<f64>, t: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let n = self.dim();
        let mut grad = &self.cost * t;
        let mut hess = DMatrix::zeros(n, n);
        let r = self.ball_slack(v);
        if !(r > 0.0) {
            return None;
        }
        let d = self.prob.n_vars();
        let y = v.rows(0, d);
        for i in 0..d {
            grad[i] += 2.0 * y[i] / r;
            hess[(i, i)] += 2.0 / r;
            for j in 0..d {
                hess[(i, j)] += 4.0 * y[i] * y[j] / (r * r);
            }
        }
        for b in &self.prob.blocks {
            let k = b.size();
            let chol = symmetrize(&self.block_matrix(b, v)).cholesky()?;
            let l = chol.l();
            // G_i = L⁻¹ F_i L⁻ᵀ, so tr(F⁻¹F_i) = tr G_i and
            // tr(F⁻¹F_i F⁻¹F_j) = ⟨G_i, G_j⟩.
            let mut scaled: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(b.terms.len() + 1);
            let whiten = |f: &DMatrix<f64>| -> DMatrix<f64> {
                let a = l.solve_lower_triangular(f).expect("cholesky factor is invertible");
                let at = a.transpose();
                l.solve_lower_triangular(&at).expect("cholesky factor is invertible")
            };
            for (i, f) in &b.terms {
                scaled.push((*i, whiten(f)));
            }
            if self.with_slack {
                scaled.push((n - 1, whiten(&DMatrix::identity(k, k))));
            }
            for (a, (i, gi)) in scaled.iter().enumerate() {
                grad[*i] -= gi.trace();
                for (j, gj) in scaled.iter().skip(a) {
                    let h = gi.dot(gj);
                    hess[(*i, *j)] += h;
                    if i != j {
                        hess[(*j, *i)] += h;
                    }
                }
            }
        }
        Some((grad, hess))
    }
}

fn newton_direction(grad: &DVector<f64>, hess: &DMatrix<f64>) -> Option<DVector<f64>> {
    let n = grad.len();
    let scale = (0..n).map(|i| hess[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut reg = 0.0;
    for _ in 0..8 {
        let mut h = hess.clone();
        for i in 0..n {
            h[(i, i)] += reg;
        }
        if let Some(ch) = h.cholesky() {
            let d = -ch.solve(grad);
            if d.iter().all(|x| x.is_finite()) {
                return Some(d);
            }
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    None
}

enum CenterOutcome {
    Centered,
    Budget,
    Stalled,
    /// Phase I only: a strictly feasible point was reached.
    SlackNegative,
}

struct PathState {
    v: DVector<f64>,
    iterations: usize,
    trace: Vec<SdpIterate>,
}

fn center(
    bar: &Barrier,
    st: &mut PathState,
    t: f64,
    opts: &SdpOptions,
    phase: u8,
    budget_start: usize,
) -> CenterOutcome {
    loop {
        if st.iterations - budget_start >= opts.max_iter {
            return CenterOutcome::Budget;
        }
        let Some((grad, hess)) = bar.derivatives(&st.v, t) else {
            return CenterOutcome::Stalled;
        };
        let Some(dir) = newton_direction(&grad, &hess) else {
            return CenterOutcome::Stalled;
        };
        let decrement = -grad.dot(&dir);
        if !(decrement.is_finite()) {
            return CenterOutcome::Stalled;
        }
        if decrement / 2.0 <= 1e-9 {
            return CenterOutcome::Centered;
        }
        let f0 = bar.value(&st.v, t).unwrap_or(f64::INFINITY);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &st.v + &dir * step;
            if let Some(f) = bar.value(&trial, t) {
                if f <= f0 - 0.25 * step * decrement {
                    st.v = trial;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        st.iterations += 1;
        if opts.record_trace {
            st.trace.push(SdpIterate {
                phase,
                iteration: st.iterations,
                t,
                objective: bar.cost.dot(&st.v),
                decrement,
                step: if accepted { step } else { 0.0 },
            });
        }
        // once the decrement is this small a damped step only means that
        // rounding in the barrier value dominates
        if accepted && step < 1.0 && decrement < 1e-6 {
            return CenterOutcome::Centered;
        }
        if !accepted {
            return if decrement < 1e-6 {
                CenterOutcome::Centered
            } else {
                CenterOutcome::Stalled
            };
        }
        if bar.with_slack && st.v[bar.dim() - 1] < 0.0 {
            return CenterOutcome::SlackNegative;
        }
    }
}

const GROWTH: f64 = 10.0;

pub fn solve_sdp(prob: &SdpProblem, opts: &SdpOptions) -> SdpSolution {
    solve_sdp_from(prob, opts, None)
}

/// Solves from an optional starting point; phase I is skipped when the start
/// is already strictly feasible.
pub fn solve_sdp_from(prob: &SdpProblem, opts: &SdpOptions, start: Option<&DVector<f64>>) -> SdpSolution {
    let d = prob.n_vars();
    let m_total = prob.total_dim() as f64 + 1.0;
    let y0 = start.cloned().unwrap_or_else(|| DVector::zeros(d));
    let radius = opts.radius * (1.0 + y0.norm());
    let finish = |y: DVector<f64>, status: SdpStatus, iterations: usize, trace: Vec<SdpIterate>| SdpSolution {
        objective: prob.objective.dot(&y),
        block_min_eigenvalues: prob.block_min_eigenvalues(&y),
        y,
        status,
        iterations,
        trace,
    };

    let min_eig = prob
        .block_min_eigenvalues(&y0)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let mut st = PathState {
        v: y0.clone(),
        iterations: 0,
        trace: Vec::new(),
    };

    if !(min_eig > 0.0) {
        // phase I: minimize s subject to F_b(y) + s I ⪰ 0
        let mut cost = DVector::zeros(d + 1);
        cost[d] = 1.0;
        let bar = Barrier {
            prob,
            cost,
            with_slack: true,
            radius,
        };
        let mut v = y0.clone().resize_vertically(d + 1, 0.0);
        v[d] = (-min_eig).max(0.0) + 1.0;
        st.v = v;
        let mut t = 1.0;
        let mut feasible = false;
        loop {
            match center(&bar, &mut st, t, opts, 1, 0) {
                CenterOutcome::SlackNegative => {
                    feasible = true;
                    break;
                }
                CenterOutcome::Budget => {
                    let y = st.v.rows(0, d).into_owned();
                    return finish(y, SdpStatus::MaxIterations, st.iterations, st.trace);
                }
                CenterOutcome::Centered | CenterOutcome::Stalled => {}
            }
            let s = st.v[d];
            let gap = (m_total + 0.0) / t;
            if s - gap > 0.0 || gap < opts.tol_psd * 1e-2 {
                break;
            }
            t *= GROWTH;
        }
        let y = st.v.rows(0, d).into_owned();
        if !feasible {
            return finish(y, SdpStatus::Infeasible, st.iterations, st.trace);
        }
        st.v = y;
    }

    // phase II
    let bar = Barrier {
        prob,
        cost: prob.objective.clone(),
        with_slack: false,
        radius,
    };
    let phase_one_iters = st.iterations;
    let mut t = match bar.derivatives(&st.v, 0.0) {
        Some((g_barrier, _)) => {
            let cn = prob.objective.norm();
            if cn > 0.0 {
                (g_barrier.norm() / cn).clamp(1e-6, 1e6)
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    loop {
        match center(&bar, &mut st, t, opts, 2, phase_one_iters) {
            CenterOutcome::Budget => {
                let y = st.v.clone();
                return finish(y, SdpStatus::MaxIterations, st.iterations, st.trace);
            }
            CenterOutcome::Stalled => {
                // accept if the gap bound is already within tolerance
                if m_total / t <= opts.tol_obj * 10.0 {
                    break;
                }
                let y = st.v.clone();
                return finish(y, SdpStatus::MaxIterations, st.iterations, st.trace);
            }
            _ => {}
        }
        if m_total / t <= opts.tol_obj || prob.objective.amax() == 0.0 {
            break;
        }
        t *= GROWTH;
    }
    let y = st.v.clone();
    let sol = finish(y, SdpStatus::Optimal, st.iterations, st.trace);
    if sol.block_min_eigenvalues.iter().any(|&e| e < -opts.tol_psd) {
        return SdpSolution {
            status: SdpStatus::MaxIterations,
            ..sol
        };
    }
    sol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::jacobi_eigenvalues;

    /// Symmetric basis `E_ij` for the upper triangle of a k×k matrix.
    fn sym_basis(k: usize) -> Vec<DMatrix<f64>> {
        let mut out = Vec::new();
        for i in 0..k {
            for j in i..k {
                let mut e = DMatrix::zeros(k, k);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                out.push(e);
            }
        }
        out
    }

    #[test]
    fn trace_minimization_recovers_lower_bound() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, -0.3, 0.5, 1.0, 0.2, -0.3, 0.2, 0.5]);
        let basis = sym_basis(3);
        // tr(X) counts each diagonal variable once
        let c = DVector::from_iterator(basis.len(), basis.iter().map(|e| if e.trace() > 0.0 { 1.0 } else { 0.0 }));
        let mut prob = SdpProblem::new(c);
        let terms = basis.iter().cloned().enumerate().collect();
        prob.add_block(-a.clone(), terms).unwrap();
        let sol = solve_sdp(&prob, &SdpOptions::default());
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.objective - a.trace()).abs() < 1e-7, "{}", sol.objective);
        let x = prob.blocks[0].evaluate(&sol.y) + &a;
        assert!((x - a).amax() < 1e-6);
    }

    #[test]
    fn two_by_two_psd_bound() {
        let mut prob = SdpProblem::new(DVector::from_element(1, -1.0));
        let off = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        prob.add_block(DMatrix::identity(2, 2), vec![(0, off)]).unwrap();
        let sol = solve_sdp(&prob, &SdpOptions::default());
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.y[0] - 1.0).abs() < 1e-7);
        assert!(sol.block_min_eigenvalues[0] >= -1e-8);
        let jac = jacobi_eigenvalues(&prob.blocks[0].evaluate(&sol.y));
        assert!((jac[0] - sol.block_min_eigenvalues[0]).abs() < 1e-12);
    }

    #[test]
    fn infeasible_problem_is_detected() {
        // y ≥ 1 and y ≤ -1
        let mut prob = SdpProblem::new(DVector::from_element(1, 1.0));
        let one = DMatrix::identity(1, 1);
        prob.add_block(-one.clone(), vec![(0, one.clone())]).unwrap();
        prob.add_block(-one.clone(), vec![(0, -one)]).unwrap();
        let sol = solve_sdp(&prob, &SdpOptions::default());
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    #[test]
    fn start_point_outside_domain_runs_phase_one() {
        // 1 ≤ y ≤ 3, minimize y, start at y = 10
        let mut prob = SdpProblem::new(DVector::from_element(1, 1.0));
        let one = DMatrix::identity(1, 1);
        prob.add_block(-one.clone(), vec![(0, one.clone())]).unwrap();
        prob.add_block(&one * 3.0, vec![(0, -one)]).unwrap();
        let sol = solve_sdp_from(&prob, &SdpOptions::default(), Some(&DVector::from_element(1, 10.0)));
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.y[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_asymmetric_coefficients() {
        let mut prob = SdpProblem::new(DVector::from_element(1, 1.0));
        let bad = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(prob.add_block(DMatrix::identity(2, 2), vec![(0, bad)]).is_err());
    }

    #[test]
    fn deterministic_iterate_path() {
        let mut prob = SdpProblem::new(DVector::from_vec(vec![1.0, -0.5]));
        let f1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, -1.0]);
        let f2 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.5]);
        prob.add_block(DMatrix::identity(2, 2) * 2.0, vec![(0, f1), (1, f2)]).unwrap();
        let opts = SdpOptions {
            record_trace: true,
            ..SdpOptions::default()
        };
        let a = solve_sdp(&prob, &opts);
        let b = solve_sdp(&prob, &opts);
        assert_eq!(a.y, b.y);
        assert_eq!(a.trace.len(), b.trace.len());
        let mut buf = Vec::new();
        a.write_trace_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("# schema=1\n"));
    }
}
