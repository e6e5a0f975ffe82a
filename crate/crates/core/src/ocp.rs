//! Finite-horizon optimal control problem with twin prediction chains.
//!
//! Both chains are driven by the same inputs. The nominal chain `z` starts at
//! the controller's nominal state and carries the tightened and terminal
//! constraints; the certainty-equivalent chain `x̄` starts at the measured
//! state and carries the cost. Solved by SQP on a multiple-shooting
//! transcription with a Gauss-Newton Hessian, replaced by the exact one
//! whenever that stays positive definite. Each QP is condensed onto the
//! input increments through the linearized gap recursions.

use std::io::Write;
use std::ops::AddAssign;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::weighted_norm_sq;
use crate::metric::ContractionCertificate;
use crate::model::{Constraints, SystemModel};
use crate::prs::{terminal_ingredients, tighten, PrsSchedule, TerminalIngredients, TightenedConstraints};
use crate::qp::{solve_qp, QpOptions, QpProblem, QpStatus};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SqpSettings {
    pub tol_kkt: f64,
    pub tol_con: f64,
    pub max_iter: usize,
    #[serde(skip)]
    pub record_log: bool,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-6,
            tol_con: 1e-8,
            max_iter: 100,
            record_log: false,
        }
    }
}

#[derive(Clone)]
pub struct OcpProblem {
    pub model: Arc<dyn SystemModel>,
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub terminal: TerminalIngredients,
    pub tightened: TightenedConstraints,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub settings: SqpSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OcpStatus {
    Solved,
    Infeasible,
    MaxIterations,
}

impl OcpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            OcpStatus::Solved => "solved",
            OcpStatus::Infeasible => "infeasible",
            OcpStatus::MaxIterations => "max_iterations",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SqpIterate {
    pub iteration: usize,
    pub merit: f64,
    pub kkt: f64,
    pub violation: f64,
    pub step_norm: f64,
    pub step_size: f64,
    pub restoration: bool,
}

/// Multipliers of the inequality constraints on the rolled-out `z` chain.
#[derive(Debug, Clone)]
pub struct OcpMultipliers {
    /// `stage[i - 1][j]` for stage `i = 1..N-1` and row `j`.
    pub stage: Vec<DVector<f64>>,
    pub terminal: f64,
    /// Input box: `upper[i]` for `u_i ≤ u_max`, `lower[i]` for `u_i ≥ u_min`.
    pub upper: Vec<DVector<f64>>,
    pub lower: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub u: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub xbar: Vec<DVector<f64>>,
    pub objective: f64,
    pub kkt: f64,
    pub violation: f64,
    pub status: OcpStatus,
    pub iterations: usize,
    pub multipliers: Option<OcpMultipliers>,
    pub log: Vec<SqpIterate>,
}

impl OcpSolution {
    pub fn write_log_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# schema=1")?;
        writeln!(out, "iteration,merit,kkt,violation,step_norm,step_size,restoration")?;
        for it in &self.log {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{}",
                it.iteration, it.merit, it.kkt, it.violation, it.step_norm, it.step_size, it.restoration as u8
            )?;
        }
        Ok(())
    }
}

/// Previous optimal inputs shifted by one step with `u_f` appended.
pub fn shift_candidate(prev: &OcpSolution, u_f: &DVector<f64>) -> Vec<DVector<f64>> {
    let mut u: Vec<DVector<f64>> = prev.u.iter().skip(1).cloned().collect();
    u.push(u_f.clone());
    u
}

/// Sensitivities `Δs_i = S_i Δu + c_i` of one chain around the shooting nodes.
struct ChainLinearization {
    s: Vec<DMatrix<f64>>,
    c: Vec<DVector<f64>>,
    a: Vec<DMatrix<f64>>,
}

/// Evaluation of all constraint rows at a trajectory, stage rows first
/// (stages 1..N-1, rows in order), then the terminal level constraint.
fn constraint_values(prob: &OcpProblem, k: usize, z: &[DVector<f64>]) -> DVector<f64> {
    let nr = prob.tightened.n_rows();
    let n_stage = (prob.horizon - 1) * nr;
    let mut g = DVector::zeros(n_stage + 1);
    for i in 1..prob.horizon {
        for (j, h) in prob.tightened.rows.iter().enumerate() {
            g[(i - 1) * nr + j] = h.dot(&z[i]) - prob.tightened.margin(j, Some(k + i));
        }
    }
    g[n_stage] = prob.terminal.level(&z[prob.horizon]) - prob.terminal.alpha_f;
    g
}

impl OcpProblem {
    /// Tightening and terminal ingredients from a certificate, with the
    /// input box taken from `cons`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_certificate(
        model: Arc<dyn SystemModel>,
        cons: &Constraints,
        cert: &ContractionCertificate,
        p: f64,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        horizon: usize,
        settings: SqpSettings,
    ) -> Result<Self> {
        let schedule = PrsSchedule::new(cert, p)?;
        let tightened = tighten(cons, cert, schedule)?;
        let terminal = terminal_ingredients(cert, &q, &tightened)?;
        let prob = Self {
            model,
            horizon,
            q,
            r,
            terminal,
            tightened,
            u_min: cons.u_min.clone(),
            u_max: cons.u_max.clone(),
            settings,
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        check_dim("Q", n, self.q.nrows())?;
        check_dim("Q", n, self.q.ncols())?;
        check_dim("R", m, self.r.nrows())?;
        check_dim("R", m, self.r.ncols())?;
        check_dim("input lower bound", m, self.u_min.len())?;
        check_dim("input upper bound", m, self.u_max.len())?;
        check_dim("terminal metric", n, self.terminal.m.nrows())?;
        if self.tightened.n_rows() > 0 {
            check_dim("tightened rows", n, self.tightened.rows[0].len())?;
        }
        for (w, name) in [(&self.q, "Q"), (&self.r, "R")] {
            if (w - w.transpose()).amax() > 1e-12 || w.clone().cholesky().is_none() {
                return Err(Error::Config(format!("{name} must be symmetric positive definite")));
            }
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn rollout(&self, start: &DVector<f64>, u: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(u.len() + 1);
        out.push(start.clone());
        for ui in u {
            let next = self.model.nominal(out.last().expect("non-empty"), ui);
            out.push(next);
        }
        out
    }

    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        weighted_norm_sq(x, &self.q) + weighted_norm_sq(u, &self.r)
    }

    /// Cost of the `x̄` chain.
    pub fn cost(&self, xbar: &[DVector<f64>], u: &[DVector<f64>]) -> f64 {
        let n = self.horizon;
        (0..n).map(|i| self.stage_cost(&xbar[i], &u[i])).sum::<f64>() + self.terminal.cost(&xbar[n])
    }

    /// Objective of an input sequence, evaluated on the rolled-out `x̄` chain.
    pub fn rolled_objective(&self, x_k: &DVector<f64>, u: &[DVector<f64>]) -> f64 {
        self.cost(&self.rollout(x_k, u), u)
    }

    /// `J(u) + Σ μ_j g_j(u)` on rolled-out chains; the box multipliers enter
    /// through `u_i - u_max` and `u_min - u_i`.
    pub fn rolled_lagrangian(
        &self,
        k: usize,
        x_k: &DVector<f64>,
        z_k: &DVector<f64>,
        u: &[DVector<f64>],
        mult: &OcpMultipliers,
    ) -> f64 {
        let z = self.rollout(z_k, u);
        let g = constraint_values(self, k, &z);
        let nr = self.tightened.n_rows();
        let mut val = self.rolled_objective(x_k, u);
        for i in 1..self.horizon {
            for j in 0..nr {
                val += mult.stage[i - 1][j] * g[(i - 1) * nr + j];
            }
        }
        val += mult.terminal * g[g.len() - 1];
        for i in 0..self.horizon {
            val += mult.upper[i].dot(&(&u[i] - &self.u_max));
            val += mult.lower[i].dot(&(&self.u_min - &u[i]));
        }
        val
    }

    /// Gradient of [`OcpProblem::rolled_lagrangian`] from the chain
    /// sensitivities (the margins only shift the constraint values).
    pub fn lagrangian_gradient(
        &self,
        x_k: &DVector<f64>,
        z_k: &DVector<f64>,
        u: &[DVector<f64>],
        mult: &OcpMultipliers,
    ) -> DVector<f64> {
        let xbar = self.rollout(x_k, u);
        let z = self.rollout(z_k, u);
        let lx = self.linearize(&xbar, u);
        let lz = self.linearize(&z, u);
        let (_, mut grad) = self.cost_model(&xbar, u, &lx, 0.0, &lz, None);
        let m = self.input_dim();
        for i in 1..self.horizon {
            for (j, h) in self.tightened.rows.iter().enumerate() {
                grad += lz.s[i].transpose() * h * mult.stage[i - 1][j];
            }
        }
        let n = self.horizon;
        grad += lz.s[n].transpose() * (&self.terminal.m * &z[n]) * (2.0 * mult.terminal);
        for i in 0..n {
            for l in 0..m {
                grad[i * m + l] += mult.upper[i][l] - mult.lower[i][l];
            }
        }
        grad
    }

    fn linearize(&self, nodes: &[DVector<f64>], u: &[DVector<f64>]) -> ChainLinearization {
        let n = self.model.state_dim();
        let m = self.input_dim();
        let nv = self.horizon * m;
        let mut s = vec![DMatrix::zeros(n, nv)];
        let mut c = vec![DVector::zeros(n)];
        let mut a_list = Vec::with_capacity(self.horizon);
        for i in 0..self.horizon {
            let a = self.model.jacobian(&nodes[i], &u[i]);
            let b = self.model.input_jacobian(&nodes[i], &u[i]);
            let gap = self.model.nominal(&nodes[i], &u[i]) - &nodes[i + 1];
            let mut si = &a * &s[i];
            si.view_mut((0, i * m), (n, m)).add_assign(&b);
            let ci = &a * &c[i] + gap;
            s.push(si);
            c.push(ci);
            a_list.push(a);
        }
        ChainLinearization { s, c, a: a_list }
    }

    /// Gauss-Newton Hessian and gradient of the cost in `Δu`, including the
    /// terminal-constraint curvature `2 μ_f M` on the `z` chain.
    fn cost_model(
        &self,
        xbar: &[DVector<f64>],
        u: &[DVector<f64>],
        lx: &ChainLinearization,
        mu_f: f64,
        lz: &ChainLinearization,
        curvature: Option<(&[DVector<f64>], &[DVector<f64>], &[DVector<f64>])>,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let m = self.input_dim();
        let n = self.horizon;
        let nv = n * m;
        let mut h = DMatrix::zeros(nv, nv);
        let mut g = DVector::zeros(nv);
        for i in 0..n {
            h.view_mut((i * m, i * m), (m, m)).add_assign(&(&self.r * 2.0));
            g.rows_mut(i * m, m).add_assign(&(&self.r * &u[i] * 2.0));
        }
        for i in 1..=n {
            let w = if i == n { &self.terminal.p } else { &self.q };
            let sw = lx.s[i].transpose() * w;
            h += &sw * &lx.s[i] * 2.0;
            g += &sw * (&xbar[i] + &lx.c[i]) * 2.0;
        }
        if mu_f > 0.0 {
            let sm = lz.s[n].transpose() * &self.terminal.m;
            h += &sm * &lz.s[n] * (2.0 * mu_f);
            g += &sm * &lz.c[n] * (2.0 * mu_f);
        }
        // λᵀ∇²f on the interior nodes of both chains
        if let Some((z, lam_z, lam_x)) = curvature {
            for i in 1..n {
                for (lin, node, lam) in [(lz, &z[i], &lam_z[i]), (lx, &xbar[i], &lam_x[i])] {
                    if let Some(c) = self.model.state_hessian_contraction(node, &u[i], lam) {
                        let sc = lin.s[i].transpose() * &c;
                        h += &sc * &lin.s[i];
                        g += &sc * &lin.c[i];
                    }
                }
            }
        }
        (h, g)
    }

    /// Linearized inequality rows `G Δu ≤ rhs`: stage rows, terminal row,
    /// then the input box (`+` rows, then `-` rows).
    fn linear_constraints(
        &self,
        k: usize,
        z: &[DVector<f64>],
        u: &[DVector<f64>],
        lz: &ChainLinearization,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let m = self.input_dim();
        let n = self.horizon;
        let nv = n * m;
        let nr = self.tightened.n_rows();
        let n_soft = (n - 1) * nr + 1;
        let rows = n_soft + 2 * nv;
        let mut gm = DMatrix::zeros(rows, nv);
        let mut rhs = DVector::zeros(rows);
        for i in 1..n {
            for (j, h) in self.tightened.rows.iter().enumerate() {
                let r = (i - 1) * nr + j;
                gm.row_mut(r).copy_from(&(h.transpose() * &lz.s[i]));
                rhs[r] = self.tightened.margin(j, Some(k + i)) - h.dot(&(&z[i] + &lz.c[i]));
            }
        }
        let mz = &self.terminal.m * &z[n];
        gm.row_mut(n_soft - 1).copy_from(&(mz.transpose() * &lz.s[n] * 2.0));
        rhs[n_soft - 1] = self.terminal.alpha_f - weighted_norm_sq(&z[n], &self.terminal.m) - 2.0 * mz.dot(&lz.c[n]);
        for i in 0..n {
            for l in 0..m {
                let v = i * m + l;
                gm[(n_soft + v, v)] = 1.0;
                rhs[n_soft + v] = self.u_max[l] - u[i][l];
                gm[(n_soft + nv + v, v)] = -1.0;
                rhs[n_soft + nv + v] = u[i][l] - self.u_min[l];
            }
        }
        (gm, rhs)
    }
}

/// Multiple-shooting iterate.
#[derive(Clone)]
struct Iterate {
    u: Vec<DVector<f64>>,
    z: Vec<DVector<f64>>,
    xbar: Vec<DVector<f64>>,
}

impl Iterate {
    fn gaps_l1(&self, prob: &OcpProblem) -> (f64, f64) {
        let mut l1 = 0.0;
        let mut linf: f64 = 0.0;
        for i in 0..prob.horizon {
            for chain in [&self.z, &self.xbar] {
                let gap = prob.model.nominal(&chain[i], &self.u[i]) - &chain[i + 1];
                l1 += gap.lp_norm(1);
                linf = linf.max(gap.amax());
            }
        }
        (l1, linf)
    }

    fn input_violation(&self, prob: &OcpProblem) -> f64 {
        let mut v: f64 = 0.0;
        for ui in &self.u {
            for l in 0..ui.len() {
                v = v.max(ui[l] - prob.u_max[l]).max(prob.u_min[l] - ui[l]);
            }
        }
        v
    }

    /// `(ℓ1 infeasibility, max violation)`.
    fn infeasibility(&self, prob: &OcpProblem, k: usize) -> (f64, f64) {
        let (gap_l1, gap_inf) = self.gaps_l1(prob);
        let g = constraint_values(prob, k, &self.z);
        let pos_sum: f64 = g.iter().map(|v| v.max(0.0)).sum();
        let pos_max = g.iter().fold(0.0f64, |a, v| a.max(*v));
        (gap_l1 + pos_sum, gap_inf.max(pos_max).max(self.input_violation(prob)))
    }

    fn step(&self, dir: &Direction, alpha: f64) -> Iterate {
        let add = |a: &[DVector<f64>], d: &[DVector<f64>]| -> Vec<DVector<f64>> {
            a.iter().zip(d).map(|(x, dx)| x + dx * alpha).collect()
        };
        Iterate {
            u: add(&self.u, &dir.du),
            z: add(&self.z, &dir.dz),
            xbar: add(&self.xbar, &dir.dx),
        }
    }
}

struct Direction {
    du: Vec<DVector<f64>>,
    dz: Vec<DVector<f64>>,
    dx: Vec<DVector<f64>>,
}

fn expand(lin: &ChainLinearization, dv: &DVector<f64>) -> Vec<DVector<f64>> {
    lin.s.iter().zip(&lin.c).map(|(s, c)| s * dv + c).collect()
}

fn split_inputs(dv: &DVector<f64>, n: usize, m: usize) -> Vec<DVector<f64>> {
    (0..n).map(|i| dv.rows(i * m, m).into_owned()).collect()
}

fn unpack_multipliers(prob: &OcpProblem, z: &DVector<f64>) -> OcpMultipliers {
    let m = prob.input_dim();
    let n = prob.horizon;
    let nv = n * m;
    let nr = prob.tightened.n_rows();
    let n_soft = (n - 1) * nr + 1;
    OcpMultipliers {
        stage: (1..n).map(|i| z.rows((i - 1) * nr, nr).into_owned()).collect(),
        terminal: z[n_soft - 1],
        upper: (0..n).map(|i| z.rows(n_soft + i * m, m).into_owned()).collect(),
        lower: (0..n).map(|i| z.rows(n_soft + nv + i * m, m).into_owned()).collect(),
    }
}

/// Dynamics multipliers `λ_i` of `f(s_i, u_i) − s_{i+1} = 0`, `i = 0..N−1`,
/// for the `z` and `x̄` chains, from the adjoint recursions.
fn adjoint_multipliers(
    prob: &OcpProblem,
    it: &Iterate,
    lz: &ChainLinearization,
    lx: &ChainLinearization,
    mult: &OcpMultipliers,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n = prob.horizon;
    let mut lam_z = vec![DVector::zeros(0); n];
    let mut lam_x = vec![DVector::zeros(0); n];
    lam_z[n - 1] = &prob.terminal.m * &it.z[n] * (2.0 * mult.terminal);
    lam_x[n - 1] = &prob.terminal.p * &it.xbar[n] * 2.0;
    for i in (1..n).rev() {
        let mut nz = lz.a[i].transpose() * &lam_z[i];
        for (j, h) in prob.tightened.rows.iter().enumerate() {
            nz += h * mult.stage[i - 1][j];
        }
        lam_z[i - 1] = nz;
        lam_x[i - 1] = lx.a[i].transpose() * &lam_x[i] + &prob.q * &it.xbar[i] * 2.0;
    }
    (lam_z, lam_x)
}

pub fn solve_ocp(
    prob: &OcpProblem,
    k: usize,
    x_k: &DVector<f64>,
    z_k: &DVector<f64>,
    warm: Option<&[DVector<f64>]>,
) -> Result<OcpSolution> {
    let n_state = prob.model.state_dim();
    let m = prob.input_dim();
    let n = prob.horizon;
    check_dim("measured state", n_state, x_k.len())?;
    check_dim("nominal state", n_state, z_k.len())?;
    let settings = prob.settings;

    let infeasible = |it: &Iterate, iterations: usize, violation: f64, log: Vec<SqpIterate>| OcpSolution {
        objective: prob.cost(&it.xbar, &it.u),
        u: it.u.clone(),
        z: it.z.clone(),
        xbar: it.xbar.clone(),
        kkt: f64::INFINITY,
        violation,
        status: OcpStatus::Infeasible,
        iterations,
        multipliers: None,
        log,
    };

    let u0: Vec<DVector<f64>> = match warm {
        Some(w) => {
            if w.len() != n {
                return Err(Error::Dimension {
                    what: "warm start length",
                    expected: n,
                    got: w.len(),
                });
            }
            w.iter().map(|ui| prob.u_min.sup(&prob.u_max.inf(ui))).collect()
        }
        None => vec![DVector::zeros(m); n],
    };
    let mut it = Iterate {
        z: prob.rollout(z_k, &u0),
        xbar: prob.rollout(x_k, &u0),
        u: u0,
    };

    // the stage-0 nominal state is fixed, so a violated margin is final
    let stage0 = prob
        .tightened
        .rows
        .iter()
        .enumerate()
        .map(|(j, h)| h.dot(z_k) - prob.tightened.margin(j, Some(k)))
        .fold(f64::NEG_INFINITY, f64::max);
    if stage0 > settings.tol_con {
        return Ok(infeasible(&it, 0, stage0, Vec::new()));
    }

    let qp_opts = QpOptions::default();
    let mut nu: f64 = 1.0;
    let mut mu_f = 0.0;
    let mut log = Vec::new();
    let mut prox = 1e-6;
    let mut theta_history: Vec<f64> = Vec::new();
    let mut last_mult = None;
    let mut last_kkt = f64::INFINITY;

    for iter in 0..settings.max_iter {
        let lz = prob.linearize(&it.z, &it.u);
        let lx = prob.linearize(&it.xbar, &it.u);
        let adj = last_mult.as_ref().map(|mu| adjoint_multipliers(prob, &it, &lz, &lx, mu));
        let curvature = adj.as_ref().map(|(lam_z, lam_x)| (it.z.as_slice(), lam_z.as_slice(), lam_x.as_slice()));
        // exact curvature only where it keeps the condensed Hessian positive definite
        let (h, g) = match curvature {
            Some(c) => {
                let (he, ge) = prob.cost_model(&it.xbar, &it.u, &lx, mu_f, &lz, Some(c));
                if he.clone().cholesky().is_some() {
                    (he, ge)
                } else {
                    prob.cost_model(&it.xbar, &it.u, &lx, mu_f, &lz, None)
                }
            }
            None => prob.cost_model(&it.xbar, &it.u, &lx, mu_f, &lz, None),
        };
        let (gm, rhs) = prob.linear_constraints(k, &it.z, &it.u, &lz);
        let qp = QpProblem::new(h.clone(), g.clone()).with_inequalities(gm.clone(), rhs.clone());
        let sol = solve_qp(&qp, &qp_opts);
        let (theta, violation) = it.infeasibility(prob, k);

        if sol.status != QpStatus::Optimal {
            // restoration: minimize the ℓ1 violation of the linearized rows
            let nv = n * m;
            let nr = prob.tightened.n_rows();
            let n_soft = (n - 1) * nr + 1;
            let mut he = DMatrix::zeros(nv + n_soft, nv + n_soft);
            for i in 0..nv {
                he[(i, i)] = prox;
            }
            let mut ce = DVector::zeros(nv + n_soft);
            ce.rows_mut(nv, n_soft).fill(1.0);
            let rows = gm.nrows();
            let mut ge = DMatrix::zeros(rows + n_soft, nv + n_soft);
            ge.view_mut((0, 0), (rows, nv)).copy_from(&gm);
            for r in 0..n_soft {
                ge[(r, nv + r)] = -1.0;
                ge[(rows + r, nv + r)] = -1.0;
            }
            let mut re = DVector::zeros(rows + n_soft);
            re.rows_mut(0, rows).copy_from(&rhs);
            let esol = solve_qp(&QpProblem::new(he, ce).with_inequalities(ge, re), &qp_opts);
            if esol.status != QpStatus::Optimal {
                return Ok(infeasible(&it, iter, violation, log));
            }
            let predicted: f64 = esol.x.rows(nv, n_soft).sum();
            let dv = esol.x.rows(0, nv).into_owned();
            let dir = Direction {
                du: split_inputs(&dv, n, m),
                dz: expand(&lz, &dv),
                dx: expand(&lx, &dv),
            };
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha > 1e-8 {
                let trial = it.step(&dir, alpha);
                let (t_theta, _) = trial.infeasibility(prob, k);
                if t_theta <= theta - 1e-4 * alpha * (theta - predicted).max(0.0) && t_theta < theta {
                    accepted = Some((trial, t_theta));
                    break;
                }
                alpha *= 0.5;
            }
            if settings.record_log {
                log.push(SqpIterate {
                    iteration: iter,
                    merit: theta,
                    kkt: f64::NAN,
                    violation,
                    step_norm: dv.amax(),
                    step_size: if accepted.is_some() { alpha } else { 0.0 },
                    restoration: true,
                });
            }
            let stalled = match accepted {
                Some((trial, t_theta)) => {
                    prox = if alpha == 1.0 { (prox * 0.3).max(1e-8) } else { prox * 4.0 };
                    it = trial;
                    theta_history.push(t_theta);
                    let w = theta_history.len();
                    w > 5 && t_theta > 0.99 * theta_history[w - 6]
                }
                None => true,
            };
            if stalled || (predicted > settings.tol_con && predicted >= theta * (1.0 - 1e-9)) {
                let (_, v) = it.infeasibility(prob, k);
                return Ok(infeasible(&it, iter + 1, v, log));
            }
            continue;
        }

        let mult = unpack_multipliers(prob, &sol.z);
        // stationarity of the condensed Lagrangian and complementarity at Δu = 0
        let stat = (&g + gm.transpose() * &sol.z).amax();
        let compl = sol
            .z
            .iter()
            .zip(rhs.iter())
            .map(|(zj, r)| zj * r.abs())
            .fold(0.0f64, f64::max);
        let kkt = stat.max(compl);
        last_kkt = kkt;

        let merit = |x: &Iterate, nu: f64| -> f64 { prob.cost(&x.xbar, &x.u) + nu * x.infeasibility(prob, k).0 };
        if kkt <= settings.tol_kkt && violation <= settings.tol_con {
            if settings.record_log {
                log.push(SqpIterate {
                    iteration: iter,
                    merit: merit(&it, nu),
                    kkt,
                    violation,
                    step_norm: 0.0,
                    step_size: 0.0,
                    restoration: false,
                });
            }
            last_mult = Some(mult);
            return Ok(finish(prob, k, z_k, x_k, it, kkt, iter, last_mult, log));
        }

        let (lam_z, lam_x) = adjoint_multipliers(prob, &it, &lz, &lx, &mult);
        let lam_max = lam_z.iter().chain(lam_x.iter()).map(|l| l.amax()).fold(0.0, f64::max);
        nu = nu.max(1.5 * sol.z.amax().max(lam_max) + 1.0);
        mu_f = mult.terminal;

        let dv = sol.x.clone();
        let dir = Direction {
            du: split_inputs(&dv, n, m),
            dz: expand(&lz, &dv),
            dx: expand(&lx, &dv),
        };
        // ∇J·p over (u, x̄)
        let mut dj = 0.0;
        for i in 0..n {
            dj += 2.0 * it.u[i].dot(&(&prob.r * &dir.du[i]));
            if i > 0 {
                dj += 2.0 * it.xbar[i].dot(&(&prob.q * &dir.dx[i]));
            }
        }
        dj += 2.0 * it.xbar[n].dot(&(&prob.terminal.p * &dir.dx[n]));
        let mut deriv = dj - nu * theta;
        if deriv >= 0.0 {
            nu *= 2.0;
            deriv = dj - nu * theta;
        }
        let phi0 = merit(&it, nu);
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-10 {
            let trial = it.step(&dir, alpha);
            if merit(&trial, nu) <= phi0 + 1e-4 * alpha * deriv.min(0.0) {
                it = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if settings.record_log {
            log.push(SqpIterate {
                iteration: iter,
                merit: phi0,
                kkt,
                violation,
                step_norm: dv.amax(),
                step_size: if accepted { alpha } else { 0.0 },
                restoration: false,
            });
        }
        last_mult = Some(mult);
        if !accepted {
            // no merit progress possible: accept if already converged within
            // rounding of the cost scale
            let tiny = dv.amax() <= 1e-12 * (1.0 + it.u.iter().map(|u| u.amax()).fold(0.0, f64::max));
            if tiny && violation <= settings.tol_con {
                return Ok(finish(prob, k, z_k, x_k, it, kkt, iter + 1, last_mult, log));
            }
            break;
        }
    }
    let mut out = finish(prob, k, z_k, x_k, it, last_kkt, settings.max_iter, last_mult, log);
    out.status = OcpStatus::MaxIterations;
    Ok(out)
}

/// Re-rolls both chains from the final inputs so that the dynamics hold
/// exactly, and re-evaluates violation on the re-rolled `z` chain.
#[allow(clippy::too_many_arguments)]
fn finish(
    prob: &OcpProblem,
    k: usize,
    z_k: &DVector<f64>,
    x_k: &DVector<f64>,
    it: Iterate,
    kkt: f64,
    iterations: usize,
    multipliers: Option<OcpMultipliers>,
    log: Vec<SqpIterate>,
) -> OcpSolution {
    let z = prob.rollout(z_k, &it.u);
    let xbar = prob.rollout(x_k, &it.u);
    let rolled = Iterate {
        u: it.u,
        z,
        xbar,
    };
    let (_, violation) = rolled.infeasibility(prob, k);
    let status = if violation <= prob.settings.tol_con && kkt <= prob.settings.tol_kkt {
        OcpStatus::Solved
    } else {
        OcpStatus::MaxIterations
    };
    OcpSolution {
        objective: prob.cost(&rolled.xbar, &rolled.u),
        u: rolled.u,
        z: rolled.z,
        xbar: rolled.xbar,
        kkt,
        violation,
        status,
        iterations,
        multipliers,
        log,
    }
}

/// Feasibility of an input sequence for the problem at absolute time `k`
/// (rolled-out `z` chain, stage 0 included), within `tol`.
pub fn candidate_feasible(prob: &OcpProblem, k: usize, z_k: &DVector<f64>, u: &[DVector<f64>], tol: f64) -> bool {
    if u.len() != prob.horizon {
        return false;
    }
    let z = prob.rollout(z_k, u);
    let stage0 = prob
        .tightened
        .rows
        .iter()
        .enumerate()
        .all(|(j, h)| h.dot(z_k) <= prob.tightened.margin(j, Some(k)) + tol);
    let inputs = u.iter().all(|ui| {
        (0..ui.len()).all(|l| ui[l] <= prob.u_max[l] + tol && ui[l] >= prob.u_min[l] - tol)
    });
    stage0 && inputs && constraint_values(prob, k, &z).iter().all(|g| *g <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::synthetic_problem;
    use rand::Rng;

    fn random_multipliers(prob: &OcpProblem, rng: &mut impl Rng) -> OcpMultipliers {
        let nr = prob.tightened.n_rows();
        let n = prob.horizon;
        OcpMultipliers {
            stage: (1..n).map(|_| DVector::from_fn(nr, |_, _| rng.random_range(0.0..2.0))).collect(),
            terminal: rng.random_range(0.0..2.0),
            upper: (0..n).map(|_| DVector::from_fn(1, |_, _| rng.random_range(0.0..0.1))).collect(),
            lower: (0..n).map(|_| DVector::from_fn(1, |_, _| rng.random_range(0.0..0.1))).collect(),
        }
    }

    #[test]
    fn exact_hessian_matches_finite_differences() {
        let prob = synthetic_problem(true, 5);
        let mut rng = crate::model::realization_rng(3, 0);
        let x_k = DVector::from_vec(vec![0.2, -0.1, 0.4, 0.05, -0.08, 0.12]);
        let z_k = DVector::from_vec(vec![0.1, 0.0, 0.3, 0.02, -0.05, 0.1]);
        let u: Vec<_> = (0..5).map(|_| DVector::from_element(1, rng.random_range(-3.0..3.0))).collect();
        let mult = random_multipliers(&prob, &mut rng);
        let it = Iterate {
            z: prob.rollout(&z_k, &u),
            xbar: prob.rollout(&x_k, &u),
            u: u.clone(),
        };
        let lz = prob.linearize(&it.z, &u);
        let lx = prob.linearize(&it.xbar, &u);
        let (lam_z, lam_x) = adjoint_multipliers(&prob, &it, &lz, &lx, &mult);
        let (h, _) = prob.cost_model(&it.xbar, &u, &lx, mult.terminal, &lz, Some((&it.z, &lam_z, &lam_x)));
        let eps = 1e-5;
        for v in 0..5 {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[v][0] += eps;
            dn[v][0] -= eps;
            let col = (prob.lagrangian_gradient(&x_k, &z_k, &up, &mult) - prob.lagrangian_gradient(&x_k, &z_k, &dn, &mult)) / (2.0 * eps);
            for w in 0..5 {
                assert!((col[w] - h[(w, v)]).abs() <= 1e-4 * (1.0 + col[w].abs()), "({w},{v}) {} vs {}", col[w], h[(w, v)]);
            }
        }
    }

    fn displaced(d: f64) -> DVector<f64> {
        DVector::from_vec(vec![0.0, 0.0, d, 0.0, 0.0, 0.0])
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let prob = synthetic_problem(true, 10);
        let zero = DVector::zeros(6);
        let sol = solve_ocp(&prob, 0, &zero, &zero, None).unwrap();
        assert_eq!(sol.status, OcpStatus::Solved);
        assert!(sol.u.iter().all(|u| u.amax() == 0.0));
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn unconstrained_linear_instance_matches_riccati() {
        let horizon = 8;
        let prob = synthetic_problem(false, horizon);
        // the frictionless chain is linear, so unit probes give A and B exactly
        let zero = DVector::zeros(6);
        let u0 = DVector::zeros(1);
        let base = prob.model.nominal(&zero, &u0);
        let a = DMatrix::from_fn(6, 6, |r, c| {
            let mut e = DVector::zeros(6);
            e[c] = 1.0;
            (prob.model.nominal(&e, &u0) - &base)[r]
        });
        let b = DMatrix::from_column_slice(6, 1, (prob.model.nominal(&zero, &DVector::from_element(1, 1.0)) - &base).as_slice());
        let mut p = prob.terminal.p.clone();
        let mut gains = vec![DMatrix::zeros(1, 6); horizon];
        for i in (0..horizon).rev() {
            let btp = b.transpose() * &p;
            let s = &prob.r + &btp * &b;
            let k = s.try_inverse().unwrap() * &btp * &a;
            p = &prob.q + a.transpose() * &p * &a - a.transpose() * &p * &b * &k;
            p = crate::linalg::symmetrize(&p);
            gains[i] = k;
        }
        let x0 = DVector::from_vec(vec![0.05, -0.03, 0.08, 0.02, 0.0, -0.04]);
        let mut x = x0.clone();
        let mut u_lqr = Vec::new();
        for k in &gains {
            let u = -(k * &x);
            x = &a * &x + &b * &u;
            u_lqr.push(u);
        }

        let sol = solve_ocp(&prob, 0, &x0, &x0, None).unwrap();
        assert_eq!(sol.status, OcpStatus::Solved);
        let mult = sol.multipliers.as_ref().unwrap();
        assert!(mult.terminal == 0.0 && mult.stage.iter().all(|s| s.amax() == 0.0), "instance must be unconstrained");
        for (u, r) in sol.u.iter().zip(&u_lqr) {
            assert!((u - r).amax() <= 1e-6, "{u} vs {r}");
        }
    }

    #[test]
    fn lagrangian_gradient_matches_finite_differences() {
        let mut rng = crate::model::realization_rng(11, 0);
        for friction in [false, true] {
            let prob = synthetic_problem(friction, 6);
            for _ in 0..5 {
                let x_k = DVector::from_fn(6, |_, _| rng.random_range(-0.5..0.5));
                let z_k = DVector::from_fn(6, |_, _| rng.random_range(-0.5..0.5));
                let u: Vec<_> = (0..6).map(|_| DVector::from_element(1, rng.random_range(-5.0..5.0))).collect();
                let mult = random_multipliers(&prob, &mut rng);
                let grad = prob.lagrangian_gradient(&x_k, &z_k, &u, &mult);
                let eps = 1e-6;
                for v in 0..6 {
                    let mut up = u.clone();
                    let mut dn = u.clone();
                    up[v][0] += eps;
                    dn[v][0] -= eps;
                    let fd = (prob.rolled_lagrangian(3, &x_k, &z_k, &up, &mult)
                        - prob.rolled_lagrangian(3, &x_k, &z_k, &dn, &mult))
                        / (2.0 * eps);
                    assert!((fd - grad[v]).abs() <= 1e-4 * fd.abs().max(1.0), "{fd} vs {}", grad[v]);
                }
            }
        }
    }

    #[test]
    fn violated_stage_zero_margin_is_infeasible() {
        let prob = synthetic_problem(true, 10);
        // first compression row: -p_1 <= margin < 1
        let z_k = DVector::from_vec(vec![-1.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let sol = solve_ocp(&prob, 0, &z_k, &z_k, None).unwrap();
        assert_eq!(sol.status, OcpStatus::Infeasible);
    }

    #[test]
    fn far_initial_condition_is_infeasible() {
        let prob = synthetic_problem(true, 15);
        let x0 = displaced(10.0);
        let sol = solve_ocp(&prob, 0, &x0, &x0, None).unwrap();
        assert_eq!(sol.status, OcpStatus::Infeasible);
    }

    #[test]
    fn chains_coincide_for_equal_starts() {
        let prob = synthetic_problem(true, 15);
        let x0 = displaced(1.0);
        let sol = solve_ocp(&prob, 0, &x0, &x0, None).unwrap();
        assert_eq!(sol.status, OcpStatus::Solved);
        for (z, x) in sol.z.iter().zip(&sol.xbar) {
            assert_eq!(z, x);
        }
    }

    #[test]
    fn shift_drops_the_first_input() {
        let seq = |v: &[f64]| v.iter().map(|&x| DVector::from_element(1, x)).collect::<Vec<_>>();
        let prob = synthetic_problem(true, 3);
        let prev = OcpSolution {
            u: seq(&[1.0, 2.0, 3.0]),
            z: Vec::new(),
            xbar: Vec::new(),
            objective: 0.0,
            kkt: 0.0,
            violation: 0.0,
            status: OcpStatus::Solved,
            iterations: 0,
            multipliers: None,
            log: Vec::new(),
        };
        assert_eq!(shift_candidate(&prev, &DVector::zeros(1)), seq(&[2.0, 3.0, 0.0]));

        let x0 = displaced(1.0);
        let sol = solve_ocp(&prob, 0, &x0, &x0, None).unwrap();
        let cand = shift_candidate(&sol, &DVector::zeros(1));
        let z = prob.rollout(&sol.z[1], &cand);
        for i in 0..3 {
            assert_eq!(z[i], sol.z[i + 1]);
        }
    }

    #[test]
    fn solution_beats_the_shifted_candidate() {
        let prob = synthetic_problem(true, 15);
        let x0 = displaced(1.5);
        let first = solve_ocp(&prob, 0, &x0, &x0, None).unwrap();
        assert_eq!(first.status, OcpStatus::Solved);
        let cand = shift_candidate(&first, &DVector::zeros(1));
        let z1 = first.z[1].clone();
        let x1 = &z1 + DVector::from_vec(vec![0.0, 0.0, 0.0, 0.01, -0.02, 0.01]);
        assert!(candidate_feasible(&prob, 1, &z1, &cand, prob.settings.tol_con));
        let second = solve_ocp(&prob, 1, &x1, &z1, Some(&cand)).unwrap();
        assert_eq!(second.status, OcpStatus::Solved);
        assert!(second.objective <= prob.rolled_objective(&x1, &cand) + 1e-9);
        assert!(second.kkt <= prob.settings.tol_kkt && second.violation <= prob.settings.tol_con);
    }

    #[test]
    fn log_csv_has_one_line_per_iteration() {
        let mut prob = synthetic_problem(true, 10);
        prob.settings.record_log = true;
        let x0 = displaced(1.0);
        let sol = solve_ocp(&prob, 0, &x0, &x0, None).unwrap();
        let mut buf = Vec::new();
        sol.write_log_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# schema=1\n"));
        assert_eq!(text.lines().count(), 2 + sol.log.len());
        assert!(!sol.log.is_empty());
    }
}
