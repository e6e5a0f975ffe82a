//! Shrinking-horizon SMPC on enumerable toy instances.
//!
//! The noise has finite support, so every expectation is an exact weighted
//! sum over the scenario tree. Constraints act on the nominal chain from `x0`
//! through all applied and planned inputs, tightened by the PRS margins of the
//! absolute step.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::linalg::weighted_norm_sq;
use crate::metric::ContractionCertificate;
use crate::model::{Constraints, LinearModel, SystemModel};
use crate::ocp::OcpStatus;
use crate::prs::{tighten, PrsSchedule, TightenedConstraints};
use crate::qp::{solve_qp, QpOptions, QpProblem, QpStatus};

pub const DEFAULT_TREE_CAP: usize = 10_000;

/// I.i.d. noise with finite support, expanded over a fixed horizon.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    horizon: usize,
    support: Vec<DVector<f64>>,
    probs: Vec<f64>,
}

impl ScenarioTree {
    pub fn new(horizon: usize, support: Vec<(DVector<f64>, f64)>, cap: usize) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Config("noise support is empty".into()));
        }
        let dim = support[0].0.len();
        for (w, p) in &support {
            check_dim("noise support point", dim, w.len())?;
            if !(*p > 0.0 && p.is_finite()) {
                return Err(Error::Config(format!("support probabilities must be positive, got {p}")));
            }
        }
        let total: f64 = support.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("support probabilities sum to {total}")));
        }
        let leaves = support.len().saturating_pow(horizon as u32);
        if leaves > cap {
            return Err(Error::TreeTooLarge { leaves, cap });
        }
        let (support, probs) = support.into_iter().unzip();
        Ok(Self {
            horizon,
            support,
            probs,
        })
    }

    /// Scalar noise `±σ`, each with probability ½.
    pub fn two_point(horizon: usize, sigma: f64) -> Result<Self> {
        let pt = |v: f64| DVector::from_element(1, v);
        Self::new(horizon, vec![(pt(-sigma), 0.5), (pt(sigma), 0.5)], DEFAULT_TREE_CAP)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn support(&self) -> &[DVector<f64>] {
        &self.support
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn leaves(&self) -> usize {
        self.support.len().pow(self.horizon as u32)
    }

    /// All noise paths of length `len` as support indices, with probabilities.
    pub fn paths(&self, len: usize) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        let s = self.support.len();
        (0..s.pow(len as u32)).map(move |mut idx| {
            let mut path = vec![0; len];
            let mut prob = 1.0;
            for slot in path.iter_mut() {
                *slot = idx % s;
                idx /= s;
                prob *= self.probs[*slot];
            }
            (path, prob)
        })
    }
}

pub struct ShrinkingProblem {
    pub model: Arc<dyn SystemModel>,
    pub constraints: Constraints,
    pub tightened: TightenedConstraints,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p_terminal: DMatrix<f64>,
    pub tree: ScenarioTree,
}

#[derive(Debug, Clone)]
pub struct ShrinkingSolution {
    /// Full input sequence, applied part included.
    pub u: Vec<DVector<f64>>,
    /// `E[Σ_{i≥k} ℓ(x_i, u_i) + ‖x_N‖²_P]` from the given `x_k`.
    pub expected_cost: f64,
    pub status: OcpStatus,
    pub iterations: usize,
    pub kkt: f64,
}

/// Expected remaining cost with its Gauss-Newton model (exact for linear
/// dynamics).
struct CostModel {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl ShrinkingProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: Arc<dyn SystemModel>,
        cons: &Constraints,
        cert: &ContractionCertificate,
        p: f64,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        p_terminal: DMatrix<f64>,
        tree: ScenarioTree,
    ) -> Result<Self> {
        let n = model.state_dim();
        let m = model.input_dim();
        check_dim("certificate", n, cert.state_dim())?;
        check_dim("Q", n, q.nrows())?;
        check_dim("P", n, p_terminal.nrows())?;
        check_dim("R", m, r.nrows())?;
        check_dim("scenario noise", model.noise_dim(), tree.support[0].len())?;
        if tree.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let tightened = tighten(cons, cert, PrsSchedule::new(cert, p)?)?;
        Ok(Self {
            model,
            constraints: cons.clone(),
            tightened,
            q,
            r,
            p_terminal,
            tree,
        })
    }

    pub fn horizon(&self) -> usize {
        self.tree.horizon
    }

    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        weighted_norm_sq(x, &self.q) + weighted_norm_sq(u, &self.r)
    }

    fn noisy_step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.model.nominal(x, u) + self.model.noise_matrix() * w
    }

    /// Exact expected remaining cost of `plan` (inputs `k..N`) from `x_k`.
    pub fn expected_cost(&self, k: usize, x_k: &DVector<f64>, plan: &[DVector<f64>]) -> f64 {
        self.cost_model(k, x_k, plan, false).value
    }

    fn cost_model(&self, k: usize, x_k: &DVector<f64>, plan: &[DVector<f64>], derivatives: bool) -> CostModel {
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        let steps = self.horizon() - k;
        let nv = steps * m;
        let mut out = CostModel {
            value: 0.0,
            grad: DVector::zeros(if derivatives { nv } else { 0 }),
            hess: DMatrix::zeros(if derivatives { nv } else { 0 }, if derivatives { nv } else { 0 }),
        };
        for (path, prob) in self.tree.paths(steps) {
            let mut x = x_k.clone();
            let mut s = DMatrix::zeros(n, if derivatives { nv } else { 0 });
            for (t, u) in plan.iter().enumerate() {
                out.value += prob * self.stage_cost(&x, u);
                if derivatives {
                    let qs = &self.q * &s;
                    out.grad += (s.transpose() * (&self.q * &x)) * (2.0 * prob);
                    out.hess += (s.transpose() * &qs) * (2.0 * prob);
                    let ru = &self.r * u;
                    for l in 0..m {
                        out.grad[t * m + l] += 2.0 * prob * ru[l];
                        for c in 0..m {
                            out.hess[(t * m + l, t * m + c)] += 2.0 * prob * self.r[(l, c)];
                        }
                    }
                    let a = self.model.jacobian(&x, u);
                    let b = self.model.input_jacobian(&x, u);
                    s = &a * s;
                    let mut blk = s.columns_mut(t * m, m);
                    blk += b;
                }
                x = self.noisy_step(&x, u, &self.tree.support[path[t]]);
            }
            out.value += prob * weighted_norm_sq(&x, &self.p_terminal);
            if derivatives {
                out.grad += (s.transpose() * (&self.p_terminal * &x)) * (2.0 * prob);
                out.hess += (s.transpose() * &self.p_terminal * &s) * (2.0 * prob);
            }
        }
        out
    }

    /// Constraint values `h_jᵀ z_i − b_{j,i}` for `i = k+1..=N` on the nominal
    /// chain from `z_k`, with their input sensitivities.
    fn nominal_constraints(&self, k: usize, z_k: &DVector<f64>, plan: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        let nr = self.tightened.n_rows();
        let nv = plan.len() * m;
        let mut vals = DVector::zeros(plan.len() * nr);
        let mut jac = DMatrix::zeros(plan.len() * nr, nv);
        let mut z = z_k.clone();
        let mut s = DMatrix::zeros(n, nv);
        for (t, u) in plan.iter().enumerate() {
            let a = self.model.jacobian(&z, u);
            let b = self.model.input_jacobian(&z, u);
            s = &a * s;
            let mut blk = s.columns_mut(t * m, m);
            blk += b;
            z = self.model.nominal(&z, u);
            for (j, h) in self.tightened.rows.iter().enumerate() {
                let row = t * nr + j;
                vals[row] = h.dot(&z) - self.tightened.margin(j, Some(k + t + 1));
                jac.row_mut(row).copy_from(&(h.transpose() * &s));
            }
        }
        (vals, jac)
    }

    fn box_violation(&self, plan: &[DVector<f64>]) -> f64 {
        let cons = &self.constraints;
        plan.iter()
            .map(|u| (u - &cons.u_max).map(|v| v.max(0.0)).sum() + (&cons.u_min - u).map(|v| v.max(0.0)).sum())
            .sum()
    }
}

/// Re-optimizes the inputs `k..N` after applying `applied = u(0..k)` and
/// measuring `x_k`. The SQP starts from `warm` (inputs `k..N`) if given,
/// otherwise from zero.
pub fn solve_shrinking(
    prob: &ShrinkingProblem,
    x0: &DVector<f64>,
    k: usize,
    applied: &[DVector<f64>],
    x_k: &DVector<f64>,
    warm: Option<&[DVector<f64>]>,
) -> Result<ShrinkingSolution> {
    let n_horizon = prob.horizon();
    let m = prob.model.input_dim();
    check_dim("applied inputs", k, applied.len())?;
    check_dim("initial state", prob.model.state_dim(), x0.len())?;
    check_dim("measured state", prob.model.state_dim(), x_k.len())?;
    if k >= n_horizon {
        return Err(Error::Config(format!("step {k} is past the horizon {n_horizon}")));
    }
    let steps = n_horizon - k;
    let nv = steps * m;
    let cons = &prob.constraints;

    let mut z_k = x0.clone();
    let mut fixed_ok = prob.tightened.contains(&z_k, 0, 0.0);
    for (i, u) in applied.iter().enumerate() {
        z_k = prob.model.nominal(&z_k, u);
        fixed_ok &= prob.tightened.contains(&z_k, i + 1, 1e-10);
    }

    let mut plan: Vec<DVector<f64>> = match warm {
        Some(w) => {
            check_dim("warm start", steps, w.len())?;
            w.iter().map(|u| cons.clamp_input(u)).collect()
        }
        None => vec![DVector::zeros(m); steps],
    };
    let assemble = |plan: &[DVector<f64>]| {
        let mut u = applied.to_vec();
        u.extend_from_slice(plan);
        u
    };
    if !fixed_ok {
        return Ok(ShrinkingSolution {
            expected_cost: prob.expected_cost(k, x_k, &plan),
            u: assemble(&plan),
            status: OcpStatus::Infeasible,
            iterations: 0,
            kkt: f64::INFINITY,
        });
    }

    let viol = |plan: &[DVector<f64>]| -> f64 {
        let (g, _) = prob.nominal_constraints(k, &z_k, plan);
        g.iter().map(|v| v.max(0.0)).sum::<f64>() + prob.box_violation(plan)
    };
    let qp_opts = QpOptions::default();
    let mut nu: f64 = 1.0;
    let mut kkt = f64::INFINITY;
    for iter in 0..100 {
        let cm = prob.cost_model(k, x_k, &plan, true);
        let (g, jg) = prob.nominal_constraints(k, &z_k, &plan);
        let rows = g.len();
        let mut gm = DMatrix::zeros(rows + 2 * nv, nv);
        let mut rhs = DVector::zeros(rows + 2 * nv);
        gm.rows_mut(0, rows).copy_from(&jg);
        rhs.rows_mut(0, rows).copy_from(&(-&g));
        for (t, u) in plan.iter().enumerate() {
            for l in 0..m {
                let v = t * m + l;
                gm[(rows + v, v)] = 1.0;
                rhs[rows + v] = cons.u_max[l] - u[l];
                gm[(rows + nv + v, v)] = -1.0;
                rhs[rows + nv + v] = u[l] - cons.u_min[l];
            }
        }
        let sol = solve_qp(&QpProblem::new(cm.hess.clone(), cm.grad.clone()).with_inequalities(gm.clone(), rhs.clone()), &qp_opts);
        if sol.status != QpStatus::Optimal {
            return Ok(ShrinkingSolution {
                expected_cost: cm.value,
                u: assemble(&plan),
                status: if sol.status == QpStatus::Infeasible {
                    OcpStatus::Infeasible
                } else {
                    OcpStatus::MaxIterations
                },
                iterations: iter,
                kkt,
            });
        }
        let stat = (&cm.grad + gm.transpose() * &sol.z).amax();
        let compl = sol.z.iter().zip(rhs.iter()).map(|(z, r)| z * r.abs()).fold(0.0f64, f64::max);
        kkt = stat.max(compl);
        let theta = viol(&plan);
        let scale = 1.0 + cm.value.abs();
        if kkt <= 1e-9 * scale && theta <= 1e-10 {
            return Ok(ShrinkingSolution {
                expected_cost: cm.value,
                u: assemble(&plan),
                status: OcpStatus::Solved,
                iterations: iter,
                kkt,
            });
        }
        nu = nu.max(1.5 * sol.z.amax() + 1.0);
        let deriv = cm.grad.dot(&sol.x) - nu * theta;
        let phi0 = cm.value + nu * theta;
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-12 {
            let trial: Vec<DVector<f64>> = plan
                .iter()
                .enumerate()
                .map(|(t, u)| u + sol.x.rows(t * m, m) * alpha)
                .collect();
            let phi = prob.expected_cost(k, x_k, &trial) + nu * viol(&trial);
            if phi <= phi0 + 1e-4 * alpha * deriv.min(0.0) {
                plan = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            let status = if theta <= 1e-10 && sol.x.amax() <= 1e-10 * (1.0 + plan.iter().map(|u| u.amax()).fold(0.0, f64::max)) {
                OcpStatus::Solved
            } else {
                OcpStatus::MaxIterations
            };
            return Ok(ShrinkingSolution {
                expected_cost: prob.expected_cost(k, x_k, &plan),
                u: assemble(&plan),
                status,
                iterations: iter + 1,
                kkt,
            });
        }
    }
    Ok(ShrinkingSolution {
        expected_cost: prob.expected_cost(k, x_k, &plan),
        u: assemble(&plan),
        status: OcpStatus::MaxIterations,
        iterations: 100,
        kkt,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ShrinkingRow {
    pub k: usize,
    /// Expected stage cost at step `k` (terminal cost at `k = N`).
    pub expected_cost_open: f64,
    pub expected_cost_closed: f64,
    /// Exact `P{x(k) ∈ X}` under the re-optimizing loop.
    pub constraint_prob_k: f64,
    pub constraint_prob_open: f64,
}

#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub rows: Vec<ShrinkingRow>,
    pub expected_open: f64,
    pub expected_closed: f64,
    /// Nodes where the re-optimized remaining cost exceeds the previous
    /// plan's remaining cost at the same scenario.
    pub chain_violations: usize,
    pub max_chain_gap: f64,
    pub solves: usize,
    pub unsolved: usize,
    pub p: f64,
}

impl MonotonicityReport {
    pub fn bound_holds(&self, tol: f64) -> bool {
        self.expected_closed <= self.expected_open + tol
    }

    pub fn chance_constraints_hold(&self) -> bool {
        self.rows.iter().all(|r| r.constraint_prob_k >= self.p - 1e-12)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# schema=1")?;
        writeln!(out, "k,expected_cost_open,expected_cost_closed,constraint_prob_k")?;
        for r in &self.rows {
            writeln!(out, "{},{:e},{:e},{:e}", r.k, r.expected_cost_open, r.expected_cost_closed, r.constraint_prob_k)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct NodeStats {
    cost: Vec<f64>,
    in_x: Vec<f64>,
    chain_violations: usize,
    max_chain_gap: f64,
    solves: usize,
    unsolved: usize,
}

impl NodeStats {
    fn new(len: usize) -> Self {
        Self {
            cost: vec![0.0; len],
            in_x: vec![0.0; len],
            max_chain_gap: f64::NEG_INFINITY,
            ..Default::default()
        }
    }

    fn merge(mut self, other: NodeStats) -> Self {
        for (a, b) in self.cost.iter_mut().zip(other.cost) {
            *a += b;
        }
        for (a, b) in self.in_x.iter_mut().zip(other.in_x) {
            *a += b;
        }
        self.chain_violations += other.chain_violations;
        self.max_chain_gap = self.max_chain_gap.max(other.max_chain_gap);
        self.solves += other.solves;
        self.unsolved += other.unsolved;
        self
    }
}

/// Exact expected closed-loop cost of the re-optimizing scheme against the
/// expected cost of the initial open-loop optimum, by enumerating the tree.
pub fn validate_cost_monotonicity(prob: &ShrinkingProblem, x0: &DVector<f64>, p: f64) -> Result<MonotonicityReport> {
    let n_horizon = prob.horizon();
    let root = solve_shrinking(prob, x0, 0, &[], x0, None)?;
    if root.status != OcpStatus::Solved {
        return Err(Error::Infeasible(format!("initial shrinking-horizon problem: {}", root.status.as_str())));
    }

    let mut open = NodeStats::new(n_horizon + 1);
    for (path, pr) in prob.tree.paths(n_horizon) {
        let mut x = x0.clone();
        for (k, u) in root.u.iter().enumerate() {
            open.cost[k] += pr * prob.stage_cost(&x, u);
            open.in_x[k] += pr * prob.constraints.contains_state(&x, 0.0) as u8 as f64;
            x = prob.noisy_step(&x, u, &prob.tree.support[path[k]]);
        }
        open.cost[n_horizon] += pr * weighted_norm_sq(&x, &prob.p_terminal);
        open.in_x[n_horizon] += pr * prob.constraints.contains_state(&x, 0.0) as u8 as f64;
    }

    let closed = closed_node(prob, x0, 0, x0.clone(), Vec::new(), 1.0, &root);
    let rows = (0..=n_horizon)
        .map(|k| ShrinkingRow {
            k,
            expected_cost_open: open.cost[k],
            expected_cost_closed: closed.cost[k],
            constraint_prob_k: closed.in_x[k],
            constraint_prob_open: open.in_x[k],
        })
        .collect();
    Ok(MonotonicityReport {
        rows,
        expected_open: open.cost.iter().sum(),
        expected_closed: closed.cost.iter().sum(),
        chain_violations: closed.chain_violations,
        max_chain_gap: closed.max_chain_gap,
        solves: closed.solves + 1,
        unsolved: closed.unsolved,
        p,
    })
}

fn closed_node(
    prob: &ShrinkingProblem,
    x0: &DVector<f64>,
    k: usize,
    x_k: DVector<f64>,
    applied: Vec<DVector<f64>>,
    mass: f64,
    previous: &ShrinkingSolution,
) -> NodeStats {
    let n_horizon = prob.horizon();
    let mut stats = NodeStats::new(n_horizon + 1);
    stats.in_x[k] = mass * prob.constraints.contains_state(&x_k, 0.0) as u8 as f64;
    if k == n_horizon {
        stats.cost[k] = mass * weighted_norm_sq(&x_k, &prob.p_terminal);
        return stats;
    }
    let current = if k == 0 {
        previous.clone()
    } else {
        let tail = &previous.u[k..];
        let before = prob.expected_cost(k, &x_k, tail);
        stats.solves += 1;
        let sol = match solve_shrinking(prob, x0, k, &applied, &x_k, Some(tail)) {
            Ok(s) if s.status == OcpStatus::Solved => s,
            Ok(s) if s.status == OcpStatus::MaxIterations && s.expected_cost <= before => {
                stats.unsolved += 1;
                s
            }
            _ => {
                stats.unsolved += 1;
                ShrinkingSolution {
                    expected_cost: before,
                    ..previous.clone()
                }
            }
        };
        let gap = sol.expected_cost - before;
        stats.max_chain_gap = stats.max_chain_gap.max(gap);
        if gap > 1e-9 * (1.0 + before.abs()) {
            stats.chain_violations += 1;
        }
        sol
    };
    let u = current.u[k].clone();
    stats.cost[k] = mass * prob.stage_cost(&x_k, &u);
    let children: Vec<NodeStats> = prob
        .tree
        .support
        .par_iter()
        .zip(prob.tree.probs.par_iter())
        .map(|(w, pw)| {
            let mut next_applied = applied.clone();
            next_applied.push(u.clone());
            closed_node(prob, x0, k + 1, prob.noisy_step(&x_k, &u, w), next_applied, mass * pw, &current)
        })
        .collect();
    children.into_iter().fold(stats, NodeStats::merge)
}

/// Scalar `x⁺ = a x + u + w` with `w = ±σ`, `|x| ≤ 1`, `|u| ≤ 5`, unit state
/// and terminal weights and input weight `r`. The certificate is the exact
/// one for this system: `M = 1`, `ρ = a²`, `w̄ = σ²`.
pub fn scalar_toy(a: f64, sigma: f64, horizon: usize, r: f64, p: f64) -> Result<ShrinkingProblem> {
    let tree = if sigma == 0.0 {
        ScenarioTree::new(horizon, vec![(DVector::zeros(1), 1.0)], DEFAULT_TREE_CAP)?
    } else {
        ScenarioTree::two_point(horizon, sigma)?
    };
    let e = DVector::from_element(1, 1.0);
    let cons = Constraints::new(vec![e.clone(), -e], DVector::from_element(1, -5.0), DVector::from_element(1, 5.0))?;
    let one = DMatrix::from_element(1, 1, 1.0);
    let var = DMatrix::from_element(1, 1, sigma * sigma);
    let cert = ContractionCertificate::from_parts(one.clone(), var.clone(), a * a, var, p)?;
    ShrinkingProblem::new(
        Arc::new(LinearModel::scalar(a, 1.0, 1.0)),
        &cons,
        &cert,
        p,
        one.clone(),
        DMatrix::from_element(1, 1, r),
        one,
        tree,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: f64 = 0.9;

    fn toy(a: f64, sigma: f64, horizon: usize, r: f64) -> ShrinkingProblem {
        scalar_toy(a, sigma, horizon, r, P).unwrap()
    }

    fn x(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn tree_enumerates_every_path_once() {
        let tree = ScenarioTree::new(3, vec![(x(-1.0), 0.25), (x(0.0), 0.5), (x(1.0), 0.25)], DEFAULT_TREE_CAP).unwrap();
        let paths: Vec<_> = tree.paths(3).collect();
        assert_eq!(paths.len(), 27);
        assert_eq!(tree.leaves(), 27);
        let total: f64 = paths.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() <= 1e-12);
        let distinct: std::collections::HashSet<_> = paths.iter().map(|(p, _)| p.clone()).collect();
        assert_eq!(distinct.len(), 27);
    }

    #[test]
    fn oversized_tree_is_rejected() {
        let support = vec![(x(-1.0), 0.25), (x(0.0), 0.5), (x(1.0), 0.25)];
        let err = ScenarioTree::new(9, support, DEFAULT_TREE_CAP).unwrap_err();
        assert!(matches!(err, Error::TreeTooLarge { leaves: 19683, cap: 10_000 }));
        let bad = ScenarioTree::new(2, vec![(x(0.0), 0.5), (x(1.0), 0.4)], DEFAULT_TREE_CAP);
        assert!(bad.is_err());
    }

    #[test]
    fn two_step_optimum_matches_grid_search() {
        let prob = toy(0.9, 0.1, 2, 0.5);
        let x0 = x(0.6);
        let sol = solve_shrinking(&prob, &x0, 0, &[], &x0, None).unwrap();
        assert_eq!(sol.status, OcpStatus::Solved);
        let grid: Vec<f64> = (0..400).map(|i| -2.0 + 4.0 * i as f64 / 399.0).collect();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for &u0 in &grid {
            for &u1 in &grid {
                let z1 = 0.9 * 0.6 + u0;
                let z2 = 0.9 * z1 + u1;
                let ok = [(z1, 1), (z2, 2)]
                    .iter()
                    .all(|(z, i)| z.abs() <= prob.tightened.margin(0, Some(*i)));
                if !ok {
                    continue;
                }
                let mut cost = 0.0;
                for w0 in [-0.1, 0.1] {
                    for w1 in [-0.1, 0.1] {
                        let x1 = 0.9 * 0.6 + u0 + w0;
                        let x2 = 0.9 * x1 + u1 + w1;
                        cost += 0.25 * (0.36 + 0.5 * u0 * u0 + x1 * x1 + 0.5 * u1 * u1 + x2 * x2);
                    }
                }
                if cost < best.0 {
                    best = (cost, u0, u1);
                }
            }
        }
        assert!((sol.expected_cost - best.0).abs() <= 1e-3, "{} vs {}", sol.expected_cost, best.0);
        assert!(sol.expected_cost <= best.0 + 1e-12);
        let step = 4.0 / 399.0;
        assert!((sol.u[0][0] - best.1).abs() <= step && (sol.u[1][0] - best.2).abs() <= step);
    }

    #[test]
    fn active_constraint_lands_on_the_boundary() {
        let prob = toy(0.9, 0.1, 2, 100.0);
        let x0 = x(0.95);
        let margin = prob.tightened.margin(0, Some(1));
        let sol = solve_shrinking(&prob, &x0, 0, &[], &x0, None).unwrap();
        assert_eq!(sol.status, OcpStatus::Solved);
        // without the constraint, the expensive input barely moves the state
        let free = toy(0.9, 0.1, 2, 100.0);
        let uncon = ShrinkingProblem {
            tightened: TightenedConstraints {
                rows: Vec::new(),
                coefficients: Vec::new(),
                schedule: free.tightened.schedule,
            },
            ..free
        };
        let usol = solve_shrinking(&uncon, &x0, 0, &[], &x0, None).unwrap();
        assert!(0.9 * 0.95 + usol.u[0][0] > margin);
        let z1 = 0.9 * 0.95 + sol.u[0][0];
        assert!((z1 - margin).abs() <= 1e-8, "{z1} vs {margin}");
    }

    #[test]
    fn nominal_history_keeps_the_plan() {
        let prob = toy(0.9, 0.1, 3, 0.5);
        let x0 = x(0.7);
        let root = solve_shrinking(&prob, &x0, 0, &[], &x0, None).unwrap();
        let mut z = x0.clone();
        for k in 1..3 {
            z = prob.model.nominal(&z, &root.u[k - 1]);
            let sol = solve_shrinking(&prob, &x0, k, &root.u[..k], &z, None).unwrap();
            assert_eq!(sol.status, OcpStatus::Solved);
            for i in k..3 {
                assert!((sol.u[i][0] - root.u[i][0]).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn re_optimization_does_not_increase_expected_cost() {
        let prob = toy(0.9, 0.1, 3, 0.5);
        let report = validate_cost_monotonicity(&prob, &x(0.8), P).unwrap();
        assert!(report.bound_holds(1e-6), "{} > {}", report.expected_closed, report.expected_open);
        assert!(report.chance_constraints_hold());
        assert_eq!(report.chain_violations, 0);
        assert_eq!(report.unsolved, 0);
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.solves, 1 + 2 + 4);
    }

    #[test]
    fn zero_noise_closed_equals_open() {
        let prob = toy(0.9, 0.0, 3, 0.5);
        let report = validate_cost_monotonicity(&prob, &x(0.8), P).unwrap();
        assert!((report.expected_closed - report.expected_open).abs() <= 1e-12);
    }

    #[test]
    fn larger_noise_keeps_the_gap_non_negative() {
        for sigma in [0.02, 0.05, 0.1] {
            let prob = toy(0.9, sigma, 3, 0.5);
            let report = validate_cost_monotonicity(&prob, &x(0.8), P).unwrap();
            assert!(report.expected_open - report.expected_closed >= -1e-9);
        }
    }

    #[test]
    fn report_csv_layout() {
        let prob = toy(0.9, 0.1, 2, 0.5);
        let report = validate_cost_monotonicity(&prob, &x(0.5), P).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "# schema=1");
        assert_eq!(lines[1], "k,expected_cost_open,expected_cost_closed,constraint_prob_k");
        assert_eq!(lines.len(), 2 + 3);
    }
}
