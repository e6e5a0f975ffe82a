//! Indirect-feedback receding-horizon loop.
//!
//! The controller owns the nominal state `z`, which only ever moves under the
//! nominal dynamics with the applied input. Measurements enter the cost chain
//! of each solve and nothing else.

use std::io::{BufRead, Write};

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::linalg::weighted_norm_sq;
use crate::model::{self, Constraints, NoiseModel};
use crate::ocp::{candidate_feasible, solve_ocp, OcpProblem, OcpStatus};

/// Membership tolerance of `z(k) ∈ X̄_k` in traces.
pub const NOMINAL_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub k: usize,
    pub status: OcpStatus,
    pub fallback: bool,
    /// Objective of the applied sequence on the measured-state chain.
    pub objective: f64,
    pub iterations: usize,
    /// Feasibility of the shifted previous sequence for this step's problem;
    /// `None` at the first step.
    pub candidate_feasible: Option<bool>,
}

pub struct SmpcController {
    problem: OcpProblem,
    z: DVector<f64>,
    k: usize,
    plan: Option<Vec<DVector<f64>>>,
    u_f: DVector<f64>,
}

impl SmpcController {
    /// Controller with `z(0) = x0`.
    pub fn new(problem: OcpProblem, x0: &DVector<f64>) -> Result<Self> {
        problem.validate()?;
        check_dim("initial state", problem.model.state_dim(), x0.len())?;
        let m = problem.model.input_dim();
        Ok(Self {
            problem,
            z: x0.clone(),
            k: 0,
            plan: None,
            u_f: DVector::zeros(m),
        })
    }

    pub fn nominal_state(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn time(&self) -> usize {
        self.k
    }

    pub fn problem(&self) -> &OcpProblem {
        &self.problem
    }

    /// Solves the problem at the current time, applies the first input to the
    /// nominal state and advances the clock. The solve starts from zero
    /// inputs; the shifted previous plan is tried next if that fails, and
    /// applied as is if both fail.
    pub fn step(&mut self, x_k: &DVector<f64>) -> Result<(DVector<f64>, StepDiagnostics)> {
        check_dim("measured state", self.problem.model.state_dim(), x_k.len())?;
        let prob = &self.problem;
        let k = self.k;
        let candidate = self.plan.as_ref().map(|plan| {
            let mut u: Vec<DVector<f64>> = plan.iter().skip(1).cloned().collect();
            u.push(self.u_f.clone());
            u
        });
        let cand_ok = candidate
            .as_ref()
            .map(|c| candidate_feasible(prob, k, &self.z, c, prob.settings.tol_con));

        let mut sol = solve_ocp(prob, k, x_k, &self.z, None)?;
        if sol.status == OcpStatus::MaxIterations {
            if let Some(c) = candidate.as_deref() {
                let retry = solve_ocp(prob, k, x_k, &self.z, Some(c))?;
                if retry.status == OcpStatus::Solved {
                    sol = retry;
                }
            }
        }
        let (plan, fallback) = match (sol.status, candidate) {
            (OcpStatus::Solved, _) => (sol.u.clone(), false),
            (_, Some(c)) => (c, true),
            (OcpStatus::MaxIterations, None) if sol.violation <= prob.settings.tol_con => (sol.u.clone(), true),
            (_, None) => return Err(Error::InitialInfeasibility),
        };
        let objective = if fallback {
            prob.rolled_objective(x_k, &plan)
        } else {
            sol.objective
        };
        let u = plan[0].clone();
        self.z = prob.model.nominal(&self.z, &u);
        self.plan = Some(plan);
        self.k += 1;
        Ok((
            u,
            StepDiagnostics {
                k,
                status: sol.status,
                fallback,
                objective,
                iterations: sol.iterations,
                candidate_feasible: cand_ok,
            },
        ))
    }
}

/// One closed-loop realization. States are indexed `0..=T`, inputs and
/// per-step records `0..T`.
#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    pub seed: u64,
    pub x: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub stage_cost: Vec<f64>,
    pub in_x: Vec<bool>,
    pub z_in_tightened: Vec<bool>,
    pub status: Vec<OcpStatus>,
    pub fallback: Vec<bool>,
    pub objective: Vec<f64>,
    pub candidate_feasible: Vec<Option<bool>>,
}

impl ClosedLoopTrace {
    pub fn steps(&self) -> usize {
        self.u.len()
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|f| **f).count()
    }

    /// One row per state; the final row leaves the input-related columns empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.x[0].len();
        let m = self.u.first().map_or(0, |u| u.len());
        writeln!(out, "# schema=1")?;
        let mut header = vec!["k".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=n).map(|i| format!("z_{i}")));
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.extend(["stage_cost", "in_X", "status", "fallback"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.x.len() {
            let mut row = vec![k.to_string()];
            row.extend(self.x[k].iter().map(|v| format!("{v:e}")));
            row.extend(self.z[k].iter().map(|v| format!("{v:e}")));
            if k < self.u.len() {
                row.extend(self.u[k].iter().map(|v| format!("{v:e}")));
                row.push(format!("{:e}", self.stage_cost[k]));
                row.push((self.in_x[k] as u8).to_string());
                row.push(self.status[k].as_str().to_string());
                row.push((self.fallback[k] as u8).to_string());
            } else {
                row.extend(std::iter::repeat_n(String::new(), m + 1));
                row.push((self.in_x[k] as u8).to_string());
                row.extend([String::new(), String::new()]);
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Columns of a trace CSV, with the stage costs recomputed from the stored
/// states and inputs.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub x: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub stage_cost: Vec<f64>,
    pub in_x: Vec<bool>,
    pub status: Vec<String>,
    pub fallback: Vec<bool>,
}

/// Reads a trace CSV and checks every stored stage cost against
/// `‖x‖²_Q + ‖u‖²_R` to a relative `1e-12`.
pub fn read_trace_csv<R: BufRead>(input: R, q: &nalgebra::DMatrix<f64>, r: &nalgebra::DMatrix<f64>) -> Result<TraceRecord> {
    let n = q.nrows();
    let m = r.nrows();
    let bad = |line: usize, msg: &str| Error::Config(format!("trace line {line}: {msg}"));
    let mut rec = TraceRecord {
        x: Vec::new(),
        z: Vec::new(),
        u: Vec::new(),
        stage_cost: Vec::new(),
        in_x: Vec::new(),
        status: Vec::new(),
        fallback: Vec::new(),
    };
    let mut lines = input.lines().enumerate();
    match lines.next() {
        Some((_, Ok(l))) if l.trim() == "# schema=1" => {}
        _ => return Err(bad(1, "expected `# schema=1`")),
    }
    let width = 1 + 2 * n + m + 4;
    match lines.next() {
        Some((_, Ok(l))) if l.split(',').count() == width => {}
        _ => return Err(bad(2, "header does not match the state and input dimensions")),
    }
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(bad(lineno, "wrong number of columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(lineno, &format!("not a number: {s:?}")));
        let vec_at = |from: usize, len: usize| -> Result<DVector<f64>> {
            Ok(DVector::from_vec(cells[from..from + len].iter().map(|c| num(c)).collect::<Result<_>>()?))
        };
        let x = vec_at(1, n)?;
        rec.z.push(vec_at(1 + n, n)?);
        let in_x_col = 1 + 2 * n + m + 1;
        rec.in_x.push(cells[in_x_col] == "1");
        if !cells[1 + 2 * n].is_empty() {
            let u = vec_at(1 + 2 * n, m)?;
            let stored = num(cells[1 + 2 * n + m])?;
            let cost = weighted_norm_sq(&x, q) + weighted_norm_sq(&u, r);
            if (stored - cost).abs() > 1e-12 * cost.max(1.0) {
                return Err(bad(lineno, &format!("stage cost {stored:e} does not match recomputed {cost:e}")));
            }
            rec.u.push(u);
            rec.stage_cost.push(cost);
            rec.status.push(cells[in_x_col + 1].to_string());
            rec.fallback.push(cells[in_x_col + 2] == "1");
        }
        rec.x.push(x);
    }
    if rec.x.len() != rec.u.len() + 1 {
        return Err(Error::Config("trace must hold one more state than inputs".into()));
    }
    Ok(rec)
}

/// Co-simulates plant and controller for `steps` steps. The noise stream is
/// `realization_rng(seed, 0)`.
pub fn run_closed_loop(
    ctrl: &mut SmpcController,
    cons: &Constraints,
    noise: &NoiseModel,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<ClosedLoopTrace> {
    let mut rng = model::realization_rng(seed, 0);
    run_with_noise(ctrl, cons, x0, steps, seed, |_| noise.sample(&mut rng))
}

/// [`run_closed_loop`] with an explicit noise source `w(k)`.
pub fn run_with_noise(
    ctrl: &mut SmpcController,
    cons: &Constraints,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
    mut noise: impl FnMut(usize) -> DVector<f64>,
) -> Result<ClosedLoopTrace> {
    if steps == 0 {
        return Err(Error::Config("closed loop needs at least one step".into()));
    }
    let mut trace = ClosedLoopTrace {
        seed,
        x: vec![x0.clone()],
        z: vec![ctrl.z.clone()],
        u: Vec::with_capacity(steps),
        stage_cost: Vec::with_capacity(steps),
        in_x: vec![cons.contains_state(x0, 0.0)],
        z_in_tightened: Vec::with_capacity(steps),
        status: Vec::with_capacity(steps),
        fallback: Vec::with_capacity(steps),
        objective: Vec::with_capacity(steps),
        candidate_feasible: Vec::with_capacity(steps),
    };
    let plant = ctrl.problem.model.clone();
    let mut x = x0.clone();
    for k in 0..steps {
        let in_bar = ctrl.problem.tightened.contains(&ctrl.z, k, NOMINAL_TOL);
        let (u, diag) = ctrl.step(&x)?;
        let cost = weighted_norm_sq(&x, &ctrl.problem.q) + weighted_norm_sq(&u, &ctrl.problem.r);
        x = model::step(plant.as_ref(), &x, &u, &noise(k))?;
        trace.u.push(u);
        trace.stage_cost.push(cost);
        trace.z_in_tightened.push(in_bar);
        trace.status.push(diag.status);
        trace.fallback.push(diag.fallback);
        trace.objective.push(diag.objective);
        trace.candidate_feasible.push(diag.candidate_feasible);
        trace.in_x.push(cons.contains_state(&x, 0.0));
        trace.x.push(x.clone());
        trace.z.push(ctrl.z.clone());
    }
    Ok(trace)
}
