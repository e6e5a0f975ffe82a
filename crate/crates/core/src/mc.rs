//! Monte Carlo harness for the open-loop PRS experiment and the closed-loop
//! SMPC statistics.
//!
//! Realizations are processed in fixed blocks whose accumulators are merged in
//! block order, so reports do not depend on the number of worker threads.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::weighted_norm_sq;
use crate::metric::ContractionCertificate;
use crate::model::{self, Constraints, NoiseModel, SystemModel};
use crate::prs::PrsSchedule;
use crate::ocp::OcpStatus;
use crate::smpc::{run_with_noise, SmpcController};

const BLOCK: usize = 64;
/// Two-sided 95% standard normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSignal {
    /// `amplitude · sin(2π t / period)` with `t = k·dt`, in N and s.
    PeriodicForcing { amplitude: f64, period: f64 },
    Zero,
    ClosedLoop,
}

impl InputSignal {
    pub fn value(&self, k: usize, dt: f64) -> f64 {
        match *self {
            InputSignal::PeriodicForcing { amplitude, period } => {
                amplitude * (2.0 * std::f64::consts::PI * k as f64 * dt / period).sin()
            }
            InputSignal::Zero | InputSignal::ClosedLoop => 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InputSignal::PeriodicForcing { .. } => "periodic",
            InputSignal::Zero => "zero",
            InputSignal::ClosedLoop => "closed_loop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub realizations: usize,
    pub steps: usize,
    pub signal: InputSignal,
    pub seed: u64,
    /// Sampling time of the model, s.
    pub dt: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.realizations < 100 {
            return Err(Error::Config(format!(
                "at least 100 realizations are required, got {}",
                self.realizations
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("experiment needs at least one step".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if let InputSignal::PeriodicForcing { amplitude, period } = self.signal {
            if !(amplitude > 0.0 && period > 0.0) {
                return Err(Error::Config("forcing amplitude and period must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Frequency and Wilson 95% score interval of `successes` out of `n`.
pub fn wilson(successes: usize, n: usize) -> (f64, f64, f64) {
    if n == 0 {
        return (f64::NAN, 0.0, 1.0);
    }
    let nf = n as f64;
    let f = successes as f64 / nf;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / nf;
    let centre = (f + z2 / (2.0 * nf)) / denom;
    let half = Z95 / denom * (f * (1.0 - f) / nf + z2 / (4.0 * nf * nf)).sqrt();
    (f, (centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn containment_estimator(flags: &[bool]) -> (f64, (f64, f64)) {
    let (f, lo, hi) = wilson(flags.iter().filter(|b| **b).count(), flags.len());
    (f, (lo, hi))
}

/// Three-sigma binomial slack `3·sqrt(p(1-p)/n)`.
pub fn binomial_slack(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Streaming mean and variance (Welford, with pairwise merge).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    pub fn merge(&mut self, o: &RunningStats) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * (self.n as f64 * o.n as f64) / n as f64;
        self.n = n;
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenLoopRow {
    pub k: usize,
    pub mean_err_m2: f64,
    pub std_error: f64,
    /// `(1 - ρᵏ)/(1 - ρ) · w̄`.
    pub bound: f64,
    pub containment: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopReport {
    pub realizations: usize,
    pub p: f64,
    pub rows: Vec<OpenLoopRow>,
}

impl OpenLoopReport {
    /// Steps where the mean error exceeds the bound by more than three
    /// standard errors.
    pub fn bound_violations(&self) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.mean_err_m2 > r.bound + 3.0 * r.std_error)
            .map(|r| r.k)
            .collect()
    }

    /// Steps where containment falls below `p` minus the three-sigma slack.
    pub fn containment_violations(&self) -> Vec<usize> {
        let slack = binomial_slack(self.p, self.realizations);
        self.rows
            .iter()
            .filter(|r| r.containment < self.p - slack)
            .map(|r| r.k)
            .collect()
    }

    pub fn mean_error_sum(&self) -> f64 {
        self.rows.iter().map(|r| r.mean_err_m2).sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# schema=1")?;
        writeln!(out, "k,mean_err_M2,bound,containment,wilson_lo,wilson_hi")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e}",
                r.k, r.mean_err_m2, r.bound, r.containment, r.wilson_lo, r.wilson_hi
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct OpenAcc {
    err: Vec<RunningStats>,
    inside: Vec<usize>,
}

impl OpenAcc {
    fn new(len: usize) -> Self {
        Self {
            err: vec![RunningStats::default(); len],
            inside: vec![0; len],
        }
    }

    fn merge(mut self, o: &OpenAcc) -> Self {
        for (a, b) in self.err.iter_mut().zip(&o.err) {
            a.merge(b);
        }
        for (a, b) in self.inside.iter_mut().zip(&o.inside) {
            *a += b;
        }
        self
    }
}

fn blocks(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(BLOCK))
        .map(|b| b * BLOCK..((b + 1) * BLOCK).min(n))
        .collect()
}

/// Simulates the true and nominal systems under a fixed input signal from
/// `x0` and compares `‖x − z‖²_M` with the expectation bound and the PRS.
pub fn open_loop_experiment(
    cfg: &ExperimentConfig,
    model: &dyn SystemModel,
    noise: &NoiseModel,
    cert: &ContractionCertificate,
    p: f64,
    x0: &DVector<f64>,
) -> Result<OpenLoopReport> {
    cfg.validate()?;
    if cfg.signal == InputSignal::ClosedLoop {
        return Err(Error::Config("open-loop experiment needs a fixed input signal".into()));
    }
    check_dim("initial state", model.state_dim(), x0.len())?;
    check_dim("certificate", model.state_dim(), cert.state_dim())?;
    check_dim("noise", model.noise_dim(), noise.dim())?;
    let schedule = PrsSchedule::new(cert, p)?;
    let len = cfg.steps + 1;
    let m = model.input_dim();
    let inputs: Vec<DVector<f64>> = (0..cfg.steps)
        .map(|k| DVector::from_element(m, cfg.signal.value(k, cfg.dt)))
        .collect();

    let per_block: Vec<OpenAcc> = blocks(cfg.realizations)
        .into_par_iter()
        .map(|range| {
            let mut acc = OpenAcc::new(len);
            for r in range {
                let mut rng = model::realization_rng(cfg.seed, r as u64);
                let mut x = x0.clone();
                let mut z = x0.clone();
                for k in 0..len {
                    let e = weighted_norm_sq(&(&x - &z), &cert.m);
                    acc.err[k].push(e);
                    acc.inside[k] += (e <= schedule.sigma(k)) as usize;
                    if k < cfg.steps {
                        let w = noise.sample(&mut rng);
                        x = model.nominal(&x, &inputs[k]) + model.noise_matrix() * w;
                        z = model.nominal(&z, &inputs[k]);
                    }
                }
            }
            acc
        })
        .collect();
    let total = per_block.iter().fold(OpenAcc::new(len), |a, b| a.merge(b));

    let rows = (0..len)
        .map(|k| {
            let (f, lo, hi) = wilson(total.inside[k], cfg.realizations);
            OpenLoopRow {
                k,
                mean_err_m2: total.err[k].mean,
                std_error: total.err[k].std_error(),
                bound: schedule.sigma(k) * (1.0 - p),
                containment: f,
                wilson_lo: lo,
                wilson_hi: hi,
            }
        })
        .collect();
    Ok(OpenLoopReport {
        realizations: cfg.realizations,
        p,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoopRow {
    pub k: usize,
    /// `None` at `k = T`, where no input is applied.
    pub mean_stage_cost: Option<f64>,
    pub p_in_x: f64,
    pub fallback_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopReport {
    pub realizations: usize,
    pub steps: usize,
    pub rows: Vec<ClosedLoopRow>,
    pub fallback_rate: f64,
    /// Steps with `z(k) ∉ X̄_k` beyond the trace tolerance.
    pub nominal_violations: usize,
    /// Steps where the shifted previous plan was infeasible for the new problem.
    pub candidate_failures: usize,
    /// Steps where the controller had neither a solution nor a fallback.
    pub hard_failures: usize,
}

impl ClosedLoopReport {
    pub fn min_p_in_x(&self) -> f64 {
        self.rows.iter().map(|r| r.p_in_x).fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# schema=1")?;
        writeln!(out, "k,mean_stage_cost,p_in_X,fallback_rate")?;
        for r in &self.rows {
            let cost = r.mean_stage_cost.map(|c| format!("{c:e}")).unwrap_or_default();
            writeln!(out, "{},{},{:e},{:e}", r.k, cost, r.p_in_x, r.fallback_rate)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ClosedAcc {
    cost: Vec<RunningStats>,
    in_x: Vec<usize>,
    fallback: Vec<usize>,
    nominal_violations: usize,
    candidate_failures: usize,
    hard_failures: usize,
}

impl ClosedAcc {
    fn new(steps: usize) -> Self {
        Self {
            cost: vec![RunningStats::default(); steps],
            in_x: vec![0; steps + 1],
            fallback: vec![0; steps],
            nominal_violations: 0,
            candidate_failures: 0,
            hard_failures: 0,
        }
    }

    fn merge(mut self, o: &ClosedAcc) -> Self {
        for (a, b) in self.cost.iter_mut().zip(&o.cost) {
            a.merge(b);
        }
        for (a, b) in self.in_x.iter_mut().zip(&o.in_x) {
            *a += b;
        }
        for (a, b) in self.fallback.iter_mut().zip(&o.fallback) {
            *a += b;
        }
        self.nominal_violations += o.nominal_violations;
        self.candidate_failures += o.candidate_failures;
        self.hard_failures += o.hard_failures;
        self
    }
}

/// Runs one controller per realization from `x0`; realization `r` draws its
/// noise from `realization_rng(seed, r)`.
pub fn closed_loop_experiment<F>(
    cfg: &ExperimentConfig,
    cons: &Constraints,
    noise: &NoiseModel,
    x0: &DVector<f64>,
    factory: F,
) -> Result<ClosedLoopReport>
where
    F: Fn() -> Result<SmpcController> + Sync,
{
    cfg.validate()?;
    let steps = cfg.steps;
    let per_block: Vec<Result<ClosedAcc>> = blocks(cfg.realizations)
        .into_par_iter()
        .map(|range| {
            let mut acc = ClosedAcc::new(steps);
            for r in range {
                let mut ctrl = factory()?;
                let mut rng = model::realization_rng(cfg.seed, r as u64);
                let trace = run_with_noise(&mut ctrl, cons, x0, steps, r as u64, |_| noise.sample(&mut rng))?;
                for k in 0..steps {
                    acc.cost[k].push(trace.stage_cost[k]);
                    acc.fallback[k] += trace.fallback[k] as usize;
                    acc.nominal_violations += !trace.z_in_tightened[k] as usize;
                    acc.candidate_failures += (trace.candidate_feasible[k] == Some(false)) as usize;
                    acc.hard_failures += (trace.status[k] != OcpStatus::Solved && !trace.fallback[k]) as usize;
                }
                for (k, inside) in trace.in_x.iter().enumerate() {
                    acc.in_x[k] += *inside as usize;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = ClosedAcc::new(steps);
    for b in per_block {
        total = total.merge(&b?);
    }
    let n = cfg.realizations as f64;
    let rows = (0..=steps)
        .map(|k| ClosedLoopRow {
            k,
            mean_stage_cost: (k < steps).then(|| total.cost[k].mean),
            p_in_x: total.in_x[k] as f64 / n,
            fallback_rate: if k < steps { total.fallback[k] as f64 / n } else { 0.0 },
        })
        .collect();
    Ok(ClosedLoopReport {
        realizations: cfg.realizations,
        steps,
        rows,
        fallback_rate: total.fallback.iter().sum::<usize>() as f64 / (n * steps as f64),
        nominal_violations: total.nominal_violations,
        candidate_failures: total.candidate_failures,
        hard_failures: total.hard_failures,
    })
}
