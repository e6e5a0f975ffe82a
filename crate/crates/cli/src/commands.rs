use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;

use smpc_core::mc::{binomial_slack, closed_loop_experiment, open_loop_experiment};
use smpc_core::metric::{design_metric, verify_certificate, ContractionCertificate, DesignProblem, SamplingBox};
use smpc_core::ocp::OcpProblem;
use smpc_core::prs::{terminal_ingredients, tighten, PrsSchedule};
use smpc_core::shrinking::{scalar_toy, validate_cost_monotonicity};
use smpc_core::smpc::{run_closed_loop, run_with_noise, SmpcController};
use smpc_core::Error;

use crate::config::ToolkitConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INPUT: u8 = 1;
pub const EXIT_NO_RHO: u8 = 2;
pub const EXIT_NOT_READY: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;
pub const EXIT_CONTROL: u8 = 5;

/// Shrinking-horizon toy: `x⁺ = 0.9 x + u + w`, `w = ±0.1`, `N = 3`, `r = 0.5`,
/// `p = 0.9`, from `x0 = 0.8`.
const TOY: (f64, f64, usize, f64, f64, f64) = (0.9, 0.1, 3, 0.5, 0.9, 0.8);

pub const CERTIFICATE: &str = "certificate.json";

pub struct Failure {
    pub code: u8,
    pub status: &'static str,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            status: "input_error",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, status) = match e {
            Error::NoFeasibleRho { .. } => (EXIT_NO_RHO, "no_feasible_rho"),
            Error::NotSmpcReady { .. } => (EXIT_NOT_READY, "not_smpc_ready"),
            Error::EmptyTightenedSet { .. } => (EXIT_NOT_READY, "empty_tightened_set"),
            Error::InitialInfeasibility => (EXIT_CONTROL, "initial_infeasibility"),
            Error::Infeasible(_) | Error::NotPositiveDefinite(_) => (EXIT_CONTROL, "numerical_failure"),
            Error::Dimension { .. }
            | Error::Config(_)
            | Error::UnboundedJacobian
            | Error::TreeTooLarge { .. }
            | Error::Io(_)
            | Error::Json(_) => (EXIT_INPUT, "input_error"),
        };
        Self {
            code,
            status,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

/// Outcome of a command that ran to completion; `code` is 0 or
/// [`EXIT_VERIFY`].
pub struct Report {
    pub code: u8,
    pub fields: Vec<(&'static str, String)>,
}

impl Report {
    fn new() -> Self {
        Self {
            code: EXIT_OK,
            fields: Vec::new(),
        }
    }

    fn field(&mut self, key: &'static str, value: impl ToString) {
        self.fields.push((key, value.to_string()));
    }

    fn check(&mut self, ok: bool, what: &str) {
        if !ok {
            eprintln!("check failed: {what}");
            self.code = EXIT_VERIFY;
        }
    }

    pub fn status(&self) -> &'static str {
        if self.code == EXIT_OK {
            "ok"
        } else {
            "verification_failed"
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub realizations: Option<usize>,
    pub fast: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ToolkitConfig) {
        let e = &mut cfg.experiment;
        if let Some(seed) = self.seed {
            e.seed = seed;
        }
        if self.fast {
            e.realizations = 100;
            e.closed_loop_realizations = 100;
            cfg.design.verify_samples = cfg.design.verify_samples.min(1000);
        }
        if let Some(n) = self.realizations {
            e.realizations = n;
            e.closed_loop_realizations = n;
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn load_certificate(path: &Path, cfg: &ToolkitConfig) -> Result<ContractionCertificate, Failure> {
    let cert = ContractionCertificate::load(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let n = 2 * cfg.model.n_masses;
    if cert.state_dim() != n || cert.sigma_w.nrows() != cfg.model.n_masses {
        return Err(Failure::input(format!(
            "{}: certificate dimensions do not match the configured chain",
            path.display()
        )));
    }
    Ok(cert)
}

/// `true` when `artifact` exists and is not older than `source`.
pub fn is_fresh(artifact: &Path, source: &Path) -> bool {
    let mtime = |p: &Path| std::fs::metadata(p).and_then(|m| m.modified()).ok();
    matches!((mtime(artifact), mtime(source)), (Some(a), Some(s)) if a >= s)
}

#[derive(Serialize)]
struct TerminalSummary {
    rho: f64,
    wbar: f64,
    p: f64,
    sigma_inf: f64,
    c_f: f64,
    alpha_f: f64,
    terminal_set_inside: Vec<(String, bool)>,
}

/// Tightening table and terminal ingredients of a certificate.
fn design_products(cfg: &ToolkitConfig, cert: &ContractionCertificate, out: &Path, report: &mut Report) -> Result<(), Failure> {
    if !cert.smpc_ready {
        return Err(Error::NotSmpcReady {
            trace_x: cert.wbar,
            limit: (1.0 - cert.rho) * (1.0 - cert.p),
        }
        .into());
    }
    let cons = cfg.constraints()?;
    let schedule = PrsSchedule::new(cert, cfg.design.p)?;
    let tc = tighten(&cons, cert, schedule)?;
    let term = terminal_ingredients(cert, &cfg.q(), &tc)?;
    let mut f = create(&out.join("tightening.csv"))?;
    tc.write_csv(&mut f, cfg.mpc.horizon)?;
    f.flush()?;
    let inside: Vec<(String, bool)> = [Some(0), Some(1), Some(10), None]
        .into_iter()
        .map(|k| {
            let key = k.map_or("inf".to_string(), |k| k.to_string());
            (key, term.inside_tightened(&tc, k))
        })
        .collect();
    let summary = TerminalSummary {
        rho: cert.rho,
        wbar: cert.wbar,
        p: cfg.design.p,
        sigma_inf: schedule.sigma_inf(),
        c_f: term.c_f,
        alpha_f: term.alpha_f,
        terminal_set_inside: inside,
    };
    let text = toml::to_string(&summary).map_err(|e| Failure::input(e.to_string()))?;
    std::fs::write(out.join("terminal.toml"), text)?;
    report.field("c_f", format!("{:.6e}", term.c_f));
    report.field("alpha_f", format!("{:.6e}", term.alpha_f));
    Ok(())
}

fn run_design(cfg: &ToolkitConfig, out: &Path, sdp_trace: bool, report: &mut Report) -> Result<ContractionCertificate, Failure> {
    let chain = cfg.chain()?;
    let cons = cfg.constraints()?;
    let sigma = cfg.sigma_w();
    let search = cfg.rho_search();
    let t = Instant::now();
    let res = design_metric(&chain, &cons, &sigma, cfg.design.p, &search)?;
    eprintln!(
        "design: {} SDPs in {:.1} s",
        res.candidates.len(),
        t.elapsed().as_secs_f64()
    );
    let cert = res.certificate;
    cert.save(&out.join(CERTIFICATE))?;
    let mut f = create(&out.join("rho_candidates.csv"))?;
    writeln!(f, "# schema=1")?;
    writeln!(f, "rho,status,trace_x,objective")?;
    for c in &res.candidates {
        writeln!(f, "{:.12},{:?},{:e},{:e}", c.rho, c.status, c.trace_x, c.objective)?;
    }
    f.flush()?;
    if sdp_trace {
        let dp = DesignProblem::new(&chain, &cons, &sigma)?;
        let mut opts = search.sdp_options();
        opts.record_trace = true;
        let sol = dp.solve_sdp_at(cert.rho, &opts)?;
        let mut f = create(&out.join("sdp_trace.csv"))?;
        sol.write_trace_csv(&mut f)?;
        f.flush()?;
    }
    report.field("rho", format!("{:.8}", cert.rho));
    report.field("wbar", format!("{:.6e}", cert.wbar));
    report.field("smpc_ready", cert.smpc_ready);
    Ok(cert)
}

pub fn design(cfg: &ToolkitConfig, out: &Path, sdp_trace: bool) -> Result<Report, Failure> {
    std::fs::create_dir_all(out)?;
    let mut report = Report::new();
    let cert = run_design(cfg, out, sdp_trace, &mut report)?;
    design_products(cfg, &cert, out, &mut report)?;
    report.field("certificate", out.join(CERTIFICATE).display());
    Ok(report)
}

fn run_validation(cfg: &ToolkitConfig, cert: &ContractionCertificate, out: &Path, report: &mut Report) -> Result<(), Failure> {
    let chain = cfg.chain()?;
    let cons = cfg.constraints()?;
    let n = cfg.model.n_masses;
    report.check((cert.p - cfg.design.p).abs() <= 1e-12, "certificate p matches the config");
    report.check(
        (&cert.sigma_w - cfg.sigma_w()).amax() <= 1e-12 * cfg.sigma_w().amax(),
        "certificate noise covariance matches the config",
    );
    let vr = verify_certificate(
        cert,
        &chain,
        &SamplingBox::chain(n, &cons),
        cfg.design.verify_samples,
        cfg.experiment.seed,
    )?;
    let text = toml::to_string(&vr).map_err(|e| Failure::input(e.to_string()))?;
    std::fs::write(out.join("verification.toml"), text)?;
    eprintln!(
        "verification: vertex {:.3e}, sampled {:.3e}, trace {:.3e}, inverse {:.3e}, misses {}",
        vr.vertex_residual, vr.sample_residual, vr.trace_residual, vr.inverse_residual, vr.embedding_misses
    );
    report.check(vr.passed(), "certificate residuals within tolerance");
    report.check(vr.smpc_ready, "certificate is smpc-ready");
    report.field("vertex_residual", format!("{:.3e}", vr.vertex_residual));
    report.field("sample_residual", format!("{:.3e}", vr.sample_residual));

    let x0 = DVector::zeros(2 * n);
    let (mut bound_viol, mut cont_viol, mut min_cont) = (0, 0, f64::INFINITY);
    for signal in cfg.signals() {
        for (name, noise) in cfg.validation_noises()? {
            let t = Instant::now();
            let rep = open_loop_experiment(&cfg.open_loop(signal), &chain, &noise, cert, cfg.design.p, &x0)?;
            let path = out.join(format!("open_loop_{}_{name}.csv", signal.name()));
            let mut f = create(&path)?;
            rep.write_csv(&mut f)?;
            f.flush()?;
            let (b, c) = (rep.bound_violations(), rep.containment_violations());
            let mc = rep.rows.iter().map(|r| r.containment).fold(f64::INFINITY, f64::min);
            eprintln!(
                "open loop {} {name}: {} bound and {} containment violations, min containment {mc:.4} ({:.1} s)",
                signal.name(),
                b.len(),
                c.len(),
                t.elapsed().as_secs_f64()
            );
            bound_viol += b.len();
            cont_viol += c.len();
            min_cont = min_cont.min(mc);
        }
    }
    report.check(bound_viol == 0, "expected-error bound at every step");
    report.check(cont_viol == 0, "PRS containment at every step");
    report.field("bound_violations", bound_viol);
    report.field("containment_violations", cont_viol);
    report.field("min_containment", format!("{min_cont:.4}"));
    report.field("realizations", cfg.experiment.realizations);
    Ok(())
}

pub fn validate(cfg: &ToolkitConfig, cert_path: &Path, out: &Path) -> Result<Report, Failure> {
    let cert = load_certificate(cert_path, cfg)?;
    std::fs::create_dir_all(out)?;
    let mut report = Report::new();
    run_validation(cfg, &cert, out, &mut report)?;
    Ok(report)
}

fn ocp_problem(cfg: &ToolkitConfig, cert: &ContractionCertificate) -> Result<OcpProblem, Failure> {
    if !cert.smpc_ready {
        return Err(Error::NotSmpcReady {
            trace_x: cert.wbar,
            limit: (1.0 - cert.rho) * (1.0 - cert.p),
        }
        .into());
    }
    Ok(OcpProblem::from_certificate(
        std::sync::Arc::new(cfg.chain()?),
        &cfg.constraints()?,
        cert,
        cfg.design.p,
        cfg.q(),
        cfg.r(),
        cfg.mpc.horizon,
        cfg.sqp(),
    )?)
}

pub fn simulate(cfg: &ToolkitConfig, cert_path: &Path, out: &Path, zero_noise: bool) -> Result<Report, Failure> {
    let cert = load_certificate(cert_path, cfg)?;
    let prob = ocp_problem(cfg, &cert)?;
    std::fs::create_dir_all(out)?;
    let cons = cfg.constraints()?;
    let x0 = cfg.initial_state();
    let mut ctrl = SmpcController::new(prob, &x0)?;
    let (steps, seed) = (cfg.mpc.steps, cfg.experiment.seed);
    let t = Instant::now();
    let trace = if zero_noise {
        let w = DVector::zeros(cfg.model.n_masses);
        run_with_noise(&mut ctrl, &cons, &x0, steps, seed, |_| w.clone())?
    } else {
        run_closed_loop(&mut ctrl, &cons, &cfg.noise()?, &x0, steps, seed)?
    };
    eprintln!("simulate: {steps} steps in {:.2} s", t.elapsed().as_secs_f64());
    let path = out.join("trace.csv");
    let mut f = create(&path)?;
    trace.write_csv(&mut f)?;
    f.flush()?;
    let mut report = Report::new();
    let nominal_ok = trace.z_in_tightened.iter().all(|b| *b);
    report.check(nominal_ok, "nominal state inside the tightened set");
    report.field("steps", steps);
    report.field("fallbacks", trace.fallback_count());
    report.field("stage_cost_first", format!("{:.6e}", trace.stage_cost[0]));
    report.field("stage_cost_last", format!("{:.6e}", trace.stage_cost[steps - 1]));
    report.field("x_in_X", trace.in_x.iter().filter(|b| **b).count());
    report.field("trace", path.display());
    Ok(report)
}

fn run_closed_loop_experiment(cfg: &ToolkitConfig, cert: &ContractionCertificate, out: &Path, report: &mut Report) -> Result<(), Failure> {
    let prob = ocp_problem(cfg, cert)?;
    let cons = cfg.constraints()?;
    let noise = cfg.noise()?;
    let x0 = cfg.initial_state();
    let ecfg = cfg.closed_loop();

    let mut ctrl = SmpcController::new(prob.clone(), &x0)?;
    let trace = run_closed_loop(&mut ctrl, &cons, &noise, &x0, ecfg.steps, ecfg.seed)?;
    let mut f = create(&out.join("trace.csv"))?;
    trace.write_csv(&mut f)?;
    f.flush()?;

    let t = Instant::now();
    let rep = closed_loop_experiment(&ecfg, &cons, &noise, &x0, || SmpcController::new(prob.clone(), &x0))?;
    let mut f = create(&out.join("closed_loop.csv"))?;
    rep.write_csv(&mut f)?;
    f.flush()?;
    let first = rep.rows[0].mean_stage_cost.unwrap_or(f64::NAN);
    let last = rep.rows[ecfg.steps - 1].mean_stage_cost.unwrap_or(f64::NAN);
    let ratio = last / first;
    let p = cfg.design.p;
    let floor = p - binomial_slack(p, ecfg.realizations);
    eprintln!(
        "closed loop: {} realizations in {:.1} s, fallback rate {:.2e}, min P(x in X) {:.4}, cost ratio {ratio:.3e}",
        ecfg.realizations,
        t.elapsed().as_secs_f64(),
        rep.fallback_rate,
        rep.min_p_in_x()
    );
    report.check(rep.hard_failures == 0, "no hard controller failures");
    report.check(rep.fallback_rate <= 0.01, "fallback rate at most 1%");
    report.check(rep.nominal_violations == 0, "nominal state inside the tightened set");
    report.check(rep.min_p_in_x() >= floor, "P(x in X) above p minus 3 sigma");
    report.check(ratio <= 0.05, "final mean stage cost at most 5% of the initial one");
    report.field("fallback_rate", format!("{:.3e}", rep.fallback_rate));
    report.field("min_p_in_x", format!("{:.4}", rep.min_p_in_x()));
    report.field("cost_ratio", format!("{ratio:.3e}"));
    Ok(())
}

fn run_shrinking(out: &Path, report: &mut Report) -> Result<(), Failure> {
    let (a, sigma, n, r, p, x0) = TOY;
    let prob = scalar_toy(a, sigma, n, r, p)?;
    let rep = validate_cost_monotonicity(&prob, &DVector::from_element(1, x0), p)?;
    let mut f = create(&out.join("shrinking.csv"))?;
    rep.write_csv(&mut f)?;
    f.flush()?;
    report.check(rep.bound_holds(1e-6), "shrinking-horizon expected cost bound");
    report.check(rep.chance_constraints_hold(), "shrinking-horizon chance constraints");
    report.field("shrinking_gap", format!("{:.3e}", rep.expected_open - rep.expected_closed));
    Ok(())
}

pub fn reproduce(cfg: &ToolkitConfig, cfg_path: &Path, out: &Path, sdp_trace: bool) -> Result<Report, Failure> {
    std::fs::create_dir_all(out)?;
    let mut report = Report::new();
    let cert_path: PathBuf = out.join(CERTIFICATE);
    let cached = if is_fresh(&cert_path, cfg_path) {
        load_certificate(&cert_path, cfg).ok()
    } else {
        None
    };
    let cert = match cached {
        Some(c) => {
            eprintln!("design: reusing {}", cert_path.display());
            report.field("design", "cached");
            report.field("rho", format!("{:.8}", c.rho));
            report.field("wbar", format!("{:.6e}", c.wbar));
            c
        }
        None => {
            report.field("design", "fresh");
            run_design(cfg, out, sdp_trace, &mut report)?
        }
    };
    design_products(cfg, &cert, out, &mut report)?;
    run_validation(cfg, &cert, out, &mut report)?;
    run_closed_loop_experiment(cfg, &cert, out, &mut report)?;
    run_shrinking(out, &mut report)?;
    Ok(report)
}
