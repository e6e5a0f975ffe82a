//! Probabilistic reachable sets, constraint tightening and terminal
//! ingredients for a constant metric.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{max_generalized_eigenvalue, symmetrize, weighted_norm_sq};
use crate::metric::ContractionCertificate;
use crate::model::Constraints;

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("probability level {p} outside (0, 1)")))
    }
}

/// Radii `σ_k = (1 − ρᵏ)/(1 − ρ) · w̄/(1 − p)` of the sets `{‖x − z‖²_M ≤ σ_k}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrsSchedule {
    pub rho: f64,
    pub wbar: f64,
    pub p: f64,
}

impl PrsSchedule {
    pub fn new(cert: &ContractionCertificate, p: f64) -> Result<Self> {
        check_p(p)?;
        Ok(Self {
            rho: cert.rho,
            wbar: cert.wbar,
            p,
        })
    }

    pub fn sigma(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        // 1 − ρᵏ without cancellation for ρ close to 1
        let geometric = if self.rho > 0.0 {
            -(k as f64 * self.rho.ln()).exp_m1()
        } else {
            1.0
        };
        (geometric / (1.0 - self.rho) * self.wbar / (1.0 - self.p)).min(self.sigma_inf())
    }

    pub fn sigma_inf(&self) -> f64 {
        self.wbar / ((1.0 - self.rho) * (1.0 - self.p))
    }

    /// `σ_k` for `Some(k)`, `σ_∞` for `None`.
    pub fn sigma_at(&self, k: Option<usize>) -> f64 {
        k.map_or(self.sigma_inf(), |k| self.sigma(k))
    }
}

pub fn prs_radius(cert: &ContractionCertificate, p: f64, k: usize) -> Result<f64> {
    Ok(PrsSchedule::new(cert, p)?.sigma(k))
}

pub fn prs_membership(x: &DVector<f64>, z: &DVector<f64>, cert: &ContractionCertificate, p: f64, k: usize) -> Result<bool> {
    check_dim("state", cert.state_dim(), x.len())?;
    check_dim("nominal state", cert.state_dim(), z.len())?;
    Ok(weighted_norm_sq(&(x - z), &cert.m) <= prs_radius(cert, p, k)?)
}

/// `‖M^{-1/2} h‖ = ‖L⁻¹ h‖` with `M = L Lᵀ`.
pub fn tightening_coefficient(h: &DVector<f64>, m: &DMatrix<f64>) -> Result<f64> {
    let chol = symmetrize(m).cholesky().ok_or(Error::NotPositiveDefinite("metric"))?;
    let y = chol
        .l()
        .solve_lower_triangular(h)
        .ok_or(Error::NotPositiveDefinite("metric"))?;
    Ok(y.norm())
}

/// `X̄_k = {z | h_jᵀ z ≤ 1 − c_j √σ_k}`.
#[derive(Debug, Clone)]
pub struct TightenedConstraints {
    pub rows: Vec<DVector<f64>>,
    pub coefficients: Vec<f64>,
    pub schedule: PrsSchedule,
}

impl TightenedConstraints {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Margin `b_{j,k}`; `k = None` gives the asymptotic margin.
    pub fn margin(&self, j: usize, k: Option<usize>) -> f64 {
        1.0 - self.coefficients[j] * self.schedule.sigma_at(k).max(0.0).sqrt()
    }

    pub fn margins(&self, k: Option<usize>) -> DVector<f64> {
        DVector::from_iterator(self.n_rows(), (0..self.n_rows()).map(|j| self.margin(j, k)))
    }

    pub fn contains(&self, z: &DVector<f64>, k: usize, tol: f64) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(j, h)| h.dot(z) <= self.margin(j, Some(k)) + tol)
    }

    pub fn write_csv<W: Write>(&self, mut out: W, horizon: usize) -> std::io::Result<()> {
        writeln!(out, "# schema=1")?;
        write!(out, "k,sigma_xk")?;
        for j in 0..self.n_rows() {
            write!(out, ",b_{j}")?;
        }
        writeln!(out)?;
        for k in 0..=horizon {
            write!(out, "{k},{:e}", self.schedule.sigma(k))?;
            for j in 0..self.n_rows() {
                write!(out, ",{:e}", self.margin(j, Some(k)))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

pub fn tighten(cons: &Constraints, cert: &ContractionCertificate, schedule: PrsSchedule) -> Result<TightenedConstraints> {
    if cons.n_rows() > 0 {
        check_dim("constraint rows", cert.state_dim(), cons.state_dim())?;
    }
    let coefficients = cons
        .rows
        .iter()
        .map(|h| tightening_coefficient(h, &cert.m))
        .collect::<Result<Vec<_>>>()?;
    let tc = TightenedConstraints {
        rows: cons.rows.clone(),
        coefficients,
        schedule,
    };
    // margins are non-increasing in k, so the asymptotic one decides
    for j in 0..tc.n_rows() {
        let inf = tc.margin(j, None);
        if inf <= 0.0 {
            let step = (0..1_000_000)
                .find(|&k| tc.margin(j, Some(k)) <= 0.0)
                .unwrap_or(usize::MAX);
            let margin = if step == usize::MAX { inf } else { tc.margin(j, Some(step)) };
            return Err(Error::EmptyTightenedSet { row: j, step, margin });
        }
    }
    Ok(tc)
}

/// Terminal cost `‖z‖²_P`, `P = c_f M`, and terminal set `{‖z‖²_M ≤ α_f}`.
#[derive(Debug, Clone)]
pub struct TerminalIngredients {
    pub c_f: f64,
    pub p: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub alpha_f: f64,
}

impl TerminalIngredients {
    pub fn cost(&self, z: &DVector<f64>) -> f64 {
        weighted_norm_sq(z, &self.p)
    }

    pub fn level(&self, z: &DVector<f64>) -> f64 {
        weighted_norm_sq(z, &self.m)
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        self.level(z) <= self.alpha_f + tol
    }

    /// `max{hᵀz | ‖z‖²_M ≤ α_f} ≤ b_{j,k}` for every row.
    pub fn inside_tightened(&self, tc: &TightenedConstraints, k: Option<usize>) -> bool {
        (0..tc.n_rows()).all(|j| self.alpha_f.sqrt() * tc.coefficients[j] <= tc.margin(j, k) + 1e-12)
    }
}

pub fn terminal_ingredients(
    cert: &ContractionCertificate,
    q: &DMatrix<f64>,
    tc: &TightenedConstraints,
) -> Result<TerminalIngredients> {
    check_dim("state weight", cert.state_dim(), q.nrows())?;
    let c_f = max_generalized_eigenvalue(q, &cert.m)? / (1.0 - cert.rho);
    let mut alpha_f = f64::INFINITY;
    for j in 0..tc.n_rows() {
        let b = tc.margin(j, None);
        if b <= 0.0 {
            return Err(Error::EmptyTightenedSet {
                row: j,
                step: usize::MAX,
                margin: b,
            });
        }
        let c = tc.coefficients[j];
        if c > 0.0 {
            alpha_f = alpha_f.min((b / c).powi(2));
        }
    }
    Ok(TerminalIngredients {
        c_f,
        p: &cert.m * c_f,
        m: cert.m.clone(),
        alpha_f,
    })
}
