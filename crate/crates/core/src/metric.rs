//! Constant contraction metric design.
//!
//! The state Jacobian is embedded in the convex hull of finitely many vertex
//! matrices. For a fixed rate `ρ` the metric `M = W⁻¹` and noise bound
//! `w̄ = tr X` come out of one SDP; `ρ` itself is chosen by a coarse grid and
//! golden-section refinement.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{max_eigenvalue, psd_sqrt, spd_inverse, symmetrize};
use crate::model::{realization_rng, Constraints, SystemModel};
use crate::sdp::{solve_sdp, SdpOptions, SdpProblem, SdpSolution, SdpStatus};

/// Lower bound `W ⪰ ε I` keeping the metric finite.
pub const EPS_PD: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct JacobianEmbedding {
    pub base: DMatrix<f64>,
    pub directions: Vec<DMatrix<f64>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Corners of the parameter box, one `θ` per vertex.
    pub vertices: Vec<DVector<f64>>,
}

impl JacobianEmbedding {
    pub fn n_params(&self) -> usize {
        self.directions.len()
    }

    pub fn reconstruct(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut a = self.base.clone();
        for (d, t) in self.directions.iter().zip(theta.iter()) {
            a += d * *t;
        }
        a
    }

    pub fn vertex_matrices(&self) -> Vec<DMatrix<f64>> {
        self.vertices.iter().map(|v| self.reconstruct(v)).collect()
    }

    pub fn contains(&self, theta: &DVector<f64>, tol: f64) -> bool {
        theta.len() == self.n_params()
            && theta
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(t, (lo, hi))| *t >= lo - tol && *t <= hi + tol)
    }
}

pub fn build_embedding(model: &dyn SystemModel) -> Result<JacobianEmbedding> {
    let s = model.jacobian_structure().ok_or(Error::UnboundedJacobian)?;
    let n = model.state_dim();
    check_dim("embedding base rows", n, s.base.nrows())?;
    check_dim("embedding base columns", n, s.base.ncols())?;
    let k = s.directions.len();
    check_dim("embedding lower bounds", k, s.lower.len())?;
    check_dim("embedding upper bounds", k, s.upper.len())?;
    for d in &s.directions {
        check_dim("embedding direction rows", n, d.nrows())?;
        check_dim("embedding direction columns", n, d.ncols())?;
    }
    if s.lower.iter().chain(s.upper.iter()).any(|v| !v.is_finite())
        || s.lower.iter().zip(&s.upper).any(|(lo, hi)| lo > hi)
    {
        return Err(Error::UnboundedJacobian);
    }
    if k > 16 {
        return Err(Error::Config(format!("{k} embedding parameters give too many vertices")));
    }
    let vertices = (0..1usize << k)
        .map(|mask| {
            DVector::from_iterator(
                k,
                (0..k).map(|i| if mask >> i & 1 == 1 { s.upper[i] } else { s.lower[i] }),
            )
        })
        .collect();
    Ok(JacobianEmbedding {
        base: s.base,
        directions: s.directions,
        lower: s.lower,
        upper: s.upper,
        vertices,
    })
}

/// Packing of the symmetric unknowns `W` (n×n) and `X` (q×q) into one vector.
#[derive(Debug, Clone, Copy)]
pub struct DesignVars {
    pub n: usize,
    pub q: usize,
}

impl DesignVars {
    fn tri(k: usize) -> usize {
        k * (k + 1) / 2
    }

    pub fn len(&self) -> usize {
        Self::tri(self.n) + Self::tri(self.q)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn unpack_sym(y: &[f64], k: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(k, k);
        let mut idx = 0;
        for i in 0..k {
            for j in i..k {
                m[(i, j)] = y[idx];
                m[(j, i)] = y[idx];
                idx += 1;
            }
        }
        m
    }

    pub fn unpack(&self, y: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let nw = Self::tri(self.n);
        (
            Self::unpack_sym(&y.as_slice()[..nw], self.n),
            Self::unpack_sym(&y.as_slice()[nw..], self.q),
        )
    }

    fn unit(&self, v: usize) -> DVector<f64> {
        let mut y = DVector::zeros(self.len());
        y[v] = 1.0;
        y
    }
}

/// Builds an LMI block from an affine map of `(W, X)` by probing it with the
/// zero point and every basis element.
fn affine_block<F>(prob: &mut SdpProblem, vars: DesignVars, f: F) -> Result<()>
where
    F: Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
{
    let zero = DVector::zeros(vars.len());
    let (w0, x0) = vars.unpack(&zero);
    let constant = symmetrize(&f(&w0, &x0));
    let mut terms = Vec::new();
    for v in 0..vars.len() {
        let (w, x) = vars.unpack(&vars.unit(v));
        let coeff = symmetrize(&(f(&w, &x) - &constant));
        if coeff.amax() > 0.0 {
            terms.push((v, coeff));
        }
    }
    prob.add_block(constant, terms)
}

fn stack2(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let (r1, c1) = a.shape();
    let (r2, c2) = d.shape();
    let mut m = DMatrix::zeros(r1 + r2, c1 + c2);
    m.view_mut((0, 0), (r1, c1)).copy_from(a);
    m.view_mut((0, c1), (r1, c2)).copy_from(b);
    m.view_mut((r1, 0), (r2, c1)).copy_from(c);
    m.view_mut((r1, c1), (r2, c2)).copy_from(d);
    m
}

/// SDP in `(W, X)` for a fixed `ρ`. The objective is `tr X / objective_scale`.
pub fn assemble_lmis(
    emb: &JacobianEmbedding,
    rho: f64,
    cons: &Constraints,
    sigma_w: &DMatrix<f64>,
    g: &DMatrix<f64>,
    objective_scale: f64,
) -> Result<(SdpProblem, DesignVars)> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("contraction rate {rho} outside [0, 1)")));
    }
    let n = emb.base.nrows();
    let q = g.ncols();
    check_dim("noise matrix rows", n, g.nrows())?;
    check_dim("noise covariance", q, sigma_w.nrows())?;
    if cons.n_rows() > 0 {
        check_dim("constraint rows", n, cons.state_dim())?;
    }
    let vars = DesignVars { n, q };
    let mut c = DVector::zeros(vars.len());
    let nw = DesignVars::tri(n);
    let mut idx = nw;
    for i in 0..q {
        c[idx] = 1.0 / objective_scale;
        idx += q - i;
    }
    let mut prob = SdpProblem::new(c);

    for h in &cons.rows {
        let h = DMatrix::from_column_slice(n, 1, h.as_slice());
        affine_block(&mut prob, vars, move |w, _| {
            let wh = w * &h;
            stack2(w, &wh, &wh.transpose(), &DMatrix::from_element(1, 1, 1.0))
        })?;
    }
    for a in emb.vertex_matrices() {
        affine_block(&mut prob, vars, move |w, _| {
            let aw = &a * w;
            stack2(&(w * rho), &aw.transpose(), &aw, w)
        })?;
    }
    let gs = g * psd_sqrt(sigma_w);
    affine_block(&mut prob, vars, move |w, x| stack2(x, &gs.transpose(), &gs, w))?;
    affine_block(&mut prob, vars, |w, _| w - DMatrix::identity(n, n) * EPS_PD)?;
    Ok((prob, vars))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RhoSearch {
    pub rho_min: f64,
    pub rho_max: f64,
    pub grid_points: usize,
    pub tol_rho: f64,
    pub tol_psd: f64,
    pub tol_obj: f64,
    pub max_iter: usize,
}

impl Default for RhoSearch {
    fn default() -> Self {
        Self {
            rho_min: 0.5,
            rho_max: 0.9999,
            grid_points: 25,
            tol_rho: 1e-4,
            tol_psd: 1e-8,
            tol_obj: 1e-7,
            max_iter: 200,
        }
    }
}

impl RhoSearch {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.rho_min && self.rho_min < self.rho_max && self.rho_max < 1.0) {
            return Err(Error::Config("rho search needs 0 <= rho_min < rho_max < 1".into()));
        }
        if self.grid_points < 2 || !(self.tol_rho > 0.0) {
            return Err(Error::Config("rho search needs >= 2 grid points and tol_rho > 0".into()));
        }
        Ok(())
    }

    /// Grid points log-spaced in `1 - ρ`, so they cluster near `ρ = 1`.
    pub fn grid(&self) -> Vec<f64> {
        let (a, b) = ((1.0 - self.rho_min).ln(), (1.0 - self.rho_max).ln());
        let last = (self.grid_points - 1) as f64;
        (0..self.grid_points)
            .map(|i| 1.0 - (a + (b - a) * i as f64 / last).exp())
            .collect()
    }

    pub fn sdp_options(&self) -> SdpOptions {
        SdpOptions {
            tol_psd: self.tol_psd,
            tol_obj: self.tol_obj,
            max_iter: self.max_iter,
            ..SdpOptions::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContractionCertificate {
    pub m: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub rho: f64,
    pub wbar: f64,
    pub x: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,
    pub p: f64,
    pub smpc_ready: bool,
    /// `tr X / (1 - ρ)`.
    pub objective: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateFile {
    n: usize,
    q: usize,
    #[serde(rename = "M")]
    m: Vec<f64>,
    #[serde(rename = "W")]
    w: Vec<f64>,
    rho: f64,
    wbar: f64,
    #[serde(rename = "X")]
    x: Vec<f64>,
    sigma_w: Vec<f64>,
    p: f64,
    smpc_ready: bool,
    objective: f64,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(k: usize, v: &[f64], what: &'static str) -> Result<DMatrix<f64>> {
    check_dim(what, k * k, v.len())?;
    Ok(DMatrix::from_row_slice(k, k, v))
}

impl ContractionCertificate {
    /// Completes a certificate from a design point.
    pub fn from_parts(w: DMatrix<f64>, x: DMatrix<f64>, rho: f64, sigma_w: DMatrix<f64>, p: f64) -> Result<Self> {
        let w = symmetrize(&w);
        let m = spd_inverse(&w)?;
        let wbar = x.trace();
        Ok(Self {
            m,
            w,
            rho,
            wbar,
            x,
            sigma_w,
            p,
            smpc_ready: wbar <= (1.0 - rho) * (1.0 - p),
            objective: wbar / (1.0 - rho),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn to_json(&self) -> Result<String> {
        let f = CertificateFile {
            n: self.m.nrows(),
            q: self.x.nrows(),
            m: row_major(&self.m),
            w: row_major(&self.w),
            rho: self.rho,
            wbar: self.wbar,
            x: row_major(&self.x),
            sigma_w: row_major(&self.sigma_w),
            p: self.p,
            smpc_ready: self.smpc_ready,
            objective: self.objective,
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CertificateFile = serde_json::from_str(s)?;
        Ok(Self {
            m: from_row_major(f.n, &f.m, "certificate M")?,
            w: from_row_major(f.n, &f.w, "certificate W")?,
            rho: f.rho,
            wbar: f.wbar,
            x: from_row_major(f.q, &f.x, "certificate X")?,
            sigma_w: from_row_major(f.q, &f.sigma_w, "certificate sigma_w")?,
            p: f.p,
            smpc_ready: f.smpc_ready,
            objective: f.objective,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Outcome of one fixed-`ρ` SDP.
#[derive(Debug, Clone)]
pub struct RhoCandidate {
    pub rho: f64,
    pub status: SdpStatus,
    pub trace_x: f64,
    pub objective: f64,
    w: Option<DMatrix<f64>>,
    x: Option<DMatrix<f64>>,
}

pub struct DesignProblem<'a> {
    pub embedding: JacobianEmbedding,
    pub constraints: &'a Constraints,
    pub sigma_w: DMatrix<f64>,
    pub g: DMatrix<f64>,
    /// `tr(Σ_w GᵀG)`, the optimal `tr X` for `W = I`; keeps SDP tolerances relative.
    pub scale: f64,
}

impl<'a> DesignProblem<'a> {
    pub fn new(model: &dyn SystemModel, constraints: &'a Constraints, sigma_w: &DMatrix<f64>) -> Result<Self> {
        let g = model.noise_matrix().clone();
        check_dim("noise covariance rows", g.ncols(), sigma_w.nrows())?;
        check_dim("noise covariance columns", g.ncols(), sigma_w.ncols())?;
        let scale = (sigma_w * g.transpose() * &g).trace();
        Ok(Self {
            embedding: build_embedding(model)?,
            constraints,
            sigma_w: sigma_w.clone(),
            g,
            scale: if scale > 0.0 { scale } else { 1.0 },
        })
    }

    /// Raw SDP solution at a fixed `ρ`, for iterate dumps.
    pub fn solve_sdp_at(&self, rho: f64, opts: &SdpOptions) -> Result<SdpSolution> {
        let (prob, _) = assemble_lmis(&self.embedding, rho, self.constraints, &self.sigma_w, &self.g, self.scale)?;
        Ok(solve_sdp(&prob, opts))
    }

    pub fn solve_at(&self, rho: f64, opts: &SdpOptions) -> Result<RhoCandidate> {
        let (prob, vars) = assemble_lmis(&self.embedding, rho, self.constraints, &self.sigma_w, &self.g, self.scale)?;
        let sol = solve_sdp(&prob, opts);
        if sol.status != SdpStatus::Optimal {
            return Ok(RhoCandidate {
                rho,
                status: sol.status,
                trace_x: f64::INFINITY,
                objective: f64::INFINITY,
                w: None,
                x: None,
            });
        }
        let (w, x) = vars.unpack(&sol.y);
        let trace_x = x.trace();
        Ok(RhoCandidate {
            rho,
            status: sol.status,
            trace_x,
            objective: trace_x / (1.0 - rho),
            w: Some(w),
            x: Some(x),
        })
    }
}

#[derive(Debug, Clone)]
pub struct DesignResult {
    pub certificate: ContractionCertificate,
    /// Every evaluated `ρ`, grid first, then refinement steps.
    pub candidates: Vec<RhoCandidate>,
}

pub fn design_metric(
    model: &dyn SystemModel,
    cons: &Constraints,
    sigma_w: &DMatrix<f64>,
    p: f64,
    search: &RhoSearch,
) -> Result<DesignResult> {
    search.validate()?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("probability level {p} outside (0, 1)")));
    }
    let dp = DesignProblem::new(model, cons, sigma_w)?;
    let opts = search.sdp_options();
    let grid = search.grid();
    let mut candidates = grid
        .par_iter()
        .map(|&rho| dp.solve_at(rho, &opts))
        .collect::<Result<Vec<_>>>()?;

    let best_idx = candidates
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective))
        .map(|(i, _)| i)
        .expect("grid is non-empty");
    if !candidates[best_idx].objective.is_finite() {
        return Err(Error::NoFeasibleRho {
            lo: search.rho_min,
            hi: search.rho_max,
        });
    }

    // golden section on the bracket around the best grid point
    let mut lo = grid[best_idx.saturating_sub(1)];
    let mut hi = grid[(best_idx + 1).min(grid.len() - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let mut fa = dp.solve_at(a, &opts)?;
    let mut fb = dp.solve_at(b, &opts)?;
    while hi - lo > search.tol_rho {
        if fa.objective <= fb.objective {
            hi = b;
            b = a;
            candidates.push(fb);
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = dp.solve_at(a, &opts)?;
        } else {
            lo = a;
            a = b;
            candidates.push(fa);
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = dp.solve_at(b, &opts)?;
        }
    }
    candidates.push(fa);
    candidates.push(fb);

    let best = candidates
        .iter()
        .filter(|c| c.w.is_some())
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .expect("a feasible candidate exists");
    let certificate = ContractionCertificate::from_parts(
        best.w.clone().expect("feasible"),
        best.x.clone().expect("feasible"),
        best.rho,
        sigma_w.clone(),
        p,
    )?;
    Ok(DesignResult {
        certificate,
        candidates,
    })
}

/// Sampling domain for certificate verification.
#[derive(Debug, Clone)]
pub struct SamplingBox {
    pub state_lower: DVector<f64>,
    pub state_upper: DVector<f64>,
    pub input_lower: DVector<f64>,
    pub input_upper: DVector<f64>,
}

impl SamplingBox {
    /// Positions in `[-10, 10]`, velocities in `[-5, 5]`, inputs from `U`.
    pub fn chain(n_masses: usize, cons: &Constraints) -> Self {
        let mut lo = DVector::from_element(2 * n_masses, -10.0);
        let mut hi = DVector::from_element(2 * n_masses, 10.0);
        for i in n_masses..2 * n_masses {
            lo[i] = -5.0;
            hi[i] = 5.0;
        }
        Self {
            state_lower: lo,
            state_upper: hi,
            input_lower: cons.u_min.clone(),
            input_upper: cons.u_max.clone(),
        }
    }

    fn sample<R: Rng + ?Sized>(lo: &DVector<f64>, hi: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(lo.len(), lo.iter().zip(hi.iter()).map(|(l, h)| rng.random_range(*l..=*h)))
    }

    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        Self::sample(&self.state_lower, &self.state_upper, rng)
    }

    pub fn sample_input<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        Self::sample(&self.input_lower, &self.input_upper, rng)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    /// Max of `λ_max(AᵀMA − ρM)` over the embedding vertices.
    pub vertex_residual: f64,
    /// Same quantity over sampled `(x, u)`.
    pub sample_residual: f64,
    /// `tr(Σ_w Gᵀ M G) − w̄`.
    pub trace_residual: f64,
    /// `max |M W − I|`.
    pub inverse_residual: f64,
    /// Embedding parameters found outside their box.
    pub embedding_misses: usize,
    pub smpc_ready: bool,
    pub n_samples: usize,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.vertex_residual <= 1e-8
            && self.sample_residual <= 1e-8
            && self.trace_residual <= 1e-9
            && self.inverse_residual <= 1e-8
            && self.embedding_misses == 0
    }
}

pub fn contraction_residual(cert: &ContractionCertificate, a: &DMatrix<f64>) -> f64 {
    max_eigenvalue(&(a.transpose() * &cert.m * a - &cert.m * cert.rho))
}

pub fn verify_certificate(
    cert: &ContractionCertificate,
    model: &dyn SystemModel,
    domain: &SamplingBox,
    n_samples: usize,
    seed: u64,
) -> Result<VerificationReport> {
    let n = model.state_dim();
    check_dim("certificate metric", n, cert.state_dim())?;
    let emb = build_embedding(model)?;
    let vertex_residual = emb
        .vertex_matrices()
        .iter()
        .map(|a| contraction_residual(cert, a))
        .fold(f64::NEG_INFINITY, f64::max);
    let (sample_residual, embedding_misses) = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = realization_rng(seed, i as u64);
            let x = domain.sample_state(&mut rng);
            let u = domain.sample_input(&mut rng);
            let miss = !emb.contains(&model.embedding_parameters(&x, &u), 1e-9);
            (contraction_residual(cert, &model.jacobian(&x, &u)), miss as usize)
        })
        .reduce(|| (f64::NEG_INFINITY, 0), |a, b| (a.0.max(b.0), a.1 + b.1));
    let g = model.noise_matrix();
    let trace_residual = (&cert.sigma_w * g.transpose() * &cert.m * g).trace() - cert.wbar;
    let inverse_residual = (&cert.m * &cert.w - DMatrix::identity(n, n)).amax();
    Ok(VerificationReport {
        vertex_residual,
        sample_residual,
        trace_residual,
        inverse_residual,
        embedding_misses,
        smpc_ready: cert.wbar <= (1.0 - cert.rho) * (1.0 - cert.p),
        n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use crate::model::{LinearModel, MassSpringDamperChain};

    fn scalar_constraints() -> Constraints {
        Constraints::new(
            vec![DVector::from_element(1, 1.0)],
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    /// Brute-force minimum of `X/(1-ρ)` for `x⁺ = a x + w`, `h = 1`: feasible
    /// iff `ρ ≥ a²`, `ε ≤ W ≤ 1`, `X ≥ Σ/W`.
    fn scalar_grid_oracle(a: f64, sigma: f64, search: &RhoSearch) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..=4000 {
            let rho = search.rho_min + (search.rho_max - search.rho_min) * i as f64 / 4000.0;
            for j in 1..=400 {
                let w = j as f64 / 400.0;
                if rho >= a * a {
                    best = best.min(sigma / w / (1.0 - rho));
                }
            }
        }
        best
    }

    #[test]
    fn embedding_vertices_and_reconstruction() {
        let chain = MassSpringDamperChain::benchmark();
        let emb = build_embedding(&chain).unwrap();
        assert_eq!(emb.n_params(), 3);
        assert_eq!(emb.vertices.len(), 8);
        let x = DVector::from_vec(vec![0.3, -0.2, 1.0, 0.05, -0.4, 0.12]);
        let u = DVector::from_element(1, 20.0);
        let theta = chain.embedding_parameters(&x, &u);
        assert!(emb.contains(&theta, 1e-12));
        assert!((emb.reconstruct(&theta) - chain.jacobian(&x, &u)).amax() < 1e-12);

        let lin = LinearModel::scalar(0.5, 1.0, 1.0);
        let emb = build_embedding(&lin).unwrap();
        assert_eq!(emb.vertices.len(), 1);
        assert_eq!(emb.vertex_matrices()[0][(0, 0)], 0.5);
    }

    #[test]
    fn block_count_matches_structure() {
        let chain = MassSpringDamperChain::benchmark();
        let cons = Constraints::benchmark();
        let emb = build_embedding(&chain).unwrap();
        let sigma = DMatrix::identity(3, 3) * 1e-3;
        let (prob, vars) = assemble_lmis(&emb, 0.99, &cons, &sigma, chain.noise_matrix(), 1.0).unwrap();
        assert_eq!(prob.blocks.len(), cons.n_rows() + 8 + 1 + 1);
        assert_eq!(vars.len(), 21 + 6);
    }

    #[test]
    fn scalar_design_matches_grid_oracle() {
        let search = RhoSearch::default();
        for a in [0.5, 0.9] {
            let lin = LinearModel::scalar(a, 1.0, 1.0);
            let sigma = DMatrix::from_element(1, 1, 0.01);
            let res = design_metric(&lin, &scalar_constraints(), &sigma, 0.9, &search).unwrap();
            let oracle = scalar_grid_oracle(a, 0.01, &search);
            let got = res.certificate.objective;
            assert!((got - oracle).abs() <= 1e-3 * oracle, "a={a}: {got} vs {oracle}");
        }
    }

    #[test]
    fn scalar_feasibility_threshold() {
        let lin = LinearModel::scalar(0.8, 1.0, 1.0);
        let cons = scalar_constraints();
        let dp = DesignProblem::new(&lin, &cons, &DMatrix::from_element(1, 1, 0.01)).unwrap();
        let opts = SdpOptions::default();
        assert_eq!(dp.solve_at(0.63, &opts).unwrap().status, SdpStatus::Infeasible);
        let c = dp.solve_at(0.65, &opts).unwrap();
        assert_eq!(c.status, SdpStatus::Optimal);
        assert!(c.w.unwrap()[(0, 0)] <= 1.0 + 1e-9);
    }

    #[test]
    fn unstable_scalar_has_no_rate() {
        let lin = LinearModel::scalar(1.1, 1.0, 1.0);
        let err = design_metric(
            &lin,
            &scalar_constraints(),
            &DMatrix::from_element(1, 1, 0.01),
            0.9,
            &RhoSearch::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NoFeasibleRho { .. }));
    }

    #[test]
    fn vanishing_noise_drives_trace_to_zero() {
        let lin = LinearModel::scalar(0.5, 1.0, 1.0);
        let cons = scalar_constraints();
        let opts = SdpOptions::default();
        let mut last = f64::INFINITY;
        for s in [1e-2, 1e-4, 1e-6] {
            let dp = DesignProblem::new(&lin, &cons, &DMatrix::from_element(1, 1, s)).unwrap();
            let c = dp.solve_at(0.7, &opts).unwrap();
            assert!(c.trace_x < last);
            assert!(c.trace_x <= s * 1.0001);
            last = c.trace_x;
        }
    }

    #[test]
    fn benchmark_trace_monotone_in_noise() {
        let chain = MassSpringDamperChain::benchmark();
        let cons = Constraints::benchmark();
        let opts = SdpOptions::default();
        let base = DMatrix::identity(3, 3) * 1e-3;
        let small = DesignProblem::new(&chain, &cons, &base).unwrap().solve_at(0.997, &opts).unwrap();
        let big = DesignProblem::new(&chain, &cons, &(&base * 4.0)).unwrap().solve_at(0.997, &opts).unwrap();
        assert_eq!(small.status, SdpStatus::Optimal);
        assert!(big.trace_x >= small.trace_x * (1.0 - 1e-6));
    }

    #[test]
    fn certificate_json_round_trip() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0]);
        let x = DMatrix::from_element(1, 1, 0.003);
        let cert = ContractionCertificate::from_parts(w, x, 0.9, DMatrix::from_element(1, 1, 0.01), 0.95).unwrap();
        let back = ContractionCertificate::from_json(&cert.to_json().unwrap()).unwrap();
        assert_eq!(back.m, cert.m);
        assert_eq!(back.w, cert.w);
        assert_eq!(back.rho, cert.rho);
        assert_eq!(back.smpc_ready, cert.smpc_ready);
        assert!(ContractionCertificate::from_json("{\"n\": 1}").is_err());
    }

    proptest::proptest! {
        #[test]
        fn certificate_json_is_bit_exact(
            a in 0.5f64..3.0,
            b in -0.4f64..0.4,
            rho in 0.0f64..1.0,
            x in 1e-9f64..1e-2,
        ) {
            let w = DMatrix::from_row_slice(2, 2, &[a, b, b, 1.0 + b * b]);
            let cert = ContractionCertificate::from_parts(
                w, DMatrix::from_element(1, 1, x), rho, DMatrix::from_element(1, 1, x), 0.95,
            ).unwrap();
            let text = cert.to_json().unwrap();
            let back = ContractionCertificate::from_json(&text).unwrap();
            proptest::prop_assert_eq!(back.to_json().unwrap(), text);
            proptest::prop_assert_eq!(back.m, cert.m);
            proptest::prop_assert_eq!(back.rho.to_bits(), cert.rho.to_bits());
        }
    }

    #[test]
    fn halved_rate_fails_verification() {
        let lin = LinearModel::scalar(0.8, 1.0, 1.0);
        let cons = scalar_constraints();
        let res = design_metric(&lin, &cons, &DMatrix::from_element(1, 1, 0.01), 0.9, &RhoSearch::default()).unwrap();
        let domain = SamplingBox {
            state_lower: DVector::from_element(1, -1.0),
            state_upper: DVector::from_element(1, 1.0),
            input_lower: cons.u_min.clone(),
            input_upper: cons.u_max.clone(),
        };
        let ok = verify_certificate(&res.certificate, &lin, &domain, 100, 1).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let mut bad = res.certificate.clone();
        bad.rho /= 2.0;
        let rep = verify_certificate(&bad, &lin, &domain, 100, 1).unwrap();
        assert!(!rep.passed());
        assert!(rep.vertex_residual > 0.0);
    }

    #[test]
    fn schur_conditions_unrolled() {
        let lin = LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.7]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.5]),
        )
        .unwrap();
        let cons = Constraints::new(
            vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, -0.5])],
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let sigma = DMatrix::from_element(1, 1, 0.02);
        let res = design_metric(&lin, &cons, &sigma, 0.9, &RhoSearch::default()).unwrap();
        let c = &res.certificate;
        for h in &cons.rows {
            assert!(1.0 - h.dot(&(&c.w * h)) >= -1e-7);
        }
        assert!(min_eigenvalue(&(&c.m * c.rho - lin.a.transpose() * &c.m * &lin.a)) >= -1e-7);
        let gs = &lin.g * psd_sqrt(&sigma);
        assert!(min_eigenvalue(&(&c.x - gs.transpose() * &c.m * &gs)) >= -1e-7);
    }
}
