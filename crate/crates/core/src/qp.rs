//! Dense convex QP solver (primal-dual interior point, Mehrotra predictor-corrector)
//!
//! ```text
//! minimize    ½ xᵀ H x + cᵀ x
//! subject to  A x = b,  G x ≤ h
//! ```

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h_ub: DVector<f64>,
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, c: DVector<f64>) -> Self {
        let n = c.len();
        Self {
            h,
            c,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            g: DMatrix::zeros(0, n),
            h_ub: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        self.g = g;
        self.h_ub = h;
        self
    }

    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.c.dot(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Equality multipliers.
    pub y: DVector<f64>,
    /// Inequality multipliers, `z ≥ 0`.
    pub z: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0, f64::min)
}

/// Solves the reduced Newton system
/// `[K Aᵀ; A 0] [dx; dy] = [r1; r2]`, `K = H + Gᵀ D G`.
fn solve_kkt(k: &DMatrix<f64>, a: &DMatrix<f64>, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = k.nrows();
    let p = a.nrows();
    if p == 0 {
        let scale = k.diagonal().amax().max(1.0);
        let mut reg = 0.0;
        for _ in 0..6 {
            let mut kk = k.clone();
            for i in 0..n {
                kk[(i, i)] += reg;
            }
            if let Some(ch) = kk.cholesky() {
                return Some((ch.solve(r1), DVector::zeros(0)));
            }
            reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
        }
        return None;
    }
    let mut m = DMatrix::zeros(n + p, n + p);
    m.view_mut((0, 0), (n, n)).copy_from(k);
    m.view_mut((n, 0), (p, n)).copy_from(a);
    m.view_mut((0, n), (n, p)).copy_from(&a.transpose());
    let mut rhs = DVector::zeros(n + p);
    rhs.rows_mut(0, n).copy_from(r1);
    rhs.rows_mut(n, p).copy_from(r2);
    let sol = m.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, p).into_owned()))
}

/// Re-solves the KKT system as an equality problem on the active set guessed
/// from `z > s`; returns `None` if the guess is not primal-dual feasible.
fn polish(qp: &QpProblem, s: &DVector<f64>, z: &DVector<f64>, tol: f64) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = qp.n_vars();
    let p = qp.a_eq.nrows();
    let active: Vec<usize> = (0..qp.g.nrows()).filter(|&j| z[j] > s[j]).collect();
    let na = active.len();
    let rows = p + na;
    if rows > n {
        return None;
    }
    let mut a = DMatrix::zeros(rows, n);
    let mut b = DVector::zeros(rows);
    a.view_mut((0, 0), (p, n)).copy_from(&qp.a_eq);
    b.rows_mut(0, p).copy_from(&qp.b_eq);
    for (r, &j) in active.iter().enumerate() {
        a.row_mut(p + r).copy_from(&qp.g.row(j));
        b[p + r] = qp.h_ub[j];
    }
    let (x, mult) = solve_kkt(&qp.h, &a, &-&qp.c, &b)?;
    let y = mult.rows(0, p).into_owned();
    let mut zz = DVector::zeros(qp.g.nrows());
    for (r, &j) in active.iter().enumerate() {
        zz[j] = mult[p + r];
    }
    let feas_scale = 1.0 + qp.h_ub.amax();
    let viol = (&qp.g * &x - &qp.h_ub).iter().fold(0.0f64, |acc, v| acc.max(*v));
    if zz.iter().any(|v| *v < -tol * (1.0 + z.amax())) || viol > tol * feas_scale {
        return None;
    }
    zz.apply(|v| *v = v.max(0.0));
    Some((x, y, zz))
}

pub fn solve_qp(qp: &QpProblem, opts: &QpOptions) -> QpSolution {
    let n = qp.n_vars();
    let p = qp.a_eq.nrows();
    let m = qp.g.nrows();
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(p);
    let slack0 = &qp.h_ub - &qp.g * &x;
    let mut s = slack0.map(|v| v.max(1.0));
    let mut z = DVector::from_element(m, 1.0);

    let scale_d = 1.0 + qp.c.amax();
    let scale_p = 1.0 + qp.b_eq.amax();
    let scale_i = 1.0 + qp.h_ub.amax();

    for it in 0..opts.max_iter {
        let r_d = &qp.h * &x + &qp.c + qp.a_eq.transpose() * &y + qp.g.transpose() * &z;
        let r_p = &qp.a_eq * &x - &qp.b_eq;
        let r_i = &qp.g * &x + &s - &qp.h_ub;
        let mu = if m > 0 { s.dot(&z) / m as f64 } else { 0.0 };

        if r_d.amax() <= opts.tol * scale_d && r_p.amax() <= opts.tol * scale_p && r_i.amax() <= opts.tol * scale_i && mu <= opts.tol {
            let (x, y, z) = polish(qp, &s, &z, opts.tol).unwrap_or((x, y, z));
            return QpSolution {
                x,
                y,
                z,
                status: QpStatus::Optimal,
                iterations: it,
            };
        }

        // Farkas-type certificate: Aᵀy + Gᵀz ≈ 0 with bᵀy + hᵀz < 0
        if m > 0 {
            let norm = y.amax().max(z.amax());
            if norm > 1e8 {
                let ray = (qp.a_eq.transpose() * &y + qp.g.transpose() * &z).amax() / norm;
                let gap = (qp.b_eq.dot(&y) + qp.h_ub.dot(&z)) / norm;
                if ray < 1e-6 && gap < -1e-8 {
                    return QpSolution {
                        x,
                        y,
                        z,
                        status: QpStatus::Infeasible,
                        iterations: it,
                    };
                }
            }
        }

        let d = z.component_div(&s);
        let mut kmat = qp.h.clone();
        if m > 0 {
            let gd = DMatrix::from_fn(m, n, |i, j| qp.g[(i, j)] * d[i]);
            kmat += qp.g.transpose() * gd;
        }

        let newton = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            // dz = S⁻¹(Z r_i − r_c) + D G dx,  ds = −r_i − G dx
            let t = (z.component_mul(&r_i) - r_c).component_div(&s);
            let r1 = -&r_d - qp.g.transpose() * &t;
            let r2 = -&r_p;
            let (dx, dy) = solve_kkt(&kmat, &qp.a_eq, &r1, &r2)?;
            let gdx = &qp.g * &dx;
            let dz = &t + d.component_mul(&gdx);
            let ds = -&r_i - gdx;
            Some((dx, dy, dz, ds))
        };

        // predictor
        let r_c_aff = s.component_mul(&z);
        let Some((dx_a, _, dz_a, ds_a)) = newton(&r_c_aff) else { break };
        let alpha_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let mu_aff = if m > 0 {
            (&s + &ds_a * alpha_aff).dot(&(&z + &dz_a * alpha_aff)) / m as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };
        let _ = dx_a;

        // corrector
        let r_c = s.component_mul(&z) + ds_a.component_mul(&dz_a) - DVector::from_element(m, sigma * mu);
        let Some((dx, dy, dz, ds)) = newton(&r_c) else { break };
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        x += &dx * alpha;
        y += &dy * alpha;
        z += &dz * alpha;
        s += &ds * alpha;
        // keep strictly interior
        s.apply(|v| *v = v.max(1e-300));
        z.apply(|v| *v = v.max(1e-300));
    }
    QpSolution {
        x,
        y,
        z,
        status: QpStatus::MaxIterations,
        iterations: opts.max_iter,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn clipped_one_dimensional() {
        let qp = QpProblem::new(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -6.0)).with_inequalities(
            DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        let sol = solve_qp(&qp, &QpOptions::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-9);
        assert!((sol.z[0] - 4.0).abs() < 1e-7);
    }

    #[test]
    fn equality_constrained_matches_kkt_solve() {
        let h = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let c = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let b = DVector::from_element(1, 1.0);
        let sol = solve_qp(&QpProblem::new(h.clone(), c.clone()).with_equalities(a.clone(), b.clone()), &QpOptions::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        // oracle: [H Aᵀ; A 0][x; y] = [−c; b]
        let mut k = DMatrix::zeros(4, 4);
        k.view_mut((0, 0), (3, 3)).copy_from(&h);
        k.view_mut((3, 0), (1, 3)).copy_from(&a);
        k.view_mut((0, 3), (3, 1)).copy_from(&a.transpose());
        let rhs = DVector::from_vec(vec![-c[0], -c[1], -c[2], b[0]]);
        let oracle = k.lu().solve(&rhs).unwrap();
        for i in 0..3 {
            assert!((sol.x[i] - oracle[i]).abs() < 1e-9);
        }
        assert!((sol.y[0] - oracle[3]).abs() < 1e-8);
    }

    #[test]
    fn infeasible_inequalities_detected() {
        // x ≤ −1 and −x ≤ −1
        let qp = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1)).with_inequalities(
            DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![-1.0, -1.0]),
        );
        let sol = solve_qp(&qp, &QpOptions::default());
        assert_ne!(sol.status, QpStatus::Optimal);
    }

    /// Projected gradient with Nesterov momentum on `lo ≤ x ≤ hi`.
    fn fista_box(h: &DMatrix<f64>, c: &DVector<f64>, lo: f64, hi: f64) -> DVector<f64> {
        let l = h.clone().symmetric_eigenvalues().max();
        let proj = |v: DVector<f64>| v.map(|e| e.clamp(lo, hi));
        let mut x = DVector::zeros(c.len());
        let mut yk = x.clone();
        let mut t = 1.0f64;
        for _ in 0..200_000 {
            let grad = h * &yk + c;
            let xn = proj(&yk - grad / l);
            let tn = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            yk = &xn + (&xn - &x) * ((t - 1.0) / tn);
            if (&xn - &x).amax() < 1e-14 {
                return xn;
            }
            x = xn;
            t = tn;
        }
        x
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_box_qp_matches_projected_gradient(seed in 0u64..10_000, n in 2usize..7) {
            let mut rng = crate::model::realization_rng(seed, 0);
            let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let h = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
            let c = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            let mut g = DMatrix::zeros(2 * n, n);
            for i in 0..n {
                g[(i, i)] = 1.0;
                g[(n + i, i)] = -1.0;
            }
            let qp = QpProblem::new(h.clone(), c.clone()).with_inequalities(g, DVector::from_element(2 * n, 1.0));
            let sol = solve_qp(&qp, &QpOptions::default());
            prop_assert_eq!(sol.status, QpStatus::Optimal);
            let oracle = fista_box(&h, &c, -1.0, 1.0);
            prop_assert!((&sol.x - &oracle).amax() < 1e-7, "{} vs {}", sol.x, oracle);
        }
    }
}
