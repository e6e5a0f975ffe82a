//! Plant models, constraint sets and process-noise distributions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Discrete-time dynamics `x⁺ = f_nom(x, u) + G w`.
///
/// Noise enters additively through the constant matrix `G`, so the state
/// Jacobian never depends on `w`.
pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn nominal(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn noise_matrix(&self) -> &DMatrix<f64>;

    /// `∂f/∂x` at `(x, u, 0)`.
    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;

    /// `∂f/∂u` at `(x, u, 0)`.
    fn input_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;

    /// Affine description of the Jacobian over a bounded parameter box, or
    /// `None` if the model cannot provide one.
    fn jacobian_structure(&self) -> Option<JacobianStructure>;

    /// Parameter values `θ(x, u)` for [`SystemModel::jacobian_structure`].
    fn embedding_parameters(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `Σ_k λ_k ∂²f_k/∂x²` at `(x, u)`, if available. Models whose input
    /// enters affinely need no mixed terms.
    fn state_hessian_contraction(&self, _x: &DVector<f64>, _u: &DVector<f64>, _lambda: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// `A(x, u) = base + Σ θᵢ(x, u) · directions[i]` with `θ` confined to the box
/// `[lower, upper]`.
#[derive(Debug, Clone)]
pub struct JacobianStructure {
    pub base: DMatrix<f64>,
    pub directions: Vec<DMatrix<f64>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

fn check_state_input(model: &dyn SystemModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    check_dim("state", model.state_dim(), x.len())?;
    check_dim("input", model.input_dim(), u.len())
}

/// One step of the stochastic system.
pub fn step(
    model: &dyn SystemModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_state_input(model, x, u)?;
    check_dim("noise", model.noise_dim(), w.len())?;
    Ok(model.nominal(x, u) + model.noise_matrix() * w)
}

pub fn jacobian(model: &dyn SystemModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_state_input(model, x, u)?;
    Ok(model.jacobian(x, u))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainParams {
    pub n_masses: usize,
    /// kg
    pub mass: f64,
    /// N/m
    pub spring: f64,
    /// N s/m
    pub damper: f64,
    /// s
    pub dt: f64,
    /// Saturation level of the smooth Coulomb friction, N.
    pub friction_force: f64,
    /// Velocity scale of the `tanh` friction curve, m/s.
    pub friction_velocity: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            n_masses: 3,
            mass: 5.0,
            spring: 2.0,
            damper: 1.0,
            dt: 0.25,
            friction_force: 2.0,
            friction_velocity: 0.1,
        }
    }
}

impl ChainParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_masses == 0 {
            return Err(Error::Config("chain needs at least one mass".into()));
        }
        let positive = [
            ("mass", self.mass),
            ("dt", self.dt),
            ("friction_velocity", self.friction_velocity),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("spring", self.spring),
            ("damper", self.damper),
            ("friction_force", self.friction_force),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Chain of masses attached to a wall by springs and dampers, with smooth
/// Coulomb friction `-F̄ tanh(v/v_s)` on every mass and the actuator force on
/// the last mass. Forward-Euler discretized.
///
/// State layout: positions `p_1..p_n`, then velocities `v_1..v_n`.
#[derive(Debug, Clone)]
pub struct MassSpringDamperChain {
    params: ChainParams,
    g: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl MassSpringDamperChain {
    pub fn new(params: ChainParams) -> Result<Self> {
        params.validate()?;
        let nm = params.n_masses;
        let mut g = DMatrix::zeros(2 * nm, nm);
        for i in 0..nm {
            g[(nm + i, i)] = params.dt / params.mass;
        }
        let mut b = DMatrix::zeros(2 * nm, 1);
        b[(2 * nm - 1, 0)] = params.dt / params.mass;
        Ok(Self { params, g, b })
    }

    pub fn benchmark() -> Self {
        Self::new(ChainParams::default()).expect("default chain parameters are valid")
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    /// Continuous-time right-hand side `ẋ = F(x, u)`.
    pub fn continuous_rhs(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        let nm = self.params.n_masses;
        let ChainParams {
            mass,
            spring,
            damper,
            friction_force,
            friction_velocity,
            ..
        } = self.params;
        let mut dx = DVector::zeros(2 * nm);
        let pos = |i: usize| x[i];
        let vel = |i: usize| x[nm + i];
        for i in 0..nm {
            dx[i] = vel(i);
            let (p_prev, v_prev) = if i == 0 { (0.0, 0.0) } else { (pos(i - 1), vel(i - 1)) };
            let mut force = -spring * (pos(i) - p_prev) - damper * (vel(i) - v_prev);
            if i + 1 < nm {
                force += spring * (pos(i + 1) - pos(i)) + damper * (vel(i + 1) - vel(i));
            }
            force -= friction_force * (vel(i) / friction_velocity).tanh();
            if i + 1 == nm {
                force += u;
            }
            dx[nm + i] = force / mass;
        }
        dx
    }

    /// Continuous-time Jacobian with the friction slopes replaced by
    /// `θᵢ · F̄/v_s`.
    fn continuous_jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        let nm = self.params.n_masses;
        let ChainParams {
            mass,
            spring,
            damper,
            friction_force,
            friction_velocity,
            ..
        } = self.params;
        let mut a = DMatrix::zeros(2 * nm, 2 * nm);
        for i in 0..nm {
            a[(i, nm + i)] = 1.0;
            let coupling = if i + 1 < nm { 2.0 } else { 1.0 };
            a[(nm + i, i)] = -spring * coupling / mass;
            a[(nm + i, nm + i)] =
                -damper * coupling / mass - friction_force / friction_velocity * theta[i] / mass;
            if i > 0 {
                a[(nm + i, i - 1)] = spring / mass;
                a[(nm + i, nm + i - 1)] = damper / mass;
            }
            if i + 1 < nm {
                a[(nm + i, i + 1)] = spring / mass;
                a[(nm + i, nm + i + 1)] = damper / mass;
            }
        }
        a
    }

    fn discrete_jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        let n = 2 * self.params.n_masses;
        DMatrix::identity(n, n) + self.continuous_jacobian(theta) * self.params.dt
    }
}

impl SystemModel for MassSpringDamperChain {
    fn state_dim(&self) -> usize {
        2 * self.params.n_masses
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        self.params.n_masses
    }

    fn nominal(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        x + self.continuous_rhs(x, u[0]) * self.params.dt
    }

    fn noise_matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let theta = self.embedding_parameters(x, u);
        if theta.is_empty() {
            return self.discrete_jacobian(&vec![0.0; self.params.n_masses]);
        }
        self.discrete_jacobian(theta.as_slice())
    }

    fn input_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }

    fn jacobian_structure(&self) -> Option<JacobianStructure> {
        let nm = self.params.n_masses;
        let base = self.discrete_jacobian(&vec![0.0; nm]);
        if self.params.friction_force == 0.0 {
            return Some(JacobianStructure {
                base,
                directions: vec![],
                lower: vec![],
                upper: vec![],
            });
        }
        let slope = self.params.dt * self.params.friction_force
            / (self.params.friction_velocity * self.params.mass);
        let directions = (0..nm)
            .map(|i| {
                let mut d = DMatrix::zeros(2 * nm, 2 * nm);
                d[(nm + i, nm + i)] = -slope;
                d
            })
            .collect();
        Some(JacobianStructure {
            base,
            directions,
            lower: vec![0.0; nm],
            upper: vec![1.0; nm],
        })
    }

    /// `θᵢ = sech²(vᵢ / v_s)`.
    fn embedding_parameters(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        let nm = self.params.n_masses;
        if self.params.friction_force == 0.0 {
            return DVector::zeros(0);
        }
        DVector::from_iterator(
            nm,
            (0..nm).map(|i| {
                let t = (x[nm + i] / self.params.friction_velocity).tanh();
                1.0 - t * t
            }),
        )
    }

    fn state_hessian_contraction(&self, x: &DVector<f64>, _u: &DVector<f64>, lambda: &DVector<f64>) -> Option<DMatrix<f64>> {
        let nm = self.params.n_masses;
        let ChainParams {
            mass,
            dt,
            friction_force,
            friction_velocity,
            ..
        } = self.params;
        let mut h = DMatrix::zeros(2 * nm, 2 * nm);
        for i in 0..nm {
            // d²/dv² of −dt F̄/m · tanh(v/v_s) is 2 dt F̄/(m v_s²) · tanh · sech²
            let t = (x[nm + i] / friction_velocity).tanh();
            let curv = 2.0 * dt * friction_force / (mass * friction_velocity * friction_velocity) * t * (1.0 - t * t);
            h[(nm + i, nm + i)] = lambda[nm + i] * curv;
        }
        Some(h)
    }
}

/// Linear time-invariant model `x⁺ = A x + B u + G w`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        check_dim("A columns", a.nrows(), a.ncols())?;
        check_dim("B rows", a.nrows(), b.nrows())?;
        check_dim("G rows", a.nrows(), g.nrows())?;
        Ok(Self { a, b, g })
    }

    /// `x⁺ = a x + b u + g w`.
    pub fn scalar(a: f64, b: f64, g: f64) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            g: DMatrix::from_element(1, 1, g),
        }
    }
}

impl SystemModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn noise_dim(&self) -> usize {
        self.g.ncols()
    }

    fn nominal(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn noise_matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    fn jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn input_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }

    fn jacobian_structure(&self) -> Option<JacobianStructure> {
        Some(JacobianStructure {
            base: self.a.clone(),
            directions: vec![],
            lower: vec![],
            upper: vec![],
        })
    }

    fn embedding_parameters(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
}

/// State polytope `{x | h_jᵀ x ≤ 1}` and input box.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraints {
    /// One normalized row `h_j` per entry.
    pub rows: Vec<DVector<f64>>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
}

impl Constraints {
    pub fn new(rows: Vec<DVector<f64>>, u_min: DVector<f64>, u_max: DVector<f64>) -> Result<Self> {
        check_dim("input bounds", u_min.len(), u_max.len())?;
        if let Some(first) = rows.first() {
            for r in &rows {
                check_dim("constraint row", first.len(), r.len())?;
            }
        }
        if u_min.iter().zip(u_max.iter()).any(|(lo, hi)| lo > hi) {
            return Err(Error::Config("input lower bound exceeds upper bound".into()));
        }
        if u_min.iter().zip(u_max.iter()).any(|(lo, hi)| *lo > 0.0 || *hi < 0.0) {
            return Err(Error::Config("input box must contain 0".into()));
        }
        Ok(Self { rows, u_min, u_max })
    }

    /// Velocity limits `|v_i| ≤ v_max` and spring compression limits
    /// `p_{i-1} - p_i ≤ max_compression` (wall at `p_0 = 0`).
    pub fn chain(n_masses: usize, v_max: f64, max_compression: f64, u_bound: f64) -> Result<Self> {
        if !(v_max > 0.0 && max_compression > 0.0 && u_bound >= 0.0) {
            return Err(Error::Config(
                "velocity limit, compression limit and input bound must be positive".into(),
            ));
        }
        let n = 2 * n_masses;
        let mut rows = Vec::with_capacity(3 * n_masses);
        for i in 0..n_masses {
            for sign in [1.0, -1.0] {
                let mut h = DVector::zeros(n);
                h[n_masses + i] = sign / v_max;
                rows.push(h);
            }
        }
        for i in 0..n_masses {
            let mut h = DVector::zeros(n);
            h[i] = -1.0 / max_compression;
            if i > 0 {
                h[i - 1] = 1.0 / max_compression;
            }
            rows.push(h);
        }
        Self::new(
            rows,
            DVector::from_element(1, -u_bound),
            DVector::from_element(1, u_bound),
        )
    }

    pub fn benchmark() -> Self {
        Self::chain(3, 2.0, 1.0, 100.0).expect("benchmark constraints are valid")
    }

    pub fn state_dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn contains_state(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.rows.iter().all(|h| h.dot(x) <= 1.0 + tol)
    }

    pub fn contains_input(&self, u: &DVector<f64>, tol: f64) -> bool {
        u.iter()
            .zip(self.u_min.iter().zip(self.u_max.iter()))
            .all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol)
    }

    pub fn clamp_input(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.u_min.iter().zip(self.u_max.iter()))
                .map(|(v, (lo, hi))| v.clamp(*lo, *hi)),
        )
    }
}

/// Zero-mean process-noise distribution with known second moment.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    Gaussian {
        covariance: DMatrix<f64>,
        chol: DMatrix<f64>,
    },
    /// Each channel independently takes `{-c, 0, c}` with probabilities
    /// `{(1-q)/2, q, (1-q)/2}`, `c = σ/√(1-q)`.
    DiscreteThreePoint {
        variances: DVector<f64>,
        zero_prob: f64,
        support: DVector<f64>,
    },
}

impl NoiseModel {
    pub fn gaussian(covariance: DMatrix<f64>) -> Result<Self> {
        let sym = crate::linalg::symmetrize(&covariance);
        let chol = sym
            .clone()
            .cholesky()
            .ok_or(Error::Config("noise covariance must be positive definite".into()))?
            .l();
        Ok(NoiseModel::Gaussian {
            covariance: sym,
            chol,
        })
    }

    pub fn discrete_three_point(variances: DVector<f64>, zero_prob: f64) -> Result<Self> {
        if !(zero_prob > 0.0 && zero_prob < 1.0) {
            return Err(Error::Config(format!(
                "zero probability q must lie in (0,1), got {zero_prob}"
            )));
        }
        if variances.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("noise variances must be non-negative".into()));
        }
        let support = variances.map(|v| (v / (1.0 - zero_prob)).sqrt());
        Ok(NoiseModel::DiscreteThreePoint {
            variances,
            zero_prob,
            support,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            NoiseModel::Gaussian { covariance, .. } => covariance.nrows(),
            NoiseModel::DiscreteThreePoint { variances, .. } => variances.len(),
        }
    }

    /// Exact second moment `E[w wᵀ]`.
    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            NoiseModel::Gaussian { covariance, .. } => covariance.clone(),
            NoiseModel::DiscreteThreePoint { variances, .. } => DMatrix::from_diagonal(variances),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            NoiseModel::Gaussian { chol, .. } => {
                let xi = DVector::from_iterator(chol.nrows(), (0..chol.nrows()).map(|_| rng.sample::<f64, _>(StandardNormal)));
                chol * xi
            }
            NoiseModel::DiscreteThreePoint {
                zero_prob, support, ..
            } => DVector::from_iterator(
                support.len(),
                support.iter().map(|c| {
                    let r: f64 = rng.random();
                    if r < *zero_prob {
                        0.0
                    } else if r < *zero_prob + (1.0 - zero_prob) / 2.0 {
                        -c
                    } else {
                        *c
                    }
                }),
            ),
        }
    }
}

/// Independent random stream for one Monte Carlo realization.
///
/// Streams are keyed by `(seed, index)` only, so results do not depend on the
/// order in which realizations are evaluated.
pub fn realization_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
