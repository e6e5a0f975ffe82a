//! TOML toolkit configuration. Every section and key is required.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use smpc_core::mc::{ExperimentConfig, InputSignal};
use smpc_core::metric::RhoSearch;
use smpc_core::model::{ChainParams, Constraints, MassSpringDamperChain, NoiseModel};
use smpc_core::ocp::SqpSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolkitConfig {
    pub model: ModelSection,
    pub noise: NoiseSection,
    pub design: DesignSection,
    pub mpc: MpcSection,
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_masses: usize,
    pub mass: f64,
    pub spring: f64,
    pub damper: f64,
    pub dt: f64,
    pub friction_force: f64,
    pub friction_velocity: f64,
    pub v_max: f64,
    pub max_compression: f64,
    pub u_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: NoiseKind,
    pub sigma_w: Vec<f64>,
    pub zero_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub p: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub grid_points: usize,
    pub tol_rho: f64,
    pub tol_psd: f64,
    pub tol_obj: f64,
    pub max_iter: usize,
    pub verify_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub steps: usize,
    pub initial_displacement: f64,
    pub sqp: SqpSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SqpSection {
    pub tol_kkt: f64,
    pub tol_con: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub realizations: usize,
    pub closed_loop_realizations: usize,
    pub open_loop_steps: usize,
    pub forcing_amplitude: f64,
    pub forcing_period: f64,
    pub validation_zero_probs: Vec<f64>,
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn all_positive(v: &[f64]) -> bool {
    v.iter().all(|x| *x > 0.0 && x.is_finite())
}

impl ToolkitConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        self.chain_params().validate().map_err(|e| format!("[model] {e}"))?;
        let m = &self.model;
        check(all_positive(&[m.v_max, m.max_compression, m.u_max]), || {
            "[model] v_max, max_compression and u_max must be positive".into()
        })?;
        let n = m.n_masses;
        let nz = &self.noise;
        check(nz.sigma_w.len() == n && all_positive(&nz.sigma_w), || {
            format!("[noise] sigma_w needs {n} positive entries, got {:?}", nz.sigma_w)
        })?;
        check(nz.zero_prob > 0.0 && nz.zero_prob < 1.0, || {
            format!("[noise] zero_prob must lie in (0, 1), got {}", nz.zero_prob)
        })?;
        let d = &self.design;
        check(d.p > 0.0 && d.p < 1.0, || format!("[design] p must lie in (0, 1), got {}", d.p))?;
        self.rho_search().validate().map_err(|e| format!("[design] {e}"))?;
        check(all_positive(&[d.tol_psd, d.tol_obj]) && d.max_iter > 0, || {
            "[design] SDP tolerances and max_iter must be positive".into()
        })?;
        check(d.verify_samples > 0, || "[design] verify_samples must be positive".into())?;
        let c = &self.mpc;
        check(c.horizon > 0 && c.steps > 0, || "[mpc] horizon and steps must be positive".into())?;
        check(c.q_diag.len() == 2 * n && all_positive(&c.q_diag), || {
            format!("[mpc] q_diag needs {} positive entries", 2 * n)
        })?;
        check(c.r_diag.len() == 1 && all_positive(&c.r_diag), || {
            "[mpc] r_diag needs 1 positive entry".into()
        })?;
        check(c.initial_displacement.is_finite(), || "[mpc] initial_displacement must be finite".into())?;
        check(all_positive(&[c.sqp.tol_kkt, c.sqp.tol_con]) && c.sqp.max_iter > 0, || {
            "[mpc.sqp] tolerances and max_iter must be positive".into()
        })?;
        let e = &self.experiment;
        check(e.realizations >= 100 && e.closed_loop_realizations >= 100, || {
            "[experiment] at least 100 realizations are required".into()
        })?;
        check(e.open_loop_steps > 0, || "[experiment] open_loop_steps must be positive".into())?;
        check(all_positive(&[e.forcing_amplitude, e.forcing_period]), || {
            "[experiment] forcing amplitude and period must be positive".into()
        })?;
        check(e.validation_zero_probs.iter().all(|q| *q > 0.0 && *q < 1.0), || {
            "[experiment] validation_zero_probs must lie in (0, 1)".into()
        })?;
        Ok(())
    }

    pub fn chain_params(&self) -> ChainParams {
        let m = &self.model;
        ChainParams {
            n_masses: m.n_masses,
            mass: m.mass,
            spring: m.spring,
            damper: m.damper,
            dt: m.dt,
            friction_force: m.friction_force,
            friction_velocity: m.friction_velocity,
        }
    }

    pub fn chain(&self) -> smpc_core::Result<MassSpringDamperChain> {
        MassSpringDamperChain::new(self.chain_params())
    }

    pub fn constraints(&self) -> smpc_core::Result<Constraints> {
        let m = &self.model;
        Constraints::chain(m.n_masses, m.v_max, m.max_compression, m.u_max)
    }

    pub fn sigma_w(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.noise.sigma_w.clone()))
    }

    pub fn noise(&self) -> smpc_core::Result<NoiseModel> {
        match self.noise.kind {
            NoiseKind::Gaussian => NoiseModel::gaussian(self.sigma_w()),
            NoiseKind::Discrete => self.discrete_noise(self.noise.zero_prob),
        }
    }

    pub fn discrete_noise(&self, zero_prob: f64) -> smpc_core::Result<NoiseModel> {
        NoiseModel::discrete_three_point(DVector::from_vec(self.noise.sigma_w.clone()), zero_prob)
    }

    /// The Gaussian law and every discrete law listed for validation, named
    /// for output files.
    pub fn validation_noises(&self) -> smpc_core::Result<Vec<(String, NoiseModel)>> {
        let mut out = vec![("gaussian".to_string(), NoiseModel::gaussian(self.sigma_w())?)];
        for &q in &self.experiment.validation_zero_probs {
            out.push((format!("discrete_q{q}"), self.discrete_noise(q)?));
        }
        Ok(out)
    }

    pub fn rho_search(&self) -> RhoSearch {
        let d = &self.design;
        RhoSearch {
            rho_min: d.rho_min,
            rho_max: d.rho_max,
            grid_points: d.grid_points,
            tol_rho: d.tol_rho,
            tol_psd: d.tol_psd,
            tol_obj: d.tol_obj,
            max_iter: d.max_iter,
        }
    }

    pub fn q(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.mpc.q_diag.clone()))
    }

    pub fn r(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.mpc.r_diag.clone()))
    }

    pub fn sqp(&self) -> SqpSettings {
        SqpSettings {
            tol_kkt: self.mpc.sqp.tol_kkt,
            tol_con: self.mpc.sqp.tol_con,
            max_iter: self.mpc.sqp.max_iter,
            ..SqpSettings::default()
        }
    }

    /// Rest state with the last mass displaced.
    pub fn initial_state(&self) -> DVector<f64> {
        let n = self.model.n_masses;
        let mut x0 = DVector::zeros(2 * n);
        x0[n - 1] = self.mpc.initial_displacement;
        x0
    }

    pub fn open_loop(&self, signal: InputSignal) -> ExperimentConfig {
        ExperimentConfig {
            realizations: self.experiment.realizations,
            steps: self.experiment.open_loop_steps,
            signal,
            seed: self.experiment.seed,
            dt: self.model.dt,
        }
    }

    pub fn signals(&self) -> [InputSignal; 2] {
        [
            InputSignal::PeriodicForcing {
                amplitude: self.experiment.forcing_amplitude,
                period: self.experiment.forcing_period,
            },
            InputSignal::Zero,
        ]
    }

    pub fn closed_loop(&self) -> ExperimentConfig {
        ExperimentConfig {
            realizations: self.experiment.closed_loop_realizations,
            steps: self.mpc.steps,
            signal: InputSignal::ClosedLoop,
            seed: self.experiment.seed,
            dt: self.model.dt,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULT: &str = include_str!("../../../configs/default.toml");

    #[test]
    fn default_file_parses_and_matches_the_benchmark() {
        let cfg = ToolkitConfig::parse(DEFAULT).unwrap();
        assert_eq!(cfg.chain_params(), ChainParams::default());
        assert_eq!(cfg.constraints().unwrap().rows, Constraints::benchmark().rows);
        assert_eq!(cfg.rho_search(), RhoSearch::default());
        assert_eq!(cfg.mpc.horizon, 15);
        assert_eq!(cfg.design.p, 0.95);
        assert_eq!(cfg.initial_state()[2], 4.0);
        assert_eq!(cfg.validation_noises().unwrap().len(), 3);
    }

    #[test]
    fn missing_section_is_reported() {
        let text = DEFAULT.replace("[mpc.sqp]", "[mpc_sqp]");
        let err = ToolkitConfig::parse(&text).unwrap_err();
        assert!(err.contains("sqp") || err.contains("mpc_sqp"), "{err}");
        let cut = &DEFAULT[..DEFAULT.find("[experiment]").unwrap()];
        assert!(ToolkitConfig::parse(cut).unwrap_err().contains("experiment"));
    }

    #[test]
    fn syntax_errors_carry_the_line() {
        let text = DEFAULT.replacen("mass = 5.0", "mass = = 5.0", 1);
        let line = DEFAULT.lines().position(|l| l.starts_with("mass =")).unwrap() + 1;
        let err = ToolkitConfig::parse(&text).unwrap_err();
        assert!(err.contains(&format!("line {line}")), "{err}");
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for (from, to) in [
            ("p = 0.95", "p = 1.5"),
            ("horizon = 15", "horizon = 0"),
            ("sigma_w = [1e-3, 1e-3, 1e-3]", "sigma_w = [1e-3, 1e-3]"),
            ("r_diag = [0.01]", "r_diag = [-0.01]"),
            ("zero_prob = 0.9995", "zero_prob = 1.0"),
            ("closed_loop_realizations = 1000", "closed_loop_realizations = 10"),
            ("mass = 5.0", "mass = 0.0"),
        ] {
            assert!(DEFAULT.contains(from), "{from}");
            assert!(ToolkitConfig::parse(&DEFAULT.replacen(from, to, 1)).is_err(), "{to}");
        }
        let unknown = DEFAULT.replacen("[noise]", "[noise]\ncolour = \"white\"", 1);
        assert!(ToolkitConfig::parse(&unknown).is_err());
    }
}
