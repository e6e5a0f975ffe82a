use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::linalg::spd_inverse;
use crate::metric::ContractionCertificate;
use crate::model::{ChainParams, Constraints, MassSpringDamperChain};
use crate::ocp::{OcpProblem, SqpSettings};

/// Benchmark chain with a synthetic metric so no SDP is needed.
pub fn synthetic_problem(friction: bool, horizon: usize) -> OcpProblem {
    let mut params = ChainParams::default();
    if !friction {
        params.friction_force = 0.0;
    }
    let model = Arc::new(MassSpringDamperChain::new(params).unwrap());
    let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.2, 0.8, 2.0, 1.5, 1.0]));
    let cert = ContractionCertificate::from_parts(
        spd_inverse(&m).unwrap(),
        DMatrix::from_element(1, 1, 1e-6),
        0.99,
        DMatrix::from_element(1, 1, 1.0),
        0.95,
    )
    .unwrap();
    OcpProblem::from_certificate(
        model,
        &Constraints::benchmark(),
        &cert,
        0.95,
        DMatrix::identity(6, 6),
        DMatrix::from_element(1, 1, 0.1),
        horizon,
        SqpSettings::default(),
    )
    .unwrap()
}
