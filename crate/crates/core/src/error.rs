use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model jacobian has no bounded convex embedding over the state/input domain")]
    UnboundedJacobian,

    #[error("no feasible contraction rate in [{lo}, {hi}]")]
    NoFeasibleRho { lo: f64, hi: f64 },

    #[error("certificate is not smpc-ready: tr(X) = {trace_x:e} exceeds (1-rho)(1-p) = {limit:e}")]
    NotSmpcReady { trace_x: f64, limit: f64 },

    #[error("tightened constraint set is empty: row {row} at step {step} has margin {margin:e}")]
    EmptyTightenedSet { row: usize, step: usize, margin: f64 },

    #[error("optimal control problem infeasible at the initial time")]
    InitialInfeasibility,

    #[error("scenario tree has {leaves} leaves, cap is {cap}")]
    TreeTooLarge { leaves: usize, cap: usize },

    #[error("optimization problem infeasible: {0}")]
    Infeasible(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
