use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("constraint set is infeasible (phase-1 slack {slack:.3e} > {tol:.3e})")]
    Infeasible { slack: f64, tol: f64 },

    #[error(
        "solver did not converge in {iterations} iterations \
         (primal {primal:.3e}, dual {dual:.3e}, gap {gap:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        primal: f64,
        dual: f64,
        gap: f64,
    },

    #[error("degenerate projection gradient: KKT system singular after regularization")]
    DegenerateGradient,

    #[error("identifiability failure: no excitation along {direction}")]
    Identifiability { direction: String },

    #[error("power flow diverged after {iterations} iterations (residual {residual:.3e})")]
    PowerFlowDiverged { iterations: usize, residual: f64 },

    #[error("linearization failed at bus {bus}: {source}")]
    Linearization {
        bus: usize,
        #[source]
        source: Box<CoreError>,
    },

    #[error("margin estimation needs >= {required} valid samples, got {valid}")]
    MarginEstimation { required: usize, valid: usize },

    #[error("trace error: {0}")]
    Trace(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
