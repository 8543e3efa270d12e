use thiserror::Error;

#[derive(Debug, Error)]
pub enum SglError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite coefficient output at sample point {point:?} ({what})")]
    NonFiniteCoefficient { what: String, point: Vec<f64> },

    #[error("simulation aborted: non-finite state at step {step} (dt too large or coefficients blow up)")]
    SimulationBlowup { step: usize },

    #[error("fixed-point sweeps did not converge within {max_sweeps} sweeps (worst residual {residual:.3e}); reduce ht or increase eps/delta")]
    SweepDiverged { max_sweeps: usize, residual: f64 },

    #[error("rate fit needs at least 2 points, got {0}")]
    FitTooFewPoints(usize),

    #[error("rate fit requires positive inputs, got ({param}, {error})")]
    FitNonPositive { param: f64, error: f64 },

    #[error("expression parse error: {0}")]
    ExprParse(String),

    #[error("stop time {0} is not on the simulation grid")]
    StopOffGrid(f64),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("grid file is malformed: {0}")]
    BadGridFile(String),
}

pub type Result<T> = std::result::Result<T, SglError>;
