use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("value iteration did not converge within {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("index outside bracket [{lo}, {hi}] for state {state}: gap(lo)={gap_lo:e}, gap(hi)={gap_hi:e}")]
    IndexOutsideBracket {
        state: usize,
        lo: f64,
        hi: f64,
        gap_lo: f64,
        gap_hi: f64,
    },

    #[error("inconsistent value functions at state {state}: neither Bellman equality holds (gaps {gap_passive:e}, {gap_active:e})")]
    InconsistentValues {
        state: usize,
        gap_passive: f64,
        gap_active: f64,
    },

    #[error("ill-conditioned system: condition number {condition:e}")]
    IllConditioned { condition: f64 },

    #[error("row selection inconsistent: solved index {solved} vs binary search {searched}")]
    RowSelectionInconsistent { solved: f64, searched: f64 },

    #[error("backward on unconverged transport (residual {residual:e} after {iterations} iterations)")]
    UnconvergedTransport { iterations: usize, residual: f64 },

    #[error("unsupported behavior action: behavior probability {prob} at trajectory {trajectory}, step {step}, arm {arm}")]
    UnsupportedBehaviorAction {
        trajectory: usize,
        step: usize,
        arm: usize,
        prob: f64,
    },

    #[error("CWPDIS needs at least two trajectories; use the single-trajectory variant")]
    SingleTrajectory,

    #[error("collapsing bandits implemented for 2 states only (got {0})")]
    CollapsingStates(usize),

    #[error("rejection sampling exhausted after {attempts} attempts at state {state}")]
    RejectionExhausted { state: usize, attempts: usize },

    #[error("arm {arm}: {source}")]
    Arm {
        arm: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("arm {arm}, state {state}: {source}")]
    ArmState {
        arm: usize,
        state: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numeric abort in stage `{stage}`: {detail}")]
    NumericAbort { stage: &'static str, detail: String },

    #[error("stage `{stage}` failed on instance {instance}: {source}")]
    Stage {
        stage: &'static str,
        instance: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn for_arm(self, arm: usize) -> Self {
        Error::Arm {
            arm,
            source: Box::new(self),
        }
    }

    pub fn for_arm_state(self, arm: usize, state: usize) -> Self {
        Error::ArmState {
            arm,
            state,
            source: Box::new(self),
        }
    }

    pub fn in_stage(self, stage: &'static str, instance: usize) -> Self {
        Error::Stage {
            stage,
            instance,
            source: Box::new(self),
        }
    }

    /// True when the error (or any wrapped cause) is a numeric abort.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericAbort { .. }
            | Error::NonConvergence { .. }
            | Error::IllConditioned { .. }
            | Error::RowSelectionInconsistent { .. }
            | Error::UnconvergedTransport { .. }
            | Error::IndexOutsideBracket { .. }
            | Error::InconsistentValues { .. } => true,
            Error::Arm { source, .. } | Error::ArmState { source, .. } | Error::Stage { source, .. } => {
                source.is_numeric()
            }
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) | Error::Json(_) => true,
            Error::Arm { source, .. } | Error::ArmState { source, .. } | Error::Stage { source, .. } => {
                source.is_io()
            }
            _ => false,
        }
    }
}
