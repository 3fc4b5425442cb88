use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Leader and follower already overlap; the kinematic state is invalid.
    #[error("vehicles overlap (gap {gap} m)")]
    Overlap { gap: f64 },

    #[error("{0}")]
    Domain(String),

    #[error("distribution has unmapped no-conflict mass {mass}")]
    UnboundedSupport { mass: f64 },

    #[error("histogram has no observations")]
    EmptyHistogram,

    #[error("{0}")]
    Mapping(String),

    #[error("{0}")]
    Config(String),

    #[error("flow {flow} veh/h exceeds capacity {capacity} veh/h")]
    InfeasibleFlow { flow: f64, capacity: f64 },

    #[error("no absorbing state is reachable from any transient state")]
    NoExit,

    #[error("accident state unreachable from state {state}; expected exit time is infinite")]
    InfiniteExitTime { state: usize },

    #[error("walk from state {start} not absorbed within {cap} steps")]
    NonAbsorption { start: usize, cap: u64 },

    #[error("trace is empty or too short")]
    EmptyTrace,

    #[error("{0}")]
    Parse(String),

    #[error("{0}")]
    Io(String),
}

impl Error {
    /// Stable name of the error class, used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Overlap { .. } => "OverlapError",
            Error::Domain(_) => "DomainError",
            Error::UnboundedSupport { .. } => "UnboundedSupportError",
            Error::EmptyHistogram => "EmptyHistogramError",
            Error::Mapping(_) => "MappingError",
            Error::Config(_) => "ConfigError",
            Error::InfeasibleFlow { .. } => "InfeasibleFlowError",
            Error::NoExit => "NoExitError",
            Error::InfiniteExitTime { .. } => "InfiniteExitTimeError",
            Error::NonAbsorption { .. } => "NonAbsorptionError",
            Error::EmptyTrace => "EmptyTraceError",
            Error::Parse(_) => "ParseError",
            Error::Io(_) => "IoError",
        }
    }

    /// True for errors caused by bad user input rather than by the computation.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse(_) | Error::Io(_) | Error::Mapping(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
