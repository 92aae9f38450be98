use thiserror::Error;

/// Error codes shared by every module. Each variant maps to one failure
/// condition named in the module contracts.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("table needs at least two obstacles, got {0}")]
    TooFewObstacles(usize),
    #[error("invalid obstacle {index}: {reason}")]
    InvalidObstacle { index: usize, reason: String },
    #[error("obstacles {first} and {second} (translate {shift:?}) overlap: gap {gap:.3e}")]
    Overlap {
        first: usize,
        second: usize,
        shift: [i64; 2],
        gap: f64,
    },
    #[error("probed flight of length > {cap} from obstacle {obstacle}: table likely has a corridor")]
    HorizonSuspect { obstacle: usize, cap: f64 },
    #[error("incoming direction expected, <v,n> = {0:.3e} > 0")]
    NotIncoming(f64),
    #[error("ray is numerically tangent to an obstacle (discriminant {0:.3e})")]
    NumericalTangency(f64),
    #[error("free flight exceeded the horizon cap {0}")]
    FlightCapExceeded(f64),
    #[error("point is off the obstacle boundary by {0:.3e}")]
    OffBoundary(f64),
    #[error("quadrature did not converge within depth cap {0}")]
    QuadratureUnstable(usize),
    #[error("return to cell 0 not observed within {0} steps")]
    ReturnCapExceeded(u64),
    #[error("window of {window} lags too small: last term {last:.3e} above noise floor {floor:.3e}")]
    WindowTooSmall { window: usize, last: f64, floor: f64 },
    #[error("observable is not centered: integral {integral:.3e} with stderr {stderr:.3e}")]
    NotCentered { integral: f64, stderr: f64 },
    #[error("degenerate matrix: determinant {0:.3e}")]
    DegenerateMatrix(f64),
    #[error("variance indistinguishable from zero: {value:.3e} (stderr {stderr:.3e})")]
    VarianceDegenerate { value: f64, stderr: f64 },
    #[error("insufficient bins: {0}")]
    InsufficientBins(usize),
    #[error("spectral gap collapsed at u = ({0:.4}, {1:.4})")]
    GapCollapse(f64, f64),
    #[error("lattice box of radius {box_radius} smaller than support radius {needed}")]
    TruncationError { box_radius: i64, needed: i64 },
    #[error("series tail not certified: {0}")]
    TailNotCertified(String),
    #[error("composition {parts:?} does not sum to {m}")]
    CompositionMismatch { m: usize, parts: Vec<usize> },
    #[error("moment assembly mismatch at m = {m}: {assembled} != {closed}")]
    MismatchDetected {
        m: usize,
        assembled: String,
        closed: String,
    },
    #[error("invalid chain: {0}")]
    InvalidChain(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Failures of a single trajectory that a fresh sample may avoid.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalTangency(_) | Error::FlightCapExceeded(_) | Error::OffBoundary(_) | Error::QuadratureUnstable(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
