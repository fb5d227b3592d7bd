use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// `q(x) - lambda` is zero or lies on the closed negative real axis.
    #[error("square-root branch failure at x = {x}: q(x) - lambda = {re} + {im}i is not in the slit plane")]
    Branch { x: f64, re: f64, im: f64 },

    #[error("step size underflow at x = {x} (stiff or singular region)")]
    StepUnderflow { x: f64 },

    #[error("integration exceeded {0} steps")]
    TooManySteps(usize),

    #[error("non-finite value encountered at x = {x}")]
    NonFinite { x: f64 },

    #[error("Weyl disk denominator Re(v1 conj(v2)) = {value} is not positive at b = {b}")]
    DiskDenominator { b: f64, value: f64 },

    #[error("disk nesting violated between b = {b1} and b = {b2}: |dc| = {shift}, R1 - R2 = {gap}")]
    Nesting { b1: f64, b2: f64, shift: f64, gap: f64 },

    #[error("Weyl disks did not converge: radius {radius} at b = {b}")]
    NotConverged { b: f64, radius: f64 },

    #[error("no anchor satisfies condition A on the window for lambda = {re} + {im}i")]
    NoAnchor { re: f64, im: f64 },

    #[error("characteristic function nearly vanishes on the contour near lambda = {re} + {im}i")]
    ZeroOnContour { re: f64, im: f64 },

    #[error("phase unwrapping did not stabilise after refinement cap")]
    UnwrapInstability,

    #[error("lambda = {re} + {im}i is numerically an eigenvalue (|W| = {residual})")]
    NearEigenvalue { re: f64, im: f64, residual: f64 },

    #[error("resolvent tail truncation estimate {estimate} exceeds tolerance")]
    TailTruncation { estimate: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("eigensolver failed to converge: {0}")]
    Eigensolver(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
