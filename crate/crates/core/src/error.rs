use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("hole corner {corner:?} is not on the lattice of resolution {resolution}")]
    NonAligned { corner: [f64; 2], resolution: usize },
    #[error("holes closer than the separation constant: distance {distance} < {separation}")]
    TooClose { distance: f64, separation: f64 },
    #[error("invalid cell: {0}")]
    InvalidCell(String),
    #[error("scale mismatch: {0}")]
    ScaleMismatch(String),
    #[error("layer too thick: n*eps = {thickness} must stay below {limit}")]
    LayerTooThick { thickness: f64, limit: f64 },
    #[error("ball radius {radius} too small for element diameter {diameter}")]
    RadiusTooSmall { radius: f64, diameter: f64 },
    #[error("coefficient is not elliptic: sampled eigenvalue {eigenvalue} below declared {declared}")]
    NotElliptic { eigenvalue: f64, declared: f64 },
    #[error("structure audit failed: empirical mu0 = {mu0}")]
    AuditFailed { mu0: f64 },
    #[error("Newton iteration diverged after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },
    #[error("singular Jacobian: {0}")]
    SingularJacobian(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("flux field mean {mean:e} exceeds tolerance {tol:e}")]
    MeanNotZero { mean: f64, tol: f64 },
    #[error("xi = {xi:?} outside corrector table range [-{radius}, {radius}]^2")]
    TableRangeExceeded { xi: [f64; 2], radius: f64 },
    #[error("smoothing stencil leaves the support of the field at {point:?}")]
    SupportViolation { point: [f64; 2] },
    #[error("fields live on different meshes")]
    MeshMismatch,
    #[error("mask selects no elements")]
    EmptyMask,
    #[error("extension input has nonzero trace {value:e} on the outer boundary")]
    NonzeroTrace { value: f64 },
    #[error("ball B({center:?}, {radius}) leaves the domain")]
    BallOutsideDomain { center: [f64; 2], radius: f64 },
    #[error("degenerate rate fit: {0}")]
    DegenerateFit(String),
    #[error("invalid problem setup: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corrupt data file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
