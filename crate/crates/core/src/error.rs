use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ring size {0} outside supported range 5..=8")]
    RingSize(usize),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid ring: {0}")]
    InvalidRing(String),

    #[error("unsupported bond order {0}")]
    BondOrder(f64),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A bond whose endpoint displacements differ by more than its length.
    #[error("infeasible bond {bond}: |dz| = {delta_z:.6} exceeds bond length {bond_length:.6}")]
    Feasibility {
        bond: usize,
        delta_z: f64,
        bond_length: f64,
    },

    #[error("projected polygon is concave at atom {atom}")]
    Concave { atom: usize },

    #[error("reconstruction failed: {message} (residual {residual:.3e})")]
    Reconstruction { message: String, residual: f64 },

    #[error("bond parameter keys of different kinds cannot be compared")]
    KeyKindMismatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty ensemble in ring {0}")]
    EmptyEnsemble(String),

    #[error("time {0} outside [0, 1]")]
    InvalidTime(f64),

    #[error("non-finite loss for batch item {item}")]
    NonFiniteLoss { item: String },

    #[error("hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("prior resample budget exhausted after {0} attempts")]
    ResampleBudget(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
