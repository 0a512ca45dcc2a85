use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric at ({i}, {j}): |d_ij - d_ji| = {diff:.3e}")]
    AsymmetricMatrix { i: usize, j: usize, diff: f64 },

    #[error("negative or non-finite entry {value} at ({i}, {j})")]
    NegativeEntry { i: usize, j: usize, value: f64 },

    #[error("non-zero diagonal entry {value} at index {i}")]
    NonzeroDiagonal { i: usize, value: f64 },

    #[error("triangle inequality violated on ({i}, {j}, {k}) by {excess:.3e}")]
    TriangleInequality { i: usize, j: usize, k: usize, excess: f64 },

    #[error("weights are not a probability vector: {reason}")]
    WeightsNotSimplex { reason: String },

    #[error("size mismatch: expected {expected}, found {found} ({context})")]
    SizeMismatch {
        expected: usize,
        found: usize,
        context: &'static str,
    },

    #[error("problem size {size} exceeds the bound {bound} for {context}")]
    SizeBoundExceeded {
        size: usize,
        bound: usize,
        context: &'static str,
    },

    #[error("degenerate extent: {0}")]
    DegenerateExtent(String),

    #[error("graph is disconnected ({} components)", components.len())]
    DisconnectedGraph { components: Vec<Vec<usize>> },

    #[error("feature row {0} is constant; correlation distance is undefined")]
    ConstantFeatureRow(usize),

    #[error("k = {k} is too large for {n} samples")]
    KTooLarge { k: usize, n: usize },

    #[error("index {index} out of range for {len} items ({context})")]
    IndexOutOfRange {
        index: usize,
        len: usize,
        context: &'static str,
    },

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("marginals carry different total mass ({a} vs {b})")]
    InfeasibleMarginals { a: f64, b: f64 },

    #[error("solver did not converge after {iterations} iterations (marginal violation {violation:.3e})")]
    NotConverged { iterations: usize, violation: f64 },

    #[error("numerical overflow in {0}")]
    NumericalOverflow(&'static str),

    #[error("no isometric embedding of input {input} into the reference space")]
    NoIsometricEmbedding { input: usize },

    #[error("enumeration of isometric embeddings exceeds the bound {bound}")]
    EnumerationBoundExceeded { bound: usize },

    #[error("geometry {0} does not support this operation")]
    UnsupportedGeometry(String),

    #[error("every row of the coupling carries zero mass")]
    AllMassZero,

    #[error("count mismatch: {left} vs {right} ({context})")]
    CountMismatch {
        left: usize,
        right: usize,
        context: &'static str,
    },

    #[error("incompatible corpus: {0}")]
    IncompatibleCorpus(String),

    #[error("marginal mismatch of {violation:.3e} between {context}")]
    MarginalMismatch { violation: f64, context: &'static str },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotSquare { .. } => "NotSquare",
            Error::AsymmetricMatrix { .. } => "AsymmetricMatrix",
            Error::NegativeEntry { .. } => "NegativeEntry",
            Error::NonzeroDiagonal { .. } => "NonzeroDiagonal",
            Error::TriangleInequality { .. } => "TriangleInequality",
            Error::WeightsNotSimplex { .. } => "WeightsNotSimplex",
            Error::SizeMismatch { .. } => "SizeMismatch",
            Error::SizeBoundExceeded { .. } => "SizeBoundExceeded",
            Error::DegenerateExtent(_) => "DegenerateExtent",
            Error::DisconnectedGraph { .. } => "DisconnectedGraph",
            Error::ConstantFeatureRow(_) => "ConstantFeatureRow",
            Error::KTooLarge { .. } => "KTooLarge",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::NotPositiveDefinite(_) => "NotPositiveDefinite",
            Error::InfeasibleMarginals { .. } => "InfeasibleMarginals",
            Error::NotConverged { .. } => "NotConverged",
            Error::NumericalOverflow(_) => "NumericalOverflow",
            Error::NoIsometricEmbedding { .. } => "NoIsometricEmbedding",
            Error::EnumerationBoundExceeded { .. } => "EnumerationBoundExceeded",
            Error::UnsupportedGeometry(_) => "UnsupportedGeometry",
            Error::AllMassZero => "AllMassZero",
            Error::CountMismatch { .. } => "CountMismatch",
            Error::IncompatibleCorpus(_) => "IncompatibleCorpus",
            Error::MarginalMismatch { .. } => "MarginalMismatch",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::Io { .. } => "Io",
            Error::Parse { .. } => "Parse",
        }
    }
}
