use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("scan {index} has {found} landmarks, expected {expected}")]
    LandmarkCountMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("requested {requested} shape bases but only {available} are available")]
    RankExceeded { requested: usize, available: usize },

    #[error("scan {0} carries no surface normals")]
    MissingNormals(usize),

    #[error("mean surface normal of landmark {0} has vanishing length")]
    DegenerateNormal(usize),

    #[error("degenerate projection matrix: {0}")]
    DegenerateProjection(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("too few visible landmarks: need {needed}, found {found}")]
    TooFewVisible { needed: usize, found: usize },

    #[error("too few samples: need {needed}, found {found}")]
    TooFewSamples { needed: usize, found: usize },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("deformable model fingerprint {found} does not match cascade ({expected})")]
    ModelMismatch { expected: String, found: String },

    #[error("unsupported format_version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("{path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::DegenerateNormal(_)
            | Error::DegenerateProjection(_)
            | Error::DegenerateConfiguration(_)
            | Error::Singular(_) => true,
            Error::Layer { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn at_layer(self, layer: usize) -> Error {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
