use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {file}: {field}: {detail}")]
    Format {
        file: String,
        field: &'static str,
        detail: String,
    },

    #[error("index {index} out of bounds (len {len})")]
    Bounds { index: usize, len: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("degenerate network: all weights are zero")]
    DegenerateNetwork,

    #[error("layer with {fan_out} outputs needs {needed} bit lines, crossbar has {cols}")]
    TooWide {
        fan_out: usize,
        needed: usize,
        cols: usize,
    },

    #[error("conductance {conductance} S matches no RTN level")]
    NoRtnLevel { conductance: f64 },

    #[error("singular nodal system: {0}")]
    Singular(String),

    #[error("solver failed on tile {tile}{}: {source}", iteration.map(|i| format!(" (iteration {i})")).unwrap_or_default())]
    TileSolve {
        tile: usize,
        iteration: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate sample: {0}")]
    DegenerateSample(&'static str),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI's error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Bounds { .. } => "bounds",
            Error::EmptyInput(_) => "empty_input",
            Error::Dimension { .. } => "dimension",
            Error::Architecture(_) => "architecture",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::DegenerateNetwork => "degenerate_network",
            Error::TooWide { .. } => "too_wide",
            Error::NoRtnLevel { .. } => "no_rtn_level",
            Error::Singular(_) => "singular",
            Error::TileSolve { .. } => "tile_solve",
            Error::DegenerateSample(_) => "degenerate_sample",
            Error::Unknown { .. } => "unknown",
            Error::Serde(_) => "serde",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
