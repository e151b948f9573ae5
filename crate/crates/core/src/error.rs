use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid class label {0:?}")]
    InvalidLabel(String),

    #[error("unknown {kind} template id {id}")]
    UnknownTemplate { kind: &'static str, id: usize },

    #[error("invalid template manifest: {0}")]
    TemplateManifest(String),

    #[error("invalid edit rule: {0}")]
    InvalidEditRule(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("gateway unavailable after {attempts} attempt(s): {message}")]
    GatewayUnavailable { attempts: u32, message: String },

    #[error("bad response from gateway: {0}")]
    BadResponse(String),

    #[error("gateway call failed at batch position {position}: {source}")]
    AtPosition {
        position: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty candidate batch")]
    EmptyBatch,

    #[error("invalid selection policy: {0}")]
    InvalidPolicy(String),

    #[error("no foreground found (area fraction {area_fraction:.4})")]
    NoForeground { area_fraction: f64 },

    #[error("background is not uniform (border std {std_dev:.2} > {limit:.2})")]
    BackgroundNotUniform { std_dev: f64, limit: f64 },

    #[error("foreground too large (area fraction {area_fraction:.4})")]
    OversizedForeground { area_fraction: f64 },

    #[error("mask is empty")]
    EmptyMask,

    #[error("image is {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall { width: u32, height: u32, min: u32 },

    #[error("transform produced a degenerate mask ({area} px)")]
    DegenerateTransform { area: usize },

    #[error("paste at ({x}, {y}) of a {width}x{height} asset does not fit the canvas")]
    OutOfBounds { x: i64, y: i64, width: u32, height: u32 },

    #[error("no background available")]
    NoBackground,

    #[error("{0} pool is empty")]
    EmptyPool(&'static str),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("image codec error: {0}")]
    Codec(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("schema invariant violated: {0}")]
    SchemaInvariantViolation(String),

    #[error("category sets differ: {0}")]
    CategoryMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pipeline invariant violated: {0}")]
    Pipeline(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in talking to a model backend.
    pub fn is_gateway(&self) -> bool {
        match self {
            Error::GatewayUnavailable { .. } | Error::BadResponse(_) => true,
            Error::AtPosition { source, .. } => source.is_gateway(),
            _ => false,
        }
    }

    /// Process exit code: 2 configuration, 3 gateway, 4 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidPolicy(_)
            | Error::InvalidParams(_)
            | Error::InvalidLabel(_)
            | Error::TemplateManifest(_)
            | Error::InvalidEditRule(_) => 2,
            e if e.is_gateway() => 3,
            _ => 4,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
