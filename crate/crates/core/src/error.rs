use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "warp is not invertible: gain {gain} x max|dz/dx| {max_gradient:.6} = {product:.6} (must be < 0.9)"
    )]
    NonInvertibleWarp {
        gain: f64,
        max_gradient: f64,
        product: f64,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{what} {width}x{height} is not a multiple of {multiple}")]
    NotDivisible {
        what: &'static str,
        width: usize,
        height: usize,
        multiple: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("point ({x:.3}, {y:.3}) lies outside the {width}x{height} image")]
    OutOfImage {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
