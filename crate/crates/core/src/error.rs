use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("geometry has {0} source(s); at least two are required")]
    EmptyGeometry(usize),

    #[error("correlation order must be at least {min}, got {got}")]
    Order { got: usize, min: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix of size {size} exceeds permanent cap {cap}")]
    PermanentSize { size: usize, cap: usize },

    #[error("{samples} samples cannot resolve frequencies up to {span} (need at least {required})")]
    Aliasing { samples: usize, span: u32, required: usize },

    #[error("degenerate pixel {pixel}: mean intensity is zero")]
    DegeneratePixel { pixel: usize },

    #[error("grid does not cover magic position {position:.6} rad")]
    Coverage { position: f64 },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("evidence contains no present frequency")]
    EmptyEvidence,

    #[error("search bounds exceeded: {0}")]
    Bounds(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
