use std::path::PathBuf;

/// Every failure the toolkit reports.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid disc spec: {0}")]
    InvalidSpec(String),

    #[error("segment index {index} out of range for {segments} segments")]
    IndexOutOfRange { index: usize, segments: usize },

    #[error("singular configuration: {0}")]
    SingularConfiguration(String),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient matches: found {found}, need at least {required}")]
    InsufficientMatches { found: usize, required: usize },

    #[error("pose estimation failed: {0}")]
    EstimationFailed(String),

    #[error("victim failure: {0}")]
    Victim(String),

    #[error("attack aborted: {0}")]
    AttackAborted(String),

    #[error("bad magic: expected `PMAP`")]
    BadMagic,

    #[error("truncated input: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("unsupported format version {0}")]
    VersionMismatch(u32),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config key `{key}`: cannot parse `{value}`")]
    TypeMismatch { key: String, value: String },

    #[error("missing required config key `{0}`")]
    MissingKey(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::IndexOutOfRange { .. }
                | Error::SingularConfiguration(_)
                | Error::InvalidPose(_)
                | Error::InvalidIntrinsics(_)
                | Error::InvalidScene(_)
                | Error::InvalidConfig(_)
                | Error::InvalidInput(_)
                | Error::BadMagic
                | Error::Truncated { .. }
                | Error::VersionMismatch(_)
                | Error::Malformed(_)
                | Error::UnknownKey(_)
                | Error::TypeMismatch { .. }
                | Error::MissingKey(_)
        )
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
