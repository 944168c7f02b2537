//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A coefficient vector or attribute buffer does not match the model.
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Two grids that must share a shape do not.
    #[error("shape mismatch: {what} is {got_w}x{got_h}, expected {expected_w}x{expected_h}")]
    ShapeMismatch {
        what: &'static str,
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    /// A raster cache was produced from a different mesh topology.
    #[error("topology mismatch: cache built for {cache_triangles} triangles, mesh has {mesh_triangles}")]
    TopologyMismatch {
        cache_triangles: usize,
        mesh_triangles: usize,
    },

    /// A least-squares system could not be solved.
    #[error("least-squares system is rank deficient (condition estimate {condition:.3e})")]
    RankDeficient { condition: f64 },

    /// Too few usable pixels to pose a solvable system.
    #[error("{context}: need at least {need} valid pixels, got {got}")]
    TooFewPixels {
        context: &'static str,
        need: usize,
        got: usize,
    },

    /// An optimization produced a non-finite value.
    #[error("non-finite value encountered in {what}")]
    NonFinite { what: String },

    /// An operation that requires a nonempty mask was given an empty one.
    #[error("empty mask: {context}")]
    EmptyMask { context: &'static str },

    /// Interpolation parameter outside [0, 1].
    #[error("beta must lie in [0, 1], got {beta}")]
    BetaOutOfRange { beta: f64 },

    /// A numerical verification did not meet its threshold.
    #[error("check failed: {name}")]
    CheckFailed { name: String },

    /// Model construction or load-time validation failure.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Pose validation failure.
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or unsupported file contents.
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerical machinery rather than of usage
    /// (bad flags, missing files, malformed inputs). The CLI maps the two
    /// classes to different exit codes.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::TooFewPixels { .. }
                | Error::NonFinite { .. }
                | Error::EmptyMask { .. }
                | Error::CheckFailed { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
