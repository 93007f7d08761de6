use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("frame {frame}: {message}")]
    Frame { frame: String, message: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no surface at iso level {0}")]
    NoSurface(f64),

    #[error("texture of {size}x{size} texels cannot hold {triangles} triangle charts")]
    AtlasCapacity { size: usize, triangles: usize },

    #[error("optimization diverged at step {step}: loss {loss:.6e} exceeded 10x the initial {initial:.6e} for {run} consecutive steps")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        run: usize,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn frame(frame: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Frame {
            frame: frame.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
