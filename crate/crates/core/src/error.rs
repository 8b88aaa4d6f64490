// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

use crate::autodiff::TensorError;
use crate::embed::EmbedError;
use crate::parser::ParseError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Top-level error. Every variant maps to one process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("incompatible backbone: {0}")]
    IncompatibleBackbone(String),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Json(_) => "config",
            Error::Parse(ParseError::Config(_) | ParseError::MaskPattern { .. } | ParseError::LineFormat(_)) => {
                "config"
            }
            Error::Tensor(_) => "config",
            Error::Divergence(_) => "divergence",
            _ => "data",
        }
    }

    /// Process exit code: 2 config, 3 data, 4 non-finite training loss.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "divergence" => 4,
            _ => 3,
        }
    }
}
