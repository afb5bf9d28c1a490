use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not line up (channel counts, batch, concat parts).
    #[error("shape error in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    /// A kernel or pooling window that would produce an empty output.
    #[error("geometry error in {layer}: {detail}")]
    Geometry { layer: String, detail: String },

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing weight blob `{0}`")]
    MissingBlob(String),

    #[error("blob `{name}` has shape {found:?}, expected {expected:?}")]
    BlobShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// Malformed binary input. `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    /// Malformed text input (annotations, detection lines, structured dumps).
    #[error("{source_name}:{line}: {detail}")]
    Parse {
        source_name: String,
        line: usize,
        detail: String,
    },

    #[error("unknown class name `{0}`")]
    UnknownClass(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn geometry(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Geometry {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(offset: usize, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    /// Re-labels kernel-level shape and geometry errors with the graph layer they came from.
    pub(crate) fn in_layer(self, name: &str) -> Self {
        match self {
            Error::Shape { layer, detail } => Error::Shape {
                layer: qualify(name, &layer),
                detail,
            },
            Error::Geometry { layer, detail } => Error::Geometry {
                layer: qualify(name, &layer),
                detail,
            },
            other => other,
        }
    }
}

fn qualify(outer: &str, inner: &str) -> String {
    if inner.is_empty() {
        outer.to_string()
    } else {
        format!("{outer}/{inner}")
    }
}
