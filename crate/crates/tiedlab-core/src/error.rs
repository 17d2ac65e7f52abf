//! Error type shared by every module in the crate.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Dimension, divisibility or layout violation in a kernel or layer.
    Shape(String),
    /// A value outside its legal range (labels, sample counts, flags).
    Input(String),
    /// Model configuration rejected during validation; the layer index is
    /// included when the offending layer is known.
    Config {
        layer: Option<usize>,
        message: String,
    },
    /// A config document that could not be parsed at all.
    Parse(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(layer: usize, msg: impl Into<String>) -> Self {
        Error::Config {
            layer: Some(layer),
            message: msg.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Config {
                layer: Some(i),
                message,
            } => write!(f, "config error: layer {i}: {message}"),
            Error::Config {
                layer: None,
                message,
            } => write!(f, "config error: {message}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
