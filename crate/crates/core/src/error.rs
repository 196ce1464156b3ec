use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Two operands whose shapes cannot be combined.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A buffer whose length disagrees with the product of its shape.
    BadShape { shape: Vec<usize>, len: usize },
    OutOfVocab { id: usize, vocab_size: usize },
    Config(String),
    /// Every position of a loss was ignored.
    EmptyLoss,
    TapeConsumed,
    NotScalar(Vec<usize>),
    NonFinite(String),
    Contract(String),
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::BadShape { shape, len } => {
                write!(f, "shape {shape:?} does not describe a buffer of length {len}")
            }
            Error::OutOfVocab { id, vocab_size } => {
                write!(f, "token id {id} out of vocabulary of size {vocab_size}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::EmptyLoss => write!(f, "loss has no scored positions (all targets ignored)"),
            Error::TapeConsumed => write!(f, "tape already consumed by a previous backward pass"),
            Error::NotScalar(shape) => write!(f, "backward requires a scalar, got shape {shape:?}"),
            Error::NonFinite(what) => write!(f, "non-finite value: {what}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
