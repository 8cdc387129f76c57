use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, range, ordering).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// Malformed latent token stream or text file, with 1-based line numbers when known.
    #[error("{0}")]
    Parse(ParseErrors),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(ParseErrors(vec![ParseError {
            line: None,
            message: msg.into(),
        }]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseErrors(pub Vec<ParseError>);

impl ParseErrors {
    /// Line numbers of all failures, in file order.
    pub fn lines(&self) -> Vec<usize> {
        self.0.iter().filter_map(|e| e.line).collect()
    }
}

impl fmt::Display for ParseErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            match e.line {
                Some(line) => write!(f, "line {line}: {}", e.message)?,
                None => write!(f, "{}", e.message)?,
            }
        }
        Ok(())
    }
}
