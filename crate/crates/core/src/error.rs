use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("infinite divergence: kl({q} || {p})")]
    InfiniteDivergence { q: f64, p: f64 },
    #[error("non-differentiable point: q={q}, c={c}")]
    NonDifferentiable { q: f64, c: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("confidence budget {0} is not below 1")]
    Budget(f64),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
