use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular element {element}: jacobian determinant {det:e}")]
    SingularElement { element: usize, det: f64 },

    #[error("under-constrained system: zero pivot at dof {dof}")]
    UnderConstrained { dof: usize },

    #[error("linear solve failed: relative residual {residual:e}")]
    SolverFailure { residual: f64 },

    #[error("regularization too weak: combined hessian not positive definite (smallest pivot {pivot:e} at dof {dof})")]
    RegularizationTooWeak { dof: usize, pivot: f64 },

    #[error("registration diverged at iteration {iteration}: non-finite objective")]
    Divergence { iteration: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, with any context layers stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short machine-readable tag used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self.root() {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::SingularElement { .. } => "singular-element",
            Error::UnderConstrained { .. } => "under-constrained",
            Error::SolverFailure { .. } => "solver-failure",
            Error::RegularizationTooWeak { .. } => "regularization-too-weak",
            Error::Divergence { .. } => "divergence",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Incompatible(_) => "incompatible",
            Error::NotFound(_) => "not-found",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Context { .. } => unreachable!(),
        }
    }
}
