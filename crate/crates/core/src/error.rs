use thiserror::Error;

#[derive(Debug, Error)]
pub enum SingError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("exponent {value:.3e} exceeds the clamp threshold (component {component})")]
    ExponentOverflow { component: usize, value: f64 },

    #[error("component {component}: {samples} samples but {coefficients} coefficients")]
    InsufficientSamples {
        component: usize,
        samples: usize,
        coefficients: usize,
    },

    #[error("component {component}: no convergence after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        component: usize,
        iterations: usize,
        grad_norm: f64,
    },

    #[error("component {component}: Hessian not positive definite even with damping {damping:.1e}")]
    SingularHessian { component: usize, damping: f64 },

    #[error("component {component}: information matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { component: usize, min_eigenvalue: f64 },

    #[error("map inversion diverged for component {component}: root not bracketed")]
    InversionDivergence { component: usize },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<SingError>,
    },

    /// `row` and `column` are 1-based; `row` counts data rows after the header.
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SingError {
    pub fn context(self, context: impl Into<String>) -> Self {
        SingError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &SingError {
        match self {
            SingError::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerical procedures (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            SingError::ExponentOverflow { .. }
                | SingError::NonConvergence { .. }
                | SingError::SingularHessian { .. }
                | SingError::NotPsd { .. }
                | SingError::InversionDivergence { .. }
                | SingError::NotPositiveDefinite
                | SingError::InsufficientSamples { .. }
        )
    }
}

pub type Result<T, E = SingError> = std::result::Result<T, E>;
