use thiserror::Error;

pub type Result<T> = std::result::Result<T, CqError>;

#[derive(Debug, Clone, Error)]
pub enum CqError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not Hermitian (residual {residual:e})")]
    Symmetry { residual: f64 },

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("step size too large: {0}")]
    StepSize(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("unsupported model: {0}")]
    Unsupported(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<CqError>,
    },
}

impl CqError {
    pub fn at_step(self, step: usize) -> Self {
        match self {
            e @ CqError::AtStep { .. } => e,
            e => CqError::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// The underlying error with step annotations removed.
    pub fn root(&self) -> &CqError {
        match self {
            CqError::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures that a smaller step size or a different initial
    /// condition could avoid (step-size, non-finite).
    pub fn is_numerical(&self) -> bool {
        matches!(self.root(), CqError::StepSize(_) | CqError::NonFinite(_))
    }
}
