use thiserror::Error;

/// Errors raised by the MoLDS library.
#[derive(Debug, Error)]
pub enum MoldsError {
    #[error("dimension mismatch in `{field}`: expected {expected}, got {got}")]
    Dimension {
        field: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument `{field}`: {reason}")]
    InvalidArgument { field: &'static str, reason: String },

    #[error("insufficient Markov parameters: Hankel needs L >= {required}, have {available}")]
    InsufficientMarkov { required: usize, available: usize },

    #[error("filter divergence at step {step}: innovation covariance not positive definite")]
    FilterDivergence { step: usize },

    #[error("degenerate inputs: input scale is zero")]
    DegenerateInputs,

    #[error("empty partition: {0}")]
    EmptyPartition(&'static str),

    #[error("mixture rank deficient: need {k} positive eigenvalues of M2, spectrum {spectrum:?}; try a smaller K")]
    RankDeficient { k: usize, spectrum: Vec<f64> },

    #[error("matrix `{0}` is not symmetric")]
    NotSymmetric(String),

    #[error("joint diagonalizer is singular after {0} attempts")]
    SingularDiagonalizer(usize),

    #[error("singular regression block for component {component}")]
    SingularRegression { component: usize },

    #[error("log-likelihood decreased at iteration {iter}: {prev} -> {cur}")]
    LikelihoodDecrease { iter: usize, prev: f64, cur: f64 },

    #[error("all trials diverged under every component")]
    AllDiverged,

    #[error("component separation {target} unattainable in {draws} draws")]
    SeparationUnattainable { target: f64, draws: usize },

    #[error("every grid point failed")]
    AllGridPointsFailed,

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<MoldsError>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MoldsError {
    pub(crate) fn dim(field: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        MoldsError::Dimension {
            field,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        MoldsError::InvalidArgument {
            field,
            reason: reason.into(),
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ MoldsError::Stage { .. } => e,
            e => MoldsError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Strips stage wrappers.
    pub fn root(&self) -> &MoldsError {
        match self {
            MoldsError::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, MoldsError>;
