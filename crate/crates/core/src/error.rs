use std::fmt;

pub type Result<T> = std::result::Result<T, MgtError>;

/// Errors raised anywhere in the library.
#[derive(Debug, Clone, PartialEq)]
pub enum MgtError {
    /// Two operands with shapes that the operation cannot combine.
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A caller broke an operation's precondition (e.g. backward on a non-scalar).
    Contract(String),
    /// Input is mathematically degenerate (zero vector, all-zero matrix).
    DegenerateInput(String),
    /// A configuration value is missing, malformed or inconsistent.
    InvalidConfig(String),
    /// An iterative solver stopped before reaching its tolerance.
    NonConvergence {
        sweeps: usize,
        residual: f64,
    },
    /// Non-finite values appeared in a forward pass.
    Instability {
        layer: usize,
        detail: String,
    },
    /// Non-finite gradient for a named parameter.
    NonFiniteGradient {
        param: String,
    },
    /// Two algebraically equal routes disagreed; indicates a bug.
    InternalConsistency {
        what: &'static str,
        max_diff: f64,
    },
    /// Corpus could not be read or is unusable.
    Ingestion(String),
    Io(String),
}

impl fmt::Display for MgtError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dimension { op, left, right } => {
                write!(f, "dimension error in {op}: {left:?} vs {right:?}")
            }
            Self::Contract(msg) => write!(f, "contract violation: {msg}"),
            Self::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Self::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Self::NonConvergence { sweeps, residual } => write!(
                f,
                "eigensolver did not converge after {sweeps} sweeps (residual {residual:e})"
            ),
            Self::Instability { layer, detail } => {
                write!(f, "numerical instability at layer {layer}: {detail}")
            }
            Self::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter {param}")
            }
            Self::InternalConsistency { what, max_diff } => {
                write!(
                    f,
                    "internal consistency check failed for {what}: max diff {max_diff:e}"
                )
            }
            Self::Ingestion(msg) => write!(f, "ingestion error: {msg}"),
            Self::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for MgtError {}

impl From<std::io::Error> for MgtError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl MgtError {
    /// Stable machine-readable code, used in failure JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Dimension { .. } => "dimension",
            Self::Contract(_) => "contract",
            Self::DegenerateInput(_) => "degenerate_input",
            Self::InvalidConfig(_) => "invalid_config",
            Self::NonConvergence { .. } => "non_convergence",
            Self::Instability { .. } => "instability",
            Self::NonFiniteGradient { .. } => "non_finite_gradient",
            Self::InternalConsistency { .. } => "internal_consistency",
            Self::Ingestion(_) => "ingestion",
            Self::Io(_) => "io",
        }
    }
}
