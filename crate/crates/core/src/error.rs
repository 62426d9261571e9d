use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    Dimension {
        context: String,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown language tag: {0}")]
    UnknownTag(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("CTC target infeasible: {frames} frames but target requires at least {required}")]
    CtcInfeasible { frames: usize, required: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(context: &str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dimension {
            context: context.to_string(),
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }

    /// Process exit code for the CLI: 2 for contract-level errors, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }

    /// Prefix the message with the component that raised it.
    pub fn in_component(self, component: &str) -> Self {
        match self {
            Error::Contract(m) => Error::Contract(format!("{component}: {m}")),
            Error::CtcInfeasible { frames, required } => Error::Contract(format!(
                "{component}: CTC target infeasible: {frames} frames but target requires at least {required}"
            )),
            Error::Numerical(m) => Error::Numerical(format!("{component}: {m}")),
            Error::Config(m) => Error::Config(format!("{component}: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
