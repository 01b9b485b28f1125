use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("column range {lo}..{hi} out of bounds for {cols} columns")]
    Index { lo: usize, hi: usize, cols: usize },
    #[error("graph error: {0}")]
    Graph(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("routing violation at layer {layer}: {clause}")]
    Routing { layer: usize, clause: String },
    #[error("accounting violation: {0}")]
    Accounting(String),
    #[error("infeasible budget {budget}: cheapest exit costs {min}")]
    InfeasibleBudget { budget: f64, min: u64 },
    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
