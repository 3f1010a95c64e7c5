use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label error: label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("argument error: {0}")]
    Argument(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("dataset error: empty dataset")]
    EmptyDataset,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("degenerate kernel row for sample {sample_id}: all values equal")]
    DegenerateRow { sample_id: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure after {last_finite_step} finite steps: {message}")]
    Numerical {
        last_finite_step: usize,
        message: String,
    },
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
