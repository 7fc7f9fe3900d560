use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{column}` has {got} entries, expected {expected}")]
    LengthMismatch {
        column: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("treatment label {label} out of range 1..={num_treatments}")]
    LabelOutOfRange { label: usize, num_treatments: usize },

    #[error("treatment group {arm} is empty")]
    EmptyGroup { arm: usize },

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("non-finite value in column `{column}` at row {row}")]
    NonFinite { column: &'static str, row: usize },

    #[error("{0}")]
    InvalidInput(String),

    #[error(
        "covariance matrix is singular (eigenvalues in [{smallest:.3e}, {largest:.3e}]); \
         near-collinear columns: {columns:?}"
    )]
    SingularCovariance {
        smallest: f64,
        largest: f64,
        columns: Vec<usize>,
    },

    #[error(
        "null variance 1/12 - b'Sb = {value:.6e} is not positive; \
         the calibration estimate is inconsistent with a valid placement variance"
    )]
    NonPositiveNullVariance { value: f64 },

    #[error("block size {block_size} incompatible with allocation: {block_size} * pi_{arm} = {product} is not a positive integer")]
    IncompatibleBlockSize {
        block_size: usize,
        arm: usize,
        product: f64,
    },

    #[error("replication {index} (seed {seed}) failed: {source}")]
    Replication {
        index: usize,
        seed: u64,
        source: Box<Error>,
    },
}
