use thiserror::Error;

/// Errors produced by the differentiation engine.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("{op}: invalid shape {rows}x{cols}: {reason}")]
    InvalidShape {
        op: &'static str,
        rows: usize,
        cols: usize,
        reason: &'static str,
    },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("matrix is singular or ill-conditioned (condition estimate {cond:.3e}, cap {cap:.3e})")]
    IllConditioned { cond: f64, cap: f64 },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("{op}: tensor was not recorded on this tape")]
    TapeMismatch { op: &'static str },
    #[error("{op}: column index {index} out of bounds for {cols} columns")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        cols: usize,
    },
    #[error("max_pool: empty point set")]
    EmptyPointSet,
}

/// A dense row-major matrix of doubles, optionally recorded on a tape.
///
/// All pipeline quantities are matrices; scalars are 1x1. `node` is the
/// handle into the computation record that produced this value, `None` for
/// free-standing constants. The buffer is shared with the tape node that
/// produced it, so clones and op outputs do not copy values.
#[derive(Debug, Clone)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: std::sync::Arc<Vec<f64>>,
    pub(crate) node: Option<NodeRef>,
}

/// Handle tying a tensor to a node of a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub index: usize,
}

impl Tensor {
    /// Builds a constant tensor, validating the element count and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if data.len() != rows * cols {
            return Err(AutodiffError::InvalidShape {
                op: "from_vec",
                rows,
                cols,
                reason: "element count does not match shape",
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "from_vec" });
        }
        Ok(Self {
            rows,
            cols,
            data: std::sync::Arc::new(data),
            node: None,
        })
    }

    /// Shape-checked constructor that tolerates non-finite values; used by
    /// optimizer internals where divergence is detected downstream.
    pub(crate) fn from_vec_unvalidated(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            rows,
            cols,
            data: std::sync::Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: std::sync::Arc::new(vec![0.0; rows * cols]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: std::sync::Arc::new(vec![value]),
            node: None,
        }
    }

    /// Identity matrix of the given size.
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            rows: n,
            cols: n,
            data: std::sync::Arc::new(data),
            node: None,
        }
    }

    pub(crate) fn with_node(
        rows: usize,
        cols: usize,
        data: std::sync::Arc<Vec<f64>>,
        node: NodeRef,
    ) -> Self {
        Self {
            rows,
            cols,
            data,
            node: Some(node),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Value of a 1x1 tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}
