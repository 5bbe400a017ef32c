//! Partial permutations, score-to-matching extraction, pairwise composition
//! and the cycle-consistency machinery.
//!
//! Every instance is matched against the universe, so composed pairwise
//! matchings `X_jk = X_j X_k^T` are cycle-consistent by construction; the
//! verifier and score below make that property executable.

mod hungarian;

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("cannot match {m} keypoints into {d} universe points (need m <= d)")]
    Infeasible { m: usize, d: usize },
    #[error("universe size mismatch: {expected} vs {got}")]
    UniverseMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {a_rows}x{a_cols} vs {b_rows}x{b_cols}")]
    ShapeMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("invalid partial permutation: {0}")]
    InvalidPermutation(&'static str),
    #[error("non-finite score matrix")]
    NonFiniteScores,
    #[error("cycle consistency score undefined: no common points")]
    UndefinedScore,
    #[error("pairwise set is incomplete or inconsistent in shape")]
    MalformedPairwiseSet,
}

/// Binary matching between an instance and the universe: one universe
/// column per keypoint row, each column used at most once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialPermutation {
    d: usize,
    cols: Vec<usize>,
}

impl PartialPermutation {
    pub fn new(cols: Vec<usize>, d: usize) -> Result<Self, MatchError> {
        if cols.len() > d {
            return Err(MatchError::Infeasible { m: cols.len(), d });
        }
        let mut seen = vec![false; d];
        for &c in &cols {
            if c >= d {
                return Err(MatchError::InvalidPermutation(
                    "universe index out of range",
                ));
            }
            if seen[c] {
                return Err(MatchError::InvalidPermutation(
                    "two keypoints map to one universe point",
                ));
            }
            seen[c] = true;
        }
        Ok(Self { d, cols })
    }

    /// Identity matching of the first `m` universe points.
    pub fn identity(m: usize, d: usize) -> Result<Self, MatchError> {
        Self::new((0..m).collect(), d)
    }

    pub fn m(&self) -> usize {
        self.cols.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Universe column of each keypoint row.
    pub fn columns(&self) -> &[usize] {
        &self.cols
    }

    pub fn entry(&self, row: usize, col: usize) -> bool {
        self.cols[row] == col
    }

    /// Dense 0/1 matrix in row-major order.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols.len() * self.d];
        for (r, &c) in self.cols.iter().enumerate() {
            out[r * self.d + c] = 1.0;
        }
        out
    }
}

/// All instance-to-universe matchings of one category.
#[derive(Debug, Clone)]
pub struct MultiMatching {
    ids: Vec<String>,
    matchings: Vec<PartialPermutation>,
}

impl MultiMatching {
    pub fn new(entries: Vec<(String, PartialPermutation)>) -> Result<Self, MatchError> {
        let mut ids = Vec::with_capacity(entries.len());
        let mut matchings = Vec::with_capacity(entries.len());
        let mut d = None;
        for (id, m) in entries {
            match d {
                None => d = Some(m.d()),
                Some(expected) if expected != m.d() => {
                    return Err(MatchError::UniverseMismatch {
                        expected,
                        got: m.d(),
                    })
                }
                _ => {}
            }
            ids.push(id);
            matchings.push(m);
        }
        Ok(Self { ids, matchings })
    }

    pub fn len(&self) -> usize {
        self.matchings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matchings.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matchings(&self) -> &[PartialPermutation] {
        &self.matchings
    }
}

/// Extracts a hard matching from soft per-assignment scores by solving the
/// linear assignment problem on cost `1 - score`.
///
/// Every keypoint row is assigned (row sums exactly one); no threshold is
/// applied. Ties break toward the lower universe index.
pub fn extract_matching(x_soft: &Tensor) -> Result<PartialPermutation, MatchError> {
    let (m, d) = x_soft.shape();
    if m > d {
        return Err(MatchError::Infeasible { m, d });
    }
    if x_soft.data().iter().any(|v| !v.is_finite()) {
        return Err(MatchError::NonFiniteScores);
    }
    let cost: Vec<f64> = x_soft.data().iter().map(|s| 1.0 - s).collect();
    let assignment = hungarian::solve_assignment(&cost, m, d);
    PartialPermutation::new(assignment, d)
}

/// Dense binary pairwise matching between two instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairwiseMatching {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl PairwiseMatching {
    pub fn from_entries(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self, MatchError> {
        if data.len() != rows * cols {
            return Err(MatchError::ShapeMismatch {
                a_rows: rows,
                a_cols: cols,
                b_rows: data.len() / cols.max(1),
                b_cols: cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn transposed(&self) -> Self {
        let mut data = vec![false; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.get(r, c);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Boolean matrix product.
    pub fn compose(&self, other: &Self) -> Result<Self, MatchError> {
        if self.cols != other.rows {
            return Err(MatchError::ShapeMismatch {
                a_rows: self.rows,
                a_cols: self.cols,
                b_rows: other.rows,
                b_cols: other.cols,
            });
        }
        let mut data = vec![false; self.rows * other.cols];
        for r in 0..self.rows {
            for k in 0..self.cols {
                if self.get(r, k) {
                    for c in 0..other.cols {
                        if other.get(k, c) {
                            data[r * other.cols + c] = true;
                        }
                    }
                }
            }
        }
        Ok(Self {
            rows: self.rows,
            cols: other.cols,
            data,
        })
    }

    /// Element-wise `self <= other`.
    pub fn dominated_by(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    pub fn is_identity(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|r| (0..self.cols).all(|c| self.get(r, c) == (r == c)))
    }

    fn row_nonzero(&self, r: usize) -> bool {
        (0..self.cols).any(|c| self.get(r, c))
    }

    fn col_nonzero(&self, c: usize) -> bool {
        (0..self.rows).any(|r| self.get(r, c))
    }

    fn rows_equal(&self, other: &Self, r: usize) -> bool {
        (0..self.cols).all(|c| self.get(r, c) == other.get(r, c))
    }
}

/// `X_jk = X_j X_k^T`: keypoint `a` of `j` matches keypoint `b` of `k` iff
/// both map to the same universe point. Rows and columns may be all-zero
/// when a universe point is unseen in the other instance.
pub fn compose_pairwise(
    xj: &PartialPermutation,
    xk: &PartialPermutation,
) -> Result<PairwiseMatching, MatchError> {
    if xj.d() != xk.d() {
        return Err(MatchError::UniverseMismatch {
            expected: xj.d(),
            got: xk.d(),
        });
    }
    let (mj, mk) = (xj.m(), xk.m());
    let mut data = vec![false; mj * mk];
    for (a, &ca) in xj.columns().iter().enumerate() {
        for (b, &cb) in xk.columns().iter().enumerate() {
            if ca == cb {
                data[a * mk + b] = true;
            }
        }
    }
    Ok(PairwiseMatching {
        rows: mj,
        cols: mk,
        data,
    })
}

/// Complete set of pairwise matchings over `n` instances.
pub struct PairwiseSet {
    n: usize,
    mats: Vec<PairwiseMatching>,
}

impl PairwiseSet {
    /// Builds the full pairwise set from object-to-universe matchings.
    pub fn compose_all(multi: &MultiMatching) -> Result<Self, MatchError> {
        let n = multi.len();
        let mut mats = Vec::with_capacity(n * n);
        for j in 0..n {
            for k in 0..n {
                mats.push(compose_pairwise(
                    &multi.matchings()[j],
                    &multi.matchings()[k],
                )?);
            }
        }
        Ok(Self { n, mats })
    }

    /// Wraps an externally built complete pairwise set (row-major by (j, k)).
    pub fn from_matrix(n: usize, mats: Vec<PairwiseMatching>) -> Result<Self, MatchError> {
        if mats.len() != n * n {
            return Err(MatchError::MalformedPairwiseSet);
        }
        for j in 0..n {
            for k in 0..n {
                if mats[j * n + k].rows != mats[j * n].rows
                    || mats[j * n + k].cols != mats[k * n].rows
                {
                    return Err(MatchError::MalformedPairwiseSet);
                }
            }
        }
        Ok(Self { n, mats })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, j: usize, k: usize) -> &PairwiseMatching {
        &self.mats[j * self.n + k]
    }
}

/// First failed cycle-consistency property, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConsistencyViolation {
    /// `X_jj` is not the identity.
    NotIdentity { j: usize },
    /// `X_jk != X_kj^T`.
    NotTransposePair { j: usize, k: usize },
    /// `X_jk X_kl` is not dominated by `X_jl`.
    NotTransitive { j: usize, k: usize, l: usize },
}

/// Checks the three cycle-consistency properties on a complete pairwise
/// set; returns the first violation found, scanning in index order.
pub fn verify_cycle_consistency(set: &PairwiseSet) -> Result<(), ConsistencyViolation> {
    let n = set.n();
    for j in 0..n {
        if !set.get(j, j).is_identity() {
            return Err(ConsistencyViolation::NotIdentity { j });
        }
    }
    for j in 0..n {
        for k in j + 1..n {
            if set.get(j, k) != &set.get(k, j).transposed() {
                return Err(ConsistencyViolation::NotTransposePair { j, k });
            }
        }
    }
    for j in 0..n {
        for k in 0..n {
            for l in 0..n {
                let prod = set
                    .get(j, k)
                    .compose(set.get(k, l))
                    .expect("complete set has coherent shapes");
                if !prod.dominated_by(set.get(j, l)) {
                    return Err(ConsistencyViolation::NotTransitive { j, k, l });
                }
            }
        }
    }
    Ok(())
}

/// Cycle consistency score over one instance triple, in percent.
///
/// Composes `X'_kl = X_jk^T X_jl` and counts the common points of instance
/// `k` (matched both toward `j` and toward `l`) whose row in `X'_kl` agrees
/// with the direct matching `X_kl`.
pub fn cycle_consistency_score(
    xjk: &PairwiseMatching,
    xjl: &PairwiseMatching,
    xkl: &PairwiseMatching,
) -> Result<f64, MatchError> {
    if xjk.cols != xkl.rows || xjl.cols != xkl.cols || xjk.rows != xjl.rows {
        return Err(MatchError::ShapeMismatch {
            a_rows: xjk.rows,
            a_cols: xjk.cols,
            b_rows: xkl.rows,
            b_cols: xkl.cols,
        });
    }
    let composed = xjk.transposed().compose(xjl)?;
    let mut common = 0usize;
    let mut agree = 0usize;
    for a in 0..xkl.rows {
        if xjk.col_nonzero(a) && xkl.row_nonzero(a) {
            common += 1;
            if composed.rows_equal(xkl, a) {
                agree += 1;
            }
        }
    }
    if common == 0 {
        return Err(MatchError::UndefinedScore);
    }
    Ok(100.0 * agree as f64 / common as f64)
}

/// Percentage of keypoints assigned to the same universe point as the
/// ground truth.
pub fn matching_accuracy(
    predicted: &PartialPermutation,
    gt: &PartialPermutation,
) -> Result<f64, MatchError> {
    if predicted.m() != gt.m() || predicted.d() != gt.d() {
        return Err(MatchError::ShapeMismatch {
            a_rows: predicted.m(),
            a_cols: predicted.d(),
            b_rows: gt.m(),
            b_cols: gt.d(),
        });
    }
    let correct = predicted
        .columns()
        .iter()
        .zip(gt.columns())
        .filter(|(a, b)| a == b)
        .count();
    Ok(100.0 * correct as f64 / predicted.m() as f64)
}

#[cfg(test)]
mod tests;
