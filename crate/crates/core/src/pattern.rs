//! Binary pattern matrices and their Kronecker factorization.
//!
//! A pattern matrix `G` is an `M x K` binary matrix: column `k` marks the
//! resource elements (rows) that user `k` spreads its symbol over. Large
//! pattern matrices are built as `F ⊗ P ⊗ ... ⊗ P` from a rectangular factor
//! `F` and `r` copies of a square factor `P`, see [`FactorChain`].

use std::collections::HashMap;
use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatternError {
    #[error("matrix must have at least one row and one column (got {rows}x{cols})")]
    Empty { rows: usize, cols: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("entry ({row}, {col}) is {value}, expected 0 or 1")]
    NonBinary { row: usize, col: usize, value: u8 },
    #[error("square factor P must be square (got {rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("pattern matrix dimensions overflow for this chain")]
    DimensionOverflow,
    #[error("channel vector for user {user} has length {len}, expected {expected}")]
    ChannelLength { user: usize, len: usize, expected: usize },
    #[error("expected {expected} channel vectors, got {got}")]
    ChannelUsers { expected: usize, got: usize },
    #[error("noise variance must be finite and nonnegative (got {0})")]
    NoiseVariance(f64),
}

/// Binary `rows x cols` spreading matrix stored row-major.
///
/// Entries are kept as `u8` rather than `bool` so that products with signed
/// combining matrices stay in integer arithmetic.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct PatternMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl TryFrom<RawMatrix> for PatternMatrix {
    type Error = PatternError;

    fn try_from(raw: RawMatrix) -> Result<Self, Self::Error> {
        PatternMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<PatternMatrix> for RawMatrix {
    fn from(m: PatternMatrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl PatternMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self, PatternError> {
        if rows == 0 || cols == 0 {
            return Err(PatternError::Empty { rows, cols });
        }
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(PatternError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(PatternError::NonBinary {
                row: pos / cols,
                col: pos % cols,
                value: data[pos],
            });
        }
        Ok(PatternMatrix { rows, cols, data })
    }

    /// Builds a matrix from row slices. All rows must have equal length.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self, PatternError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(PatternError::DataLength {
                    rows: rows.len(),
                    cols,
                    len: data.len() + r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        PatternMatrix::new(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0u8; n * n];
        for i in 0..n {
            data[i * n + i] = 1;
        }
        PatternMatrix::new(n, n, data).expect("identity of size zero")
    }

    /// Builds a square matrix whose columns are the given binary codes, with
    /// the first row as the most significant bit of each code.
    pub fn from_column_codes(rows: usize, codes: &[u64]) -> Result<Self, PatternError> {
        let cols = codes.len();
        let mut data = vec![0u8; rows * cols];
        for (k, &code) in codes.iter().enumerate() {
            for i in 0..rows {
                data[i * cols + k] = ((code >> (rows - 1 - i)) & 1) as u8;
            }
        }
        PatternMatrix::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<u8> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    /// Binary-integer value of a column, first row most significant.
    ///
    /// Only defined for matrices with at most 64 rows.
    pub fn column_code(&self, col: usize) -> u64 {
        assert!(self.rows <= 64, "column codes need at most 64 rows");
        (0..self.rows).fold(0u64, |acc, i| (acc << 1) | u64::from(self.get(i, col)))
    }

    pub fn column_codes(&self) -> Vec<u64> {
        (0..self.cols).map(|k| self.column_code(k)).collect()
    }

    pub fn column_weight(&self, col: usize) -> usize {
        (0..self.rows).filter(|&i| self.get(i, col) == 1).count()
    }

    /// Overload factor `K / M`.
    pub fn overload_factor(&self) -> f64 {
        self.cols as f64 / self.rows as f64
    }

    /// `G x` for a real vector `x` of length `cols`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "vector length must equal column count");
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .filter(|(&g, _)| g == 1)
                    .map(|(_, &v)| v)
                    .sum()
            })
            .collect()
    }

    /// `G Gᵗ` as a dense row-major `rows x rows` integer matrix.
    pub fn gram(&self) -> Vec<u64> {
        let m = self.rows;
        let mut out = vec![0u64; m * m];
        for i in 0..m {
            for j in i..m {
                let v = self
                    .row(i)
                    .iter()
                    .zip(self.row(j))
                    .filter(|(&a, &b)| a == 1 && b == 1)
                    .count() as u64;
                out[i * m + j] = v;
                out[j * m + i] = v;
            }
        }
        out
    }
}

impl fmt::Debug for PatternMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "PatternMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(f, "  {}", row.join(" "))?;
        }
        write!(f, "]")
    }
}

/// Kronecker product `A ⊗ B`: block `(i, j)` of the result is `a_ij · B`.
pub fn kronecker(a: &PatternMatrix, b: &PatternMatrix) -> PatternMatrix {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    let mut data = vec![0u8; rows * cols];
    for i in 0..a.rows {
        for j in 0..a.cols {
            if a.get(i, j) == 0 {
                continue;
            }
            for p in 0..b.rows {
                let dst = (i * b.rows + p) * cols + j * b.cols;
                data[dst..dst + b.cols].copy_from_slice(b.row(p));
            }
        }
    }
    PatternMatrix { rows, cols, data }
}

/// Factorization recipe `G = F ⊗ P^{⊗r}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawChain", into = "RawChain")]
pub struct FactorChain {
    f: PatternMatrix,
    p: PatternMatrix,
    r: u32,
}

#[derive(Serialize, Deserialize)]
struct RawChain {
    #[serde(rename = "F")]
    f: PatternMatrix,
    #[serde(rename = "P")]
    p: PatternMatrix,
    r: u32,
}

impl TryFrom<RawChain> for FactorChain {
    type Error = PatternError;

    fn try_from(raw: RawChain) -> Result<Self, Self::Error> {
        FactorChain::new(raw.f, raw.p, raw.r)
    }
}

impl From<FactorChain> for RawChain {
    fn from(c: FactorChain) -> Self {
        RawChain {
            f: c.f,
            p: c.p,
            r: c.r,
        }
    }
}

impl FactorChain {
    pub fn new(f: PatternMatrix, p: PatternMatrix, r: u32) -> Result<Self, PatternError> {
        if !p.is_square() {
            return Err(PatternError::NotSquare {
                rows: p.rows,
                cols: p.cols,
            });
        }
        let chain = FactorChain { f, p, r };
        chain.dimensions()?;
        Ok(chain)
    }

    pub fn f(&self) -> &PatternMatrix {
        &self.f
    }

    pub fn p(&self) -> &PatternMatrix {
        &self.p
    }

    pub fn r(&self) -> u32 {
        self.r
    }

    pub fn m_f(&self) -> usize {
        self.f.rows
    }

    pub fn k_f(&self) -> usize {
        self.f.cols
    }

    pub fn m_p(&self) -> usize {
        self.p.rows
    }

    /// `m_p^r`, the number of equation sets left after all recursions.
    pub fn leaf_count(&self) -> usize {
        self.m_p().pow(self.r)
    }

    /// `(M, K) = (m_f · m_p^r, k_f · m_p^r)`, or an overflow error.
    pub fn dimensions(&self) -> Result<(usize, usize), PatternError> {
        let scale = (self.p.rows)
            .checked_pow(self.r)
            .ok_or(PatternError::DimensionOverflow)?;
        let m = self
            .f
            .rows
            .checked_mul(scale)
            .ok_or(PatternError::DimensionOverflow)?;
        let k = self
            .f
            .cols
            .checked_mul(scale)
            .ok_or(PatternError::DimensionOverflow)?;
        m.checked_mul(k).ok_or(PatternError::DimensionOverflow)?;
        Ok((m, k))
    }

    pub fn rows(&self) -> usize {
        self.dimensions().map(|d| d.0).unwrap_or(usize::MAX)
    }

    pub fn cols(&self) -> usize {
        self.dimensions().map(|d| d.1).unwrap_or(usize::MAX)
    }

    /// The overload factor of the full matrix, `k_f / m_f`.
    pub fn overload_factor(&self) -> f64 {
        self.f.overload_factor()
    }

    /// Materializes `F ⊗ P ⊗ ... ⊗ P`.
    pub fn build(&self) -> Result<PatternMatrix, PatternError> {
        self.dimensions()?;
        let mut g = self.f.clone();
        for _ in 0..self.r {
            g = kronecker(&g, &self.p);
        }
        Ok(g)
    }
}

/// Materializes the pattern matrix of a chain.
pub fn build_chain(chain: &FactorChain) -> Result<PatternMatrix, PatternError> {
    chain.build()
}

/// Column-distinctness report for a pattern matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ColumnReport {
    /// True iff every column is nonzero and all columns are pairwise distinct.
    pub valid: bool,
    pub zero_columns: Vec<usize>,
    /// Groups of column indices sharing an identical pattern (size ≥ 2),
    /// ordered by their smallest member.
    pub duplicate_groups: Vec<Vec<usize>>,
}

pub fn validate_distinct_nonzero_columns(g: &PatternMatrix) -> ColumnReport {
    let mut zero_columns = Vec::new();
    let mut by_pattern: HashMap<Vec<u8>, Vec<usize>> = HashMap::new();
    for k in 0..g.cols {
        let col = g.column(k);
        if col.iter().all(|&v| v == 0) {
            zero_columns.push(k);
        }
        by_pattern.entry(col).or_default().push(k);
    }
    let mut duplicate_groups: Vec<Vec<usize>> = by_pattern
        .into_values()
        .filter(|members| members.len() > 1)
        .collect();
    duplicate_groups.sort();
    ColumnReport {
        valid: zero_columns.is_empty() && duplicate_groups.is_empty(),
        zero_columns,
        duplicate_groups,
    }
}

/// Partition of the users into groups of identical pattern columns.
///
/// Singleton groups are included, so every user appears exactly once.
pub fn coupled_groups(g: &PatternMatrix) -> Vec<Vec<usize>> {
    let mut by_pattern: HashMap<Vec<u8>, Vec<usize>> = HashMap::new();
    for k in 0..g.cols {
        by_pattern.entry(g.column(k)).or_default().push(k);
    }
    let mut groups: Vec<Vec<usize>> = by_pattern.into_values().collect();
    groups.sort();
    groups
}

/// `binomial(n, k)` over big integers.
pub fn binomial(n: &BigUint, k: u64) -> BigUint {
    let k_big = BigUint::from(k);
    if &k_big > n {
        return BigUint::zero();
    }
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * (n - BigUint::from(i)) / BigUint::from(i + 1);
    }
    acc
}

/// Number of `m x k` binary matrices with distinct nonzero columns, counted
/// as unordered column sets: `binomial(2^m - 1, k)`.
pub fn search_space_size(m: u32, k: u64) -> BigUint {
    let nonzero = (BigUint::one() << m as usize) - BigUint::one();
    binomial(&nonzero, k)
}

/// Product of per-factor search spaces for a factorized design.
pub fn factorized_search_space(factors: &[(u32, u64)]) -> BigUint {
    factors
        .iter()
        .map(|&(m, k)| search_space_size(m, k))
        .product()
}

/// Per-user channel responses and noise level of the uplink model
/// `y = Σ diag(h_k) g_k x_k + n`.
///
/// Only the equalized case (every `h_k` all ones) is exercised by the
/// detector and simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    gains: Vec<Vec<f64>>,
    noise_variance: f64,
}

impl ChannelRealization {
    pub fn new(
        g: &PatternMatrix,
        gains: Vec<Vec<f64>>,
        noise_variance: f64,
    ) -> Result<Self, PatternError> {
        if gains.len() != g.cols() {
            return Err(PatternError::ChannelUsers {
                expected: g.cols(),
                got: gains.len(),
            });
        }
        for (user, h) in gains.iter().enumerate() {
            if h.len() != g.rows() {
                return Err(PatternError::ChannelLength {
                    user,
                    len: h.len(),
                    expected: g.rows(),
                });
            }
        }
        if !(noise_variance.is_finite() && noise_variance >= 0.0) {
            return Err(PatternError::NoiseVariance(noise_variance));
        }
        Ok(ChannelRealization {
            gains,
            noise_variance,
        })
    }

    /// Channel state after receiver-side equalization: unit gains everywhere.
    pub fn equalized(g: &PatternMatrix, noise_variance: f64) -> Result<Self, PatternError> {
        ChannelRealization::new(g, vec![vec![1.0; g.rows()]; g.cols()], noise_variance)
    }

    pub fn user_gains(&self, user: usize) -> &[f64] {
        &self.gains[user]
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn is_equalized(&self) -> bool {
        self.gains.iter().flatten().all(|&h| h == 1.0)
    }

    /// Effective channel matrix `H = [diag(h_1) g_1, ..., diag(h_K) g_K]`,
    /// row-major.
    pub fn effective_matrix(&self, g: &PatternMatrix) -> Vec<f64> {
        let (m, k) = (g.rows(), g.cols());
        let mut h = vec![0.0; m * k];
        for i in 0..m {
            for u in 0..k {
                h[i * k + u] = self.gains[u][i] * f64::from(g.get(i, u));
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ring3() -> PatternMatrix {
        PatternMatrix::from_rows(&[[1, 1, 0], [1, 0, 1], [0, 1, 1]]).unwrap()
    }

    fn ones_1x2() -> PatternMatrix {
        PatternMatrix::from_rows(&[[1, 1]]).unwrap()
    }

    #[test]
    fn rejects_malformed_matrices() {
        assert!(matches!(
            PatternMatrix::new(0, 2, vec![]),
            Err(PatternError::Empty { .. })
        ));
        assert!(matches!(
            PatternMatrix::new(2, 2, vec![1, 0, 1]),
            Err(PatternError::DataLength { .. })
        ));
        assert_eq!(
            PatternMatrix::new(1, 2, vec![1, 2]),
            Err(PatternError::NonBinary {
                row: 0,
                col: 1,
                value: 2
            })
        );
    }

    #[test]
    fn kronecker_with_unit_is_identity() {
        let one = PatternMatrix::from_rows(&[[1]]).unwrap();
        assert_eq!(kronecker(&one, &ring3()), ring3());
    }

    #[test]
    fn kronecker_with_ones_row_duplicates() {
        let b = ring3();
        let g = kronecker(&ones_1x2(), &b);
        assert_eq!((g.rows(), g.cols()), (3, 6));
        for i in 0..3 {
            for k in 0..3 {
                assert_eq!(g.get(i, k), b.get(i, k));
                assert_eq!(g.get(i, k + 3), b.get(i, k));
            }
        }
    }

    #[test]
    fn kronecker_dimensions_2x3_by_3x3() {
        let a = PatternMatrix::from_rows(&[[1, 1, 0], [0, 1, 1]]).unwrap();
        let g = kronecker(&a, &ring3());
        assert_eq!((g.rows(), g.cols()), (6, 9));
    }

    #[test]
    fn example_chain_couples_columns() {
        let chain = FactorChain::new(ones_1x2(), ring3(), 2).unwrap();
        let g = chain.build().unwrap();
        assert_eq!((g.rows(), g.cols()), (9, 18));
        for k in 0..9 {
            assert_eq!(g.column(k), g.column(k + 9));
        }
        // y_1 = t_1 + t_2 + t_4 + t_5
        let first: Vec<usize> = (0..9).filter(|&k| g.get(0, k) == 1).collect();
        assert_eq!(first, vec![0, 1, 3, 4]);

        let report = validate_distinct_nonzero_columns(&g);
        assert!(!report.valid);
        assert!(report.zero_columns.is_empty());
        let expected: Vec<Vec<usize>> = (0..9).map(|k| vec![k, k + 9]).collect();
        assert_eq!(report.duplicate_groups, expected);
    }

    #[test]
    fn empty_chain_is_f() {
        let chain = FactorChain::new(ones_1x2(), ring3(), 0).unwrap();
        assert_eq!(chain.build().unwrap(), ones_1x2());
    }

    #[test]
    fn identity_chain() {
        let chain = FactorChain::new(ones_1x2(), PatternMatrix::identity(3), 1).unwrap();
        let g = chain.build().unwrap();
        let expected = PatternMatrix::from_rows(&[
            [1, 0, 0, 1, 0, 0],
            [0, 1, 0, 0, 1, 0],
            [0, 0, 1, 0, 0, 1],
        ])
        .unwrap();
        assert_eq!(g, expected);
    }

    #[test]
    fn chain_rejects_rectangular_p_and_overflow() {
        let rect = PatternMatrix::from_rows(&[[1, 1]]).unwrap();
        assert!(matches!(
            FactorChain::new(ones_1x2(), rect, 1),
            Err(PatternError::NotSquare { .. })
        ));
        assert_eq!(
            FactorChain::new(ones_1x2(), ring3(), 200),
            Err(PatternError::DimensionOverflow)
        );
    }

    #[test]
    fn overload_factor_is_kf_over_mf() {
        let chain = FactorChain::new(ones_1x2(), ring3(), 2).unwrap();
        assert_eq!(chain.overload_factor(), 2.0);
        let g = chain.build().unwrap();
        assert_eq!(g.overload_factor(), 2.0);
    }

    #[test]
    fn distinct_columns_checks() {
        let r = validate_distinct_nonzero_columns(&ring3());
        assert!(r.valid);
        assert!(r.duplicate_groups.is_empty());
        let z = PatternMatrix::from_rows(&[[1, 0], [0, 0]]).unwrap();
        let r = validate_distinct_nonzero_columns(&z);
        assert!(!r.valid);
        assert_eq!(r.zero_columns, vec![1]);
    }

    #[test]
    fn search_space_values() {
        assert_eq!(
            search_space_size(6, 9),
            BigUint::parse_bytes(b"23667689815", 10).unwrap()
        );
        assert_eq!(
            factorized_search_space(&[(2, 3), (3, 3)]),
            BigUint::from(35u32)
        );
        assert_eq!(search_space_size(1, 2), BigUint::zero());
        assert_eq!(search_space_size(3, 3), BigUint::from(35u32));
        assert_eq!(search_space_size(4, 4), BigUint::from(1365u32));
    }

    #[test]
    fn column_codes_msb_first() {
        let p = PatternMatrix::from_rows(&[[0, 0, 0, 1], [0, 1, 1, 0], [1, 0, 1, 0], [1, 1, 0, 0]])
            .unwrap();
        assert_eq!(p.column_codes(), vec![3, 5, 6, 8]);
        assert_eq!(PatternMatrix::from_column_codes(4, &[3, 5, 6, 8]).unwrap(), p);
    }

    #[test]
    fn serde_roundtrip_and_validation() {
        let chain = FactorChain::new(ones_1x2(), ring3(), 2).unwrap();
        let json = serde_json::to_string(&chain).unwrap();
        assert!(json.contains("\"F\""));
        let back: FactorChain = serde_json::from_str(&json).unwrap();
        assert_eq!(back, chain);
        let bad = r#"{"rows": 1, "cols": 2, "data": [1, 3]}"#;
        assert!(serde_json::from_str::<PatternMatrix>(bad).is_err());
        let rect = r#"{"F": {"rows":1,"cols":2,"data":[1,1]}, "P": {"rows":1,"cols":2,"data":[1,1]}, "r": 1}"#;
        assert!(serde_json::from_str::<FactorChain>(rect).is_err());
    }

    #[test]
    fn channel_realization_lengths() {
        let g = ring3();
        let ch = ChannelRealization::equalized(&g, 0.5).unwrap();
        assert!(ch.is_equalized());
        assert_eq!(ch.effective_matrix(&g), g.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
        assert!(matches!(
            ChannelRealization::new(&g, vec![vec![1.0; 2]; 3], 1.0),
            Err(PatternError::ChannelLength { .. })
        ));
        assert!(ChannelRealization::equalized(&g, -1.0).is_err());
    }
}
