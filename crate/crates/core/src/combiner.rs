//! Combining-coefficient search for square factor matrices.
//!
//! For a square factor `P`, each symbol `j` gets a coefficient row
//! `α_j ∈ {-1, 0, 1}^{m_p}` such that `α_j · P` is zero on every column but
//! `j` and equals `w_j ≠ 0` there. Combining `m_p` equations with `α_j`
//! multiplies the SNR of symbol `j` by `γ_j = w_j² / Σ α_j²`. The search
//! enumerates all candidate factors with distinct nonzero columns and ranks
//! the feasible ones with a pluggable scorer.

use std::cmp::Ordering;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pattern::{search_space_size, PatternError, PatternMatrix};
use crate::rate;

/// Exact SNR gain.
pub type Gain = Ratio<i64>;

/// Largest `m_p` enumerated without an explicit override.
pub const DEFAULT_MAX_MP: usize = 5;
/// Largest `m_p` accepted at all.
pub const HARD_MAX_MP: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CombinerError {
    #[error("square factor expected, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("coefficient {value} at position {index} is outside {{-1, 0, 1}}")]
    CoefficientRange { index: usize, value: i8 },
    #[error("coefficient row has length {len}, expected {expected}")]
    RowLength { len: usize, expected: usize },
    #[error("column {column} out of range")]
    ColumnRange { column: usize },
    #[error("combined weight on column {column} is zero")]
    ZeroWeight { column: usize },
    #[error("combining row for column {column} leaves weight {weight} on column {other}")]
    Leakage {
        column: usize,
        other: usize,
        weight: i64,
    },
    #[error("no coefficient row isolates column(s) {columns:?}")]
    Infeasible { columns: Vec<usize> },
    #[error("m_p = {mp} exceeds the enumeration cap of {cap}")]
    AboveCap { mp: usize, cap: usize },
    #[error("m_p must be at least 1")]
    ZeroSize,
    #[error("design invariant violated: {0}")]
    Invalid(String),
    #[error(transparent)]
    Pattern(#[from] PatternError),
}

/// Combining solution for one square factor matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDesign", into = "RawDesign")]
pub struct CombinerDesign {
    p: PatternMatrix,
    alpha: Vec<Vec<i8>>,
    weights: Vec<i64>,
    gains: Vec<Gain>,
}

#[derive(Serialize, Deserialize)]
struct RawDesign {
    #[serde(rename = "P")]
    p: PatternMatrix,
    alpha: Vec<Vec<i8>>,
    weights: Vec<i64>,
    #[serde(with = "gain_strings")]
    gains: Vec<Gain>,
}

impl TryFrom<RawDesign> for CombinerDesign {
    type Error = CombinerError;

    fn try_from(raw: RawDesign) -> Result<Self, Self::Error> {
        let design = CombinerDesign {
            p: raw.p,
            alpha: raw.alpha,
            weights: raw.weights,
            gains: raw.gains,
        };
        design.verify()?;
        Ok(design)
    }
}

impl From<CombinerDesign> for RawDesign {
    fn from(d: CombinerDesign) -> Self {
        RawDesign {
            p: d.p,
            alpha: d.alpha,
            weights: d.weights,
            gains: d.gains,
        }
    }
}

mod gain_strings {
    use super::Gain;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(gains: &[Gain], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(gains.iter().map(|g| g.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Gain>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .map(|s| s.trim().parse::<Gain>().map_err(D::Error::custom))
            .collect()
    }
}

impl CombinerDesign {
    pub fn p(&self) -> &PatternMatrix {
        &self.p
    }

    pub fn m_p(&self) -> usize {
        self.p.rows()
    }

    /// Row `j` holds the coefficients that isolate symbol `j`.
    pub fn alpha(&self) -> &[Vec<i8>] {
        &self.alpha
    }

    pub fn weights(&self) -> &[i64] {
        &self.weights
    }

    pub fn gains(&self) -> &[Gain] {
        &self.gains
    }

    pub fn gains_f64(&self) -> Vec<f64> {
        self.gains.iter().map(gain_to_f64).collect()
    }

    /// `Σ_i α_ji²`, the factor by which combining row `j` scales noise variance.
    pub fn noise_factor(&self, j: usize) -> i64 {
        self.alpha[j].iter().map(|&a| i64::from(a * a)).sum()
    }

    /// Checks coefficient range, isolation and the stored weights and gains against `α · P`.
    pub fn verify(&self) -> Result<(), CombinerError> {
        let m = self.p.rows();
        if !self.p.is_square() {
            return Err(CombinerError::NotSquare {
                rows: self.p.rows(),
                cols: self.p.cols(),
            });
        }
        if self.alpha.len() != m || self.weights.len() != m || self.gains.len() != m {
            return Err(CombinerError::Invalid(format!(
                "expected {m} rows of alpha, weights and gains"
            )));
        }
        for j in 0..m {
            let gain = gain_of(&self.alpha[j], &self.p, j)?;
            let w = combined_weights(&self.alpha[j], &self.p)[j];
            if w != self.weights[j] {
                return Err(CombinerError::Invalid(format!(
                    "weight {j} is {} but α·P gives {w}",
                    self.weights[j]
                )));
            }
            if gain != self.gains[j] {
                return Err(CombinerError::Invalid(format!(
                    "gain {j} is {} but the coefficients give {gain}",
                    self.gains[j]
                )));
            }
        }
        Ok(())
    }

    /// The same design expressed for `p`, which must equal this design's
    /// factor up to a column permutation. Rows of α, weights and gains follow
    /// their columns. `None` if `p` is not such a permutation.
    pub fn reindexed_for(&self, p: &PatternMatrix) -> Option<CombinerDesign> {
        if p.rows() != self.p.rows() || p.cols() != self.p.cols() {
            return None;
        }
        // columns of a feasible design are distinct, so codes identify them
        let own = self.p.column_codes();
        let order: Vec<usize> = p
            .column_codes()
            .iter()
            .map(|c| own.iter().position(|o| o == c))
            .collect::<Option<_>>()?;
        let design = CombinerDesign {
            p: p.clone(),
            alpha: order.iter().map(|&j| self.alpha[j].clone()).collect(),
            weights: order.iter().map(|&j| self.weights[j]).collect(),
            gains: order.iter().map(|&j| self.gains[j]).collect(),
        };
        design.verify().ok().map(|()| design)
    }

    /// `α · P` as a dense row-major signed matrix.
    pub fn alpha_times_p(&self) -> Vec<i64> {
        self.alpha
            .iter()
            .flat_map(|row| combined_weights(row, &self.p))
            .collect()
    }
}

pub fn gain_to_f64(g: &Gain) -> f64 {
    *g.numer() as f64 / *g.denom() as f64
}

fn combined_weights(alpha_row: &[i8], p: &PatternMatrix) -> Vec<i64> {
    (0..p.cols())
        .map(|c| {
            alpha_row
                .iter()
                .enumerate()
                .map(|(i, &a)| i64::from(a) * i64::from(p.get(i, c)))
                .sum()
        })
        .collect()
}

/// Exact SNR gain `w_j² / Σ α_i²` of a coefficient row applied to column `j`.
///
/// Fails if the row has entries outside `{-1, 0, 1}`, gives zero weight on
/// column `j`, or leaves weight on any other column.
pub fn gain_of(alpha_row: &[i8], p: &PatternMatrix, j: usize) -> Result<Gain, CombinerError> {
    if alpha_row.len() != p.rows() {
        return Err(CombinerError::RowLength {
            len: alpha_row.len(),
            expected: p.rows(),
        });
    }
    if j >= p.cols() {
        return Err(CombinerError::ColumnRange { column: j });
    }
    if let Some((index, &value)) = alpha_row.iter().enumerate().find(|(_, a)| a.abs() > 1) {
        return Err(CombinerError::CoefficientRange { index, value });
    }
    let w = combined_weights(alpha_row, p);
    if w[j] == 0 {
        return Err(CombinerError::ZeroWeight { column: j });
    }
    if let Some((other, &weight)) = w.iter().enumerate().find(|&(c, &v)| c != j && v != 0) {
        return Err(CombinerError::Leakage {
            column: j,
            other,
            weight,
        });
    }
    let norm: i64 = alpha_row.iter().map(|&a| i64::from(a * a)).sum();
    Ok(Gain::new(w[j] * w[j], norm))
}

/// Finds, for every column of a square `P`, the coefficient row in
/// `{-1, 0, 1}^{m_p}` with the largest gain.
///
/// Only rows with a positive combined weight are considered, which fixes the
/// global sign. Ties keep the lexicographically smallest row under
/// `-1 < 0 < +1`. Columns without any isolating row are reported together
/// in [`CombinerError::Infeasible`].
pub fn find_combiners(p: &PatternMatrix) -> Result<CombinerDesign, CombinerError> {
    if !p.is_square() {
        return Err(CombinerError::NotSquare {
            rows: p.rows(),
            cols: p.cols(),
        });
    }
    let m = p.rows();
    if m > HARD_MAX_MP {
        return Err(CombinerError::AboveCap {
            mp: m,
            cap: HARD_MAX_MP,
        });
    }
    let mut best: Vec<Option<(Gain, Vec<i8>, i64)>> = vec![None; m];
    let mut row = vec![-1i8; m];
    let total = 3usize.pow(m as u32);
    for _ in 0..total {
        let w = combined_weights(&row, p);
        let mut nonzero = w.iter().enumerate().filter(|(_, &v)| v != 0);
        if let (Some((j, &wj)), None) = (nonzero.next(), nonzero.next()) {
            if wj > 0 {
                let norm: i64 = row.iter().map(|&a| i64::from(a * a)).sum();
                let gain = Gain::new(wj * wj, norm);
                let better = match &best[j] {
                    None => true,
                    Some((g, _, _)) => gain > *g,
                };
                if better {
                    best[j] = Some((gain, row.clone(), wj));
                }
            }
        }
        advance_ternary(&mut row);
    }
    let infeasible: Vec<usize> = (0..m).filter(|&j| best[j].is_none()).collect();
    if !infeasible.is_empty() {
        return Err(CombinerError::Infeasible {
            columns: infeasible,
        });
    }
    let (mut alpha, mut weights, mut gains) = (Vec::new(), Vec::new(), Vec::new());
    for (g, a, w) in best.into_iter().flatten() {
        alpha.push(a);
        weights.push(w);
        gains.push(g);
    }
    Ok(CombinerDesign {
        p: p.clone(),
        alpha,
        weights,
        gains,
    })
}

// Odometer over {-1, 0, 1}^m, last position fastest, yielding lexicographic order.
fn advance_ternary(row: &mut [i8]) {
    for a in row.iter_mut().rev() {
        if *a < 1 {
            *a += 1;
            return;
        }
        *a = -1;
    }
}

/// Ranks candidate designs; larger is better.
pub trait DesignScorer: Sync {
    fn score(&self, design: &CombinerDesign) -> f64;
}

impl<T: Fn(&CombinerDesign) -> f64 + Sync> DesignScorer for T {
    fn score(&self, design: &CombinerDesign) -> f64 {
        self(design)
    }
}

/// Scores a design by the per-RE sum rate it achieves with a given
/// rectangular factor and recursion count at a reference SNR.
#[derive(Debug, Clone)]
pub struct SumRateScorer {
    f: PatternMatrix,
    r: u32,
    snr: f64,
}

impl SumRateScorer {
    pub const DEFAULT_REF_SNR_DB: f64 = 10.0;
    pub const DEFAULT_R: u32 = 2;

    pub fn new(f: PatternMatrix, r: u32, snr: f64) -> Self {
        SumRateScorer { f, r, snr }
    }
}

impl Default for SumRateScorer {
    /// `F = [1 1]`, two recursions, 10 dB.
    fn default() -> Self {
        let f = PatternMatrix::from_rows(&[[1, 1]]).expect("static matrix");
        SumRateScorer::new(f, Self::DEFAULT_R, 10f64.powf(Self::DEFAULT_REF_SNR_DB / 10.0))
    }
}

impl DesignScorer for SumRateScorer {
    fn score(&self, design: &CombinerDesign) -> f64 {
        // the rate is symmetric in the gains; sorting makes equal multisets
        // score bit-identically
        let mut gains = design.gains().to_vec();
        gains.sort();
        let gains: Vec<f64> = gains.iter().map(gain_to_f64).collect();
        rate::sum_rate_factorized(&self.f, self.r, &gains, self.snr)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoredDesign {
    pub design: CombinerDesign,
    pub score: f64,
    /// Canonical column codes (ascending), first row most significant.
    pub codes: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchOutcome {
    pub m_p: usize,
    /// Number of candidate factors enumerated.
    pub enumerated: u64,
    /// Feasible designs, best first.
    pub ranked: Vec<ScoredDesign>,
}

impl SearchOutcome {
    /// Designs whose score equals the best score.
    pub fn top(&self) -> &[ScoredDesign] {
        let Some(best) = self.ranked.first().map(|d| d.score) else {
            return &[];
        };
        let n = self.ranked.iter().take_while(|d| d.score == best).count();
        &self.ranked[..n]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SearchOptions {
    /// Permit `m_p` up to [`HARD_MAX_MP`] instead of [`DEFAULT_MAX_MP`].
    pub allow_large: bool,
}

/// Exhaustive search over all `m_p x m_p` factors with distinct nonzero
/// columns (canonical ascending column order), keeping the feasible ones,
/// ranked by `scorer` and then by column codes.
pub fn run_algorithm1(
    m_p: usize,
    scorer: &dyn DesignScorer,
    options: SearchOptions,
) -> Result<SearchOutcome, CombinerError> {
    if m_p == 0 {
        return Err(CombinerError::ZeroSize);
    }
    let cap = if options.allow_large {
        HARD_MAX_MP
    } else {
        DEFAULT_MAX_MP
    };
    if m_p > cap {
        return Err(CombinerError::AboveCap { mp: m_p, cap });
    }
    let max_code = (1u64 << m_p) - 1;
    let candidates = ColumnSets::new(max_code, m_p);
    let (count, mut ranked) = candidates
        .par_bridge()
        .map(|codes| {
            let p = PatternMatrix::from_column_codes(m_p, &codes).expect("codes fit m_p rows");
            let scored = find_combiners(&p).ok().map(|design| ScoredDesign {
                score: scorer.score(&design),
                design,
                codes,
            });
            (1u64, scored)
        })
        .fold(
            || (0u64, Vec::new()),
            |(n, mut acc), (one, scored)| {
                acc.extend(scored);
                (n + one, acc)
            },
        )
        .reduce(
            || (0u64, Vec::new()),
            |(n1, mut a), (n2, b)| {
                a.extend(b);
                (n1 + n2, a)
            },
        );
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.codes.cmp(&b.codes))
    });
    debug_assert_eq!(
        num_bigint::BigUint::from(count),
        search_space_size(m_p as u32, m_p as u64)
    );
    Ok(SearchOutcome {
        m_p,
        enumerated: count,
        ranked,
    })
}

/// Ascending `k`-subsets of `1..=max_code`, in lexicographic order.
struct ColumnSets {
    max_code: u64,
    current: Option<Vec<u64>>,
}

impl ColumnSets {
    fn new(max_code: u64, k: usize) -> Self {
        let current = (k as u64 <= max_code).then(|| (1..=k as u64).collect());
        ColumnSets { max_code, current }
    }
}

impl Iterator for ColumnSets {
    type Item = Vec<u64>;

    fn next(&mut self) -> Option<Vec<u64>> {
        let out = self.current.take()?;
        let k = out.len();
        let mut next = out.clone();
        let mut i = k;
        while i > 0 {
            i -= 1;
            let limit = self.max_code - (k - 1 - i) as u64;
            if next[i] < limit {
                next[i] += 1;
                for t in i + 1..k {
                    next[t] = next[t - 1] + 1;
                }
                self.current = Some(next);
                break;
            }
        }
        Some(out)
    }
}
