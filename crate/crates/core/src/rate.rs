//! Closed-form per-RE average sum rates.
//!
//! All functions take `snr` as a linear power ratio `P_x / σ²` and return
//! bits per resource element per (real) channel use.

use nalgebra::DMatrix;
use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::Serialize;

use crate::pattern::{FactorChain, PatternMatrix};

/// Rates of the recursive scheme and the baselines at one SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    pub snr: f64,
    pub c_recursive: f64,
    pub c_pdma: f64,
    pub c_oma: f64,
}

/// All compositions `(r_1, ..., r_parts)` of `total` into `parts` nonnegative
/// integers, in colexicographic order (compare from the last component).
pub fn compositions(parts: usize, total: u32) -> Vec<Vec<u32>> {
    fn fill(slot: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if slot == 0 {
            cur[0] = left;
            out.push(cur.clone());
            return;
        }
        for v in 0..=left {
            cur[slot] = v;
            fill(slot - 1, left - v, cur, out);
        }
    }
    if parts == 0 {
        return if total == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    let mut cur = vec![0; parts];
    fill(parts - 1, total, &mut cur, &mut out);
    out
}

/// `total! / (r_1! ... r_n!)` for a composition of `total`.
pub fn multinomial(parts: &[u32]) -> BigUint {
    let mut acc = BigUint::one();
    let mut seen = 0u64;
    for &p in parts {
        for i in 1..=u64::from(p) {
            seen += 1;
            acc = acc * BigUint::from(seen) / BigUint::from(i);
        }
    }
    acc
}

/// Sum of the multinomial weights over all compositions of `r` into `m_p`
/// parts. Equals `m_p^r`.
pub fn multinomial_weight_check(m_p: usize, r: u32) -> BigUint {
    compositions(m_p, r)
        .iter()
        .map(|c| multinomial(c))
        .fold(BigUint::zero(), |a, b| a + b)
}

/// `log₂ det(I + c · A Aᵗ)` from the Gram matrix `A Aᵗ`, via Cholesky.
pub fn log2_det_identity_plus(scale: f64, gram: &DMatrix<f64>) -> f64 {
    let n = gram.nrows();
    let m = DMatrix::<f64>::identity(n, n) + gram * scale;
    let chol = m
        .cholesky()
        .expect("I + c·AAᵗ is positive definite for c ≥ 0");
    let l = chol.l_dirty();
    2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() / std::f64::consts::LN_2
}

pub fn gram_matrix(a: &PatternMatrix) -> DMatrix<f64> {
    let m = a.rows();
    let g = a.gram();
    DMatrix::from_fn(m, m, |i, j| g[i * m + j] as f64)
}

/// Per-RE average sum rate of `F ⊗ P^{⊗r}` under recursive detection, for a
/// square factor with `gains.len()` per-symbol SNR gains.
pub fn sum_rate_factorized(f: &PatternMatrix, r: u32, gains: &[f64], snr: f64) -> f64 {
    assert!(!gains.is_empty(), "at least one gain is required");
    assert!(gains.iter().all(|&g| g > 0.0), "gains must be positive");
    let m_p = gains.len();
    let m = f.rows() as f64 * (m_p as f64).powi(r as i32);
    let gram = gram_matrix(f);
    let total: f64 = compositions(m_p, r)
        .iter()
        .map(|comp| {
            let weight = biguint_to_f64(&multinomial(comp));
            let boost: f64 = gains
                .iter()
                .zip(comp)
                .map(|(&g, &e)| g.powi(e as i32))
                .product();
            weight * log2_det_identity_plus(snr * boost, &gram)
        })
        .sum();
    total / (2.0 * m)
}

/// Per-RE average sum rate of a chain with the given combining gains.
pub fn sum_rate_recursive(chain: &FactorChain, gains: &[f64], snr: f64) -> f64 {
    assert_eq!(
        gains.len(),
        chain.m_p(),
        "one gain per column of the square factor"
    );
    sum_rate_factorized(chain.f(), chain.r(), gains, snr)
}

/// Regular PDMA with full-matrix MAP detection:
/// `(1/2M) log₂ det(I_M + snr · A Aᵗ)`.
pub fn sum_rate_pdma(a: &PatternMatrix, snr: f64) -> f64 {
    let gram = gram_matrix(a);
    log2_det_identity_plus(snr, &gram) / (2.0 * a.rows() as f64)
}

/// Orthogonal baseline: one user per RE at full power.
pub fn sum_rate_oma(snr: f64) -> f64 {
    0.5 * (1.0 + snr).log2()
}

/// Rate of the `F = [1 1]`, 3x3 square factor, `r = 2` configuration when the
/// third combined symbol of every group is detected by interference
/// cancellation instead of plain combining.
pub fn sum_rate_example4(snr: f64) -> f64 {
    let plain = 2.0 * (4.0f64 / 3.0).powi(2) * snr;
    let one_sic = 2.0 * (8.0 / 3.0) * snr;
    let two_sic = 2.0 * 4.0 * snr;
    (4.0 / 18.0) * (1.0 + plain).log2()
        + (4.0 / 18.0) * (1.0 + one_sic).log2()
        + (1.0 / 18.0) * (1.0 + two_sic).log2()
}

pub fn rate_point(chain: &FactorChain, gains: &[f64], g: &PatternMatrix, snr: f64) -> RatePoint {
    RatePoint {
        snr,
        c_recursive: sum_rate_recursive(chain, gains, snr),
        c_pdma: sum_rate_pdma(g, snr),
        c_oma: sum_rate_oma(snr),
    }
}

pub(crate) fn biguint_to_f64(v: &BigUint) -> f64 {
    v.to_string().parse().expect("decimal digits parse as f64")
}
