//! Kronecker-factorized code-domain NOMA.
//!
//! The crate covers the whole design loop for pattern matrices of the form
//! `G = F ⊗ P^{⊗r}`:
//!
//! - [`pattern`]: binary pattern matrices, Kronecker chains, search-space
//!   counting;
//! - [`combiner`]: exhaustive search for square factors `P` and their
//!   `{-1, 0, 1}` combining matrices with exact SNR gains;
//! - [`detector`]: recursive detection with instrumented operation counts,
//!   an interference-cancelling variant and a full-matrix MAP oracle;
//! - [`rate`]: closed-form per-RE sum rates for the recursive scheme and the
//!   PDMA/OMA baselines;
//! - [`simkit`]: constellations, AWGN synthesis and a seeded Monte Carlo
//!   harness.

pub mod combiner;
pub mod detector;
pub mod pattern;
pub mod rate;
pub mod simkit;

pub use combiner::{
    find_combiners, gain_of, run_algorithm1, CombinerDesign, CombinerError, DesignScorer, Gain,
    SearchOptions, SearchOutcome, SumRateScorer,
};
pub use detector::{
    brute_force_map_oracle, final_stage_map, op_count_bounds, recursive_detect,
    sic_enhanced_detect, DetectError, Detection, DetectionConfig, DetectionTrace, OpCountReport,
    RecursiveDetector,
};
pub use pattern::{
    build_chain, kronecker, search_space_size, validate_distinct_nonzero_columns,
    ChannelRealization, FactorChain, PatternError, PatternMatrix,
};
pub use rate::{
    multinomial_weight_check, sum_rate_example4, sum_rate_oma, sum_rate_pdma, sum_rate_recursive,
    RatePoint,
};
pub use simkit::{
    estimate_gain, run_monte_carlo, synthesize_rx, Constellation, MonteCarloOptions, SimError,
};
