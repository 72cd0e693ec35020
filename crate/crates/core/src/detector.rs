//! Recursive multiuser detection for `G = F ⊗ P^{⊗r}`.
//!
//! The received vector is processed in `r` recursions. At recursion `l` each
//! of the `m_p^{l-1}` super-groups is cut into consecutive groups of `m_p`
//! equations; every group is combined with the rows of `α`, and combined
//! equation `j` of every group is routed to child super-group `j`. Child `j`
//! of super-group `s` gets index `s · m_p + j`. After `r` recursions the
//! `m_p^r` leaf sets of `m_f` equations each only involve `k_f` symbols and
//! are resolved by exhaustive MAP over `F`.
//!
//! Equation weights, noise-variance factors and SNR gains are tracked
//! exactly along every path of the recursion tree. Independent super-groups
//! may be processed in parallel; results do not depend on the schedule.

use num_rational::Ratio;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::combiner::{CombinerDesign, CombinerError, Gain};
use crate::pattern::{FactorChain, PatternError, PatternMatrix};
use crate::simkit::Constellation;

/// Default cap on `|A|^{k_f}` for the final stage.
pub const DEFAULT_MAP_CAP: usize = 1 << 16;
/// Default cap on `|A|^K` for the full-matrix oracle.
pub const DEFAULT_ORACLE_CAP: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("received vector has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("noise variance must be finite and nonnegative (got {0})")]
    NoiseVariance(f64),
    #[error("design was computed for a different square factor than the chain's P")]
    DesignMismatch,
    #[error("{hypotheses} hypotheses exceed the cap of {cap}")]
    HypothesisCap { hypotheses: usize, cap: usize },
    #[error("power offsets: {0}")]
    PowerOffsets(String),
    #[error("final-stage weight must be positive")]
    Weight,
    #[error("interference cancellation contract violated: {0}")]
    Sic(String),
    #[error(transparent)]
    Design(#[from] CombinerError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
}

/// How the auxiliary symbols of each group are separated.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum FinalStageMode {
    /// Plain combining with `α` at every recursion, MAP at the leaves.
    #[default]
    Map,
    /// Symbols listed here (by column of `P`, in detection order) are formed
    /// at every recursion by cancelling the already-decided symbols that
    /// share their equations, instead of combining with `α`.
    SicEnhanced { symbols: Vec<usize> },
}

/// Everything the receiver knows about the transmission.
#[derive(Debug, Clone)]
pub struct DetectionConfig {
    chain: FactorChain,
    design: CombinerDesign,
    constellation: Constellation,
    power_offsets: Vec<f64>,
    mode: FinalStageMode,
    map_cap: usize,
    parallel: bool,
}

impl DetectionConfig {
    /// BPSK, unit power offsets, plain MAP mode.
    pub fn new(chain: FactorChain, design: CombinerDesign) -> Result<Self, DetectError> {
        if design.p() != chain.p() {
            return Err(DetectError::DesignMismatch);
        }
        design.verify()?;
        let (_, k) = chain.dimensions()?;
        Ok(DetectionConfig {
            chain,
            design,
            constellation: Constellation::bpsk(),
            power_offsets: vec![1.0; k],
            mode: FinalStageMode::Map,
            map_cap: DEFAULT_MAP_CAP,
            parallel: false,
        })
    }

    pub fn with_constellation(mut self, constellation: Constellation) -> Self {
        self.constellation = constellation;
        self
    }

    /// Per-user amplitude multipliers applied before spreading.
    pub fn with_power_offsets(mut self, offsets: Vec<f64>) -> Result<Self, DetectError> {
        if offsets.len() != self.power_offsets.len() {
            return Err(DetectError::PowerOffsets(format!(
                "expected {} values, got {}",
                self.power_offsets.len(),
                offsets.len()
            )));
        }
        if let Some(bad) = offsets.iter().find(|&&o| !(o.is_finite() && o > 0.0)) {
            return Err(DetectError::PowerOffsets(format!(
                "offsets must be positive, got {bad}"
            )));
        }
        self.power_offsets = offsets;
        Ok(self)
    }

    pub fn with_sic(mut self, symbols: Vec<usize>) -> Result<Self, DetectError> {
        check_sic_order(self.design.p(), &symbols)?;
        self.mode = if symbols.is_empty() {
            FinalStageMode::Map
        } else {
            FinalStageMode::SicEnhanced { symbols }
        };
        Ok(self)
    }

    pub fn with_map_cap(mut self, cap: usize) -> Self {
        self.map_cap = cap;
        self
    }

    /// Process sibling super-groups on the rayon pool.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn chain(&self) -> &FactorChain {
        &self.chain
    }

    pub fn design(&self) -> &CombinerDesign {
        &self.design
    }

    pub fn constellation(&self) -> &Constellation {
        &self.constellation
    }

    pub fn power_offsets(&self) -> &[f64] {
        &self.power_offsets
    }

    pub fn mode(&self) -> &FinalStageMode {
        &self.mode
    }

    pub fn sic_symbols(&self) -> &[usize] {
        match &self.mode {
            FinalStageMode::Map => &[],
            FinalStageMode::SicEnhanced { symbols } => symbols,
        }
    }
}

/// Rows of `P` holding symbol `j`, and for each of them the other symbols
/// sharing that row.
fn sic_support(p: &PatternMatrix, j: usize) -> Vec<(usize, Vec<usize>)> {
    (0..p.rows())
        .filter(|&i| p.get(i, j) == 1)
        .map(|i| {
            let others = (0..p.cols())
                .filter(|&c| c != j && p.get(i, c) == 1)
                .collect();
            (i, others)
        })
        .collect()
}

fn check_sic_order(p: &PatternMatrix, symbols: &[usize]) -> Result<(), DetectError> {
    for (pos, &j) in symbols.iter().enumerate() {
        if j >= p.cols() {
            return Err(DetectError::Sic(format!("symbol {j} out of range")));
        }
        if symbols[..pos].contains(&j) {
            return Err(DetectError::Sic(format!("symbol {j} listed twice")));
        }
        let support = sic_support(p, j);
        if support.is_empty() {
            return Err(DetectError::Sic(format!("symbol {j} appears in no equation")));
        }
        for (_, others) in &support {
            for o in others {
                let later = symbols[pos + 1..].contains(o);
                if later {
                    return Err(DetectError::Sic(format!(
                        "symbol {j} needs symbol {o}, which is not decided before it"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Real-valued operation counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub adds: u64,
    pub muls: u64,
}

impl std::ops::AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.adds += rhs.adds;
        self.muls += rhs.muls;
    }
}

/// Cost of one exhaustive MAP over `m_f` equations and `hypotheses`
/// candidates: per candidate `m_f` subtractions, `m_f` squarings and
/// `m_f - 1` additions, plus one multiply and one subtraction for the prior.
pub fn map_stage_cost(m_f: usize, hypotheses: usize, uniform_priors: bool) -> OpCounts {
    let prior = u64::from(!uniform_priors);
    let h = hypotheses as u64;
    let m = m_f as u64;
    OpCounts {
        adds: h * (2 * m - 1 + prior),
        muls: h * (m + prior),
    }
}

/// Upper bounds on the work of recursive detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCountBounds {
    /// `r · m_f · m_p^r · (m_p - 1)`
    pub combining_adds: u64,
    /// `m_p^r`
    pub final_stage_invocations: u64,
    pub final_adds: u64,
    pub final_muls: u64,
    pub bound_adds: u64,
    pub bound_muls: u64,
}

pub fn op_count_bounds(chain: &FactorChain, final_stage: OpCounts) -> OpCountBounds {
    let m_p = chain.m_p() as u64;
    let r = u64::from(chain.r());
    let leaves = m_p.pow(chain.r());
    let combining_adds = r * chain.m_f() as u64 * leaves * (m_p - 1);
    let final_adds = leaves * final_stage.adds;
    let final_muls = leaves * final_stage.muls;
    OpCountBounds {
        combining_adds,
        final_stage_invocations: leaves,
        final_adds,
        final_muls,
        bound_adds: combining_adds + final_adds,
        bound_muls: final_muls,
    }
}

/// Measured counters of one detection against the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCountReport {
    pub combining_adds: u64,
    pub final_adds: u64,
    pub final_muls: u64,
    /// Subtractions and scalings spent reconstructing decided symbols for
    /// interference cancellation; outside the plain-combining budget.
    pub sic_adds: u64,
    pub sic_muls: u64,
    pub final_stage_invocations: u64,
    pub bounds: OpCountBounds,
}

impl OpCountReport {
    pub fn measured_adds(&self) -> u64 {
        self.combining_adds + self.final_adds + self.sic_adds
    }

    pub fn measured_muls(&self) -> u64 {
        self.final_muls + self.sic_muls
    }

    /// Combining and final-stage work within the bounds, kind by kind.
    pub fn within_bounds(&self) -> bool {
        self.combining_adds <= self.bounds.combining_adds
            && self.combining_adds + self.final_adds <= self.bounds.bound_adds
            && self.final_muls <= self.bounds.bound_muls
    }
}

/// One combined super-group produced by a recursion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuperGroupTrace {
    /// Index of the super-group at its level.
    pub index: usize,
    /// Combined signals, in group order.
    pub values: Vec<f64>,
    /// Accumulated weight on the symbols of this super-group.
    pub weight: i64,
    /// Accumulated SNR gain along the path.
    #[serde(serialize_with = "ser_gain")]
    pub gain: Gain,
    /// Effective noise variance divided by `σ²`.
    pub noise_factor: i64,
    /// Whether this super-group was formed by interference cancellation.
    pub cancelled: bool,
}

fn ser_gain<S: serde::Serializer>(g: &Gain, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&g.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecursionTrace {
    /// 1-based recursion number.
    pub level: u32,
    /// Super-groups entering this recursion, `m_p^{level-1}`.
    pub super_groups: usize,
    /// Equations per entering super-group, `m_f · m_p^{r-level+1}`.
    pub equations_per_super_group: usize,
    pub group_size: usize,
    /// The `m_p^{level}` super-groups leaving this recursion, by index.
    pub outputs: Vec<SuperGroupTrace>,
    /// Combining additions/subtractions spent in this recursion.
    pub ops: OpCounts,
}

/// One leaf set after the last recursion and its decision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafDecision {
    pub index: usize,
    /// Users whose symbols appear in this set, in column order of `F`.
    pub users: Vec<usize>,
    pub values: Vec<f64>,
    pub weight: i64,
    #[serde(serialize_with = "ser_gain")]
    pub gain: Gain,
    pub noise_factor: i64,
    /// Chosen hypothesis index, first user most significant.
    pub hypothesis: usize,
    pub symbols: Vec<f64>,
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionTrace {
    pub recursions: Vec<RecursionTrace>,
    pub leaves: Vec<LeafDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    /// Decided symbol per user (before power offsets).
    pub symbols: Vec<f64>,
    pub trace: DetectionTrace,
    pub ops: OpCountReport,
}

impl Detection {
    pub fn ambiguous_leaves(&self) -> usize {
        self.trace.leaves.iter().filter(|l| l.ambiguous).count()
    }
}

/// Exhaustive MAP decision over a small system `z = weight · F (o ∘ x) + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapDecision {
    pub hypothesis: usize,
    pub symbols: Vec<f64>,
    pub ambiguous: bool,
    pub ops: OpCounts,
}

/// Decodes hypothesis index `h` into symbol indices, first user most
/// significant.
fn hypothesis_digits(mut h: usize, q: usize, users: usize) -> Vec<usize> {
    let mut digits = vec![0; users];
    for d in digits.iter_mut().rev() {
        *d = h % q;
        h /= q;
    }
    digits
}

fn hypothesis_count(q: usize, users: usize, cap: usize) -> Result<usize, DetectError> {
    let mut h: usize = 1;
    for _ in 0..users {
        h = match h.checked_mul(q) {
            Some(v) if v <= cap => v,
            _ => {
                return Err(DetectError::HypothesisCap {
                    hypotheses: q.checked_pow(users as u32).unwrap_or(usize::MAX),
                    cap,
                })
            }
        };
    }
    Ok(h)
}

/// Precomputed candidate signals for one leaf set.
#[derive(Debug, Clone)]
struct LeafTemplates {
    m_f: usize,
    /// `F (o ∘ x_h)` for every hypothesis, row-major `H x m_f`.
    unweighted: Vec<f64>,
    /// `weight · F (o ∘ x_h)`.
    weighted: Vec<f64>,
    /// `ln p(x_h)`, empty for uniform priors.
    log_priors: Vec<f64>,
}

impl LeafTemplates {
    fn new(
        f: &PatternMatrix,
        weight: f64,
        offsets: &[f64],
        constellation: &Constellation,
        hypotheses: usize,
    ) -> Self {
        let (m_f, k_f) = (f.rows(), f.cols());
        let q = constellation.len();
        let mut unweighted = Vec::with_capacity(hypotheses * m_f);
        let mut log_priors = Vec::new();
        let uniform = constellation.is_uniform();
        for h in 0..hypotheses {
            let digits = hypothesis_digits(h, q, k_f);
            let x: Vec<f64> = digits
                .iter()
                .zip(offsets)
                .map(|(&d, &o)| o * constellation.points()[d])
                .collect();
            unweighted.extend(f.mul_vec(&x));
            if !uniform {
                log_priors.push(digits.iter().map(|&d| constellation.priors()[d].ln()).sum());
            }
        }
        let weighted = unweighted.iter().map(|v| v * weight).collect();
        LeafTemplates {
            m_f,
            unweighted,
            weighted,
            log_priors,
        }
    }

    /// Returns `(hypothesis, ambiguous, ops)`.
    fn decide(&self, z: &[f64], noise_variance: f64) -> (usize, bool, OpCounts) {
        let mut ops = OpCounts::default();
        let use_prior = !self.log_priors.is_empty() && noise_variance > 0.0;
        let two_var = 2.0 * noise_variance;
        let mut metrics = Vec::with_capacity(self.weighted.len() / self.m_f.max(1));
        for (h, s) in self.weighted.chunks(self.m_f).enumerate() {
            let mut d = 0.0;
            for (i, (&zi, &si)) in z.iter().zip(s).enumerate() {
                let e = zi - si;
                ops.adds += 1;
                ops.muls += 1;
                if i > 0 {
                    ops.adds += 1;
                }
                d += e * e;
            }
            if use_prior {
                d -= two_var * self.log_priors[h];
                ops.adds += 1;
                ops.muls += 1;
            }
            metrics.push(d);
        }
        let (best, &min) = metrics
            .iter()
            .enumerate()
            .fold((0, &f64::INFINITY), |acc, (h, m)| if *m < *acc.1 { (h, m) } else { acc });
        let tol = 1e-12 * min.abs().max(1.0);
        let ambiguous = metrics
            .iter()
            .enumerate()
            .any(|(h, &m)| h != best && m <= min + tol);
        (best, ambiguous, ops)
    }
}

/// Exhaustive MAP over `z = weight · F (o ∘ x) + n` with `x ∈ A^{k_f}`.
///
/// With uniform priors (or `noise_variance == 0`) this is minimum-distance
/// detection. Ties go to the lowest hypothesis index and are flagged.
pub fn final_stage_map(
    z: &[f64],
    f: &PatternMatrix,
    weight: Ratio<i64>,
    constellation: &Constellation,
    power_offsets: &[f64],
    noise_variance: f64,
    cap: usize,
) -> Result<MapDecision, DetectError> {
    if z.len() != f.rows() {
        return Err(DetectError::DimensionMismatch {
            expected: f.rows(),
            got: z.len(),
        });
    }
    if power_offsets.len() != f.cols() {
        return Err(DetectError::PowerOffsets(format!(
            "expected {} values, got {}",
            f.cols(),
            power_offsets.len()
        )));
    }
    if *weight.numer() <= 0 || *weight.denom() <= 0 {
        return Err(DetectError::Weight);
    }
    check_noise(noise_variance)?;
    let hypotheses = hypothesis_count(constellation.len(), f.cols(), cap)?;
    let w = *weight.numer() as f64 / *weight.denom() as f64;
    let templates = LeafTemplates::new(f, w, power_offsets, constellation, hypotheses);
    let (h, ambiguous, ops) = templates.decide(z, noise_variance);
    let symbols = hypothesis_digits(h, constellation.len(), f.cols())
        .into_iter()
        .map(|d| constellation.points()[d])
        .collect();
    Ok(MapDecision {
        hypothesis: h,
        symbols,
        ambiguous,
        ops,
    })
}

fn check_noise(noise_variance: f64) -> Result<(), DetectError> {
    if noise_variance.is_finite() && noise_variance >= 0.0 {
        Ok(())
    } else {
        Err(DetectError::NoiseVariance(noise_variance))
    }
}

/// State carried along one path of the recursion tree.
#[derive(Debug, Clone, Copy)]
struct PathState {
    weight: i64,
    gain: Gain,
    noise_factor: i64,
}

/// Output of processing one subtree.
#[derive(Debug, Default)]
struct SubtreeResult {
    /// `(level, super-group)` records produced inside the subtree.
    groups: Vec<(u32, SuperGroupTrace)>,
    leaves: Vec<LeafDecision>,
    combining: Vec<OpCounts>,
    final_ops: OpCounts,
    sic_ops: OpCounts,
    /// Unweighted noiseless signal of the subtree's input equations,
    /// rebuilt from decisions (interference cancellation only).
    rebuilt: Vec<f64>,
}

impl SubtreeResult {
    fn absorb(&mut self, other: SubtreeResult) {
        self.groups.extend(other.groups);
        self.leaves.extend(other.leaves);
        if self.combining.len() < other.combining.len() {
            self.combining.resize(other.combining.len(), OpCounts::default());
        }
        for (a, b) in self.combining.iter_mut().zip(other.combining) {
            *a += b;
        }
        self.final_ops += other.final_ops;
        self.sic_ops += other.sic_ops;
    }
}

/// Combines consecutive groups of `α.len()` equations; returns one vector
/// per row of `α` (left empty for rows in `skip`) and the additions spent.
fn combine_groups(values: &[f64], alpha: &[Vec<i8>], skip: &[usize]) -> (Vec<Vec<f64>>, u64) {
    let m_p = alpha.len();
    let groups = values.len() / m_p;
    let mut out = vec![Vec::with_capacity(groups); m_p];
    let mut adds = 0;
    for group in values.chunks_exact(m_p) {
        for (j, row) in alpha.iter().enumerate() {
            if skip.contains(&j) {
                continue;
            }
            let mut acc = 0.0;
            let mut terms = 0u64;
            for (&a, &y) in row.iter().zip(group) {
                match a {
                    1 => acc = if terms == 0 { y } else { acc + y },
                    -1 => acc = if terms == 0 { -y } else { acc - y },
                    _ => continue,
                }
                terms += 1;
            }
            adds += terms.saturating_sub(1);
            out[j].push(acc);
        }
    }
    (out, adds)
}

/// Recursive detector with leaf templates precomputed for a configuration.
#[derive(Debug, Clone)]
pub struct RecursiveDetector {
    cfg: DetectionConfig,
    m: usize,
    k: usize,
    hypotheses: usize,
    /// Per leaf: users, path state, templates.
    leaves: Vec<(Vec<usize>, PathState, LeafTemplates)>,
    bounds: OpCountBounds,
}

impl RecursiveDetector {
    pub fn new(cfg: DetectionConfig) -> Result<Self, DetectError> {
        let (m, k) = cfg.chain.dimensions()?;
        let f = cfg.chain.f().clone();
        let hypotheses = hypothesis_count(cfg.constellation.len(), f.cols(), cfg.map_cap)?;
        let leaf_count = cfg.chain.leaf_count();
        let mut leaves = Vec::with_capacity(leaf_count);
        for s in 0..leaf_count {
            let users = leaf_users(&cfg.chain, s);
            let state = leaf_path_state(&cfg, s);
            let offsets: Vec<f64> = users.iter().map(|&u| cfg.power_offsets[u]).collect();
            let templates = LeafTemplates::new(
                &f,
                state.weight as f64,
                &offsets,
                &cfg.constellation,
                hypotheses,
            );
            leaves.push((users, state, templates));
        }
        let cost = map_stage_cost(f.rows(), hypotheses, cfg.constellation.is_uniform());
        let bounds = op_count_bounds(&cfg.chain, cost);
        Ok(RecursiveDetector {
            cfg,
            m,
            k,
            hypotheses,
            leaves,
            bounds,
        })
    }

    pub fn config(&self) -> &DetectionConfig {
        &self.cfg
    }

    pub fn bounds(&self) -> OpCountBounds {
        self.bounds
    }

    pub fn hypotheses_per_leaf(&self) -> usize {
        self.hypotheses
    }

    pub fn detect(&self, y: &[f64], noise_variance: f64) -> Result<Detection, DetectError> {
        if y.len() != self.m {
            return Err(DetectError::DimensionMismatch {
                expected: self.m,
                got: y.len(),
            });
        }
        check_noise(noise_variance)?;
        let root = PathState {
            weight: 1,
            gain: Gain::from_integer(1),
            noise_factor: 1,
        };
        let result = self.subtree(y, 0, 0, root, noise_variance, true);
        Ok(self.assemble(result))
    }

    fn assemble(&self, mut result: SubtreeResult) -> Detection {
        let r = self.cfg.chain.r();
        let m_p = self.cfg.chain.m_p();
        let m_f = self.cfg.chain.m_f();
        let mut recursions: Vec<RecursionTrace> = (1..=r)
            .map(|level| RecursionTrace {
                level,
                super_groups: m_p.pow(level - 1),
                equations_per_super_group: m_f * m_p.pow(r - level + 1),
                group_size: m_p,
                outputs: Vec::new(),
                ops: result
                    .combining
                    .get(level as usize - 1)
                    .copied()
                    .unwrap_or_default(),
            })
            .collect();
        for (level, group) in result.groups.drain(..) {
            recursions[level as usize - 1].outputs.push(group);
        }
        for rec in &mut recursions {
            rec.outputs.sort_by_key(|g| g.index);
        }
        result.leaves.sort_by_key(|l| l.index);
        let mut symbols = vec![0.0; self.k];
        for leaf in &result.leaves {
            for (&u, &x) in leaf.users.iter().zip(&leaf.symbols) {
                symbols[u] = x;
            }
        }
        let combining_adds = recursions.iter().map(|r| r.ops.adds).sum();
        let ops = OpCountReport {
            combining_adds,
            final_adds: result.final_ops.adds,
            final_muls: result.final_ops.muls,
            sic_adds: result.sic_ops.adds,
            sic_muls: result.sic_ops.muls,
            final_stage_invocations: result.leaves.len() as u64,
            bounds: self.bounds,
        };
        debug_assert!(ops.within_bounds(), "operation counts exceed bounds: {ops:?}");
        Detection {
            symbols,
            trace: DetectionTrace {
                recursions,
                leaves: result.leaves,
            },
            ops,
        }
    }

    /// Processes the super-group `node` at recursion depth `depth`
    /// (number of recursions already applied).
    fn subtree(
        &self,
        values: &[f64],
        depth: u32,
        node: usize,
        state: PathState,
        noise_variance: f64,
        decide: bool,
    ) -> SubtreeResult {
        let r = self.cfg.chain.r();
        if depth == r {
            return self.leaf(values, node, state, noise_variance, decide);
        }
        let design = &self.cfg.design;
        let m_p = design.m_p();
        let sic = self.cfg.sic_symbols();
        let level = depth + 1;

        let (mut combined, adds) = combine_groups(values, design.alpha(), sic);
        let mut result = SubtreeResult {
            combining: vec![OpCounts::default(); level as usize],
            ..Default::default()
        };
        result.combining[depth as usize].adds += adds;

        let child_state = |j: usize, cancelled: bool| {
            if cancelled {
                let support = sic_support(design.p(), j).len() as i64;
                PathState {
                    weight: state.weight * support,
                    gain: state.gain * Gain::from_integer(support),
                    noise_factor: state.noise_factor * support,
                }
            } else {
                PathState {
                    weight: state.weight * design.weights()[j],
                    gain: state.gain * design.gains()[j],
                    noise_factor: state.noise_factor * design.noise_factor(j),
                }
            }
        };

        let plain: Vec<usize> = (0..m_p).filter(|j| !sic.contains(j)).collect();
        let run_child = |j: usize, vals: Vec<f64>, cancelled: bool| {
            let st = child_state(j, cancelled);
            let child = node * m_p + j;
            let trace = SuperGroupTrace {
                index: child,
                values: vals.clone(),
                weight: st.weight,
                gain: st.gain,
                noise_factor: st.noise_factor,
                cancelled,
            };
            let mut sub = self.subtree(&vals, level, child, st, noise_variance, decide);
            sub.groups.push((level, trace));
            (j, sub)
        };

        let mut children: Vec<(usize, SubtreeResult)> = if self.cfg.parallel && plain.len() > 1 {
            let inputs: Vec<(usize, Vec<f64>)> = plain
                .iter()
                .map(|&j| (j, std::mem::take(&mut combined[j])))
                .collect();
            inputs
                .into_par_iter()
                .map(|(j, vals)| run_child(j, vals, false))
                .collect()
        } else {
            plain
                .iter()
                .map(|&j| {
                    let vals = std::mem::take(&mut combined[j]);
                    run_child(j, vals, false)
                })
                .collect()
        };

        if !sic.is_empty() {
            let mut rebuilt: Vec<Option<Vec<f64>>> = vec![None; m_p];
            for (j, sub) in &mut children {
                rebuilt[*j] = Some(std::mem::take(&mut sub.rebuilt));
            }
            for &j in sic {
                let (vals, ops) = self.cancel(values, j, state.weight, &rebuilt);
                result.combining[depth as usize].adds += ops.0;
                result.sic_ops += ops.1;
                let (_, mut sub) = run_child(j, vals, true);
                rebuilt[j] = Some(std::mem::take(&mut sub.rebuilt));
                children.push((j, sub));
            }
            result.rebuilt = self.rebuild(&rebuilt, &mut result.sic_ops);
        }

        for (_, sub) in children {
            result.absorb(sub);
        }
        result
    }

    /// Forms symbol `j` of every group by summing the equations that hold it
    /// after subtracting the decided symbols sharing those equations.
    /// Returns the values and `(combining adds, cancellation ops)`.
    fn cancel(
        &self,
        values: &[f64],
        j: usize,
        weight: i64,
        rebuilt: &[Option<Vec<f64>>],
    ) -> (Vec<f64>, (u64, OpCounts)) {
        let p = self.cfg.design.p();
        let m_p = p.rows();
        let support = sic_support(p, j);
        let mut adds = 0;
        let mut ops = OpCounts::default();
        let w = weight as f64;
        let out = values
            .chunks_exact(m_p)
            .enumerate()
            .map(|(g, group)| {
                let mut acc = 0.0;
                for (t, (i, others)) in support.iter().enumerate() {
                    let mut v = group[*i];
                    for &o in others {
                        let s = rebuilt[o].as_ref().expect("checked detection order")[g];
                        if weight != 1 {
                            ops.muls += 1;
                        }
                        v -= w * s;
                        ops.adds += 1;
                    }
                    if t > 0 {
                        adds += 1;
                    }
                    acc += v;
                }
                acc
            })
            .collect();
        (out, (adds, ops))
    }

    /// Rebuilds the unweighted noiseless signal of a super-group from the
    /// rebuilt signals of its children: equation `i` of group `g` is
    /// `Σ_j P_ij s_j[g]`.
    fn rebuild(&self, children: &[Option<Vec<f64>>], ops: &mut OpCounts) -> Vec<f64> {
        let p = self.cfg.design.p();
        let m_p = p.rows();
        let groups = children[0].as_ref().map_or(0, |c| c.len());
        let mut out = Vec::with_capacity(groups * m_p);
        for g in 0..groups {
            for i in 0..m_p {
                let mut acc = 0.0;
                let mut terms = 0u64;
                for (j, child) in children.iter().enumerate() {
                    if p.get(i, j) == 1 {
                        acc += child.as_ref().expect("all children decided")[g];
                        terms += 1;
                    }
                }
                ops.adds += terms.saturating_sub(1);
                out.push(acc);
            }
        }
        out
    }

    fn leaf(
        &self,
        values: &[f64],
        node: usize,
        state: PathState,
        noise_variance: f64,
        decide: bool,
    ) -> SubtreeResult {
        let (users, expected, templates) = &self.leaves[node];
        debug_assert_eq!(expected.weight, state.weight);
        let mut result = SubtreeResult::default();
        if !decide {
            result.leaves.push(LeafDecision {
                index: node,
                users: users.clone(),
                values: values.to_vec(),
                weight: state.weight,
                gain: state.gain,
                noise_factor: state.noise_factor,
                hypothesis: 0,
                symbols: Vec::new(),
                ambiguous: false,
            });
            return result;
        }
        let effective_variance = noise_variance * state.noise_factor as f64;
        let (h, ambiguous, ops) = templates.decide(values, effective_variance);
        let q = self.cfg.constellation.len();
        let symbols = hypothesis_digits(h, q, users.len())
            .into_iter()
            .map(|d| self.cfg.constellation.points()[d])
            .collect();
        result.final_ops = ops;
        result.rebuilt = templates.unweighted[h * templates.m_f..(h + 1) * templates.m_f].to_vec();
        result.leaves.push(LeafDecision {
            index: node,
            users: users.clone(),
            values: values.to_vec(),
            weight: state.weight,
            gain: state.gain,
            noise_factor: state.noise_factor,
            hypothesis: h,
            symbols,
            ambiguous,
        });
        result
    }

    /// Applies the recursions without deciding; returns the leaf sets with
    /// their exact weights, gains and noise factors (plain combining only).
    pub fn combine_only(&self, y: &[f64]) -> Result<Vec<LeafDecision>, DetectError> {
        if y.len() != self.m {
            return Err(DetectError::DimensionMismatch {
                expected: self.m,
                got: y.len(),
            });
        }
        if !self.cfg.sic_symbols().is_empty() {
            return Err(DetectError::Sic(
                "cancellation needs decisions; combine without it".into(),
            ));
        }
        let root = PathState {
            weight: 1,
            gain: Gain::from_integer(1),
            noise_factor: 1,
        };
        let mut result = self.subtree(y, 0, 0, root, 0.0, false);
        result.leaves.sort_by_key(|l| l.index);
        Ok(result.leaves)
    }
}

/// Users whose symbols survive in leaf set `s`: user `b · m_p^r + rev(s)`
/// for each column `b` of `F`, where `rev` reverses the base-`m_p` digits of
/// the leaf index (the first recursion fixes the least significant digit of
/// the user index).
pub fn leaf_users(chain: &FactorChain, leaf: usize) -> Vec<usize> {
    let m_p = chain.m_p();
    let r = chain.r();
    let mut rest = leaf;
    let mut rev = 0;
    for _ in 0..r {
        rev = rev * m_p + rest % m_p;
        rest /= m_p;
    }
    let stride = m_p.pow(r);
    (0..chain.k_f()).map(|b| b * stride + rev).collect()
}

/// Base-`m_p` digits of a leaf index, first recursion first.
pub fn leaf_path(chain: &FactorChain, leaf: usize) -> Vec<usize> {
    let m_p = chain.m_p();
    let mut digits = vec![0; chain.r() as usize];
    let mut rest = leaf;
    for d in digits.iter_mut().rev() {
        *d = rest % m_p;
        rest /= m_p;
    }
    digits
}

fn leaf_path_state(cfg: &DetectionConfig, leaf: usize) -> PathState {
    let design = &cfg.design;
    let sic = cfg.sic_symbols();
    let mut st = PathState {
        weight: 1,
        gain: Gain::from_integer(1),
        noise_factor: 1,
    };
    for j in leaf_path(&cfg.chain, leaf) {
        if sic.contains(&j) {
            let support = sic_support(design.p(), j).len() as i64;
            st.weight *= support;
            st.gain *= Gain::from_integer(support);
            st.noise_factor *= support;
        } else {
            st.weight *= design.weights()[j];
            st.gain *= design.gains()[j];
            st.noise_factor *= design.noise_factor(j);
        }
    }
    st
}

/// Runs recursive detection once. Build a [`RecursiveDetector`] to reuse
/// the precomputed leaf templates across many received vectors.
pub fn recursive_detect(
    y: &[f64],
    cfg: &DetectionConfig,
    noise_variance: f64,
) -> Result<Detection, DetectError> {
    RecursiveDetector::new(cfg.clone())?.detect(y, noise_variance)
}

/// Recursive detection with interference cancellation on `symbols`.
///
/// With no symbols this is exactly [`recursive_detect`].
pub fn sic_enhanced_detect(
    y: &[f64],
    cfg: &DetectionConfig,
    symbols: Vec<usize>,
    noise_variance: f64,
) -> Result<Detection, DetectError> {
    let cfg = cfg.clone().with_sic(symbols)?;
    RecursiveDetector::new(cfg)?.detect(y, noise_variance)
}

/// The integer matrix `C` mapping `y` to the stacked leaf equations of
/// plain recursive combining (leaf by leaf, `m_f` rows each).
pub fn combining_matrix(chain: &FactorChain, design: &CombinerDesign) -> Result<Vec<Vec<i64>>, DetectError> {
    let cfg = DetectionConfig::new(chain.clone(), design.clone())?;
    let det = RecursiveDetector::new(cfg)?;
    let m = det.m;
    let rows = m;
    let mut c = vec![vec![0i64; m]; rows];
    let mut unit = vec![0.0; m];
    for col in 0..m {
        unit[col] = 1.0;
        let leaves = det.combine_only(&unit)?;
        for (row, v) in leaves.iter().flat_map(|l| l.values.iter()).enumerate() {
            c[row][col] = v.round() as i64;
        }
        unit[col] = 0.0;
    }
    Ok(c)
}

/// Full-matrix MAP over every `x ∈ A^K` for `y = G (o ∘ x) + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleDecision {
    pub symbols: Vec<f64>,
    pub ambiguous: bool,
    pub ops: OpCounts,
}

pub fn brute_force_map_oracle(
    y: &[f64],
    g: &PatternMatrix,
    constellation: &Constellation,
    power_offsets: Option<&[f64]>,
    noise_variance: f64,
    cap: usize,
) -> Result<OracleDecision, DetectError> {
    let (m, k) = (g.rows(), g.cols());
    if y.len() != m {
        return Err(DetectError::DimensionMismatch {
            expected: m,
            got: y.len(),
        });
    }
    check_noise(noise_variance)?;
    let ones = vec![1.0; k];
    let offsets = power_offsets.unwrap_or(&ones);
    if offsets.len() != k {
        return Err(DetectError::PowerOffsets(format!(
            "expected {k} values, got {}",
            offsets.len()
        )));
    }
    let q = constellation.len();
    let hypotheses = hypothesis_count(q, k, cap)?;
    let points = constellation.points();
    let use_prior = !constellation.is_uniform() && noise_variance > 0.0;
    let log_p: Vec<f64> = constellation.priors().iter().map(|p| p.ln()).collect();

    // Odometer over hypotheses (first user most significant), updating the
    // residual y - G(o∘x) incrementally as digits change.
    let mut digits = vec![0usize; k];
    let mut residual: Vec<f64> = y.to_vec();
    for u in 0..k {
        let amp = offsets[u] * points[0];
        for i in 0..m {
            if g.get(i, u) == 1 {
                residual[i] -= amp;
            }
        }
    }
    let mut ops = OpCounts::default();
    let mut best = (f64::INFINITY, 0usize, false);
    let mut best_digits = digits.clone();
    for h in 0..hypotheses {
        let mut metric: f64 = residual.iter().map(|e| e * e).sum();
        ops.muls += m as u64;
        ops.adds += m as u64 - 1;
        if use_prior {
            let lp: f64 = digits.iter().map(|&d| log_p[d]).sum();
            metric -= 2.0 * noise_variance * lp;
            ops.adds += k as u64 + 1;
            ops.muls += 1;
        }
        let tol = 1e-12 * metric.abs().max(1.0);
        if h == 0 || metric < best.0 - tol {
            best = (metric, h, false);
            best_digits.clone_from(&digits);
        } else if metric <= best.0 + tol {
            best.2 = true;
        }
        // advance the odometer
        for u in (0..k).rev() {
            let old = digits[u];
            let new = if old + 1 == q { 0 } else { old + 1 };
            digits[u] = new;
            let delta = offsets[u] * (points[new] - points[old]);
            for i in 0..m {
                if g.get(i, u) == 1 {
                    residual[i] -= delta;
                    ops.adds += 1;
                }
            }
            if new != 0 {
                break;
            }
        }
    }
    Ok(OracleDecision {
        symbols: best_digits.iter().map(|&d| points[d]).collect(),
        ambiguous: best.2,
        ops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiner::find_combiners;

    fn ones_1x2() -> PatternMatrix {
        PatternMatrix::from_rows(&[[1, 1]]).unwrap()
    }

    fn ring3() -> PatternMatrix {
        PatternMatrix::from_rows(&[[1, 1, 0], [1, 0, 1], [0, 1, 1]]).unwrap()
    }

    fn example_cfg(r: u32) -> DetectionConfig {
        let chain = FactorChain::new(ones_1x2(), ring3(), r).unwrap();
        let design = find_combiners(&ring3()).unwrap();
        DetectionConfig::new(chain, design).unwrap()
    }

    #[test]
    fn final_stage_unique_and_ambiguous() {
        let bpsk = Constellation::bpsk();
        let w = Ratio::from_integer(4);
        let d = final_stage_map(&[8.0], &ones_1x2(), w, &bpsk, &[1.0, 1.0], 0.0, 16).unwrap();
        assert_eq!(d.symbols, vec![1.0, 1.0]);
        assert!(!d.ambiguous);

        let d = final_stage_map(&[0.0], &ones_1x2(), w, &bpsk, &[1.0, 1.0], 0.0, 16).unwrap();
        assert!(d.ambiguous);
        assert_eq!(d.hypothesis, 1);
        assert_eq!(d.symbols, vec![-1.0, 1.0]);

        // distinct amplitudes separate the pair: templates are ±4·(1 ± 1/2)
        let z = 4.0 * (1.0 - 0.5);
        let d = final_stage_map(&[z], &ones_1x2(), w, &bpsk, &[1.0, 0.5], 0.0, 16).unwrap();
        assert!(!d.ambiguous);
        assert_eq!(d.symbols, vec![1.0, -1.0]);
    }

    #[test]
    fn final_stage_errors() {
        let bpsk = Constellation::bpsk();
        let w = Ratio::from_integer(1);
        assert!(matches!(
            final_stage_map(&[0.0, 1.0], &ones_1x2(), w, &bpsk, &[1.0, 1.0], 1.0, 16),
            Err(DetectError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            final_stage_map(&[0.0], &ones_1x2(), w, &bpsk, &[1.0, 1.0], 1.0, 3),
            Err(DetectError::HypothesisCap { .. })
        ));
        assert!(matches!(
            final_stage_map(&[0.0], &ones_1x2(), Ratio::from_integer(0), &bpsk, &[1.0, 1.0], 1.0, 16),
            Err(DetectError::Weight)
        ));
    }

    #[test]
    fn leaf_users_cover_every_user_once() {
        let chain = FactorChain::new(ones_1x2(), ring3(), 2).unwrap();
        let mut all: Vec<usize> = (0..9).flat_map(|s| leaf_users(&chain, s)).collect();
        all.sort();
        assert_eq!(all, (0..18).collect::<Vec<_>>());
        // leaf (0, 2): first recursion row 0, second row 2 -> t_7
        assert_eq!(leaf_users(&chain, 2), vec![6, 15]);
    }

    #[test]
    fn example_trace_weights_and_variances() {
        let cfg = example_cfg(2);
        let g = cfg.chain().build().unwrap();
        let x: Vec<f64> = (0..18).map(|k| if k % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let y = g.mul_vec(&x);
        let det = recursive_detect(&y, &cfg, 0.0).unwrap();
        let t = &det.trace;
        assert_eq!(t.recursions.len(), 2);
        assert_eq!(t.recursions[0].super_groups, 1);
        assert_eq!(t.recursions[0].equations_per_super_group, 9);
        assert_eq!(t.recursions[1].super_groups, 3);
        assert_eq!(t.recursions[1].equations_per_super_group, 3);
        for sg in &t.recursions[0].outputs {
            assert_eq!(sg.noise_factor, 3);
            assert_eq!(sg.gain, Gain::new(4, 3));
        }
        for leaf in &t.leaves {
            assert_eq!(leaf.noise_factor, 9);
            assert_eq!(leaf.weight, 4);
            assert_eq!(leaf.gain, Gain::new(16, 9));
            let tsum: f64 = leaf.users.iter().map(|&u| x[u]).sum();
            assert_eq!(leaf.values, vec![4.0 * tsum]);
        }
        assert_eq!(det.ops.combining_adds, 36);
        assert_eq!(det.ops.final_stage_invocations, 9);
        assert!(det.ops.within_bounds());
    }

    #[test]
    fn bounds_formula() {
        let chain = FactorChain::new(ones_1x2(), ring3(), 2).unwrap();
        let b = op_count_bounds(&chain, OpCounts { adds: 5, muls: 7 });
        assert_eq!(b.combining_adds, 36);
        assert_eq!(b.final_stage_invocations, 9);
        assert_eq!(b.bound_adds, 36 + 45);
        assert_eq!(b.bound_muls, 63);
        let chain0 = FactorChain::new(ones_1x2(), ring3(), 0).unwrap();
        let b = op_count_bounds(&chain0, OpCounts { adds: 5, muls: 7 });
        assert_eq!((b.bound_adds, b.bound_muls), (5, 7));
        let f2 = PatternMatrix::from_rows(&[[1, 1, 0], [0, 1, 1]]).unwrap();
        let p4 = PatternMatrix::identity(4);
        let chain = FactorChain::new(f2, p4, 1).unwrap();
        assert_eq!(op_count_bounds(&chain, OpCounts::default()).combining_adds, 24);
    }

    #[test]
    fn no_recursion_is_plain_map() {
        let cfg = example_cfg(0);
        let det = recursive_detect(&[2.0], &cfg, 0.0).unwrap();
        assert!(det.trace.recursions.is_empty());
        assert_eq!(det.symbols, vec![1.0, 1.0]);
        assert_eq!(det.ops.combining_adds, 0);
    }

    #[test]
    fn sic_contract() {
        let cfg = example_cfg(2);
        assert!(cfg.clone().with_sic(vec![2]).is_ok());
        assert!(matches!(
            cfg.clone().with_sic(vec![0, 1, 2]),
            Err(DetectError::Sic(_))
        ));
        assert!(matches!(cfg.clone().with_sic(vec![5]), Err(DetectError::Sic(_))));
        assert!(matches!(cfg.with_sic(vec![1, 1]), Err(DetectError::Sic(_))));
    }

    #[test]
    fn sic_gains_on_example() {
        let cfg = example_cfg(2).with_sic(vec![2]).unwrap();
        let g = cfg.chain().build().unwrap();
        let x: Vec<f64> = (0..18).map(|k| if k % 5 < 2 { 1.0 } else { -1.0 }).collect();
        let det = RecursiveDetector::new(cfg).unwrap().detect(&g.mul_vec(&x), 0.0).unwrap();
        for sg in &det.trace.recursions[0].outputs {
            let expected = if sg.index == 2 { Gain::from_integer(2) } else { Gain::new(4, 3) };
            assert_eq!(sg.gain, expected);
            assert_eq!(sg.cancelled, sg.index == 2);
        }
        let leaf_t7 = &det.trace.leaves[2];
        assert_eq!(leaf_t7.gain, Gain::new(8, 3));
        assert_eq!(det.trace.leaves[8].gain, Gain::from_integer(4));
        for leaf in &det.trace.leaves {
            let tsum: f64 = leaf.users.iter().map(|&u| x[u]).sum();
            assert_eq!(leaf.values, vec![leaf.weight as f64 * tsum]);
        }
        assert!(det.ops.within_bounds());
        assert!(det.ops.sic_adds > 0);
    }

    #[test]
    fn dimension_and_noise_errors() {
        let cfg = example_cfg(1);
        assert!(matches!(
            recursive_detect(&[0.0; 4], &cfg, 1.0),
            Err(DetectError::DimensionMismatch { expected: 3, got: 4 })
        ));
        assert!(matches!(
            recursive_detect(&[0.0; 3], &cfg, -1.0),
            Err(DetectError::NoiseVariance(_))
        ));
    }

    #[test]
    fn design_mismatch_rejected() {
        let chain = FactorChain::new(ones_1x2(), ring3(), 1).unwrap();
        let design = find_combiners(&PatternMatrix::identity(3)).unwrap();
        assert!(matches!(
            DetectionConfig::new(chain, design),
            Err(DetectError::DesignMismatch)
        ));
    }

    #[test]
    fn oracle_noiseless_recovers_distinct_columns() {
        let bpsk = Constellation::bpsk();
        let x = [1.0, -1.0, -1.0];
        let y = ring3().mul_vec(&x);
        let d = brute_force_map_oracle(&y, &ring3(), &bpsk, None, 0.0, 1 << 10).unwrap();
        assert_eq!(d.symbols, x.to_vec());
        assert!(!d.ambiguous);
        assert!(matches!(
            brute_force_map_oracle(&y, &ring3(), &bpsk, None, 0.0, 4),
            Err(DetectError::HypothesisCap { .. })
        ));
    }
}
