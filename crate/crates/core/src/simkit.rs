//! Constellations, AWGN synthesis and the seeded Monte Carlo harness.
//!
//! Randomness comes from ChaCha8 keyed by a 64-bit seed; trial `t` draws
//! from stream `t` of that key, so trials are independent of each other and
//! of the execution schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::combiner::{gain_to_f64, CombinerDesign, Gain};
use crate::detector::{
    brute_force_map_oracle, DetectError, DetectionConfig, OpCounts, RecursiveDetector,
    DEFAULT_ORACLE_CAP,
};
use crate::pattern::{coupled_groups, FactorChain, PatternMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("constellation must have at least one point")]
    EmptyConstellation,
    #[error("priors must be positive, one per point, and sum to 1")]
    Priors,
    #[error("SNR values must be positive and finite (got {0})")]
    Snr(f64),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

/// Finite real symbol alphabet with per-point prior probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    points: Vec<f64>,
    priors: Vec<f64>,
}

impl Constellation {
    /// Equiprobable alphabet.
    pub fn new(points: Vec<f64>) -> Result<Self, SimError> {
        if points.is_empty() {
            return Err(SimError::EmptyConstellation);
        }
        let n = points.len();
        Ok(Constellation {
            points,
            priors: vec![1.0 / n as f64; n],
        })
    }

    pub fn with_priors(mut self, priors: Vec<f64>) -> Result<Self, SimError> {
        let total: f64 = priors.iter().sum();
        if priors.len() != self.points.len()
            || priors.iter().any(|&p| !(p > 0.0 && p.is_finite()))
            || (total - 1.0).abs() > 1e-9
        {
            return Err(SimError::Priors);
        }
        self.priors = priors;
        Ok(self)
    }

    /// `{-1, +1}`.
    pub fn bpsk() -> Self {
        Constellation::new(vec![-1.0, 1.0]).expect("static alphabet")
    }

    /// `{-3, -1, 1, 3} / √5`, unit average power.
    pub fn pam4() -> Self {
        let s = 5f64.sqrt();
        Constellation::new(vec![-3.0 / s, -1.0 / s, 1.0 / s, 3.0 / s]).expect("static alphabet")
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        let first = self.priors[0];
        self.priors.iter().all(|&p| p == first)
    }

    /// Mean squared magnitude over the alphabet, `P_x`.
    pub fn average_power(&self) -> f64 {
        self.points.iter().map(|x| x * x).sum::<f64>() / self.points.len() as f64
    }

    /// Draws a point according to the priors.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_uniform() {
            return self.points[rng.random_range(0..self.points.len())];
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (p, &x) in self.priors.iter().zip(&self.points) {
            acc += p;
            if u < acc {
                return x;
            }
        }
        *self.points.last().expect("nonempty")
    }
}

/// Generator for trial `trial` under `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// `y = G x + n` with i.i.d. `N(0, σ²)` noise drawn from `rng`.
pub fn synthesize_rx_with<R: Rng + ?Sized>(
    x: &[f64],
    g: &PatternMatrix,
    noise_variance: f64,
    rng: &mut R,
) -> Vec<f64> {
    let sigma = noise_variance.sqrt();
    let mut y = g.mul_vec(x);
    if noise_variance > 0.0 {
        for v in &mut y {
            let n: f64 = StandardNormal.sample(rng);
            *v += sigma * n;
        }
    }
    y
}

/// `y = G x + n`, deterministic in `seed`.
pub fn synthesize_rx(x: &[f64], g: &PatternMatrix, noise_variance: f64, seed: u64) -> Vec<f64> {
    synthesize_rx_with(x, g, noise_variance, &mut trial_rng(seed, 0))
}

/// Measured SNR gain on one leaf path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathGain {
    pub leaf: usize,
    /// Combining row chosen at each recursion.
    pub path: Vec<usize>,
    #[serde(serialize_with = "ser_gain")]
    pub exact: Gain,
    pub measured: f64,
    pub std_error: f64,
    pub samples: u64,
}

fn ser_gain<S: serde::Serializer>(g: &Gain, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&g.to_string())
}

impl PathGain {
    /// `|measured - exact|` in standard errors.
    pub fn z_score(&self) -> f64 {
        (self.measured - gain_to_f64(&self.exact)).abs() / self.std_error
    }
}

/// Feeds pure noise through plain recursive combining and measures the
/// output noise variance on every leaf path. The measured gain is
/// `weight² · σ² / variance`; its standard error uses `Var(n²) = 2σ⁴`.
pub fn estimate_gain(
    design: &CombinerDesign,
    chain: &FactorChain,
    noise_variance: f64,
    trials: u64,
    seed: u64,
) -> Result<Vec<PathGain>, SimError> {
    if !(noise_variance > 0.0 && noise_variance.is_finite()) {
        return Err(SimError::Detect(DetectError::NoiseVariance(noise_variance)));
    }
    let cfg = DetectionConfig::new(chain.clone(), design.clone())?;
    let det = RecursiveDetector::new(cfg)?;
    let (m, _) = chain.dimensions().map_err(DetectError::from)?;
    let leaves = chain.leaf_count();
    let sigma = noise_variance.sqrt();

    let sums = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let y: Vec<f64> = (0..m)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    sigma * n
                })
                .collect();
            let out = det.combine_only(&y).expect("dimensions checked");
            out.iter()
                .map(|l| l.values.iter().map(|v| v * v).sum::<f64>())
                .collect::<Vec<f64>>()
        })
        .reduce(
            || vec![0.0; leaves],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );

    let template = det.combine_only(&vec![0.0; m])?;
    let per_trial = chain.m_f() as u64;
    Ok(template
        .iter()
        .zip(sums)
        .map(|(leaf, sum)| {
            let samples = trials * per_trial;
            let variance = sum / samples as f64;
            let w = leaf.weight as f64;
            let measured = w * w * noise_variance / variance;
            PathGain {
                leaf: leaf.index,
                path: crate::detector::leaf_path(chain, leaf.index),
                exact: leaf.gain,
                measured,
                std_error: measured * (2.0 / samples as f64).sqrt(),
                samples,
            }
        })
        .collect())
}

/// Which decisions feed the error statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorKind {
    Recursive,
    Oracle,
    /// Recursive with interference cancellation; the symbols to cancel
    /// are taken from the detection config.
    Sic,
}

#[derive(Debug, Clone)]
pub struct MonteCarloOptions {
    pub trials: u64,
    pub seed: u64,
    pub detector: DetectorKind,
    /// Also run the full-matrix oracle for agreement statistics.
    pub compare_oracle: bool,
    pub oracle_cap: usize,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        MonteCarloOptions {
            trials: 1000,
            seed: 1,
            detector: DetectorKind::Recursive,
            compare_oracle: false,
            oracle_cap: DEFAULT_ORACLE_CAP,
        }
    }
}

/// Everything drawn and decided in one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub trial: u64,
    pub transmitted: Vec<f64>,
    pub received: Vec<f64>,
    pub decisions: Vec<f64>,
    pub oracle_decisions: Option<Vec<f64>>,
    pub correct: Vec<bool>,
    pub coupled_correct: Vec<bool>,
    pub ambiguous_leaves: usize,
    pub ops: OpCounts,
}

/// Statistics at one SNR point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloRow {
    pub snr: f64,
    pub trials: u64,
    /// Individual symbol error rate over all users.
    pub ser: f64,
    /// Error rate of the per-pattern symbol sums.
    pub coupled_ser: f64,
    /// Fraction of final-stage decisions that were ties.
    pub ambiguity_rate: f64,
    /// Fraction of trials where the coupled sums agree with the oracle;
    /// `None` when the oracle was not run or exceeds its cap.
    pub oracle_agreement: Option<f64>,
    pub symbol_errors: u64,
    pub coupled_errors: u64,
    pub measured_adds: u64,
    pub measured_muls: u64,
    pub bound_adds: u64,
    pub bound_muls: u64,
}

struct Harness {
    detector: RecursiveDetector,
    g: PatternMatrix,
    groups: Vec<Vec<usize>>,
    oracle: bool,
    opts: MonteCarloOptions,
}

impl Harness {
    fn new(cfg: &DetectionConfig, opts: &MonteCarloOptions) -> Result<Self, SimError> {
        let cfg = match opts.detector {
            DetectorKind::Sic => cfg.clone(),
            _ => cfg.clone().with_sic(Vec::new())?,
        };
        let g = cfg.chain().build().map_err(DetectError::from)?;
        let hypotheses = (cfg.constellation().len() as f64).powi(g.cols() as i32);
        let oracle_needed = opts.compare_oracle || opts.detector == DetectorKind::Oracle;
        let oracle = oracle_needed && hypotheses <= opts.oracle_cap as f64;
        if opts.detector == DetectorKind::Oracle && !oracle {
            return Err(SimError::Detect(DetectError::HypothesisCap {
                hypotheses: hypotheses.min(usize::MAX as f64) as usize,
                cap: opts.oracle_cap,
            }));
        }
        Ok(Harness {
            groups: coupled_groups(&g),
            detector: RecursiveDetector::new(cfg)?,
            g,
            oracle,
            opts: opts.clone(),
        })
    }

    fn trial(&self, snr: f64, trial: u64) -> TrialRecord {
        let cfg = self.detector.config();
        let c = cfg.constellation();
        let noise_variance = c.average_power() / snr;
        let mut rng = trial_rng(self.opts.seed, trial);
        let x: Vec<f64> = (0..self.g.cols()).map(|_| c.sample(&mut rng)).collect();
        let tx: Vec<f64> = x
            .iter()
            .zip(cfg.power_offsets())
            .map(|(a, o)| a * o)
            .collect();
        let y = synthesize_rx_with(&tx, &self.g, noise_variance, &mut rng);

        let rec = self
            .detector
            .detect(&y, noise_variance)
            .expect("dimensions fixed by the config");
        let oracle = self.oracle.then(|| {
            brute_force_map_oracle(
                &y,
                &self.g,
                c,
                Some(cfg.power_offsets()),
                noise_variance,
                self.opts.oracle_cap,
            )
            .expect("cap checked")
        });
        let (decisions, ops) = match (&self.opts.detector, &oracle) {
            (DetectorKind::Oracle, Some(o)) => (o.symbols.clone(), o.ops),
            _ => (
                rec.symbols.clone(),
                OpCounts {
                    adds: rec.ops.measured_adds(),
                    muls: rec.ops.measured_muls(),
                },
            ),
        };
        let correct = decisions.iter().zip(&x).map(|(a, b)| a == b).collect();
        let coupled_correct = self
            .groups
            .iter()
            .map(|grp| group_sum(grp, &decisions) == group_sum(grp, &x))
            .collect();
        TrialRecord {
            seed: self.opts.seed,
            trial,
            transmitted: x,
            received: y,
            decisions,
            oracle_decisions: oracle.map(|o| o.symbols),
            correct,
            coupled_correct,
            ambiguous_leaves: rec.ambiguous_leaves(),
            ops,
        }
    }
}

fn group_sum(group: &[usize], x: &[f64]) -> f64 {
    group.iter().map(|&u| x[u]).sum()
}

/// Runs one trial of the Monte Carlo experiment.
pub fn run_trial(
    cfg: &DetectionConfig,
    snr: f64,
    trial: u64,
    opts: &MonteCarloOptions,
) -> Result<TrialRecord, SimError> {
    check_snr(snr)?;
    Ok(Harness::new(cfg, opts)?.trial(snr, trial))
}

fn check_snr(snr: f64) -> Result<(), SimError> {
    if snr > 0.0 && snr.is_finite() {
        Ok(())
    } else {
        Err(SimError::Snr(snr))
    }
}

/// Error-rate table over an SNR grid (linear `P_x / σ²`). The same trial
/// streams are reused at every SNR point. Zero trials yield no rows.
pub fn run_monte_carlo(
    cfg: &DetectionConfig,
    snrs: &[f64],
    opts: &MonteCarloOptions,
) -> Result<Vec<MonteCarloRow>, SimError> {
    for &s in snrs {
        check_snr(s)?;
    }
    if opts.trials == 0 {
        return Ok(Vec::new());
    }
    let harness = Harness::new(cfg, opts)?;
    let bounds = harness.detector.bounds();
    let users = harness.g.cols() as u64;
    let group_count = harness.groups.len() as u64;
    let leaves = harness.detector.config().chain().leaf_count() as u64;

    snrs.iter()
        .map(|&snr| {
            let tally = (0..opts.trials)
                .into_par_iter()
                .map(|t| {
                    let rec = harness.trial(snr, t);
                    let agree = rec.oracle_decisions.as_ref().map(|o| {
                        harness
                            .groups
                            .iter()
                            .all(|grp| group_sum(grp, o) == group_sum(grp, &rec.decisions))
                    });
                    Tally {
                        symbol_errors: rec.correct.iter().filter(|c| !**c).count() as u64,
                        coupled_errors: rec.coupled_correct.iter().filter(|c| !**c).count() as u64,
                        ambiguous: rec.ambiguous_leaves as u64,
                        agreements: u64::from(agree == Some(true)),
                        max_adds: rec.ops.adds,
                        max_muls: rec.ops.muls,
                    }
                })
                .reduce(Tally::default, Tally::merge);
            let n = opts.trials;
            Ok(MonteCarloRow {
                snr,
                trials: n,
                ser: tally.symbol_errors as f64 / (n * users) as f64,
                coupled_ser: tally.coupled_errors as f64 / (n * group_count) as f64,
                ambiguity_rate: tally.ambiguous as f64 / (n * leaves) as f64,
                oracle_agreement: harness.oracle.then(|| tally.agreements as f64 / n as f64),
                symbol_errors: tally.symbol_errors,
                coupled_errors: tally.coupled_errors,
                measured_adds: tally.max_adds,
                measured_muls: tally.max_muls,
                bound_adds: bounds.bound_adds,
                bound_muls: bounds.bound_muls,
            })
        })
        .collect()
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    symbol_errors: u64,
    coupled_errors: u64,
    ambiguous: u64,
    agreements: u64,
    max_adds: u64,
    max_muls: u64,
}

impl Tally {
    fn merge(a: Tally, b: Tally) -> Tally {
        Tally {
            symbol_errors: a.symbol_errors + b.symbol_errors,
            coupled_errors: a.coupled_errors + b.coupled_errors,
            ambiguous: a.ambiguous + b.ambiguous,
            agreements: a.agreements + b.agreements,
            max_adds: a.max_adds.max(b.max_adds),
            max_muls: a.max_muls.max(b.max_muls),
        }
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
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

    #[test]
    fn constellation_power_and_priors() {
        assert_eq!(Constellation::bpsk().average_power(), 1.0);
        assert!((Constellation::pam4().average_power() - 1.0).abs() < 1e-15);
        assert!(Constellation::new(vec![]).is_err());
        assert!(Constellation::bpsk().with_priors(vec![0.5, 0.6]).is_err());
        let c = Constellation::bpsk().with_priors(vec![0.9, 0.1]).unwrap();
        assert!(!c.is_uniform());
        let mut rng = trial_rng(3, 0);
        let neg = (0..20_000).filter(|_| c.sample(&mut rng) < 0.0).count();
        assert!((neg as f64 / 20_000.0 - 0.9).abs() < 0.01);
    }

    #[test]
    fn noiseless_synthesis() {
        let g = ring3();
        let x = [1.0, -1.0, 1.0];
        assert_eq!(synthesize_rx(&x, &g, 0.0, 9), g.mul_vec(&x));
    }

    #[test]
    fn opposite_coupled_symbols_cancel() {
        let chain = FactorChain::new(ones_1x2(), ring3(), 2).unwrap();
        let g = chain.build().unwrap();
        let x: Vec<f64> = (0..18).map(|k| if k < 9 { 1.0 } else { -1.0 }).collect();
        assert!(synthesize_rx(&x, &g, 0.0, 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_synthesis_is_reproducible() {
        let g = ring3();
        let x = [1.0, 1.0, 1.0];
        assert_eq!(synthesize_rx(&x, &g, 0.3, 42), synthesize_rx(&x, &g, 0.3, 42));
        assert_ne!(synthesize_rx(&x, &g, 0.3, 42), synthesize_rx(&x, &g, 0.3, 43));
    }

    #[test]
    fn identity_paths_have_unit_gain() {
        let p = PatternMatrix::identity(3);
        let chain = FactorChain::new(ones_1x2(), p.clone(), 1).unwrap();
        let design = find_combiners(&p).unwrap();
        for pg in estimate_gain(&design, &chain, 1.0, 20_000, 5).unwrap() {
            assert_eq!(pg.exact, Gain::from_integer(1));
            assert!(pg.z_score() < 4.0, "{pg:?}");
        }
    }

    #[test]
    fn wilson_bounds() {
        let (lo, hi) = wilson_interval(0, 100, 1.96);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.05);
        let (lo, hi) = wilson_interval(50, 100, 1.96);
        assert!(lo < 0.5 && hi > 0.5);
    }

    #[test]
    fn zero_trials_give_no_rows() {
        let chain = FactorChain::new(ones_1x2(), ring3(), 1).unwrap();
        let cfg = DetectionConfig::new(chain, find_combiners(&ring3()).unwrap()).unwrap();
        let opts = MonteCarloOptions {
            trials: 0,
            ..Default::default()
        };
        assert!(run_monte_carlo(&cfg, &[10.0], &opts).unwrap().is_empty());
        assert!(run_monte_carlo(&cfg, &[0.0], &opts).is_err());
    }
}
