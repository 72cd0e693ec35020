use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kronnoma::combiner::{DEFAULT_MAX_MP, HARD_MAX_MP};
use kronnoma::detector::{OpCountBounds, RecursiveDetector};
use kronnoma::rate;
use kronnoma::simkit::DetectorKind;
use kronnoma::{
    find_combiners, run_algorithm1, CombinerDesign, CombinerError, Constellation, DetectError,
    DetectionConfig, FactorChain, MonteCarloOptions, PatternMatrix, SearchOptions, SimError,
    SumRateScorer,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_CAP: u8 = 3;

#[derive(Parser)]
#[command(name = "kronnoma", version, about = "Kronecker-factorized code-domain NOMA toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exhaustive search for square factors and their combining coefficients.
    Search(SearchArgs),
    /// Combining coefficients for one given square factor.
    Design(DesignArgs),
    /// Per-RE sum rates over an SNR grid.
    Rate(RateArgs),
    /// Monte Carlo symbol error rates of the recursive detector.
    Simulate(SimulateArgs),
    /// Operation counts of one detection against the closed-form bounds.
    CountOps(CountOpsArgs),
}

#[derive(clap::Args)]
struct SearchArgs {
    #[arg(long)]
    mp: usize,
    /// Reference SNR of the sum-rate scorer.
    #[arg(long, default_value_t = SumRateScorer::DEFAULT_REF_SNR_DB, allow_negative_numbers = true)]
    ref_snr_db: f64,
    /// Number of ranked designs to emit; defaults to all designs tied at the top score.
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    json_out: Option<PathBuf>,
    /// Raise the enumeration cap from m_p = 5 to m_p = 8.
    #[arg(long)]
    allow_large: bool,
    /// Rectangular factor used by the scorer (matrix JSON); defaults to [1 1].
    #[arg(long)]
    scorer_f: Option<PathBuf>,
    /// Recursion count used by the scorer.
    #[arg(long, default_value_t = SumRateScorer::DEFAULT_R)]
    scorer_r: u32,
}

#[derive(clap::Args)]
struct DesignArgs {
    /// Square factor as matrix JSON.
    #[arg(long, conflicts_with = "chain", required_unless_present = "chain")]
    p: Option<PathBuf>,
    /// Take the square factor from a chain JSON.
    #[arg(long)]
    chain: Option<PathBuf>,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Pdma,
    Oma,
    Example4,
}

#[derive(clap::Args)]
struct RateArgs {
    #[arg(long)]
    chain: PathBuf,
    /// Design JSON (a `search`/`design` output or a single record); computed from P when absent.
    #[arg(long)]
    gains: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    snr_db_min: f64,
    #[arg(long, default_value_t = 30.0, allow_negative_numbers = true)]
    snr_db_max: f64,
    #[arg(long, default_value_t = 1.0)]
    snr_db_step: f64,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Baseline::Pdma, Baseline::Oma, Baseline::Example4])]
    baselines: Vec<Baseline>,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DetectorArg {
    Recursive,
    Oracle,
    Sic,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConstellationArg {
    Bpsk,
    Pam4,
}

impl ConstellationArg {
    fn build(self) -> Constellation {
        match self {
            ConstellationArg::Bpsk => Constellation::bpsk(),
            ConstellationArg::Pam4 => Constellation::pam4(),
        }
    }
}

#[derive(clap::Args)]
struct DetectorSetup {
    #[arg(long)]
    chain: PathBuf,
    /// Design JSON; computed from the chain's P when absent.
    #[arg(long)]
    design: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ConstellationArg::Bpsk)]
    constellation: ConstellationArg,
    /// Per-user amplitude offsets, comma separated, one per column of G.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    power_offsets: Option<Vec<f64>>,
    /// Auxiliary symbol indices decided first and cancelled, comma separated.
    #[arg(long, value_delimiter = ',')]
    sic: Option<Vec<usize>>,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[command(flatten)]
    setup: DetectorSetup,
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    snr_db: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    #[arg(long, value_enum, default_value_t = DetectorArg::Recursive)]
    detector: DetectorArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also run the full-matrix MAP oracle and report agreement on stderr.
    #[arg(long)]
    compare_oracle: bool,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CountOpsArgs {
    #[command(flatten)]
    setup: DetectorSetup,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

/// Error carrying its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = if is_cap(&error) { EXIT_CAP } else { EXIT_CONFIG };
        Failure { code, error }
    }
}

fn is_cap(error: &anyhow::Error) -> bool {
    error.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<CombinerError>(),
            Some(CombinerError::AboveCap { .. })
        ) || matches!(
            cause.downcast_ref::<DetectError>(),
            Some(DetectError::HypothesisCap { .. })
        ) || matches!(
            cause.downcast_ref::<SimError>(),
            Some(SimError::Detect(DetectError::HypothesisCap { .. }))
        )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Search(args) => cmd_search(args)?,
        Command::Design(args) => cmd_design(args)?,
        Command::Rate(args) => cmd_rate(args)?,
        Command::Simulate(args) => cmd_simulate(args)?,
        Command::CountOps(args) => cmd_count_ops(args)?,
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("KRONNOMA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("KRONNOMA_THREADS must be a nonnegative integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// A design file holds either one record or a list of them; the first wins.
fn read_design(path: &Path) -> Result<CombinerDesign> {
    let value: serde_json::Value = read_json(path)?;
    let record = match value {
        serde_json::Value::Array(mut items) => {
            if items.is_empty() {
                bail!("{} contains no designs", path.display());
            }
            items.swap_remove(0)
        }
        other => other,
    };
    serde_json::from_value(record).with_context(|| format!("parsing design in {}", path.display()))
}

/// Search emits factors in canonical column order; follow the chain's order.
fn align(design: CombinerDesign, chain: &FactorChain) -> Result<CombinerDesign> {
    design.reindexed_for(chain.p()).ok_or_else(|| {
        anyhow!(
            "design factor {:?} is not a column permutation of the chain's P {:?}",
            design.p(),
            chain.p()
        )
    })
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut out = output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn csv_writer(path: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(output(path)?))
}

fn cmd_search(args: SearchArgs) -> Result<()> {
    if args.mp > HARD_MAX_MP || (args.mp > DEFAULT_MAX_MP && !args.allow_large) {
        // refuse before reading anything else
        let cap = if args.allow_large { HARD_MAX_MP } else { DEFAULT_MAX_MP };
        return Err(CombinerError::AboveCap { mp: args.mp, cap }.into());
    }
    let f = match &args.scorer_f {
        Some(path) => read_json::<PatternMatrix>(path)?,
        None => PatternMatrix::from_rows(&[[1, 1]])?,
    };
    let scorer = SumRateScorer::new(f, args.scorer_r, db_to_linear(args.ref_snr_db));
    let outcome = run_algorithm1(
        args.mp,
        &scorer,
        SearchOptions {
            allow_large: args.allow_large,
        },
    )?;
    let picked = match args.top {
        Some(n) => &outcome.ranked[..n.min(outcome.ranked.len())],
        None => outcome.top(),
    };
    eprintln!(
        "enumerated {} candidates, {} feasible, {} emitted",
        outcome.enumerated,
        outcome.ranked.len(),
        picked.len()
    );
    let designs: Vec<&CombinerDesign> = picked.iter().map(|s| &s.design).collect();
    write_json(args.json_out.as_deref(), &designs)
}

fn cmd_design(args: DesignArgs) -> Result<()> {
    let p = match (&args.p, &args.chain) {
        (Some(path), _) => read_json::<PatternMatrix>(path)?,
        (None, Some(path)) => read_json::<FactorChain>(path)?.p().clone(),
        (None, None) => bail!("either --p or --chain is required"),
    };
    let design = find_combiners(&p)?;
    write_json(args.json_out.as_deref(), &[design])
}

fn snr_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(min.is_finite() && max.is_finite() && step.is_finite()) || step <= 0.0 || max < min {
        bail!("SNR grid needs finite min <= max and a positive step");
    }
    let n = ((max - min) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| min + i as f64 * step).collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_rate(args: RateArgs) -> Result<()> {
    let chain: FactorChain = read_json(&args.chain)?;
    let design = match &args.gains {
        Some(path) => align(read_design(path)?, &chain)?,
        None => find_combiners(chain.p())?,
    };
    let gains = design.gains_f64();
    let grid = snr_grid(args.snr_db_min, args.snr_db_max, args.snr_db_step)?;
    let g = if args.baselines.contains(&Baseline::Pdma) {
        Some(chain.build()?)
    } else {
        None
    };
    let mut w = csv_writer(args.csv_out.as_deref())?;
    w.write_record(["snr_db", "c_recursive", "c_pdma", "c_oma", "c_example4"])?;
    for db in grid {
        let snr = db_to_linear(db);
        let want = |b| args.baselines.contains(&b);
        w.write_record([
            db.to_string(),
            rate::sum_rate_recursive(&chain, &gains, snr).to_string(),
            fmt_opt(g.as_ref().map(|g| rate::sum_rate_pdma(g, snr))),
            fmt_opt(want(Baseline::Oma).then(|| rate::sum_rate_oma(snr))),
            fmt_opt(want(Baseline::Example4).then(|| rate::sum_rate_example4(snr))),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn detection_config(setup: &DetectorSetup) -> Result<DetectionConfig> {
    let chain: FactorChain = read_json(&setup.chain)?;
    let design = match &setup.design {
        Some(path) => align(read_design(path)?, &chain)?,
        None => find_combiners(chain.p())?,
    };
    let mut cfg =
        DetectionConfig::new(chain, design)?.with_constellation(setup.constellation.build());
    if let Some(offsets) = &setup.power_offsets {
        cfg = cfg.with_power_offsets(offsets.clone())?;
    }
    if let Some(symbols) = &setup.sic {
        cfg = cfg.with_sic(symbols.clone())?;
    }
    Ok(cfg)
}

fn bounds_line(b: &OpCountBounds, combining: Option<u64>) -> String {
    let measured = combining.map_or_else(String::new, |c| format!("measured {c} <= "));
    format!(
        "combining adds: {measured}bound {}; final-stage invocations {}; bound_adds {} bound_muls {}",
        b.combining_adds, b.final_stage_invocations, b.bound_adds, b.bound_muls
    )
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    if args.snr_db.windows(2).any(|w| w[1] <= w[0]) {
        bail!("--snr-db must be strictly ascending");
    }
    let cfg = detection_config(&args.setup)?;
    let detector = match args.detector {
        DetectorArg::Recursive => DetectorKind::Recursive,
        DetectorArg::Oracle => DetectorKind::Oracle,
        DetectorArg::Sic => {
            if cfg.sic_symbols().is_empty() {
                bail!("--detector sic needs --sic <symbols>");
            }
            DetectorKind::Sic
        }
    };
    let opts = MonteCarloOptions {
        trials: args.trials,
        seed: args.seed,
        detector,
        compare_oracle: args.compare_oracle,
        ..Default::default()
    };
    let snrs: Vec<f64> = args.snr_db.iter().map(|&db| db_to_linear(db)).collect();
    let rows = kronnoma::run_monte_carlo(&cfg, &snrs, &opts)?;

    let mut w = csv_writer(args.csv_out.as_deref())?;
    w.write_record([
        "snr_db",
        "trials",
        "ser",
        "coupled_ser",
        "ambiguity_rate",
        "measured_adds",
        "measured_muls",
        "bound_adds",
        "bound_muls",
    ])?;
    for (db, row) in args.snr_db.iter().zip(&rows) {
        w.write_record([
            db.to_string(),
            row.trials.to_string(),
            row.ser.to_string(),
            row.coupled_ser.to_string(),
            row.ambiguity_rate.to_string(),
            row.measured_adds.to_string(),
            row.measured_muls.to_string(),
            row.bound_adds.to_string(),
            row.bound_muls.to_string(),
        ])?;
        if let Some(a) = row.oracle_agreement {
            eprintln!("snr_db {db}: oracle agreement {a}");
        }
    }
    w.flush()?;

    let det = RecursiveDetector::new(cfg)?;
    let combining = probe(&det)?.combining_adds;
    eprintln!("{}", bounds_line(&det.bounds(), Some(combining)));
    Ok(())
}

/// Noiseless detection of the all-first-point vector; combining counts do
/// not depend on the data.
fn probe(det: &RecursiveDetector) -> Result<kronnoma::OpCountReport> {
    let cfg = det.config();
    let g = cfg.chain().build()?;
    let first = cfg.constellation().points()[0];
    let x: Vec<f64> = cfg.power_offsets().iter().map(|o| o * first).collect();
    Ok(det.detect(&g.mul_vec(&x), 0.0)?.ops)
}

#[derive(Serialize)]
struct CountOpsReport {
    m: usize,
    k: usize,
    combining_adds: u64,
    final_stage_invocations: u64,
    final_adds: u64,
    final_muls: u64,
    sic_adds: u64,
    sic_muls: u64,
    measured_adds: u64,
    measured_muls: u64,
    bound_combining_adds: u64,
    bound_adds: u64,
    bound_muls: u64,
    within_bounds: bool,
}

fn cmd_count_ops(args: CountOpsArgs) -> Result<()> {
    let cfg = detection_config(&args.setup)?;
    let (m, k) = cfg.chain().dimensions()?;
    let det = RecursiveDetector::new(cfg)?;
    let ops = probe(&det)?;
    let report = CountOpsReport {
        m,
        k,
        combining_adds: ops.combining_adds,
        final_stage_invocations: ops.final_stage_invocations,
        final_adds: ops.final_adds,
        final_muls: ops.final_muls,
        sic_adds: ops.sic_adds,
        sic_muls: ops.sic_muls,
        measured_adds: ops.measured_adds(),
        measured_muls: ops.measured_muls(),
        bound_combining_adds: ops.bounds.combining_adds,
        bound_adds: ops.bounds.bound_adds,
        bound_muls: ops.bounds.bound_muls,
        within_bounds: ops.within_bounds(),
    };
    eprintln!("{}", bounds_line(&ops.bounds, Some(ops.combining_adds)));
    if !report.within_bounds {
        return Err(anyhow!("measured counts exceed the bounds"));
    }
    write_json(args.json_out.as_deref(), &report)
}
