//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use kronnoma::combiner::Gain;
use kronnoma::detector::{combining_matrix, recursive_detect, DetectionConfig};
use kronnoma::pattern::{coupled_groups, factorized_search_space, FactorChain, PatternMatrix};
use kronnoma::rate::{multinomial_weight_check, sum_rate_example4, sum_rate_recursive};
use kronnoma::simkit::{estimate_gain, run_monte_carlo, MonteCarloOptions};
use kronnoma::{
    find_combiners, run_algorithm1, search_space_size, CombinerDesign, SearchOptions, SumRateScorer,
};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_kronnoma");

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ring3() -> PatternMatrix {
    PatternMatrix::from_rows(&[[1, 1, 0], [1, 0, 1], [0, 1, 1]]).unwrap()
}

fn square4() -> PatternMatrix {
    PatternMatrix::from_rows(&[[0, 0, 0, 1], [0, 1, 1, 0], [1, 0, 1, 0], [1, 1, 0, 0]]).unwrap()
}

fn ones_1x2() -> PatternMatrix {
    PatternMatrix::from_rows(&[[1, 1]]).unwrap()
}

fn example_chain(r: u32) -> FactorChain {
    FactorChain::new(ones_1x2(), ring3(), r).unwrap()
}

fn sorted_codes(p: &PatternMatrix) -> Vec<u64> {
    let mut c = p.column_codes();
    c.sort();
    c
}

fn sorted_gains(d: &CombinerDesign) -> Vec<Gain> {
    let mut g = d.gains().to_vec();
    g.sort();
    g
}

fn run_cli(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn kronnoma")
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn write_chain(dir: &Path, chain: &FactorChain) -> String {
    let path = dir.join(format!("chain_r{}.json", chain.r()));
    fs::write(&path, serde_json::to_string(chain).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn timed_search(dir: &Path, mp: &str) -> Result<(Vec<CombinerDesign>, Duration), String> {
    let out = dir.join(format!("search{mp}.json"));
    let start = Instant::now();
    let o = run_cli(&["search", "--mp", mp, "--json-out", out.to_str().unwrap()], &[]);
    let elapsed = start.elapsed();
    check(o.status.success(), format!("search exited with {}", o.status))?;
    let text = fs::read_to_string(&out).map_err(|e| e.to_string())?;
    let designs = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok((designs, elapsed))
}

fn c1_golden_mp3(dir: &Path) -> Outcome {
    let (designs, elapsed) = timed_search(dir, "3")?;
    let best = designs.first().ok_or("no design emitted")?;
    check(
        sorted_codes(best.p()) == sorted_codes(&ring3()),
        format!("top P {:?} differs from the 3x3 reference", best.p()),
    )?;
    let four_thirds = Gain::new(4, 3);
    check(
        best.gains() == [four_thirds; 3],
        format!("gains {:?}", best.gains()),
    )?;
    check(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("gains (4/3, 4/3, 4/3) exact, {elapsed:.2?}"))
}

fn c2_mp4_top_four(dir: &Path) -> Outcome {
    let (designs, elapsed) = timed_search(dir, "4")?;
    let profile = vec![Gain::from_integer(1), Gain::new(4, 3), Gain::new(4, 3), Gain::new(4, 3)];
    check(designs.len() == 4, format!("{} top-ranked designs", designs.len()))?;
    check(
        designs.iter().all(|d| sorted_gains(d) == profile),
        "a top design has a different gain profile",
    )?;
    check(
        designs.iter().any(|d| sorted_codes(d.p()) == sorted_codes(&square4())),
        "reference 4x4 factor not among the top designs",
    )?;
    // no other feasible factor reaches the same profile
    let outcome =
        run_algorithm1(4, &SumRateScorer::default(), SearchOptions::default()).map_err(|e| e.to_string())?;
    let with_profile = outcome.ranked.iter().filter(|s| sorted_gains(&s.design) == profile).count();
    check(with_profile == 4, format!("{with_profile} designs share the profile"))?;
    check(outcome.enumerated == 1365, format!("enumerated {}", outcome.enumerated))?;
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("4 designs with (1, 4/3, 4/3, 4/3) over 1365 candidates, {elapsed:.2?}"))
}

fn binomial_u128(n: u128, k: u128) -> u128 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn c3_search_space() -> Outcome {
    let size = search_space_size(6, 9);
    check(
        size.to_string() == binomial_u128(63, 9).to_string(),
        format!("search_space_size(6, 9) = {size}"),
    )?;
    // the quoted 2.366e10 is truncated; the value is 2.36677e10
    let value: f64 = size.to_string().parse().unwrap();
    let approx = format!("{value:.4e}");
    check((value / 2.366e10 - 1.0).abs() < 1e-3, format!("printed as {approx}"))?;
    let factored = factorized_search_space(&[(2, 3), (3, 3)]);
    check(factored == 35u32.into(), format!("factorized count {factored}"))?;
    Ok(format!("{size} ≈ {approx}; factorized 35"))
}

fn c4_detection_algebra() -> Outcome {
    let chain = example_chain(2);
    let design = find_combiners(&ring3()).map_err(|e| e.to_string())?;
    let cfg = DetectionConfig::new(chain.clone(), design.clone()).map_err(|e| e.to_string())?;
    let g = chain.build().unwrap();
    let groups = coupled_groups(&g);
    let x: Vec<f64> = (0..18).map(|i| if (0x2D6B5 >> i) & 1 == 1 { 1.0 } else { -1.0 }).collect();
    let det = recursive_detect(&g.mul_vec(&x), &cfg, 0.0).map_err(|e| e.to_string())?;

    let level_noise: Vec<Vec<i64>> = det
        .trace
        .recursions
        .iter()
        .map(|r| r.outputs.iter().map(|s| s.noise_factor).collect())
        .collect();
    check(
        level_noise == vec![vec![3; 3], vec![9; 9]],
        format!("noise factors {level_noise:?}"),
    )?;
    for leaf in &det.trace.leaves {
        check(leaf.weight == 4, format!("leaf {} weight {}", leaf.index, leaf.weight))?;
        check(leaf.gain == Gain::new(16, 9), format!("leaf {} gain {}", leaf.index, leaf.gain))?;
        let t: f64 = leaf.users.iter().map(|&u| x[u]).sum();
        check(
            leaf.values == vec![4.0 * t],
            format!("leaf {} equation {:?}, coupled sum {t}", leaf.index, leaf.values),
        )?;
        check(groups.contains(&leaf.users), format!("leaf {} users not a coupled group", leaf.index))?;
    }
    // the same law from the explicit combining matrix: Σ c² per final row
    let cm = combining_matrix(&chain, &design).map_err(|e| e.to_string())?;
    let sq: Vec<i64> = cm.iter().map(|row| row.iter().map(|c| c * c).sum()).collect();
    check(sq == vec![9; 9], format!("row energies {sq:?}"))?;
    Ok("weight 4 on every coupled sum; noise 3σ² then 9σ²".into())
}

fn c5_operation_counts(dir: &Path) -> Outcome {
    let chain = write_chain(dir, &example_chain(2));
    let o = run_cli(&["count-ops", "--chain", &chain], &[]);
    check(o.status.success(), format!("count-ops exited with {}", o.status))?;
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).map_err(|e| e.to_string())?;
    let adds = report["combining_adds"].as_u64().ok_or("missing combining_adds")?;
    let calls = report["final_stage_invocations"].as_u64().ok_or("missing invocations")?;
    check(adds <= 36, format!("combining adds {adds}"))?;
    check(report["bound_combining_adds"] == 36, "bound is not 36")?;
    check(calls == 9, format!("final-stage invocations {calls}"))?;
    Ok(format!("combining adds {adds} <= 36, {calls} final-stage invocations"))
}

fn c6_general_rate() -> Outcome {
    let chain = example_chain(2);
    let gains = [4.0 / 3.0; 3];
    let mut worst = 0.0f64;
    for e in -3..=3 {
        let snr = 10f64.powi(e);
        let closed = 0.5 * (1.0 + 32.0 / 9.0 * snr).log2();
        let general = sum_rate_recursive(&chain, &gains, snr);
        worst = worst.max(((general - closed) / closed).abs());
    }
    check(worst <= 1e-12, format!("max relative error {worst:e}"))?;
    for m_p in 1..=6usize {
        for r in 0..=8u32 {
            let expected = power_u128(m_p as u64, r);
            check(
                multinomial_weight_check(m_p, r).to_string() == expected.to_string(),
                format!("multinomial check fails at m_p={m_p} r={r}"),
            )?;
        }
    }
    Ok(format!("max relative error {worst:.1e}; multinomial weights m_p ≤ 6, r ≤ 8"))
}

fn power_u128(base: u64, exp: u32) -> u128 {
    (base as u128).pow(exp)
}

fn c7_cancellation_dominance() -> Outcome {
    let chain = example_chain(2);
    let gains = [4.0 / 3.0; 3];
    let grid: Vec<f64> = (0..=30)
        .map(|db| 10f64.powf(db as f64 / 10.0))
        .chain((-3..=3).map(|e| 10f64.powi(e)))
        .collect();
    for &snr in &grid {
        let (a, b) = (sum_rate_example4(snr), sum_rate_recursive(&chain, &gains, snr));
        check(a > b, format!("snr {snr}: {a} <= {b}"))?;
    }
    let tiny = 1e-15;
    let (a, b) = (sum_rate_example4(tiny), sum_rate_recursive(&chain, &gains, tiny));
    check(a <= 1e-12 && b <= 1e-12, format!("at 1e-15: {a:e}, {b:e}"))?;
    Ok(format!("dominates at {} grid points; {a:.1e}, {b:.1e} at snr 1e-15", grid.len()))
}

fn c8_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let chain = example_chain(1);
    let design = find_combiners(&ring3()).map_err(|e| e.to_string())?;
    let cfg = DetectionConfig::new(chain, design).map_err(|e| e.to_string())?;
    let opts = MonteCarloOptions {
        trials: 10_000,
        seed: 20_240_601,
        compare_oracle: true,
        ..Default::default()
    };
    let rows = run_monte_carlo(&cfg, &[100.0, 1e6], &opts).map_err(|e| e.to_string())?;
    let agreement = rows[0].oracle_agreement.ok_or("oracle not run")?;
    check(agreement >= 0.99, format!("agreement {agreement} at 20 dB"))?;
    check(
        rows[1].coupled_errors == 0,
        format!("{} coupled-sum errors at 60 dB", rows[1].coupled_errors),
    )?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!(
        "agreement {agreement} at 20 dB, coupled SER {} at 60 dB, {elapsed:.2?}",
        rows[1].coupled_ser
    ))
}

fn c9_gain_calibration() -> Outcome {
    let mut worst = 0.0f64;
    let mut paths = 0;
    for (p, seed) in [(ring3(), 9_001u64), (square4(), 9_002)] {
        let design = find_combiners(&p).map_err(|e| e.to_string())?;
        let chain = FactorChain::new(ones_1x2(), p, 2).unwrap();
        for pg in estimate_gain(&design, &chain, 1.0, 100_000, seed).map_err(|e| e.to_string())? {
            let expected: Gain = pg.path.iter().map(|&j| design.gains()[j]).product();
            check(pg.exact == expected, format!("path {:?} exact {}", pg.path, pg.exact))?;
            let z = pg.z_score();
            worst = worst.max(z);
            paths += 1;
            check(
                z < 3.0,
                format!("path {:?}: measured {} vs {} ({z:.2} SE)", pg.path, pg.measured, pg.exact),
            )?;
        }
    }
    Ok(format!("{paths} paths within 3 SE (worst {worst:.2} SE)"))
}

fn c10_rate_band(dir: &Path) -> Outcome {
    let chain = write_chain(dir, &example_chain(2));
    let o = run_cli(
        &["rate", "--chain", &chain, "--snr-db-min", "0", "--snr-db-max", "30", "--snr-db-step", "1"],
        &[],
    );
    check(o.status.success(), format!("rate exited with {}", o.status))?;
    let mut reader = csv::Reader::from_reader(o.stdout.as_slice());
    let (mut lo, mut hi, mut n) = (f64::INFINITY, 0.0f64, 0);
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let v: Vec<f64> = (0..4).map(|i| rec[i].parse().unwrap()).collect();
        let (db, rec_, pdma, oma) = (v[0], v[1], v[2], v[3]);
        check(rec_ >= oma, format!("{db} dB: recursive {rec_} < OMA {oma}"))?;
        let ratio = rec_ / pdma;
        lo = lo.min(ratio);
        hi = hi.max(ratio);
        n += 1;
    }
    check(n == 31, format!("{n} grid points"))?;
    check((0.8..=1.05).contains(&lo) && (0.8..=1.05).contains(&hi), format!("ratio range [{lo}, {hi}]"))?;
    Ok(format!("recursive/PDMA in [{lo:.3}, {hi:.3}], above OMA at all 31 points"))
}

fn c11_determinism(dir: &Path) -> Outcome {
    let chain = write_chain(dir, &example_chain(2));
    let design = dir.join("design.json");
    let o = run_cli(&["design", "--chain", &chain, "--json-out", design.to_str().unwrap()], &[]);
    check(o.status.success(), "design failed")?;
    let design = design.to_string_lossy().into_owned();
    let runs: Vec<Vec<&str>> = vec![
        vec!["search", "--mp", "4"],
        vec!["design", "--chain", &chain],
        vec!["rate", "--chain", &chain, "--gains", &design],
        vec!["simulate", "--chain", &chain, "--design", &design, "--snr-db", "0,6,12", "--trials", "3000", "--seed", "42"],
        vec!["simulate", "--chain", &chain, "--snr-db", "8", "--trials", "500", "--seed", "7", "--detector", "sic", "--sic", "2"],
        vec!["count-ops", "--chain", &chain],
    ];
    for args in &runs {
        let a = run_cli(args, &[]);
        let b = run_cli(args, &[("KRONNOMA_THREADS", "1")]);
        let c = run_cli(args, &[("KRONNOMA_THREADS", "3")]);
        check(a.status.success(), format!("{} failed: {}", args[0], String::from_utf8_lossy(&a.stderr)))?;
        check(
            a.stdout == b.stdout && b.stdout == c.stdout && !a.stdout.is_empty(),
            format!("{} output differs between runs", args.join(" ")),
        )?;
    }
    Ok(format!("{} invocations byte-identical across runs and thread counts", runs.len()))
}

fn main() {
    let dir = TempDir::new().expect("temp dir");
    let p = dir.path();
    let criteria: Vec<Criterion> = vec![
        ("combiner search golden run, m_p = 3", Box::new(|| c1_golden_mp3(p))),
        ("combiner search, m_p = 4 top designs", Box::new(|| c2_mp4_top_four(p))),
        ("search-space accounting", Box::new(c3_search_space)),
        ("recursive detection algebra", Box::new(c4_detection_algebra)),
        ("operation-count bound", Box::new(|| c5_operation_counts(p))),
        ("general rate vs closed form", Box::new(c6_general_rate)),
        ("cancellation rate dominance", Box::new(c7_cancellation_dominance)),
        ("oracle equivalence", Box::new(c8_oracle_equivalence)),
        ("gain calibration", Box::new(c9_gain_calibration)),
        ("rate band vs PDMA and OMA", Box::new(|| c10_rate_band(p))),
        ("determinism", Box::new(|| c11_determinism(p))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
