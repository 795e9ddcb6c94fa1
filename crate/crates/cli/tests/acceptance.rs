//! Acceptance suite. Prints one PASS/FAIL/SKIPPED line per criterion and
//! exits nonzero if any criterion fails.
//!
//! Criterion 7 needs the restricted-access trial data and runs only when
//! `SUBTRANS_PRIME_CSV` and `SUBTRANS_PRIME_SPEC` point at it (see
//! `prime_data_criterion`).

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use subtrans::estimator::EstimateWithCI;
use subtrans::membership::fit_logistic;
use subtrans::simulation::{monte_carlo_evaluate, MonteCarloSummary, ScenarioConfig};
use subtrans::survival::{PfsDifference, SortedSample};
use subtrans::{
    confidence_limit_difference, load_dataset, run_analysis_suite, AnalysisConfig, AnalysisKind,
    ColumnMap, CovariateSpec, DesignMatrix, Error,
};

// Tolerances and sizes, pinned.
const LOGISTIC_CASES: usize = 100;
const LOGISTIC_COEF_TOL: f64 = 1e-4;
const LOGISTIC_SCORE_TOL: f64 = 1e-6;
const KM_CASES: usize = 1000;
const KM_TOL: f64 = 1e-12;
const MC_REPLICATES: usize = 500;
const MC_BOOTSTRAP: usize = 500;
const BENEFICIAL_MAX_ABS_BIAS: f64 = 0.01;
const BENEFICIAL_COVERAGE: (f64, f64) = (0.92, 0.98);
const BENEFICIAL_CLD_RATIO: f64 = 0.6;
const BIAS_SE_MULTIPLE: f64 = 3.0;
const LIMITED_CLD_REL: f64 = 0.10;
/// CLDs in the table are printed to two decimals.
const CLD_PRINT_HALF_UNIT: f64 = 0.005;

struct Verdict {
    pass: Option<bool>,
    detail: String,
}

impl Verdict {
    fn check(pass: bool, detail: String) -> Self {
        Verdict { pass: Some(pass), detail }
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn scenario(name: &str) -> ScenarioConfig {
    let text = fs::read_to_string(fixtures().join("scenarios").join(format!("{name}.json"))).unwrap();
    ScenarioConfig::from_json(&text).unwrap()
}

fn monte_carlo(name: &str) -> Result<MonteCarloSummary, Error> {
    let cfg = scenario(name);
    let mut analysis = AnalysisConfig::new(cfg.seed);
    analysis.n_bootstrap = MC_BOOTSTRAP;
    monte_carlo_evaluate(&cfg, &analysis, MC_REPLICATES)
}

fn design(rows: &[Vec<f64>]) -> DesignMatrix {
    let k = rows[0].len();
    DesignMatrix {
        matrix: DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]),
        labels: (0..k).map(|j| format!("c{j}")).collect(),
    }
}

fn logistic_mle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut worst_coef: f64 = 0.0;
    let mut worst_score: f64 = 0.0;
    let mut separated = 0;
    let mut unexplained = Vec::new();
    let mut checked = 0;
    while checked < LOGISTIC_CASES {
        let (rows, y) = support::random_logistic(&mut rng);
        let negll = |b: &[f64]| support::logistic_negll(&rows, &y, b);
        let oracle = support::nelder_mead(negll, &vec![0.0; rows[0].len()], 1.0);
        match fit_logistic(&design(&rows), &y) {
            Ok(fit) => {
                let err = fit
                    .coefficients
                    .iter()
                    .zip(&oracle)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                worst_coef = worst_coef.max(err);
                worst_score = worst_score.max(support::logistic_score(&rows, &y, &fit.coefficients));
                checked += 1;
            }
            // no finite MLE: the oracle must also run off to large coefficients
            Err(Error::Separation { .. }) | Err(Error::DegenerateCohort(_)) => {
                separated += 1;
                if oracle.iter().all(|b| b.abs() < 5.0) && y.iter().any(|&v| v) && y.iter().any(|&v| !v) {
                    unexplained.push(format!("{oracle:?}"));
                }
            }
            Err(e) => unexplained.push(e.to_string()),
        }
    }
    Verdict::check(
        worst_coef < LOGISTIC_COEF_TOL && worst_score < LOGISTIC_SCORE_TOL && unexplained.is_empty(),
        format!(
            "{checked} datasets: max |coef - oracle| = {worst_coef:.2e} (tol {LOGISTIC_COEF_TOL:e}), \
             max |score| = {worst_score:.2e} (tol {LOGISTIC_SCORE_TOL:e}); \
             {separated} separated draws skipped, {} unexplained failures",
            unexplained.len()
        ),
    )
}

fn weighted_km() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_602);
    let mut worst: f64 = 0.0;
    let mut unit_mismatch = 0;
    let mut done = 0;
    while done < KM_CASES {
        let n = rng.random_range(1..=10);
        let (times, events, weights) = support::random_survival(&mut rng, n);
        if weights.iter().all(|&w| w == 0.0) {
            continue;
        }
        let sample = SortedSample::new(&times, &events);
        let curve = sample.curve(|i| weights[i], None).unwrap();
        for k in 0..=15 {
            let t = f64::from(k) * 0.5;
            let want = support::km_by_risk_sets(&times, &events, &weights, t);
            worst = worst.max((curve.survival_at(t) - want).abs());
        }
        let unit = sample.curve(|_| 1.0, None).unwrap();
        let reference = support::km_counting(&times, &events);
        let exact = unit.times.len() == reference.len()
            && unit
                .times
                .iter()
                .zip(&unit.survival)
                .zip(&reference)
                .all(|((t, s), (rt, rs))| t == rt && s.to_bits() == rs.to_bits());
        if !exact {
            unit_mismatch += 1;
        }
        done += 1;
    }
    Verdict::check(
        worst <= KM_TOL && unit_mismatch == 0,
        format!(
            "{done} instances: max |S - risk-set oracle| = {worst:.2e} (tol {KM_TOL:e}); \
             {unit_mismatch} unit-weight curves differ from the counting estimator"
        ),
    )
}

fn beneficial() -> Verdict {
    let s = match monte_carlo("beneficial") {
        Ok(s) => s,
        Err(e) => return Verdict::check(false, e.to_string()),
    };
    let e = s.kind(AnalysisKind::CombinedWeighted);
    let d = s.kind(AnalysisKind::MembersOnly);
    let ratio = e.median_cld / d.median_cld;
    let pass = e.bias.abs() < BENEFICIAL_MAX_ABS_BIAS
        && (BENEFICIAL_COVERAGE.0..=BENEFICIAL_COVERAGE.1).contains(&e.coverage)
        && ratio <= BENEFICIAL_CLD_RATIO;
    Verdict::check(
        pass,
        format!(
            "truth {:.4}; E bias {:+.4} (|bias| < {BENEFICIAL_MAX_ABS_BIAS}), coverage {:.3} in {BENEFICIAL_COVERAGE:?}, \
             median CLD E/D = {:.3}/{:.3} = {ratio:.3} (<= {BENEFICIAL_CLD_RATIO}); {} of {} replicates failed",
            s.truth, e.bias, e.coverage, e.median_cld, d.median_cld, s.n_failed_replicates, s.n_replicates
        ),
    )
}

fn biased() -> Verdict {
    let s = match monte_carlo("biased") {
        Ok(s) => s,
        Err(e) => return Verdict::check(false, e.to_string()),
    };
    let e = s.kind(AnalysisKind::CombinedWeighted);
    let d = s.kind(AnalysisKind::MembersOnly);
    let toward = s.truth_without_membership_interaction - s.truth;
    let pass = e.bias.abs() > BIAS_SE_MULTIPLE * e.bias_mc_se
        && e.bias.signum() == toward.signum()
        && d.bias.abs() < BIAS_SE_MULTIPLE * d.bias_mc_se;
    Verdict::check(
        pass,
        format!(
            "truth {:.4}, non-member analogue {:.4}; E bias {:+.4} = {:.1} MC SE (sign {}), \
             D bias {:+.4} = {:.1} MC SE (need < {BIAS_SE_MULTIPLE})",
            s.truth,
            s.truth_without_membership_interaction,
            e.bias,
            e.bias / e.bias_mc_se,
            if e.bias.signum() == toward.signum() { "toward non-members" } else { "away from non-members" },
            d.bias,
            d.bias.abs() / d.bias_mc_se,
        ),
    )
}

fn limited_benefit() -> Verdict {
    let s = match monte_carlo("limited_benefit") {
        Ok(s) => s,
        Err(e) => return Verdict::check(false, e.to_string()),
    };
    let e = s.kind(AnalysisKind::CombinedWeighted);
    let a = s.kind(AnalysisKind::CombinedCrude);
    let rel = (e.median_cld - a.median_cld).abs() / a.median_cld;
    Verdict::check(
        rel <= LIMITED_CLD_REL,
        format!(
            "median CLD E {:.4} vs A {:.4}: relative difference {rel:.3} (<= {LIMITED_CLD_REL}); means {:.4} vs {:.4}",
            e.median_cld, a.median_cld, e.mean_cld, a.mean_cld
        ),
    )
}

fn run_cli(args: &[&str], threads: usize) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_subtrans"))
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .output()
        .unwrap()
}

/// Every file under `dir`, relative path -> bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixtures();
    let data = f.join("example_trial.csv");
    let spec = f.join("example_covariates.json");
    let mut small: Value =
        serde_json::from_str(&fs::read_to_string(f.join("scenarios/beneficial.json")).unwrap()).unwrap();
    small["n_members"] = 100.into();
    small["n_nonmembers"] = 900.into();
    let scenario = tmp.path().join("scenario.json");
    fs::write(&scenario, small.to_string()).unwrap();

    let mut problems = Vec::new();
    let mut files = 0;
    for (name, args) in [
        (
            "analyze",
            vec![
                "analyze", "--input", data.to_str().unwrap(), "--spec", spec.to_str().unwrap(),
                "--target-column", "ethnicity", "--target-level", "Hispanic", "--seed", "2024",
            ],
        ),
        (
            "simulate",
            vec![
                "simulate", "--input", scenario.to_str().unwrap(), "--replicates", "8",
                "--n-bootstrap", "200", "--seed", "2024",
            ],
        ),
    ] {
        let mut runs = Vec::new();
        for (label, threads) in [("first", 1), ("second", 1), ("eight-thread", 8)] {
            let out = tmp.path().join(format!("{name}-{label}"));
            let mut full = args.clone();
            full.extend(["--out", out.to_str().unwrap()]);
            let o = run_cli(&full, threads);
            if !o.status.success() {
                problems.push(format!("{name} {label} exited {:?}", o.status.code()));
            }
            runs.push((label, snapshot(&out), o.stdout));
        }
        files += runs[0].1.len();
        for (label, snap, stdout) in &runs[1..] {
            if snap != &runs[0].1 || stdout != &runs[0].2 {
                problems.push(format!("{name}: {label} run differs from first"));
            }
        }
        if runs[0].1.is_empty() {
            problems.push(format!("{name} wrote no files"));
        }
    }
    Verdict::check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("analyze and simulate: {files} output files byte-identical across repeat runs and --threads 1 vs 8")
        } else {
            problems.join("; ")
        },
    )
}

/// Runs when `SUBTRANS_PRIME_CSV` and `SUBTRANS_PRIME_SPEC` are set. The
/// target column and level default to `ethnicity` / `Hispanic` and can be
/// overridden with `SUBTRANS_PRIME_TARGET_COLUMN` / `SUBTRANS_PRIME_TARGET_LEVEL`;
/// the KRAS covariate name with `SUBTRANS_PRIME_KRAS` (default `kras_wt`).
fn prime_data_criterion() -> Verdict {
    let (Ok(csv), Ok(spec_path)) = (std::env::var("SUBTRANS_PRIME_CSV"), std::env::var("SUBTRANS_PRIME_SPEC")) else {
        return Verdict {
            pass: None,
            detail: "conditional on access to the original trial data; set SUBTRANS_PRIME_CSV and SUBTRANS_PRIME_SPEC to run"
                .into(),
        };
    };
    let env = |k: &str, d: &str| std::env::var(k).unwrap_or_else(|_| d.to_string());
    let spec_json: Value = serde_json::from_str(&fs::read_to_string(&spec_path).unwrap()).unwrap();
    let spec: CovariateSpec = serde_json::from_value(spec_json["covariates"].clone()).unwrap();
    let mut columns: ColumnMap = match spec_json.get("columns") {
        Some(c) => serde_json::from_value(c.clone()).unwrap(),
        None => ColumnMap::default(),
    };
    columns.member = env("SUBTRANS_PRIME_TARGET_COLUMN", "ethnicity");
    columns.member_level = Some(env("SUBTRANS_PRIME_TARGET_LEVEL", "Hispanic"));
    let ds = match load_dataset(&csv, &spec, &columns) {
        Ok(ds) => ds,
        Err(e) => return Verdict::check(false, e.to_string()),
    };
    let report = match run_analysis_suite(&ds, &AnalysisConfig::new(2000)) {
        Ok(r) => r,
        Err(e) => return Verdict::check(false, e.to_string()),
    };
    let kras = env("SUBTRANS_PRIME_KRAS", "kras_wt");
    let kras_pct = report.balance.rows.iter().find(|r| r.label == kras).and_then(|r| match r.weighted_nonmembers {
        subtrans::membership::GroupSummary::Proportion { percent, .. } => Some(percent),
        _ => None,
    });
    let pseudo_n = report.balance.weighted_nonmember_n;
    let (Some(d), Some(e)) = (report.estimate(AnalysisKind::MembersOnly), report.estimate(AnalysisKind::CombinedWeighted)) else {
        return Verdict::check(false, "analysis D or E failed".into());
    };
    let near = |x: f64, target: f64, tol: f64| (x - target).abs() <= tol;
    let pass = kras_pct.is_some_and(|p| near(p, 41.0, 1.0))
        && near(pseudo_n, 49.8, 0.5)
        && near(d.point.difference, -0.17, 0.015)
        && near(e.point.difference, -0.091, 0.015)
        && near(d.ci_lower, -0.45, 0.03)
        && near(d.ci_upper, 0.091, 0.03)
        && near(e.ci_lower, -0.23, 0.03)
        && near(e.ci_upper, 0.053, 0.03);
    Verdict::check(
        pass,
        format!(
            "weighted {kras} {kras_pct:?}% (41 +/- 1), pseudo-N {pseudo_n:.1} (49.8 +/- 0.5); \
             D {:.3} ({:.3}, {:.3}); E {:.3} ({:.3}, {:.3})",
            d.point.difference, d.ci_lower, d.ci_upper, e.point.difference, e.ci_lower, e.ci_upper
        ),
    )
}

/// A printed percentage and half its last printed unit, as proportions.
fn parse_pct(s: &str) -> (f64, f64) {
    let body = s.trim().trim_end_matches('%');
    let decimals = body.split('.').nth(1).map_or(0, str::len);
    let half_unit = 0.5 * 10f64.powi(-(decimals as i32)) / 100.0;
    (body.parse::<f64>().unwrap() / 100.0, half_unit)
}

/// `"-17% (-45%, 9.1%)"` -> (point, lower, upper) with half-units.
fn parse_cell(s: &str) -> [(f64, f64); 3] {
    let (point, rest) = s.split_once('(').unwrap();
    let (lo, hi) = rest.trim_end_matches(')').split_once(',').unwrap();
    [parse_pct(point), parse_pct(lo), parse_pct(hi)]
}

fn table_cld() -> Verdict {
    // (subgroup, analysis, printed cell, printed CLD)
    let printed = [
        ("Hispanic", "A", "0.6% (-5.9%, 7.5%)", 0.13),
        ("Hispanic", "B", "1.7% (-10%, 9.4%)", 0.14),
        ("Hispanic", "C", "-0.5% (-10%, 9.4%)", 0.20),
        ("Hispanic", "D", "-17% (-45%, 9.1%)", 0.54),
        ("Hispanic", "E", "-9.1% (-23%, 5.3%)", 0.28),
        ("female", "A", "1.2% (-5.3%, 7.6%)", 0.13),
        ("female", "B", "2.8% (-5.7%, 11%)", 0.17),
        ("female", "C", "3.0% (5.9%, 11%)", 0.17),
        ("female", "D", "-1.5% (-12%, 9.0%)", 0.21),
        ("female", "E", "0.7% (-6.2%, 7.5%)", 0.14),
        ("wild-type KRAS", "A", "1.2% (-5.5%, 7.5%)", 0.13),
        ("wild-type KRAS", "B", "-6.5% (-16%, 2.8%)", 0.19),
        ("wild-type KRAS", "C", "-4.5% (-15%, 5.2%)", 0.20),
        ("wild-type KRAS", "D", "6.2% (-2.9%, 15%)", 0.18),
        ("wild-type KRAS", "E", "0.9% (-6.0%, 7.2%)", 0.13),
    ];
    // Two printed intervals are transcription errors. The Hispanic
    // non-target row repeats the weighted row's interval; the narrative
    // reports it as (-5.1%, 8.7%) with CLD 14%. The female weighted row
    // drops the minus sign on its lower limit.
    let corrections: BTreeMap<(&str, &str), &str> = [
        (("Hispanic", "B"), "1.7% (-5.1%, 8.7%)"),
        (("female", "C"), "3.0% (-5.9%, 11%)"),
    ]
    .into_iter()
    .collect();

    let cld_of = |cell: &str| {
        let [(p, _), (lo, hlo), (hi, hhi)] = parse_cell(cell);
        let e = EstimateWithCI {
            kind: AnalysisKind::MembersOnly,
            point: PfsDifference::new(365.0, 0.5 + p, 0.5),
            ci_lower: lo,
            ci_upper: hi,
            cld: f64::NAN,
            n_bootstrap: 2000,
            n_failed_bootstrap: 0,
            failure_breakdown: BTreeMap::new(),
        };
        // rounding of both printed limits plus rounding of the printed CLD
        (confidence_limit_difference(&e), hlo + hhi + CLD_PRINT_HALF_UNIT)
    };

    let mut ok = 0;
    let mut notes = Vec::new();
    for (group, analysis, cell, cld) in printed {
        let used = corrections.get(&(group, analysis)).copied().unwrap_or(cell);
        let (computed, tol) = cld_of(used);
        if (computed - cld).abs() <= tol + 1e-12 {
            ok += 1;
        } else {
            notes.push(format!("{group}/{analysis}: {used} -> {computed:.3} vs printed {cld}"));
        }
        if used != cell {
            let (as_printed, _) = cld_of(cell);
            notes.push(format!(
                "{group}/{analysis} corrected to {used} (as printed {cell} gives {as_printed:.3}, not {cld})"
            ));
        }
    }
    Verdict::check(ok == printed.len(), format!("{ok}/{} cells reproduce within rounding; {}", printed.len(), notes.join("; ")))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("1 logistic MLE vs Nelder-Mead oracle", logistic_mle),
        ("2 weighted KM vs risk-set oracle", weighted_km),
        ("3 beneficial scenario", beneficial),
        ("4 biased scenario", biased),
        ("5 limited-benefit scenario", limited_benefit),
        ("6 determinism", determinism),
        ("7 trial-data balance and estimates", prime_data_criterion),
        ("8 CLD arithmetic on the printed table", table_cld),
    ];
    let only: Option<String> = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, run) in criteria {
        if only.as_deref().is_some_and(|o| !name.starts_with(o)) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let status = match v.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIPPED",
        };
        println!("[{status}] criterion {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), v.detail);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
