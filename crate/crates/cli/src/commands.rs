use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subtrans::estimator::{analysis_curves, fit_point_weights, AnalysisCurve};
use subtrans::simulation::{monte_carlo_evaluate, MonteCarloSummary, ScenarioConfig};
use subtrans::{
    balance_table, load_dataset, run_analysis_suite, AnalysisConfig, ColumnMap,
    CovariateSpec, Error, ErrorCategory, TrialDataset,
};

use crate::{AnalyzeArgs, DataArgs, SimulateArgs};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Lib {
        module: &'static str,
        error: Error,
        hint: &'static str,
    },
    /// Outputs were written but at least one analysis failed.
    PartialEstimation(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Lib { error, .. } => match error {
                Error::Config(_) => 2,
                e => match e.category() {
                    ErrorCategory::Config | ErrorCategory::Data => 3,
                    ErrorCategory::Model => 4,
                    ErrorCategory::Estimation => 5,
                },
            },
            Failure::PartialEstimation(_) => 5,
        }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let (module, hint) = match &error {
            Error::Io { .. } => ("io", "check the path and permissions"),
            Error::Csv(_) | Error::Parse { .. } | Error::UnknownLevel { .. } => {
                ("dataset", "fix the offending cell or declare the level in the spec file")
            }
            Error::MissingColumn { .. } => {
                ("dataset", "map the column under `columns` in the spec file or rename it in the CSV")
            }
            Error::Json(_) | Error::InvalidSpec(_) => ("config", "check the JSON file against the README"),
            Error::EmptyDataset | Error::InvalidDataset(_) => {
                ("dataset", "both subgroup members and non-members are needed in both arms")
            }
            Error::Config(_) => ("config", "check the command-line flags"),
            Error::Collinearity { .. } => {
                ("membership_model", "drop one of the named covariates from the model")
            }
            Error::Separation { .. } | Error::WeightOverflow { .. } => (
                "membership_model",
                "a covariate pattern determines membership; merge sparse levels or drop the covariate",
            ),
            Error::NonConvergence { .. } => ("membership_model", "simplify the membership model"),
            Error::DegenerateCohort(_) | Error::UndefinedTail { .. } => (
                "survival",
                "shorten --horizon-days or check follow-up in the affected group",
            ),
            Error::UnstableBootstrap { .. } | Error::EmptyInput(_) | Error::InvalidVariance(_) => {
                ("estimator", "the membership model is fragile under resampling; simplify it")
            }
            Error::UnstableMonteCarlo { .. } => {
                ("simulation", "increase group sizes or soften extreme covariate laws")
            }
        };
        Failure::Lib { module, error, hint }
    }
}

type Outcome = Result<(), Failure>;

/// Contents of the `--spec` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpecFile {
    covariates: CovariateSpec,
    #[serde(default)]
    columns: ColumnMap,
    /// Covariates entering the membership model; default all.
    #[serde(default)]
    model_covariates: Option<Vec<String>>,
}

/// Everything that determines the outputs, embedded in each of them.
#[derive(Debug, Clone, Serialize)]
struct ResolvedConfig {
    command: &'static str,
    input: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariates: Option<CovariateSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    columns: Option<ColumnMap>,
    #[serde(skip_serializing_if = "Option::is_none")]
    analysis: Option<AnalysisConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    replicates: Option<usize>,
}

impl ResolvedConfig {
    fn header_line(&self) -> String {
        format!("# configuration: {}\n", serde_json::to_string(self).expect("serializable"))
    }
}

fn read_spec(path: &Path) -> Result<SpecFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn load(args: &DataArgs) -> Result<(TrialDataset, SpecFile), Failure> {
    if let Some(c) = args.weight_cap {
        if !(c.is_finite() && c > 0.0) {
            return Err(Failure::Usage(format!("--weight-cap must be positive, got {c}")));
        }
    }
    let mut spec = read_spec(&args.spec)?;
    if let Some(col) = &args.target_column {
        spec.columns.member = col.clone();
    }
    if let Some(level) = &args.target_level {
        spec.columns.member_level = Some(level.clone());
    }
    let ds = load_dataset(&args.input, &spec.covariates, &spec.columns)?;
    Ok((ds, spec))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

/// Header line followed by whatever `body` writes.
fn with_header(
    config: &ResolvedConfig,
    body: impl FnOnce(&mut Vec<u8>) -> subtrans::Result<()>,
) -> Result<Vec<u8>, Failure> {
    let mut buf = config.header_line().into_bytes();
    body(&mut buf)?;
    Ok(buf)
}

fn json_with_config<T: Serialize>(config: &ResolvedConfig, key: &str, value: &T) -> Result<Vec<u8>, Failure> {
    let doc = serde_json::json!({ "configuration": config, key: value });
    let mut text = serde_json::to_string_pretty(&doc).map_err(Error::from)?;
    text.push('\n');
    Ok(text.into_bytes())
}

fn write_curves(out: &mut Vec<u8>, curves: &[AnalysisCurve]) -> subtrans::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["analysis", "arm", "time", "survival", "weighted_at_risk", "weighted_events"])?;
    for c in curves {
        for i in 0..c.curve.times.len() {
            w.write_record([
                c.kind.letter().to_string(),
                c.arm.indicator().to_string(),
                c.curve.times[i].to_string(),
                c.curve.survival[i].to_string(),
                c.curve.weighted_at_risk[i].to_string(),
                c.curve.weighted_events[i].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: "curves.csv".into(),
        source: e,
    })
}

pub fn analyze(args: &AnalyzeArgs) -> Outcome {
    let seed = args.seed.ok_or_else(|| Failure::Usage("--seed is required".into()))?;
    if !(args.horizon_days.is_finite() && args.horizon_days >= 0.0) {
        return Err(Failure::Usage(format!("--horizon-days must be >= 0, got {}", args.horizon_days)));
    }
    if args.n_bootstrap == 0 {
        return Err(Failure::Usage("--n-bootstrap must be at least 1".into()));
    }
    let (ds, spec) = load(&args.data)?;
    let mut analysis = AnalysisConfig::new(seed);
    analysis.horizon_days = args.horizon_days;
    analysis.n_bootstrap = args.n_bootstrap;
    analysis.weight_cap = args.data.weight_cap;
    analysis.model_covariates = spec.model_covariates.clone();

    let report = run_analysis_suite(&ds, &analysis)?;
    let curves = analysis_curves(&ds, &analysis)?;
    let config = ResolvedConfig {
        command: "analyze",
        input: vec![args.data.input.clone()],
        spec: Some(args.data.spec.clone()),
        covariates: Some(spec.covariates.clone()),
        columns: Some(spec.columns.clone()),
        analysis: Some(analysis),
        replicates: None,
    };

    let out = &args.data.out;
    create_dir(out)?;
    write_file(&out.join("report.json"), &json_with_config(&config, "report", &report)?)?;
    let text = format!(
        "{}{}\nMembership model balance\n{}",
        config.header_line(),
        report.to_text(),
        report.balance.to_text()
    );
    write_file(&out.join("report.txt"), text.as_bytes())?;
    write_file(&out.join("balance.csv"), &with_header(&config, |b| report.balance.write_csv(b))?)?;
    write_file(&out.join("curves.csv"), &with_header(&config, |b| write_curves(b, &curves))?)?;

    print!("{}", report.to_text());
    if report.has_failures() {
        let failed: Vec<String> = report
            .estimates
            .iter()
            .filter(|o| o.error.is_some())
            .map(|o| o.kind.letter().to_string())
            .collect();
        return Err(Failure::PartialEstimation(format!(
            "analyses {} failed; see report.json for details",
            failed.join(", ")
        )));
    }
    Ok(())
}

pub fn balance(args: &DataArgs) -> Outcome {
    let (ds, spec) = load(args)?;
    // the balance table needs neither a horizon nor a seed
    let mut analysis = AnalysisConfig::new(0);
    analysis.weight_cap = args.weight_cap;
    analysis.model_covariates = spec.model_covariates.clone();
    let (_, _, cohort) = fit_point_weights(&ds, &analysis)?;
    let table = balance_table(&cohort);
    let config = ResolvedConfig {
        command: "balance",
        input: vec![args.input.clone()],
        spec: Some(args.spec.clone()),
        covariates: Some(spec.covariates.clone()),
        columns: Some(spec.columns.clone()),
        analysis: None,
        replicates: None,
    };
    create_dir(&args.out)?;
    write_file(&args.out.join("balance.csv"), &with_header(&config, |b| table.write_csv(b))?)?;
    write_file(
        &args.out.join("balance.txt"),
        format!("{}{}", config.header_line(), table.to_text()).as_bytes(),
    )?;
    print!("{}", table.to_text());
    Ok(())
}

fn simulation_table(s: &MonteCarloSummary) -> String {
    let mut out = format!(
        "scenario {}: truth {:.4}, {} replicates ({} failed)\n",
        s.scenario.name, s.truth, s.n_replicates, s.n_failed_replicates
    );
    out.push_str("analysis  mean      bias      emp_se   coverage  median_cld\n");
    for k in &s.kinds {
        out.push_str(&format!(
            "{:<8}  {:>8.4}  {:>8.4}  {:>7.4}  {:>8.3}  {:>10.3}\n",
            k.kind.letter(),
            k.mean_estimate,
            k.bias,
            k.empirical_se,
            k.coverage,
            k.median_cld
        ));
    }
    out
}

pub fn simulate(args: &SimulateArgs) -> Outcome {
    let seed = args.seed.ok_or_else(|| Failure::Usage("--seed is required".into()))?;
    if args.replicates == 0 {
        return Err(Failure::Usage("--replicates must be at least 1".into()));
    }
    if args.n_bootstrap == 0 {
        return Err(Failure::Usage("--n-bootstrap must be at least 1".into()));
    }
    if !(args.horizon_days.is_finite() && args.horizon_days >= 0.0) {
        return Err(Failure::Usage(format!("--horizon-days must be >= 0, got {}", args.horizon_days)));
    }
    let mut analysis = AnalysisConfig::new(seed);
    analysis.horizon_days = args.horizon_days;
    analysis.n_bootstrap = args.n_bootstrap;

    let mut scenarios = Vec::new();
    for path in &args.input {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let mut cfg = ScenarioConfig::from_json(&text)?;
        cfg.seed = seed;
        if cfg.name.is_empty() {
            cfg.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "scenario".into());
        }
        if scenarios.iter().any(|(c, _): &(ScenarioConfig, PathBuf)| c.name == cfg.name) {
            return Err(Failure::Usage(format!("two scenarios are named `{}`", cfg.name)));
        }
        scenarios.push((cfg, path.clone()));
    }

    for (cfg, path) in &scenarios {
        let summary = monte_carlo_evaluate(cfg, &analysis, args.replicates)?;
        let config = ResolvedConfig {
            command: "simulate",
            input: vec![path.clone()],
            spec: None,
            covariates: None,
            columns: None,
            analysis: Some(analysis.clone()),
            replicates: Some(args.replicates),
        };
        let dir = args.out.join(&cfg.name);
        create_dir(&dir)?;
        write_file(&dir.join("summary.json"), &json_with_config(&config, "summary", &summary)?)?;
        write_file(&dir.join("summary.csv"), &with_header(&config, |b| summary.write_csv(b))?)?;
        write_file(
            &dir.join("replicates.csv"),
            &with_header(&config, |b| summary.write_replicates_csv(b))?,
        )?;
        let table = simulation_table(&summary);
        print!("{table}");
        std::io::stdout().flush().ok();
    }
    Ok(())
}
