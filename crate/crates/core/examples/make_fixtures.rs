//! Regenerates the files under `fixtures/`:
//!
//! - `scenarios/{beneficial,limited_benefit,biased}.json`
//! - `example_trial.csv` and `example_covariates.json`
//!
//! Run with `cargo run -p subtrans --release --example make_fixtures`.
//! The example dataset is checked before writing: the members-only
//! analysis must have the widest interval of the five.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use subtrans::dataset::TrialDataset;
use subtrans::estimator::{run_analysis_suite, AnalysisConfig, AnalysisKind};
use subtrans::simulation::{
    calibrate_membership_interaction, generate_trial, CensoringLaw, CovariateLaw, OutcomeModel,
    ScenarioConfig,
};

fn law(name: &str, member_prob: f64, nonmember_prob: f64) -> CovariateLaw {
    CovariateLaw {
        name: name.into(),
        member_prob,
        nonmember_prob,
        parents: BTreeMap::new(),
    }
}

/// log rate giving event-free probability `s` at one year
fn log_rate_for(s: f64) -> f64 {
    (-s.ln() / 365.0).ln()
}

/// Control one-year PFS 0.40; treatment adds +0.15 for wild-type and -0.05
/// otherwise at reference levels of the other covariates.
fn outcome() -> OutcomeModel {
    let base = log_rate_for(0.40);
    let mutant_treated = log_rate_for(0.35) - base;
    let wild_treated = log_rate_for(0.55) - base;
    OutcomeModel {
        baseline_log_rate: base,
        covariate_log_rate: [("age65".to_string(), 0.15), ("liver_mets".to_string(), 0.30)]
            .into_iter()
            .collect(),
        treatment_log_rate: mutant_treated,
        treatment_interactions: [("kras_wt".to_string(), wild_treated - mutant_treated)]
            .into_iter()
            .collect(),
        treatment_membership_interaction: 0.0,
    }
}

fn censoring() -> CensoringLaw {
    CensoringLaw {
        admin_days: 730.0,
        dropout_rate: 0.0003,
    }
}

fn beneficial() -> ScenarioConfig {
    ScenarioConfig {
        name: "beneficial".into(),
        n_members: 200,
        n_nonmembers: 3800,
        covariates: vec![
            law("kras_wt", 0.40, 0.60),
            law("age65", 0.29, 0.39),
            law("female", 0.52, 0.37),
            law("liver_mets", 0.93, 0.89),
        ],
        treatment_probability: 0.5,
        outcome: outcome(),
        censoring: censoring(),
        seed: 20_240_101,
    }
}

fn limited_benefit() -> ScenarioConfig {
    ScenarioConfig {
        name: "limited_benefit".into(),
        n_members: 1600,
        n_nonmembers: 2400,
        covariates: vec![
            law("kras_wt", 0.59, 0.59),
            law("age65", 0.38, 0.38),
            law("liver_mets", 0.89, 0.89),
        ],
        treatment_probability: 0.5,
        outcome: outcome(),
        censoring: censoring(),
        seed: 20_240_102,
    }
}

fn biased() -> ScenarioConfig {
    // members are the wild-type analogue: their benefit comes from a direct
    // treatment x membership term that no covariate can explain
    let mut outcome = outcome();
    outcome.treatment_interactions.clear();
    let mut cfg = ScenarioConfig {
        name: "biased".into(),
        n_members: 2400,
        n_nonmembers: 1600,
        covariates: vec![
            law("age65", 0.38, 0.38),
            law("female", 0.36, 0.41),
            law("liver_mets", 0.88, 0.90),
        ],
        treatment_probability: 0.5,
        outcome,
        censoring: censoring(),
        seed: 20_240_103,
    };
    cfg.outcome.treatment_membership_interaction =
        calibrate_membership_interaction(&cfg, 0.10, 365.0).expect("attainable shift");
    cfg
}

/// Small covariate-shifted trial for the CLI walkthrough.
fn example_trial() -> ScenarioConfig {
    let mut cfg = beneficial();
    cfg.name = "example".into();
    cfg.n_members = 60;
    cfg.n_nonmembers = 800;
    cfg.seed = 11;
    cfg
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    fs::create_dir_all(root.join("scenarios"))?;
    for cfg in [beneficial(), limited_benefit(), biased()] {
        cfg.validate()?;
        let path = root.join("scenarios").join(format!("{}.json", cfg.name));
        fs::write(&path, serde_json::to_string_pretty(&cfg)? + "\n")?;
        println!("wrote {}", path.display());
    }

    let cfg = example_trial();
    let trial = generate_trial(&cfg, 0)?;
    // whole days, as trial data would record them
    let records = trial
        .dataset
        .records()
        .iter()
        .cloned()
        .map(|mut r| {
            r.time = r.time.ceil();
            r
        })
        .collect();
    let ds = &TrialDataset::new(trial.dataset.spec().clone(), records, 0)?;
    let report = run_analysis_suite(ds, &AnalysisConfig::new(1))?;
    let d = report
        .estimate(AnalysisKind::MembersOnly)
        .expect("members-only estimate")
        .cld;
    for k in AnalysisKind::ALL {
        if k != AnalysisKind::MembersOnly {
            let other = report.estimate(k).expect("estimate").cld;
            assert!(other < d, "{k:?} CLD {other} is not below members-only CLD {d}");
        }
    }
    print!("{}", report.to_text());

    let mut w = csv::Writer::from_path(root.join("example_trial.csv"))?;
    w.write_record(["patient", "panitumumab", "pfs_days", "progressed", "ethnicity", "kras_wt", "age65", "female", "liver_mets"])?;
    for r in ds.records() {
        let mut row = vec![
            r.id.clone(),
            r.arm.indicator().to_string(),
            r.time.to_string(),
            u8::from(r.event).to_string(),
            if r.member { "Hispanic" } else { "White" }.to_string(),
        ];
        row.extend(r.covariates.iter().map(|v| (*v as u8).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let spec = serde_json::json!({
        "covariates": ds.spec(),
        "columns": {
            "id": "patient",
            "arm": "panitumumab",
            "time": "pfs_days",
            "event": "progressed"
        }
    });
    fs::write(
        root.join("example_covariates.json"),
        serde_json::to_string_pretty(&spec)? + "\n",
    )?;
    println!("wrote example_trial.csv and example_covariates.json");
    Ok(())
}
