//! Synthetic trials with known effect modification and Monte Carlo
//! evaluation of the analysis suite against exact truths.
//!
//! Covariates are binary. Each has a Bernoulli law per membership group,
//! optionally shifted on the log-odds scale by earlier covariates, so the
//! joint law of a few covariates can be enumerated exactly. Event times are
//! exponential with a log-linear rate:
//!
//! ```text
//! log rate = baseline + sum_j covariate_log_rate[j] * c_j
//!          + x * (treatment_log_rate + sum_j treatment_interactions[j] * c_j
//!                 + treatment_membership_interaction * m)
//! ```
//!
//! Membership never enters the rate except through the treatment
//! interaction, so setting that coefficient to zero makes membership
//! ignorable for the risk difference once the covariates are standardized.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, Covariate, CovariateSpec, SubjectRecord, TrialDataset};
use crate::error::{Error, Result};
use crate::estimator::{percentile, run_analysis_suite, AnalysisConfig, AnalysisKind};
use crate::rng::{self, purpose};

/// Name accepted wherever a modifier can also be the membership indicator.
pub const MEMBER: &str = "member";

const MAX_COVARIATES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateLaw {
    pub name: String,
    /// P(c = 1 | member, all parents 0).
    pub member_prob: f64,
    /// P(c = 1 | non-member, all parents 0).
    pub nonmember_prob: f64,
    /// Log-odds shift per earlier covariate equal to 1.
    #[serde(default)]
    pub parents: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    /// Log event rate per day with every term at zero.
    pub baseline_log_rate: f64,
    #[serde(default)]
    pub covariate_log_rate: BTreeMap<String, f64>,
    #[serde(default)]
    pub treatment_log_rate: f64,
    #[serde(default)]
    pub treatment_interactions: BTreeMap<String, f64>,
    /// The knob that makes membership itself a conditional modifier.
    #[serde(default)]
    pub treatment_membership_interaction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoringLaw {
    /// Administrative end of follow-up, days.
    pub admin_days: f64,
    /// Independent exponential dropout rate per day; 0 disables dropout.
    #[serde(default)]
    pub dropout_rate: f64,
}

fn default_treatment_probability() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub covariates: Vec<CovariateLaw>,
    #[serde(default = "default_treatment_probability")]
    pub treatment_probability: f64,
    pub outcome: OutcomeModel,
    pub censoring: CensoringLaw,
    #[serde(default)]
    pub seed: u64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_members == 0 || self.n_nonmembers == 0 {
            return bad("need at least one member and one non-member".into());
        }
        if self.covariates.len() > MAX_COVARIATES {
            return bad(format!("at most {MAX_COVARIATES} covariates supported"));
        }
        if !(self.treatment_probability > 0.0 && self.treatment_probability < 1.0) {
            return bad(format!("treatment probability {}", self.treatment_probability));
        }
        let mut seen: Vec<&str> = Vec::new();
        for law in &self.covariates {
            if law.name == MEMBER || seen.contains(&law.name.as_str()) {
                return bad(format!("invalid or duplicate covariate name `{}`", law.name));
            }
            for p in [law.member_prob, law.nonmember_prob] {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("`{}` has probability {p}", law.name));
                }
            }
            for (parent, shift) in &law.parents {
                if !seen.contains(&parent.as_str()) {
                    return bad(format!(
                        "`{}` depends on `{parent}`, which must be declared earlier",
                        law.name
                    ));
                }
                if !shift.is_finite() {
                    return bad(format!("`{}` has non-finite shift", law.name));
                }
            }
            seen.push(&law.name);
        }
        let o = &self.outcome;
        for name in o.covariate_log_rate.keys().chain(o.treatment_interactions.keys()) {
            if !seen.contains(&name.as_str()) {
                return bad(format!("outcome model references unknown covariate `{name}`"));
            }
        }
        let coefs = [o.baseline_log_rate, o.treatment_log_rate, o.treatment_membership_interaction];
        if coefs
            .iter()
            .chain(o.covariate_log_rate.values())
            .chain(o.treatment_interactions.values())
            .any(|c| !c.is_finite())
        {
            return bad("outcome coefficients must be finite".into());
        }
        let c = &self.censoring;
        if !(c.admin_days > 0.0 && c.admin_days.is_finite()) {
            return bad(format!("administrative horizon {}", c.admin_days));
        }
        if !(c.dropout_rate >= 0.0 && c.dropout_rate.is_finite()) {
            return bad(format!("dropout rate {}", c.dropout_rate));
        }
        Ok(())
    }

    pub fn covariate_spec(&self) -> CovariateSpec {
        CovariateSpec::new(self.covariates.iter().map(|l| Covariate::binary(&l.name)).collect())
            .expect("validated names")
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|l| l.name == name)
    }

    /// P(c_j = 1 | membership, earlier covariates).
    fn covariate_prob(&self, j: usize, member: bool, earlier: &[f64]) -> f64 {
        let law = &self.covariates[j];
        let base = if member { law.member_prob } else { law.nonmember_prob };
        if law.parents.is_empty() || base == 0.0 || base == 1.0 {
            return base;
        }
        let shift: f64 = law
            .parents
            .iter()
            .map(|(p, s)| s * earlier[self.index_of(p).expect("validated")])
            .sum();
        expit(logit(base) + shift)
    }

    /// Every covariate pattern with its probability given membership.
    pub fn pattern_law(&self, member: bool) -> Vec<(Vec<f64>, f64)> {
        let k = self.covariates.len();
        (0..1usize << k)
            .map(|bits| {
                let c: Vec<f64> = (0..k).map(|j| ((bits >> j) & 1) as f64).collect();
                let prob = (0..k)
                    .map(|j| {
                        let p = self.covariate_prob(j, member, &c[..j]);
                        if c[j] == 1.0 {
                            p
                        } else {
                            1.0 - p
                        }
                    })
                    .product();
                (c, prob)
            })
            .filter(|(_, p)| *p > 0.0)
            .collect()
    }

    pub fn log_rate(&self, c: &[f64], member: bool, treated: bool) -> f64 {
        let o = &self.outcome;
        let term = |m: &BTreeMap<String, f64>| -> f64 {
            m.iter()
                .map(|(n, b)| b * c[self.index_of(n).expect("validated")])
                .sum()
        };
        let mut eta = o.baseline_log_rate + term(&o.covariate_log_rate);
        if treated {
            eta += o.treatment_log_rate
                + term(&o.treatment_interactions)
                + o.treatment_membership_interaction * f64::from(u8::from(member));
        }
        eta
    }

    /// Event-free probability at `horizon` for one covariate pattern.
    pub fn event_free(&self, c: &[f64], member: bool, treated: bool, horizon: f64) -> f64 {
        (-self.log_rate(c, member, treated).exp() * horizon).exp()
    }

    /// True risk difference (intervention minus comparator) for one pattern.
    pub fn pattern_effect(&self, c: &[f64], member: bool, horizon: f64) -> f64 {
        self.event_free(c, member, true, horizon) - self.event_free(c, member, false, horizon)
    }

    /// Same scenario with the treatment x membership coefficient zeroed.
    pub fn without_membership_interaction(&self) -> ScenarioConfig {
        let mut cfg = self.clone();
        cfg.outcome.treatment_membership_interaction = 0.0;
        cfg
    }
}

/// A synthetic trial with both potential event times kept per subject.
#[derive(Debug, Clone)]
pub struct SimulatedTrial {
    pub dataset: TrialDataset,
    /// (event time under comparator, event time under intervention).
    pub potential_times: Vec<(f64, f64)>,
    /// Dropout time (infinite without dropout); administrative censoring
    /// is applied on top.
    pub dropout_times: Vec<f64>,
}

fn exp_draw(rate: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Config(format!("event rate {rate} must be positive and finite")));
    }
    Ok(Exp::new(rate).expect("positive rate").sample(rng))
}

/// Draws replicate `replicate` of the scenario. Members come first, then
/// non-members; output depends only on `(cfg.seed, replicate)`.
pub fn generate_trial(cfg: &ScenarioConfig, replicate: u64) -> Result<SimulatedTrial> {
    cfg.validate()?;
    let k = cfg.covariates.len();
    let sub = |p: u64| rng::stream(cfg.seed, &[purpose::REPLICATE, replicate, p]);
    let mut cov_rng = sub(purpose::COVARIATES);
    let mut trt_rng = sub(purpose::TREATMENT);
    let mut out_rng = sub(purpose::OUTCOME);
    let mut cen_rng = sub(purpose::CENSORING);

    let n = cfg.n_members + cfg.n_nonmembers;
    let mut records = Vec::with_capacity(n);
    let mut potential_times = Vec::with_capacity(n);
    let mut dropout_times = Vec::with_capacity(n);
    for i in 0..n {
        let member = i < cfg.n_members;
        let mut c = Vec::with_capacity(k);
        for j in 0..k {
            let p = cfg.covariate_prob(j, member, &c);
            c.push(f64::from(u8::from(cov_rng.random_bool(p))));
        }
        let treated = trt_rng.random_bool(cfg.treatment_probability);
        let t0 = exp_draw(cfg.log_rate(&c, member, false).exp(), &mut out_rng)?;
        let t1 = exp_draw(cfg.log_rate(&c, member, true).exp(), &mut out_rng)?;
        let dropout = if cfg.censoring.dropout_rate > 0.0 {
            exp_draw(cfg.censoring.dropout_rate, &mut cen_rng)?
        } else {
            f64::INFINITY
        };
        let t = if treated { t1 } else { t0 };
        let censor = dropout.min(cfg.censoring.admin_days);
        records.push(SubjectRecord {
            id: if member { format!("m{i}") } else { format!("n{}", i - cfg.n_members) },
            arm: Arm::from_indicator(treated),
            time: t.min(censor),
            event: t <= censor,
            member,
            covariates: c,
        });
        potential_times.push((t0, t1));
        dropout_times.push(dropout);
    }
    let dataset = TrialDataset::new(cfg.covariate_spec(), records, 0)?;
    Ok(SimulatedTrial {
        dataset,
        potential_times,
        dropout_times,
    })
}

/// Exact risk difference at `horizon` in one membership group, marginal
/// over that group's covariate law.
pub fn true_group_effect(cfg: &ScenarioConfig, member: bool, horizon: f64) -> f64 {
    cfg.pattern_law(member)
        .iter()
        .map(|(c, p)| p * cfg.pattern_effect(c, member, horizon))
        .sum()
}

/// Exact subgroup estimand `P(Y^1 event-free | M=1) - P(Y^0 event-free | M=1)`.
pub fn true_member_effect(cfg: &ScenarioConfig, horizon: f64) -> f64 {
    true_group_effect(cfg, true, horizon)
}

/// Treatment x membership coefficient that shifts the member effect by
/// `target_shift` relative to the same scenario without it.
pub fn calibrate_membership_interaction(
    cfg: &ScenarioConfig,
    target_shift: f64,
    horizon: f64,
) -> Result<f64> {
    let reference = true_member_effect(&cfg.without_membership_interaction(), horizon);
    let shift = |eta: f64| {
        let mut c = cfg.clone();
        c.outcome.treatment_membership_interaction = eta;
        true_member_effect(&c, horizon) - reference - target_shift
    };
    // the member effect decreases in the coefficient
    let (mut lo, mut hi) = (-20.0, 20.0);
    if shift(lo) < 0.0 || shift(hi) > 0.0 {
        return Err(Error::Config(format!("shift {target_shift} is not attainable")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if shift(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Risk differences within modifier levels after standardizing the
/// conditioning covariates to the modifier-level-1 distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmmContrast {
    pub modifier: String,
    pub conditioning: Vec<String>,
    pub difference_level1: f64,
    pub difference_level0: f64,
    pub is_emm: bool,
}

/// Exact modifier contrast over the trial population (members and
/// non-members mixed in their configured proportions). `modifier` and
/// `conditioning` name covariates or [`MEMBER`].
pub fn emm_contrast(
    cfg: &ScenarioConfig,
    modifier: &str,
    conditioning: &[String],
    horizon: f64,
) -> Result<EmmContrast> {
    cfg.validate()?;
    let k = cfg.covariates.len();
    let var_index = |name: &str| -> Result<usize> {
        if name == MEMBER {
            Ok(k)
        } else {
            cfg.index_of(name)
                .ok_or_else(|| Error::Config(format!("unknown variable `{name}`")))
        }
    };
    let v = var_index(modifier)?;
    let l: Vec<usize> = conditioning.iter().map(|n| var_index(n)).collect::<Result<_>>()?;
    if l.contains(&v) {
        return Err(Error::Config(format!("`{modifier}` cannot condition on itself")));
    }

    let n = (cfg.n_members + cfg.n_nonmembers) as f64;
    // (variables incl. membership at index k, probability, risk difference)
    let mut cells = Vec::new();
    for member in [true, false] {
        let pm = if member { cfg.n_members as f64 / n } else { cfg.n_nonmembers as f64 / n };
        for (c, p) in cfg.pattern_law(member) {
            let rd = cfg.pattern_effect(&c, member, horizon);
            let mut vars = c;
            vars.push(f64::from(u8::from(member)));
            cells.push((vars, pm * p, rd));
        }
    }
    let key = |vars: &[f64]| -> u64 {
        l.iter().enumerate().map(|(b, &i)| (vars[i] as u64) << b).sum()
    };

    // per modifier level: L-stratum -> (probability mass, mass * rd)
    let mut strata: [BTreeMap<u64, (f64, f64)>; 2] = [BTreeMap::new(), BTreeMap::new()];
    for (vars, p, rd) in &cells {
        let level = vars[v] as usize;
        let e = strata[level].entry(key(vars)).or_insert((0.0, 0.0));
        e.0 += p;
        e.1 += p * rd;
    }
    let mass1: f64 = strata[1].values().map(|e| e.0).sum();
    let mass0: f64 = strata[0].values().map(|e| e.0).sum();
    if mass1 <= 0.0 || mass0 <= 0.0 {
        return Err(Error::Config(format!("`{modifier}` has an empty level")));
    }
    let standardized = |level: usize| -> Result<f64> {
        let mut total = 0.0;
        for (l_key, (p1, _)) in &strata[1] {
            let (p, prd) = strata[level].get(l_key).copied().unwrap_or((0.0, 0.0));
            if p <= 0.0 {
                return Err(Error::Config(format!(
                    "conditioning stratum {l_key:#b} is empty at `{modifier}` = {level}"
                )));
            }
            total += (p1 / mass1) * (prd / p);
        }
        Ok(total)
    };
    let d1 = standardized(1)?;
    let d0 = standardized(0)?;
    Ok(EmmContrast {
        modifier: modifier.to_string(),
        conditioning: conditioning.to_vec(),
        difference_level1: d1,
        difference_level0: d0,
        is_emm: (d1 - d0).abs() > 1e-9,
    })
}

/// Monte Carlo operating characteristics of one analysis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindSummary {
    pub kind: AnalysisKind,
    pub n_ok: usize,
    pub mean_estimate: f64,
    /// `mean_estimate - truth`.
    pub bias: f64,
    /// Standard deviation of the replicate estimates.
    pub empirical_se: f64,
    /// Monte Carlo standard error of `bias`.
    pub bias_mc_se: f64,
    pub mean_cld: f64,
    pub median_cld: f64,
    /// Share of replicates whose interval contains the truth.
    pub coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplicateEstimate {
    pub estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloSummary {
    pub scenario: ScenarioConfig,
    pub analysis: AnalysisConfig,
    pub horizon_days: f64,
    /// True member effect.
    pub truth: f64,
    /// Member effect with the membership interaction removed: what the
    /// weighted non-members estimate.
    pub truth_without_membership_interaction: f64,
    pub n_replicates: usize,
    pub n_failed_replicates: usize,
    pub failure_breakdown: BTreeMap<String, usize>,
    pub kinds: Vec<KindSummary>,
    /// Per replicate, per analysis (`None` when that replicate or analysis failed).
    #[serde(skip)]
    pub replicates: Vec<Vec<Option<ReplicateEstimate>>>,
}

impl MonteCarloSummary {
    pub fn kind(&self, kind: AnalysisKind) -> &KindSummary {
        &self.kinds[kind.index()]
    }

    /// Successful replicate estimates of one analysis.
    pub fn estimates(&self, kind: AnalysisKind) -> Vec<ReplicateEstimate> {
        self.replicates.iter().filter_map(|r| r[kind.index()]).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per analysis.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "analysis",
            "label",
            "n_ok",
            "truth",
            "mean_estimate",
            "bias",
            "empirical_se",
            "bias_mc_se",
            "mean_cld",
            "median_cld",
            "coverage",
        ])?;
        for k in &self.kinds {
            w.write_record([
                k.kind.letter().to_string(),
                k.kind.label().to_string(),
                k.n_ok.to_string(),
                self.truth.to_string(),
                k.mean_estimate.to_string(),
                k.bias.to_string(),
                k.empirical_se.to_string(),
                k.bias_mc_se.to_string(),
                k.mean_cld.to_string(),
                k.median_cld.to_string(),
                k.coverage.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    /// Long format: one row per replicate and analysis.
    pub fn write_replicates_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replicate", "analysis", "estimate", "ci_lower", "ci_upper"])?;
        for (r, row) in self.replicates.iter().enumerate() {
            for (kind, e) in AnalysisKind::ALL.iter().zip(row) {
                let cells = match e {
                    Some(e) => [e.estimate.to_string(), e.ci_lower.to_string(), e.ci_upper.to_string()],
                    None => [String::new(), String::new(), String::new()],
                };
                w.write_record([
                    r.to_string(),
                    kind.letter().to_string(),
                    cells[0].clone(),
                    cells[1].clone(),
                    cells[2].clone(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// Runs the analysis suite on `n_replicates` synthetic trials and compares
/// each analysis against the true member effect.
///
/// Each replicate's bootstrap seed is derived from the scenario seed and
/// the replicate index; `analysis.seed` is not used.
pub fn monte_carlo_evaluate(
    cfg: &ScenarioConfig,
    analysis: &AnalysisConfig,
    n_replicates: usize,
) -> Result<MonteCarloSummary> {
    cfg.validate()?;
    if n_replicates == 0 {
        return Err(Error::Config("n_replicates must be at least 1".into()));
    }
    let horizon = analysis.horizon_days;
    let truth = true_member_effect(cfg, horizon);

    let outcomes: Vec<Result<Vec<Option<ReplicateEstimate>>, &'static str>> = (0..n_replicates)
        .into_par_iter()
        .map(|r| {
            let trial = generate_trial(cfg, r as u64).map_err(|e| e.tag())?;
            let mut a = analysis.clone();
            a.seed = rng::derive_seed(cfg.seed, &[purpose::REPLICATE, r as u64, purpose::BOOTSTRAP]);
            let report = run_analysis_suite(&trial.dataset, &a).map_err(|e| e.tag())?;
            Ok(AnalysisKind::ALL
                .iter()
                .map(|&k| {
                    report.estimate(k).map(|e| ReplicateEstimate {
                        estimate: e.point.difference,
                        ci_lower: e.ci_lower,
                        ci_upper: e.ci_upper,
                    })
                })
                .collect())
        })
        .collect();

    let mut breakdown: BTreeMap<String, usize> = BTreeMap::new();
    let mut replicates = Vec::with_capacity(n_replicates);
    for o in outcomes {
        match o {
            Ok(row) => replicates.push(row),
            Err(tag) => {
                *breakdown.entry(tag.to_string()).or_default() += 1;
                replicates.push(vec![None; AnalysisKind::ALL.len()]);
            }
        }
    }
    let failed: usize = breakdown.values().sum();
    if failed as f64 > 0.10 * n_replicates as f64 {
        return Err(Error::UnstableMonteCarlo {
            failed,
            total: n_replicates,
            breakdown,
        });
    }

    let kinds = AnalysisKind::ALL
        .iter()
        .map(|&kind| {
            let est: Vec<ReplicateEstimate> =
                replicates.iter().filter_map(|r| r[kind.index()]).collect();
            summarize_kind(kind, &est, truth)
        })
        .collect();

    Ok(MonteCarloSummary {
        scenario: cfg.clone(),
        analysis: analysis.clone(),
        horizon_days: horizon,
        truth,
        truth_without_membership_interaction: true_member_effect(
            &cfg.without_membership_interaction(),
            horizon,
        ),
        n_replicates,
        n_failed_replicates: failed,
        failure_breakdown: breakdown,
        kinds,
        replicates,
    })
}

fn summarize_kind(kind: AnalysisKind, est: &[ReplicateEstimate], truth: f64) -> KindSummary {
    let n = est.len();
    if n == 0 {
        return KindSummary {
            kind,
            n_ok: 0,
            mean_estimate: f64::NAN,
            bias: f64::NAN,
            empirical_se: f64::NAN,
            bias_mc_se: f64::NAN,
            mean_cld: f64::NAN,
            median_cld: f64::NAN,
            coverage: f64::NAN,
        };
    }
    let nf = n as f64;
    let mean = est.iter().map(|e| e.estimate).sum::<f64>() / nf;
    let var = if n > 1 {
        est.iter().map(|e| (e.estimate - mean).powi(2)).sum::<f64>() / (nf - 1.0)
    } else {
        0.0
    };
    let mut clds: Vec<f64> = est.iter().map(|e| e.ci_upper - e.ci_lower).collect();
    clds.sort_by(f64::total_cmp);
    let covered = est
        .iter()
        .filter(|e| e.ci_lower <= truth && truth <= e.ci_upper)
        .count();
    KindSummary {
        kind,
        n_ok: n,
        mean_estimate: mean,
        bias: mean - truth,
        empirical_se: var.sqrt(),
        bias_mc_se: (var / nf).sqrt(),
        mean_cld: clds.iter().sum::<f64>() / nf,
        median_cld: percentile(&clds, 0.5).expect("non-empty"),
        coverage: covered as f64 / nf,
    }
}
