//! The five-analysis suite, percentile bootstrap, confidence-limit
//! differences and inverse-variance pooling.
//!
//! Every bootstrap iteration resamples subjects with replacement within the
//! member and non-member strata, refits the membership model on the
//! resample and recomputes the estimates. A resample is represented as a
//! multiplicity per original subject, which is exactly equivalent to
//! materializing the duplicated rows: the logistic likelihood and the
//! product-limit sums are both linear in per-subject frequencies.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{encode_design_matrix_for, Arm, CovariateSpec, TrialDataset};
use crate::error::{Error, Result};
use crate::membership::{
    balance_table, compute_odds_weights, fit_grouped, fit_logistic, odds_weight, BalanceTable,
    CovariatePatterns, FittedMembershipModel, LogisticOptions, WeightedCohort, PROB_CLAMP,
};
use crate::rng::{self, purpose};
use crate::survival::{arm_difference, pfs_difference, PfsDifference, SortedSample, SurvivalCurve};

/// z-quantile used to turn a percentile interval back into a variance.
pub const Z_975: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnalysisKind {
    /// A: members and non-members, unweighted.
    CombinedCrude,
    /// B: non-members, unweighted.
    NonMembersCrude,
    /// C: non-members with odds weights.
    NonMembersWeighted,
    /// D: members only.
    MembersOnly,
    /// E: members plus odds-weighted non-members.
    CombinedWeighted,
}

impl AnalysisKind {
    pub const ALL: [AnalysisKind; 5] = [
        AnalysisKind::CombinedCrude,
        AnalysisKind::NonMembersCrude,
        AnalysisKind::NonMembersWeighted,
        AnalysisKind::MembersOnly,
        AnalysisKind::CombinedWeighted,
    ];

    pub fn letter(self) -> char {
        match self {
            AnalysisKind::CombinedCrude => 'A',
            AnalysisKind::NonMembersCrude => 'B',
            AnalysisKind::NonMembersWeighted => 'C',
            AnalysisKind::MembersOnly => 'D',
            AnalysisKind::CombinedWeighted => 'E',
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AnalysisKind::CombinedCrude => "Unweighted combined analysis",
            AnalysisKind::NonMembersCrude => "Non-target patients only",
            AnalysisKind::NonMembersWeighted => "Weighted non-target patients only",
            AnalysisKind::MembersOnly => "Target subgroup patients only",
            AnalysisKind::CombinedWeighted => "Weighted combined analysis",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether the analysis needs the membership model.
    pub fn uses_weights(self) -> bool {
        matches!(self, AnalysisKind::NonMembersWeighted | AnalysisKind::CombinedWeighted)
    }

    /// Analysis weight of a subject given membership and its odds weight.
    pub fn weight(self, member: bool, odds: f64) -> f64 {
        match (self, member) {
            (AnalysisKind::CombinedCrude, _) => 1.0,
            (AnalysisKind::NonMembersCrude, m) => f64::from(u8::from(!m)),
            (AnalysisKind::NonMembersWeighted, true) => 0.0,
            (AnalysisKind::NonMembersWeighted, false) => odds,
            (AnalysisKind::MembersOnly, m) => f64::from(u8::from(m)),
            (AnalysisKind::CombinedWeighted, true) => 1.0,
            (AnalysisKind::CombinedWeighted, false) => odds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Covariates entering the membership model; `None` uses the whole spec.
    pub model_covariates: Option<Vec<String>>,
    pub horizon_days: f64,
    pub n_bootstrap: usize,
    pub seed: u64,
    /// Optional upper bound on non-member odds weights. Off by default.
    pub weight_cap: Option<f64>,
    /// A bootstrap with a larger share of failed iterations is rejected.
    pub max_failed_fraction: f64,
}

impl AnalysisConfig {
    pub fn new(seed: u64) -> Self {
        AnalysisConfig {
            model_covariates: None,
            horizon_days: crate::ONE_YEAR_DAYS,
            n_bootstrap: 2000,
            seed,
            weight_cap: None,
            max_failed_fraction: 0.10,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon_days.is_finite() && self.horizon_days >= 0.0) {
            return Err(Error::Config(format!("invalid horizon {}", self.horizon_days)));
        }
        if self.n_bootstrap == 0 {
            return Err(Error::Config("n_bootstrap must be at least 1".into()));
        }
        if let Some(c) = self.weight_cap {
            if !(c > 0.0) {
                return Err(Error::Config(format!("weight cap must be positive, got {c}")));
            }
        }
        Ok(())
    }

    fn model_spec(&self, ds: &TrialDataset) -> Result<CovariateSpec> {
        match &self.model_covariates {
            Some(names) => ds.spec().subset(names),
            None => Ok(ds.spec().clone()),
        }
    }
}

/// Point estimate with its percentile-bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateWithCI {
    pub kind: AnalysisKind,
    pub point: PfsDifference,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub cld: f64,
    pub n_bootstrap: usize,
    pub n_failed_bootstrap: usize,
    pub failure_breakdown: BTreeMap<String, usize>,
}

/// Empirical quantile of sorted values, linearly interpolated between order
/// statistics at 1-based position `1 + q (n - 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyInput("percentile of no values"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile {q} outside [0, 1]")));
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
}

pub fn confidence_limit_difference(e: &EstimateWithCI) -> f64 {
    e.ci_upper - e.ci_lower
}

/// Inverse-variance fixed-effect pool of the members-only and weighted
/// non-member estimates.
///
/// The two estimates are treated as independent although they share the
/// membership model; the output is labeled accordingly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledEstimate {
    pub point: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Normalized weights of (members, weighted non-members).
    pub weights: [f64; 2],
    pub assumption: String,
    pub variance_method: String,
}

/// Variance implied by a 95% interval under a normal approximation.
pub fn variance_from_interval(lower: f64, upper: f64) -> f64 {
    ((upper - lower) / (2.0 * Z_975)).powi(2)
}

pub fn inverse_variance_pool(estimates: &[(f64, f64)]) -> Result<(f64, f64, Vec<f64>)> {
    if estimates.is_empty() {
        return Err(Error::EmptyInput("nothing to pool"));
    }
    for &(_, v) in estimates {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidVariance(format!("variance {v}")));
        }
    }
    let w: Vec<f64> = estimates.iter().map(|&(_, v)| 1.0 / v).collect();
    let total: f64 = w.iter().sum();
    let point = estimates.iter().zip(&w).map(|(&(t, _), w)| w * t).sum::<f64>() / total;
    Ok((point, 1.0 / total, w.into_iter().map(|x| x / total).collect()))
}

pub fn pooled_meta_estimate(
    e_members: &EstimateWithCI,
    e_weighted_nonmembers: &EstimateWithCI,
) -> Result<PooledEstimate> {
    let var_m = variance_from_interval(e_members.ci_lower, e_members.ci_upper);
    let var_n = variance_from_interval(e_weighted_nonmembers.ci_lower, e_weighted_nonmembers.ci_upper);
    let (point, var, w) = inverse_variance_pool(&[
        (e_members.point.difference, var_m),
        (e_weighted_nonmembers.point.difference, var_n),
    ])?;
    let se = var.sqrt();
    Ok(PooledEstimate {
        point,
        se,
        ci_lower: point - Z_975 * se,
        ci_upper: point + Z_975 * se,
        weights: [w[0], w[1]],
        assumption: "independence-assumed".into(),
        variance_method: "normal approximation from percentile interval".into(),
    })
}

/// Shared state for evaluating all five analyses on a dataset and on
/// frequency-weighted resamples of it.
pub(crate) struct SuiteEngine<'a> {
    ds: &'a TrialDataset,
    membership: Vec<bool>,
    arms: Vec<Arm>,
    patterns: CovariatePatterns,
    sample: SortedSample,
    members: Vec<usize>,
    nonmembers: Vec<usize>,
    horizon: f64,
    cap: Option<f64>,
    opts: LogisticOptions,
}

impl<'a> SuiteEngine<'a> {
    pub(crate) fn new(ds: &'a TrialDataset, config: &AnalysisConfig) -> Result<Self> {
        config.validate()?;
        let names: Vec<String> = config
            .model_spec(ds)?
            .entries()
            .iter()
            .map(|c| c.name.clone())
            .collect();
        let design = encode_design_matrix_for(ds, &names)?;
        let membership = ds.membership();
        let (members, nonmembers): (Vec<usize>, Vec<usize>) =
            (0..ds.len()).partition(|&i| membership[i]);
        Ok(SuiteEngine {
            ds,
            arms: ds.records().iter().map(|r| r.arm).collect(),
            patterns: CovariatePatterns::from_design(&design),
            sample: SortedSample::from_records(ds.records()),
            membership,
            members,
            nonmembers,
            horizon: config.horizon_days,
            cap: config.weight_cap,
            opts: LogisticOptions::default(),
        })
    }

    /// Stratified resample as per-subject multiplicities.
    fn resample(&self, seed: u64, iteration: usize) -> Vec<f64> {
        let mut rng = rng::stream(seed, &[purpose::BOOTSTRAP, iteration as u64]);
        let mut freq = vec![0.0; self.ds.len()];
        for stratum in [&self.members, &self.nonmembers] {
            for _ in 0..stratum.len() {
                freq[stratum[rng.random_range(0..stratum.len())]] += 1.0;
            }
        }
        freq
    }

    /// Odds weights (1 for members) from a membership model refit on `freq`.
    fn odds_weights(&self, freq: &[f64]) -> Result<Vec<f64>> {
        let (trials, successes) = self.patterns.tally(&self.membership, freq);
        let fit = fit_grouped(&self.patterns.rows, &self.patterns.labels, &trials, &successes, &self.opts)?;
        let mut weights = Vec::with_capacity(self.ds.len());
        for (i, &g) in self.patterns.index.iter().enumerate() {
            if self.membership[i] {
                weights.push(1.0);
                continue;
            }
            let p = fit.probs[g];
            if freq[i] > 0.0 && p >= 1.0 - PROB_CLAMP {
                return Err(Error::WeightOverflow {
                    record: self.ds.records()[i].id.clone(),
                    prob: p,
                });
            }
            let w = odds_weight(p);
            weights.push(self.cap.map_or(w, |c| w.min(c)));
        }
        Ok(weights)
    }

    fn estimate(&self, kind: AnalysisKind, freq: &[f64], odds: &[f64]) -> Result<PfsDifference> {
        arm_difference(
            &self.sample,
            &self.arms,
            |i| freq[i] * kind.weight(self.membership[i], odds[i]),
            self.horizon,
        )
    }

    /// Estimates for the requested kinds on one (re)sample. Kinds that do not
    /// use weights are unaffected by a failed membership fit.
    pub(crate) fn evaluate(
        &self,
        kinds: &[AnalysisKind],
        freq: &[f64],
    ) -> Vec<(AnalysisKind, Result<PfsDifference>)> {
        let odds = if kinds.iter().any(|k| k.uses_weights()) {
            Some(self.odds_weights(freq))
        } else {
            None
        };
        let ones = vec![1.0; freq.len()];
        kinds
            .iter()
            .map(|&kind| {
                let r = if kind.uses_weights() {
                    match odds.as_ref().expect("computed above") {
                        Ok(w) => self.estimate(kind, freq, w),
                        Err(e) => Err(clone_error(e)),
                    }
                } else {
                    self.estimate(kind, freq, &ones)
                };
                (kind, r)
            })
            .collect()
    }

    /// One row per iteration, one column per requested kind.
    pub(crate) fn bootstrap(
        &self,
        kinds: &[AnalysisKind],
        n_bootstrap: usize,
        seed: u64,
    ) -> Vec<Vec<Result<f64, &'static str>>> {
        (0..n_bootstrap)
            .into_par_iter()
            .map(|b| {
                let freq = self.resample(seed, b);
                self.evaluate(kinds, &freq)
                    .into_iter()
                    .map(|(_, r)| r.map(|d| d.difference).map_err(|e| e.tag()))
                    .collect()
            })
            .collect()
    }
}

/// Errors are not `Clone`; failures are only ever reported by tag and
/// message, so a lossy copy is enough.
fn clone_error(e: &Error) -> Error {
    match e {
        Error::Separation { iteration, detail } => Error::Separation {
            iteration: *iteration,
            detail: detail.clone(),
        },
        Error::Collinearity { columns } => Error::Collinearity {
            columns: columns.clone(),
        },
        Error::NonConvergence { iterations, trace } => Error::NonConvergence {
            iterations: *iterations,
            trace: trace.clone(),
        },
        Error::WeightOverflow { record, prob } => Error::WeightOverflow {
            record: record.clone(),
            prob: *prob,
        },
        other => Error::DegenerateCohort(other.to_string()),
    }
}

fn summarize(
    kind: AnalysisKind,
    point: PfsDifference,
    draws: &[Result<f64, &'static str>],
    max_failed_fraction: f64,
) -> Result<EstimateWithCI> {
    let mut ok: Vec<f64> = Vec::with_capacity(draws.len());
    let mut breakdown: BTreeMap<String, usize> = BTreeMap::new();
    for d in draws {
        match d {
            Ok(v) => ok.push(*v),
            Err(tag) => *breakdown.entry(tag.to_string()).or_default() += 1,
        }
    }
    let failed = draws.len() - ok.len();
    if failed as f64 > max_failed_fraction * draws.len() as f64 || ok.is_empty() {
        return Err(Error::UnstableBootstrap {
            failed,
            total: draws.len(),
            breakdown,
        });
    }
    ok.sort_by(f64::total_cmp);
    let ci_lower = percentile(&ok, 0.025)?;
    let ci_upper = percentile(&ok, 0.975)?;
    Ok(EstimateWithCI {
        kind,
        point,
        ci_lower,
        ci_upper,
        cld: ci_upper - ci_lower,
        n_bootstrap: draws.len(),
        n_failed_bootstrap: failed,
        failure_breakdown: breakdown,
    })
}

/// Percentile-bootstrap interval for a single analysis.
///
/// Resample `b` depends only on `(seed, b)`, so this agrees exactly with the
/// corresponding entry of [`run_analysis_suite`] run with the same seed.
pub fn bootstrap_ci(
    ds: &TrialDataset,
    config: &AnalysisConfig,
    kind: AnalysisKind,
    seed: u64,
) -> Result<EstimateWithCI> {
    let engine = SuiteEngine::new(ds, config)?;
    let ones = vec![1.0; ds.len()];
    let (_, point) = engine.evaluate(&[kind], &ones).pop().expect("one kind");
    let point = point?;
    let draws: Vec<Result<f64, &'static str>> = engine
        .bootstrap(&[kind], config.n_bootstrap, seed)
        .into_iter()
        .map(|mut row| row.pop().expect("one kind"))
        .collect();
    summarize(kind, point, &draws, config.max_failed_fraction)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub n_records: usize,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub n_intervention: usize,
    pub n_comparator: usize,
    pub dropped_incomplete: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub column_labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub n_iterations: usize,
    pub max_abs_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisOutcome {
    pub kind: AnalysisKind,
    pub label: String,
    pub estimate: Option<EstimateWithCI>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub config: AnalysisConfig,
    pub model_covariates: CovariateSpec,
    pub provenance: Provenance,
    pub model: ModelSummary,
    pub estimates: Vec<AnalysisOutcome>,
    /// Pool of D and C; `Err` text when either is unavailable.
    pub pooled: std::result::Result<PooledEstimate, String>,
    pub balance: BalanceTable,
}

/// Membership model on the full data and the resulting odds weights.
pub fn fit_point_weights<'a>(
    ds: &'a TrialDataset,
    config: &AnalysisConfig,
) -> Result<(CovariateSpec, FittedMembershipModel, WeightedCohort<'a>)> {
    config.validate()?;
    let model_spec = config.model_spec(ds)?;
    let names: Vec<String> = model_spec.entries().iter().map(|c| c.name.clone()).collect();
    let design = encode_design_matrix_for(ds, &names)?;
    let model = fit_logistic(&design, &ds.membership())?;
    let cohort = compute_odds_weights(ds, &model, config.weight_cap)?;
    Ok((model_spec, model, cohort))
}

/// Full-data survival curve of one arm under one analysis' weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisCurve {
    pub kind: AnalysisKind,
    pub arm: Arm,
    pub curve: SurvivalCurve,
}

/// Point-estimate curves for every analysis and arm. Arms without any
/// positive weight under an analysis are left out.
pub fn analysis_curves(ds: &TrialDataset, config: &AnalysisConfig) -> Result<Vec<AnalysisCurve>> {
    let (_, _, cohort) = fit_point_weights(ds, config)?;
    let sample = SortedSample::from_records(ds.records());
    let records = ds.records();
    let mut out = Vec::new();
    for kind in AnalysisKind::ALL {
        for arm in [Arm::Intervention, Arm::Comparator] {
            let weight = |i: usize| {
                let r = &records[i];
                if r.arm == arm {
                    kind.weight(r.member, cohort.weights()[i])
                } else {
                    0.0
                }
            };
            match sample.curve(weight, None) {
                Ok(curve) => out.push(AnalysisCurve { kind, arm, curve }),
                Err(Error::DegenerateCohort(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Fits the membership model once, computes the five point estimates and
/// bootstraps all of them on shared resamples.
///
/// Model failures abort the suite; a failure confined to one analysis (for
/// example an empty arm) is recorded in that analysis' slot.
pub fn run_analysis_suite(ds: &TrialDataset, config: &AnalysisConfig) -> Result<AnalysisReport> {
    let engine = SuiteEngine::new(ds, config)?;
    let (model_spec, model, cohort) = fit_point_weights(ds, config)?;
    let balance = balance_table(&cohort);

    let records = ds.records();
    let points: Vec<Result<PfsDifference>> = AnalysisKind::ALL
        .iter()
        .map(|&kind| {
            let w: Vec<f64> = records
                .iter()
                .zip(cohort.weights())
                .map(|(r, &cw)| kind.weight(r.member, cw))
                .collect();
            pfs_difference(records, &w, config.horizon_days)
        })
        .collect();

    let draws = engine.bootstrap(&AnalysisKind::ALL, config.n_bootstrap, config.seed);

    let estimates: Vec<AnalysisOutcome> = AnalysisKind::ALL
        .iter()
        .zip(points)
        .map(|(&kind, point)| {
            let result = point.and_then(|p| {
                let column: Vec<Result<f64, &'static str>> =
                    draws.iter().map(|row| row[kind.index()]).collect();
                summarize(kind, p, &column, config.max_failed_fraction)
            });
            let (estimate, error) = match result {
                Ok(e) => (Some(e), None),
                Err(e) => (None, Some(e.to_string())),
            };
            AnalysisOutcome {
                kind,
                label: kind.label().to_string(),
                estimate,
                error,
            }
        })
        .collect();

    let pooled = match (
        &estimates[AnalysisKind::MembersOnly.index()].estimate,
        &estimates[AnalysisKind::NonMembersWeighted.index()].estimate,
    ) {
        (Some(d), Some(c)) => pooled_meta_estimate(d, c).map_err(|e| e.to_string()),
        _ => Err("members-only or weighted non-member estimate unavailable".to_string()),
    };

    Ok(AnalysisReport {
        config: config.clone(),
        model_covariates: model_spec,
        provenance: Provenance {
            n_records: ds.len(),
            n_members: ds.member_count(),
            n_nonmembers: ds.nonmember_count(),
            n_intervention: records.iter().filter(|r| r.arm == Arm::Intervention).count(),
            n_comparator: records.iter().filter(|r| r.arm == Arm::Comparator).count(),
            dropped_incomplete: ds.dropped_incomplete(),
        },
        model: ModelSummary {
            column_labels: model.column_labels.clone(),
            coefficients: model.coefficients.clone(),
            n_iterations: model.n_iterations,
            max_abs_score: model.max_abs_score,
        },
        estimates,
        pooled,
        balance,
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

impl AnalysisReport {
    pub fn estimate(&self, kind: AnalysisKind) -> Option<&EstimateWithCI> {
        self.estimates[kind.index()].estimate.as_ref()
    }

    pub fn has_failures(&self) -> bool {
        self.estimates.iter().any(|e| e.error.is_some())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned table: one row per analysis with PFSD (95% CI) in percent to
    /// one decimal and the CLD to two decimals.
    pub fn to_text(&self) -> String {
        let header = ["Analysis".to_string(), "1-year PFSD (95% CI)".to_string(), "CLD".to_string()];
        let rows: Vec<[String; 3]> = self
            .estimates
            .iter()
            .map(|o| {
                let name = format!("{}) {}", o.kind.letter(), o.label);
                match (&o.estimate, &o.error) {
                    (Some(e), _) => [
                        name,
                        format!(
                            "{} ({}, {})",
                            pct(e.point.difference),
                            pct(e.ci_lower),
                            pct(e.ci_upper)
                        ),
                        format!("{:.2}", e.cld),
                    ],
                    (None, err) => [
                        name,
                        format!("failed: {}", err.as_deref().unwrap_or("unknown")),
                        "-".into(),
                    ],
                }
            })
            .collect();
        let mut widths = header.clone().map(|h| h.len());
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let _ = writeln!(
            out,
            "One-year event-free survival difference (positive = intervention beneficial)"
        );
        let _ = writeln!(
            out,
            "horizon {} days; {} bootstrap iterations; seed {}; members {}, non-members {}",
            self.config.horizon_days,
            self.config.n_bootstrap,
            self.config.seed,
            self.provenance.n_members,
            self.provenance.n_nonmembers
        );
        for r in std::iter::once(&header).chain(&rows) {
            let _ = writeln!(
                out,
                "{:<w0$}  {:>w1$}  {:>w2$}",
                r[0],
                r[1],
                r[2],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2]
            );
        }
        match &self.pooled {
            Ok(p) => {
                let _ = writeln!(
                    out,
                    "Pooled D+C (inverse-variance, {}; {}): {} ({}, {})",
                    p.assumption,
                    p.variance_method,
                    pct(p.point),
                    pct(p.ci_lower),
                    pct(p.ci_upper)
                );
            }
            Err(e) => {
                let _ = writeln!(out, "Pooled D+C unavailable: {e}");
            }
        }
        out
    }
}
