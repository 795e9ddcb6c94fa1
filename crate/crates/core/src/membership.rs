//! Subgroup-membership model, odds weights and balance diagnostics.
//!
//! Membership is modeled with a main-effects logistic regression fitted by
//! iteratively reweighted least squares. Non-members then receive their
//! fitted odds of membership, `p / (1 - p)`, as analysis weights; members
//! keep weight 1. Summed over non-members the odds weights approximate the
//! member count, so the weighted non-members form a pseudopopulation the
//! size and covariate mix of the subgroup.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::{CovariateKind, DesignMatrix, TrialDataset};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the
/// log-likelihood only.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogisticOptions {
    pub max_iterations: usize,
    /// Converged once every score component is at most this in magnitude.
    pub score_tolerance: f64,
    /// Also converged once a full step moves no coefficient by more than this,
    /// provided the score is below `relaxed_score_tolerance`.
    pub step_tolerance: f64,
    pub relaxed_score_tolerance: f64,
    /// A small score only counts as converged when the pending Newton step is
    /// also below this; under separation the score vanishes while the
    /// coefficients keep drifting by O(1) per step.
    pub drift_tolerance: f64,
    /// Any |coefficient| above this during fitting is reported as separation.
    pub divergence_bound: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            max_iterations: 100,
            score_tolerance: 1e-8,
            step_tolerance: 1e-10,
            relaxed_score_tolerance: 1e-6,
            drift_tolerance: 1e-4,
            divergence_bound: 30.0,
        }
    }
}

/// Distinct design rows and the pattern index of every record.
///
/// The logistic likelihood depends on the data only through per-pattern
/// totals, so fits on resampled data can reuse the pattern table and only
/// recount.
#[derive(Debug, Clone)]
pub struct CovariatePatterns {
    pub rows: DMatrix<f64>,
    pub labels: Vec<String>,
    pub index: Vec<usize>,
}

impl CovariatePatterns {
    pub fn from_design(design: &DesignMatrix) -> Self {
        let (n, k) = design.matrix.shape();
        let mut lookup: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut unique: Vec<usize> = Vec::new();
        let mut index = Vec::with_capacity(n);
        for i in 0..n {
            let key: Vec<u64> = (0..k).map(|j| design.matrix[(i, j)].to_bits()).collect();
            let next = unique.len();
            let g = *lookup.entry(key).or_insert(next);
            if g == next {
                unique.push(i);
            }
            index.push(g);
        }
        let rows = DMatrix::from_fn(unique.len(), k, |g, j| design.matrix[(unique[g], j)]);
        CovariatePatterns {
            rows,
            labels: design.labels.clone(),
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// Per-pattern (trials, successes) for records weighted by `freq`.
    pub fn tally(&self, labels: &[bool], freq: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut trials = vec![0.0; self.len()];
        let mut successes = vec![0.0; self.len()];
        for ((&g, &y), &f) in self.index.iter().zip(labels).zip(freq) {
            trials[g] += f;
            if y {
                successes[g] += f;
            }
        }
        (trials, successes)
    }
}

/// Result of a grouped (binomial) logistic fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedFit {
    pub coefficients: Vec<f64>,
    /// Unclamped fitted probability per pattern.
    pub probs: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub max_abs_score: f64,
    /// Log-likelihood at the start and after each accepted step.
    pub log_likelihood_trace: Vec<f64>,
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn linear_predictor(x: &DMatrix<f64>, beta: &[f64]) -> Vec<f64> {
    (0..x.nrows())
        .map(|g| (0..x.ncols()).map(|j| x[(g, j)] * beta[j]).sum())
        .collect()
}

fn log_likelihood(x: &DMatrix<f64>, beta: &[f64], trials: &[f64], successes: &[f64]) -> f64 {
    linear_predictor(x, beta)
        .into_iter()
        .zip(trials.iter().zip(successes))
        .map(|(eta, (&t, &s))| {
            let p = sigmoid(eta).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            s * p.ln() + (t - s) * (1.0 - p).ln()
        })
        .sum()
}

/// Labels of design columns that are linear combinations of earlier ones,
/// over the patterns with positive weight.
fn dependent_columns(x: &DMatrix<f64>, labels: &[String], trials: &[f64]) -> Vec<String> {
    let active: Vec<usize> = (0..x.nrows()).filter(|&g| trials[g] > 0.0).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let col: Vec<f64> = active.iter().map(|&g| x[(g, j)]).collect();
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = col;
        // Two passes of modified Gram-Schmidt.
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= dot * qi);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= 1e-9 * norm0 {
            dependent.push(labels[j].clone());
        } else {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    dependent
}

/// Maximum-likelihood logistic fit on binomial pattern totals by IRLS with
/// step-halving.
pub fn fit_grouped(
    x: &DMatrix<f64>,
    labels: &[String],
    trials: &[f64],
    successes: &[f64],
    opts: &LogisticOptions,
) -> Result<GroupedFit> {
    let (m, k) = x.shape();
    assert_eq!(trials.len(), m);
    assert_eq!(successes.len(), m);

    let total: f64 = trials.iter().sum();
    let total_success: f64 = successes.iter().sum();
    if total_success <= 0.0 || total_success >= total {
        return Err(Error::DegenerateCohort(
            "membership model needs both members and non-members".into(),
        ));
    }
    let dependent = dependent_columns(x, labels, trials);
    if !dependent.is_empty() {
        return Err(Error::Collinearity { columns: dependent });
    }

    let mut beta = vec![0.0; k];
    let mean = total_success / total;
    beta[0] = (mean / (1.0 - mean)).ln();
    let mut ll = log_likelihood(x, &beta, trials, successes);
    let mut ll_trace = vec![ll];
    let mut score_trace = Vec::new();

    let mut iterations = 0;
    loop {
        let eta = linear_predictor(x, &beta);
        let probs: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let mut score = DVector::<f64>::zeros(k);
        let mut info = DMatrix::<f64>::zeros(k, k);
        for g in 0..m {
            if trials[g] == 0.0 {
                continue;
            }
            let p = probs[g];
            let resid = successes[g] - trials[g] * p;
            let w = trials[g] * p * (1.0 - p);
            for a in 0..k {
                score[a] += resid * x[(g, a)];
                let wa = w * x[(g, a)];
                for b in 0..=a {
                    info[(a, b)] += wa * x[(g, b)];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        let max_abs_score = score.amax();
        score_trace.push(max_abs_score);

        let step = match info.cholesky() {
            Some(chol) => chol.solve(&score),
            None if beta.iter().any(|b| b.abs() > 10.0) => {
                return Err(Error::Separation {
                    iteration: iterations,
                    detail: "information matrix became singular while coefficients diverged"
                        .into(),
                })
            }
            None => {
                return Err(Error::NonConvergence {
                    iterations,
                    trace: score_trace,
                })
            }
        };

        if max_abs_score <= opts.score_tolerance && step.amax() <= opts.drift_tolerance {
            return finish(x, beta, iterations, max_abs_score, ll_trace, successes, trials);
        }
        if iterations >= opts.max_iterations {
            return Err(Error::NonConvergence {
                iterations,
                trace: score_trace,
            });
        }

        let mut scale = 1.0;
        let mut accepted = None;
        while scale >= 1e-10 {
            let candidate: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let ll_new = log_likelihood(x, &candidate, trials, successes);
            // near the optimum the gain is below the rounding error of ll
            if ll_new >= ll - 1e-12 * (1.0 + ll.abs()) {
                accepted = Some((candidate, ll_new));
                break;
            }
            scale *= 0.5;
        }
        iterations += 1;

        let change = match accepted {
            Some((candidate, ll_new)) => {
                let change = beta
                    .iter()
                    .zip(&candidate)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                beta = candidate;
                ll = ll_new;
                ll_trace.push(ll);
                change
            }
            // No ascent direction left at working precision.
            None => 0.0,
        };

        if let Some((j, b)) = beta
            .iter()
            .enumerate()
            .find(|(_, b)| b.abs() > opts.divergence_bound)
        {
            return Err(Error::Separation {
                iteration: iterations,
                detail: format!("coefficient `{}` reached {b:.3}", labels[j]),
            });
        }

        if change <= opts.step_tolerance {
            let s = score_at(x, &beta, trials, successes);
            if s <= opts.relaxed_score_tolerance {
                return finish(x, beta, iterations, s, ll_trace, successes, trials);
            }
            score_trace.push(s);
            return Err(Error::NonConvergence {
                iterations,
                trace: score_trace,
            });
        }
    }
}

fn score_at(x: &DMatrix<f64>, beta: &[f64], trials: &[f64], successes: &[f64]) -> f64 {
    let eta = linear_predictor(x, beta);
    (0..x.ncols())
        .map(|a| {
            (0..x.nrows())
                .map(|g| (successes[g] - trials[g] * sigmoid(eta[g])) * x[(g, a)])
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

fn finish(
    x: &DMatrix<f64>,
    beta: Vec<f64>,
    iterations: usize,
    max_abs_score: f64,
    log_likelihood_trace: Vec<f64>,
    successes: &[f64],
    trials: &[f64],
) -> Result<GroupedFit> {
    let probs: Vec<f64> = linear_predictor(x, &beta).into_iter().map(sigmoid).collect();
    let member_at_top = (0..probs.len()).any(|g| successes[g] > 0.0 && probs[g] >= 1.0 - PROB_CLAMP);
    let nonmember_at_bottom =
        (0..probs.len()).any(|g| trials[g] - successes[g] > 0.0 && probs[g] <= PROB_CLAMP);
    if member_at_top && nonmember_at_bottom {
        return Err(Error::Separation {
            iteration: iterations,
            detail: "fitted probabilities reached the clamp for both classes".into(),
        });
    }
    Ok(GroupedFit {
        coefficients: beta,
        probs,
        iterations,
        converged: true,
        max_abs_score,
        log_likelihood_trace,
    })
}

/// Fitted membership model aligned to a design matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedMembershipModel {
    pub column_labels: Vec<String>,
    /// Log-odds coefficients, one per design column.
    pub coefficients: Vec<f64>,
    /// Unclamped fitted probability per record.
    #[serde(skip)]
    pub fitted_probs: Vec<f64>,
    pub n_iterations: usize,
    pub converged: bool,
    pub max_abs_score: f64,
    pub log_likelihood_trace: Vec<f64>,
}

pub fn fit_logistic(design: &DesignMatrix, labels: &[bool]) -> Result<FittedMembershipModel> {
    fit_logistic_weighted(design, labels, &vec![1.0; labels.len()], &LogisticOptions::default())
}

/// Fit with per-record frequency weights (a resample expressed as counts).
pub fn fit_logistic_weighted(
    design: &DesignMatrix,
    labels: &[bool],
    freq: &[f64],
    opts: &LogisticOptions,
) -> Result<FittedMembershipModel> {
    if design.nrows() != labels.len() || freq.len() != labels.len() {
        return Err(Error::Config(format!(
            "design has {} rows but {} labels and {} weights",
            design.nrows(),
            labels.len(),
            freq.len()
        )));
    }
    let patterns = CovariatePatterns::from_design(design);
    let (trials, successes) = patterns.tally(labels, freq);
    let fit = fit_grouped(&patterns.rows, &patterns.labels, &trials, &successes, opts)?;
    Ok(FittedMembershipModel {
        column_labels: design.labels.clone(),
        fitted_probs: patterns.index.iter().map(|&g| fit.probs[g]).collect(),
        coefficients: fit.coefficients,
        n_iterations: fit.iterations,
        converged: fit.converged,
        max_abs_score: fit.max_abs_score,
        log_likelihood_trace: fit.log_likelihood_trace,
    })
}

/// Odds weight of a non-member with fitted membership probability `p`.
pub fn odds_weight(p: f64) -> f64 {
    p / (1.0 - p)
}

/// Records paired with analysis weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCohort<'a> {
    dataset: &'a TrialDataset,
    weights: Vec<f64>,
    pseudo_n_nonmembers: f64,
}

impl<'a> WeightedCohort<'a> {
    /// Members must carry weight exactly 1; non-members any finite `w >= 0`.
    pub fn with_weights(dataset: &'a TrialDataset, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != dataset.len() {
            return Err(Error::Config("one weight per record required".into()));
        }
        for (r, &w) in dataset.records().iter().zip(&weights) {
            if r.member && w != 1.0 {
                return Err(Error::Config(format!("member `{}` has weight {w}", r.id)));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("record `{}` has weight {w}", r.id)));
            }
        }
        let pseudo_n_nonmembers = dataset
            .records()
            .iter()
            .zip(&weights)
            .filter(|(r, _)| !r.member)
            .map(|(_, w)| w)
            .sum();
        Ok(WeightedCohort {
            dataset,
            weights,
            pseudo_n_nonmembers,
        })
    }

    pub fn dataset(&self) -> &'a TrialDataset {
        self.dataset
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn pseudo_n_nonmembers(&self) -> f64 {
        self.pseudo_n_nonmembers
    }
}

/// Members get 1, non-members their fitted odds of membership, optionally
/// capped at `cap`.
pub fn compute_odds_weights<'a>(
    ds: &'a TrialDataset,
    model: &FittedMembershipModel,
    cap: Option<f64>,
) -> Result<WeightedCohort<'a>> {
    if model.fitted_probs.len() != ds.len() {
        return Err(Error::Config(format!(
            "model has {} fitted probabilities for {} records",
            model.fitted_probs.len(),
            ds.len()
        )));
    }
    let mut weights = Vec::with_capacity(ds.len());
    for (r, &p) in ds.records().iter().zip(&model.fitted_probs) {
        if r.member {
            weights.push(1.0);
            continue;
        }
        if p >= 1.0 - PROB_CLAMP {
            return Err(Error::WeightOverflow {
                record: r.id.clone(),
                prob: p,
            });
        }
        let w = odds_weight(p);
        weights.push(cap.map_or(w, |c| w.min(c)));
    }
    WeightedCohort::with_weights(ds, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "stat", rename_all = "lowercase")]
pub enum GroupSummary {
    /// Weighted count with value 1 and its percentage of the group total.
    Proportion { count: f64, percent: f64 },
    Mean { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub label: String,
    pub members: GroupSummary,
    pub nonmembers: GroupSummary,
    pub weighted_nonmembers: GroupSummary,
    /// Standardized mean difference (members minus non-members) before and
    /// after weighting, on the pooled member/crude-non-member SD.
    pub smd_crude: f64,
    pub smd_weighted: f64,
}

/// Member vs crude vs weighted non-member covariate distributions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceTable {
    pub member_n: usize,
    pub nonmember_n: usize,
    pub weighted_nonmember_n: f64,
    pub rows: Vec<BalanceRow>,
}

struct Moments {
    total: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn of(values: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut m = Moments {
            total: 0.0,
            sum: 0.0,
            sum_sq: 0.0,
        };
        for (v, w) in values {
            m.total += w;
            m.sum += w * v;
            m.sum_sq += w * v * v;
        }
        m
    }

    fn mean(&self) -> f64 {
        if self.total > 0.0 {
            self.sum / self.total
        } else {
            f64::NAN
        }
    }

    fn variance(&self) -> f64 {
        let mu = self.mean();
        (self.sum_sq / self.total - mu * mu).max(0.0)
    }
}

pub fn balance_table(cohort: &WeightedCohort<'_>) -> BalanceTable {
    let ds = cohort.dataset();
    let records = ds.records();
    let weights = cohort.weights();

    let mut rows = Vec::new();
    for (ci, cov) in ds.spec().entries().iter().enumerate() {
        // (label, indicator or raw value, proportion?)
        let mut columns: Vec<(String, Box<dyn Fn(f64) -> f64>, bool)> = Vec::new();
        match &cov.kind {
            CovariateKind::Binary => columns.push((cov.name.clone(), Box::new(|v| v), true)),
            CovariateKind::Continuous => columns.push((cov.name.clone(), Box::new(|v| v), false)),
            CovariateKind::Categorical { levels } => {
                for (li, l) in levels.iter().enumerate() {
                    columns.push((
                        format!("{}={}", cov.name, l),
                        Box::new(move |v| f64::from(u8::from(v as usize == li))),
                        true,
                    ));
                }
            }
        }
        for (label, f, proportion) in columns {
            let group = |member: bool, weighted: bool| {
                Moments::of(records.iter().zip(weights).filter(|(r, _)| r.member == member).map(
                    |(r, &w)| (f(r.covariates[ci]), if weighted { w } else { 1.0 }),
                ))
            };
            let m = group(true, false);
            let crude = group(false, false);
            let weighted = group(false, true);
            let summary = |g: &Moments| {
                if proportion {
                    GroupSummary::Proportion {
                        count: g.sum,
                        percent: 100.0 * g.mean(),
                    }
                } else {
                    GroupSummary::Mean {
                        mean: g.mean(),
                        sd: g.variance().sqrt(),
                    }
                }
            };
            let pooled_sd = ((m.variance() + crude.variance()) / 2.0).sqrt();
            let smd = |g: &Moments| {
                let diff = m.mean() - g.mean();
                if pooled_sd > 0.0 {
                    diff / pooled_sd
                } else if diff == 0.0 {
                    0.0
                } else {
                    f64::INFINITY.copysign(diff)
                }
            };
            rows.push(BalanceRow {
                label,
                members: summary(&m),
                nonmembers: summary(&crude),
                weighted_nonmembers: summary(&weighted),
                smd_crude: smd(&crude),
                smd_weighted: smd(&weighted),
            });
        }
    }
    BalanceTable {
        member_n: ds.member_count(),
        nonmember_n: ds.nonmember_count(),
        weighted_nonmember_n: cohort.pseudo_n_nonmembers(),
        rows,
    }
}

fn cell(s: &GroupSummary, weighted: bool) -> String {
    match *s {
        GroupSummary::Proportion { count, percent } if weighted => {
            format!("{count:.1} ({percent:.0}%)")
        }
        GroupSummary::Proportion { count, percent } => format!("{count:.0} ({percent:.0}%)"),
        GroupSummary::Mean { mean, sd } => format!("{mean:.1} (SD {sd:.1})"),
    }
}

impl BalanceTable {
    /// Aligned plain-text layout: crude non-members, members, weighted
    /// non-members.
    pub fn to_text(&self) -> String {
        let header = [
            "Covariate".to_string(),
            format!("Non-members (N={})", self.nonmember_n),
            format!("Members (N={})", self.member_n),
            format!("Odds-weighted non-members (N={:.1})", self.weighted_nonmember_n),
        ];
        let body: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    cell(&r.nonmembers, false),
                    cell(&r.members, false),
                    cell(&r.weighted_nonmembers, true),
                ]
            })
            .collect();
        let mut widths = header.clone().map(|h| h.len());
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        for row in std::iter::once(&header).chain(&body) {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "covariate",
            "statistic",
            "members",
            "nonmembers",
            "weighted_nonmembers",
        ])?;
        w.write_record([
            "N".to_string(),
            "count".to_string(),
            self.member_n.to_string(),
            self.nonmember_n.to_string(),
            self.weighted_nonmember_n.to_string(),
        ])?;
        for r in &self.rows {
            let parts = |s: &GroupSummary| match *s {
                GroupSummary::Proportion { count, percent } => [count, percent],
                GroupSummary::Mean { mean, sd } => [mean, sd],
            };
            let names = match r.members {
                GroupSummary::Proportion { .. } => ["count", "percent"],
                GroupSummary::Mean { .. } => ["mean", "sd"],
            };
            let (m, c, wt) = (parts(&r.members), parts(&r.nonmembers), parts(&r.weighted_nonmembers));
            for k in 0..2 {
                w.write_record([
                    r.label.clone(),
                    names[k].to_string(),
                    m[k].to_string(),
                    c[k].to_string(),
                    wt[k].to_string(),
                ])?;
            }
            w.write_record([
                r.label.clone(),
                "smd".to_string(),
                String::new(),
                r.smd_crude.to_string(),
                r.smd_weighted.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}
