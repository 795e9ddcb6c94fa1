//! Weighted product-limit survival and fixed-horizon survival differences.

use std::io::Write;

use serde::Serialize;

use crate::dataset::{Arm, SubjectRecord};
use crate::error::{Error, Result};
use crate::membership::WeightedCohort;

/// Weighted Kaplan-Meier curve.
///
/// `times` holds the distinct event times carrying positive weight; entry
/// `i` of the other vectors describes the step at `times[i]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub weighted_at_risk: Vec<f64>,
    pub weighted_events: Vec<f64>,
    /// Largest observed time among subjects with positive weight.
    pub max_followup: f64,
}

impl SurvivalCurve {
    /// Right-continuous step function: the value after the last event time
    /// `<= t`, or 1 before the first event.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&u| u <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    /// Like [`survival_at`](Self::survival_at) but refuses to extrapolate past
    /// the last observation while the curve is still above zero.
    pub fn survival_at_checked(&self, horizon: f64) -> Result<f64> {
        let s = self.survival_at(horizon);
        if horizon > self.max_followup && s > 0.0 {
            return Err(Error::UndefinedTail {
                horizon,
                max_followup: self.max_followup,
                survival: s,
            });
        }
        Ok(s)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "survival", "weighted_at_risk", "weighted_events"])?;
        for i in 0..self.times.len() {
            w.write_record([
                self.times[i].to_string(),
                self.survival[i].to_string(),
                self.weighted_at_risk[i].to_string(),
                self.weighted_events[i].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// Subject times pre-sorted once so that repeated weighted curves (one per
/// analysis population and bootstrap resample) cost a single linear pass.
#[derive(Debug, Clone)]
pub struct SortedSample {
    order: Vec<usize>,
    times: Vec<f64>,
    events: Vec<bool>,
}

impl SortedSample {
    pub fn new(times: &[f64], events: &[bool]) -> Self {
        assert_eq!(times.len(), events.len());
        let mut order: Vec<usize> = (0..times.len()).collect();
        // Events before censorings at tied times.
        order.sort_by(|&a, &b| {
            times[a]
                .total_cmp(&times[b])
                .then(events[b].cmp(&events[a]))
                .then(a.cmp(&b))
        });
        SortedSample {
            order,
            times: times.to_vec(),
            events: events.to_vec(),
        }
    }

    pub fn from_records(records: &[SubjectRecord]) -> Self {
        let times: Vec<f64> = records.iter().map(|r| r.time).collect();
        let events: Vec<bool> = records.iter().map(|r| r.event).collect();
        SortedSample::new(&times, &events)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Product-limit curve for subjects weighted by `weight(i)` (original
    /// index). Zero-weight subjects are skipped. Steps beyond `until` are
    /// not materialized.
    pub fn curve(&self, weight: impl Fn(usize) -> f64, until: Option<f64>) -> Result<SurvivalCurve> {
        // Distinct-time groups: (time, event weight, total weight).
        let mut groups: Vec<(f64, f64, f64)> = Vec::new();
        let mut tail = 0.0;
        let mut max_followup = f64::NEG_INFINITY;
        for &i in &self.order {
            let w = weight(i);
            if w <= 0.0 {
                continue;
            }
            let t = self.times[i];
            max_followup = t;
            if until.is_some_and(|h| t > h) {
                tail += w;
                continue;
            }
            match groups.last_mut() {
                Some(g) if g.0 == t => {
                    if self.events[i] {
                        g.1 += w;
                    }
                    g.2 += w;
                }
                _ => groups.push((t, if self.events[i] { w } else { 0.0 }, w)),
            }
        }
        if groups.is_empty() && tail == 0.0 {
            return Err(Error::DegenerateCohort("no subject carries positive weight".into()));
        }

        // At-risk weight at each time = weight of subjects with time >= it.
        let mut at_risk = vec![0.0; groups.len()];
        let mut acc = tail;
        for (k, g) in groups.iter().enumerate().rev() {
            acc += g.2;
            at_risk[k] = acc;
        }

        let mut curve = SurvivalCurve {
            times: Vec::new(),
            survival: Vec::new(),
            weighted_at_risk: Vec::new(),
            weighted_events: Vec::new(),
            max_followup,
        };
        let mut s = 1.0;
        for (g, &n) in groups.iter().zip(&at_risk) {
            if g.1 <= 0.0 {
                continue;
            }
            s *= 1.0 - g.1 / n;
            curve.times.push(g.0);
            curve.survival.push(s);
            curve.weighted_at_risk.push(n);
            curve.weighted_events.push(g.1);
        }
        Ok(curve)
    }

    /// Survival at `horizon` with the undefined-tail check.
    pub fn survival_at(&self, weight: impl Fn(usize) -> f64, horizon: f64) -> Result<f64> {
        self.curve(weight, Some(horizon))?.survival_at_checked(horizon)
    }
}

/// Weighted Kaplan-Meier estimate over `records` with aligned `weights`.
pub fn weighted_km(records: &[SubjectRecord], weights: &[f64]) -> Result<SurvivalCurve> {
    if records.is_empty() {
        return Err(Error::DegenerateCohort("empty subset".into()));
    }
    if records.len() != weights.len() {
        return Err(Error::Config("one weight per record required".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Config(format!("invalid weight {w}")));
    }
    SortedSample::from_records(records).curve(|i| weights[i], None)
}

/// Arm-specific survival at a horizon and their difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PfsDifference {
    pub horizon: f64,
    /// Intervention arm.
    pub s1: f64,
    /// Comparator arm.
    pub s0: f64,
    /// `s1 - s0`; positive favours the intervention.
    pub difference: f64,
}

impl PfsDifference {
    pub fn new(horizon: f64, s1: f64, s0: f64) -> Self {
        PfsDifference {
            horizon,
            s1,
            s0,
            difference: s1 - s0,
        }
    }
}

/// Survival difference between arms for a presorted sample, restricting
/// each arm through `weight`.
pub fn arm_difference(
    sample: &SortedSample,
    arms: &[Arm],
    weight: impl Fn(usize) -> f64,
    horizon: f64,
) -> Result<PfsDifference> {
    let per_arm = |arm: Arm| {
        sample
            .survival_at(|i| if arms[i] == arm { weight(i) } else { 0.0 }, horizon)
            .map_err(|e| match e {
                Error::DegenerateCohort(_) => Error::DegenerateCohort(format!(
                    "arm {} has no subject with positive weight",
                    arm.indicator()
                )),
                other => other,
            })
    };
    let s1 = per_arm(Arm::Intervention)?;
    let s0 = per_arm(Arm::Comparator)?;
    Ok(PfsDifference::new(horizon, s1, s0))
}

/// Difference over arbitrary records and weights.
pub fn pfs_difference(
    records: &[SubjectRecord],
    weights: &[f64],
    horizon: f64,
) -> Result<PfsDifference> {
    if records.len() != weights.len() {
        return Err(Error::Config("one weight per record required".into()));
    }
    let sample = SortedSample::from_records(records);
    let arms: Vec<Arm> = records.iter().map(|r| r.arm).collect();
    arm_difference(&sample, &arms, |i| weights[i], horizon)
}

/// Difference over a whole weighted cohort (members and weighted non-members).
pub fn pfs_difference_at(cohort: &WeightedCohort<'_>, horizon: f64) -> Result<PfsDifference> {
    pfs_difference(cohort.dataset().records(), cohort.weights(), horizon)
}
