//! Subject-level data model, delimited-text loading and complete-case filtering.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment arm of a two-arm trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Comparator,
    Intervention,
}

impl Arm {
    pub fn from_indicator(x: bool) -> Self {
        if x {
            Arm::Intervention
        } else {
            Arm::Comparator
        }
    }

    pub fn indicator(self) -> u8 {
        match self {
            Arm::Comparator => 0,
            Arm::Intervention => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateKind {
    Binary,
    Categorical { levels: Vec<String> },
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
}

impl Covariate {
    pub fn binary(name: &str) -> Self {
        Covariate {
            name: name.to_string(),
            kind: CovariateKind::Binary,
        }
    }

    pub fn continuous(name: &str) -> Self {
        Covariate {
            name: name.to_string(),
            kind: CovariateKind::Continuous,
        }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        Covariate {
            name: name.to_string(),
            kind: CovariateKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
            },
        }
    }

    /// Number of design-matrix columns this covariate contributes.
    pub fn arity(&self) -> usize {
        match &self.kind {
            CovariateKind::Categorical { levels } => levels.len() - 1,
            _ => 1,
        }
    }
}

/// Ordered covariate declarations. Categorical covariates are dummy coded
/// against their first declared level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct CovariateSpec {
    entries: Vec<Covariate>,
}

impl CovariateSpec {
    pub fn new(entries: Vec<Covariate>) -> Result<Self> {
        let mut names = HashSet::new();
        for c in &entries {
            if c.name.trim().is_empty() {
                return Err(Error::InvalidSpec("empty covariate name".into()));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate covariate `{}`", c.name)));
            }
            if let CovariateKind::Categorical { levels } = &c.kind {
                if levels.is_empty() {
                    return Err(Error::InvalidSpec(format!("`{}` has no levels", c.name)));
                }
                let mut seen = HashSet::new();
                for l in levels {
                    if !seen.insert(l.as_str()) {
                        return Err(Error::InvalidSpec(format!(
                            "`{}` declares level `{l}` twice",
                            c.name
                        )));
                    }
                }
            }
        }
        Ok(CovariateSpec { entries })
    }

    pub fn entries(&self) -> &[Covariate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|c| c.name == name)
    }

    /// Keeps only the named covariates, in declaration order.
    pub fn subset(&self, names: &[String]) -> Result<CovariateSpec> {
        for n in names {
            if self.position(n).is_none() {
                return Err(Error::Config(format!("unknown covariate `{n}`")));
            }
        }
        CovariateSpec::new(
            self.entries
                .iter()
                .filter(|c| names.contains(&c.name))
                .cloned()
                .collect(),
        )
    }
}

impl<'de> Deserialize<'de> for CovariateSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<Covariate>::deserialize(d)?;
        CovariateSpec::new(entries).map_err(serde::de::Error::custom)
    }
}

/// One trial participant.
///
/// Covariate values are stored numerically: binary as 0/1, continuous as
/// read, categorical as the index of the level in the declaration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub arm: Arm,
    /// Follow-up in days.
    pub time: f64,
    /// `true` when `time` is an event time, `false` when censored.
    pub event: bool,
    pub member: bool,
    pub covariates: Vec<f64>,
}

/// Complete-case trial data aligned to a [`CovariateSpec`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialDataset {
    spec: CovariateSpec,
    records: Vec<SubjectRecord>,
    dropped_incomplete: usize,
}

impl TrialDataset {
    pub fn new(
        spec: CovariateSpec,
        records: Vec<SubjectRecord>,
        dropped_incomplete: usize,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for r in &records {
            if r.covariates.len() != spec.len() {
                return Err(Error::InvalidDataset(format!(
                    "record `{}` has {} covariates, spec declares {}",
                    r.id,
                    r.covariates.len(),
                    spec.len()
                )));
            }
            if !(r.time.is_finite() && r.time >= 0.0) {
                return Err(Error::InvalidDataset(format!(
                    "record `{}` has invalid time {}",
                    r.id, r.time
                )));
            }
            for (c, &v) in spec.entries().iter().zip(&r.covariates) {
                let ok = match &c.kind {
                    CovariateKind::Binary => v == 0.0 || v == 1.0,
                    CovariateKind::Continuous => v.is_finite(),
                    CovariateKind::Categorical { levels } => {
                        v >= 0.0 && v.fract() == 0.0 && (v as usize) < levels.len()
                    }
                };
                if !ok {
                    return Err(Error::InvalidDataset(format!(
                        "record `{}` has invalid value {v} for `{}`",
                        r.id, c.name
                    )));
                }
            }
        }
        if !records.iter().any(|r| r.member) {
            return Err(Error::InvalidDataset("no members present".into()));
        }
        if records.iter().all(|r| r.member) {
            return Err(Error::InvalidDataset("no non-members present".into()));
        }
        for arm in [Arm::Comparator, Arm::Intervention] {
            if !records.iter().any(|r| r.arm == arm) {
                return Err(Error::InvalidDataset(format!(
                    "no records in arm {}",
                    arm.indicator()
                )));
            }
        }
        Ok(TrialDataset {
            spec,
            records,
            dropped_incomplete,
        })
    }

    pub fn spec(&self) -> &CovariateSpec {
        &self.spec
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dropped_incomplete(&self) -> usize {
        self.dropped_incomplete
    }

    pub fn member_count(&self) -> usize {
        self.records.iter().filter(|r| r.member).count()
    }

    pub fn nonmember_count(&self) -> usize {
        self.len() - self.member_count()
    }

    pub fn membership(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.member).collect()
    }

    /// Writes the dataset as CSV with logical column names. Reloading the
    /// output with [`ColumnMap::default`] reproduces the records exactly.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id", "arm", "time", "event", "member"];
        header.extend(self.spec.entries().iter().map(|c| c.name.as_str()));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.id.clone(),
                r.arm.indicator().to_string(),
                r.time.to_string(),
                u8::from(r.event).to_string(),
                u8::from(r.member).to_string(),
            ];
            for (c, &v) in self.spec.entries().iter().zip(&r.covariates) {
                row.push(match &c.kind {
                    CovariateKind::Categorical { levels } => levels[v as usize].clone(),
                    CovariateKind::Binary => (v as u8).to_string(),
                    CovariateKind::Continuous => v.to_string(),
                });
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// Physical column names for the logical fields.
///
/// When `member_level` is set, membership is `cell == member_level`;
/// otherwise the member column is parsed as a boolean.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub id: String,
    pub arm: String,
    pub time: String,
    pub event: String,
    pub member: String,
    pub member_level: Option<String>,
    /// Covariate name -> physical column; unmapped covariates use their own name.
    pub covariates: BTreeMap<String, String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            id: "id".into(),
            arm: "arm".into(),
            time: "time".into(),
            event: "event".into(),
            member: "member".into(),
            member_level: None,
            covariates: BTreeMap::new(),
        }
    }
}

impl ColumnMap {
    fn covariate_column<'a>(&'a self, name: &'a str) -> &'a str {
        self.covariates.get(name).map(String::as_str).unwrap_or(name)
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

fn parse_bool(cell: &str) -> Option<bool> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

pub fn load_dataset(
    path: impl AsRef<Path>,
    spec: &CovariateSpec,
    columns: &ColumnMap,
) -> Result<TrialDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    read_dataset(file, spec, columns)
}

pub fn read_dataset<R: Read>(
    input: R,
    spec: &CovariateSpec,
    columns: &ColumnMap,
) -> Result<TrialDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let id_col = find(&columns.id)?;
    let arm_col = find(&columns.arm)?;
    let time_col = find(&columns.time)?;
    let event_col = find(&columns.event)?;
    let member_col = find(&columns.member)?;
    let cov_cols = spec
        .entries()
        .iter()
        .map(|c| find(columns.covariate_column(&c.name)))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut dropped = 0usize;
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let cell = |i: usize| row.get(i).unwrap_or("");

        let required = [id_col, arm_col, time_col, event_col, member_col];
        if required.iter().chain(&cov_cols).any(|&i| is_missing(cell(i))) {
            dropped += 1;
            continue;
        }

        let parse_err = |col: &str, value: &str, reason: &str| Error::Parse {
            line,
            column: col.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        let bool_cell = |i: usize, col: &str| {
            parse_bool(cell(i)).ok_or_else(|| parse_err(col, cell(i), "expected 0/1/true/false"))
        };

        let arm = Arm::from_indicator(bool_cell(arm_col, &columns.arm)?);
        let time: f64 = cell(time_col)
            .trim()
            .parse()
            .map_err(|_| parse_err(&columns.time, cell(time_col), "expected a number"))?;
        if !(time.is_finite() && time >= 0.0) {
            return Err(parse_err(&columns.time, cell(time_col), "time must be finite and >= 0"));
        }
        let event = bool_cell(event_col, &columns.event)?;
        let member = match &columns.member_level {
            Some(level) => cell(member_col).trim() == level.trim(),
            None => bool_cell(member_col, &columns.member)?,
        };

        let mut covariates = Vec::with_capacity(spec.len());
        for (c, &i) in spec.entries().iter().zip(&cov_cols) {
            let col = columns.covariate_column(&c.name);
            let raw = cell(i).trim();
            let value = match &c.kind {
                CovariateKind::Binary => f64::from(u8::from(bool_cell(i, col)?)),
                CovariateKind::Continuous => {
                    let v: f64 = raw
                        .parse()
                        .map_err(|_| parse_err(col, raw, "expected a number"))?;
                    if !v.is_finite() {
                        return Err(parse_err(col, raw, "value must be finite"));
                    }
                    v
                }
                CovariateKind::Categorical { levels } => levels
                    .iter()
                    .position(|l| l == raw)
                    .ok_or_else(|| Error::UnknownLevel {
                        line,
                        column: col.to_string(),
                        value: raw.to_string(),
                    })? as f64,
            };
            covariates.push(value);
        }

        records.push(SubjectRecord {
            id: cell(id_col).trim().to_string(),
            arm,
            time,
            event,
            member,
            covariates,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    TrialDataset::new(spec.clone(), records, dropped)
}

/// Numeric design matrix with one label per column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub labels: Vec<String>,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Builds the main-effects design over every covariate in the dataset's spec.
pub fn encode_design_matrix(ds: &TrialDataset) -> DesignMatrix {
    let all: Vec<String> = ds.spec().entries().iter().map(|c| c.name.clone()).collect();
    encode_design_matrix_for(ds, &all).expect("spec covariates are always known")
}

/// Builds the design for a subset of covariates.
///
/// Column order: intercept, then reference-coded dummies for the categorical
/// covariates, then binary and continuous covariates as-is. Within each
/// group covariates keep their declaration order.
pub fn encode_design_matrix_for(ds: &TrialDataset, covariates: &[String]) -> Result<DesignMatrix> {
    let spec = ds.spec();
    let chosen = spec.subset(covariates)?;
    let positions: Vec<usize> = chosen
        .entries()
        .iter()
        .map(|c| spec.position(&c.name).expect("subset of spec"))
        .collect();

    // (source covariate index, Some(level) for a dummy column)
    let mut columns: Vec<(usize, Option<usize>)> = Vec::new();
    let mut labels = vec!["(Intercept)".to_string()];
    for (c, &pos) in chosen.entries().iter().zip(&positions) {
        if let CovariateKind::Categorical { levels } = &c.kind {
            for (li, l) in levels.iter().enumerate().skip(1) {
                columns.push((pos, Some(li)));
                labels.push(format!("{}={}", c.name, l));
            }
        }
    }
    for (c, &pos) in chosen.entries().iter().zip(&positions) {
        if !matches!(c.kind, CovariateKind::Categorical { .. }) {
            columns.push((pos, None));
            labels.push(c.name.clone());
        }
    }

    let n = ds.len();
    let matrix = DMatrix::from_fn(n, columns.len() + 1, |i, j| {
        if j == 0 {
            return 1.0;
        }
        let v = ds.records()[i].covariates[columns[j - 1].0];
        match columns[j - 1].1 {
            Some(level) => f64::from(u8::from(v as usize == level)),
            None => v,
        }
    });
    Ok(DesignMatrix { matrix, labels })
}
