//! Participant records, CSV ingestion and the dataset-level transforms shared
//! by every analysis.
//!
//! Datasets are immutable values: every operation returns a new dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cell values that mark a no-anchor condition or a missing outcome.
const MISSING_SENTINELS: [&str; 3] = ["", "none", "na"];

fn is_missing(cell: &str) -> bool {
    let c = cell.trim().to_ascii_lowercase();
    MISSING_SENTINELS.contains(&c.as_str())
}

/// Anchor shown to a participant before the belief was elicited.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum AnchorCondition {
    NoAnchor,
    Anchor(f64),
}

impl AnchorCondition {
    pub fn anchor(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Domain(format!("anchor value must be finite and >= 0, got {value}")));
        }
        Ok(Self::Anchor(value))
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Self::NoAnchor => None,
            Self::Anchor(v) => Some(*v),
        }
    }

    pub fn is_anchored(&self) -> bool {
        matches!(self, Self::Anchor(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub id: String,
    pub condition: AnchorCondition,
    /// Posttreatment belief.
    pub belief: f64,
    pub outcomes: BTreeMap<String, f64>,
    pub covariates: BTreeMap<String, f64>,
    pub wave: u32,
    /// Interview date as days since an arbitrary epoch.
    pub interview_day: Option<i64>,
}

impl ParticipantRecord {
    pub fn new(id: impl Into<String>, condition: AnchorCondition, belief: f64) -> Self {
        Self {
            id: id.into(),
            condition,
            belief,
            outcomes: BTreeMap::new(),
            covariates: BTreeMap::new(),
            wave: 1,
            interview_day: None,
        }
    }

    pub fn with_outcome(mut self, name: impl Into<String>, value: f64) -> Self {
        self.outcomes.insert(name.into(), value);
        self
    }

    pub fn with_covariate(mut self, name: impl Into<String>, value: f64) -> Self {
        self.covariates.insert(name.into(), value);
        self
    }

    pub fn with_day(mut self, day: i64) -> Self {
        self.interview_day = Some(day);
        self
    }

    pub fn with_wave(mut self, wave: u32) -> Self {
        self.wave = wave;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BeliefTransform {
    #[default]
    Identity,
    Log10Plus1,
}

impl BeliefTransform {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Self::Identity => v,
            Self::Log10Plus1 => v.ln_1p() / std::f64::consts::LN_10,
        }
    }

    pub fn invert(self, v: f64) -> f64 {
        match self {
            Self::Identity => v,
            Self::Log10Plus1 => (v * std::f64::consts::LN_10).exp_m1(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum OutcomeKind {
    Continuous,
    Ordinal { levels: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub name: String,
    pub kind: OutcomeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub reason: String,
}

/// Column mapping for CSV ingestion. Read from a JSON schema file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_col: Option<String>,
    /// Anchor value column; empty, `none` or `NA` cells mean no anchor.
    /// When absent every record is a no-anchor record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_col: Option<String>,
    pub belief_col: String,
    #[serde(default)]
    pub outcome_cols: Vec<OutcomeColumn>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariate_cols: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wave_col: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day_col: Option<String>,
}

/// Outcome entry in a schema: a bare column name (continuous) or a typed object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutcomeColumn {
    Name(String),
    Typed {
        name: String,
        #[serde(flatten)]
        kind: OutcomeKind,
    },
}

impl OutcomeColumn {
    pub fn spec(&self) -> OutcomeSpec {
        match self {
            Self::Name(name) => OutcomeSpec { name: name.clone(), kind: OutcomeKind::Continuous },
            Self::Typed { name, kind } => OutcomeSpec { name: name.clone(), kind: *kind },
        }
    }
}

impl CsvSchema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentDataset {
    pub records: Vec<ParticipantRecord>,
    pub belief_transform: BeliefTransform,
    pub exclusion_report: Vec<Exclusion>,
    pub outcomes: Vec<OutcomeSpec>,
}

impl ExperimentDataset {
    /// Builds a dataset, checking that every record has only declared outcomes.
    pub fn new(records: Vec<ParticipantRecord>, outcomes: Vec<OutcomeSpec>) -> Result<Self> {
        let names: BTreeSet<&str> = outcomes.iter().map(|o| o.name.as_str()).collect();
        for r in &records {
            if !r.belief.is_finite() {
                return Err(Error::Domain(format!("record {}: belief is not finite", r.id)));
            }
            for (name, v) in &r.outcomes {
                if !names.contains(name.as_str()) {
                    return Err(Error::Schema(format!("record {} has undeclared outcome `{name}`", r.id)));
                }
                if !v.is_finite() {
                    return Err(Error::Domain(format!("record {}: outcome `{name}` is not finite", r.id)));
                }
            }
            if r.wave == 0 {
                return Err(Error::Domain(format!("record {}: wave must be >= 1", r.id)));
            }
        }
        Ok(Self { records, outcomes, ..Default::default() })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn outcome_spec(&self, name: &str) -> Option<&OutcomeSpec> {
        self.outcomes.iter().find(|o| o.name == name)
    }

    /// Records that carry a value for `outcome` (row-wise deletion).
    pub fn with_outcome(&self, outcome: &str) -> Result<Self> {
        if self.outcome_spec(outcome).is_none() {
            return Err(Error::MissingColumn(outcome.to_string()));
        }
        Ok(self.filter(|r| r.outcomes.contains_key(outcome)))
    }

    /// Records that carry every named covariate.
    pub fn with_covariates(&self, names: &[String]) -> Self {
        self.filter(|r| names.iter().all(|n| r.covariates.contains_key(n)))
    }

    pub fn filter(&self, keep: impl Fn(&ParticipantRecord) -> bool) -> Self {
        Self {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            belief_transform: self.belief_transform,
            exclusion_report: self.exclusion_report.clone(),
            outcomes: self.outcomes.clone(),
        }
    }

    /// Records of one survey wave.
    pub fn wave(&self, wave: u32) -> Self {
        self.filter(|r| r.wave == wave)
    }

    /// Distinct anchor values, ascending.
    pub fn anchor_values(&self) -> Vec<f64> {
        let mut values: Vec<f64> = self.records.iter().filter_map(|r| r.condition.value()).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        values
    }

    pub fn has_no_anchor(&self) -> bool {
        self.records.iter().any(|r| !r.condition.is_anchored())
    }

    /// Beliefs of participants who saw no anchor.
    pub fn baseline_beliefs(&self) -> Vec<f64> {
        self.records.iter().filter(|r| !r.condition.is_anchored()).map(|r| r.belief).collect()
    }

    pub fn beliefs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.belief).collect()
    }

    pub fn outcome_values(&self, outcome: &str) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.outcomes.get(outcome).copied()).collect()
    }

    /// Layout used by [`write_csv`].
    pub fn standard_schema(&self) -> CsvSchema {
        let covariates: BTreeSet<String> = self.records.iter().flat_map(|r| r.covariates.keys().cloned()).collect();
        CsvSchema {
            id_col: Some("id".into()),
            condition_col: Some("anchor".into()),
            belief_col: "belief".into(),
            outcome_cols: self
                .outcomes
                .iter()
                .map(|o| match o.kind {
                    OutcomeKind::Continuous => OutcomeColumn::Name(o.name.clone()),
                    kind => OutcomeColumn::Typed { name: o.name.clone(), kind },
                })
                .collect(),
            covariate_cols: covariates.into_iter().collect(),
            wave_col: Some("wave".into()),
            day_col: Some("day".into()),
        }
    }
}

/// Loads a CSV file under the given column mapping.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<ExperimentDataset> {
    load_csv_reader(File::open(path)?, schema)
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
        row,
        column: column.to_string(),
        value: cell.to_string(),
    })
}

pub fn load_csv_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<ExperimentDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();

    let id_idx = schema.id_col.as_deref().map(|c| column_index(&headers, c)).transpose()?;
    let cond_idx = schema.condition_col.as_deref().map(|c| column_index(&headers, c)).transpose()?;
    let belief_idx = column_index(&headers, &schema.belief_col)?;
    let outcome_specs: Vec<OutcomeSpec> = schema.outcome_cols.iter().map(OutcomeColumn::spec).collect();
    let outcome_idx: Vec<usize> =
        outcome_specs.iter().map(|o| column_index(&headers, &o.name)).collect::<Result<_>>()?;
    let cov_idx: Vec<usize> = schema.covariate_cols.iter().map(|c| column_index(&headers, c)).collect::<Result<_>>()?;
    let wave_idx = schema.wave_col.as_deref().map(|c| column_index(&headers, c)).transpose()?;
    let day_idx = schema.day_col.as_deref().map(|c| column_index(&headers, c)).transpose()?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        // 1-based data row number; the header is row 0
        let rownum = i + 1;
        let cell = |idx: usize| row.get(idx).unwrap_or("");

        let id = match id_idx {
            Some(idx) => cell(idx).trim().to_string(),
            None => format!("row{rownum}"),
        };
        let condition = match cond_idx {
            Some(idx) if !is_missing(cell(idx)) => {
                let column = schema.condition_col.as_deref().unwrap_or_default();
                let v = parse_number(cell(idx), rownum, column)?;
                AnchorCondition::anchor(v).map_err(|_| Error::Parse {
                    row: rownum,
                    column: column.to_string(),
                    value: cell(idx).to_string(),
                })?
            }
            _ => AnchorCondition::NoAnchor,
        };
        let belief = parse_number(cell(belief_idx), rownum, &schema.belief_col)?;

        let mut outcomes = BTreeMap::new();
        for (spec, &idx) in outcome_specs.iter().zip(&outcome_idx) {
            if !is_missing(cell(idx)) {
                outcomes.insert(spec.name.clone(), parse_number(cell(idx), rownum, &spec.name)?);
            }
        }
        let mut covariates = BTreeMap::new();
        for (name, &idx) in schema.covariate_cols.iter().zip(&cov_idx) {
            if !is_missing(cell(idx)) {
                covariates.insert(name.clone(), parse_number(cell(idx), rownum, name)?);
            }
        }
        let wave = match wave_idx {
            Some(idx) => {
                let column = schema.wave_col.as_deref().unwrap_or_default();
                cell(idx).trim().parse::<u32>().ok().filter(|w| *w >= 1).ok_or_else(|| Error::Parse {
                    row: rownum,
                    column: column.to_string(),
                    value: cell(idx).to_string(),
                })?
            }
            None => 1,
        };
        let interview_day = match day_idx {
            Some(idx) if !is_missing(cell(idx)) => {
                let column = schema.day_col.as_deref().unwrap_or_default();
                Some(cell(idx).trim().parse::<i64>().map_err(|_| Error::Parse {
                    row: rownum,
                    column: column.to_string(),
                    value: cell(idx).to_string(),
                })?)
            }
            _ => None,
        };

        records.push(ParticipantRecord { id, condition, belief, outcomes, covariates, wave, interview_day });
    }
    ExperimentDataset::new(records, outcome_specs)
}

/// Writes the dataset in the layout described by [`ExperimentDataset::standard_schema`].
pub fn write_csv<W: Write>(ds: &ExperimentDataset, writer: W) -> Result<()> {
    let schema = ds.standard_schema();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "anchor".to_string(), "belief".to_string()];
    header.extend(ds.outcomes.iter().map(|o| o.name.clone()));
    header.extend(schema.covariate_cols.iter().cloned());
    header.push("wave".into());
    header.push("day".into());
    w.write_record(&header)?;

    for r in &ds.records {
        let mut row =
            vec![r.id.clone(), r.condition.value().map(|v| v.to_string()).unwrap_or_default(), r.belief.to_string()];
        row.extend(ds.outcomes.iter().map(|o| r.outcomes.get(&o.name).map(|v| v.to_string()).unwrap_or_default()));
        row.extend(
            schema.covariate_cols.iter().map(|c| r.covariates.get(c).map(|v| v.to_string()).unwrap_or_default()),
        );
        row.push(r.wave.to_string());
        row.push(r.interview_day.map(|d| d.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &ExperimentDataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(ds, File::create(path)?)
}

/// Writes an exclusion report as `id,reason` CSV.
pub fn write_exclusions<W: Write>(exclusions: &[Exclusion], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "reason"])?;
    for e in exclusions {
        w.write_record([e.id.as_str(), e.reason.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Moves records whose belief exceeds `threshold` into the exclusion report.
pub fn apply_exclusions(ds: &ExperimentDataset, threshold: f64) -> Result<ExperimentDataset> {
    if threshold.is_nan() {
        return Err(Error::Domain("exclusion threshold is NaN".into()));
    }
    let mut out = ds.clone();
    let (kept, dropped): (Vec<_>, Vec<_>) = ds.records.iter().cloned().partition(|r| r.belief <= threshold);
    out.records = kept;
    out.exclusion_report.extend(
        dropped
            .into_iter()
            .map(|r| Exclusion { reason: format!("belief {} exceeds {}", r.belief, threshold), id: r.id }),
    );
    Ok(out)
}

/// Applies a belief transform to beliefs and anchor values alike.
///
/// Applying `Log10Plus1` twice transforms twice; the dataset only records the
/// most recent transform.
pub fn transform_belief(ds: &ExperimentDataset, t: BeliefTransform) -> Result<ExperimentDataset> {
    if t == BeliefTransform::Identity {
        return Ok(ds.clone());
    }
    if let Some(r) = ds.records.iter().find(|r| r.belief < 0.0) {
        return Err(Error::Domain(format!("record {}: negative belief {} cannot be log-transformed", r.id, r.belief)));
    }
    let mut out = ds.clone();
    for r in &mut out.records {
        r.belief = t.apply(r.belief);
        if let AnchorCondition::Anchor(v) = r.condition {
            r.condition = AnchorCondition::Anchor(t.apply(v));
        }
    }
    out.belief_transform = t;
    Ok(out)
}

/// Splits ordinal levels at the level holding the median.
///
/// A level `c` covers the cumulative proportions `[P(x < c), P(x ≤ c)]`; the
/// cutoff is the level whose range contains (or lies nearest to) one half,
/// considering every level but the highest, with ties going to the lower
/// level. `binary[i] = 1` iff `values[i] > cutoff`.
pub fn dichotomize_ordinal(values: &[i64]) -> Result<(i64, Vec<u8>)> {
    let first = *values.first().ok_or_else(|| Error::InvalidInput("no ordinal values".into()))?;
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::DegenerateScale(first));
    }
    let n = values.len() as f64;
    let mut below = 0usize;
    let mut best: Option<(i64, f64)> = None;
    for (&level, &count) in counts.iter().take(counts.len() - 1) {
        let lo = below as f64 / n;
        let hi = (below + count) as f64 / n;
        let dist = if lo <= 0.5 && 0.5 <= hi { 0.0 } else { (lo - 0.5).abs().min((hi - 0.5).abs()) };
        if best.map(|(_, d)| dist < d).unwrap_or(true) {
            best = Some((level, dist));
        }
        below += count;
    }
    let cutoff = best.map(|(c, _)| c).unwrap_or(first);
    Ok((cutoff, values.iter().map(|&v| u8::from(v > cutoff)).collect()))
}
