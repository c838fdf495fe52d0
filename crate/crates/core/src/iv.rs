//! Instrumental-variable estimation with randomly assigned anchors as
//! instruments.
//!
//! Second-stage standard errors use residuals of the outcome against the
//! observed belief (not the first-stage prediction), i.e.
//! `σ̂² = Σ(Y − Xβ̂)²/(n − k)` and `Var(β̂) = σ̂²(X̂ᵀX̂)⁻¹`.

use serde::{Deserialize, Serialize};

use crate::datamodel::{AnchorCondition, ExperimentDataset, ParticipantRecord};
use crate::error::{Error, Result};
use crate::linreg::{build_terms, f_test_nested, ols_fit, DesignMatrix, FTest, RegressionFit, Term};

/// Name of the endogenous regressor in fitted models.
pub const BELIEF: &str = "belief";

/// First-stage F threshold for the weak-instrument gate.
pub const WEAK_INSTRUMENT_F: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentScheme {
    /// One dummy, 1 = high anchor; no-anchor rows are dropped.
    BinaryHighLow,
    /// One dummy per condition except the lowest anchor (the reference).
    DummiesWithReference,
    /// The anchor value itself; no-anchor rows are dropped.
    Continuous,
}

impl InstrumentScheme {
    /// Continuous for multivalued grids, dummies when a no-anchor arm exists,
    /// otherwise binary.
    pub fn default_for(ds: &ExperimentDataset) -> Self {
        if ds.anchor_values().len() > 2 {
            Self::Continuous
        } else if ds.has_no_anchor() {
            Self::DummiesWithReference
        } else {
            Self::BinaryHighLow
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Level {
    Anchor(f64),
    NoAnchor,
}

/// Instrument columns derived from the anchor conditions present in a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentCoding {
    pub scheme: InstrumentScheme,
    pub reference: String,
    pub columns: Vec<String>,
    #[serde(skip)]
    levels: Vec<Level>,
}

impl InstrumentCoding {
    pub fn build(scheme: InstrumentScheme, ds: &ExperimentDataset) -> Result<Self> {
        let anchors = ds.anchor_values();
        match scheme {
            InstrumentScheme::BinaryHighLow => {
                if anchors.len() != 2 {
                    return Err(Error::Coding(format!(
                        "binary coding needs exactly two anchor values, found {}",
                        anchors.len()
                    )));
                }
                Ok(Self {
                    scheme,
                    reference: "low".into(),
                    columns: vec!["high".into()],
                    levels: vec![Level::Anchor(anchors[1])],
                })
            }
            InstrumentScheme::DummiesWithReference => {
                let mut levels: Vec<Level> = anchors.iter().map(|&a| Level::Anchor(a)).collect();
                if ds.has_no_anchor() {
                    levels.push(Level::NoAnchor);
                }
                if levels.len() < 2 || anchors.is_empty() {
                    return Err(Error::Coding("dummy coding needs at least two conditions".into()));
                }
                let two = anchors.len() == 2;
                let name = |l: &Level| match l {
                    Level::NoAnchor => "none".to_string(),
                    Level::Anchor(_) if two => "high".to_string(),
                    Level::Anchor(v) => format!("anchor={v}"),
                };
                let reference = if two { "low".to_string() } else { format!("anchor={}", anchors[0]) };
                let levels: Vec<Level> = levels.into_iter().skip(1).collect();
                Ok(Self { scheme, reference, columns: levels.iter().map(name).collect(), levels })
            }
            InstrumentScheme::Continuous => {
                if anchors.len() < 2 {
                    return Err(Error::Coding("continuous coding needs at least two anchor values".into()));
                }
                Ok(Self { scheme, reference: String::new(), columns: vec!["anchor".into()], levels: vec![] })
            }
        }
    }

    /// Whether a record takes part in analyses under this coding.
    pub fn includes(&self, r: &ParticipantRecord) -> bool {
        match self.scheme {
            InstrumentScheme::DummiesWithReference => true,
            _ => r.condition.is_anchored(),
        }
    }

    fn row_value(&self, col: usize, r: &ParticipantRecord) -> f64 {
        match self.scheme {
            InstrumentScheme::Continuous => r.condition.value().unwrap_or(f64::NAN),
            _ => {
                let hit = match (self.levels[col], r.condition) {
                    (Level::NoAnchor, AnchorCondition::NoAnchor) => true,
                    (Level::Anchor(a), AnchorCondition::Anchor(v)) => a == v,
                    _ => false,
                };
                f64::from(u8::from(hit))
            }
        }
    }

    /// Instrument columns for the given records.
    pub fn columns_for(&self, records: &[ParticipantRecord]) -> Vec<(String, Vec<f64>)> {
        self.columns
            .iter()
            .enumerate()
            .map(|(c, name)| (name.clone(), records.iter().map(|r| self.row_value(c, r)).collect()))
            .collect()
    }
}

/// Second-stage estimates from [`two_sls_design`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvEstimate {
    pub first_stage: RegressionFit,
    pub first_stage_f: FTest,
    pub terms: Vec<Term>,
    pub rss: f64,
    pub df_resid: usize,
    pub n: usize,
}

impl IvEstimate {
    pub fn belief(&self) -> &Term {
        self.terms.iter().find(|t| t.name == BELIEF).expect("belief term always present")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvFit {
    pub outcome: String,
    pub coding: InstrumentCoding,
    pub first_stage: RegressionFit,
    pub first_stage_f: f64,
    pub first_stage_p: f64,
    pub gate_passed: bool,
    pub second_stage: Vec<Term>,
    pub n: usize,
}

impl IvFit {
    pub fn belief(&self) -> &Term {
        self.second_stage.iter().find(|t| t.name == BELIEF).expect("belief term always present")
    }
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Two-stage least squares on raw columns.
///
/// Stage 1 regresses `belief` on a constant, the instruments and the
/// covariates; stage 2 regresses `y` on a constant, the predicted belief and
/// the covariates.
pub fn two_sls_design(
    y: &[f64],
    belief: &[f64],
    instruments: &[(String, Vec<f64>)],
    covariates: &[(String, Vec<f64>)],
) -> Result<IvEstimate> {
    let n = y.len();
    if instruments.is_empty() {
        return Err(Error::Coding("no instrument columns".into()));
    }
    if let Some((name, _)) = instruments.iter().find(|(_, v)| is_constant(v)) {
        return Err(Error::Coding(format!("instrument column `{name}` is constant")));
    }
    let k2 = 2 + covariates.len();
    if n <= instruments.len() + covariates.len() + 2 {
        return Err(Error::InsufficientData { n, k: instruments.len() + covariates.len() + 2 });
    }

    let mut restricted = DesignMatrix::with_intercept(n);
    for (name, col) in covariates {
        restricted.push(name.clone(), col.clone())?;
    }
    let mut full = restricted.clone();
    for (name, col) in instruments {
        full.push(name.clone(), col.clone())?;
    }
    let first_stage = ols_fit(&full, belief).map_err(|e| match e {
        Error::SingularDesign(col) => Error::NoFirstStage(format!("first stage is rank-deficient at `{col}`")),
        other => other,
    })?;
    let restricted_fit = ols_fit(&restricted, belief)?;
    let first_stage_f = if first_stage.rss == 0.0 {
        // beliefs fully determined by the design
        FTest { f: f64::INFINITY, p: 0.0, df_num: instruments.len(), df_den: first_stage.df_resid }
    } else {
        f_test_nested(&first_stage, &restricted_fit, instruments.len())?
    };

    let mut predicted = DesignMatrix::with_intercept(n);
    predicted.push(BELIEF, first_stage.fitted.clone())?;
    for (name, col) in covariates {
        predicted.push(name.clone(), col.clone())?;
    }
    let stage2 = ols_fit(&predicted, y).map_err(|e| match e {
        Error::SingularDesign(_) => Error::NoFirstStage("predicted belief carries no instrument variation".into()),
        other => other,
    })?;

    let structural = predicted.replace(BELIEF, belief.to_vec())?;
    let beta = stage2.coefficients();
    let fitted = structural.mul_vec(&beta);
    let rss: f64 = y.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum();
    let df_resid = n - k2;
    let s2 = rss / df_resid as f64;
    let vcov: Vec<Vec<f64>> = stage2.xtx_inv.iter().map(|row| row.iter().map(|v| v * s2).collect()).collect();
    let names: Vec<String> = predicted.names().to_vec();
    let terms = build_terms(&names, &beta, &vcov, df_resid)?;

    Ok(IvEstimate { first_stage, first_stage_f, terms, rss, df_resid, n })
}

fn covariate_columns(records: &[ParticipantRecord], names: &[String]) -> Vec<(String, Vec<f64>)> {
    names.iter().map(|n| (n.clone(), records.iter().map(|r| r.covariates[n]).collect())).collect()
}

/// Analysis sample for `outcome`: rows with the outcome and every covariate.
fn outcome_sample(ds: &ExperimentDataset, outcome: &str, covariates: &[String]) -> Result<ExperimentDataset> {
    Ok(ds.with_outcome(outcome)?.with_covariates(covariates))
}

/// First-stage regression of belief on the instruments (plus covariates).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirstStage {
    pub coding: InstrumentCoding,
    pub fit: RegressionFit,
    pub f_test: FTest,
    pub gate: GateVerdict,
    pub n: usize,
}

pub fn first_stage(ds: &ExperimentDataset, scheme: InstrumentScheme, covariates: &[String]) -> Result<FirstStage> {
    let sample = ds.with_covariates(covariates);
    let coding = InstrumentCoding::build(scheme, &sample)?;
    let records: Vec<ParticipantRecord> = sample.records.into_iter().filter(|r| coding.includes(r)).collect();
    let n = records.len();
    let k = coding.columns.len() + covariates.len() + 1;
    if n <= k {
        return Err(Error::InsufficientData { n, k });
    }
    let mut restricted = DesignMatrix::with_intercept(n);
    for (name, col) in covariate_columns(&records, covariates) {
        restricted.push(name, col)?;
    }
    let mut full = restricted.clone();
    for (name, col) in coding.columns_for(&records) {
        full.push(name, col)?;
    }
    let belief: Vec<f64> = records.iter().map(|r| r.belief).collect();
    let fit = ols_fit(&full, &belief).map_err(|e| match e {
        Error::SingularDesign(col) => Error::NoFirstStage(format!("first stage is rank-deficient at `{col}`")),
        other => other,
    })?;
    let f_test = if fit.rss == 0.0 {
        FTest { f: f64::INFINITY, p: 0.0, df_num: coding.columns.len(), df_den: fit.df_resid }
    } else {
        f_test_nested(&fit, &ols_fit(&restricted, &belief)?, coding.columns.len())?
    };
    Ok(FirstStage { gate: weak_instrument_gate(f_test.f), coding, fit, f_test, n })
}

/// 2SLS of `outcome` on the dataset's belief, instrumented by anchor conditions.
pub fn two_sls(
    ds: &ExperimentDataset,
    outcome: &str,
    scheme: InstrumentScheme,
    covariates: &[String],
) -> Result<IvFit> {
    let sample = outcome_sample(ds, outcome, covariates)?;
    let coding = InstrumentCoding::build(scheme, &sample)?;
    let records: Vec<ParticipantRecord> = sample.records.into_iter().filter(|r| coding.includes(r)).collect();
    let y: Vec<f64> = records.iter().map(|r| r.outcomes[outcome]).collect();
    let belief: Vec<f64> = records.iter().map(|r| r.belief).collect();
    let est = two_sls_design(&y, &belief, &coding.columns_for(&records), &covariate_columns(&records, covariates))?;
    Ok(IvFit {
        outcome: outcome.to_string(),
        coding,
        gate_passed: weak_instrument_gate(est.first_stage_f.f).passed(),
        first_stage_f: est.first_stage_f.f,
        first_stage_p: est.first_stage_f.p,
        first_stage: est.first_stage,
        second_stage: est.terms,
        n: est.n,
    })
}

/// OLS of `outcome` on belief (plus covariates), over the same rows 2SLS would use
/// when no instrument filtering applies.
pub fn ols_on_belief(ds: &ExperimentDataset, outcome: &str, covariates: &[String]) -> Result<RegressionFit> {
    let sample = outcome_sample(ds, outcome, covariates)?;
    let n = sample.len();
    let mut x = DesignMatrix::with_intercept(n);
    x.push(BELIEF, sample.beliefs())?;
    for (name, col) in covariate_columns(&sample.records, covariates) {
        x.push(name, col)?;
    }
    ols_fit(&x, &sample.outcome_values(outcome))
}

struct BinaryGroups<'a> {
    low: Vec<&'a ParticipantRecord>,
    high: Vec<&'a ParticipantRecord>,
    low_anchor: f64,
    high_anchor: f64,
}

fn binary_groups(ds: &ExperimentDataset) -> Result<BinaryGroups<'_>> {
    let anchors = ds.anchor_values();
    match anchors.len() {
        0 => return Err(Error::Grouping("no anchored records".into())),
        1 => return Err(Error::Grouping(format!("only one anchor group (anchor {}) present", anchors[0]))),
        2 => {}
        k => return Err(Error::Grouping(format!("expected two anchor groups, found {k}"))),
    }
    let (lo, hi) = (anchors[0], anchors[1]);
    let low = ds.records.iter().filter(|r| r.condition.value() == Some(lo)).collect();
    let high = ds.records.iter().filter(|r| r.condition.value() == Some(hi)).collect();
    Ok(BinaryGroups { low, high, low_anchor: lo, high_anchor: hi })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    s / c as f64
}

/// Wald estimator `(Ȳ_high − Ȳ_low) / (b̄_high − b̄_low)`.
pub fn wald_estimate(ds: &ExperimentDataset, outcome: &str) -> Result<f64> {
    let sample = ds.with_outcome(outcome)?;
    let g = binary_groups(&sample)?;
    let db = mean(g.high.iter().map(|r| r.belief)) - mean(g.low.iter().map(|r| r.belief));
    if db.abs() <= 1e-12 {
        return Err(Error::ZeroFirstStage(db));
    }
    let dy = mean(g.high.iter().map(|r| r.outcomes[outcome])) - mean(g.low.iter().map(|r| r.outcomes[outcome]));
    Ok(dy / db)
}

/// Difference in mean belief between the high- and low-anchor groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchoringEffect {
    pub effect: f64,
    pub se: f64,
    pub p: f64,
    pub f: f64,
    pub n_low: usize,
    pub n_high: usize,
    pub low_anchor: f64,
    pub high_anchor: f64,
}

/// Anchoring effect on the dataset's belief; no-anchor rows are ignored.
pub fn anchoring_effect(ds: &ExperimentDataset) -> Result<AnchoringEffect> {
    let g = binary_groups(ds)?;
    let n = g.low.len() + g.high.len();
    let mut x = DesignMatrix::with_intercept(n);
    let dummy: Vec<f64> = g.low.iter().map(|_| 0.0).chain(g.high.iter().map(|_| 1.0)).collect();
    x.push("high", dummy)?;
    let y: Vec<f64> = g.low.iter().chain(&g.high).map(|r| r.belief).collect();
    let fit = ols_fit(&x, &y)?;
    let term = fit.term("high").expect("dummy column present");
    let effect = mean(g.high.iter().map(|r| r.belief)) - mean(g.low.iter().map(|r| r.belief));
    Ok(AnchoringEffect {
        effect,
        se: term.std_error,
        p: term.p_value,
        f: term.t_value * term.t_value,
        n_low: g.low.len(),
        n_high: g.high.len(),
        low_anchor: g.low_anchor,
        high_anchor: g.high_anchor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateVerdict {
    Pass,
    Fail,
}

impl GateVerdict {
    pub fn passed(self) -> bool {
        self == Self::Pass
    }
}

/// Passes iff the first-stage F strictly exceeds 10.
pub fn weak_instrument_gate(f: f64) -> GateVerdict {
    if f > WEAK_INSTRUMENT_F {
        GateVerdict::Pass
    } else {
        GateVerdict::Fail
    }
}

/// IV cell of a results table: estimated, or suppressed by the gate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum IvBlock {
    Estimated { estimate: f64, std_error: f64, p_value: f64 },
    NotCalculated { reason: String },
}

/// One outcome column of a Table 2/3-style results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsColumn {
    pub outcome: String,
    pub ols: Term,
    pub iv: IvBlock,
    pub coding: InstrumentScheme,
    pub first_stage_f: f64,
    pub anchoring_effect: Option<AnchoringEffect>,
    pub n: usize,
    pub outcome_mean: f64,
    pub outcome_sd: f64,
}

/// OLS row, gated IV row, anchoring effect and descriptives for one outcome.
pub fn results_column(
    ds: &ExperimentDataset,
    outcome: &str,
    scheme: InstrumentScheme,
    covariates: &[String],
) -> Result<ResultsColumn> {
    let ols = ols_on_belief(ds, outcome, covariates)?;
    let ols_term = ols.term(BELIEF).cloned().expect("belief term present");
    let iv = two_sls(ds, outcome, scheme, covariates)?;
    let block = if iv.gate_passed {
        let t = iv.belief();
        IvBlock::Estimated { estimate: t.estimate, std_error: t.std_error, p_value: t.p_value }
    } else {
        IvBlock::NotCalculated { reason: format!("not calculated (F = {:.2} <= 10)", iv.first_stage_f) }
    };
    let sample = ds.with_outcome(outcome)?;
    let values = sample.outcome_values(outcome);
    let m = mean(values.iter().copied());
    let sd = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)).sqrt();
    Ok(ResultsColumn {
        outcome: outcome.to_string(),
        ols: ols_term,
        iv: block,
        coding: scheme,
        first_stage_f: iv.first_stage_f,
        anchoring_effect: anchoring_effect(&sample).ok(),
        n: sample.len(),
        outcome_mean: m,
        outcome_sd: sd,
    })
}
