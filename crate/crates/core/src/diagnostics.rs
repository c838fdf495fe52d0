//! Placebo (selectiveness) matrices, anchoring-effect decay across survey
//! waves, and manipulation checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ExperimentDataset, ParticipantRecord};
use crate::error::{Error, Result};
use crate::iv::{
    anchoring_effect, weak_instrument_gate, AnchoringEffect, GateVerdict, InstrumentCoding, InstrumentScheme,
};
use crate::linreg::{ols_fit, DesignMatrix};

pub const PLACEBO_ALPHA: f64 = 0.05;

/// Default lag bins in days.
pub const DEFAULT_BINS: [(i64, i64); 2] = [(5, 9), (10, 14)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboCell {
    pub coefficient: f64,
    pub se: f64,
    pub p: f64,
    /// The dummy belongs to a different experiment than the row's belief.
    pub placebo: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboRow {
    pub belief: String,
    pub cells: Vec<PlaceboCell>,
    pub n: usize,
    pub adj_r2: f64,
}

/// One regression per belief on every experiment's treatment dummies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<PlaceboRow>,
}

impl PlaceboMatrix {
    pub fn flagged_placebo_cells(&self) -> usize {
        self.rows.iter().flat_map(|r| &r.cells).filter(|c| c.placebo && c.flagged).count()
    }

    pub fn placebo_cells(&self) -> impl Iterator<Item = &PlaceboCell> {
        self.rows.iter().flat_map(|r| &r.cells).filter(|c| c.placebo)
    }

    pub fn to_table(&self) -> String {
        let width = self.columns.iter().map(String::len).max().unwrap_or(0).max(18);
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "belief");
        for c in &self.columns {
            let _ = write!(out, " {c:>width$}");
        }
        let _ = writeln!(out, " {:>6} {:>7}", "n", "adj.R2");
        for row in &self.rows {
            let _ = write!(out, "{:<16}", row.belief);
            for c in &row.cells {
                let cell = format!("{:.3}{} ({:.3})", c.coefficient, stars(c.p), c.se);
                let _ = write!(out, " {cell:>width$}");
            }
            let _ = writeln!(out, " {:>6} {:>7.3}", row.n, row.adj_r2);
        }
        out.push_str("Low-anchor conditions are the reference. * p<0.05, ** p<0.01, *** p<0.001.\n");
        out
    }
}

/// Significance stars at the 0.05, 0.01 and 0.001 levels.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < PLACEBO_ALPHA {
        "*"
    } else {
        ""
    }
}

/// Placebo matrix for experiments run on the same participants.
///
/// Each dataset holds one experiment: its anchor conditions and the belief it
/// targets. Records are joined by id.
pub fn placebo_matrix(experiments: &[(&str, &ExperimentDataset)]) -> Result<PlaceboMatrix> {
    if experiments.len() < 2 {
        return Err(Error::Alignment(format!(
            "placebo matrix needs at least two experiments, got {}",
            experiments.len()
        )));
    }
    let by_id: Vec<BTreeMap<&str, &ParticipantRecord>> = experiments
        .iter()
        .map(|(name, ds)| {
            let mut m = BTreeMap::new();
            for r in &ds.records {
                if m.insert(r.id.as_str(), r).is_some() {
                    return Err(Error::Alignment(format!("experiment `{name}` has duplicate id `{}`", r.id)));
                }
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let ids: Vec<&str> = by_id[0].keys().copied().collect();
    for (k, m) in by_id.iter().enumerate().skip(1) {
        if m.len() != ids.len() || !ids.iter().all(|id| m.contains_key(id)) {
            return Err(Error::Alignment(format!(
                "experiments `{}` and `{}` cover different participants",
                experiments[0].0, experiments[k].0
            )));
        }
    }

    let n = ids.len();
    let mut x = DesignMatrix::with_intercept(n);
    let mut owner = Vec::new();
    for (k, ((name, ds), m)) in experiments.iter().zip(&by_id).enumerate() {
        let coding = InstrumentCoding::build(InstrumentScheme::DummiesWithReference, ds)?;
        let records: Vec<ParticipantRecord> = ids.iter().map(|id| m[id].clone()).collect();
        for (col, values) in coding.columns_for(&records) {
            x.push(format!("{name}:{col}"), values)?;
            owner.push(k);
        }
    }
    let columns: Vec<String> = x.names()[1..].to_vec();

    let mut rows = Vec::with_capacity(experiments.len());
    for (k, ((name, _), m)) in experiments.iter().zip(&by_id).enumerate() {
        let y: Vec<f64> = ids.iter().map(|id| m[id].belief).collect();
        let fit = ols_fit(&x, &y)?;
        let cells = fit.terms[1..]
            .iter()
            .zip(&owner)
            .map(|(t, &o)| PlaceboCell {
                coefficient: t.estimate,
                se: t.std_error,
                p: t.p_value,
                placebo: o != k,
                flagged: o != k && t.p_value < PLACEBO_ALPHA,
            })
            .collect();
        rows.push(PlaceboRow { belief: name.to_string(), cells, n, adj_r2: fit.adj_r2 });
    }
    Ok(PlaceboMatrix { columns, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaggedEffect {
    pub lag_bin: (i64, i64),
    pub mean_lag: f64,
    pub effect: f64,
    pub se: f64,
    pub f: f64,
    pub p: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub instantaneous: AnchoringEffect,
    pub lagged: Vec<LaggedEffect>,
    /// All retained bins together.
    pub pooled: Option<LaggedEffect>,
    /// Pooled lagged effect over the instantaneous effect.
    pub decay_ratio: Option<f64>,
    pub matched: usize,
    pub lost_to_follow_up: usize,
    pub warnings: Vec<String>,
}

impl DecayReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let i = &self.instantaneous;
        let _ =
            writeln!(out, "{:<14} {:>10} {:>10} {:>9} {:>8} {:>6}", "lag (days)", "mean lag", "effect", "se", "F", "n");
        let _ = writeln!(
            out,
            "{:<14} {:>10.2} {:>10.3} {:>9.3} {:>8.2} {:>6}",
            "0",
            0.0,
            i.effect,
            i.se,
            i.f,
            i.n_low + i.n_high
        );
        for l in self.lagged.iter().chain(self.pooled.iter().filter(|_| self.lagged.len() > 1)) {
            let _ = writeln!(
                out,
                "{:<14} {:>10.2} {:>10.3} {:>9.3} {:>8.2} {:>6}",
                format!("{}-{}", l.lag_bin.0, l.lag_bin.1),
                l.mean_lag,
                l.effect,
                l.se,
                l.f,
                l.n
            );
        }
        if let Some(r) = self.decay_ratio {
            let _ = writeln!(out, "decay ratio (pooled / instantaneous): {r:.3}");
        }
        let _ = writeln!(
            out,
            "{} matched, {} lost to follow-up (dropped listwise, no attrition weighting)",
            self.matched, self.lost_to_follow_up
        );
        out
    }
}

fn check_bins(bins: &[(i64, i64)]) -> Result<()> {
    for (k, &(lo, hi)) in bins.iter().enumerate() {
        if lo > hi {
            return Err(Error::InvalidInput(format!("lag bin [{lo}, {hi}] is empty")));
        }
        if bins[..k].iter().any(|&(a, b)| lo <= b && a <= hi) {
            return Err(Error::InvalidInput(format!("lag bin [{lo}, {hi}] overlaps another bin")));
        }
    }
    Ok(())
}

fn lagged_effect(
    records: Vec<ParticipantRecord>,
    lags: &[i64],
    template: &ExperimentDataset,
    bin: (i64, i64),
) -> Result<LaggedEffect> {
    let ds = ExperimentDataset { records, ..template.filter(|_| false) };
    let e = anchoring_effect(&ds)?;
    if e.n_low < 2 || e.n_high < 2 {
        return Err(Error::Grouping(format!(
            "fewer than two participants per group ({} low, {} high)",
            e.n_low, e.n_high
        )));
    }
    Ok(LaggedEffect {
        lag_bin: bin,
        mean_lag: lags.iter().sum::<i64>() as f64 / lags.len() as f64,
        effect: e.effect,
        se: e.se,
        f: e.f,
        p: e.p,
        n: e.n_low + e.n_high,
    })
}

/// Anchoring effect at exposure and in follow-up beliefs, binned by lag.
///
/// Follow-up records join to the first wave by id and inherit its anchor
/// condition; lag = follow-up day − first-wave day. Bins with fewer than two
/// participants per group are dropped with a warning.
pub fn decay_analysis(
    wave1: &ExperimentDataset,
    wave2: &ExperimentDataset,
    bins: &[(i64, i64)],
) -> Result<DecayReport> {
    check_bins(bins)?;
    let instantaneous = anchoring_effect(wave1)?;
    let first: BTreeMap<&str, &ParticipantRecord> = wave1.records.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut joined: Vec<(i64, ParticipantRecord)> = Vec::new();
    for r in &wave2.records {
        let Some(w1) = first.get(r.id.as_str()) else { continue };
        let (Some(d1), Some(d2)) = (w1.interview_day, r.interview_day) else {
            return Err(Error::Alignment(format!("participant {} lacks an interview day", r.id)));
        };
        let mut rec = r.clone();
        rec.condition = w1.condition;
        joined.push((d2 - d1, rec));
    }
    let matched = joined.len();

    let mut warnings = Vec::new();
    let mut lagged = Vec::new();
    let mut kept_bins = Vec::new();
    for &bin in bins {
        let (lags, records): (Vec<i64>, Vec<ParticipantRecord>) =
            joined.iter().filter(|(l, _)| (bin.0..=bin.1).contains(l)).cloned().unzip();
        match lagged_effect(records, &lags, wave2, bin) {
            Ok(e) => {
                lagged.push(e);
                kept_bins.push(bin);
            }
            Err(Error::Grouping(msg)) => {
                let w = format!("lag bin [{}, {}] dropped: {msg}", bin.0, bin.1);
                log::warn!("{w}");
                warnings.push(w);
            }
            Err(e) => return Err(e),
        }
    }

    let pooled = if kept_bins.len() > 1 {
        let (lags, records): (Vec<i64>, Vec<ParticipantRecord>) =
            joined.iter().filter(|(l, _)| kept_bins.iter().any(|b| (b.0..=b.1).contains(l))).cloned().unzip();
        let span = (kept_bins.iter().map(|b| b.0).min().unwrap_or(0), kept_bins.iter().map(|b| b.1).max().unwrap_or(0));
        Some(lagged_effect(records, &lags, wave2, span)?)
    } else {
        lagged.first().cloned()
    };
    let decay_ratio = pooled.as_ref().map(|p| p.effect / instantaneous.effect);

    Ok(DecayReport {
        instantaneous,
        lagged,
        pooled,
        decay_ratio,
        matched,
        lost_to_follow_up: wave1.len().saturating_sub(matched),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationCheck {
    pub belief: String,
    pub effect: f64,
    pub se: f64,
    pub p: f64,
    pub f: f64,
    pub verdict: GateVerdict,
    pub text: String,
}

/// Anchoring effect plus weak-instrument gate, with a readable verdict.
pub fn manipulation_check(ds: &ExperimentDataset, belief: &str) -> Result<ManipulationCheck> {
    let e = anchoring_effect(ds)?;
    let verdict = weak_instrument_gate(e.f);
    let text = match verdict {
        GateVerdict::Pass => format!(
            "{belief}: anchoring effect {:.3} (se {:.3}, p = {:.4}), F = {:.2} > 10; instrument is strong enough for IV",
            e.effect, e.se, e.p, e.f
        ),
        GateVerdict::Fail => format!(
            "{belief}: anchoring effect {:.3} (se {:.3}, p = {:.4}), F = {:.2} <= 10; IV estimates should not be calculated",
            e.effect, e.se, e.p, e.f
        ),
    };
    Ok(ManipulationCheck { belief: belief.to_string(), effect: e.effect, se: e.se, p: e.p, f: e.f, verdict, text })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{AnchorCondition, OutcomeSpec};

    fn experiment(rows: &[(&str, f64, f64)], day: i64) -> ExperimentDataset {
        let records = rows
            .iter()
            .map(|&(id, a, b)| ParticipantRecord::new(id, AnchorCondition::Anchor(a), b).with_day(day))
            .collect();
        ExperimentDataset::new(records, Vec::<OutcomeSpec>::new()).unwrap()
    }

    fn four(belief_shift: f64) -> Vec<(&'static str, f64, f64)> {
        vec![
            ("a", 1.0, 1.0),
            ("b", 1.0, 2.0),
            ("c", 9.0, 1.0 + belief_shift),
            ("d", 9.0, 2.5 + belief_shift),
            ("e", 1.0, 1.5),
            ("f", 9.0, 1.2 + belief_shift),
        ]
    }

    #[test]
    fn placebo_needs_two_aligned_experiments() {
        let a = experiment(&four(3.0), 0);
        assert!(matches!(placebo_matrix(&[("a", &a)]), Err(Error::Alignment(_))));
        let mut rows = four(1.0);
        rows[0].0 = "zz";
        let b = experiment(&rows, 0);
        assert!(matches!(placebo_matrix(&[("a", &a), ("b", &b)]), Err(Error::Alignment(_))));
    }

    #[test]
    fn placebo_layout_is_one_regression_per_belief() {
        let a = experiment(&four(3.0), 0);
        // second experiment: anchors crossed with the first
        let b = experiment(
            &[("a", 0.0, 5.0), ("b", 4.0, 7.0), ("c", 0.0, 5.5), ("d", 4.0, 7.2), ("e", 4.0, 6.9), ("f", 0.0, 5.1)],
            0,
        );
        let m = placebo_matrix(&[("donation", &a), ("recession", &b)]).unwrap();
        assert_eq!(m.columns, vec!["donation:high", "recession:high"]);
        assert_eq!(m.rows.len(), 2);
        assert!(!m.rows[0].cells[0].placebo && m.rows[0].cells[1].placebo);
        assert!(m.rows[1].cells[0].placebo && !m.rows[1].cells[1].placebo);

        // the row equals a direct multiple regression
        let ids = ["a", "b", "c", "d", "e", "f"];
        let da: Vec<f64> = [0., 0., 1., 1., 0., 1.].to_vec();
        let db: Vec<f64> = [0., 1., 0., 1., 1., 0.].to_vec();
        let x = DesignMatrix::with_intercept(6).with("da", da).unwrap().with("db", db).unwrap();
        let y: Vec<f64> = ids.iter().map(|id| a.records.iter().find(|r| r.id == *id).unwrap().belief).collect();
        let fit = ols_fit(&x, &y).unwrap();
        assert!((m.rows[0].cells[1].coefficient - fit.terms[2].estimate).abs() < 1e-12);
        assert!(m.to_table().contains("recession:high"));
    }

    #[test]
    fn identity_join_reproduces_manipulation_check() {
        let w = experiment(&four(3.0), 17);
        let report = decay_analysis(&w, &w, &[(0, 0)]).unwrap();
        let check = manipulation_check(&w, "x").unwrap();
        let lag = &report.lagged[0];
        assert!((lag.effect - check.effect).abs() < 1e-10);
        assert!((lag.f - check.f).abs() < 1e-10);
        assert_eq!(lag.mean_lag, 0.0);
        assert!((report.decay_ratio.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_bins_are_dropped_with_warning() {
        let w1 = experiment(&four(3.0), 0);
        let mut w2 = experiment(&four(1.0), 7);
        w2.records[0].interview_day = Some(12);
        let report = decay_analysis(&w1, &w2, &DEFAULT_BINS).unwrap();
        assert_eq!(report.lagged.len(), 1);
        assert_eq!(report.lagged[0].lag_bin, (5, 9));
        assert_eq!(report.lagged[0].mean_lag, 7.0);
        assert_eq!(report.warnings.len(), 1);
        assert!(report.to_table().contains("5-9"));
    }

    #[test]
    fn overlapping_bins_rejected() {
        let w = experiment(&four(3.0), 0);
        assert!(decay_analysis(&w, &w, &[(0, 5), (5, 9)]).is_err());
    }

    #[test]
    fn attrition_counted() {
        let w1 = experiment(&four(3.0), 0);
        let mut w2 = experiment(&four(1.0), 8);
        w2.records.truncate(4);
        w2.records.push(ParticipantRecord::new("stranger", AnchorCondition::Anchor(1.0), 0.0).with_day(8));
        // only a,b (low) and c,d (high) survive
        let report = decay_analysis(&w1, &w2, &[(5, 14)]).unwrap();
        assert_eq!(report.matched, 4);
        assert_eq!(report.lost_to_follow_up, 2);
    }

    #[test]
    fn manipulation_verdicts() {
        let strong = experiment(&four(30.0), 0);
        assert_eq!(manipulation_check(&strong, "b").unwrap().verdict, GateVerdict::Pass);
        let flat = experiment(&four(0.0), 0);
        let c = manipulation_check(&flat, "b").unwrap();
        assert_eq!(c.verdict, GateVerdict::Fail);
        assert!(c.text.contains("should not be calculated"));
    }
}
