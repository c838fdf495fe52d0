use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use abcd_core::curves::{kde, local_linear_smooth, CurveKind, CurveSeries};
use abcd_core::datamodel::{
    apply_exclusions, dichotomize_ordinal, load_csv, save_csv, transform_belief, write_exclusions, AnchorCondition,
    CsvSchema, ExperimentDataset, OutcomeColumn, OutcomeKind,
};
use abcd_core::design::{recommend_anchors, AnchorPlan, Pilot};
use abcd_core::diagnostics::{decay_analysis, manipulation_check, placebo_matrix, stars, DecayReport};
use abcd_core::iv::{self, results_column, InstrumentScheme, IvBlock, ResultsColumn};
use abcd_core::simulate::{generate_population, monte_carlo, Estimator, McSummary, SimConfig};
use abcd_core::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::output::{file_digest, OutDir, Report};
use crate::{DataOpts, DecayOpts, DesignOpts, PlotOpts, RunOpts, SimulateOpts};

const Z_95: f64 = 1.959_963_984_540_054;

struct Input {
    label: String,
    data: ExperimentDataset,
}

fn default_seed() -> u64 {
    SimConfig::default().seed
}

fn config_value<T: Serialize>(command: &str, opts: &T, inputs: &[&Path]) -> Result<Value> {
    let inputs = inputs
        .iter()
        .map(|p| Ok(json!({ "path": p.display().to_string(), "sha256": file_digest(p)? })))
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({ "command": command, "options": opts, "inputs": inputs }))
}

fn finish(
    run: &RunOpts,
    config: Value,
    seed: u64,
    command: &str,
    warnings: Vec<String>,
    result: Value,
    tables: &str,
) -> Result<()> {
    let out = OutDir::create(&run.out)?;
    let mut text = String::new();
    for w in &warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    if !warnings.is_empty() {
        text.push('\n');
    }
    text.push_str(tables);
    out.write_tables(&text)?;
    out.write_report(&Report::new(command, config, seed, warnings, result))
}

fn header(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    Ok(headers.iter().map(|h| h.trim().to_string()).collect())
}

/// Schema from a CSV header: `id`, `anchor`, belief, `wave` and `day` are
/// recognized by name, covariates come from the options and every other
/// column is an outcome.
fn infer_schema(path: &Path, o: &DataOpts) -> Result<CsvSchema> {
    let cols = header(path)?;
    let has = |c: &str| cols.iter().any(|h| h == c);
    let belief = o.belief.clone().unwrap_or_else(|| "belief".into());
    let reserved: BTreeSet<&str> = ["id", "anchor", belief.as_str(), "wave", "day"].into_iter().collect();
    let outcome_cols = if o.outcome.is_empty() {
        cols.iter()
            .filter(|c| !reserved.contains(c.as_str()) && !o.covariate.contains(c))
            .map(|c| OutcomeColumn::Name(c.clone()))
            .collect()
    } else {
        o.outcome.iter().map(|c| OutcomeColumn::Name(c.clone())).collect()
    };
    let opt = |c: &str| has(c).then(|| c.to_string());
    Ok(CsvSchema {
        id_col: opt("id"),
        condition_col: opt("anchor"),
        belief_col: belief,
        outcome_cols,
        covariate_cols: o.covariate.clone(),
        wave_col: opt("wave"),
        day_col: opt("day"),
    })
}

fn label_for(path: &Path, taken: &[String]) -> String {
    let stem: String = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let mut label = stem.clone();
    let mut k = 2;
    while taken.contains(&label) {
        label = format!("{stem}_{k}");
        k += 1;
    }
    label
}

fn load_one(path: &Path, schema_path: Option<&PathBuf>, o: &DataOpts) -> Result<ExperimentDataset> {
    let mut schema = match schema_path {
        Some(p) => CsvSchema::from_json_file(p)?,
        None => infer_schema(path, o)?,
    };
    if let Some(b) = &o.belief {
        schema.belief_col = b.clone();
    }
    for c in &o.covariate {
        if !schema.covariate_cols.contains(c) {
            return Err(Error::MissingColumn(format!("covariate `{c}` is not in the schema")));
        }
    }
    let mut ds = load_csv(path, &schema)?;
    if let Some(t) = o.exclude_above {
        ds = apply_exclusions(&ds, t)?;
    }
    let ds = transform_belief(&ds, o.transform.into())?;
    for name in &o.outcome {
        if ds.outcome_spec(name).is_none() {
            return Err(Error::MissingColumn(format!("outcome `{name}` is not in the schema")));
        }
    }
    Ok(ds)
}

fn load_inputs(o: &DataOpts) -> Result<Vec<Input>> {
    if o.schema.len() > 1 && o.schema.len() != o.data.len() {
        return Err(Error::InvalidInput(format!(
            "{} schema files for {} data files; give one shared schema or one per file",
            o.schema.len(),
            o.data.len()
        )));
    }
    let mut inputs: Vec<Input> = Vec::new();
    for (i, path) in o.data.iter().enumerate() {
        let schema = if o.schema.len() == 1 { o.schema.first() } else { o.schema.get(i) };
        let data = load_one(path, schema, o)?;
        let taken: Vec<String> = inputs.iter().map(|x| x.label.clone()).collect();
        inputs.push(Input { label: label_for(path, &taken), data });
    }
    Ok(inputs)
}

fn data_paths(o: &DataOpts) -> Vec<&Path> {
    o.data.iter().chain(&o.schema).map(PathBuf::as_path).collect()
}

fn outcomes_of(o: &DataOpts, ds: &ExperimentDataset) -> Vec<String> {
    if o.outcome.is_empty() {
        ds.outcomes.iter().map(|s| s.name.clone()).collect()
    } else {
        o.outcome.clone()
    }
}

fn scheme_for(o: &DataOpts, ds: &ExperimentDataset) -> InstrumentScheme {
    o.coding.map_or_else(|| InstrumentScheme::default_for(ds), Into::into)
}

fn condition_label(c: AnchorCondition) -> String {
    match c {
        AnchorCondition::NoAnchor => "none".into(),
        AnchorCondition::Anchor(v) => format!("{v}"),
    }
}

fn conditions(ds: &ExperimentDataset) -> Vec<AnchorCondition> {
    let mut out: Vec<AnchorCondition> = ds.anchor_values().into_iter().map(AnchorCondition::Anchor).collect();
    if ds.has_no_anchor() {
        out.insert(0, AnchorCondition::NoAnchor);
    }
    out
}

fn summary(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    let median = if s.len().is_multiple_of(2) { 0.5 * (s[m - 1] + s[m]) } else { s[m] };
    (mean, sd, median)
}

fn unit(o: &DataOpts) -> &'static str {
    if o.percent {
        " pp"
    } else {
        ""
    }
}

pub fn ingest(command: &str, o: &DataOpts) -> Result<()> {
    let inputs = load_inputs(o)?;
    let out = OutDir::create(&o.run.out)?;
    std::fs::create_dir_all(out.path("data"))?;
    let mut results = Vec::new();
    let mut tables = String::new();
    for input in &inputs {
        let ds = &input.data;
        let csv_rel = format!("data/{}.csv", input.label);
        let schema_rel = format!("data/{}.schema.json", input.label);
        let excl_rel = format!("data/{}.exclusions.csv", input.label);
        save_csv(ds, out.path(&csv_rel))?;
        std::fs::write(out.path(&schema_rel), serde_json::to_string_pretty(&ds.standard_schema())? + "\n")?;
        write_exclusions(&ds.exclusion_report, std::fs::File::create(out.path(&excl_rel))?)?;
        let _ = writeln!(
            tables,
            "{}: {} records kept, {} excluded, anchors {:?}{}, outcomes [{}]",
            input.label,
            ds.len(),
            ds.exclusion_report.len(),
            ds.anchor_values(),
            if ds.has_no_anchor() { " + no-anchor" } else { "" },
            ds.outcomes.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", ")
        );
        results.push(json!({
            "label": input.label,
            "records": ds.len(),
            "excluded": ds.exclusion_report.len(),
            "anchors": ds.anchor_values(),
            "no_anchor_arm": ds.has_no_anchor(),
            "outcomes": ds.outcomes,
            "belief_transform": ds.belief_transform,
            "files": [csv_rel, schema_rel, excl_rel],
        }));
    }
    let config = config_value(command, o, &data_paths(o))?;
    finish(
        &o.run,
        config,
        o.run.seed.unwrap_or_else(default_seed),
        command,
        vec![],
        json!({ "datasets": results }),
        &tables,
    )
}

pub fn describe(command: &str, o: &DataOpts) -> Result<()> {
    let inputs = load_inputs(o)?;
    let mut results = Vec::new();
    let mut tables = String::new();
    let mut warnings = Vec::new();
    for input in &inputs {
        let ds = &input.data;
        let _ = writeln!(tables, "== {} ({} records)", input.label, ds.len());
        let _ = writeln!(tables, "{:<12} {:>6} {:>12} {:>12} {:>12}", "anchor", "n", "mean belief", "sd", "median");
        let mut groups = Vec::new();
        for c in conditions(ds) {
            let beliefs: Vec<f64> = ds.records.iter().filter(|r| r.condition == c).map(|r| r.belief).collect();
            let (mean, sd, median) = summary(&beliefs);
            let _ = writeln!(
                tables,
                "{:<12} {:>6} {:>12.4} {:>12.4} {:>12.4}",
                condition_label(c),
                beliefs.len(),
                mean,
                sd,
                median
            );
            groups.push(json!({ "condition": c, "n": beliefs.len(), "mean_belief": mean, "sd_belief": sd, "median_belief": median }));
        }
        let mut outcomes = Vec::new();
        for name in outcomes_of(o, ds) {
            let values = ds.outcome_values(&name);
            if values.is_empty() {
                warnings.push(format!("{}: outcome `{name}` has no values", input.label));
                continue;
            }
            let (mean, sd, median) = summary(&values);
            let _ = writeln!(
                tables,
                "outcome {name}: n = {}, mean {mean:.4}, sd {sd:.4}, median {median:.4}",
                values.len()
            );
            outcomes.push(json!({ "name": name, "n": values.len(), "mean": mean, "sd": sd, "median": median }));
        }
        let check = if ds.anchor_values().len() == 2 {
            let c = manipulation_check(ds, &input.label)?;
            let _ = writeln!(tables, "{}", c.text);
            Some(c)
        } else {
            None
        };
        tables.push('\n');
        results.push(json!({ "label": input.label, "records": ds.len(), "groups": groups, "outcomes": outcomes, "manipulation_check": check }));
    }
    let config = config_value(command, o, &data_paths(o))?;
    finish(
        &o.run,
        config,
        o.run.seed.unwrap_or_else(default_seed),
        command,
        warnings,
        json!({ "datasets": results }),
        &tables,
    )
}

pub fn first_stage(command: &str, o: &DataOpts) -> Result<()> {
    let inputs = load_inputs(o)?;
    let mut results = Vec::new();
    let mut tables = String::new();
    let mut warnings = Vec::new();
    for input in &inputs {
        let ds = &input.data;
        let fs = iv::first_stage(ds, scheme_for(o, ds), &o.covariate)?;
        let _ = writeln!(
            tables,
            "== {} first stage ({:?} coding, reference {})",
            input.label, fs.coding.scheme, fs.coding.reference
        );
        let _ = writeln!(tables, "{:<20} {:>12} {:>10} {:>9} {:>10}", "term", "estimate", "se", "t", "p");
        for t in &fs.fit.terms {
            let _ = writeln!(
                tables,
                "{:<20} {:>12.4} {:>10.4} {:>9.3} {:>10.4}",
                t.name, t.estimate, t.std_error, t.t_value, t.p_value
            );
        }
        let _ = writeln!(
            tables,
            "F({}, {}) = {:.2}, p = {:.4}; n = {}; gate: {:?}",
            fs.f_test.df_num, fs.f_test.df_den, fs.f_test.f, fs.f_test.p, fs.n, fs.gate
        );
        if !fs.gate.passed() {
            warnings
                .push(format!("{}: first-stage F = {:.2} <= 10, instrument too weak for IV", input.label, fs.f_test.f));
        }
        let check = if ds.anchor_values().len() == 2 { Some(manipulation_check(ds, &input.label)?) } else { None };
        if let Some(c) = &check {
            let _ = writeln!(tables, "{}", c.text);
        }
        tables.push('\n');
        results.push(json!({
            "label": input.label,
            "coding": fs.coding,
            "fit": fs.fit,
            "f_test": fs.f_test,
            "gate": fs.gate,
            "n": fs.n,
            "manipulation_check": check,
        }));
    }
    let config = config_value(command, o, &data_paths(o))?;
    finish(
        &o.run,
        config,
        o.run.seed.unwrap_or_else(default_seed),
        command,
        warnings,
        json!({ "datasets": results }),
        &tables,
    )
}

/// Replaces an ordinal outcome with its median split.
fn dichotomized(ds: &ExperimentDataset, name: &str) -> Result<(ExperimentDataset, i64)> {
    let sample = ds.with_outcome(name)?;
    let levels: Vec<i64> = sample.outcome_values(name).iter().map(|v| v.round() as i64).collect();
    let (cutoff, flags) = dichotomize_ordinal(&levels)?;
    let mut out = sample;
    for (r, f) in out.records.iter_mut().zip(flags) {
        r.outcomes.insert(name.to_string(), f64::from(f));
    }
    Ok((out, cutoff))
}

fn fmt_cell(est: f64, se: f64, p: f64) -> String {
    format!("{est:.4}{} ({se:.4})", stars(p))
}

fn results_table(label: &str, cols: &[ResultsColumn], u: &str) -> String {
    let w = cols.iter().map(|c| c.outcome.len()).max().unwrap_or(0).max(24);
    let mut t = String::new();
    let _ = writeln!(t, "== {label}");
    let _ = write!(t, "{:<22}", "");
    for c in cols {
        let _ = write!(t, " {:>w$}", c.outcome);
    }
    t.push('\n');
    let mut row = |name: &str, cell: &dyn Fn(&ResultsColumn) -> String| {
        let _ = write!(t, "{name:<22}");
        for c in cols {
            let _ = write!(t, " {:>w$}", cell(c));
        }
        t.push('\n');
    };
    row("OLS belief", &|c| fmt_cell(c.ols.estimate, c.ols.std_error, c.ols.p_value));
    row("IV belief", &|c| match &c.iv {
        IvBlock::Estimated { estimate, std_error, p_value } => fmt_cell(*estimate, *std_error, *p_value),
        IvBlock::NotCalculated { .. } => "not calculated".into(),
    });
    row("Anchoring effect", &|c| {
        c.anchoring_effect.as_ref().map_or_else(|| "-".into(), |a| format!("{:.3}{u}{}", a.effect, stars(a.p)))
    });
    row("1st stage F", &|c| format!("{:.2}", c.first_stage_f));
    row("N", &|c| c.n.to_string());
    row("Outcome mean (sd)", &|c| format!("{:.3} ({:.3})", c.outcome_mean, c.outcome_sd));
    t.push_str("Standard errors in parentheses. * p<0.05, ** p<0.01, *** p<0.001.\n");
    if cols.iter().any(|c| matches!(c.iv, IvBlock::NotCalculated { .. })) {
        t.push_str("IV estimates were not calculated where the first-stage F did not exceed 10.\n");
    }
    t
}

pub fn iv(command: &str, o: &DataOpts) -> Result<()> {
    let inputs = load_inputs(o)?;
    let mut results = Vec::new();
    let mut tables = String::new();
    let mut warnings = Vec::new();
    for input in &inputs {
        let ds = &input.data;
        let scheme = scheme_for(o, ds);
        let mut cols = Vec::new();
        let mut notes = Vec::new();
        for name in outcomes_of(o, ds) {
            let spec = ds.outcome_spec(&name).ok_or_else(|| Error::MissingColumn(name.clone()))?;
            let col = match spec.kind {
                OutcomeKind::Ordinal { .. } => {
                    let (binary, cutoff) = dichotomized(ds, &name)?;
                    notes.push(json!({ "outcome": name, "dichotomized_above": cutoff }));
                    warnings.push(format!(
                        "{}: ordinal outcome `{name}` split into > {cutoff} vs <= {cutoff}",
                        input.label
                    ));
                    results_column(&binary, &name, scheme, &o.covariate)?
                }
                OutcomeKind::Continuous => results_column(ds, &name, scheme, &o.covariate)?,
            };
            if let IvBlock::NotCalculated { reason } = &col.iv {
                warnings.push(format!("{}: IV for `{name}` {reason}", input.label));
            }
            cols.push(col);
        }
        tables.push_str(&results_table(&input.label, &cols, unit(o)));
        tables.push('\n');
        results.push(json!({ "label": input.label, "coding": scheme, "columns": cols, "dichotomized": notes }));
    }
    let config = config_value(command, o, &data_paths(o))?;
    finish(
        &o.run,
        config,
        o.run.seed.unwrap_or_else(default_seed),
        command,
        warnings,
        json!({ "datasets": results }),
        &tables,
    )
}

pub fn placebo(command: &str, o: &DataOpts) -> Result<()> {
    let inputs = load_inputs(o)?;
    let experiments: Vec<(&str, &ExperimentDataset)> = inputs.iter().map(|i| (i.label.as_str(), &i.data)).collect();
    let m = placebo_matrix(&experiments)?;
    let warnings: Vec<String> = m
        .rows
        .iter()
        .flat_map(|r| {
            r.cells
                .iter()
                .zip(&m.columns)
                .filter(|(c, _)| c.flagged)
                .map(move |(c, col)| format!("placebo cell {} ~ {col} is significant (p = {:.4})", r.belief, c.p))
        })
        .collect();
    let config = config_value(command, o, &data_paths(o))?;
    let tables = m.to_table();
    finish(
        &o.run,
        config,
        o.run.seed.unwrap_or_else(default_seed),
        command,
        warnings,
        serde_json::to_value(&m)?,
        &tables,
    )
}

fn parse_bins(spec: &str) -> Result<Vec<(i64, i64)>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let bad = || Error::InvalidInput(format!("bad lag bin `{s}`; expected LO-HI in whole days"));
            let (lo, hi) = s.trim().split_once('-').ok_or_else(bad)?;
            Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn decay_curve(r: &DecayReport) -> Result<CurveSeries> {
    let mut points: Vec<(f64, f64, f64)> = vec![(0.0, r.instantaneous.effect, r.instantaneous.se)];
    points.extend(r.lagged.iter().map(|l| (l.mean_lag, l.effect, l.se)));
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let x = points.iter().map(|p| p.0).collect();
    let y = points.iter().map(|p| p.1).collect();
    let lo = points.iter().map(|p| p.1 - Z_95 * p.2).collect();
    let hi = points.iter().map(|p| p.1 + Z_95 * p.2).collect();
    CurveSeries::new(CurveKind::EffectBar, x, y)?.with_ci(lo, hi)
}

pub fn decay(command: &str, o: &DecayOpts) -> Result<()> {
    let bins = parse_bins(&o.bins)?;
    let inputs = load_inputs(&o.data)?;
    let (wave1, wave2) = match inputs.as_slice() {
        [one] => (one.data.wave(1), one.data.wave(2)),
        [a, b] => (a.data.clone(), b.data.clone()),
        _ => {
            return Err(Error::InvalidInput(
                "decay takes one file with a wave column or two files (wave 1, wave 2)".into(),
            ))
        }
    };
    let report = decay_analysis(&wave1, &wave2, &bins)?;
    let mut warnings = report.warnings.clone();
    let out = OutDir::create(&o.data.run.out)?;
    let curve = match decay_curve(&report) {
        Ok(c) => Some(out.write_curve("decay_effects", &c, false)?),
        Err(e) => {
            warnings.push(format!("effect bars not written: {e}"));
            None
        }
    };
    let mut result = serde_json::to_value(&report)?;
    result["curve"] = json!(curve);
    let config = config_value(command, o, &data_paths(&o.data))?;
    let tables = report.to_table();
    finish(&o.data.run, config, o.data.run.seed.unwrap_or_else(default_seed), command, warnings, result, &tables)
}

fn plan_table(p: &AnchorPlan) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "rule: {:?}", p.rule);
    let _ = writeln!(t, "recommended anchors: low {}, high {}", p.low, p.high);
    if let Some((a, b)) = p.percentiles {
        let _ = writeln!(t, "baseline percentiles: {:.1}%, {:.1}%", 100.0 * a, 100.0 * b);
    }
    if let Some((a, b)) = p.predicted_beliefs {
        let _ = writeln!(t, "predicted mean beliefs: {a:.4}, {b:.4} (difference {:.4})", b - a);
    }
    if let Some(c) = &p.curve {
        let coefs: Vec<String> = c.coefficients.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(t, "fitted cubic ({:?} scale): [{}]", c.anchor_scale, coefs.join(", "));
    }
    t
}

pub fn design_anchors(command: &str, o: &DesignOpts) -> Result<()> {
    let inputs = load_inputs(&o.data)?;
    let [input] = inputs.as_slice() else {
        return Err(Error::InvalidInput("design-anchors takes exactly one --data file".into()));
    };
    let ds = &input.data;
    let baseline: Vec<f64> = ds.baseline_beliefs().iter().map(|&b| ds.belief_transform.invert(b)).collect();
    let pilot_data = match &o.pilot {
        Some(p) => Some(load_one(p, o.pilot_schema.as_ref(), &o.data)?),
        None if o.rule == crate::Rule::Extrema => Some(ds.clone()),
        None => None,
    };
    let pilot = pilot_data.as_ref().map(|d| Pilot { data: d, scale: o.scale.into() });
    let plan = recommend_anchors(&baseline, o.rule.into(), pilot)?;
    let mut paths = data_paths(&o.data);
    paths.extend(o.pilot.iter().chain(&o.pilot_schema).map(PathBuf::as_path));
    let config = config_value(command, o, &paths)?;
    let result = json!({ "label": input.label, "baseline_n": baseline.len(), "plan": plan });
    finish(
        &o.data.run,
        config,
        o.data.run.seed.unwrap_or_else(default_seed),
        command,
        vec![],
        result,
        &plan_table(&plan),
    )
}

fn parse_waves(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad wave lag `{s}`"))))
        .collect()
}

fn mc_table(s: &McSummary) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "Monte Carlo: {} replicates, true beta1 = {}", s.replicates, s.beta1);
    let _ = writeln!(
        t,
        "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9}",
        "estimator", "mean", "bias", "sd", "MC se", "coverage", "failures"
    );
    for e in &s.estimators {
        let cov = e.coverage.map_or_else(|| "-".to_string(), |c| format!("{c:.3}"));
        let _ = writeln!(
            t,
            "{:<10} {:>10.4} {:>10.4} {:>10.4} {:>10.5} {:>10} {:>9}",
            format!("{:?}", e.estimator),
            e.mean,
            e.bias,
            e.sd,
            e.mc_se,
            cov,
            e.failures
        );
    }
    let _ = writeln!(t, "analytic OLS bias (in-sample): {:.4}", s.analytic_ols_bias);
    let _ = writeln!(t, "mean first-stage effect: {:.4}", s.mean_first_stage);
    t
}

pub fn simulate(command: &str, o: &SimulateOpts) -> Result<()> {
    let mut cfg = match &o.config {
        Some(p) => SimConfig::from_json_file(p)?,
        None => SimConfig::default(),
    };
    if let Some(seed) = o.run.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let waves = parse_waves(&o.waves)?;
    let ds = generate_population(&cfg, &waves)?;

    let out = OutDir::create(&o.run.out)?;
    save_csv(&ds, out.path("data.csv"))?;
    std::fs::write(out.path("schema.json"), serde_json::to_string_pretty(&ds.standard_schema())? + "\n")?;

    let mut tables = format!("simulated {} records ({} per wave, {} waves)\n", ds.len(), cfg.n, waves.len().max(1));
    let mut warnings = Vec::new();
    let mc = match o.replicates {
        Some(r) => {
            let s = monte_carlo(&cfg, r, &[Estimator::Ols, Estimator::Iv, Estimator::Wald])?;
            warnings.extend(s.warnings.iter().cloned());
            tables.push('\n');
            tables.push_str(&mc_table(&s));
            Some(s)
        }
        None => None,
    };
    let paths: Vec<&Path> = o.config.iter().map(PathBuf::as_path).collect();
    let config = config_value(command, &json!({ "options": o, "simulation": cfg }), &paths)?;
    let result = json!({
        "simulation": cfg,
        "records": ds.len(),
        "wave_lags": waves,
        "files": ["data.csv", "schema.json"],
        "monte_carlo": mc,
    });
    finish(&o.run, config, cfg.seed, command, warnings, result, &tables)
}

fn effect_bars(ds: &ExperimentDataset) -> Result<CurveSeries> {
    let anchors = ds.anchor_values();
    let mut y = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for &a in &anchors {
        let b: Vec<f64> = ds.records.iter().filter(|r| r.condition.value() == Some(a)).map(|r| r.belief).collect();
        let (mean, sd, _) = summary(&b);
        let se = if b.len() > 1 { sd / (b.len() as f64).sqrt() } else { 0.0 };
        y.push(mean);
        lo.push(mean - Z_95 * se);
        hi.push(mean + Z_95 * se);
    }
    CurveSeries::new(CurveKind::EffectBar, anchors, y)?.with_ci(lo, hi)
}

pub fn plot(command: &str, o: &PlotOpts) -> Result<()> {
    let inputs = load_inputs(&o.data)?;
    let out = OutDir::create(&o.data.run.out)?;
    let mut warnings = Vec::new();
    let mut files = Vec::new();
    let mut tables = String::new();
    for input in &inputs {
        let ds = &input.data;
        for c in conditions(ds) {
            let beliefs: Vec<f64> = ds.records.iter().filter(|r| r.condition == c).map(|r| r.belief).collect();
            let name = format!("{}_kde_{}", input.label, condition_label(c));
            match kde(&beliefs, o.bandwidth) {
                Ok(series) => files.push(out.write_curve(&name, &series, o.svg)?),
                Err(e) => warnings.push(format!("{name} skipped: {e}")),
            }
        }
        if !ds.anchor_values().is_empty() {
            let name = format!("{}_effects", input.label);
            match effect_bars(ds) {
                Ok(series) => files.push(out.write_curve(&name, &series, o.svg)?),
                Err(e) => warnings.push(format!("{name} skipped: {e}")),
            }
        }
        let anchored: Vec<(f64, f64)> =
            ds.records.iter().filter_map(|r| r.condition.value().map(|a| (a, r.belief))).collect();
        if ds.anchor_values().len() >= 2 && anchored.len() >= 5 {
            let name = format!("{}_local_linear", input.label);
            let (x, y): (Vec<f64>, Vec<f64>) = anchored.into_iter().unzip();
            match local_linear_smooth(&x, &y, None) {
                Ok(series) => {
                    warnings.extend(series.warnings.iter().map(|w| format!("{name}: {w}")));
                    files.push(out.write_curve(&name, &series, o.svg)?);
                }
                Err(e) => warnings.push(format!("{name} skipped: {e}")),
            }
        }
    }
    for f in &files {
        let _ = writeln!(tables, "{f}");
    }
    let config = config_value(command, o, &data_paths(&o.data))?;
    finish(
        &o.data.run,
        config,
        o.data.run.seed.unwrap_or_else(default_seed),
        command,
        warnings,
        json!({ "curves": files }),
        &tables,
    )
}
