//! Anchor-value selection from pilot data.
//!
//! A low-order polynomial is fitted to the mean posttreatment belief as a
//! function of the anchor (on a raw or log scale). Its extrema over the
//! observed anchor range are the anchors that maximize the first-stage
//! difference in mean beliefs, which in turn minimizes the variance of the
//! IV estimate (that variance scales with `1 / Δbelief²`).

use serde::{Deserialize, Serialize};

use crate::datamodel::{BeliefTransform, ExperimentDataset};
use crate::error::{Error, Result};
use crate::linreg::{ols_fit, DesignMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AnchorScale {
    #[default]
    Raw,
    Log10Plus1,
}

impl AnchorScale {
    fn transform(self) -> BeliefTransform {
        match self {
            Self::Raw => BeliefTransform::Identity,
            Self::Log10Plus1 => BeliefTransform::Log10Plus1,
        }
    }

    /// Raw anchor → curve scale.
    pub fn to_scale(self, raw: f64) -> f64 {
        self.transform().apply(raw)
    }

    /// Curve scale → raw anchor.
    pub fn to_raw(self, x: f64) -> f64 {
        self.transform().invert(x)
    }
}

/// Polynomial map from anchor (on `anchor_scale`) to mean belief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    /// `c[i]` multiplies `xⁱ`.
    pub coefficients: Vec<f64>,
    pub anchor_scale: AnchorScale,
    pub domain: (f64, f64),
}

impl ResponseCurve {
    pub fn new(coefficients: Vec<f64>, anchor_scale: AnchorScale, domain: (f64, f64)) -> Result<Self> {
        if !(domain.0 < domain.1) {
            return Err(Error::InvalidInput(format!("curve domain [{}, {}] is empty", domain.0, domain.1)));
        }
        if coefficients.is_empty() {
            return Err(Error::InvalidInput("curve needs at least one coefficient".into()));
        }
        Ok(Self { coefficients, anchor_scale, domain })
    }

    /// Horner evaluation, no domain check.
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    fn coef(&self, i: usize) -> f64 {
        self.coefficients.get(i).copied().unwrap_or(0.0)
    }
}

/// Least-squares polynomial of belief on anchor over a pilot experiment.
///
/// Anchors stored in `pilot` are on the dataset's belief scale; they are
/// mapped back to raw values and then onto `scale` before fitting.
pub fn fit_response_polynomial(pilot: &ExperimentDataset, degree: usize, scale: AnchorScale) -> Result<ResponseCurve> {
    if pilot.records.iter().any(|r| !r.condition.is_anchored()) {
        return Err(Error::InvalidInput("pilot data must contain anchored records only".into()));
    }
    let distinct = pilot.anchor_values().len();
    if distinct < degree + 1 {
        return Err(Error::Underdetermined { distinct, needed: degree + 1 });
    }
    let xs: Vec<f64> = pilot
        .records
        .iter()
        .map(|r| {
            let raw = pilot.belief_transform.invert(r.condition.value().expect("anchored"));
            scale.to_scale(raw)
        })
        .collect();
    let n = xs.len();
    let mut design = DesignMatrix::with_intercept(n);
    for p in 1..=degree {
        design.push(format!("x^{p}"), xs.iter().map(|x| x.powi(p as i32)).collect())?;
    }
    let fit = ols_fit(&design, &pilot.beliefs())?;
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ResponseCurve::new(fit.coefficients(), scale, (lo, hi))
}

/// Locations of the curve's minimum and maximum over its domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveExtrema {
    pub argmin: f64,
    pub argmax: f64,
    /// No real critical points: the curve is monotone and both extrema are endpoints.
    pub monotone: bool,
}

/// Global extrema of a cubic (or lower) on its domain.
///
/// Critical points solve `c₁ + 2c₂x + 3c₃x² = 0`. Candidates are the critical
/// points inside the domain and both endpoints; a critical point outside the
/// domain is thereby replaced by the better endpoint.
pub fn curve_extrema(curve: &ResponseCurve) -> Result<CurveExtrema> {
    if curve.coefficients.len() > 4 && curve.coefficients[4..].iter().any(|c| *c != 0.0) {
        return Err(Error::InvalidInput("closed-form extrema need a polynomial of degree <= 3".into()));
    }
    let (c1, c2, c3) = (curve.coef(1), curve.coef(2), curve.coef(3));
    let (lo, hi) = curve.domain;
    // derivative qa·x² + qb·x + qc
    let (qa, qb, qc) = (3.0 * c3, 2.0 * c2, c1);

    let mut critical = Vec::new();
    if qa != 0.0 {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc > 0.0 {
            // numerically stable pair of roots
            let q = -0.5 * (qb + qb.signum() * disc.sqrt());
            let q = if q == 0.0 { -0.5 * disc.sqrt() } else { q };
            critical.push(q / qa);
            if q != 0.0 {
                critical.push(qc / q);
            }
        } else if disc == 0.0 {
            critical.push(-qb / (2.0 * qa));
        }
    } else if qb != 0.0 {
        critical.push(-qc / qb);
    } else if qc == 0.0 {
        return Err(Error::DegenerateCurve);
    }

    let monotone = critical.is_empty()
        || critical.iter().all(|&x| {
            // a double root is an inflection, not an extremum
            let second = qb + 2.0 * qa * x;
            second == 0.0
        });

    let mut candidates = vec![lo, hi];
    candidates.extend(critical.into_iter().filter(|x| *x > lo && *x < hi));
    let by_value = |a: &f64, b: &f64| curve.eval(*a).total_cmp(&curve.eval(*b));
    let argmin = candidates.iter().copied().min_by(by_value).expect("nonempty");
    let argmax = candidates.iter().copied().max_by(by_value).expect("nonempty");
    Ok(CurveExtrema { argmin, argmax, monotone })
}

/// Percentile of `anchor` in the baseline sample: `100 · #{b ≤ anchor} / n`.
pub fn anchor_percentile(anchor: f64, baseline: &[f64]) -> Result<f64> {
    if baseline.is_empty() {
        return Err(Error::EmptyBaseline);
    }
    let at_or_below = baseline.iter().filter(|&&b| b <= anchor).count();
    Ok(100.0 * at_or_below as f64 / baseline.len() as f64)
}

/// Empirical quantile: the smallest sample value whose ECDF reaches `p`.
pub fn empirical_quantile(sample: &[f64], p: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptyBaseline);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("quantile level must lie in [0,1], got {p}")));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // smallest k (1-based) with k/n >= p, guarded against rounding in n·p
    let mut k = ((p * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= p {
        k -= 1;
    }
    Ok(sorted[k - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorRule {
    /// 5th and 95th percentiles of the baseline distribution.
    PercentileRule,
    /// Extrema of a cubic fitted to multivalued pilot data.
    CurveExtrema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPlan {
    pub rule: AnchorRule,
    /// Raw-scale anchors.
    pub low: f64,
    pub high: f64,
    /// Mean beliefs the pilot curve predicts at the two anchors.
    pub predicted_beliefs: Option<(f64, f64)>,
    pub predicted_delta: Option<f64>,
    /// Percentiles of the anchors within the baseline sample.
    pub percentiles: Option<(f64, f64)>,
    pub curve: Option<ResponseCurve>,
}

pub const LOW_PERCENTILE: f64 = 0.05;
pub const HIGH_PERCENTILE: f64 = 0.95;
pub const MIN_BASELINE: usize = 20;

/// Pilot data and the scale its response curve is fitted on.
#[derive(Debug, Clone, Copy)]
pub struct Pilot<'a> {
    pub data: &'a ExperimentDataset,
    pub scale: AnchorScale,
}

/// Recommends a low/high anchor pair.
///
/// `baseline` holds raw-scale no-anchor beliefs; it may be empty under
/// [`AnchorRule::CurveExtrema`].
pub fn recommend_anchors(baseline: &[f64], rule: AnchorRule, pilot: Option<Pilot<'_>>) -> Result<AnchorPlan> {
    let curve = pilot.map(|p| fit_response_polynomial(p.data, 3, p.scale)).transpose()?;
    let (low, high) = match rule {
        AnchorRule::PercentileRule => {
            if baseline.is_empty() {
                return Err(Error::EmptyBaseline);
            }
            if baseline.len() < MIN_BASELINE {
                return Err(Error::InsufficientData { n: baseline.len(), k: MIN_BASELINE });
            }
            if baseline.windows(2).all(|w| w[0] == w[1]) {
                return Err(Error::DegenerateBaseline(baseline[0]));
            }
            (empirical_quantile(baseline, LOW_PERCENTILE)?, empirical_quantile(baseline, HIGH_PERCENTILE)?)
        }
        AnchorRule::CurveExtrema => {
            let curve =
                curve.as_ref().ok_or_else(|| Error::InvalidInput("curve-extrema rule needs pilot data".into()))?;
            let ext = curve_extrema(curve)?;
            let (a, b) = (curve.anchor_scale.to_raw(ext.argmin), curve.anchor_scale.to_raw(ext.argmax));
            (a.min(b), a.max(b))
        }
    };

    let predicted_beliefs = curve.as_ref().and_then(|c| {
        let (xl, xh) = (c.anchor_scale.to_scale(low), c.anchor_scale.to_scale(high));
        Some((predicted_mean_belief(c, xl).ok()?, predicted_mean_belief(c, xh).ok()?))
    });
    let percentiles = if baseline.is_empty() {
        None
    } else {
        Some((anchor_percentile(low, baseline)?, anchor_percentile(high, baseline)?))
    };
    Ok(AnchorPlan {
        rule,
        low,
        high,
        predicted_delta: predicted_beliefs.map(|(a, b)| b - a),
        predicted_beliefs,
        percentiles,
        curve,
    })
}

/// `(Δa / Δb)²`: IV variance under design A relative to design B.
pub fn design_variance_ratio(delta_a: f64, delta_b: f64) -> Result<f64> {
    if !(delta_a > 0.0 && delta_b > 0.0) {
        return Err(Error::Domain(format!("belief differences must be positive, got ({delta_a}, {delta_b})")));
    }
    Ok((delta_a / delta_b).powi(2))
}

/// Curve value at `anchor` (on the curve's scale); errors outside the fitted domain.
pub fn predicted_mean_belief(curve: &ResponseCurve, anchor: f64) -> Result<f64> {
    let (lo, hi) = curve.domain;
    // allow round-off from scale round trips
    let slack = 1e-9 * (hi - lo);
    if !(anchor >= lo - slack && anchor <= hi + slack) {
        return Err(Error::Extrapolation { anchor, lo, hi });
    }
    Ok(curve.eval(anchor))
}

/// Recession-likelihood grid: 0..100 in steps of 2.
pub fn recession_grid() -> Vec<f64> {
    (0..=50).map(|i| 2.0 * i as f64).collect()
}

/// The 49-value donation grid, with the listed `200` between 1500 and 3000
/// read as 2000.
pub fn donation_grid() -> Vec<f64> {
    vec![
        0.0,
        5.0,
        10.0,
        15.0,
        20.0,
        30.0,
        40.0,
        50.0,
        75.0,
        100.0,
        120.0,
        150.0,
        200.0,
        250.0,
        300.0,
        400.0,
        500.0,
        600.0,
        700.0,
        800.0,
        900.0,
        1_000.0,
        1_200.0,
        1_500.0,
        2_000.0,
        3_000.0,
        4_000.0,
        5_000.0,
        6_000.0,
        7_000.0,
        8_000.0,
        9_000.0,
        10_000.0,
        12_000.0,
        15_000.0,
        20_000.0,
        25_000.0,
        30_000.0,
        35_000.0,
        40_000.0,
        45_000.0,
        50_000.0,
        75_000.0,
        100_000.0,
        120_000.0,
        150_000.0,
        200_000.0,
        500_000.0,
        1_000_000.0,
    ]
}
