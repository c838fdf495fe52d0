//! Synthetic anchoring experiments and a Monte Carlo harness for the
//! estimators.
//!
//! Data-generating process, per participant:
//!
//! ```text
//! C  ~ N(0, 1)
//! b0 = belief_mean + delta·C + sigma_belief·u,     u ~ N(0, 1)
//! a  ~ Uniform(anchors)
//! b  = b0 + lambda·plaus(a)·(a − b0)·exp(−lag/tau)
//! Y  = beta0 + beta1·b + gamma·C + theta·1[high anchor] + sigma_outcome·e
//! ```
//!
//! `plaus` is 1 inside the plausibility window and falls linearly to 0 over a
//! margin of half the window width on either side.
//!
//! Randomness comes from ChaCha8 streams seeded through a SplitMix64 hash of
//! (master seed, replicate, participant), so every participant's draws are
//! fixed by the seed alone and replicates can run in any order or in parallel.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AnchorCondition, ExperimentDataset, OutcomeKind, OutcomeSpec, ParticipantRecord};
use crate::dist;
use crate::error::{Error, Result};
use crate::iv::{self, InstrumentScheme, BELIEF};

/// Outcome column written by the simulator.
pub const OUTCOME: &str = "y";
/// Covariate column holding the latent confounder.
pub const CONFOUNDER: &str = "confounder";

const REPLICATE_STREAM: u64 = 0x5245_504c; // "REPL"

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorDesign {
    Pair { low: f64, high: f64 },
    Grid(Vec<f64>),
}

impl AnchorDesign {
    fn values(&self) -> Vec<f64> {
        match self {
            Self::Pair { low, high } => vec![*low, *high],
            Self::Grid(g) => g.clone(),
        }
    }

    /// Anchors that carry the direct effect `theta`: the high anchor of a
    /// pair, or grid values above the grid median.
    fn is_high(&self, a: f64) -> bool {
        match self {
            Self::Pair { high, .. } => a == *high,
            Self::Grid(g) => {
                let mut s = g.clone();
                s.sort_by(f64::total_cmp);
                a > s[(s.len() - 1) / 2]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub beta0: f64,
    pub beta1: f64,
    /// Confounder → outcome.
    pub gamma: f64,
    /// Confounder → baseline belief.
    pub delta: f64,
    /// Anchoring pull strength in [0, 1].
    pub lambda: f64,
    /// Plausibility window (belief units).
    pub window: (f64, f64),
    /// Decay time constant in days.
    pub tau: f64,
    /// Direct anchor → outcome effect (exclusion-restriction violation).
    pub theta: f64,
    pub sigma_belief: f64,
    pub sigma_outcome: f64,
    /// Mean of the baseline belief.
    pub belief_mean: f64,
    pub anchors: AnchorDesign,
    /// Adds a no-anchor arm alongside the anchor conditions.
    pub no_anchor_arm: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1_000,
            beta0: 0.0,
            beta1: 0.5,
            gamma: 1.0,
            delta: 1.0,
            lambda: 0.6,
            window: (5.0, 15.0),
            tau: 7.2,
            theta: 0.0,
            sigma_belief: 1.0,
            sigma_outcome: 1.0,
            belief_mean: 10.0,
            anchors: AnchorDesign::Pair { low: 8.0, high: 12.0 },
            no_anchor_arm: false,
            seed: 20_240_701,
        }
    }
}

impl SimConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n < 4 {
            return bad(format!("n must be >= 4, got {}", self.n));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.window.0 < self.window.1) {
            return bad(format!("window [{}, {}] is empty", self.window.0, self.window.1));
        }
        if !(self.sigma_belief >= 0.0 && self.sigma_outcome >= 0.0) {
            return bad("noise standard deviations must be non-negative".into());
        }
        let values = self.anchors.values();
        if values.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return bad("anchor values must be finite and >= 0".into());
        }
        match &self.anchors {
            AnchorDesign::Pair { low, high } if !(low < high) => {
                bad(format!("anchor pair needs low < high, got ({low}, {high})"))
            }
            AnchorDesign::Grid(g) if g.len() < 2 => bad("anchor grid needs at least two values".into()),
            _ => Ok(()),
        }
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the substream at `path` below `master`.
pub fn substream_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// Seed for replicate `r` of a run with master seed `master`.
pub fn replicate_seed(master: u64, r: usize) -> u64 {
    substream_seed(master, &[REPLICATE_STREAM, r as u64])
}

fn plausibility(anchor: f64, window: (f64, f64)) -> f64 {
    let (lo, hi) = window;
    let margin = 0.5 * (hi - lo);
    if anchor < lo {
        (1.0 - (lo - anchor) / margin).max(0.0)
    } else if anchor > hi {
        (1.0 - (anchor - hi) / margin).max(0.0)
    } else {
        1.0
    }
}

/// Belief after seeing `anchor`, starting from baseline belief `b0`.
pub fn anchor_response(b0: f64, anchor: f64, lambda: f64, window: (f64, f64)) -> f64 {
    b0 + lambda * plausibility(anchor, window) * (anchor - b0)
}

/// Remaining anchor pull after `t` days.
pub fn decay_apply(pull: f64, t: f64, tau: f64) -> f64 {
    pull * (-t / tau).exp()
}

/// Time constant that reduces the pull to `ratio` after `t` days.
pub fn decay_time_constant(ratio: f64, t: f64) -> Result<f64> {
    if !(ratio > 0.0 && ratio < 1.0 && t > 0.0) {
        return Err(Error::Domain(format!("need 0 < ratio < 1 and t > 0, got ratio {ratio}, t {t}")));
    }
    Ok(-t / ratio.ln())
}

/// Expected high-minus-low difference in mean belief at lag `t` for a pair design.
pub fn expected_anchoring_effect(cfg: &SimConfig, t: f64) -> Option<f64> {
    match cfg.anchors {
        AnchorDesign::Pair { low, high } => {
            let mean_at = |a: f64| cfg.lambda * plausibility(a, cfg.window) * (a - cfg.belief_mean);
            Some(decay_apply(mean_at(high) - mean_at(low), t, cfg.tau))
        }
        AnchorDesign::Grid(_) => None,
    }
}

/// One simulated population, observed at each lag in `wave_lags` (days since
/// anchor exposure; wave k is interviewed at `wave_lags[k-1]`).
///
/// Interview days are the lags rounded to whole days. The latent confounder is
/// stored as the `confounder` covariate.
pub fn generate_population(cfg: &SimConfig, wave_lags: &[f64]) -> Result<ExperimentDataset> {
    cfg.validate()?;
    let lags: &[f64] = if wave_lags.is_empty() { &[0.0] } else { wave_lags };
    if lags.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::InvalidConfig("wave lags must be finite and >= 0".into()));
    }
    let anchors = cfg.anchors.values();
    let arms = anchors.len() + usize::from(cfg.no_anchor_arm);

    let mut per_wave: Vec<Vec<ParticipantRecord>> = vec![Vec::with_capacity(cfg.n); lags.len()];
    for i in 0..cfg.n {
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, &[i as u64]));
        let c: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.sample(StandardNormal);
        let arm = rng.random_range(0..arms);
        let b0 = cfg.belief_mean + cfg.delta * c + cfg.sigma_belief * u;
        let anchor = anchors.get(arm).copied();
        let pull = anchor.map_or(0.0, |a| anchor_response(b0, a, cfg.lambda, cfg.window) - b0);
        let direct = match anchor {
            Some(a) if cfg.anchors.is_high(a) => cfg.theta,
            _ => 0.0,
        };
        let condition = anchor.map_or(AnchorCondition::NoAnchor, AnchorCondition::Anchor);

        for (w, &lag) in lags.iter().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            let belief = b0 + decay_apply(pull, lag, cfg.tau);
            let y = cfg.beta0 + cfg.beta1 * belief + cfg.gamma * c + direct + cfg.sigma_outcome * e;
            per_wave[w].push(
                ParticipantRecord::new(format!("p{i}"), condition, belief)
                    .with_outcome(OUTCOME, y)
                    .with_covariate(CONFOUNDER, c)
                    .with_wave(w as u32 + 1)
                    .with_day(lag.round() as i64),
            );
        }
    }
    ExperimentDataset::new(
        per_wave.into_iter().flatten().collect(),
        vec![OutcomeSpec { name: OUTCOME.into(), kind: OutcomeKind::Continuous }],
    )
}

/// Runs `f(replicate, seed)` for every replicate, in parallel, returning
/// results in replicate order.
pub fn replicate_map<T, F>(master_seed: u64, replicates: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, u64) -> T + Sync + Send,
{
    (0..replicates).into_par_iter().map(|r| f(r, replicate_seed(master_seed, r))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    Ols,
    Iv,
    Wald,
}

/// Per-replicate draws kept for oracle checks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplicateDraw {
    pub ols: Option<(f64, f64, usize)>,
    pub iv: Option<(f64, f64, usize)>,
    pub wald: Option<f64>,
    /// First-stage coefficient of the (first) instrument.
    pub first_stage: Option<f64>,
    pub first_stage_f: Option<f64>,
    /// In-sample `gamma · Cov(C, b) / Var(b)`.
    pub analytic_ols_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub mean: f64,
    pub sd: f64,
    pub mc_se: f64,
    pub bias: f64,
    pub mean_se: Option<f64>,
    /// Share of 95% CIs covering the true `beta1`.
    pub coverage: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub replicates: usize,
    pub beta1: f64,
    pub estimators: Vec<EstimatorSummary>,
    pub analytic_ols_bias: f64,
    pub mean_first_stage: f64,
    /// Mean of `theta / α̂₁` across replicates: the IV bias under a direct effect.
    pub mean_direct_effect_bias: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub draws: Vec<ReplicateDraw>,
}

impl McSummary {
    pub fn get(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e)
    }
}

pub const MIN_REPLICATES: usize = 100;
const FAILURE_WARN_SHARE: f64 = 0.05;

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n
}

/// Estimates on one simulated dataset.
pub fn replicate_draw(cfg: &SimConfig, estimators: &[Estimator]) -> Result<ReplicateDraw> {
    let ds = generate_population(cfg, &[0.0])?;
    let beliefs = ds.beliefs();
    let conf: Vec<f64> = ds.records.iter().map(|r| r.covariates[CONFOUNDER]).collect();
    let mut draw = ReplicateDraw {
        analytic_ols_bias: cfg.gamma * cov(&conf, &beliefs) / cov(&beliefs, &beliefs),
        ..Default::default()
    };
    let scheme = match cfg.anchors {
        AnchorDesign::Pair { .. } => InstrumentScheme::BinaryHighLow,
        AnchorDesign::Grid(_) => InstrumentScheme::Continuous,
    };
    let anchored = ds.filter(|r| r.condition.is_anchored());
    if estimators.contains(&Estimator::Ols) {
        if let Ok(fit) = iv::ols_on_belief(&anchored, OUTCOME, &[]) {
            let t = fit.term(BELIEF).expect("belief term");
            draw.ols = Some((t.estimate, t.std_error, fit.df_resid));
        }
    }
    if estimators.contains(&Estimator::Iv) {
        if let Ok(fit) = iv::two_sls(&anchored, OUTCOME, scheme, &[]) {
            let t = fit.belief();
            draw.iv = Some((t.estimate, t.std_error, fit.n - 2));
            draw.first_stage = fit.first_stage.terms.get(1).map(|t| t.estimate);
            draw.first_stage_f = Some(fit.first_stage_f);
        }
    }
    if estimators.contains(&Estimator::Wald) {
        draw.wald = iv::wald_estimate(&anchored, OUTCOME).ok();
    }
    Ok(draw)
}

fn summarize(
    e: Estimator,
    beta1: f64,
    values: &[(f64, Option<(f64, usize)>)],
    failures: usize,
) -> Result<EstimatorSummary> {
    let r = values.len() as f64;
    let mean = values.iter().map(|v| v.0).sum::<f64>() / r;
    let sd = (values.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
    let with_se: Vec<(f64, f64, usize)> =
        values.iter().filter_map(|(est, s)| s.map(|(se, df)| (*est, se, df))).collect();
    let (mean_se, coverage) = if with_se.is_empty() {
        (None, None)
    } else {
        let mut crit_cache: Vec<(usize, f64)> = Vec::new();
        let mut covered = 0usize;
        for &(est, se, df) in &with_se {
            let crit = match crit_cache.iter().find(|(d, _)| *d == df) {
                Some(&(_, c)) => c,
                None => {
                    let c = dist::t_quantile(0.975, df as f64)?;
                    crit_cache.push((df, c));
                    c
                }
            };
            if (est - beta1).abs() <= crit * se {
                covered += 1;
            }
        }
        let m = with_se.iter().map(|v| v.1).sum::<f64>() / with_se.len() as f64;
        (Some(m), Some(covered as f64 / with_se.len() as f64))
    };
    Ok(EstimatorSummary {
        estimator: e,
        mean,
        sd,
        mc_se: sd / r.sqrt(),
        bias: mean - beta1,
        mean_se,
        coverage,
        failures,
    })
}

/// Bias, spread and CI coverage of the chosen estimators over `replicates`
/// independent simulated datasets.
pub fn monte_carlo(cfg: &SimConfig, replicates: usize, estimators: &[Estimator]) -> Result<McSummary> {
    cfg.validate()?;
    if replicates < MIN_REPLICATES {
        return Err(Error::InvalidConfig(format!("need at least {MIN_REPLICATES} replicates, got {replicates}")));
    }
    let draws: Vec<ReplicateDraw> =
        replicate_map(cfg.seed, replicates, |_, seed| replicate_draw(&cfg.with_seed(seed), estimators))
            .into_iter()
            .collect::<Result<_>>()?;

    let mut summaries = Vec::new();
    let mut warnings = Vec::new();
    for &e in estimators {
        let values: Vec<(f64, Option<(f64, usize)>)> = draws
            .iter()
            .filter_map(|d| match e {
                Estimator::Ols => d.ols.map(|(b, se, df)| (b, Some((se, df)))),
                Estimator::Iv => d.iv.map(|(b, se, df)| (b, Some((se, df)))),
                Estimator::Wald => d.wald.map(|b| (b, None)),
            })
            .collect();
        let failures = replicates - values.len();
        if failures as f64 > FAILURE_WARN_SHARE * replicates as f64 {
            let msg = format!("{e:?}: {failures} of {replicates} replicates failed to estimate");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        if values.len() >= 2 {
            summaries.push(summarize(e, cfg.beta1, &values, failures)?);
        }
    }

    let r = draws.len() as f64;
    let alphas: Vec<f64> = draws.iter().filter_map(|d| d.first_stage).collect();
    Ok(McSummary {
        replicates,
        beta1: cfg.beta1,
        estimators: summaries,
        analytic_ols_bias: draws.iter().map(|d| d.analytic_ols_bias).sum::<f64>() / r,
        mean_first_stage: alphas.iter().sum::<f64>() / alphas.len().max(1) as f64,
        mean_direct_effect_bias: alphas.iter().map(|a| cfg.theta / a).sum::<f64>() / alphas.len().max(1) as f64,
        warnings,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_response_examples() {
        assert_eq!(anchor_response(40.0, 60.0, 0.0, (0.0, 100.0)), 40.0);
        assert_eq!(anchor_response(40.0, 60.0, 1.0, (0.0, 100.0)), 60.0);
        assert_eq!(anchor_response(40.0, 60.0, 0.5, (0.0, 100.0)), 50.0);
        // half way through the taper: plaus = 0.5
        assert_eq!(anchor_response(50.0, 87.5, 1.0, (25.0, 75.0)), 50.0 + 0.5 * 37.5);
        assert_eq!(anchor_response(50.0, 200.0, 1.0, (25.0, 75.0)), 50.0);
    }

    #[test]
    fn decay_examples() {
        assert_eq!(decay_apply(3.0, 0.0, 7.2), 3.0);
        assert!((decay_apply(2.0, 7.2, 7.2) - 2.0 * (-1.0f64).exp()).abs() < 1e-12);
        let tau = decay_time_constant(4.71 / 16.09, 8.8).unwrap();
        assert!((tau - 7.2).abs() < 0.05, "{tau}");
    }

    #[test]
    fn config_validation() {
        let c = SimConfig { lambda: 1.5, ..SimConfig::default() };
        assert!(matches!(generate_population(&c, &[0.0]), Err(Error::InvalidConfig(_))));
        let c = SimConfig { n: 3, ..SimConfig::default() };
        assert!(c.validate().is_err());
        let c: SimConfig = serde_json::from_str(r#"{"n": 50, "anchors": {"grid": [0, 2, 4]}}"#).unwrap();
        assert_eq!(c.anchors, AnchorDesign::Grid(vec![0.0, 2.0, 4.0]));
        assert_eq!(c.beta1, 0.5);
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let cfg = SimConfig { n: 200, ..SimConfig::default() };
        let a = generate_population(&cfg, &[0.0, 8.8]).unwrap();
        let b = generate_population(&cfg, &[0.0, 8.8]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 400);
        assert_eq!(a.wave(2).records[0].interview_day, Some(9));
        let c = generate_population(&cfg.with_seed(1), &[0.0]).unwrap();
        assert_ne!(a.wave(1).records[0].belief, c.records[0].belief);
    }

    #[test]
    fn replicate_map_is_order_independent() {
        let seq: Vec<u64> = (0..64).map(|r| replicate_seed(9, r)).collect();
        let par = replicate_map(9, 64, |_, s| s);
        assert_eq!(seq, par);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| replicate_map(9, 64, |_, s| s));
        assert_eq!(par, single);
    }

    #[test]
    fn noiseless_design_makes_every_estimator_exact() {
        let cfg = SimConfig { n: 80, gamma: 0.0, theta: 0.0, sigma_outcome: 0.0, ..SimConfig::default() };
        let s = monte_carlo(&cfg, 100, &[Estimator::Ols, Estimator::Iv, Estimator::Wald]).unwrap();
        for d in &s.draws {
            assert!((d.ols.unwrap().0 - 0.5).abs() < 1e-10);
            assert!((d.iv.unwrap().0 - 0.5).abs() < 1e-10);
            assert!((d.wald.unwrap() - 0.5).abs() < 1e-10);
        }
    }

    #[test]
    fn unconfounded_ols_recovers_slope() {
        let cfg = SimConfig { n: 20_000, gamma: 0.0, ..SimConfig::default() };
        let ds = generate_population(&cfg, &[0.0]).unwrap();
        let fit = iv::ols_on_belief(&ds, OUTCOME, &[]).unwrap();
        let t = fit.term(BELIEF).unwrap();
        assert!((t.estimate - 0.5).abs() < 4.0 * t.std_error);
    }

    #[test]
    fn monte_carlo_rejects_too_few_replicates() {
        assert!(monte_carlo(&SimConfig::default(), 10, &[Estimator::Iv]).is_err());
    }
}
