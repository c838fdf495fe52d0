//! Statistical properties of the estimators checked against the simulator.

use abcd_core::design::{curve_extrema, AnchorScale, ResponseCurve};
use abcd_core::diagnostics::{decay_analysis, placebo_matrix};
use abcd_core::iv::anchoring_effect;
use abcd_core::simulate::{
    expected_anchoring_effect, generate_population, monte_carlo, replicate_map, substream_seed, AnchorDesign,
    Estimator, SimConfig,
};
use proptest::prelude::*;

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn ols_and_iv_agree_without_confounding() {
    let cfg = SimConfig { gamma: 0.0, n: 500, seed: 31, ..SimConfig::default() };
    let s = monte_carlo(&cfg, 200, &[Estimator::Ols, Estimator::Iv]).unwrap();
    let ols = s.get(Estimator::Ols).unwrap();
    let iv = s.get(Estimator::Iv).unwrap();
    assert!(ols.bias.abs() < 3.0 * ols.mc_se, "OLS bias {} (mc se {})", ols.bias, ols.mc_se);
    assert!(iv.bias.abs() < 3.0 * iv.mc_se);
    assert!(s.analytic_ols_bias.abs() < 1e-12);
}

#[test]
fn anchoring_effect_matches_analytic_expectation() {
    // one anchor sits in the taper, so plausibility enters
    let cfg =
        SimConfig { anchors: AnchorDesign::Pair { low: 8.0, high: 17.5 }, seed: 32, n: 400, ..SimConfig::default() };
    let effects: Vec<f64> = replicate_map(cfg.seed, 300, |_, seed| {
        anchoring_effect(&generate_population(&SimConfig { seed, ..cfg.clone() }, &[0.0]).unwrap()).unwrap().effect
    });
    let (m, sd) = mean_sd(&effects);
    let want = expected_anchoring_effect(&cfg, 0.0).unwrap();
    // 0.6·(0.5·7.5 − 1·(−2)) = 3.45
    assert!((want - 3.45).abs() < 1e-12);
    assert!((m - want).abs() < 3.0 * sd / (effects.len() as f64).sqrt(), "{m} vs {want}");
}

#[test]
fn decay_ratio_stays_in_unit_interval() {
    for (lag, tau) in [(3.0, 7.2), (9.0, 7.2), (9.0, 40.0)] {
        let cfg = SimConfig { tau, n: 300, seed: 33, ..SimConfig::default() };
        let ds = generate_population(&cfg, &[0.0, lag]).unwrap();
        let r = decay_analysis(&ds.wave(1), &ds.wave(2), &[(0, 30)]).unwrap();
        let ratio = r.decay_ratio.unwrap();
        let lagged = r.pooled.as_ref().unwrap();
        // delta-method SE of the ratio, dominated by the lagged effect's SE
        let se = ratio
            * ((lagged.se / lagged.effect).powi(2) + (r.instantaneous.se / r.instantaneous.effect).powi(2)).sqrt();
        assert!(ratio > -2.0 * se && ratio < 1.0 + 2.0 * se, "lag {lag}, tau {tau}: {ratio} ± {se}");
    }
}

#[test]
fn placebo_cells_center_on_zero() {
    let first = SimConfig { n: 300, seed: 34, ..SimConfig::default() };
    let second =
        SimConfig { anchors: AnchorDesign::Pair { low: 2.0, high: 18.0 }, window: (0.0, 20.0), ..first.clone() };
    let coefs: Vec<f64> = replicate_map(first.seed, 300, |_, seed| {
        let a = generate_population(&SimConfig { seed: substream_seed(seed, &[1]), ..first.clone() }, &[0.0]).unwrap();
        let b = generate_population(&SimConfig { seed: substream_seed(seed, &[2]), ..second.clone() }, &[0.0]).unwrap();
        let m = placebo_matrix(&[("a", &a), ("b", &b)]).unwrap();
        m.placebo_cells().map(|c| c.coefficient).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let (m, sd) = mean_sd(&coefs);
    assert!(m.abs() < 3.0 * sd / (coefs.len() as f64).sqrt(), "mean placebo coefficient {m}");
}

#[test]
fn monte_carlo_is_thread_count_invariant() {
    let cfg = SimConfig { n: 200, seed: 35, ..SimConfig::default() };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| monte_carlo(&cfg, 100, &[Estimator::Ols, Estimator::Iv, Estimator::Wald]).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a, b);
    assert_eq!(a.draws, b.draws);
}

#[test]
fn wald_equals_iv_in_every_replicate() {
    let cfg = SimConfig { n: 200, seed: 36, ..SimConfig::default() };
    let s = monte_carlo(&cfg, 100, &[Estimator::Iv, Estimator::Wald]).unwrap();
    for d in &s.draws {
        assert!((d.iv.unwrap().0 - d.wald.unwrap()).abs() < 1e-10);
    }
}

#[test]
fn extrema_of_simulated_pilot_match_dense_grid() {
    use abcd_core::design::fit_response_polynomial;
    let cfg = SimConfig {
        n: 4000,
        anchors: AnchorDesign::Grid((0..=20).map(f64::from).collect()),
        seed: 37,
        ..SimConfig::default()
    };
    let pilot = generate_population(&cfg, &[0.0]).unwrap();
    let curve = fit_response_polynomial(&pilot, 3, AnchorScale::Raw).unwrap();
    let e = curve_extrema(&curve).unwrap();
    let grid: Vec<f64> = (0..=200_000).map(|i| 20.0 * i as f64 / 200_000.0).collect();
    let argmin = grid.iter().copied().min_by(|a, b| curve.eval(*a).total_cmp(&curve.eval(*b))).unwrap();
    let argmax = grid.iter().copied().max_by(|a, b| curve.eval(*a).total_cmp(&curve.eval(*b))).unwrap();
    assert!((e.argmin - argmin).abs() < 1e-3, "{} vs {argmin}", e.argmin);
    assert!((e.argmax - argmax).abs() < 1e-3, "{} vs {argmax}", e.argmax);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn extrema_are_global_on_domain(
        c0 in -5.0f64..5.0, c1 in -5.0f64..5.0, c2 in -2.0f64..2.0, c3 in -1.0f64..1.0, hi in 1.0f64..10.0,
    ) {
        prop_assume!(c1.abs() + c2.abs() + c3.abs() > 1e-3);
        let curve = ResponseCurve::new(vec![c0, c1, c2, c3], AnchorScale::Raw, (0.0, hi)).unwrap();
        let e = curve_extrema(&curve).unwrap();
        let lo_v = curve.eval(e.argmin);
        let hi_v = curve.eval(e.argmax);
        for i in 0..=2000 {
            let x = hi * i as f64 / 2000.0;
            let v = curve.eval(x);
            prop_assert!(v >= lo_v - 1e-9 && v <= hi_v + 1e-9);
        }
    }
}
