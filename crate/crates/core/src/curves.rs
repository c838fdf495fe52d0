//! Plot data: kernel densities, a local-linear smoother and effect bars,
//! emitted as CSV or a bare-bones SVG.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KDE_POINTS: usize = 512;
/// KDE grid extends this many bandwidths past the data.
pub const KDE_PAD_BANDWIDTHS: f64 = 4.0;
pub const SMOOTH_POINTS: usize = 101;
const Z_95: f64 = 1.959_963_984_540_054;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Kde,
    LocalLinear,
    EffectBar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub kind: CurveKind,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_lo: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_hi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl CurveSeries {
    pub fn new(kind: CurveKind, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let s = Self { kind, x, y, ci_lo: None, ci_hi: None, warnings: Vec::new() };
        s.validate()?;
        Ok(s)
    }

    pub fn with_ci(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        self.ci_lo = Some(lo);
        self.ci_hi = Some(hi);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.x.len();
        let lens_ok = self.y.len() == n
            && self.ci_lo.as_ref().is_none_or(|v| v.len() == n)
            && self.ci_hi.as_ref().is_none_or(|v| v.len() == n);
        if !lens_ok {
            return Err(Error::InvalidInput("curve vectors differ in length".into()));
        }
        if !self.x.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidInput("curve x values must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Trapezoid-rule integral of y over x.
    pub fn integral(&self) -> f64 {
        self.x.windows(2).zip(self.y.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
    }

    /// CSV with columns `x,y,ci_lo,ci_hi` (CI cells empty when absent).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "y", "ci_lo", "ci_hi"])?;
        for i in 0..self.x.len() {
            let opt = |v: &Option<Vec<f64>>| v.as_ref().map(|v| v[i].to_string()).unwrap_or_default();
            w.write_record([self.x[i].to_string(), self.y[i].to_string(), opt(&self.ci_lo), opt(&self.ci_hi)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Quantile with linear interpolation between order statistics.
fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule `0.9 · min(SD, IQR/1.34) · n^(−1/5)`.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InsufficientData { n: values.len(), k: 2 });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::ZeroSpread(values.len()));
    }
    let (_, sd) = mean_sd(values);
    let iqr = quantile_linear(&sorted, 0.75) - quantile_linear(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (values.len() as f64).powf(-0.2))
}

/// Gaussian kernel density on a 512-point grid.
pub fn kde(values: &[f64], bandwidth: Option<f64>) -> Result<CurveSeries> {
    if values.len() < 2 {
        return Err(Error::InsufficientData { n: values.len(), k: 2 });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("kde input contains non-finite values".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::ZeroSpread(values.len()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Domain(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(values)?,
    };
    let start = lo - KDE_PAD_BANDWIDTHS * h;
    let step = (hi - lo + 2.0 * KDE_PAD_BANDWIDTHS * h) / (KDE_POINTS - 1) as f64;
    let norm = INV_SQRT_2PI / (h * values.len() as f64);
    let x: Vec<f64> = (0..KDE_POINTS).map(|i| start + step * i as f64).collect();
    let y =
        x.iter().map(|&g| values.iter().map(|v| (-0.5 * ((g - v) / h).powi(2)).exp()).sum::<f64>() * norm).collect();
    CurveSeries::new(CurveKind::Kde, x, y)
}

/// Local linear regression with Gaussian weights and pointwise 95% bands.
///
/// Evaluated at 101 evenly spaced points on `[min x, max x]`; the default
/// bandwidth is a tenth of the x range. Where fewer than two distinct x lie
/// within two bandwidths of an evaluation point, the local bandwidth is
/// widened until they do and a warning is recorded.
pub fn local_linear_smooth(x: &[f64], y: &[f64], bandwidth: Option<f64>) -> Result<CurveSeries> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput("x and y differ in length".into()));
    }
    if x.len() < 5 {
        return Err(Error::InsufficientData { n: x.len(), k: 5 });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Domain("smoother input contains non-finite values".into()));
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::ZeroSpread(x.len()));
    }
    let h0 = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Domain(format!("bandwidth must be positive, got {h}"))),
        None => (hi - lo) / 10.0,
    };

    let mut warnings = Vec::new();
    let step = (hi - lo) / (SMOOTH_POINTS - 1) as f64;
    let grid: Vec<f64> =
        (0..SMOOTH_POINTS).map(|i| if i + 1 == SMOOTH_POINTS { hi } else { lo + step * i as f64 }).collect();
    let (mut est, mut ci_lo, mut ci_hi) = (Vec::new(), Vec::new(), Vec::new());
    for &x0 in &grid {
        let mut h = h0;
        loop {
            let mut near: Vec<f64> = x.iter().copied().filter(|xi| (xi - x0).abs() <= 2.0 * h).collect();
            near.sort_by(f64::total_cmp);
            near.dedup();
            if near.len() >= 2 {
                break;
            }
            h *= 1.5;
        }
        if h != h0 {
            let msg = format!("bandwidth widened from {h0} to {h} at x = {x0}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let (a, var) = local_fit(x, y, x0, h);
        let half = Z_95 * var.max(0.0).sqrt();
        est.push(a);
        ci_lo.push(a - half);
        ci_hi.push(a + half);
    }
    let mut series = CurveSeries::new(CurveKind::LocalLinear, grid, est)?.with_ci(ci_lo, ci_hi)?;
    series.warnings = warnings;
    Ok(series)
}

/// Weighted fit of `y ~ a + b (x − x0)`; returns `a` and its sandwich variance.
fn local_fit(x: &[f64], y: &[f64], x0: f64, h: f64) -> (f64, f64) {
    let w: Vec<f64> = x.iter().map(|xi| (-0.5 * ((xi - x0) / h).powi(2)).exp()).collect();
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((xi, yi), wi) in x.iter().zip(y).zip(&w) {
        let d = xi - x0;
        s0 += wi;
        s1 += wi * d;
        s2 += wi * d * d;
        t0 += wi * yi;
        t1 += wi * d * yi;
    }
    let det = s0 * s2 - s1 * s1;
    let a = (s2 * t0 - s1 * t1) / det;
    let b = (s0 * t1 - s1 * t0) / det;
    // row 0 of (XᵀWX)⁻¹ is (s2, −s1)/det, so â = Σ l_i y_i with l_i = w_i (s2 − s1 d_i)/det
    let mut rss_w = 0.0;
    let mut l2 = 0.0;
    for ((xi, yi), wi) in x.iter().zip(y).zip(&w) {
        let d = xi - x0;
        let e = yi - a - b * d;
        rss_w += wi * e * e;
        let l = wi * (s2 - s1 * d) / det;
        l2 += l * l;
    }
    let sigma2 = rss_w / s0;
    (a, sigma2 * l2)
}

/// Minimal SVG line chart; CI bands drawn as dashed lines.
pub fn to_svg(series: &CurveSeries, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 40.0;
    let all_y = series.y.iter().chain(series.ci_lo.iter().flatten()).chain(series.ci_hi.iter().flatten()).copied();
    let (ymin, ymax) = all_y.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (xmin, xmax) = (series.x.first().copied().unwrap_or(0.0), series.x.last().copied().unwrap_or(1.0));
    let sx = |v: f64| M + (v - xmin) / (xmax - xmin).max(f64::MIN_POSITIVE) * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v - ymin) / (ymax - ymin).max(f64::MIN_POSITIVE) * (H - 2.0 * M);
    let path = |ys: &[f64]| {
        series.x.iter().zip(ys).map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect::<Vec<_>>().join(" ")
    };

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(out, r#"<text x="{M}" y="20" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        out,
        r##"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
        W - 2.0 * M,
        H - 2.0 * M
    );
    match series.kind {
        CurveKind::EffectBar => {
            let base = sy(ymin.min(0.0).max(ymin));
            for (x, y) in series.x.iter().zip(&series.y) {
                let _ = writeln!(
                    out,
                    r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="steelblue" stroke-width="12"/>"#,
                    sx(*x),
                    base,
                    sy(*y)
                );
            }
        }
        _ => {
            let _ = writeln!(out, r#"<polyline fill="none" stroke="black" points="{}"/>"#, path(&series.y));
        }
    }
    for band in [&series.ci_lo, &series.ci_hi].into_iter().flatten() {
        let _ =
            writeln!(out, r#"<polyline fill="none" stroke="gray" stroke-dasharray="4 3" points="{}"/>"#, path(band));
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn kde_integrates_to_one() {
        let c = kde(&[0.0, 1.0], Some(0.1)).unwrap();
        assert!((c.integral() - 1.0).abs() < 1e-3, "{}", c.integral());
        let c = kde(&[3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0], None).unwrap();
        assert!((c.integral() - 1.0).abs() < 1e-3);
        assert_eq!(c.x.len(), KDE_POINTS);
    }

    #[test]
    fn kde_of_normal_draws_peaks_near_analytic_density() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = kde(&draws, None).unwrap();
        let i = c.x.iter().enumerate().min_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        assert!((c.y[i] - INV_SQRT_2PI).abs() < 0.02, "{}", c.y[i]);
    }

    #[test]
    fn kde_two_points_is_bimodal() {
        let c = kde(&[0.0, 1.0], Some(0.1)).unwrap();
        let modes: Vec<f64> =
            (1..c.y.len() - 1).filter(|&i| c.y[i] > c.y[i - 1] && c.y[i] >= c.y[i + 1]).map(|i| c.x[i]).collect();
        assert_eq!(modes.len(), 2);
        assert!(modes[0].abs() < 0.01 && (modes[1] - 1.0).abs() < 0.01);
    }

    #[test]
    fn kde_rejects_constant_input() {
        assert!(matches!(kde(&[2.0, 2.0, 2.0], None), Err(Error::ZeroSpread(3))));
    }

    #[test]
    fn smoother_reproduces_lines_and_constants() {
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37) % 10.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.5 - 0.7 * v).collect();
        let c = local_linear_smooth(&x, &y, None).unwrap();
        assert_eq!(c.x.len(), SMOOTH_POINTS);
        for (gx, gy) in c.x.iter().zip(&c.y) {
            assert!((gy - (1.5 - 0.7 * gx)).abs() < 1e-8);
        }
        let flat = local_linear_smooth(&x, &vec![4.0; 30], None).unwrap();
        assert!(flat.y.iter().all(|v| (v - 4.0).abs() < 1e-10));
    }

    #[test]
    fn smoother_tracks_noiseless_cubic() {
        let f = |x: f64| 48.932 - 0.47027 * x + 0.0153 * x * x - 0.00009 * x.powi(3);
        let x: Vec<f64> = (0..=50).map(|i| 2.0 * i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let range =
            y.iter().copied().fold(f64::NEG_INFINITY, f64::max) - y.iter().copied().fold(f64::INFINITY, f64::min);
        let c = local_linear_smooth(&x, &y, None).unwrap();
        let worst = c.x.iter().zip(&c.y).map(|(gx, gy)| (gy - f(*gx)).abs()).fold(0.0, f64::max);
        assert!(worst < 0.05 * range, "worst {worst} range {range}");
    }

    #[test]
    fn sparse_windows_are_widened() {
        let x = [0.0, 0.1, 0.2, 9.8, 9.9, 10.0];
        let y = [1.0, 2.0, 1.5, 3.0, 2.5, 3.5];
        let c = local_linear_smooth(&x, &y, Some(0.2)).unwrap();
        assert!(!c.warnings.is_empty());
        assert!(c.y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn series_rejects_unsorted_x() {
        assert!(CurveSeries::new(CurveKind::EffectBar, vec![1.0, 0.0], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn svg_has_polyline() {
        let c = kde(&[0.0, 1.0, 2.0], None).unwrap();
        let svg = to_svg(&c, "beliefs <low>");
        assert!(svg.starts_with("<svg") && svg.contains("<polyline") && svg.contains("&lt;low&gt;"));
    }
}
