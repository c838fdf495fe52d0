//! Ordinary least squares with classical inference.
//!
//! Fits are computed from a Householder QR decomposition with column
//! pivoting; the normal equations are never formed. Rank is decided at a
//! relative tolerance of 1e-10 against the largest pivot.

use serde::{Deserialize, Serialize};

use crate::dist;
use crate::error::{Error, Result};

/// Name given to the all-ones column.
pub const INTERCEPT: &str = "const";

const RANK_TOL: f64 = 1e-10;

/// Regressor matrix stored by column, with unique column names.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n: usize,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl DesignMatrix {
    /// Design with an intercept as its first column.
    pub fn with_intercept(n: usize) -> Self {
        Self { n, names: vec![INTERCEPT.to_string()], columns: vec![vec![1.0; n]] }
    }

    /// Design with the intercept suppressed.
    pub fn without_intercept(n: usize) -> Self {
        Self { n, names: Vec::new(), columns: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.n {
            return Err(Error::InvalidInput(format!(
                "column `{name}` has {} rows, design has {}",
                values.len(),
                self.n
            )));
        }
        if self.names.contains(&name) {
            return Err(Error::InvalidInput(format!("duplicate column name `{name}`")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("column `{name}` contains non-finite values")));
        }
        self.names.push(name);
        self.columns.push(values);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        self.push(name, values)?;
        Ok(self)
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn has_intercept(&self) -> bool {
        self.names.first().map(|n| n == INTERCEPT).unwrap_or(false)
    }

    /// `X · beta`.
    pub fn mul_vec(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (col, b) in self.columns.iter().zip(beta) {
            for (o, x) in out.iter_mut().zip(col) {
                *o += b * x;
            }
        }
        out
    }

    /// Copy of this design with one column's values replaced.
    pub fn replace(&self, name: &str, values: Vec<f64>) -> Result<Self> {
        let idx = self.names.iter().position(|n| n == name).ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        if values.len() != self.n {
            return Err(Error::InvalidInput(format!("replacement for `{name}` has wrong length")));
        }
        let mut out = self.clone();
        out.columns[idx] = values;
        Ok(out)
    }
}

/// Standard-error estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    /// σ̂²·(XᵀX)⁻¹ with σ̂² = RSS/(n − k).
    #[default]
    Classical,
    /// White sandwich with the n/(n − k) small-sample factor.
    Hc1,
}

/// One row of a coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionFit {
    pub terms: Vec<Term>,
    pub rss: f64,
    pub r2: f64,
    pub adj_r2: f64,
    pub df_resid: usize,
    pub n: usize,
    pub covariance: CovarianceKind,
    /// (XᵀX)⁻¹, in term order.
    #[serde(skip)]
    pub xtx_inv: Vec<Vec<f64>>,
    /// Coefficient covariance matrix, in term order.
    #[serde(skip)]
    pub vcov: Vec<Vec<f64>>,
    #[serde(skip)]
    pub residuals: Vec<f64>,
    #[serde(skip)]
    pub fitted: Vec<f64>,
}

impl RegressionFit {
    pub fn term(&self, name: &str) -> Option<&Term> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.term(name).map(|t| t.estimate)
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.estimate).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.terms.iter().map(|t| t.name.as_str()).collect()
    }

    /// σ̂² = RSS / df_resid.
    pub fn sigma2(&self) -> f64 {
        self.rss / self.df_resid as f64
    }
}

/// Thin QR factorization `X P = Q R` kept in Householder form.
struct PivotedQr {
    /// Householder vectors (full length n, zeros above the diagonal).
    reflectors: Vec<Vec<f64>>,
    /// R, stored by row: `r[i][j]` for j ≥ i.
    r: Vec<Vec<f64>>,
    /// `perm[j]` is the original column at pivot position j.
    perm: Vec<usize>,
}

impl PivotedQr {
    fn factor(design: &DesignMatrix) -> Result<Self> {
        let n = design.nrows();
        let k = design.ncols();
        let mut cols: Vec<Vec<f64>> = design.columns().to_vec();
        let mut perm: Vec<usize> = (0..k).collect();
        let mut reflectors = Vec::with_capacity(k);
        let mut r = vec![vec![0.0; k]; k];
        let mut first_pivot = 0.0;

        for j in 0..k {
            // pivot on the largest remaining column norm
            let (best, best_norm2) = (j..k)
                .map(|c| (c, cols[c][j..].iter().map(|v| v * v).sum::<f64>()))
                .fold((j, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
            cols.swap(j, best);
            perm.swap(j, best);
            for row in r.iter_mut().take(j) {
                row.swap(j, best);
            }

            let norm = best_norm2.sqrt();
            if j == 0 {
                first_pivot = norm;
            }
            if norm == 0.0 || norm <= RANK_TOL * first_pivot {
                return Err(Error::SingularDesign(design.names()[perm[j]].clone()));
            }

            let x0 = cols[j][j];
            let alpha = if x0 >= 0.0 { -norm } else { norm };
            let mut v = vec![0.0; n];
            v[j] = x0 - alpha;
            v[(j + 1)..n].copy_from_slice(&cols[j][(j + 1)..n]);
            let vtv: f64 = v[j..].iter().map(|a| a * a).sum();

            r[j][j] = alpha;
            cols[j][j] = alpha;
            for x in cols[j][(j + 1)..].iter_mut() {
                *x = 0.0;
            }
            if vtv > 0.0 {
                for c in (j + 1)..k {
                    let dot: f64 = v[j..].iter().zip(&cols[c][j..]).map(|(a, b)| a * b).sum();
                    let s = 2.0 * dot / vtv;
                    for (x, a) in cols[c][j..].iter_mut().zip(&v[j..]) {
                        *x -= s * a;
                    }
                }
            }
            for c in (j + 1)..k {
                r[j][c] = cols[c][j];
            }
            reflectors.push(v);
        }
        Ok(Self { reflectors, r, perm })
    }

    /// `Qᵀ y`.
    fn qt_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = y.to_vec();
        for (j, v) in self.reflectors.iter().enumerate() {
            let vtv: f64 = v[j..].iter().map(|a| a * a).sum();
            if vtv == 0.0 {
                continue;
            }
            let dot: f64 = v[j..].iter().zip(&out[j..]).map(|(a, b)| a * b).sum();
            let s = 2.0 * dot / vtv;
            for (o, a) in out[j..].iter_mut().zip(&v[j..]) {
                *o -= s * a;
            }
        }
        out
    }

    /// Least-squares coefficients in original column order.
    fn solve(&self, y: &[f64]) -> Vec<f64> {
        let k = self.perm.len();
        let qty = self.qt_mul(y);
        let mut z = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = qty[i];
            for j in (i + 1)..k {
                s -= self.r[i][j] * z[j];
            }
            z[i] = s / self.r[i][i];
        }
        let mut beta = vec![0.0; k];
        for (pos, &orig) in self.perm.iter().enumerate() {
            beta[orig] = z[pos];
        }
        beta
    }

    /// (XᵀX)⁻¹ = P R⁻¹ R⁻ᵀ Pᵀ, in original column order.
    fn xtx_inverse(&self) -> Vec<Vec<f64>> {
        let k = self.perm.len();
        let mut rinv = vec![vec![0.0; k]; k];
        for i in (0..k).rev() {
            rinv[i][i] = 1.0 / self.r[i][i];
            for j in (i + 1)..k {
                let mut s = 0.0;
                for m in (i + 1)..=j {
                    s += self.r[i][m] * rinv[m][j];
                }
                rinv[i][j] = -s / self.r[i][i];
            }
        }
        let mut out = vec![vec![0.0; k]; k];
        for a in 0..k {
            for b in a..k {
                let s: f64 = (b..k).map(|m| rinv[a][m] * rinv[b][m]).sum();
                let (oa, ob) = (self.perm[a], self.perm[b]);
                out[oa][ob] = s;
                out[ob][oa] = s;
            }
        }
        out
    }
}

/// OLS with classical homoskedastic standard errors.
pub fn ols_fit(x: &DesignMatrix, y: &[f64]) -> Result<RegressionFit> {
    ols_fit_with(x, y, CovarianceKind::Classical)
}

/// OLS with a chosen standard-error estimator.
pub fn ols_fit_with(x: &DesignMatrix, y: &[f64], covariance: CovarianceKind) -> Result<RegressionFit> {
    let n = x.nrows();
    let k = x.ncols();
    if y.len() != n {
        return Err(Error::InvalidInput(format!("response has {} rows, design has {n}", y.len())));
    }
    if k == 0 {
        return Err(Error::InvalidInput("design has no columns".into()));
    }
    if n <= k {
        return Err(Error::InsufficientData { n, k });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("response contains non-finite values".into()));
    }

    let qr = PivotedQr::factor(x)?;
    let beta = qr.solve(y);
    let fitted = x.mul_vec(&beta);
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let rss: f64 = residuals.iter().map(|e| e * e).sum();
    let df_resid = n - k;
    let xtx_inv = qr.xtx_inverse();

    let vcov = match covariance {
        CovarianceKind::Classical => {
            let s2 = rss / df_resid as f64;
            scale_matrix(&xtx_inv, s2)
        }
        CovarianceKind::Hc1 => hc1_vcov(x, &xtx_inv, &residuals),
    };

    let tss = if x.has_intercept() {
        let mean = y.iter().sum::<f64>() / n as f64;
        y.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
    } else {
        y.iter().map(|v| v * v).sum::<f64>()
    };
    let r2 = if tss > 0.0 { (1.0 - rss / tss).clamp(0.0, 1.0) } else { 0.0 };
    let dof_total = if x.has_intercept() { n - 1 } else { n };
    let adj_r2 = 1.0 - (1.0 - r2) * dof_total as f64 / df_resid as f64;

    let terms = build_terms(x.names(), &beta, &vcov, df_resid)?;
    Ok(RegressionFit { terms, rss, r2, adj_r2, df_resid, n, covariance, xtx_inv, vcov, residuals, fitted })
}

fn scale_matrix(m: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    m.iter().map(|row| row.iter().map(|v| v * s).collect()).collect()
}

fn hc1_vcov(x: &DesignMatrix, xtx_inv: &[Vec<f64>], residuals: &[f64]) -> Vec<Vec<f64>> {
    let k = x.ncols();
    let n = x.nrows();
    let cols = x.columns();
    let mut meat = vec![vec![0.0; k]; k];
    for i in 0..n {
        let e2 = residuals[i] * residuals[i];
        for a in 0..k {
            for b in a..k {
                meat[a][b] += e2 * cols[a][i] * cols[b][i];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            meat[a][b] = meat[b][a];
        }
    }
    let bread_meat = mat_mul(xtx_inv, &meat);
    let sandwich = mat_mul(&bread_meat, xtx_inv);
    scale_matrix(&sandwich, n as f64 / (n - k) as f64)
}

pub(crate) fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = b.first().map(|r| r.len()).unwrap_or(0);
    a.iter().map(|row| (0..k).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect()).collect()
}

pub(crate) fn build_terms(names: &[String], beta: &[f64], vcov: &[Vec<f64>], df_resid: usize) -> Result<Vec<Term>> {
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let se = vcov[i][i].max(0.0).sqrt();
            let t = beta[i] / se;
            let p = if t.is_nan() { f64::NAN } else { dist::t_two_sided_p(t, df_resid as f64)? };
            Ok(Term { name: name.clone(), estimate: beta[i], std_error: se, t_value: t, p_value: p })
        })
        .collect()
}

/// Result of a nested-model F test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FTest {
    pub f: f64,
    pub p: f64,
    pub df_num: usize,
    pub df_den: usize,
}

/// F test of `q` linear restrictions: `((RSS_r − RSS_f)/q) / (RSS_f/df_f)`.
pub fn f_test_nested(full: &RegressionFit, restricted: &RegressionFit, q: usize) -> Result<FTest> {
    if q == 0 {
        return Err(Error::InvalidInput("F test needs at least one restriction".into()));
    }
    if full.n != restricted.n {
        return Err(Error::InvalidInput(format!(
            "nested models fitted on different samples ({} vs {})",
            full.n, restricted.n
        )));
    }
    let tol = 1e-9 * full.rss.max(restricted.rss).max(f64::MIN_POSITIVE) + 1e-300;
    let diff = restricted.rss - full.rss;
    if diff < -tol {
        return Err(Error::NestingViolation { restricted: restricted.rss, full: full.rss });
    }
    let df_den = full.df_resid;
    let f = diff.max(0.0) / q as f64 / (full.rss / df_den as f64);
    let p = dist::f_sf(f, q as f64, df_den as f64)?;
    Ok(FTest { f, p, df_num: q, df_den })
}
