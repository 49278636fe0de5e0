//! LASSO term filtering and least-squares refitting.
//!
//! LASSO runs on centered, unit-variance columns and minimizes
//! `(1/(2M))‖Xβ − y‖² + λ‖β‖₁` by cyclic coordinate descent. The final
//! coefficients come from an ordinary least-squares fit with intercept on
//! the raw columns of the LASSO support. Both work from centered second
//! moments, so one moment matrix serves every target/feature split.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// Coefficients at or below this magnitude are outside the LASSO support.
pub const SUPPORT_THRESHOLD: f64 = 1e-9;

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    debug_assert!(gamma >= 0.0);
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Means and centered second moments (`Σ (a−ā)(b−b̄) / M`) of a set of columns.
#[derive(Debug, Clone)]
pub struct Moments {
    m: usize,
    means: Vec<f64>,
    cov: Vec<f64>,
}

impl Moments {
    pub fn from_columns(columns: &[&[f64]]) -> Result<Self> {
        let q = columns.len();
        let m = columns.first().map_or(0, |c| c.len());
        if m == 0 {
            return Err(Error::Argument("moments of empty columns".into()));
        }
        for (j, c) in columns.iter().enumerate() {
            if c.len() != m {
                return Err(Error::Shape(format!("column {j} has {} rows, expected {m}", c.len())));
            }
            if let Some(index) = c.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data {
                    index,
                    message: format!("non-finite entry in column {j}"),
                });
            }
        }
        let means: Vec<f64> = columns.iter().map(|c| mean(c)).collect();
        let mut cov = vec![0.0; q * q];
        for a in 0..q {
            for b in a..q {
                let v = centered_dot(columns[a], means[a], columns[b], means[b]) / m as f64;
                cov[a * q + b] = v;
                cov[b * q + a] = v;
            }
        }
        Ok(Self { m, means, cov })
    }

    pub fn from_parts(m: usize, means: Vec<f64>, cov: Vec<f64>) -> Self {
        assert_eq!(cov.len(), means.len() * means.len());
        Self { m, means, cov }
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self, j: usize) -> f64 {
        self.means[j]
    }

    pub fn cov(&self, a: usize, b: usize) -> f64 {
        self.cov[a * self.dim() + b]
    }

    fn is_constant(&self, j: usize) -> bool {
        let var = self.cov(j, j);
        var <= 0.0 || var <= (1e-13 * self.means[j]).powi(2)
    }
}

/// Four independent partial sums so the loop vectorizes; the order of
/// accumulation is fixed, so results are reproducible.
fn sum4(n: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut acc = [0.0; 4];
    let full = n - n % 4;
    for i in (0..full).step_by(4) {
        for (l, a) in acc.iter_mut().enumerate() {
            *a += f(i + l);
        }
    }
    let tail: f64 = (full..n).map(&f).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn mean(v: &[f64]) -> f64 {
    sum4(v.len(), |i| v[i]) / v.len() as f64
}

pub fn centered_dot(a: &[f64], ma: f64, b: &[f64], mb: f64) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    sum4(n, |i| (a[i] - ma) * (b[i] - mb))
}

#[derive(Debug, Clone)]
pub struct RegressionProblem {
    pub features: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub lambda: f64,
}

impl RegressionProblem {
    pub fn new(features: Vec<Vec<f64>>, target: Vec<f64>, lambda: f64) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Argument("regression needs at least one feature".into()));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Argument(format!("sparsity constant {lambda} must be finite and >= 0")));
        }
        Ok(Self {
            features,
            target,
            lambda,
        })
    }

    fn moments(&self) -> Result<Moments> {
        let mut cols: Vec<&[f64]> = self.features.iter().map(|c| c.as_slice()).collect();
        cols.push(&self.target);
        Moments::from_columns(&cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    /// Coefficients in the standardized space.
    pub beta: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Target had zero variance; `beta` is all zero.
    pub degenerate: bool,
    /// Penalized objective after each sweep.
    pub objective_trace: Vec<f64>,
}

impl LassoFit {
    pub fn support(&self) -> Vec<usize> {
        self.beta
            .iter()
            .enumerate()
            .filter(|(_, b)| b.abs() > SUPPORT_THRESHOLD)
            .map(|(j, _)| j)
            .collect()
    }
}

pub fn lasso(problem: &RegressionProblem, tol: f64, max_iter: usize) -> Result<LassoFit> {
    let moments = problem.moments()?;
    let p = problem.features.len();
    let features: Vec<usize> = (0..p).collect();
    lasso_from_moments(&moments, &features, p, problem.lambda, tol, max_iter)
}

/// LASSO of moment column `target` on moment columns `features`.
pub fn lasso_from_moments(
    moments: &Moments,
    features: &[usize],
    target: usize,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LassoFit> {
    if !(lambda >= 0.0) || !(tol > 0.0) {
        return Err(Error::Argument(format!("invalid lambda {lambda} or tol {tol}")));
    }
    let p = features.len();
    if moments.is_constant(target) {
        return Ok(LassoFit {
            beta: vec![0.0; p],
            sweeps: 0,
            converged: true,
            degenerate: true,
            objective_trace: Vec::new(),
        });
    }
    let sy = moments.cov(target, target).sqrt();
    // Constant columns never enter the model.
    let scale: Vec<Option<f64>> = features
        .iter()
        .map(|&j| (!moments.is_constant(j)).then(|| moments.cov(j, j).sqrt()))
        .collect();
    let mut gram = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for a in 0..p {
        let Some(sa) = scale[a] else { continue };
        xty[a] = moments.cov(features[a], target) / (sa * sy);
        for b in 0..p {
            if let Some(sb) = scale[b] {
                gram[a * p + b] = moments.cov(features[a], features[b]) / (sa * sb);
            }
        }
    }
    let objective = |beta: &[f64]| {
        let mut quad = 0.0;
        for a in 0..p {
            let ga: f64 = (0..p).map(|b| gram[a * p + b] * beta[b]).sum();
            quad += beta[a] * (ga - 2.0 * xty[a]);
        }
        0.5 * (1.0 + quad) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    };

    let mut beta = vec![0.0; p];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < max_iter {
        sweeps += 1;
        let mut max_step: f64 = 0.0;
        for j in 0..p {
            if scale[j].is_none() {
                continue;
            }
            let mut rho = xty[j];
            for k in 0..p {
                if k != j {
                    rho -= gram[j * p + k] * beta[k];
                }
            }
            let next = soft_threshold(rho, lambda) / gram[j * p + j];
            max_step = max_step.max((next - beta[j]).abs());
            beta[j] = next;
        }
        trace.push(objective(&beta));
        if max_step < tol {
            converged = true;
            break;
        }
    }
    Ok(LassoFit {
        beta,
        sweeps,
        converged,
        degenerate: false,
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    /// One coefficient per support column, in support order.
    pub alpha: Vec<f64>,
    pub intercept: f64,
    pub rank_deficient: bool,
}

impl OlsFit {
    /// Coefficients expanded to `p` columns, zero outside the support.
    pub fn expand(&self, support: &[usize], p: usize) -> Vec<f64> {
        let mut full = vec![0.0; p];
        for (&j, &a) in support.iter().zip(&self.alpha) {
            full[j] = a;
        }
        full
    }
}

/// Least squares with intercept on the raw columns listed in `support`.
pub fn ols_fit(features: &[Vec<f64>], target: &[f64], support: &[usize]) -> Result<OlsFit> {
    if let Some(&j) = support.iter().find(|&&j| j >= features.len()) {
        return Err(Error::Argument(format!("support index {j} out of range")));
    }
    if support.len() >= target.len() {
        return Err(Error::Argument(format!(
            "{} support columns for {} rows",
            support.len(),
            target.len()
        )));
    }
    let mut cols: Vec<&[f64]> = support.iter().map(|&j| features[j].as_slice()).collect();
    cols.push(target);
    let moments = Moments::from_columns(&cols)?;
    let idx: Vec<usize> = (0..support.len()).collect();
    Ok(ols_from_moments(&moments, &idx, support.len()))
}

/// Least squares with intercept of moment column `target` on `support`.
pub fn ols_from_moments(moments: &Moments, support: &[usize], target: usize) -> OlsFit {
    let s = support.len();
    if s == 0 {
        return OlsFit {
            alpha: Vec::new(),
            intercept: moments.mean(target),
            rank_deficient: false,
        };
    }
    let css = DMatrix::from_fn(s, s, |a, b| moments.cov(support[a], support[b]));
    let csy = DVector::from_fn(s, |a, _| moments.cov(support[a], target));
    let (alpha, rank_deficient) = match css.clone().cholesky() {
        Some(ch) if well_conditioned(&css) => (ch.solve(&csy), false),
        _ => {
            let svd = css.svd(true, true);
            let smax = svd.singular_values.max();
            let eps = (smax * 1e-12).max(f64::MIN_POSITIVE);
            let sol = svd.solve(&csy, eps).unwrap_or_else(|_| DVector::zeros(s));
            (sol, true)
        }
    };
    let alpha: Vec<f64> = alpha.iter().copied().collect();
    let intercept = moments.mean(target)
        - support
            .iter()
            .zip(&alpha)
            .map(|(&j, a)| a * moments.mean(j))
            .sum::<f64>();
    OlsFit {
        alpha,
        intercept,
        rank_deficient,
    }
}

fn well_conditioned(m: &DMatrix<f64>) -> bool {
    let d: Vec<f64> = (0..m.nrows()).map(|i| m[(i, i)]).collect();
    if d.iter().any(|&x| x <= 0.0) {
        return false;
    }
    // Condition of the correlation matrix, estimated from its eigenvalues.
    let corr = DMatrix::from_fn(m.nrows(), m.ncols(), |a, b| m[(a, b)] / (d[a] * d[b]).sqrt());
    let eig = corr.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    lo > hi * 1e-12
}
