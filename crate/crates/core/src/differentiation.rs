//! Derivative fields by local least-squares polynomial fits.
//!
//! Each derivative along an axis is a fixed linear filter: for every offset
//! of the evaluation point inside its window the polynomial fit reduces to
//! one weight vector, so the filters are computed once per axis and applied
//! as a convolution. Windows near the boundary are shifted inwards so every
//! fit uses exactly `window` points.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{DataField, Dataset, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffConfig {
    pub window: usize,
    pub degree: usize,
    pub max_order: usize,
}

impl Default for DiffConfig {
    fn default() -> Self {
        Self {
            window: 9,
            degree: 5,
            max_order: 3,
        }
    }
}

impl DiffConfig {
    pub fn validate(&self) -> Result<()> {
        if self.degree < 2 {
            return Err(Error::Config(format!(
                "polynomial degree {} < 2",
                self.degree
            )));
        }
        if self.window % 2 == 0 || self.window <= self.degree {
            return Err(Error::Config(format!(
                "window {} must be odd and larger than degree {}",
                self.window, self.degree
            )));
        }
        if self.max_order < 1 || self.max_order > self.degree {
            return Err(Error::Config(format!(
                "max_order {} must lie in 1..={}",
                self.max_order, self.degree
            )));
        }
        Ok(())
    }
}

/// Cache key of a pure derivative token: `u` for order 0, `d2u/dx2` otherwise.
pub fn derivative_key(variable: &str, axis_name: &str, order: usize) -> String {
    if order == 0 {
        variable.to_string()
    } else {
        format!("d{order}{variable}/d{axis_name}{order}")
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Filter weights for the `order`-th derivative, one row per position of the
/// evaluation point inside the window. Weights are in index units; divide by
/// `step^order` to get physical derivatives.
fn filter_bank(window: usize, degree: usize, order: usize) -> Result<Vec<Vec<f64>>> {
    let half = (window / 2) as f64;
    let ncoef = degree + 1;
    let mut bank = Vec::with_capacity(window);
    for pos in 0..window {
        let mut vander = DMatrix::<f64>::zeros(window, ncoef);
        for j in 0..window {
            let xi = (j as f64 - pos as f64) / half;
            let mut p = 1.0;
            for k in 0..ncoef {
                vander[(j, k)] = p;
                p *= xi;
            }
        }
        // Least-squares weights via QR: pinv(V)ᵀ e_order = Q R⁻ᵀ e_order.
        let qr = vander.qr();
        let mut unit = DVector::<f64>::zeros(ncoef);
        unit[order] = 1.0;
        let z = qr
            .r()
            .transpose()
            .solve_lower_triangular(&unit)
            .ok_or_else(|| Error::Config("singular polynomial fit".into()))?;
        let weights = qr.q() * z;
        let scale = factorial(order) / half.powi(order as i32);
        bank.push(weights.iter().map(|w| w * scale).collect());
    }
    Ok(bank)
}

fn apply_filter(grid: &Grid, values: &[f64], axis: usize, order: usize, cfg: &DiffConfig) -> Result<Vec<f64>> {
    let n = grid.shape()[axis];
    let w = cfg.window;
    let bank = filter_bank(w, cfg.degree, order)?;
    let stride = grid.strides()[axis];
    let inv_h = grid.steps()[axis].powi(-(order as i32));
    let half = w / 2;
    let mut out = vec![0.0; values.len()];
    for (f, o) in out.iter_mut().enumerate() {
        let i = (f / stride) % n;
        let base = f - i * stride;
        let start = i.saturating_sub(half).min(n - w);
        let weights = &bank[i - start];
        let mut acc = 0.0;
        for (j, wj) in weights.iter().enumerate() {
            acc += wj * values[base + (start + j) * stride];
        }
        *o = acc * inv_h;
    }
    Ok(out)
}

fn check_axis(grid: &Grid, axis: usize, order: usize, cfg: &DiffConfig) -> Result<()> {
    if axis >= grid.ndim() {
        return Err(Error::Argument(format!(
            "axis {axis} out of range for a {}-d grid",
            grid.ndim()
        )));
    }
    if order < 1 || order > cfg.max_order {
        return Err(Error::Argument(format!(
            "derivative order {order} outside 1..={}",
            cfg.max_order
        )));
    }
    if grid.shape()[axis] < cfg.window {
        return Err(Error::Config(format!(
            "axis `{}` has {} points, fewer than the window {}",
            grid.dim_names()[axis],
            grid.shape()[axis],
            cfg.window
        )));
    }
    Ok(())
}

/// Raw values version of [`differentiate`].
pub fn differentiate_values(
    grid: &Grid,
    values: &[f64],
    axis: usize,
    order: usize,
    cfg: &DiffConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_axis(grid, axis, order, cfg)?;
    if values.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} values on a grid of {} points",
            values.len(),
            grid.len()
        )));
    }
    apply_filter(grid, values, axis, order, cfg)
}

pub fn differentiate(field: &DataField, axis: usize, order: usize, cfg: &DiffConfig) -> Result<DataField> {
    let values = differentiate_values(&field.grid, &field.values, axis, order, cfg)?;
    let name = derivative_key(&field.name, &field.grid.dim_names()[axis.min(field.grid.ndim() - 1)], order);
    DataField::new(name, field.grid.clone(), values)
}

/// Where a cached array came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenOrigin {
    pub variable: usize,
    pub axis: usize,
    pub order: usize,
}

/// Evaluated tokens over a grid: every dependent variable plus its pure
/// derivatives, keyed by [`derivative_key`].
#[derive(Debug, Clone)]
pub struct TokenCache {
    grid: Arc<Grid>,
    variables: Vec<String>,
    diff: DiffConfig,
    entries: BTreeMap<String, (TokenOrigin, Arc<Vec<f64>>)>,
}

impl TokenCache {
    /// Builds a cache from precomputed arrays. Raw (order 0) arrays must be
    /// present for every variable. `diff` is the scheme used when fields are
    /// later re-differentiated (variable change).
    pub fn from_arrays(
        grid: Arc<Grid>,
        variables: Vec<String>,
        diff: DiffConfig,
        arrays: Vec<(TokenOrigin, Vec<f64>)>,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (origin, values) in arrays {
            if origin.variable >= variables.len() || origin.axis >= grid.ndim() {
                return Err(Error::Argument(format!("bad token origin {origin:?}")));
            }
            if values.len() != grid.len() {
                return Err(Error::Shape(format!(
                    "token array of length {} on a grid of {} points",
                    values.len(),
                    grid.len()
                )));
            }
            let axis = if origin.order == 0 { 0 } else { origin.axis };
            let key = derivative_key(&variables[origin.variable], &grid.dim_names()[axis], origin.order);
            let origin = TokenOrigin { axis, ..origin };
            if entries.insert(key.clone(), (origin, Arc::new(values))).is_some() {
                return Err(Error::Argument(format!("duplicate token `{key}`")));
            }
        }
        for v in &variables {
            if !entries.contains_key(v) {
                return Err(Error::MissingToken(v.clone()));
            }
        }
        Ok(Self {
            grid,
            variables,
            diff,
            entries,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn diff_config(&self) -> &DiffConfig {
        &self.diff
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&Arc<Vec<f64>>> {
        self.entries.get(key).map(|(_, v)| v)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, TokenOrigin, &Arc<Vec<f64>>)> {
        self.entries.iter().map(|(k, (o, v))| (k, *o, v))
    }

    /// Highest derivative order held for any token.
    pub fn max_order(&self) -> usize {
        self.entries.values().map(|(o, _)| o.order).max().unwrap_or(0)
    }

    /// Copy of the cache with `delta` subtracted from every raw variable
    /// field and the derivative tokens updated to match. Differentiation is
    /// linear, so derivatives are shifted by the derivative of `delta`
    /// instead of re-differentiating each modified field.
    pub fn subtract_from_raw(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.grid.len() {
            return Err(Error::Argument(format!(
                "residual of length {} on a grid of {} points",
                delta.len(),
                self.grid.len()
            )));
        }
        let mut needed: Vec<(usize, usize)> = self
            .entries
            .values()
            .filter(|(o, _)| o.order > 0)
            .map(|(o, _)| (o.axis, o.order))
            .collect();
        needed.sort_unstable();
        needed.dedup();
        let mut cfg = self.diff;
        cfg.max_order = cfg.max_order.max(self.max_order());
        let shifts: BTreeMap<(usize, usize), Vec<f64>> = needed
            .par_iter()
            .map(|&(axis, order)| {
                differentiate_values(&self.grid, delta, axis, order, &cfg).map(|d| ((axis, order), d))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();
        let entries = self
            .entries
            .iter()
            .map(|(k, (o, v))| {
                let shift = if o.order == 0 { delta } else { &shifts[&(o.axis, o.order)][..] };
                let updated: Vec<f64> = v.iter().zip(shift).map(|(a, b)| a - b).collect();
                (k.clone(), (*o, Arc::new(updated)))
            })
            .collect();
        Ok(Self {
            grid: self.grid.clone(),
            variables: self.variables.clone(),
            diff: self.diff,
            entries,
        })
    }

    /// The cache as a dataset whose variables are the token keys.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let fields = self
            .entries
            .iter()
            .map(|(k, (_, v))| DataField::new(k.clone(), self.grid.clone(), v.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.grid.clone(), fields)
    }
}

/// Raw fields plus every pure derivative of order `1..=cfg.max_order` along
/// every axis.
pub fn build_token_cache(dataset: &Dataset, cfg: &DiffConfig) -> Result<TokenCache> {
    cfg.validate()?;
    let grid = &dataset.grid;
    let mut jobs = Vec::new();
    for v in 0..dataset.fields.len() {
        for axis in 0..grid.ndim() {
            for order in 1..=cfg.max_order {
                jobs.push(TokenOrigin {
                    variable: v,
                    axis,
                    order,
                });
            }
        }
    }
    let mut arrays: Vec<(TokenOrigin, Vec<f64>)> = dataset
        .fields
        .iter()
        .enumerate()
        .map(|(v, f)| {
            (
                TokenOrigin {
                    variable: v,
                    axis: 0,
                    order: 0,
                },
                f.values.clone(),
            )
        })
        .collect();
    let derived = jobs
        .par_iter()
        .map(|&o| {
            differentiate_values(grid, &dataset.fields[o.variable].values, o.axis, o.order, cfg)
                .map(|d| (o, d))
        })
        .collect::<Result<Vec<_>>>()?;
    arrays.extend(derived);
    TokenCache::from_arrays(grid.clone(), dataset.variable_names(), *cfg, arrays)
}

/// Points at least `margin` away from every boundary.
pub fn interior_mask(grid: &Grid, margin: usize) -> Vec<bool> {
    (0..grid.len())
        .map(|f| {
            grid.unravel(f)
                .iter()
                .zip(grid.shape())
                .all(|(&i, &n)| i >= margin && i + margin < n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn line_grid(n: usize, x0: f64, h: f64) -> Arc<Grid> {
        Arc::new(Grid::new(vec!["x".into()], vec![n], vec![x0], vec![h]).unwrap())
    }

    fn field_of(grid: &Arc<Grid>, f: impl Fn(f64) -> f64) -> DataField {
        let vals = grid.axis_coords(0).into_iter().map(f).collect();
        DataField::new("u", grid.clone(), vals).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(DiffConfig::default().validate().is_ok());
        assert!(DiffConfig { window: 8, ..Default::default() }.validate().is_err());
        assert!(DiffConfig { window: 5, degree: 5, max_order: 3 }.validate().is_err());
        assert!(DiffConfig { window: 9, degree: 3, max_order: 4 }.validate().is_err());
        assert!(DiffConfig { window: 9, degree: 1, max_order: 1 }.validate().is_err());
    }

    #[test]
    fn constant_field_has_zero_derivative() {
        let g = line_grid(20, 0.0, 0.1);
        let f = field_of(&g, |_| 3.5);
        let cfg = DiffConfig::default();
        for order in 1..=3 {
            let d = differentiate(&f, 0, order, &cfg).unwrap();
            assert!(d.values.iter().all(|v| v.abs() < 1e-9), "order {order}");
        }
    }

    #[test]
    fn square_derivative_is_linear() {
        let g = line_grid(30, -1.0, 0.07);
        let f = field_of(&g, |x| x * x);
        let d = differentiate(&f, 0, 1, &DiffConfig::default()).unwrap();
        for (x, v) in g.axis_coords(0).iter().zip(&d.values) {
            assert!((v - 2.0 * x).abs() < 1e-8, "{x}: {v}");
        }
    }

    #[test]
    fn sine_second_derivative() {
        let n = 64;
        let h = 2.0 * PI / (n - 1) as f64;
        let g = line_grid(n, 0.0, h);
        let f = field_of(&g, f64::sin);
        let d = differentiate(&f, 0, 2, &DiffConfig::default()).unwrap();
        let coords = g.axis_coords(0);
        let err = (4..n - 4)
            .map(|i| (d.values[i] + coords[i].sin()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-4, "max interior error {err}");
    }

    #[test]
    fn exact_on_polynomials_including_boundary() {
        let g = line_grid(15, 0.3, 0.2);
        let poly = |x: f64| 1.0 - 2.0 * x + 0.5 * x.powi(3) - 0.1 * x.powi(5);
        let d3 = |x: f64| 3.0 - 6.0 * x * x;
        let f = field_of(&g, poly);
        let d = differentiate(&f, 0, 3, &DiffConfig::default()).unwrap();
        for (x, v) in g.axis_coords(0).iter().zip(&d.values) {
            assert!((v - d3(*x)).abs() < 1e-7, "{x}: {v} vs {}", d3(*x));
        }
    }

    #[test]
    fn bad_axis_and_short_axis() {
        let g = line_grid(7, 0.0, 1.0);
        let f = field_of(&g, |x| x);
        assert!(matches!(differentiate(&f, 1, 1, &DiffConfig::default()), Err(Error::Argument(_))));
        assert!(matches!(differentiate(&f, 0, 1, &DiffConfig::default()), Err(Error::Config(_))));
        let g = line_grid(12, 0.0, 1.0);
        let f = field_of(&g, |x| x);
        assert!(matches!(differentiate(&f, 0, 4, &DiffConfig::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn convergence_under_refinement() {
        let mut errs = Vec::new();
        for n in [32usize, 64, 128] {
            let h = 2.0 * PI / (n - 1) as f64;
            let g = line_grid(n, 0.0, h);
            let f = field_of(&g, f64::sin);
            let d = differentiate(&f, 0, 1, &DiffConfig::default()).unwrap();
            let c = g.axis_coords(0);
            errs.push((4..n - 4).map(|i| (d.values[i] - c[i].cos()).abs()).fold(0.0, f64::max));
        }
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
    }

    #[test]
    fn cache_counts() {
        let g = Arc::new(
            Grid::new(vec!["t".into(), "x".into()], vec![10, 12], vec![0.0; 2], vec![0.1; 2]).unwrap(),
        );
        let ds = Dataset::new(g.clone(), vec![DataField::new("u", g.clone(), vec![0.0; 120]).unwrap()]).unwrap();
        let cache = build_token_cache(&ds, &DiffConfig::default()).unwrap();
        assert_eq!(cache.len(), 7);
        assert!(cache.get("u").is_some());
        assert!(cache.get("d3u/dx3").is_some());
        assert!(cache.get("d2u/dt2").is_some());
        assert!(cache.iter().all(|(_, _, v)| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn cache_counts_three_variables_three_axes() {
        let g = Arc::new(
            Grid::new(
                vec!["t".into(), "x".into(), "y".into()],
                vec![9, 10, 11],
                vec![0.0; 3],
                vec![0.1; 3],
            )
            .unwrap(),
        );
        let fields = ["u", "v", "p"]
            .iter()
            .map(|n| DataField::new(*n, g.clone(), vec![1.0; g.len()]).unwrap())
            .collect();
        let ds = Dataset::new(g, fields).unwrap();
        let cache = build_token_cache(&ds, &DiffConfig::default()).unwrap();
        // Enumeration: per variable the raw field plus axes x orders.
        let mut expected = Vec::new();
        for v in ["u", "v", "p"] {
            expected.push(v.to_string());
            for a in ["t", "x", "y"] {
                for o in 1..=3 {
                    expected.push(format!("d{o}{v}/d{a}{o}"));
                }
            }
        }
        expected.sort();
        let keys: Vec<String> = cache.keys().cloned().collect();
        assert_eq!(keys, expected);
        assert_eq!(keys.len(), 30);
    }

    #[test]
    fn constant_shift_leaves_derivatives() {
        let g = Arc::new(
            Grid::new(vec!["t".into(), "x".into()], vec![12, 16], vec![0.0; 2], vec![0.1, 0.2]).unwrap(),
        );
        let vals: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let ds = Dataset::new(g.clone(), vec![DataField::new("u", g.clone(), vals).unwrap()]).unwrap();
        let cache = build_token_cache(&ds, &DiffConfig::default()).unwrap();
        let shifted = cache.subtract_from_raw(&vec![2.5; g.len()]).unwrap();
        for (k, o, v) in cache.iter() {
            let w = shifted.get(k).unwrap();
            for (a, b) in v.iter().zip(w.iter()) {
                if o.order == 0 {
                    assert!((a - 2.5 - b).abs() < 1e-12);
                } else if o.order == 1 {
                    assert!((a - b).abs() < 1e-8, "{k}");
                }
            }
        }
    }
}
