use std::sync::Arc;

use pde_forge::differentiation::{differentiate_values, DiffConfig};
use pde_forge::grid::{dataset_to_string, parse_dataset, DataField, Dataset, Grid};
use pde_forge::moeadd::{dominates, generate_weights, nondominated_sort};
use pde_forge::sparse_solver::{lasso, ols_fit, RegressionProblem};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = Grid> {
    prop::collection::vec((3usize..7, -10.0f64..10.0, 0.01f64..2.0), 1..4).prop_map(|axes| {
        let names = (0..axes.len()).map(|i| format!("a{i}")).collect();
        let shape = axes.iter().map(|a| a.0).collect();
        let origins = axes.iter().map(|a| a.1).collect();
        let steps = axes.iter().map(|a| a.2).collect();
        Grid::new(names, shape, origins, steps).unwrap()
    })
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (grid_strategy(), 1usize..4).prop_flat_map(|(grid, n_fields)| {
        let len = grid.len();
        let grid = Arc::new(grid);
        prop::collection::vec(prop::collection::vec(-1e6f64..1e6, len), n_fields).prop_map(move |cols| {
            let fields = cols
                .into_iter()
                .enumerate()
                .map(|(i, v)| DataField::new(format!("f{i}"), grid.clone(), v).unwrap())
                .collect();
            Dataset::new(grid.clone(), fields).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_text_round_trip_is_exact(ds in dataset_strategy()) {
        let text = dataset_to_string(&ds, &["note".to_string()]).unwrap();
        prop_assert_eq!(parse_dataset(&text).unwrap(), ds);
    }

    #[test]
    fn flat_index_inverts_unravel(grid in grid_strategy(), pick in 0usize..10_000) {
        let flat = pick % grid.len();
        prop_assert_eq!(grid.flat_index(&grid.unravel(flat)), flat);
    }

    /// Window-9 degree-5 filters reproduce polynomials up to degree 5 exactly,
    /// boundaries included.
    #[test]
    fn derivative_exact_on_quintics(
        coef in prop::collection::vec(-2.0f64..2.0, 6),
        h in 0.05f64..0.5,
        order in 1usize..4,
    ) {
        let grid = Grid::new(vec!["x".into()], vec![20], vec![-1.0], vec![h]).unwrap();
        let xs = grid.axis_coords(0);
        let poly = |x: f64, c: &[f64]| c.iter().rev().fold(0.0, |acc, a| acc * x + a);
        let values: Vec<f64> = xs.iter().map(|&x| poly(x, &coef)).collect();
        let mut deriv = coef.clone();
        for _ in 0..order {
            deriv = deriv.iter().enumerate().skip(1).map(|(i, a)| i as f64 * a).collect();
        }
        let got = differentiate_values(&grid, &values, 0, order, &DiffConfig::default()).unwrap();
        let scale = 1.0 + values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, g) in xs.iter().zip(&got) {
            let want = poly(*x, &deriv);
            prop_assert!((g - want).abs() <= 1e-6 * scale / h.powi(order as i32), "{} vs {}", g, want);
        }
    }

    #[test]
    fn differentiation_is_linear(
        a in prop::collection::vec(-5.0f64..5.0, 30),
        b in prop::collection::vec(-5.0f64..5.0, 30),
        s in -3.0f64..3.0,
    ) {
        let grid = Grid::new(vec!["x".into()], vec![30], vec![0.0], vec![0.1]).unwrap();
        let cfg = DiffConfig::default();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        let da = differentiate_values(&grid, &a, 0, 2, &cfg).unwrap();
        let db = differentiate_values(&grid, &b, 0, 2, &cfg).unwrap();
        let dc = differentiate_values(&grid, &combo, 0, 2, &cfg).unwrap();
        for i in 0..30 {
            prop_assert!((dc[i] - (da[i] + s * db[i])).abs() <= 1e-8 * (1.0 + da[i].abs() + db[i].abs()));
        }
    }

    /// Larger sparsity constants never grow the L1 norm of the solution.
    #[test]
    fn lasso_l1_norm_shrinks_with_lambda(
        seed_cols in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 40), 4),
        noise in prop::collection::vec(-0.1f64..0.1, 40),
        lo in 0.0f64..0.3,
        gap in 0.0f64..0.3,
    ) {
        let target: Vec<f64> = (0..40).map(|i| seed_cols[0][i] - seed_cols[2][i] + noise[i]).collect();
        let l1 = |lambda: f64| {
            let fit = lasso(&RegressionProblem::new(seed_cols.clone(), target.clone(), lambda).unwrap(), 1e-12, 100_000).unwrap();
            fit.beta.iter().map(|b| b.abs()).sum::<f64>()
        };
        prop_assert!(l1(lo + gap) <= l1(lo) + 1e-9);
    }

    /// Least-squares residuals are orthogonal to every fitted column and sum to zero.
    #[test]
    fn ols_residual_orthogonal(
        cols in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 25), 3),
        target in prop::collection::vec(-1.0f64..1.0, 25),
    ) {
        let fit = ols_fit(&cols, &target, &[0, 1, 2]).unwrap();
        let coef = fit.expand(&[0, 1, 2], 3);
        let resid: Vec<f64> = (0..25)
            .map(|i| target[i] - fit.intercept - (0..3).map(|j| coef[j] * cols[j][i]).sum::<f64>())
            .collect();
        prop_assert!(resid.iter().sum::<f64>().abs() < 1e-9);
        for c in &cols {
            let d: f64 = c.iter().zip(&resid).map(|(x, r)| x * r).sum();
            prop_assert!(d.abs() < 1e-9);
        }
    }

    #[test]
    fn dominance_orders_levels(
        pts in prop::collection::vec(prop::collection::vec(0u8..5, 3), 1..60),
    ) {
        let pts: Vec<Vec<f64>> = pts.into_iter().map(|p| p.into_iter().map(f64::from).collect()).collect();
        let levels = nondominated_sort(&pts);
        for (i, a) in pts.iter().enumerate() {
            for (j, b) in pts.iter().enumerate() {
                if dominates(a, b) {
                    prop_assert!(levels[i] < levels[j]);
                }
            }
        }
    }

    #[test]
    fn weights_on_simplex(k in 1usize..4, h in 1usize..5) {
        let n_obj = 2 * k;
        let weights = generate_weights(n_obj, h, 3).unwrap();
        let expected = (1..n_obj).fold(1usize, |acc, i| acc * (h + i) / i);
        prop_assert_eq!(weights.len(), expected);
        for w in &weights {
            prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.weights.iter().all(|&x| x >= 0.0));
        }
    }
}
