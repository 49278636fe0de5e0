//! Sequential discovery of one equation per dependent variable.
//!
//! Slots run in order. After each slot the fitted equation's residual is
//! subtracted from the raw variable fields of the working cache, and a
//! variable described alone by an equation becomes taboo for later slots.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use crate::differentiation::{build_token_cache, DiffConfig, TokenCache};
use crate::equation_ea::{describes_variables, run_equation_ea, EAConfig, Equation, Taboo};
use crate::error::{Error, Result};
use crate::grid::Dataset;
use crate::term_store::TermStore;
use crate::token_pool::TokenFamily;

/// One sparsity constant per equation slot.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct SparsityVector(Vec<f64>);

impl SparsityVector {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::Argument("empty sparsity vector".into()));
        }
        if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::Argument(format!("sparsity constant {l} must be positive")));
        }
        Ok(Self(lambdas))
    }

    /// Like `new`, also requiring every entry inside `[lo, hi]`.
    pub fn bounded(lambdas: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        let v = Self::new(lambdas)?;
        if let Some(l) = v.0.iter().find(|l| **l < lo || **l > hi) {
            return Err(Error::Argument(format!("sparsity constant {l} outside [{lo}, {hi}]")));
        }
        Ok(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct EquationSystem {
    pub equations: Vec<Equation>,
    pub lambdas: SparsityVector,
    pub quality: Vec<f64>,
    pub complexity: Vec<usize>,
    pub described: Vec<BTreeSet<String>>,
    /// Some slot only produced taboo-penalized equations.
    pub degenerate: bool,
}

impl EquationSystem {
    pub fn len(&self) -> usize {
        self.equations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.equations.is_empty()
    }

    pub fn total_quality(&self) -> f64 {
        self.quality.iter().sum()
    }

    pub fn total_complexity(&self) -> usize {
        self.complexity.iter().sum()
    }

    pub fn render(&self) -> Vec<String> {
        self.equations.iter().map(render_equation).collect()
    }
}

/// `(Q₁, C₁, …, Q_k, C_k)`.
pub fn objective_vector(system: &EquationSystem) -> Vec<f64> {
    system
        .quality
        .iter()
        .zip(&system.complexity)
        .flat_map(|(&q, &c)| [q, c as f64])
        .collect()
}

/// Six decimals in `[1e-6, 1e6)`, six significant digits in scientific
/// notation outside it so small nonzero values never print as zero.
pub fn format_coefficient(c: f64) -> String {
    let a = c.abs();
    if a == 0.0 || (1e-6..1e6).contains(&a) {
        format!("{c:.6}")
    } else {
        format!("{c:.5e}")
    }
}

/// `<signed terms> = <target> [+ const(c)]`, e.g.
/// `-0.998000 * d2u/dx2 + 0.000120 * d1p/dx1 = d1u/dt1 + const(0.000003)`.
pub fn render_equation(equation: &Equation) -> String {
    let mut lhs = String::new();
    for (_, term, a) in equation.active_features() {
        let coef = format_coefficient(a.abs());
        if lhs.is_empty() {
            let sign = if a < 0.0 { "-" } else { "" };
            let _ = write!(lhs, "{sign}{coef} * {term}");
        } else {
            let sign = if a < 0.0 { '-' } else { '+' };
            let _ = write!(lhs, " {sign} {coef} * {term}");
        }
    }
    if lhs.is_empty() {
        lhs.push('0');
    }
    let mut out = format!("{lhs} = {}", equation.target());
    if equation.intercept != 0.0 {
        let _ = write!(out, " + const({})", format_coefficient(-equation.intercept));
    }
    out
}

/// Subtracts the equation's residual, evaluated on `cache`, from every raw
/// variable field; derivative tokens follow.
pub fn apply_variable_change(cache: &Arc<TokenCache>, equation: &Equation) -> Result<TokenCache> {
    let residual = equation.residual(&TermStore::new(cache.clone()))?;
    cache.subtract_from_raw(&residual)
}

/// Per-slot residual fields and the final working cache of one discovery.
#[derive(Debug, Clone)]
pub struct DiscoveryTrace {
    pub residuals: Vec<Vec<f64>>,
    pub working_cache: Arc<TokenCache>,
}

/// Working-cache stores kept for reuse by later slots.
const STORE_MEMO_LIMIT: usize = 4;

/// Term stores of working caches keyed by the exact equations that produced
/// them, oldest first.
#[derive(Debug, Default)]
struct StoreMemo(Vec<(String, Arc<TermStore>)>);

fn equation_key(key: &mut String, eq: &Equation) {
    let _ = write!(key, "{}|{}|{:x}", eq.chromosome.signature(), eq.right_part_idx, eq.intercept.to_bits());
    for a in &eq.alpha {
        let _ = write!(key, ",{:x}", a.to_bits());
    }
    key.push(';');
}

/// Repeated system discovery on one dataset. The first slot always sees the
/// original cache, so its term store is shared across runs; working caches
/// of later slots are reused when earlier slots produced identical equations.
#[derive(Debug, Clone)]
pub struct SystemSearch {
    base: Arc<TermStore>,
    stores: Arc<Mutex<StoreMemo>>,
    pool: Vec<Arc<TokenFamily>>,
    cfg: EAConfig,
}

fn slot_seed(seed: u64, slot: usize) -> u64 {
    seed ^ (slot as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl SystemSearch {
    pub fn new(cache: TokenCache, pool: Vec<Arc<TokenFamily>>, cfg: EAConfig) -> Result<Self> {
        cfg.validate()?;
        if pool.is_empty() {
            return Err(Error::Config("token pool is empty".into()));
        }
        Ok(Self {
            base: Arc::new(TermStore::new(Arc::new(cache))),
            stores: Arc::default(),
            pool,
            cfg,
        })
    }

    /// The same search with other EA settings, sharing memoized terms.
    pub fn with_config(&self, cfg: EAConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, ..self.clone() })
    }

    fn next_store(&self, store: &TermStore, key: &str, residual: &[f64]) -> Result<Arc<TermStore>> {
        if let Some((_, s)) = self.stores.lock().unwrap().0.iter().find(|(k, _)| k == key) {
            return Ok(s.clone());
        }
        let next = Arc::new(TermStore::new(Arc::new(store.cache().subtract_from_raw(residual)?)));
        let mut memo = self.stores.lock().unwrap();
        if !memo.0.iter().any(|(k, _)| k == key) {
            if memo.0.len() == STORE_MEMO_LIMIT {
                memo.0.remove(0);
            }
            memo.0.push((key.to_string(), next.clone()));
        }
        Ok(next)
    }

    pub fn from_dataset(
        dataset: &Dataset,
        diff: &DiffConfig,
        pool: Vec<Arc<TokenFamily>>,
        cfg: EAConfig,
    ) -> Result<Self> {
        Self::new(build_token_cache(dataset, diff)?, pool, cfg)
    }

    /// Number of equation slots: one per dependent variable.
    pub fn n_equations(&self) -> usize {
        self.base.cache().variables().len()
    }

    pub fn cache(&self) -> &Arc<TokenCache> {
        self.base.cache()
    }

    pub fn config(&self) -> &EAConfig {
        &self.cfg
    }

    pub fn pool(&self) -> &[Arc<TokenFamily>] {
        &self.pool
    }

    pub fn run(&self, lambdas: &SparsityVector, seed: u64) -> Result<EquationSystem> {
        self.run_traced(lambdas, seed).map(|(s, _)| s)
    }

    pub fn run_traced(&self, lambdas: &SparsityVector, seed: u64) -> Result<(EquationSystem, DiscoveryTrace)> {
        let k = self.n_equations();
        if lambdas.len() != k {
            return Err(Error::Argument(format!(
                "{} sparsity constants for {k} equation slots",
                lambdas.len()
            )));
        }
        let mut taboo = Taboo::new();
        let mut store = self.base.clone();
        let mut equations = Vec::with_capacity(k);
        let mut described = Vec::with_capacity(k);
        let mut residuals = Vec::with_capacity(k);
        let mut degenerate = false;
        let mut key = String::new();
        for (slot, &lambda) in lambdas.values().iter().enumerate() {
            let cfg = EAConfig {
                rng_seed: slot_seed(seed, slot),
                ..self.cfg
            };
            let best = run_equation_ea(&cfg, &self.pool, lambda, &store, &taboo)?.best;
            degenerate |= best.fitness == 0.0;
            let vars = describes_variables(&best);
            taboo.record(&vars);
            let residual = best.residual(&store)?;
            equation_key(&mut key, &best);
            store = self.next_store(&store, &key, &residual)?;
            residuals.push(residual);
            described.push(vars);
            equations.push(best);
        }
        let system = EquationSystem {
            quality: equations.iter().map(|e| e.residual_norm).collect(),
            complexity: equations.iter().map(Equation::complexity).collect(),
            equations,
            lambdas: lambdas.clone(),
            described,
            degenerate,
        };
        let trace = DiscoveryTrace {
            residuals,
            working_cache: store.cache().clone(),
        };
        Ok((system, trace))
    }
}

/// One-shot discovery: builds the token cache and runs every slot.
pub fn discover_system(
    dataset: &Dataset,
    lambdas: &SparsityVector,
    cfg: &EAConfig,
    diff: &DiffConfig,
    pool: Vec<Arc<TokenFamily>>,
) -> Result<EquationSystem> {
    SystemSearch::from_dataset(dataset, diff, pool, *cfg)?.run(lambdas, cfg.rng_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::differentiation::TokenOrigin;
    use crate::equation_ea::evaluate_with_target;
    use crate::grid::Grid;
    use crate::synthetic::{analytic_derivatives, SynthKind, SynthSpec};
    use crate::token_pool::{Chromosome, Factor, Term};

    fn axes() -> Vec<String> {
        vec!["t".into(), "x".into()]
    }

    fn pool_for(vars: &[&str], order: usize) -> Vec<Arc<TokenFamily>> {
        vars.iter()
            .map(|v| Arc::new(TokenFamily::all_derivatives(v, &axes(), order, 1).unwrap()))
            .collect()
    }

    fn small_cfg() -> EAConfig {
        EAConfig {
            population_size: 12,
            epochs: 8,
            ..EAConfig::default()
        }
    }

    fn raw_term(fam: &Arc<TokenFamily>) -> Term {
        Term::new(vec![Factor::derivative(fam, "t", 0, 1).unwrap()]).unwrap()
    }

    /// Two raw fields `u` and `v = u + offset`, with derivatives.
    fn twin_cache(offset: f64) -> Arc<TokenCache> {
        let g = Arc::new(Grid::new(axes(), vec![12, 40], vec![0.0, 0.0], vec![0.1, 0.1]).unwrap());
        let t = g.coordinate_field(0);
        let x = g.coordinate_field(1);
        let u: Vec<f64> = t.iter().zip(&x).map(|(t, x)| (x - t).sin()).collect();
        let ux: Vec<f64> = t.iter().zip(&x).map(|(t, x)| (x - t).cos()).collect();
        let v: Vec<f64> = u.iter().map(|a| a + offset).collect();
        let o = |variable, axis, order| TokenOrigin { variable, axis, order };
        Arc::new(
            TokenCache::from_arrays(
                g,
                vec!["u".into(), "v".into()],
                DiffConfig::default(),
                vec![(o(0, 0, 0), u), (o(0, 1, 1), ux.clone()), (o(1, 0, 0), v), (o(1, 1, 1), ux)],
            )
            .unwrap(),
        )
    }

    fn twin_equation(cache: &Arc<TokenCache>, intercept: f64) -> Equation {
        let pool = pool_for(&["u", "v"], 1);
        let c = Chromosome::new(vec![raw_term(&pool[0]), raw_term(&pool[1])]).unwrap();
        let store = TermStore::new(cache.clone());
        let mut eq = evaluate_with_target(&c, 0, 1e-6, &store, &EAConfig::default()).unwrap();
        eq.alpha = vec![1.0];
        eq.intercept = intercept;
        eq
    }

    #[test]
    fn zero_residual_leaves_cache_unchanged() {
        let cache = twin_cache(0.0);
        let changed = apply_variable_change(&cache, &twin_equation(&cache, 0.0)).unwrap();
        for (k, _, v) in cache.iter() {
            assert_eq!(changed.get(k).unwrap(), v, "{k}");
        }
    }

    #[test]
    fn constant_residual_shifts_raw_fields_only() {
        let cache = twin_cache(0.0);
        let changed = apply_variable_change(&cache, &twin_equation(&cache, 0.25)).unwrap();
        for (a, b) in cache.get("u").unwrap().iter().zip(changed.get("u").unwrap().iter()) {
            assert!((a - b - 0.25).abs() < 1e-15);
        }
        for (a, b) in cache.get("d1u/dx1").unwrap().iter().zip(changed.get("d1u/dx1").unwrap().iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn variable_changes_compose_additively() {
        let cache = twin_cache(0.0);
        let once = Arc::new(apply_variable_change(&cache, &twin_equation(&cache, 0.1)).unwrap());
        let twice = apply_variable_change(&once, &twin_equation(&once, 0.2)).unwrap();
        let direct = cache.subtract_from_raw(&vec![0.3; cache.grid().len()]).unwrap();
        for (k, _, v) in twice.iter() {
            let d = direct.get(k).unwrap();
            assert!(v.iter().zip(d.iter()).all(|(a, b)| (a - b).abs() < 1e-12), "{k}");
        }
    }

    #[test]
    fn objective_vector_interleaves() {
        let cache = twin_cache(0.0);
        let eq = twin_equation(&cache, 0.0);
        let system = EquationSystem {
            equations: vec![eq.clone(), eq],
            lambdas: SparsityVector::new(vec![0.1, 0.2]).unwrap(),
            quality: vec![2.5, 0.5],
            complexity: vec![3, 1],
            described: vec![BTreeSet::new(), BTreeSet::new()],
            degenerate: false,
        };
        assert_eq!(objective_vector(&system), vec![2.5, 3.0, 0.5, 1.0]);
        assert_eq!(system.total_complexity(), 4);
        assert_eq!(system.total_quality(), 3.0);
    }

    #[test]
    fn sparsity_vector_validation() {
        assert!(SparsityVector::new(vec![]).is_err());
        assert!(SparsityVector::new(vec![0.1, 0.0]).is_err());
        assert!(SparsityVector::bounded(vec![0.1, 2.0], 1e-3, 1.0).is_err());
        assert!(SparsityVector::bounded(vec![0.1, 0.5], 1e-3, 1.0).is_ok());
    }

    #[test]
    fn rendering_matches_grammar() {
        let cache = twin_cache(0.0);
        let mut eq = twin_equation(&cache, -3e-6);
        eq.alpha = vec![-0.998];
        assert_eq!(render_equation(&eq), "-0.998000 * v = u + const(0.000003)");
        eq.alpha = vec![0.0];
        eq.intercept = 0.0;
        assert_eq!(render_equation(&eq), "0 = u");
        assert_eq!(format_coefficient(0.00012), "0.000120");
        assert_eq!(format_coefficient(-2.5e-9), "-2.50000e-9");
    }

    #[test]
    fn single_slot_reduces_to_equation_search() {
        let spec = SynthSpec::new(SynthKind::Heat1d);
        let cache = analytic_derivatives(&spec, 2).unwrap();
        let pool = pool_for(&["u"], 2);
        let cfg = small_cfg();
        let search = SystemSearch::new(cache.clone(), pool.clone(), cfg).unwrap();
        let system = search.run(&SparsityVector::new(vec![1e-4]).unwrap(), 7).unwrap();
        let direct = run_equation_ea(
            &EAConfig {
                rng_seed: slot_seed(7, 0),
                ..cfg
            },
            &pool,
            1e-4,
            &TermStore::new(Arc::new(cache)),
            &Taboo::new(),
        )
        .unwrap()
        .best;
        assert_eq!(system.equations[0], direct);
        assert_eq!(system.quality, vec![direct.residual_norm]);
        assert_eq!(system.complexity, vec![direct.complexity()]);
    }

    /// Heat field `u` plus a constant `p`: one slot must settle on a lone-`p`
    /// equation, and the taboo keeps the other slot on `u`.
    #[test]
    fn static_field_yields_single_term_equation() {
        let spec = SynthSpec::new(SynthKind::Heat1d);
        let heat = analytic_derivatives(&spec, 2).unwrap();
        let grid = heat.grid().clone();
        let mut arrays: Vec<(TokenOrigin, Vec<f64>)> = heat.iter().map(|(_, o, v)| (o, v.to_vec())).collect();
        arrays.push((TokenOrigin { variable: 1, axis: 0, order: 0 }, vec![1.5; grid.len()]));
        for axis in 0..2 {
            for order in 1..=2 {
                arrays.push((TokenOrigin { variable: 1, axis, order }, vec![0.0; grid.len()]));
            }
        }
        let cache = TokenCache::from_arrays(grid, vec!["u".into(), "p".into()], DiffConfig::default(), arrays).unwrap();
        let search = SystemSearch::new(cache, pool_for(&["u", "p"], 2), small_cfg()).unwrap();
        let system = search.run(&SparsityVector::new(vec![1e-4, 1e-4]).unwrap(), 3).unwrap();
        let singles: Vec<usize> = (0..2).filter(|&i| system.described[i] == BTreeSet::from(["p".to_string()])).collect();
        assert_eq!(singles.len(), 1, "{:?} {:?} {:?}", system.render(), system.described, system.quality);
        assert_eq!(system.complexity[singles[0]], 1, "{:?}", system.render());
        let other = 1 - singles[0];
        assert!(system.described[other].contains("u"), "{:?}", system.render());
        assert!(!system.degenerate);
    }

    /// Heat in `u`, transport in `w`: each slot describes one variable with
    /// a near-zero residual, confirmed by recomputing it from the cache.
    #[test]
    fn two_variable_system_recovered() {
        let heat = SynthSpec::new(SynthKind::Heat1d);
        let h = analytic_derivatives(&heat, 2).unwrap();
        let mut adv = SynthSpec::new(SynthKind::Advection1d).with_param("k", 2.0);
        adv.steps = heat.steps.clone();
        let a = analytic_derivatives(&adv, 2).unwrap();
        let mut arrays: Vec<(TokenOrigin, Vec<f64>)> = h.iter().map(|(_, o, v)| (o, v.to_vec())).collect();
        arrays.extend(a.iter().map(|(_, o, v)| (TokenOrigin { variable: 1, ..o }, v.to_vec())));
        let cache = TokenCache::from_arrays(h.grid().clone(), vec!["u".into(), "w".into()], DiffConfig::default(), arrays)
            .unwrap();
        let search = SystemSearch::new(cache.clone(), pool_for(&["u", "w"], 2), small_cfg()).unwrap();
        let (system, trace) = search.run_traced(&SparsityVector::new(vec![1e-4, 1e-4]).unwrap(), 11).unwrap();
        let mut seen: Vec<&BTreeSet<String>> = system.described.iter().collect();
        seen.sort();
        assert_eq!(
            seen,
            vec![&BTreeSet::from(["u".to_string()]), &BTreeSet::from(["w".to_string()])],
            "{:?}",
            system.render()
        );
        for (q, r) in system.quality.iter().zip(&trace.residuals) {
            let brute = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((q - brute).abs() <= 1e-9 * (1.0 + brute));
            assert!(*q < 1e-6);
        }
    }

    #[test]
    fn raw_fields_telescope() {
        let spec = SynthSpec::new(SynthKind::Heat1d);
        let cache = analytic_derivatives(&spec, 2).unwrap();
        let mut arrays: Vec<(TokenOrigin, Vec<f64>)> = cache.iter().map(|(_, o, v)| (o, v.to_vec())).collect();
        let extra: Vec<(TokenOrigin, Vec<f64>)> = arrays
            .iter()
            .map(|(o, v)| (TokenOrigin { variable: 1, ..*o }, v.iter().map(|x| 0.5 * x * x).collect()))
            .collect();
        arrays.extend(extra);
        let cache =
            TokenCache::from_arrays(cache.grid().clone(), vec!["u".into(), "q".into()], DiffConfig::default(), arrays)
                .unwrap();
        let search = SystemSearch::new(cache.clone(), pool_for(&["u", "q"], 2), small_cfg()).unwrap();
        let (_, trace) = search.run_traced(&SparsityVector::new(vec![1e-3, 1e-2]).unwrap(), 5).unwrap();
        for var in ["u", "q"] {
            let orig = cache.get(var).unwrap();
            let now = trace.working_cache.get(var).unwrap();
            for i in 0..orig.len() {
                let expected = orig[i] - trace.residuals.iter().map(|r| r[i]).sum::<f64>();
                assert!((now[i] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lambda_count_must_match_slots() {
        let spec = SynthSpec::new(SynthKind::Heat1d);
        let search =
            SystemSearch::new(analytic_derivatives(&spec, 1).unwrap(), pool_for(&["u"], 1), small_cfg()).unwrap();
        assert!(search.run(&SparsityVector::new(vec![0.1, 0.1]).unwrap(), 0).is_err());
    }
}
