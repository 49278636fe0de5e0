//! Equation structure encoding: token families, factors, terms and
//! chromosomes, and their evaluation over a [`TokenCache`].

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::differentiation::{derivative_key, TokenCache};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub integer: bool,
}

impl ParamSpec {
    fn new(name: &str, lower: f64, upper: f64, integer: bool) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            integer,
        }
    }

    pub fn range(&self) -> f64 {
        self.upper - self.lower
    }

    /// Rounds integer params and clamps into bounds.
    pub fn clamp(&self, v: f64) -> f64 {
        let v = if self.integer { v.round() } else { v };
        v.clamp(self.lower, self.upper)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper && (!self.integer || v.fract() == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Derivative,
    Parametric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrigFunction {
    Sin,
    Cos,
}

impl TrigFunction {
    fn apply(self, x: f64) -> f64 {
        match self {
            TrigFunction::Sin => x.sin(),
            TrigFunction::Cos => x.cos(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            TrigFunction::Sin => "sin",
            TrigFunction::Cos => "cos",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum FamilyBody {
    /// Params: `[axis, order, power]`. `allowed` lists the admissible
    /// `(axis, order)` pairs; order 0 is always stored with axis 0.
    Derivative {
        variable: String,
        allowed: Vec<(usize, usize)>,
    },
    /// Params: `[frequency, axis, power]`; evaluates `f(frequency * x_axis)^power`.
    Trig { function: TrigFunction },
}

/// A class of tokens sharing one parameter schema.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFamily {
    name: String,
    body: FamilyBody,
    axis_names: Vec<String>,
    schema: Vec<ParamSpec>,
}

pub const POWER_PARAM: usize = 2;

impl TokenFamily {
    /// Derivative tokens of `variable` restricted to the given `(axis, order)`
    /// pairs (order 0 is the raw field).
    pub fn derivative(
        variable: &str,
        axis_names: &[String],
        allowed: &[(usize, usize)],
        max_power: u32,
    ) -> Result<Self> {
        if allowed.is_empty() {
            return Err(Error::Config(format!("token family `{variable}` is empty")));
        }
        if max_power < 1 {
            return Err(Error::Config("max_power must be at least 1".into()));
        }
        let mut set: Vec<(usize, usize)> = allowed
            .iter()
            .map(|&(a, o)| if o == 0 { (0, 0) } else { (a, o) })
            .collect();
        set.sort_unstable();
        set.dedup();
        if let Some(&(a, _)) = set.iter().find(|(a, _)| *a >= axis_names.len()) {
            return Err(Error::Config(format!("axis {a} out of range for `{variable}`")));
        }
        let max_order = set.iter().map(|&(_, o)| o).max().unwrap_or(0);
        let schema = vec![
            ParamSpec::new("axis", 0.0, (axis_names.len() - 1) as f64, true),
            ParamSpec::new("order", 0.0, max_order as f64, true),
            ParamSpec::new("power", 1.0, max_power as f64, true),
        ];
        Ok(Self {
            name: variable.to_string(),
            body: FamilyBody::Derivative {
                variable: variable.to_string(),
                allowed: set,
            },
            axis_names: axis_names.to_vec(),
            schema,
        })
    }

    /// All pure derivatives of `variable` up to `max_order` along every axis.
    pub fn all_derivatives(variable: &str, axis_names: &[String], max_order: usize, max_power: u32) -> Result<Self> {
        let mut allowed = vec![(0, 0)];
        for a in 0..axis_names.len() {
            for o in 1..=max_order {
                allowed.push((a, o));
            }
        }
        Self::derivative(variable, axis_names, &allowed, max_power)
    }

    pub fn trig(
        name: &str,
        function: TrigFunction,
        axis_names: &[String],
        frequency: (f64, f64),
        max_power: u32,
    ) -> Result<Self> {
        let (lo, hi) = frequency;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("bad frequency bounds for `{name}`")));
        }
        if max_power < 1 {
            return Err(Error::Config("max_power must be at least 1".into()));
        }
        Ok(Self {
            name: name.to_string(),
            body: FamilyBody::Trig { function },
            axis_names: axis_names.to_vec(),
            schema: vec![
                ParamSpec::new("frequency", lo, hi, false),
                ParamSpec::new("axis", 0.0, (axis_names.len() - 1) as f64, true),
                ParamSpec::new("power", 1.0, max_power as f64, true),
            ],
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> TokenKind {
        match self.body {
            FamilyBody::Derivative { .. } => TokenKind::Derivative,
            FamilyBody::Trig { .. } => TokenKind::Parametric,
        }
    }

    /// The dependent variable of a derivative family.
    pub fn variable(&self) -> Option<&str> {
        match &self.body {
            FamilyBody::Derivative { variable, .. } => Some(variable),
            FamilyBody::Trig { .. } => None,
        }
    }

    pub fn schema(&self) -> &[ParamSpec] {
        &self.schema
    }

    pub fn allowed_derivatives(&self) -> Option<&[(usize, usize)]> {
        match &self.body {
            FamilyBody::Derivative { allowed, .. } => Some(allowed),
            FamilyBody::Trig { .. } => None,
        }
    }

    pub fn max_power(&self) -> u32 {
        self.schema[POWER_PARAM].upper as u32
    }

    fn random_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.body {
            FamilyBody::Derivative { allowed, .. } => {
                let (axis, order) = allowed[rng.gen_range(0..allowed.len())];
                let power = rng.gen_range(1..=self.max_power());
                vec![axis as f64, order as f64, power as f64]
            }
            FamilyBody::Trig { .. } => {
                let f = &self.schema[0];
                let freq = if f.range() > 0.0 {
                    rng.gen_range(f.lower..=f.upper)
                } else {
                    f.lower
                };
                let axis = rng.gen_range(0..self.axis_names.len());
                let power = rng.gen_range(1..=self.max_power());
                vec![freq, axis as f64, power as f64]
            }
        }
    }

    /// Whether `params` is admissible (after canonicalization).
    fn admits(&self, params: &[f64]) -> bool {
        if params.len() != self.schema.len() || !params.iter().zip(&self.schema).all(|(v, s)| s.contains(*v)) {
            return false;
        }
        match &self.body {
            FamilyBody::Derivative { allowed, .. } => {
                allowed.contains(&(params[0] as usize, params[1] as usize))
            }
            FamilyBody::Trig { .. } => true,
        }
    }
}

/// A token instance with fixed parameters.
#[derive(Debug, Clone)]
pub struct Factor {
    family: Arc<TokenFamily>,
    params: Vec<f64>,
}

impl PartialEq for Factor {
    fn eq(&self, other: &Self) -> bool {
        self.family.name == other.family.name && self.params == other.params
    }
}

impl Factor {
    pub fn new(family: Arc<TokenFamily>, params: Vec<f64>) -> Result<Self> {
        let params = canonical_params(&family, params);
        if !family.admits(&params) {
            return Err(Error::Argument(format!(
                "parameters {params:?} not admissible for family `{}`",
                family.name
            )));
        }
        Ok(Self { family, params })
    }

    /// Derivative factor by axis name.
    pub fn derivative(family: &Arc<TokenFamily>, axis: &str, order: usize, power: u32) -> Result<Self> {
        let a = family
            .axis_names
            .iter()
            .position(|n| n == axis)
            .ok_or_else(|| Error::Argument(format!("unknown axis `{axis}`")))?;
        Self::new(family.clone(), vec![a as f64, order as f64, power as f64])
    }

    pub fn family(&self) -> &Arc<TokenFamily> {
        &self.family
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn power(&self) -> u32 {
        self.params[POWER_PARAM] as u32
    }

    fn with_power(&self, power: u32) -> Self {
        let mut params = self.params.clone();
        params[POWER_PARAM] = power as f64;
        Self {
            family: self.family.clone(),
            params,
        }
    }

    pub fn variable(&self) -> Option<&str> {
        self.family.variable()
    }

    /// Derivative order (0 for raw fields and parametric tokens).
    pub fn order(&self) -> usize {
        match self.family.body {
            FamilyBody::Derivative { .. } => self.params[1] as usize,
            FamilyBody::Trig { .. } => 0,
        }
    }

    /// Derivative axis index, `None` for raw fields and parametric tokens.
    pub fn axis(&self) -> Option<usize> {
        match self.family.body {
            FamilyBody::Derivative { .. } if self.order() > 0 => Some(self.params[0] as usize),
            _ => None,
        }
    }

    /// Signature without the power: the cache key for derivative tokens.
    pub fn key(&self) -> String {
        match &self.family.body {
            FamilyBody::Derivative { variable, .. } => {
                let axis = &self.family.axis_names[self.params[0] as usize];
                derivative_key(variable, axis, self.params[1] as usize)
            }
            FamilyBody::Trig { function } => {
                let axis = &self.family.axis_names[self.params[1] as usize];
                if self.family.name == function.name() {
                    format!("{}({}*{})", function.name(), self.params[0], axis)
                } else {
                    format!("{}:{}({}*{})", self.family.name, function.name(), self.params[0], axis)
                }
            }
        }
    }

    pub fn signature(&self) -> String {
        factor_signature(self)
    }

    fn values(&self, cache: &TokenCache) -> Result<Vec<f64>> {
        let base: Vec<f64> = match &self.family.body {
            FamilyBody::Derivative { .. } => {
                let key = self.key();
                cache.get(&key).ok_or(Error::MissingToken(key))?.to_vec()
            }
            FamilyBody::Trig { function } => {
                let axis = self.params[1] as usize;
                if axis >= cache.grid().ndim() {
                    return Err(Error::MissingToken(self.key()));
                }
                let freq = self.params[0];
                cache
                    .grid()
                    .coordinate_field(axis)
                    .into_iter()
                    .map(|x| function.apply(freq * x))
                    .collect()
            }
        };
        let p = self.power() as i32;
        Ok(if p == 1 {
            base
        } else {
            base.into_iter().map(|v| v.powi(p)).collect()
        })
    }
}

fn canonical_params(family: &TokenFamily, mut params: Vec<f64>) -> Vec<f64> {
    if family.kind() == TokenKind::Derivative && params.len() == 3 && params[1] == 0.0 {
        params[0] = 0.0;
    }
    params
}

/// Deterministic text form of a factor. Derivatives render as
/// `d{order}{var}/d{axis}{order}` (or the bare variable at order 0) with a
/// `^power` suffix when the power exceeds one.
pub fn factor_signature(factor: &Factor) -> String {
    let key = factor.key();
    match factor.power() {
        1 => key,
        p => format!("{key}^{p}"),
    }
}

/// A product of factors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    factors: Vec<Factor>,
}

impl Term {
    /// Merges factors that differ only in power (powers add, capped at the
    /// family maximum) and sorts by signature.
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Argument("a term needs at least one factor".into()));
        }
        let mut merged: Vec<Factor> = Vec::with_capacity(factors.len());
        for f in factors {
            let key = (f.family.name.clone(), f.key());
            match merged
                .iter_mut()
                .find(|g| (g.family.name.clone(), g.key()) == key)
            {
                Some(g) => {
                    let p = (g.power() + f.power()).min(g.family.max_power());
                    *g = g.with_power(p);
                }
                None => merged.push(f),
            }
        }
        merged.sort_by_cached_key(|f| f.signature());
        Ok(Self { factors: merged })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn signature(&self) -> String {
        self.factors
            .iter()
            .map(|f| f.signature())
            .collect::<Vec<_>>()
            .join(" * ")
    }

    /// Family names in canonical factor order; terms sharing this key are
    /// crossover-compatible.
    pub fn family_key(&self) -> Vec<&str> {
        self.factors.iter().map(|f| f.family.name.as_str()).collect()
    }

    pub fn variables(&self) -> BTreeSet<String> {
        self.factors
            .iter()
            .filter_map(|f| f.variable().map(str::to_string))
            .collect()
    }

    pub fn is_valid(&self, max_factors: usize) -> bool {
        if self.factors.is_empty() || self.factors.len() > max_factors {
            return false;
        }
        let mut seen = BTreeSet::new();
        let sigs: Vec<String> = self.factors.iter().map(|f| f.signature()).collect();
        sigs.windows(2).all(|w| w[0] <= w[1])
            && self.factors.iter().all(|f| {
                f.family.admits(&f.params) && seen.insert((f.family.name.clone(), f.key()))
            })
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.signature())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChromosomeConfig {
    pub n_terms_min: usize,
    pub n_terms_max: usize,
    pub max_factors: usize,
}

impl Default for ChromosomeConfig {
    fn default() -> Self {
        Self {
            n_terms_min: 2,
            n_terms_max: 6,
            max_factors: 2,
        }
    }
}

impl ChromosomeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_terms_min < 2 || self.n_terms_min > self.n_terms_max {
            return Err(Error::Config(format!(
                "term bounds [{}, {}] invalid (minimum is 2)",
                self.n_terms_min, self.n_terms_max
            )));
        }
        if self.max_factors < 1 {
            return Err(Error::Config("max_factors must be at least 1".into()));
        }
        Ok(())
    }
}

/// A candidate equation structure: distinct terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Chromosome {
    terms: Vec<Term>,
}

impl Chromosome {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &terms {
            if !seen.insert(t.signature()) {
                return Err(Error::Argument(format!("duplicate term `{t}`")));
            }
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn signature(&self) -> String {
        self.terms
            .iter()
            .map(|t| t.signature())
            .collect::<Vec<_>>()
            .join(" + ")
    }

    pub fn is_valid(&self, cfg: &ChromosomeConfig) -> bool {
        let mut seen = BTreeSet::new();
        (cfg.n_terms_min..=cfg.n_terms_max).contains(&self.terms.len())
            && self
                .terms
                .iter()
                .all(|t| t.is_valid(cfg.max_factors) && seen.insert(t.signature()))
    }
}

/// Pointwise product of the factor arrays, each raised to its power.
pub fn evaluate_term(term: &Term, cache: &TokenCache) -> Result<Vec<f64>> {
    let mut factors = term.factors.iter();
    let first = factors.next().expect("terms are non-empty");
    let mut acc = first.values(cache)?;
    for f in factors {
        let v = f.values(cache)?;
        acc.iter_mut().zip(&v).for_each(|(a, b)| *a *= b);
    }
    Ok(acc)
}

pub fn random_factor<R: Rng + ?Sized>(rng: &mut R, family: &Arc<TokenFamily>) -> Factor {
    let params = canonical_params(family, family.random_params(rng));
    Factor {
        family: family.clone(),
        params,
    }
}

/// Between 1 and `max_factors` factors, families drawn uniformly.
pub fn random_term<R: Rng + ?Sized>(rng: &mut R, pool: &[Arc<TokenFamily>], max_factors: usize) -> Term {
    assert!(!pool.is_empty(), "token pool is empty");
    let n = rng.gen_range(1..=max_factors.max(1));
    let factors = (0..n)
        .map(|_| {
            let fam = &pool[rng.gen_range(0..pool.len())];
            random_factor(rng, fam)
        })
        .collect();
    Term::new(factors).expect("non-empty factor list")
}

const REDRAWS_PER_TERM: usize = 64;

pub fn random_chromosome<R: Rng + ?Sized>(
    rng: &mut R,
    pool: &[Arc<TokenFamily>],
    cfg: &ChromosomeConfig,
) -> Result<Chromosome> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Config("token pool is empty".into()));
    }
    let n = rng.gen_range(cfg.n_terms_min..=cfg.n_terms_max);
    let mut terms: Vec<Term> = Vec::with_capacity(n);
    let mut seen = BTreeSet::new();
    let mut attempts = 0;
    while terms.len() < n && attempts < n * REDRAWS_PER_TERM {
        attempts += 1;
        let t = random_term(rng, pool, cfg.max_factors);
        if seen.insert(t.signature()) {
            terms.push(t);
        }
    }
    if terms.len() < cfg.n_terms_min {
        return Err(Error::Config(format!(
            "token pool too small for {} distinct terms",
            cfg.n_terms_min
        )));
    }
    Chromosome::new(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::differentiation::{TokenCache, TokenOrigin};
    use crate::grid::Grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn axes() -> Vec<String> {
        vec!["t".into(), "x".into()]
    }

    fn u_family() -> Arc<TokenFamily> {
        Arc::new(TokenFamily::all_derivatives("u", &axes(), 3, 2).unwrap())
    }

    fn small_cache() -> TokenCache {
        let g = Arc::new(Grid::new(axes(), vec![3, 4], vec![0.0; 2], vec![1.0; 2]).unwrap());
        let u: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 1.0).collect();
        let ux: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        TokenCache::from_arrays(
            g,
            vec!["u".into()],
            Default::default(),
            vec![
                (TokenOrigin { variable: 0, axis: 0, order: 0 }, u),
                (TokenOrigin { variable: 0, axis: 1, order: 1 }, ux),
            ],
        )
        .unwrap()
    }

    #[test]
    fn signature_format() {
        let fam = u_family();
        let f = Factor::derivative(&fam, "x", 2, 1).unwrap();
        assert_eq!(factor_signature(&f), "d2u/dx2");
        assert_eq!(factor_signature(&f), factor_signature(&f.clone()));
        let g = Factor::derivative(&fam, "x", 2, 2).unwrap();
        assert_eq!(factor_signature(&g), "d2u/dx2^2");
        assert_ne!(factor_signature(&f), factor_signature(&g));
        let raw = Factor::derivative(&fam, "x", 0, 1).unwrap();
        assert_eq!(raw.signature(), "u");
        assert_eq!(raw, Factor::derivative(&fam, "t", 0, 1).unwrap());
    }

    #[test]
    fn trig_signature() {
        let fam = Arc::new(TokenFamily::trig("sin", TrigFunction::Sin, &axes(), (0.5, 2.0), 1).unwrap());
        let f = Factor::new(fam, vec![1.5, 1.0, 1.0]).unwrap();
        assert_eq!(f.signature(), "sin(1.5*x)");
        assert_eq!(f.variable(), None);
    }

    #[test]
    fn identity_and_merging() {
        let fam = u_family();
        let cache = small_cache();
        let u = Factor::derivative(&fam, "t", 0, 1).unwrap();
        let single = Term::new(vec![u.clone()]).unwrap();
        assert_eq!(&evaluate_term(&single, &cache).unwrap()[..], &cache.get("u").unwrap()[..]);
        let merged = Term::new(vec![u.clone(), u]).unwrap();
        assert_eq!(merged.factors().len(), 1);
        assert_eq!(merged.signature(), "u^2");
        let sq = evaluate_term(&merged, &cache).unwrap();
        for (s, v) in sq.iter().zip(cache.get("u").unwrap().iter()) {
            assert_eq!(*s, v * v);
        }
    }

    #[test]
    fn product_matches_pointwise_loop() {
        let fam = u_family();
        let cache = small_cache();
        let t = Term::new(vec![
            Factor::derivative(&fam, "x", 1, 1).unwrap(),
            Factor::derivative(&fam, "x", 0, 1).unwrap(),
        ])
        .unwrap();
        let got = evaluate_term(&t, &cache).unwrap();
        let u = cache.get("u").unwrap();
        let ux = cache.get("d1u/dx1").unwrap();
        for i in 0..12 {
            assert!((got[i] - u[i] * ux[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_token_named() {
        let fam = u_family();
        let t = Term::new(vec![Factor::derivative(&fam, "t", 3, 1).unwrap()]).unwrap();
        match evaluate_term(&t, &small_cache()) {
            Err(Error::MissingToken(s)) => assert_eq!(s, "d3u/dt3"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn random_term_bounds_and_determinism() {
        let pool = vec![u_family()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            assert_eq!(random_term(&mut rng, &pool, 1).factors().len(), 1);
        }
        let a = random_term(&mut ChaCha8Rng::seed_from_u64(9), &pool, 2);
        let b = random_term(&mut ChaCha8Rng::seed_from_u64(9), &pool, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn random_chromosome_two_single_factor_terms() {
        let pool = vec![u_family()];
        let cfg = ChromosomeConfig {
            n_terms_min: 2,
            n_terms_max: 2,
            max_factors: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let c = random_chromosome(&mut rng, &pool, &cfg).unwrap();
            assert_eq!(c.len(), 2);
            assert!(c.terms().iter().all(|t| t.factors().len() == 1));
            assert_ne!(c.terms()[0].signature(), c.terms()[1].signature());
        }
        let a = random_chromosome(&mut ChaCha8Rng::seed_from_u64(4), &pool, &cfg).unwrap();
        let b = random_chromosome(&mut ChaCha8Rng::seed_from_u64(4), &pool, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_terms_rejected() {
        let fam = u_family();
        let t = Term::new(vec![Factor::derivative(&fam, "x", 1, 1).unwrap()]).unwrap();
        assert!(Chromosome::new(vec![t.clone(), t]).is_err());
    }

    #[test]
    fn pool_too_small() {
        let fam = Arc::new(TokenFamily::derivative("u", &axes(), &[(0, 0)], 1).unwrap());
        let cfg = ChromosomeConfig {
            n_terms_min: 2,
            n_terms_max: 2,
            max_factors: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_chromosome(&mut rng, &[fam], &cfg).is_err());
    }
}
