//! Single-equation evolutionary search.
//!
//! Every chromosome is scored by trying each term as the right part: the
//! remaining terms are filtered by LASSO, refitted by least squares with an
//! intercept, and the split with the smallest residual norm wins. Fitness is
//! the inverse residual norm, capped at `1/eps_fit`.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sparse_solver::{lasso_from_moments, ols_from_moments, Moments, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::term_store::{TermData, TermStore};
use crate::token_pool::{
    random_chromosome, random_factor, random_term, Chromosome, ChromosomeConfig, Factor, Term, TokenFamily,
    TokenKind, POWER_PARAM,
};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EAConfig {
    pub population_size: usize,
    pub epochs: usize,
    pub tournament_size: usize,
    pub p_term_mutation: f64,
    pub p_param_mutation: f64,
    pub p_factor_swap: f64,
    /// Gaussian step for continuous token parameters, as a fraction of the range.
    pub sigma_param: f64,
    pub eps_fit: f64,
    pub lasso_tol: f64,
    pub lasso_max_iter: usize,
    pub rng_seed: u64,
    #[serde(flatten)]
    pub terms: ChromosomeConfig,
}

impl Default for EAConfig {
    fn default() -> Self {
        Self {
            population_size: 32,
            epochs: 50,
            tournament_size: 4,
            p_term_mutation: 0.2,
            p_param_mutation: 0.3,
            p_factor_swap: 0.5,
            sigma_param: 0.1,
            eps_fit: 1e-9,
            lasso_tol: DEFAULT_TOL,
            lasso_max_iter: DEFAULT_MAX_ITER,
            rng_seed: 0,
            terms: ChromosomeConfig::default(),
        }
    }
}

impl EAConfig {
    pub fn validate(&self) -> Result<()> {
        self.terms.validate()?;
        if self.population_size < 2 {
            return Err(Error::Config("population_size must be at least 2".into()));
        }
        if self.tournament_size < 1 || self.tournament_size > self.population_size {
            return Err(Error::Config(format!(
                "tournament_size {} outside 1..={}",
                self.tournament_size, self.population_size
            )));
        }
        for (name, p) in [
            ("p_term_mutation", self.p_term_mutation),
            ("p_param_mutation", self.p_param_mutation),
            ("p_factor_swap", self.p_factor_swap),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.eps_fit > 0.0) || !(self.sigma_param >= 0.0) || !(self.lasso_tol > 0.0) {
            return Err(Error::Config("eps_fit and lasso_tol must be > 0, sigma_param >= 0".into()));
        }
        Ok(())
    }
}

/// A chromosome with its selected right part and fitted coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Equation {
    pub chromosome: Chromosome,
    pub right_part_idx: usize,
    /// One coefficient per non-target term, in term order.
    pub alpha: Vec<f64>,
    /// Least-squares intercept: `target ≈ Σ alpha·term + intercept`.
    pub intercept: f64,
    pub fitness: f64,
    pub residual_norm: f64,
    pub lambda: f64,
}

impl Equation {
    pub fn target(&self) -> &Term {
        &self.chromosome.terms()[self.right_part_idx]
    }

    /// Non-target terms paired with their coefficients.
    pub fn features(&self) -> impl Iterator<Item = (usize, &Term, f64)> + '_ {
        self.chromosome
            .terms()
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.right_part_idx)
            .zip(&self.alpha)
            .map(|((i, t), &a)| (i, t, a))
    }

    pub fn active_features(&self) -> impl Iterator<Item = (usize, &Term, f64)> + '_ {
        self.features().filter(|(_, _, a)| *a != 0.0)
    }

    /// Active structural terms: the target plus every nonzero-coefficient term.
    pub fn complexity(&self) -> usize {
        1 + self.active_features().count()
    }

    /// `Σ alpha·term + intercept − target` over the grid.
    pub fn residual(&self, store: &TermStore) -> Result<Vec<f64>> {
        let target = store.term(self.target())?;
        let mut r: Vec<f64> = target.values.iter().map(|t| self.intercept - t).collect();
        for (_, term, a) in self.active_features() {
            let d = store.term(term)?;
            r.iter_mut().zip(d.values.iter()).for_each(|(ri, v)| *ri += a * v);
        }
        Ok(r)
    }
}

/// Variables whose lone-variable equations are already taken.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Taboo(BTreeSet<String>);

impl Taboo {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a described set; only singletons become taboo.
    pub fn record(&mut self, described: &BTreeSet<String>) {
        if described.len() == 1 {
            self.0.extend(described.iter().cloned());
        }
    }

    pub fn penalizes(&self, described: &BTreeSet<String>) -> bool {
        described.len() == 1 && described.iter().all(|v| self.0.contains(v))
    }

    pub fn variables(&self) -> &BTreeSet<String> {
        &self.0
    }
}

/// Dependent variables in the target term or any nonzero-coefficient term.
pub fn describes_variables(equation: &Equation) -> BTreeSet<String> {
    let mut vars = equation.target().variables();
    for (_, t, _) in equation.active_features() {
        vars.extend(t.variables());
    }
    vars
}

/// Relative residual below which the moment expansion of `‖r‖²` has lost
/// too many digits and the residual is summed explicitly.
const EXPLICIT_RESIDUAL_BELOW: f64 = 1e-8;

fn residual_norm(
    moments: &Moments,
    data: &[Arc<TermData>],
    support: &[usize],
    alpha: &[f64],
    intercept: f64,
    target: usize,
) -> f64 {
    let m = moments.rows() as f64;
    let syy = moments.cov(target, target);
    let mut r2 = syy;
    for (a, &ja) in support.iter().enumerate() {
        r2 -= 2.0 * alpha[a] * moments.cov(ja, target);
        for (b, &jb) in support.iter().enumerate() {
            r2 += alpha[a] * alpha[b] * moments.cov(ja, jb);
        }
    }
    if r2 > EXPLICIT_RESIDUAL_BELOW * syy {
        return (r2 * m).sqrt();
    }
    let y = &data[target].values;
    let mut acc = vec![intercept; y.len()];
    for (&j, &a) in support.iter().zip(alpha) {
        acc.iter_mut().zip(data[j].values.iter()).for_each(|(r, v)| *r += a * v);
    }
    acc.iter().zip(y.iter()).map(|(r, t)| (r - t) * (r - t)).sum::<f64>().sqrt()
}

struct Split {
    alpha: Vec<f64>,
    intercept: f64,
    residual_norm: f64,
}

fn fit_split(
    moments: &Moments,
    data: &[Arc<TermData>],
    target: usize,
    lambda: f64,
    cfg: &EAConfig,
) -> Result<Split> {
    let n = data.len();
    let features: Vec<usize> = (0..n).filter(|&j| j != target).collect();
    let lasso = lasso_from_moments(moments, &features, target, lambda, cfg.lasso_tol, cfg.lasso_max_iter)?;
    let support: Vec<usize> = lasso.support().into_iter().map(|s| features[s]).collect();
    let ols = ols_from_moments(moments, &support, target);
    let rn = residual_norm(moments, data, &support, &ols.alpha, ols.intercept, target);
    let mut alpha = vec![0.0; n - 1];
    for (&j, &a) in support.iter().zip(&ols.alpha) {
        let pos = if j < target { j } else { j - 1 };
        alpha[pos] = a;
    }
    Ok(Split {
        alpha,
        intercept: ols.intercept,
        residual_norm: rn,
    })
}

/// Scores `chromosome` with a fixed right part.
pub fn evaluate_with_target(
    chromosome: &Chromosome,
    target: usize,
    lambda: f64,
    store: &TermStore,
    cfg: &EAConfig,
) -> Result<Equation> {
    if chromosome.len() < 2 {
        return Err(Error::Degenerate("an equation needs at least two terms".into()));
    }
    if target >= chromosome.len() {
        return Err(Error::Argument(format!("right part {target} out of range")));
    }
    let data = chromosome
        .terms()
        .iter()
        .map(|t| store.term(t))
        .collect::<Result<Vec<_>>>()?;
    let moments = store.moments(&data);
    let split = fit_split(&moments, &data, target, lambda, cfg)?;
    Ok(Equation {
        chromosome: chromosome.clone(),
        right_part_idx: target,
        alpha: split.alpha,
        intercept: split.intercept,
        fitness: 1.0 / split.residual_norm.max(cfg.eps_fit),
        residual_norm: split.residual_norm,
        lambda,
    })
}

/// Tries every right part, keeps the fittest (lowest index on ties), then
/// zeroes the fitness of a taboo lone-variable equation.
pub fn evaluate_equation(
    chromosome: &Chromosome,
    lambda: f64,
    store: &TermStore,
    taboo: &Taboo,
    cfg: &EAConfig,
) -> Result<Equation> {
    if chromosome.len() < 2 {
        return Err(Error::Degenerate("an equation needs at least two terms".into()));
    }
    let data = chromosome
        .terms()
        .iter()
        .map(|t| store.term(t))
        .collect::<Result<Vec<_>>>()?;
    let moments = store.moments(&data);
    let mut best: Option<(usize, Split, f64)> = None;
    for target in 0..chromosome.len() {
        let split = fit_split(&moments, &data, target, lambda, cfg)?;
        let fitness = 1.0 / split.residual_norm.max(cfg.eps_fit);
        if best.as_ref().map_or(true, |(_, _, f)| fitness > *f) {
            best = Some((target, split, fitness));
        }
    }
    let (target, split, fitness) = best.expect("at least two splits");
    let mut eq = Equation {
        chromosome: chromosome.clone(),
        right_part_idx: target,
        alpha: split.alpha,
        intercept: split.intercept,
        fitness,
        residual_norm: split.residual_norm,
        lambda,
    };
    if taboo.penalizes(&describes_variables(&eq)) {
        eq.fitness = 0.0;
    }
    Ok(eq)
}

fn combine_factor<R: Rng + ?Sized>(rng: &mut R, fa: &Factor, fb: &Factor) -> (Factor, Factor) {
    let schema = fa.family().schema();
    let mut pa = Vec::with_capacity(schema.len());
    let mut pb = Vec::with_capacity(schema.len());
    for (s, (&a, &b)) in schema.iter().zip(fa.params().iter().zip(fb.params())) {
        let w: f64 = rng.gen();
        pa.push(s.clamp(w * a + (1.0 - w) * b));
        pb.push(s.clamp(w * b + (1.0 - w) * a));
    }
    let ca = Factor::new(fa.family().clone(), pa).unwrap_or_else(|_| fa.clone());
    let cb = Factor::new(fb.family().clone(), pb).unwrap_or_else(|_| fb.clone());
    (ca, cb)
}

fn replace_unique(terms: &mut [Term], at: usize, new: Term) -> bool {
    let sig = new.signature();
    if terms.iter().enumerate().any(|(i, t)| i != at && t.signature() == sig) {
        return false;
    }
    terms[at] = new;
    true
}

/// Three-group term recombination: shared terms are kept, terms built from
/// the same families get parameters interpolated between the parents, and
/// the remaining terms are exchanged with probability `p_factor_swap`.
pub fn crossover<R: Rng + ?Sized>(
    parent_a: &Chromosome,
    parent_b: &Chromosome,
    rng: &mut R,
    cfg: &EAConfig,
) -> (Chromosome, Chromosome) {
    let sigs_a: Vec<String> = parent_a.terms().iter().map(Term::signature).collect();
    let sigs_b: Vec<String> = parent_b.terms().iter().map(Term::signature).collect();
    let rest_a: Vec<usize> = (0..sigs_a.len()).filter(|&i| !sigs_b.contains(&sigs_a[i])).collect();
    let rest_b: Vec<usize> = (0..sigs_b.len()).filter(|&j| !sigs_a.contains(&sigs_b[j])).collect();

    let mut child_a = parent_a.terms().to_vec();
    let mut child_b = parent_b.terms().to_vec();

    let mut used_b = vec![false; rest_b.len()];
    let mut unique_a = Vec::new();
    for &i in &rest_a {
        let ta = &parent_a.terms()[i];
        let partner = rest_b.iter().enumerate().position(|(k, &j)| {
            !used_b[k] && parent_b.terms()[j].family_key() == ta.family_key()
        });
        match partner {
            Some(k) => {
                used_b[k] = true;
                let j = rest_b[k];
                let tb = &parent_b.terms()[j];
                let (fa, fb): (Vec<Factor>, Vec<Factor>) = ta
                    .factors()
                    .iter()
                    .zip(tb.factors())
                    .map(|(x, y)| combine_factor(rng, x, y))
                    .unzip();
                if let Ok(t) = Term::new(fa) {
                    replace_unique(&mut child_a, i, t);
                }
                if let Ok(t) = Term::new(fb) {
                    replace_unique(&mut child_b, j, t);
                }
            }
            None => unique_a.push(i),
        }
    }
    let unique_b: Vec<usize> = rest_b
        .iter()
        .zip(&used_b)
        .filter(|(_, u)| !**u)
        .map(|(&j, _)| j)
        .collect();
    for (&i, &j) in unique_a.iter().zip(&unique_b) {
        if rng.gen::<f64>() < cfg.p_factor_swap {
            let ta = child_a[i].clone();
            let tb = child_b[j].clone();
            let sig_a = ta.signature();
            let sig_b = tb.signature();
            let fits_a = child_a.iter().enumerate().all(|(k, t)| k == i || t.signature() != sig_b);
            let fits_b = child_b.iter().enumerate().all(|(k, t)| k == j || t.signature() != sig_a);
            if fits_a && fits_b {
                child_a[i] = tb;
                child_b[j] = ta;
            }
        }
    }
    (
        Chromosome::new(child_a).expect("crossover keeps terms distinct"),
        Chromosome::new(child_b).expect("crossover keeps terms distinct"),
    )
}

const MUTATION_RETRIES: usize = 32;

fn perturb_factor<R: Rng + ?Sized>(
    rng: &mut R,
    factor: &Factor,
    pool: &[Arc<TokenFamily>],
    sigma: f64,
) -> Factor {
    match factor.family().kind() {
        TokenKind::Derivative => {
            // Redraw variable and derivative, keep the power where allowed.
            let families: Vec<&Arc<TokenFamily>> =
                pool.iter().filter(|f| f.kind() == TokenKind::Derivative).collect();
            let fam = families[rng.gen_range(0..families.len())];
            let fresh = random_factor(rng, fam);
            let mut params = fresh.params().to_vec();
            params[POWER_PARAM] = (factor.power() as f64).min(fam.max_power() as f64);
            Factor::new(fam.clone(), params).unwrap_or(fresh)
        }
        TokenKind::Parametric => {
            let schema = factor.family().schema();
            let mut params = factor.params().to_vec();
            for (p, s) in params.iter_mut().zip(schema) {
                if !s.integer && s.range() > 0.0 {
                    let step = Normal::new(0.0, sigma * s.range()).expect("finite sigma");
                    *p = s.clamp(*p + step.sample(rng));
                }
            }
            // Occasionally move the parametric token to another axis.
            let axis = &schema[1];
            if rng.gen::<bool>() && axis.range() > 0.0 {
                params[1] = rng.gen_range(axis.lower as usize..=axis.upper as usize) as f64;
            }
            Factor::new(factor.family().clone(), params).unwrap_or_else(|_| factor.clone())
        }
    }
}

/// Term replacement with probability `p_term_mutation` per term, otherwise
/// parameter mutation (perturb one factor or insert a factor) with
/// probability `p_param_mutation`.
pub fn mutate<R: Rng + ?Sized>(
    chromosome: &Chromosome,
    rng: &mut R,
    cfg: &EAConfig,
    pool: &[Arc<TokenFamily>],
) -> Chromosome {
    let mut terms = chromosome.terms().to_vec();
    let max_factors = cfg.terms.max_factors;
    for i in 0..terms.len() {
        if rng.gen::<f64>() < cfg.p_term_mutation {
            let old = terms[i].signature();
            for _ in 0..MUTATION_RETRIES {
                let t = random_term(rng, pool, max_factors);
                if t.signature() != old && replace_unique(&mut terms, i, t) {
                    break;
                }
            }
        } else if rng.gen::<f64>() < cfg.p_param_mutation {
            let term = &terms[i];
            let k = rng.gen_range(0..term.factors().len());
            let can_insert = term.factors().len() < max_factors;
            let mut factors = term.factors().to_vec();
            if can_insert && rng.gen::<bool>() {
                let fam = &pool[rng.gen_range(0..pool.len())];
                factors.push(random_factor(rng, fam));
            } else {
                factors[k] = perturb_factor(rng, &factors[k], pool, cfg.sigma_param);
            }
            if let Ok(t) = Term::new(factors) {
                replace_unique(&mut terms, i, t);
            }
        }
    }
    Chromosome::new(terms).expect("mutation keeps terms distinct")
}

fn tournament<R: Rng + ?Sized>(rng: &mut R, population: &[Equation], size: usize) -> usize {
    let mut best = rng.gen_range(0..population.len());
    for _ in 1..size {
        let c = rng.gen_range(0..population.len());
        if population[c].fitness > population[best].fitness
            || (population[c].fitness == population[best].fitness && c < best)
        {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct EaRun {
    pub best: Equation,
    /// Best fitness seen so far, recorded after initialization and each epoch.
    pub best_history: Vec<f64>,
}

struct Evaluations<'a> {
    memo: HashMap<String, Equation>,
    lambda: f64,
    store: &'a TermStore,
    taboo: &'a Taboo,
    cfg: &'a EAConfig,
}

impl Evaluations<'_> {
    fn evaluate_all(&mut self, chromosomes: Vec<Chromosome>) -> Result<Vec<Equation>> {
        let mut fresh: Vec<(String, Chromosome)> = Vec::new();
        for c in &chromosomes {
            let sig = c.signature();
            if !self.memo.contains_key(&sig) && !fresh.iter().any(|(s, _)| *s == sig) {
                fresh.push((sig, c.clone()));
            }
        }
        let (lambda, store, taboo, cfg) = (self.lambda, self.store, self.taboo, self.cfg);
        let evaluated = fresh
            .into_par_iter()
            .map(|(sig, c)| evaluate_equation(&c, lambda, store, taboo, cfg).map(|e| (sig, e)))
            .collect::<Result<Vec<_>>>()?;
        self.memo.extend(evaluated);
        Ok(chromosomes
            .iter()
            .map(|c| self.memo[&c.signature()].clone())
            .collect())
    }
}

/// Generational loop with truncation survival and keep-best elitism.
/// Deterministic for a fixed `cfg.rng_seed`.
pub fn run_equation_ea(
    cfg: &EAConfig,
    pool: &[Arc<TokenFamily>],
    lambda: f64,
    store: &TermStore,
    taboo: &Taboo,
) -> Result<EaRun> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Config("token pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let initial = (0..cfg.population_size)
        .map(|_| random_chromosome(&mut rng, pool, &cfg.terms))
        .collect::<Result<Vec<_>>>()?;
    let mut evals = Evaluations {
        memo: HashMap::new(),
        lambda,
        store,
        taboo,
        cfg,
    };
    let mut population = evals.evaluate_all(initial)?;
    let mut best = population[0].clone();
    for e in &population[1..] {
        if e.fitness > best.fitness {
            best = e.clone();
        }
    }
    let mut history = vec![best.fitness];

    for _ in 0..cfg.epochs {
        population.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
        population.truncate(cfg.population_size);
        let mut offspring = Vec::with_capacity(cfg.population_size + 1);
        while offspring.len() < cfg.population_size {
            let a = tournament(&mut rng, &population, cfg.tournament_size);
            let b = tournament(&mut rng, &population, cfg.tournament_size);
            let (ca, cb) = crossover(&population[a].chromosome, &population[b].chromosome, &mut rng, cfg);
            offspring.push(mutate(&ca, &mut rng, cfg, pool));
            offspring.push(mutate(&cb, &mut rng, cfg, pool));
        }
        let evaluated = evals.evaluate_all(offspring)?;
        for e in &evaluated {
            if e.fitness > best.fitness {
                best = e.clone();
            }
        }
        population.extend(evaluated);
        history.push(best.fitness);
    }
    Ok(EaRun {
        best,
        best_history: history,
    })
}
