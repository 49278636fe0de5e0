//! MOEA/DD over sparsity vectors.
//!
//! Each genotype is a vector of per-equation sparsity constants; its
//! phenotype is the equation system found with them. Objectives are the
//! interleaved (quality, complexity) pairs of the system, all minimized.
//! Subregions are defined by simplex-lattice weight vectors; the population
//! update removes, level by level, from the most crowded subregion the
//! member with the worst penalty-boundary-intersection value.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::equation_ea::EAConfig;
use crate::error::{Error, Result};
use crate::system_builder::{objective_vector, EquationSystem, SparsityVector, SystemSearch};

/// Largest weight set `generate_weights` will build.
pub const MAX_WEIGHTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeaddConfig {
    /// Simplex-lattice divisions per objective.
    pub divisions: usize,
    pub neighbors: usize,
    pub epochs: usize,
    pub p_mut: f64,
    pub p_xover: f64,
    /// Mutation step as a fraction of the sparsity range.
    pub sigma_mut: f64,
    /// Probability of drawing both parents from the neighborhood.
    pub p_local: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub pbi_theta: f64,
    /// Epochs of the equation search in the ideal-point pilot run.
    pub pilot_epochs: usize,
    pub rng_seed: u64,
}

impl Default for MoeaddConfig {
    fn default() -> Self {
        Self {
            divisions: 3,
            neighbors: 5,
            epochs: 20,
            p_mut: 0.3,
            p_xover: 0.9,
            sigma_mut: 0.05,
            p_local: 0.9,
            lambda_lo: 1e-6,
            lambda_hi: 1.0,
            pbi_theta: 5.0,
            pilot_epochs: 5,
            rng_seed: 0,
        }
    }
}

impl MoeaddConfig {
    pub fn validate(&self) -> Result<()> {
        if self.divisions < 1 || self.neighbors < 1 {
            return Err(Error::Config("divisions and neighbors must be at least 1".into()));
        }
        for (name, p) in [("p_mut", self.p_mut), ("p_xover", self.p_xover), ("p_local", self.p_local)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.lambda_lo > 0.0 && self.lambda_lo <= self.lambda_hi && self.lambda_hi.is_finite()) {
            return Err(Error::Config(format!(
                "lambda bounds [{}, {}] must satisfy 0 < lo <= hi",
                self.lambda_lo, self.lambda_hi
            )));
        }
        if !(self.sigma_mut > 0.0) || !(self.pbi_theta > 0.0) {
            return Err(Error::Config("sigma_mut and pbi_theta must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    /// The nearest weight vectors, nearest first; includes this one.
    pub neighbors: Vec<usize>,
}

fn binomial(n: usize, k: usize) -> Option<usize> {
    let mut acc: usize = 1;
    for i in 0..k.min(n - k) {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

fn lattice(n_obj: usize, remaining: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() + 1 == n_obj {
        prefix.push(remaining);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for h in 0..=remaining {
        prefix.push(h);
        lattice(n_obj, remaining - h, prefix, out);
        prefix.pop();
    }
}

/// Every point `h / divisions` of the unit simplex with integer `h`, each
/// with its `k` nearest neighbors (ties to the lower index).
pub fn generate_weights(n_obj: usize, divisions: usize, k: usize) -> Result<Vec<WeightVector>> {
    if n_obj < 2 || divisions < 1 || k < 1 {
        return Err(Error::Config(format!(
            "weights need n_obj >= 2, divisions >= 1, k >= 1 (got {n_obj}, {divisions}, {k})"
        )));
    }
    let count = binomial(divisions + n_obj - 1, n_obj - 1).unwrap_or(usize::MAX);
    if count > MAX_WEIGHTS {
        return Err(Error::Config(format!(
            "{count} weight vectors for {n_obj} objectives and {divisions} divisions exceeds {MAX_WEIGHTS}"
        )));
    }
    let mut points = Vec::with_capacity(count);
    lattice(n_obj, divisions, &mut Vec::with_capacity(n_obj), &mut points);
    let weights: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().map(|&h| h as f64 / divisions as f64).collect())
        .collect();
    let k = k.min(weights.len());
    Ok(weights
        .iter()
        .map(|w| {
            let mut by_dist: Vec<(f64, usize)> = weights
                .iter()
                .enumerate()
                .map(|(j, v)| (w.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
                .collect();
            by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            WeightVector {
                weights: w.clone(),
                neighbors: by_dist[..k].iter().map(|&(_, j)| j).collect(),
            }
        })
        .collect())
}

/// `a` is no worse everywhere and better somewhere (minimization).
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        strictly |= x < y;
    }
    strictly
}

/// Non-domination level of every point (0 is the first front).
pub fn nondominated_sort(points: &[Vec<f64>]) -> Vec<usize> {
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if dominates(&points[i], &points[j]) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            } else if dominates(&points[j], &points[i]) {
                dominates_list[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut level = vec![0usize; n];
    let mut front: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    let mut current = 0;
    while !front.is_empty() {
        let mut next = Vec::new();
        for &i in &front {
            level[i] = current;
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        front = next;
        current += 1;
    }
    level
}

fn translate(objectives: &[f64], ideal: &[f64]) -> Vec<f64> {
    objectives.iter().zip(ideal).map(|(f, z)| (f - z).max(0.0)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Weight index with the smallest angle to `objectives − ideal` (clamped at
/// zero); the zero vector maps to 0.
pub fn assign_subregion(objectives: &[f64], weights: &[WeightVector], ideal: &[f64]) -> usize {
    let f = translate(objectives, ideal);
    let nf = norm(&f);
    if nf == 0.0 {
        return 0;
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, w) in weights.iter().enumerate() {
        let cos = f.iter().zip(&w.weights).map(|(a, b)| a * b).sum::<f64>() / (nf * norm(&w.weights));
        if cos > best.0 {
            best = (cos, i);
        }
    }
    best.1
}

/// Penalty-boundary intersection `d₁ + θ·d₂` of the translated objectives
/// against direction `w`.
pub fn pbi(objectives: &[f64], w: &[f64], ideal: &[f64], theta: f64) -> f64 {
    let f = translate(objectives, ideal);
    let nw = norm(w);
    let d1 = f.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / nw;
    let d2 = f
        .iter()
        .zip(w)
        .map(|(a, b)| {
            let e = a - d1 * b / nw;
            e * e
        })
        .sum::<f64>()
        .sqrt();
    d1 + theta * d2
}

/// Per gene with probability `p_mut`: add `N(0, σ·range)` and clamp.
pub fn mutate_lambda<R: Rng + ?Sized>(genotype: &SparsityVector, cfg: &MoeaddConfig, rng: &mut R) -> SparsityVector {
    let sd = cfg.sigma_mut * (cfg.lambda_hi - cfg.lambda_lo);
    let normal = Normal::new(0.0, sd).expect("finite positive deviation");
    let genes = genotype
        .values()
        .iter()
        .map(|&l| {
            if rng.gen::<f64>() < cfg.p_mut {
                (l + normal.sample(rng)).clamp(cfg.lambda_lo, cfg.lambda_hi)
            } else {
                l
            }
        })
        .collect();
    SparsityVector::new(genes).expect("clamped genes are positive")
}

/// Per gene with probability `p_xover`: children take `α·a + (1−α)·b` and
/// `α·b + (1−α)·a` with a fresh `α ~ U(0,1)`.
pub fn crossover_lambda<R: Rng + ?Sized>(
    a: &SparsityVector,
    b: &SparsityVector,
    cfg: &MoeaddConfig,
    rng: &mut R,
) -> (SparsityVector, SparsityVector) {
    let mut ca = Vec::with_capacity(a.len());
    let mut cb = Vec::with_capacity(a.len());
    for (&x, &y) in a.values().iter().zip(b.values()) {
        if rng.gen::<f64>() < cfg.p_xover {
            let w: f64 = rng.gen();
            ca.push(w * x + (1.0 - w) * y);
            cb.push(w * y + (1.0 - w) * x);
        } else {
            ca.push(x);
            cb.push(y);
        }
    }
    (
        SparsityVector::new(ca).expect("convex combination of positive genes"),
        SparsityVector::new(cb).expect("convex combination of positive genes"),
    )
}

#[derive(Debug, Clone)]
pub struct Individual {
    pub genotype: SparsityVector,
    pub system: EquationSystem,
    pub objectives: Vec<f64>,
    pub level: usize,
    pub subregion: usize,
}

#[derive(Debug, Clone)]
pub struct ParetoArchive {
    /// Every non-dominated system seen during the run, one per objective
    /// vector, in order of discovery.
    pub individuals: Vec<Individual>,
    pub ideal_point: Vec<f64>,
    /// Archive objective vectors after initialization and after each epoch.
    pub history: Vec<Vec<Vec<f64>>>,
    /// Population at the end of the run.
    pub population: Vec<Individual>,
    /// Distinct genotypes evaluated.
    pub evaluations: usize,
}

/// Six-significant-digit key of a genotype.
fn genotype_key(g: &SparsityVector) -> String {
    let mut key = String::new();
    for l in g.values() {
        let _ = write!(key, "{l:.5e};");
    }
    key
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Evaluator<'a> {
    search: &'a SystemSearch,
    seed: u64,
    memo: Mutex<HashMap<String, EquationSystem>>,
}

impl Evaluator<'_> {
    /// Systems are a function of the quantized genotype and the run seed.
    fn evaluate(&self, genotype: &SparsityVector) -> Result<EquationSystem> {
        let key = genotype_key(genotype);
        if let Some(s) = self.memo.lock().unwrap().get(&key) {
            return Ok(s.clone());
        }
        let quantized: Vec<f64> = key
            .split_terminator(';')
            .map(|s| s.parse().expect("formatted float"))
            .collect();
        let system = self
            .search
            .run(&SparsityVector::new(quantized)?, fnv1a(key.as_bytes()) ^ self.seed)?;
        self.memo.lock().unwrap().insert(key, system.clone());
        Ok(system)
    }

    fn distinct(&self) -> usize {
        self.memo.lock().unwrap().len()
    }
}

/// Ideal point from a short pilot search at `λ_lo`: 0.9 × each slot's
/// residual norm, and 0 for every complexity.
pub fn estimate_ideal_point(search: &SystemSearch, cfg: &MoeaddConfig) -> Result<Vec<f64>> {
    let pilot_cfg = EAConfig {
        epochs: cfg.pilot_epochs,
        ..*search.config()
    };
    let pilot = search.with_config(pilot_cfg)?;
    let k = search.n_equations();
    let system = pilot.run(&SparsityVector::new(vec![cfg.lambda_lo; k])?, cfg.rng_seed)?;
    Ok(system.quality.iter().flat_map(|&q| [0.9 * q, 0.0]).collect())
}

struct Population<'a> {
    members: Vec<Individual>,
    weights: &'a [WeightVector],
    ideal: Vec<f64>,
    theta: f64,
}

impl Population<'_> {
    fn observe(&mut self, objectives: &[f64]) {
        for (z, f) in self.ideal.iter_mut().zip(objectives) {
            *z = z.min(*f);
        }
    }

    fn refresh(&mut self) {
        let points: Vec<Vec<f64>> = self.members.iter().map(|m| m.objectives.clone()).collect();
        let levels = nondominated_sort(&points);
        for (m, l) in self.members.iter_mut().zip(levels) {
            m.level = l;
            m.subregion = assign_subregion(&m.objectives, self.weights, &self.ideal);
        }
    }

    fn pbi_of(&self, i: usize) -> f64 {
        let m = &self.members[i];
        pbi(&m.objectives, &self.weights[m.subregion].weights, &self.ideal, self.theta)
    }

    fn density(&self) -> Vec<usize> {
        let mut d = vec![0; self.weights.len()];
        for m in &self.members {
            d[m.subregion] += 1;
        }
        d
    }

    /// Worst-level member with the largest PBI in the most crowded
    /// subregion (ties: larger PBI sum, then lower index).
    fn locate_worst(&self) -> usize {
        let density = self.density();
        let mut pbi_sum = vec![0.0; self.weights.len()];
        for (i, m) in self.members.iter().enumerate() {
            pbi_sum[m.subregion] += self.pbi_of(i);
        }
        let mut h = 0;
        for r in 1..density.len() {
            if density[r] > density[h] || (density[r] == density[h] && pbi_sum[r] > pbi_sum[h]) {
                h = r;
            }
        }
        let region: Vec<usize> = (0..self.members.len()).filter(|&i| self.members[i].subregion == h).collect();
        let worst_level = region.iter().map(|&i| self.members[i].level).max().expect("crowded region");
        self.max_pbi(region.into_iter().filter(|&i| self.members[i].level == worst_level))
    }

    fn max_pbi(&self, candidates: impl Iterator<Item = usize>) -> usize {
        let mut best: Option<(f64, usize)> = None;
        for i in candidates {
            let v = self.pbi_of(i);
            if best.map_or(true, |(b, _)| v > b) {
                best = Some((v, i));
            }
        }
        best.expect("non-empty candidates").1
    }

    /// Adds `child` and removes one member so the size is unchanged.
    fn update(&mut self, child: Individual) {
        self.observe(&child.objectives);
        self.members.push(child);
        self.refresh();
        let last_level = self.members.iter().map(|m| m.level).max().unwrap_or(0);
        let remove = if last_level == 0 {
            self.locate_worst()
        } else {
            let last: Vec<usize> = (0..self.members.len()).filter(|&i| self.members[i].level == last_level).collect();
            let density = self.density();
            if last.len() == 1 {
                let x = last[0];
                if density[self.members[x].subregion] > 1 {
                    x
                } else {
                    self.locate_worst()
                }
            } else {
                let mut h = self.members[last[0]].subregion;
                for &i in &last[1..] {
                    let r = self.members[i].subregion;
                    if density[r] > density[h] || (density[r] == density[h] && r < h) {
                        h = r;
                    }
                }
                if density[h] > 1 {
                    self.max_pbi(last.iter().copied().filter(|&i| self.members[i].subregion == h))
                } else {
                    self.locate_worst()
                }
            }
        };
        self.members.remove(remove);
        self.refresh();
    }
}

/// Adds `ind` unless an existing entry dominates or equals it; drops entries
/// it dominates.
fn archive_insert(archive: &mut Vec<Individual>, ind: &Individual) {
    if archive
        .iter()
        .any(|a| a.objectives == ind.objectives || dominates(&a.objectives, &ind.objectives))
    {
        return;
    }
    archive.retain(|a| !dominates(&ind.objectives, &a.objectives));
    archive.push(ind.clone());
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.gen_range(lo.ln()..=hi.ln()).exp().clamp(lo, hi)
}

/// Runs the meta-search; deterministic for a fixed `cfg.rng_seed`.
pub fn run_moeadd(search: &SystemSearch, cfg: &MoeaddConfig) -> Result<ParetoArchive> {
    cfg.validate()?;
    let k = search.n_equations();
    let weights = generate_weights(2 * k, cfg.divisions, cfg.neighbors)?;
    let n = weights.len();
    if n < 2 {
        return Err(Error::Config("at least two weight vectors are required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let evaluator = Evaluator {
        search,
        seed: cfg.rng_seed,
        memo: Mutex::new(HashMap::new()),
    };
    let make = |genotype: SparsityVector| -> Result<Individual> {
        let system = evaluator.evaluate(&genotype)?;
        Ok(Individual {
            objectives: objective_vector(&system),
            genotype,
            system,
            level: 0,
            subregion: 0,
        })
    };

    let mut population = Population {
        members: Vec::with_capacity(n + 1),
        weights: &weights,
        ideal: estimate_ideal_point(search, cfg)?,
        theta: cfg.pbi_theta,
    };
    for _ in 0..n {
        let g = (0..k).map(|_| log_uniform(&mut rng, cfg.lambda_lo, cfg.lambda_hi)).collect();
        let ind = make(SparsityVector::bounded(g, cfg.lambda_lo, cfg.lambda_hi)?)?;
        population.observe(&ind.objectives);
        population.members.push(ind);
    }
    population.refresh();
    let mut archive: Vec<Individual> = Vec::new();
    for m in &population.members {
        archive_insert(&mut archive, m);
    }
    let snapshot = |a: &[Individual]| a.iter().map(|i| i.objectives.clone()).collect::<Vec<_>>();
    let mut history = vec![snapshot(&archive)];

    for _ in 0..cfg.epochs {
        for w in &weights {
            let local: Vec<usize> = (0..population.members.len())
                .filter(|&i| w.neighbors.contains(&population.members[i].subregion))
                .collect();
            let pool: Vec<usize> = if rng.gen::<f64>() < cfg.p_local && local.len() >= 2 {
                local
            } else {
                (0..population.members.len()).collect()
            };
            let parents: Vec<usize> = pool.choose_multiple(&mut rng, 2).copied().collect();
            let (a, b) = (&population.members[parents[0]], &population.members[parents[1]]);
            let (child, _) = crossover_lambda(&a.genotype, &b.genotype, cfg, &mut rng);
            let child = make(mutate_lambda(&child, cfg, &mut rng))?;
            archive_insert(&mut archive, &child);
            population.update(child);
        }
        history.push(snapshot(&archive));
    }

    let ideal_point = population.ideal.clone();
    Ok(ParetoArchive {
        individuals: archive,
        ideal_point,
        history,
        population: population.members,
        evaluations: evaluator.distinct(),
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FrontierRow {
    pub total_complexity: usize,
    pub total_error: f64,
    pub lambdas: Vec<f64>,
    pub quality: Vec<f64>,
    pub complexity: Vec<usize>,
    pub equations: Vec<String>,
    /// Dominated in the (total complexity, total error) projection.
    pub dominated_2d: bool,
}

/// Archive rows by ascending total complexity (then error); rows dominated
/// or repeated in the 2-D projection are flagged.
pub fn aggregate_frontier(archive: &ParetoArchive) -> Vec<FrontierRow> {
    let mut rows: Vec<FrontierRow> = archive
        .individuals
        .iter()
        .map(|ind| FrontierRow {
            total_complexity: ind.system.total_complexity(),
            total_error: ind.system.total_quality(),
            lambdas: ind.genotype.values().to_vec(),
            quality: ind.system.quality.clone(),
            complexity: ind.system.complexity.clone(),
            equations: ind.system.render(),
            dominated_2d: false,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.total_complexity
            .cmp(&b.total_complexity)
            .then(a.total_error.total_cmp(&b.total_error))
    });
    let mut best_error = f64::INFINITY;
    for row in rows.iter_mut() {
        row.dominated_2d = row.total_error >= best_error;
        best_error = best_error.min(row.total_error);
    }
    rows
}

pub fn frontier_csv(rows: &[FrontierRow]) -> String {
    let mut out = String::from("total_complexity,total_error\n");
    for r in rows {
        let _ = writeln!(out, "{},{:e}", r.total_complexity, r.total_error);
    }
    out
}
