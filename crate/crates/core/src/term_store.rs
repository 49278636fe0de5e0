//! Memoized term arrays and centered cross-moments over one token cache.
//!
//! Every candidate split of every chromosome needs the same second moments
//! of its term arrays. The store evaluates each distinct term once and keeps
//! pairwise centered dot products, so repeated evaluations during a search
//! cost `O(p²)` lookups instead of passes over the grid.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::differentiation::TokenCache;
use crate::error::Result;
use crate::sparse_solver::{centered_dot, mean, Moments};
use crate::token_pool::{evaluate_term, Term};

#[derive(Debug)]
pub struct TermData {
    id: usize,
    pub values: Arc<Vec<f64>>,
    pub mean: f64,
}

#[derive(Debug, Default)]
struct Tables {
    terms: HashMap<String, Arc<TermData>>,
    dots: HashMap<(usize, usize), f64>,
}

/// Spread, relative to the largest token RMS in the cache, below which a
/// term counts as constant. Variable changes leave rounding-level residue in
/// otherwise constant fields.
const NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug)]
pub struct TermStore {
    cache: Arc<TokenCache>,
    tables: Mutex<Tables>,
    min_variance: f64,
}

impl TermStore {
    pub fn new(cache: Arc<TokenCache>) -> Self {
        let scale = cache
            .iter()
            .map(|(_, _, v)| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt())
            .fold(0.0, f64::max);
        Self {
            cache,
            tables: Mutex::new(Tables::default()),
            min_variance: (NOISE_FLOOR * scale).powi(2),
        }
    }

    pub fn cache(&self) -> &Arc<TokenCache> {
        &self.cache
    }

    pub fn rows(&self) -> usize {
        self.cache.grid().len()
    }

    pub fn term(&self, term: &Term) -> Result<Arc<TermData>> {
        let sig = term.signature();
        if let Some(d) = self.tables.lock().unwrap().terms.get(&sig) {
            return Ok(d.clone());
        }
        let values = evaluate_term(term, &self.cache)?;
        let m = mean(&values);
        let mut tables = self.tables.lock().unwrap();
        let id = tables.terms.len();
        let entry = tables.terms.entry(sig).or_insert_with(|| {
            Arc::new(TermData {
                id,
                values: Arc::new(values),
                mean: m,
            })
        });
        Ok(entry.clone())
    }

    /// `Σ (a−ā)(b−b̄) / M`.
    fn centered_moment(&self, a: &TermData, b: &TermData) -> f64 {
        let key = (a.id.min(b.id), a.id.max(b.id));
        if let Some(&v) = self.tables.lock().unwrap().dots.get(&key) {
            return v;
        }
        let v = centered_dot(&a.values, a.mean, &b.values, b.mean) / self.rows() as f64;
        self.tables.lock().unwrap().dots.insert(key, v);
        v
    }

    pub fn moments(&self, data: &[Arc<TermData>]) -> Moments {
        let q = data.len();
        let mut cov = vec![0.0; q * q];
        for a in 0..q {
            for b in a..q {
                let v = self.centered_moment(&data[a], &data[b]);
                cov[a * q + b] = v;
                cov[b * q + a] = v;
            }
        }
        for j in 0..q {
            if cov[j * q + j] <= self.min_variance {
                for i in 0..q {
                    cov[j * q + i] = 0.0;
                    cov[i * q + j] = 0.0;
                }
            }
        }
        Moments::from_parts(self.rows(), data.iter().map(|d| d.mean).collect(), cov)
    }

    pub fn stored_terms(&self) -> usize {
        self.tables.lock().unwrap().terms.len()
    }
}
