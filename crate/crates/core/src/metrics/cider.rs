use std::collections::{BTreeMap, BTreeSet};

use crate::metrics::ngram_counts;

const MAX_N: usize = 4;
const SIGMA: f64 = 6.0;

/// CIDEr-D with document frequencies taken from a fixed corpus of reference
/// sets (one set per described object).
///
/// When every n-gram of a reference occurs in every corpus document its
/// tf-idf vector is zero and the cosine is undefined; for that n the
/// comparison falls back to plain term frequencies. This is what makes a
/// caption scored against itself in a one-document corpus come out at 10.
#[derive(Clone, Debug)]
pub struct CiderD {
    log_docs: f64,
    df: Vec<BTreeMap<Vec<String>, f64>>,
}

struct Vector {
    weights: BTreeMap<Vec<String>, f64>,
    norm: f64,
}

impl CiderD {
    /// `None` for an empty corpus.
    pub fn new(corpus: &[Vec<Vec<String>>]) -> Option<Self> {
        if corpus.is_empty() {
            return None;
        }
        let mut df: Vec<BTreeMap<Vec<String>, f64>> = vec![BTreeMap::new(); MAX_N];
        for refs in corpus {
            for n in 1..=MAX_N {
                let seen: BTreeSet<&[String]> = refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
                for g in seen {
                    *df[n - 1].entry(g.to_vec()).or_insert(0.0) += 1.0;
                }
            }
        }
        Some(Self { log_docs: (corpus.len() as f64).ln(), df })
    }

    pub fn num_docs(&self) -> usize {
        self.log_docs.exp().round() as usize
    }

    fn idf(&self, n: usize, g: &[String]) -> f64 {
        let df = self.df[n - 1].get(g).copied().unwrap_or(0.0).max(1.0);
        self.log_docs - df.ln()
    }

    fn vector(&self, tokens: &[String], n: usize, weighted: bool) -> Vector {
        let weights: BTreeMap<Vec<String>, f64> = ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let w = if weighted { tf as f64 * self.idf(n, g) } else { tf as f64 };
                (g.to_vec(), w)
            })
            .collect();
        let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
        Vector { weights, norm }
    }

    fn similarity(cand: &Vector, refv: &Vector) -> f64 {
        if cand.norm == 0.0 || refv.norm == 0.0 {
            return 0.0;
        }
        let dot: f64 = cand
            .weights
            .iter()
            .filter_map(|(g, &c)| refv.weights.get(g).map(|&r| c.min(r) * r))
            .sum();
        dot / (cand.norm * refv.norm)
    }

    /// Sentence score in `[0, 10]`.
    pub fn score(&self, cand: &[String], refs: &[Vec<String>]) -> f64 {
        if cand.is_empty() || refs.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for r in refs {
            let delta = cand.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
            let mut per_n = 0.0;
            for n in 1..=MAX_N {
                let mut rv = self.vector(r, n, true);
                let mut cv = self.vector(cand, n, true);
                if rv.norm == 0.0 {
                    rv = self.vector(r, n, false);
                    cv = self.vector(cand, n, false);
                }
                per_n += Self::similarity(&cv, &rv);
            }
            total += per_n / MAX_N as f64 * penalty;
        }
        10.0 * total / refs.len() as f64
    }

    /// Per-sentence scores and their mean.
    pub fn corpus_score(&self, cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> (Vec<f64>, f64) {
        let scores: Vec<f64> = cands.iter().zip(refs).map(|(c, r)| self.score(c, r)).collect();
        let mean = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
        (scores, mean)
    }
}
