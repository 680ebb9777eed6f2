use std::collections::{BTreeMap, HashMap};

use crate::metrics::ngram_counts;

/// Sentence BLEU-4 with uniform weights and the brevity penalty against the
/// closest reference length (shorter wins ties). For n >= 2, an order with
/// no clipped match is smoothed to `1 / (candidate n-grams + 1)`; a unigram
/// miss scores 0.
pub fn bleu4(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let counts = ngram_counts(cand, n);
        let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let total: usize = counts.values().sum();
        let matched: usize = counts.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln() / 4.0;
    }
    let c = cand.len() as f64;
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by(|a, b| (a.abs_diff(cand.len())).cmp(&b.abs_diff(cand.len())).then(a.cmp(b)))
        .expect("refs non-empty") as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with beta = 1.2, using the best precision and the best
/// recall over the references.
pub fn rouge_l(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in refs {
        if reference.is_empty() {
            continue;
        }
        let l = lcs_len(cand, reference) as f64;
        p = p.max(l / cand.len() as f64);
        r = r.max(l / reference.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = 1.2f64 * 1.2;
    (1.0 + b2) * p * r / (r + b2 * p)
}

const ALPHA: f64 = 0.9;
const BETA: f64 = 3.0;
const GAMMA: f64 = 0.5;

/// Fewest chunks over all maximum exact-match alignments of `cand` onto `reference`.
fn min_chunks(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *ref_counts.entry(w).or_default() += 1;
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for w in cand {
        *cand_counts.entry(w).or_default() += 1;
    }
    let matches: usize = cand_counts.iter().map(|(w, &c)| c.min(ref_counts.get(w).copied().unwrap_or(0))).sum();
    if matches == 0 {
        return (0, 0);
    }
    // remaining matches still owed per word, so every branch reaches the maximum
    let mut owed: HashMap<&str, usize> =
        cand_counts.iter().map(|(w, &c)| (*w, c.min(ref_counts.get(w).copied().unwrap_or(0)))).collect();
    let mut left_in_cand: HashMap<&str, usize> = cand_counts.clone();
    let mut used = vec![false; reference.len()];
    let mut best = usize::MAX;
    #[allow(clippy::too_many_arguments)]
    fn search<'a>(
        i: usize,
        prev: Option<usize>,
        chunks: usize,
        cand: &'a [String],
        reference: &[String],
        used: &mut [bool],
        owed: &mut HashMap<&'a str, usize>,
        left: &mut HashMap<&'a str, usize>,
        best: &mut usize,
    ) {
        if chunks >= *best {
            return;
        }
        if i == cand.len() {
            *best = chunks;
            return;
        }
        let w = cand[i].as_str();
        *left.get_mut(w).expect("counted") -= 1;
        let need = owed[w];
        if need > 0 {
            for j in 0..reference.len() {
                if used[j] || reference[j] != w {
                    continue;
                }
                used[j] = true;
                *owed.get_mut(w).expect("counted") -= 1;
                let extends = prev.is_some_and(|p| p + 1 == j);
                search(i + 1, Some(j), chunks + usize::from(!extends), cand, reference, used, owed, left, best);
                *owed.get_mut(w).expect("counted") += 1;
                used[j] = false;
            }
        }
        // skipping is allowed only while later copies can still pay what is owed
        if left[w] >= need {
            search(i + 1, None, chunks, cand, reference, used, owed, left, best);
        }
        *left.get_mut(w).expect("counted") += 1;
    }
    search(0, None, 0, cand, reference, &mut used, &mut owed, &mut left_in_cand, &mut best);
    (matches, best)
}

/// METEOR restricted to exact unigram matches. The fragmentation penalty is
/// `gamma * ((chunks - 1) / (matches - 1))^beta`, zero for a single chunk,
/// so identical sentences score 1. Best score over references.
pub fn meteor_exact(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for reference in refs {
        if cand.is_empty() || reference.is_empty() {
            continue;
        }
        let (m, chunks) = min_chunks(cand, reference);
        if m == 0 {
            continue;
        }
        let p = m as f64 / cand.len() as f64;
        let r = m as f64 / reference.len() as f64;
        let fmean = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
        let frag = if m > 1 { (chunks - 1) as f64 / (m - 1) as f64 } else { 0.0 };
        let score = fmean * (1.0 - GAMMA * frag.powf(BETA));
        best = best.max(score);
    }
    best
}
