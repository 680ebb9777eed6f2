//! Brute-force reference implementations for cross-checking the metrics.
//!
//! Everything here is written for clarity on tiny inputs: n-grams are
//! compared by linear scans, LCS by enumerating subsequences, METEOR by
//! enumerating every alignment, AP by walking each cutoff of the ranking.
//! Nothing is shared with the fast implementations.

fn grams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        out.push(tokens[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

/// CIDEr-D of one candidate, document frequencies from `corpus`. A zero
/// reference tf-idf vector at some n switches that n to raw counts.
pub fn cider_d(cand: &[String], refs: &[Vec<String>], corpus: &[Vec<Vec<String>>]) -> f64 {
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let big_n = corpus.len() as f64;
    let mut sum_over_refs = 0.0;
    for r in refs {
        let mut sum_over_n = 0.0;
        for n in 1..=4 {
            let cg = grams(cand, n);
            let rg = grams(r, n);
            let idf = |g: &Vec<String>| -> f64 {
                let mut df = 0.0;
                for doc in corpus {
                    if doc.iter().any(|s| grams(s, n).contains(g)) {
                        df += 1.0;
                    }
                }
                if df < 1.0 {
                    df = 1.0;
                }
                (big_n / df).ln()
            };
            let mut use_idf = true;
            let ref_norm_sq: f64 = distinct(&rg).iter().map(|g| (count(&rg, g) as f64 * idf(g)).powi(2)).sum();
            if ref_norm_sq == 0.0 {
                use_idf = false;
            }
            let w = |g: &Vec<String>, list: &[Vec<String>]| -> f64 {
                let tf = count(list, g) as f64;
                if use_idf {
                    tf * idf(g)
                } else {
                    tf
                }
            };
            let cd = distinct(&cg);
            let rd = distinct(&rg);
            let nc: f64 = cd.iter().map(|g| w(g, &cg).powi(2)).sum::<f64>().sqrt();
            let nr: f64 = rd.iter().map(|g| w(g, &rg).powi(2)).sum::<f64>().sqrt();
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for g in &cd {
                if rd.contains(g) {
                    let (a, b) = (w(g, &cg), w(g, &rg));
                    dot += if a < b { a } else { b } * b;
                }
            }
            sum_over_n += dot / (nc * nr);
        }
        let d = cand.len() as f64 - r.len() as f64;
        sum_over_refs += sum_over_n / 4.0 * (-d * d / 72.0).exp();
    }
    sum_over_refs / refs.len() as f64 * 10.0
}

/// Sentence BLEU-4 with add-one smoothing of zero-match orders n >= 2.
pub fn bleu4(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0f64;
    for n in 1..=4 {
        let cg = grams(cand, n);
        let mut clipped = 0usize;
        for g in distinct(&cg) {
            let mut best = 0;
            for r in refs {
                let c = count(&grams(r, n), &g);
                if c > best {
                    best = c;
                }
            }
            clipped += count(&cg, &g).min(best);
        }
        let p = if clipped == 0 {
            if n == 1 {
                return 0.0;
            }
            1.0 / (cg.len() as f64 + 1.0)
        } else {
            clipped as f64 / cg.len() as f64
        };
        prod *= p;
    }
    let c = cand.len();
    let mut r = refs[0].len();
    for x in refs {
        let (dx, dr) = (x.len().abs_diff(c), r.abs_diff(c));
        if dx < dr || (dx == dr && x.len() < r) {
            r = x.len();
        }
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * prod.powf(0.25)
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut k = 0;
    for t in of {
        if k < sub.len() && sub[k] == t {
            k += 1;
        }
    }
    k == sub.len()
}

/// LCS by trying every subsequence of the shorter sentence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 20, "oracle is exponential");
    let mut best = 0;
    for mask in 0u32..(1u32 << short.len()) {
        let sub: Vec<&String> = (0..short.len()).filter(|i| mask & (1 << i) != 0).map(|i| &short[i]).collect();
        if sub.len() > best && is_subsequence(&sub, long) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_l(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut best_p = 0.0;
    let mut best_r = 0.0;
    for r in refs.iter().filter(|r| !r.is_empty()) {
        let l = lcs_len(cand, r) as f64;
        if l / cand.len() as f64 > best_p {
            best_p = l / cand.len() as f64;
        }
        if l / r.len() as f64 > best_r {
            best_r = l / r.len() as f64;
        }
    }
    if best_p == 0.0 || best_r == 0.0 {
        return 0.0;
    }
    let beta_sq = 1.44;
    (1.0 + beta_sq) * best_p * best_r / (best_r + beta_sq * best_p)
}

/// Every alignment of candidate positions onto distinct equal reference words.
fn alignments(cand: &[String], reference: &[String]) -> Vec<Vec<(usize, usize)>> {
    fn go(i: usize, cand: &[String], reference: &[String], cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if i == cand.len() {
            out.push(cur.clone());
            return;
        }
        go(i + 1, cand, reference, cur, out);
        for j in 0..reference.len() {
            if reference[j] == cand[i] && !cur.iter().any(|&(_, jj)| jj == j) {
                cur.push((i, j));
                go(i + 1, cand, reference, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(0, cand, reference, &mut Vec::new(), &mut out);
    out
}

pub fn meteor_exact(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best = 0.0;
    for r in refs {
        if cand.is_empty() || r.is_empty() {
            continue;
        }
        let mut m = 0;
        let mut chunks = usize::MAX;
        for a in alignments(cand, r) {
            let mut ch = 0;
            for k in 0..a.len() {
                if k == 0 || a[k].0 != a[k - 1].0 + 1 || a[k].1 != a[k - 1].1 + 1 {
                    ch += 1;
                }
            }
            if a.len() > m || (a.len() == m && ch < chunks) {
                m = a.len();
                chunks = ch;
            }
        }
        if m == 0 {
            continue;
        }
        let p = m as f64 / cand.len() as f64;
        let rc = m as f64 / r.len() as f64;
        let f = 10.0 * p * rc / (9.0 * p + rc);
        let frag = if m == 1 { 0.0 } else { (chunks as f64 - 1.0) / (m as f64 - 1.0) };
        let s = f * (1.0 - 0.5 * frag * frag * frag);
        if s > best {
            best = s;
        }
    }
    best
}

/// Gated mean ×100 given (IoU or none, metric value) per ground-truth object.
pub fn gated_mean(items: &[(Option<f64>, f64)]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for (iou, v) in items {
        if let Some(iou) = iou {
            if *iou > 0.5 {
                s += v;
            }
        }
    }
    s * 100.0 / items.len() as f64
}

/// Axis-aligned IoU from (min corner, max corner) pairs.
pub fn iou(a: ([f64; 3], [f64; 3]), b: ([f64; 3], [f64; 3])) -> f64 {
    let mut inter = 1.0;
    let mut va = 1.0;
    let mut vb = 1.0;
    for k in 0..3 {
        let lo = if a.0[k] > b.0[k] { a.0[k] } else { b.0[k] };
        let hi = if a.1[k] < b.1[k] { a.1[k] } else { b.1[k] };
        inter *= if hi > lo { hi - lo } else { 0.0 };
        va *= a.1[k] - a.0[k];
        vb *= b.1[k] - b.0[k];
    }
    let union = va + vb - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// AP for one category by walking the ranking: every true positive at
/// cutoff k contributes the best precision at any cutoff >= k, over #gt.
pub fn average_precision(preds: &[(f64, ([f64; 3], [f64; 3]))], gt: &[([f64; 3], [f64; 3])]) -> f64 {
    if gt.is_empty() || preds.is_empty() {
        return 0.0;
    }
    // insertion sort: descending confidence, earlier input first on ties
    let mut ranked: Vec<usize> = Vec::new();
    for i in 0..preds.len() {
        let pos = ranked.iter().position(|&j| preds[i].0 > preds[j].0).unwrap_or(ranked.len());
        ranked.insert(pos, i);
    }
    let mut used = vec![false; gt.len()];
    let mut tp = Vec::new();
    for &i in &ranked {
        let mut best_j = 0;
        let mut best_v = -1.0;
        for (j, g) in gt.iter().enumerate() {
            let v = iou(preds[i].1, *g);
            if v > best_v {
                best_v = v;
                best_j = j;
            }
        }
        if best_v > 0.5 && !used[best_j] {
            used[best_j] = true;
            tp.push(true);
        } else {
            tp.push(false);
        }
    }
    let precision_at = |k: usize| -> f64 { tp[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64 };
    let mut ap = 0.0;
    for k in 0..tp.len() {
        if tp[k] {
            let mut best = 0.0;
            for kk in k..tp.len() {
                let p = precision_at(kk);
                if p > best {
                    best = p;
                }
            }
            ap += best / gt.len() as f64;
        }
    }
    ap
}
