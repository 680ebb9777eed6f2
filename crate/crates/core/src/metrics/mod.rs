//! Caption metrics, IoU-gated aggregation and detection mAP.
//!
//! [`oracle`] holds deliberately naive reimplementations used to cross-check
//! everything here; it shares no code with the main implementations.

mod cider;
mod detection;
pub mod oracle;
mod text;

pub use cider::CiderD;
pub use detection::{average_precision, gate_and_aggregate, map_at_0_5iou, match_predictions, EvalRecord, ScoredBox};
pub use text::{bleu4, lcs_len, meteor_exact, rouge_l};

use std::collections::BTreeMap;

/// n-gram counts of `tokens` for one `n`.
pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}
