use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context::select_target_train;
use crate::detector::Candidate;
use crate::geometry::{iou3d, Box3D};

/// IoU threshold of the evaluation protocol; compared strictly.
pub const IOU_GATE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub gt_index: usize,
    /// Matched candidate and its IoU with the ground-truth box.
    pub matched: Option<(usize, f64)>,
    pub generated: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalRecord {
    pub fn iou(&self) -> f64 {
        self.matched.map_or(0.0, |(_, iou)| iou)
    }

    pub fn passes_gate(&self) -> bool {
        self.iou() > IOU_GATE
    }
}

/// Each ground-truth box takes its highest-IoU real candidate. Several
/// ground truths may share a candidate.
pub fn match_predictions(gt: &[Box3D], candidates: &[Candidate]) -> Vec<Option<(usize, f64)>> {
    gt.iter().map(|g| select_target_train(candidates, g)).collect()
}

/// Mean over records of `metric` on records whose IoU clears the gate
/// (others count as 0), times 100. Empty input gives 0.
pub fn gate_and_aggregate<F>(records: &[EvalRecord], mut metric: F) -> f64
where
    F: FnMut(&[String], &[Vec<String>]) -> f64,
{
    if records.is_empty() {
        return 0.0;
    }
    let total: f64 = records
        .iter()
        .map(|r| if r.passes_gate() { metric(&r.generated, &r.references) } else { 0.0 })
        .sum();
    100.0 * total / records.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub confidence: f64,
}

/// All-point interpolated AP of one category. Predictions are visited by
/// descending confidence (stable, so ties keep input order); each takes its
/// best-IoU ground truth and is a true positive if that IoU clears the gate
/// and the ground truth is still free.
pub fn average_precision(preds: &[(f64, Box3D)], gt: &[Box3D]) -> f64 {
    if gt.is_empty() || preds.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].0.total_cmp(&preds[a].0));
    let mut taken = vec![false; gt.len()];
    let mut tp = Vec::with_capacity(preds.len());
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            let iou = iou3d(&preds[i].1, g);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        let hit = match best {
            Some((j, iou)) if iou > IOU_GATE && !taken[j] => {
                taken[j] = true;
                true
            }
            _ => false,
        };
        tp.push(hit);
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &hit) in tp.iter().enumerate() {
        hits += usize::from(hit);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / gt.len() as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Mean AP over the categories that have at least one ground-truth box.
pub fn map_at_0_5iou(preds: &[ScoredBox], gt: &[(String, Box3D)]) -> f64 {
    let mut by_cat: BTreeMap<&str, (Vec<(f64, Box3D)>, Vec<Box3D>)> = BTreeMap::new();
    for (cat, b) in gt {
        by_cat.entry(cat).or_default().1.push(*b);
    }
    if by_cat.is_empty() {
        return 0.0;
    }
    for p in preds {
        if let Some(entry) = by_cat.get_mut(p.category.as_str()) {
            entry.0.push((p.confidence, p.bbox));
        }
    }
    by_cat.values().map(|(p, g)| average_precision(p, g)).sum::<f64>() / by_cat.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::rouge_l;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn record(iou: Option<f64>, gen: &str, refs: &str) -> EvalRecord {
        EvalRecord {
            gt_index: 0,
            matched: iou.map(|v| (0, v)),
            generated: toks(gen),
            references: vec![toks(refs)],
        }
    }

    #[test]
    fn gating_rules() {
        let perfect = vec![record(Some(1.0), "a b", "a b"), record(Some(0.9), "c d", "c d")];
        assert_eq!(gate_and_aggregate(&perfect, rouge_l), 100.0);
        let half = vec![record(Some(1.0), "a b", "a b"), record(None, "a b", "a b")];
        assert_eq!(gate_and_aggregate(&half, rouge_l), 50.0);
        let low = vec![record(Some(0.4), "a b", "a b")];
        assert_eq!(gate_and_aggregate(&low, rouge_l), 0.0);
        let edge = vec![record(Some(0.5), "a b", "a b")];
        assert_eq!(gate_and_aggregate(&edge, rouge_l), 0.0);
    }

    #[test]
    fn perfect_and_empty_detections() {
        let gt = vec![
            ("chair".to_string(), Box3D::new([0.0; 3], [1.0; 3])),
            ("table".to_string(), Box3D::new([3.0, 0.0, 0.0], [1.0; 3])),
        ];
        let preds: Vec<ScoredBox> =
            gt.iter().map(|(c, b)| ScoredBox { category: c.clone(), bbox: *b, confidence: 1.0 }).collect();
        assert_eq!(map_at_0_5iou(&preds, &gt), 1.0);
        assert_eq!(map_at_0_5iou(&[], &gt), 0.0);
    }

    #[test]
    fn duplicate_prediction_is_a_false_positive() {
        let g = Box3D::new([0.0; 3], [1.0; 3]);
        // precision 1 at recall 1 is reached first, the duplicate only lowers later precision
        assert_eq!(average_precision(&[(0.9, g), (0.8, g)], &[g]), 1.0);
        assert_eq!(average_precision(&[(0.8, g), (0.9, Box3D::new([5.0; 3], [1.0; 3]))], &[g]), 0.5);
    }
}
