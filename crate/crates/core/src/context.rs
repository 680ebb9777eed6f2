//! Target and neighbor selection.

use serde::Serialize;
use thiserror::Error;

use crate::detector::{Candidate, Detection, Superpoint};
use crate::geometry::{distance_sq, iou3d, Box3D, Point3};

#[derive(Debug, Error, PartialEq)]
pub enum ContextError {
    #[error("target {target} is not a real candidate")]
    Target { target: usize },
    #[error("{what}: asked for {requested} neighbors but only {available} are available")]
    TooFew { what: &'static str, requested: usize, available: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContextSelection {
    pub target: usize,
    /// Nearest other candidates, ascending distance, ties by index.
    pub neighbor_objects: Vec<usize>,
    pub neighbor_superpoints: Vec<usize>,
    /// IoU with the ground-truth box the target was matched to (training only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_iou: Option<f64>,
}

/// Highest-IoU real candidate for a ground-truth box; ties go to the lowest
/// index. Returns `None` only if every candidate is padding.
pub fn select_target_train(candidates: &[Candidate], gt: &Box3D) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        if c.pad {
            continue;
        }
        let iou = iou3d(&c.bbox, gt);
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    best
}

/// Indices of the `k` entries nearest to `from`, skipping `exclude` and
/// entries with `keep[i] == false`.
fn k_nearest(
    from: &Point3,
    points: &[Point3],
    keep: &[bool],
    exclude: Option<usize>,
    k: usize,
    what: &'static str,
) -> Result<Vec<usize>, ContextError> {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| keep[i] && Some(i) != exclude)
        .map(|(i, p)| (distance_sq(from, p), i))
        .collect();
    if k > order.len() {
        return Err(ContextError::TooFew { what, requested: k, available: order.len() });
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Center-to-center nearest neighbors of candidate `target`: `k_obj` other
/// candidates and `k_sp` superpoints, padding excluded.
pub fn select_neighbors(
    target: usize,
    candidates: &[Candidate],
    superpoints: &[Superpoint],
    k_obj: usize,
    k_sp: usize,
) -> Result<ContextSelection, ContextError> {
    let Some(t) = candidates.get(target).filter(|c| !c.pad) else {
        return Err(ContextError::Target { target });
    };
    let centers: Vec<Point3> = candidates.iter().map(|c| c.bbox.center).collect();
    let keep: Vec<bool> = candidates.iter().map(|c| !c.pad).collect();
    let neighbor_objects = k_nearest(&t.bbox.center, &centers, &keep, Some(target), k_obj, "neighbor objects")?;
    let sp_centers: Vec<Point3> = superpoints.iter().map(|s| s.center).collect();
    let sp_keep: Vec<bool> = superpoints.iter().map(|s| !s.pad).collect();
    let neighbor_superpoints = k_nearest(&t.bbox.center, &sp_centers, &sp_keep, None, k_sp, "neighbor superpoints")?;
    Ok(ContextSelection { target, neighbor_objects, neighbor_superpoints, target_iou: None })
}

/// Neighbor counts clipped to what a detection can supply.
pub fn available_k(det: &Detection, k_obj: usize, k_sp: usize) -> (usize, usize) {
    let objs = det.candidates.iter().filter(|c| !c.pad).count().saturating_sub(1);
    let sps = det.superpoints.iter().filter(|s| !s.pad).count();
    (k_obj.min(objs), k_sp.min(sps))
}

/// One selection per real candidate, in index order.
pub fn enumerate_targets_inference(
    det: &Detection,
    k_obj: usize,
    k_sp: usize,
) -> impl Iterator<Item = Result<ContextSelection, ContextError>> + '_ {
    det.real_candidates().map(move |i| select_neighbors(i, &det.candidates, &det.superpoints, k_obj, k_sp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DESCRIPTOR_DIM;
    use proptest::prelude::*;

    fn cand(center: Point3, size: Point3) -> Candidate {
        Candidate {
            bbox: Box3D::new(center, size),
            category: None,
            confidence: 1.0,
            sources: Vec::new(),
            descriptor: [0.0; DESCRIPTOR_DIM],
            pad: false,
        }
    }

    fn sp(center: Point3) -> Superpoint {
        Superpoint { center, members: vec![0], descriptor: [0.0; DESCRIPTOR_DIM], pad: false }
    }

    #[test]
    fn gt_box_among_candidates_is_selected() {
        let gt = Box3D::new([1.0, 1.0, 0.5], [1.0, 1.0, 1.0]);
        let cands = vec![cand([3.0, 3.0, 0.5], [1.0; 3]), cand(gt.center, gt.size), cand([1.2, 1.0, 0.5], [1.0; 3])];
        assert_eq!(select_target_train(&cands, &gt), Some((1, 1.0)));
    }

    #[test]
    fn all_disjoint_returns_index_zero() {
        let gt = Box3D::new([0.0; 3], [1.0; 3]);
        let cands = vec![cand([5.0, 0.0, 0.0], [1.0; 3]), cand([9.0, 0.0, 0.0], [1.0; 3])];
        assert_eq!(select_target_train(&cands, &gt), Some((0, 0.0)));
    }

    #[test]
    fn superpoints_at_increasing_distance() {
        let cands = vec![cand([0.0; 3], [1.0; 3]), cand([1.0, 0.0, 0.0], [1.0; 3])];
        let sps: Vec<Superpoint> = (1..=20).rev().map(|d| sp([d as f64, 0.0, 0.0])).collect();
        let sel = select_neighbors(0, &cands, &sps, 1, 10).unwrap();
        // distance d lives at index 20 - d
        assert_eq!(sel.neighbor_superpoints, (10..20).rev().collect::<Vec<_>>());
        assert_eq!(sel.neighbor_objects, [1]);
    }

    #[test]
    fn too_many_neighbors_is_an_error() {
        let mut cands = vec![cand([0.0; 3], [1.0; 3]), cand([1.0, 0.0, 0.0], [1.0; 3])];
        cands.push(Candidate { pad: true, ..cands[1].clone() });
        let sps = vec![sp([0.0; 3])];
        assert_eq!(
            select_neighbors(0, &cands, &sps, 2, 1),
            Err(ContextError::TooFew { what: "neighbor objects", requested: 2, available: 1 })
        );
        assert!(matches!(select_neighbors(2, &cands, &sps, 1, 1), Err(ContextError::Target { target: 2 })));
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (prop::array::uniform3(-2.0f64..2.0), prop::array::uniform3(0.2f64..1.5)).prop_map(|(c, s)| Box3D::new(c, s))
    }

    proptest! {
        #[test]
        fn target_matches_brute_force_argmax(boxes in prop::collection::vec(arb_box(), 10), gt in arb_box()) {
            let cands: Vec<Candidate> = boxes.iter().map(|b| cand(b.center, b.size)).collect();
            let (idx, iou) = select_target_train(&cands, &gt).unwrap();
            let ious: Vec<f64> = boxes.iter().map(|b| iou3d(b, &gt)).collect();
            let max = ious.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(iou, max);
            prop_assert_eq!(idx, ious.iter().position(|&v| v == max).unwrap());
        }

        #[test]
        fn argmax_commutes_with_permutation(boxes in prop::collection::vec(arb_box(), 2..8), gt in arb_box(), rot in 0usize..8) {
            let cands: Vec<Candidate> = boxes.iter().map(|b| cand(b.center, b.size)).collect();
            let (idx, iou) = select_target_train(&cands, &gt).unwrap();
            let n = cands.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let shuffled: Vec<Candidate> = perm.iter().map(|&p| cands[p].clone()).collect();
            let (pidx, piou) = select_target_train(&shuffled, &gt).unwrap();
            prop_assert_eq!(piou, iou);
            prop_assert_eq!(iou3d(&cands[perm[pidx]].bbox, &gt), iou3d(&cands[idx].bbox, &gt));
        }

        #[test]
        fn enumeration_agrees_with_pointwise_selection(centers in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 6)) {
            let cands: Vec<Candidate> = centers.iter().map(|&c| cand(c, [0.5; 3])).collect();
            let sps: Vec<Superpoint> = centers.iter().map(|&c| sp([c[1], c[2], c[0]])).collect();
            let det = Detection { superpoints: sps.clone(), candidates: cands.clone() };
            let all: Vec<ContextSelection> = enumerate_targets_inference(&det, 5, 6).map(Result::unwrap).collect();
            prop_assert_eq!(all.len(), 6);
            for (i, sel) in all.iter().enumerate() {
                prop_assert!(!sel.neighbor_objects.contains(&i));
                prop_assert_eq!(sel, &select_neighbors(i, &cands, &sps, 5, 6).unwrap());
            }
        }
    }
}
