//! Detector-lite: superpoints by farthest-point sampling and ball query,
//! candidate objects from ground truth with noise or from single-linkage
//! clustering, and a small learnable encoder for their features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Mlp, ParamStore, Tape, Tensor, Var};
use crate::geometry::{distance_sq, Box3D, Point3};
use crate::scalar::Scalar;
use crate::scene::{Scene, ScenePoint};

/// Length of the raw per-cluster descriptor: mean xyz, mean color,
/// per-axis xyz variance, member count over the cap.
pub const DESCRIPTOR_DIM: usize = 10;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("cannot sample {requested} points from a cloud of {available}")]
    TooFewPoints { requested: usize, available: usize },
    #[error("seed index {seed} outside a cloud of {len} points")]
    SeedIndex { seed: usize, len: usize },
    #[error("no superpoints to build candidates from")]
    NoSuperpoints,
    #[error("no candidate objects could be formed")]
    NoCandidates,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    OracleNoise,
    Cluster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub num_superpoints: usize,
    pub num_candidates: usize,
    pub radius: f64,
    pub cluster_cap: usize,
    /// Single-linkage distance threshold for cluster mode.
    pub merge_threshold: f64,
    pub mode: ProposalMode,
    /// Oracle-noise mode: each center coordinate moves by up to this much (meters).
    pub center_noise: f64,
    /// Oracle-noise mode: each extent is scaled by `1 + u`, `|u| <= size_noise`.
    pub size_noise: f64,
    pub noise_seed: u64,
    /// Oracle-noise mode: fill the remaining slots with background boxes.
    pub distractors: bool,
    pub fps_seed_index: usize,
    /// Hidden width of the feature encoder is `encoder_expansion * d_model`.
    pub encoder_expansion: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_superpoints: 64,
            num_candidates: 32,
            radius: 0.4,
            cluster_cap: 64,
            merge_threshold: 0.5,
            mode: ProposalMode::OracleNoise,
            center_noise: 0.0,
            size_noise: 0.0,
            noise_seed: 0,
            distractors: true,
            fps_seed_index: 0,
            encoder_expansion: 4,
        }
    }
}

/// Greedy max-min subset: every pick maximizes its distance to the points
/// already chosen; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Point3], n: usize, seed_index: usize) -> Result<Vec<usize>, DetectorError> {
    if n > points.len() {
        return Err(DetectorError::TooFewPoints { requested: n, available: points.len() });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if seed_index >= points.len() {
        return Err(DetectorError::SeedIndex { seed: seed_index, len: points.len() });
    }
    let mut chosen = Vec::with_capacity(n);
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut current = seed_index;
    loop {
        chosen.push(current);
        nearest[current] = f64::NEG_INFINITY;
        if chosen.len() == n {
            break;
        }
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            if nearest[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = distance_sq(p, &points[current]);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best.0 {
                best = (nearest[i], i);
            }
        }
        current = best.1;
    }
    Ok(chosen)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Superpoint {
    pub center: Point3,
    /// Scene point indices, nearest to the sampling seed first.
    pub members: Vec<usize>,
    #[serde(skip)]
    pub descriptor: [f64; DESCRIPTOR_DIM],
    /// Repeated entry filling a slot the scene could not provide.
    pub pad: bool,
}

/// Fixed rescaling applied before the encoder so that color and extent are
/// not swamped by absolute position (meters): xyz is centered on a
/// desk-scale room, variances become standard deviations.
pub fn normalize_descriptor(d: &[f64; DESCRIPTOR_DIM]) -> [f64; DESCRIPTOR_DIM] {
    let mut out = [0.0; DESCRIPTOR_DIM];
    for a in 0..2 {
        out[a] = (d[a] - 4.0) / 2.5;
    }
    out[2] = d[2] - 1.0;
    for c in 3..6 {
        out[c] = 4.0 * (d[c] - 0.5);
    }
    for a in 6..9 {
        out[a] = 4.0 * d[a].max(0.0).sqrt();
    }
    out[9] = 2.0 * d[9] - 1.0;
    out
}

/// Raw descriptor of a set of scene points. `cap` normalizes the count.
pub fn describe_points(points: &[ScenePoint], members: &[usize], cap: usize) -> [f64; DESCRIPTOR_DIM] {
    let mut d = [0.0; DESCRIPTOR_DIM];
    if members.is_empty() {
        return d;
    }
    let n = members.len() as f64;
    for &m in members {
        for c in 0..6 {
            d[c] += points[m][c] / n;
        }
    }
    for &m in members {
        for a in 0..3 {
            d[6 + a] += (points[m][a] - d[a]).powi(2) / n;
        }
    }
    d[9] = members.len().min(cap) as f64 / cap as f64;
    d
}

/// Ball query around each sampled seed: up to `cap` points within `radius`,
/// nearest first (ties by index). The superpoint center is the member mean.
pub fn cluster_superpoints(points: &[ScenePoint], seeds: &[usize], radius: f64, cap: usize) -> Vec<Superpoint> {
    let r2 = radius * radius;
    seeds
        .iter()
        .map(|&s| {
            let origin = [points[s][0], points[s][1], points[s][2]];
            let mut within: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .map(|(i, p)| (distance_sq(&[p[0], p[1], p[2]], &origin), i))
                .filter(|&(d, _)| d <= r2)
                .collect();
            within.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            within.truncate(cap.max(1));
            let members: Vec<usize> = within.into_iter().map(|(_, i)| i).collect();
            let descriptor = describe_points(points, &members, cap);
            Superpoint { center: [descriptor[0], descriptor[1], descriptor[2]], members, descriptor, pad: false }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    /// Category of the ground-truth object a proposal came from; `None` for
    /// background and cluster proposals.
    pub category: Option<String>,
    pub confidence: f64,
    /// Superpoints pooled into the appearance feature.
    pub sources: Vec<usize>,
    #[serde(skip)]
    pub descriptor: [f64; DESCRIPTOR_DIM],
    pub pad: bool,
}

/// Geometry half of the detector output; features are computed on a tape by
/// [`FeatureEncoder::encode`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub superpoints: Vec<Superpoint>,
    pub candidates: Vec<Candidate>,
}

impl Detection {
    pub fn superpoint_keep(&self) -> Vec<bool> {
        self.superpoints.iter().map(|s| !s.pad).collect()
    }

    pub fn candidate_keep(&self) -> Vec<bool> {
        self.candidates.iter().map(|c| !c.pad).collect()
    }

    pub fn real_candidates(&self) -> impl Iterator<Item = usize> + '_ {
        self.candidates.iter().enumerate().filter(|(_, c)| !c.pad).map(|(i, _)| i)
    }

    /// Debug JSON: boxes, sources and pad flags without feature payloads.
    pub fn to_debug_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("detection serializes")
    }
}

fn pad_to<T: Clone>(items: &mut Vec<T>, n: usize, mark: impl Fn(&mut T)) {
    if let Some(last) = items.last().cloned() {
        while items.len() < n {
            let mut p = last.clone();
            mark(&mut p);
            items.push(p);
        }
    }
}

fn scene_hash(scene: &Scene) -> u64 {
    // FNV-1a over the id; keeps noise independent of any global state
    scene.scene_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn inside(b: &Box3D, p: &Point3) -> bool {
    b.inflate(1e-9).contains(p)
}

fn points_in_box(points: &[ScenePoint], b: &Box3D) -> Vec<usize> {
    let grown = b.inflate(1e-6);
    (0..points.len()).filter(|&i| grown.contains(&[points[i][0], points[i][1], points[i][2]])).collect()
}

fn candidate_from_box(
    scene: &Scene,
    superpoints: &[Superpoint],
    bbox: Box3D,
    category: Option<String>,
    confidence: f64,
    cap: usize,
) -> Candidate {
    let sources = (0..superpoints.len()).filter(|&i| !superpoints[i].pad && inside(&bbox, &superpoints[i].center)).collect();
    let descriptor = describe_points(&scene.points, &points_in_box(&scene.points, &bbox), cap);
    Candidate { bbox, category, confidence, sources, descriptor, pad: false }
}

fn oracle_candidates(scene: &Scene, sps: &[Superpoint], cfg: &DetectorConfig) -> Vec<Candidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed ^ scene_hash(scene));
    let jitter = |rng: &mut ChaCha8Rng, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let mut out = Vec::new();
    for gt in scene.gt_objects.iter().take(cfg.num_candidates) {
        let shift = [0; 3].map(|_| jitter(&mut rng, cfg.center_noise));
        let center = [0, 1, 2].map(|a| gt.bbox.center[a] + shift[a]);
        let size = gt.bbox.size.map(|s| s * (1.0 + jitter(&mut rng, cfg.size_noise)));
        let confidence = (1.0 - shift.iter().map(|s| s * s).sum::<f64>().sqrt()).max(0.0);
        out.push(candidate_from_box(scene, sps, Box3D::new(center, size), Some(gt.category.clone()), confidence, cfg.cluster_cap));
    }
    if cfg.distractors {
        let gt_boxes: Vec<Box3D> = scene.gt_objects.iter().map(|o| o.bbox).collect();
        for (i, sp) in sps.iter().enumerate() {
            if out.len() >= cfg.num_candidates {
                break;
            }
            if sp.pad || gt_boxes.iter().any(|b| inside(b, &sp.center)) {
                continue;
            }
            let member_xyz: Vec<Point3> = sp.members.iter().map(|&m| scene.xyz(m)).collect();
            let hull = Box3D::enclosing(&member_xyz).expect("superpoints have members");
            let size = hull.size.map(|s| s.max(0.1));
            let mut c = candidate_from_box(scene, sps, Box3D::new(hull.center, size), None, 0.0, cfg.cluster_cap);
            if !c.sources.contains(&i) {
                c.sources.push(i);
                c.sources.sort_unstable();
            }
            out.push(c);
        }
    }
    out
}

/// Connected components of the graph linking superpoint centers closer than
/// `threshold`, each listed in ascending index order, ordered by first member.
pub fn single_linkage(centers: &[Point3], threshold: f64) -> Vec<Vec<usize>> {
    let n = centers.len();
    let mut label = vec![usize::MAX; n];
    let mut groups = Vec::new();
    let t2 = threshold * threshold;
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = groups.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        label[start] = id;
        while let Some(i) = stack.pop() {
            members.push(i);
            for j in 0..n {
                if label[j] == usize::MAX && distance_sq(&centers[i], &centers[j]) <= t2 {
                    label[j] = id;
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        groups.push(members);
    }
    groups
}

fn cluster_candidates(scene: &Scene, sps: &[Superpoint], cfg: &DetectorConfig) -> Vec<Candidate> {
    let real: Vec<usize> = (0..sps.len()).filter(|&i| !sps[i].pad).collect();
    let centers: Vec<Point3> = real.iter().map(|&i| sps[i].center).collect();
    let mut groups: Vec<Vec<usize>> =
        single_linkage(&centers, cfg.merge_threshold).into_iter().map(|g| g.into_iter().map(|k| real[k]).collect()).collect();
    // keep the largest groups when there are more than slots
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| groups[b].len().cmp(&groups[a].len()).then(a.cmp(&b)));
    order.truncate(cfg.num_candidates);
    order.sort_unstable();
    let largest = order.iter().map(|&g| groups[g].len()).max().unwrap_or(1) as f64;
    let mut kept: Vec<Vec<usize>> = order.iter().map(|&g| std::mem::take(&mut groups[g])).collect();
    kept.iter_mut()
        .map(|sources| {
            let mut member_pts: Vec<usize> = sources.iter().flat_map(|&s| sps[s].members.iter().copied()).collect();
            member_pts.sort_unstable();
            member_pts.dedup();
            let xyz: Vec<Point3> = member_pts.iter().map(|&m| scene.xyz(m)).collect();
            let hull = Box3D::enclosing(&xyz).expect("clusters have members");
            let bbox = Box3D::new(hull.center, hull.size.map(|s| s.max(0.05)));
            let descriptor = describe_points(&scene.points, &member_pts, cfg.cluster_cap);
            Candidate {
                bbox,
                category: None,
                confidence: sources.len() as f64 / largest,
                sources: std::mem::take(sources),
                descriptor,
                pad: false,
            }
        })
        .collect()
}

/// Runs sampling, clustering and proposal generation for one scene.
pub fn detect(scene: &Scene, cfg: &DetectorConfig) -> Result<Detection, DetectorError> {
    let xyz = scene.positions();
    let n_sp = cfg.num_superpoints.min(xyz.len());
    let seeds = farthest_point_sample(&xyz, n_sp, cfg.fps_seed_index.min(xyz.len().saturating_sub(1)))?;
    let mut superpoints = cluster_superpoints(&scene.points, &seeds, cfg.radius, cfg.cluster_cap);
    if superpoints.is_empty() {
        return Err(DetectorError::NoSuperpoints);
    }
    pad_to(&mut superpoints, cfg.num_superpoints, |s| s.pad = true);
    let mut candidates = match cfg.mode {
        ProposalMode::OracleNoise => oracle_candidates(scene, &superpoints, cfg),
        ProposalMode::Cluster => cluster_candidates(scene, &superpoints, cfg),
    };
    if candidates.is_empty() {
        return Err(DetectorError::NoCandidates);
    }
    pad_to(&mut candidates, cfg.num_candidates, |c| c.pad = true);
    Ok(Detection { superpoints, candidates })
}

/// Shared MLP mapping raw descriptors to `d`-dim features, under `detector.*`.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    mlp: Mlp,
    d: usize,
}

/// Tape handles for the features of one detection.
#[derive(Clone, Copy, Debug)]
pub struct DetectionFeatures {
    /// `[N_SP, d]` superpoint features `f_i`.
    pub superpoints: Var,
    /// `[N_OBJ, d]` candidate appearance features `v_i`.
    pub candidates: Var,
}

impl FeatureEncoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        d: usize,
        expansion: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, AutodiffError> {
        Ok(Self { mlp: Mlp::new(store, "detector.encoder", DESCRIPTOR_DIM, expansion * d, d, rng)?, d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Encodes superpoint descriptors and, per candidate, mean-pools the
    /// encoded descriptors of its source superpoints together with the
    /// encoded descriptor of the points inside its box.
    pub fn encode<S: Scalar>(&self, tape: &mut Tape<'_, S>, det: &Detection) -> Result<DetectionFeatures, AutodiffError> {
        let n_sp = det.superpoints.len();
        let rows: Vec<f64> = det
            .superpoints
            .iter()
            .map(|s| &s.descriptor)
            .chain(det.candidates.iter().map(|c| &c.descriptor))
            .flat_map(normalize_descriptor)
            .collect();
        let n = n_sp + det.candidates.len();
        let input = tape.constant(Tensor::from_f64(vec![n, DESCRIPTOR_DIM], &rows)?);
        let encoded = self.mlp.forward(tape, input)?;
        let sp_rows: Vec<usize> = (0..n_sp).collect();
        let superpoints = tape.gather_rows(encoded, &sp_rows)?;
        let groups: Vec<Vec<usize>> = det
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| c.sources.iter().copied().chain(std::iter::once(n_sp + i)).collect())
            .collect();
        let candidates = tape.group_mean(encoded, &groups)?;
        Ok(DetectionFeatures { superpoints, candidates })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, SceneConfig};
    use proptest::prelude::*;

    fn brute_force_fps_step(points: &[Point3], chosen: &[usize]) -> f64 {
        // the best achievable min-distance to the chosen set
        (0..points.len())
            .filter(|i| !chosen.contains(i))
            .map(|i| chosen.iter().map(|&c| distance_sq(&points[i], &points[c])).fold(f64::INFINITY, f64::min))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn fps_on_a_line_picks_the_far_end() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), [0, 2]);
        assert_eq!(farthest_point_sample(&pts, 3, 0).unwrap(), [0, 2, 1]);
        assert!(matches!(farthest_point_sample(&pts, 4, 0), Err(DetectorError::TooFewPoints { .. })));
    }

    #[test]
    fn fps_ties_go_to_the_lowest_index() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), [0, 1]);
    }

    proptest! {
        #[test]
        fn fps_is_max_min_at_every_step(pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 30)) {
            let picks = farthest_point_sample(&pts, 5, 0).unwrap();
            for k in 1..picks.len() {
                let got = picks[..k].iter().map(|&c| distance_sq(&pts[picks[k]], &pts[c])).fold(f64::INFINITY, f64::min);
                prop_assert_eq!(got, brute_force_fps_step(&pts, &picks[..k]));
            }
        }

        #[test]
        fn ball_query_matches_brute_force(pts in prop::collection::vec(prop::array::uniform3(0.0f64..2.0), 100)) {
            let cloud: Vec<ScenePoint> = pts.iter().map(|p| [p[0], p[1], p[2], 0.5, 0.5, 0.5]).collect();
            let seeds = [0, 17, 42];
            let sps = cluster_superpoints(&cloud, &seeds, 0.5, 1000);
            for (sp, &s) in sps.iter().zip(&seeds) {
                let mut got = sp.members.clone();
                got.sort_unstable();
                let want: Vec<usize> = (0..100).filter(|&i| distance_sq(&pts[i], &pts[s]) <= 0.25).collect();
                prop_assert_eq!(got, want);
                for a in 0..3 {
                    let mean = sp.members.iter().map(|&m| pts[m][a]).sum::<f64>() / sp.members.len() as f64;
                    prop_assert!((sp.center[a] - mean).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn tiny_radius_gives_singletons() {
        let cloud: Vec<ScenePoint> = (0..5).map(|i| [i as f64, 0.0, 0.0, 0.0, 0.0, 0.0]).collect();
        let sps = cluster_superpoints(&cloud, &[0, 3], 0.1, 64);
        assert_eq!(sps[0].members, [0]);
        assert_eq!(sps[1].center, [3.0, 0.0, 0.0]);
    }

    #[test]
    fn ball_query_caps_nearest_first() {
        let cloud: Vec<ScenePoint> = (0..10).map(|i| [i as f64, 0.0, 0.0, 0.0, 0.0, 0.0]).collect();
        let sps = cluster_superpoints(&cloud, &[5], 10.0, 3);
        assert_eq!(sps[0].members, [5, 4, 6]);
        assert_eq!(sps[0].descriptor[9], 1.0);
    }

    #[test]
    fn noise_free_oracle_proposals_equal_ground_truth() {
        let scene = generate_synthetic_scene(2, &SceneConfig::default()).unwrap();
        let det = detect(&scene, &DetectorConfig::default()).unwrap();
        assert_eq!(det.superpoints.len(), 64);
        assert_eq!(det.candidates.len(), 32);
        for (gt, c) in scene.gt_objects.iter().zip(&det.candidates) {
            assert_eq!(gt.bbox, c.bbox);
            assert_eq!(c.confidence, 1.0);
        }
        for c in &det.candidates {
            for &s in &c.sources {
                assert!(c.bbox.inflate(1e-9).contains(&det.superpoints[s].center));
            }
        }
        // distractors sit on background superpoints
        assert!(det.candidates[scene.gt_objects.len()..].iter().any(|c| c.category.is_none() && !c.pad));
    }

    #[test]
    fn without_distractors_remaining_slots_are_padding() {
        let scene = generate_synthetic_scene(4, &SceneConfig::default()).unwrap();
        let cfg = DetectorConfig { distractors: false, ..Default::default() };
        let det = detect(&scene, &cfg).unwrap();
        assert_eq!(det.real_candidates().count(), scene.gt_objects.len());
        assert_eq!(det.candidates.last().unwrap().bbox, scene.gt_objects.last().unwrap().bbox);
    }

    #[test]
    fn superpoints_cover_the_scene() {
        // 64 centers cannot reach 2r coverage of an 8x8x3 room's floor and
        // walls; 256 is the density where the bound holds
        let cfg = DetectorConfig { num_superpoints: 256, ..Default::default() };
        for seed in 0..5 {
            let scene = generate_synthetic_scene(seed, &SceneConfig::default()).unwrap();
            let det = detect(&scene, &cfg).unwrap();
            let worst = scene
                .positions()
                .iter()
                .map(|p| det.superpoints.iter().map(|s| distance_sq(p, &s.center)).fold(f64::INFINITY, f64::min).sqrt())
                .fold(0.0, f64::max);
            assert!(worst <= 2.0 * cfg.radius, "seed {seed}: {worst}");
        }
    }

    #[test]
    fn background_superpoints_exist() {
        let scene = generate_synthetic_scene(0, &SceneConfig::default()).unwrap();
        let det = detect(&scene, &DetectorConfig::default()).unwrap();
        let outside = det
            .superpoints
            .iter()
            .filter(|s| s.members.iter().all(|&m| !scene.gt_objects.iter().any(|o| o.bbox.contains(&scene.xyz(m)))))
            .count();
        assert!(outside > 0);
    }

    #[test]
    fn single_linkage_separates_distant_blobs() {
        let mut centers = Vec::new();
        for i in 0..4 {
            centers.push([i as f64 * 0.3, 0.0, 0.0]);
            centers.push([5.0 + i as f64 * 0.3, 0.0, 0.0]);
        }
        let groups = single_linkage(&centers, 1.0);
        assert_eq!(groups, vec![vec![0, 2, 4, 6], vec![1, 3, 5, 7]]);
    }

    #[test]
    fn cluster_mode_on_two_blobs() {
        let mut points = Vec::new();
        for i in 0..40 {
            let t = i as f64 * 0.01;
            points.push([t, t, 0.0, 1.0, 0.0, 0.0]);
            points.push([5.0 + t, t, 0.0, 0.0, 0.0, 1.0]);
        }
        let scene = Scene { scene_id: "blobs".into(), points, gt_objects: Vec::new() };
        let cfg = DetectorConfig { mode: ProposalMode::Cluster, num_superpoints: 8, merge_threshold: 1.0, ..Default::default() };
        let det = detect(&scene, &cfg).unwrap();
        assert_eq!(det.real_candidates().count(), 2);
        assert_eq!(det.candidates.len(), 32);
        for c in &det.candidates {
            for &s in &c.sources {
                assert!(c.bbox.contains(&det.superpoints[s].center));
            }
        }
    }

    #[test]
    fn identical_descriptors_encode_identically() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = FeatureEncoder::new(&mut store, 8, 2, &mut rng).unwrap();
        let scene = generate_synthetic_scene(1, &SceneConfig::default()).unwrap();
        let cfg = DetectorConfig { distractors: false, ..Default::default() };
        let det = detect(&scene, &cfg).unwrap();
        let mut tape = Tape::inference(&store);
        let f = enc.encode(&mut tape, &det).unwrap();
        let v = tape.value(f.candidates);
        let last = det.candidates.len() - 1;
        // padding repeats the last real candidate
        assert_eq!(v.row(last), v.row(scene.gt_objects.len() - 1));
        assert!(store.iter().all(|(_, name, _)| name.starts_with("detector.")));
    }
}
