//! Self-checks run by `contextcap verify`: finite-difference gradients,
//! permutation invariance, decoder causality and oracle comparisons for the
//! metrics and context selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{check_param_gradients_with, probe_loss, GradCheck};
use crate::autodiff::{AutodiffError, Mask, OpKind, ParamStore, Reduction, Tape, Tensor, Var};
use crate::captioner::{Captioner, DecodeState, ModelConfig, SceneContext};
use crate::context::{select_neighbors, select_target_train, ContextSelection};
use crate::detector::{detect, Candidate, Detection, DetectorConfig, Superpoint, DESCRIPTOR_DIM};
use crate::geometry::{iou3d, Box3D};
use crate::metrics::{self, oracle, CiderD, EvalRecord};
use crate::scene::{generate_synthetic_scene, SceneConfig, EOS, SOS};

/// Gradient checks must agree to this relative error.
pub const GRAD_TOL: f64 = 1e-4;
/// Permutation-invariance and metric-oracle tolerance.
pub const EXACT_TOL: f64 = 1e-9;
/// Incremental against full decoding.
pub const INCREMENTAL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub seconds: f64,
    pub checks: Vec<CheckResult>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifySummary {
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub injected_fault: Option<String>,
    pub suites: Vec<SuiteResult>,
}

impl VerifySummary {
    pub fn failures(&self) -> Vec<String> {
        self.suites
            .iter()
            .flat_map(|s| s.checks.iter().filter(|c| !c.passed).map(move |c| format!("{}/{}", s.name, c.name)))
            .collect()
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult { name: name.into(), passed, detail: detail.into() }
}

fn suite(name: &str, body: impl FnOnce() -> Vec<CheckResult>) -> SuiteResult {
    let start = Instant::now();
    let checks = body();
    SuiteResult {
        name: name.to_string(),
        passed: checks.iter().all(|c| c.passed),
        seconds: start.elapsed().as_secs_f64(),
        checks,
    }
}

fn errored(name: &str, e: impl std::fmt::Display) -> CheckResult {
    check(name, false, format!("error: {e}"))
}

/// Small decoder over a 4-object scene used by the gradient, permutation
/// and causality suites.
pub struct Fixture {
    pub store: ParamStore<f64>,
    pub model: Captioner,
    pub det: Detection,
    pub sel: ContextSelection,
    pub vocab_size: usize,
}

impl Fixture {
    /// `d = 32`, 4 heads, 2 layers, sequences of up to 8 tokens, 4 objects,
    /// 8 superpoints; `extra_slots` padded candidate slots are appended.
    pub fn tiny(extra_slots: usize) -> Self {
        let cfg = ModelConfig { d_model: 32, heads: 4, layers: 2, expansion: 4, max_len: 8, k_obj: 3, k_sp: 4, ..Default::default() };
        let vocab_size = 20;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = Captioner::new(&mut store, &cfg, 4, vocab_size, &mut rng).expect("valid tiny config");
        let scene_cfg = SceneConfig { objects_min: 4, objects_max: 4, num_points: 512, ..Default::default() };
        let scene = generate_synthetic_scene(5, &scene_cfg).expect("tiny scene fits");
        let det_cfg = DetectorConfig { num_superpoints: 8, num_candidates: 4 + extra_slots, distractors: false, ..Default::default() };
        let det = detect(&scene, &det_cfg).expect("tiny scene has points");
        let sel = select_neighbors(0, &det.candidates, &det.superpoints, 3, 4).expect("enough neighbors");
        Self { store, model, det, sel, vocab_size }
    }

    fn tokens(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
        let mut t = vec![SOS];
        t.extend((1..len).map(|_| rng.gen_range(3..self.vocab_size)));
        t
    }
}

/// Scalar loss exercising `kind` on parameter vars `p` (`p[0]` is `[4, 6]`;
/// add_bias and layer_norm get extra rank-1 parameters).
fn op_graph(kind: OpKind, t: &mut Tape<'_, f64>, p: &[Var], aux: &Tensor<f64>) -> Result<Var, AutodiffError> {
    let x = p[0];
    let y = match kind {
        OpKind::MatMul => {
            // a second matmul inside probe_loss would cancel an injected sign flip
            let w = t.constant(aux.clone());
            let y = t.matmul(x, w)?;
            return t.cross_entropy(y, &[0, 4, 2, 1], None, Reduction::Mean);
        }
        OpKind::AddBias => t.add_bias(x, p[1])?,
        OpKind::Add => {
            let c = t.constant(aux.clone());
            t.add(x, c)?
        }
        OpKind::Scale => t.scale(x, -1.3),
        OpKind::Relu => t.relu(x),
        OpKind::RepeatRows => {
            let r = t.gather_rows(x, &[2])?;
            t.repeat_rows(r, 3)?
        }
        OpKind::GatherRows => t.gather_rows(x, &[3, 0, 3, 1])?,
        OpKind::GroupMean => t.group_mean(x, &[vec![0, 2], vec![1], vec![3, 2, 1]])?,
        OpKind::ConcatRows => {
            let c = t.constant(aux.clone());
            t.concat_rows(&[x, c])?
        }
        OpKind::LayerNorm => t.layer_norm(x, p[1], p[2])?,
        OpKind::Attention => {
            let k = t.constant(aux.clone());
            let q = t.gather_rows(x, &[0, 1, 2])?;
            let a = t.attention(q, k, x, 2, &Mask::Full)?;
            t.attention(a, x, x, 3, &Mask::Causal)?
        }
        OpKind::CrossEntropy => return t.cross_entropy(x, &[0, 5, 2, 1], None, Reduction::Mean),
        OpKind::Sum => {
            let w = t.constant(aux.clone());
            let y = t.matmul(x, w)?;
            let y = t.relu(y);
            return Ok(t.sum(y));
        }
    };
    probe_loss(t, y, 23)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, offset: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0) + offset).collect()).expect("shape matches")
}

/// Per-primitive checks plus a check per decoder block of the tiny model.
pub fn gradient_suite(fault: Option<OpKind>) -> SuiteResult {
    suite("gradient", || {
        let mut checks = Vec::new();
        let cfg = GradCheck { seed: 1, ..GradCheck::default() };
        for kind in OpKind::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(kind as u64 + 100);
            let mut store = ParamStore::<f64>::new();
            let mut ids = vec![store.register("x", rand_tensor(&[4, 6], &mut rng, 0.0)).expect("fresh store")];
            match kind {
                OpKind::AddBias => ids.push(store.register("b", rand_tensor(&[6], &mut rng, 0.0)).expect("fresh store")),
                OpKind::LayerNorm => {
                    ids.push(store.register("gain", rand_tensor(&[6], &mut rng, 1.5)).expect("fresh store"));
                    ids.push(store.register("bias", rand_tensor(&[6], &mut rng, 0.0)).expect("fresh store"));
                }
                _ => {}
            }
            let aux = match kind {
                OpKind::MatMul | OpKind::Sum => rand_tensor(&[6, 5], &mut rng, 0.0),
                _ => rand_tensor(&[4, 6], &mut rng, 0.0),
            };
            let name = format!("op:{}", kind.name());
            match check_param_gradients_with(&store, &ids, cfg, fault, |t| {
                let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
                op_graph(kind, t, &vars, &aux)
            }) {
                Ok(r) => {
                    let worst = r.worst().map(|w| format!(" worst {}[{}] analytic {:.6e} numeric {:.6e}", w.param, w.index, w.analytic, w.numeric)).unwrap_or_default();
                    checks.push(check(&name, r.max_rel_err < GRAD_TOL, format!("{} entries, max rel err {:.2e}{worst}", r.probes.len(), r.max_rel_err)));
                }
                Err(e) => checks.push(errored(&name, e)),
            }
        }
        checks.extend(decoder_gradient_checks(fault, 2));
        checks
    })
}

/// Gradient checks on `per_param` random entries of every parameter of the
/// tiny decoder, grouped by block.
pub fn decoder_gradient_checks(fault: Option<OpKind>, per_param: usize) -> Vec<CheckResult> {
    let fx = Fixture::tiny(0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens = fx.tokens(&mut rng, 8);
    let mut targets = tokens[1..].to_vec();
    targets.push(EOS);
    let ids: Vec<_> = fx.store.ids().collect();
    let cfg = GradCheck { entries_per_param: Some(per_param), seed: 9, ..GradCheck::default() };
    let report = check_param_gradients_with(&fx.store, &ids, cfg, fault, |t| {
        let prep = fx.model.prepare_target(t, &fx.det, &fx.sel).map_err(model_err)?;
        let logits = fx.model.forward_teacher_forced(t, &prep, &tokens).map_err(model_err)?;
        t.cross_entropy(logits, &targets, None, Reduction::Mean)
    });
    let report = match report {
        Ok(r) => r,
        Err(e) => return vec![errored("decoder", e)],
    };
    let mut blocks: Vec<String> = Vec::new();
    for p in &report.probes {
        let block = block_of(&p.param);
        if !blocks.contains(&block) {
            blocks.push(block);
        }
    }
    let mut checks: Vec<CheckResult> = blocks
        .iter()
        .map(|b| {
            let probes: Vec<_> = report.probes.iter().filter(|p| &block_of(&p.param) == b).collect();
            let worst = probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).expect("block has probes");
            check(
                format!("decoder:{b}"),
                worst.rel_err < GRAD_TOL,
                format!(
                    "{} entries, max rel err {:.2e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                    probes.len(),
                    worst.rel_err,
                    worst.param,
                    worst.index,
                    worst.analytic,
                    worst.numeric
                ),
            )
        })
        .collect();
    let required = ["layer0.gcm", "layer0.lcm", "layer0.fuse", "layer1.gcm", "layer1.lcm", "layer1.fuse", "embed", "head", "detector"];
    let missing: Vec<&str> = required.iter().copied().filter(|r| !blocks.iter().any(|b| b == r)).collect();
    checks.push(check(
        "decoder:coverage",
        report.probes.len() >= 50 && missing.is_empty(),
        format!("{} entries over {} blocks; missing {:?}", report.probes.len(), blocks.len(), missing),
    ));
    checks
}

fn block_of(param: &str) -> String {
    let parts: Vec<&str> = param.split('.').collect();
    if parts[0].starts_with("layer") && parts.len() > 1 {
        format!("{}.{}", parts[0], parts[1])
    } else {
        parts[0].to_string()
    }
}

fn model_err(e: crate::captioner::ModelError) -> AutodiffError {
    match e {
        crate::captioner::ModelError::Autodiff(a) => a,
        other => AutodiffError::Checkpoint(other.to_string()),
    }
}

/// `det` with candidates and superpoints reordered: slot `i` of the result
/// holds old candidate `cand_perm[i]` / old superpoint `sp_perm[i]`.
pub fn permute_detection(det: &Detection, cand_perm: &[usize], sp_perm: &[usize]) -> (Detection, Vec<usize>, Vec<usize>) {
    let mut cand_new = vec![0; cand_perm.len()];
    for (i, &old) in cand_perm.iter().enumerate() {
        cand_new[old] = i;
    }
    let mut sp_new = vec![0; sp_perm.len()];
    for (i, &old) in sp_perm.iter().enumerate() {
        sp_new[old] = i;
    }
    let superpoints: Vec<Superpoint> = sp_perm.iter().map(|&o| det.superpoints[o].clone()).collect();
    let candidates: Vec<Candidate> = cand_perm
        .iter()
        .map(|&o| {
            let mut c = det.candidates[o].clone();
            c.sources = c.sources.iter().map(|&s| sp_new[s]).collect();
            c
        })
        .collect();
    (Detection { superpoints, candidates }, cand_new, sp_new)
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Global-context outputs of every layer for a fixed input.
fn gcm_outputs(fx: &Fixture, det: &Detection, sel: &ContextSelection, h_prev: &Tensor<f64>) -> Result<Vec<Tensor<f64>>, String> {
    let mut tape = Tape::inference(&fx.store);
    let feats = fx.model.encode(&mut tape, det).map_err(|e| e.to_string())?;
    let sc = SceneContext::new(&mut tape, det, feats, sel).map_err(|e| e.to_string())?;
    let prep = fx.model.prepare(&mut tape, &sc).map_err(|e| e.to_string())?;
    let h = tape.constant(h_prev.clone());
    let mut out = Vec::new();
    for layer in 0..fx.model.config().layers {
        let (global, _) = fx.model.gcm_forward(&mut tape, layer, h, &prep).map_err(|e| e.to_string())?;
        out.push(tape.value(global).clone());
    }
    Ok(out)
}

/// Local-context outputs of every layer for a fixed `h̄`.
fn lcm_outputs(fx: &Fixture, sel: &ContextSelection, h_bar: &Tensor<f64>) -> Result<Vec<Tensor<f64>>, String> {
    let mut tape = Tape::inference(&fx.store);
    let prep = fx.model.prepare_target(&mut tape, &fx.det, sel).map_err(|e| e.to_string())?;
    let h = tape.constant(h_bar.clone());
    let mut out = Vec::new();
    for layer in 0..fx.model.config().layers {
        let local = fx.model.lcm_forward(&mut tape, layer, h, &prep).map_err(|e| e.to_string())?;
        out.push(tape.value(local.ok_or("LCM disabled")?).clone());
    }
    Ok(out)
}

/// Largest deviation of GCM outputs over `n` joint candidate/superpoint
/// permutations and of LCM outputs over `n` neighbor-list permutations.
pub fn permutation_deviations(n: usize, seed: u64) -> Result<(f64, f64), String> {
    let fx = Fixture::tiny(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = fx.model.config().d_model;
    let h = rand_tensor(&[6, d], &mut rng, 0.0);
    let base = gcm_outputs(&fx, &fx.det, &fx.sel, &h)?;
    let mut gcm_dev = 0.0f64;
    for _ in 0..n {
        let mut cp: Vec<usize> = (0..fx.det.candidates.len()).collect();
        let mut sp: Vec<usize> = (0..fx.det.superpoints.len()).collect();
        cp.shuffle(&mut rng);
        sp.shuffle(&mut rng);
        let (det, cand_new, sp_new) = permute_detection(&fx.det, &cp, &sp);
        let sel = ContextSelection {
            target: cand_new[fx.sel.target],
            neighbor_objects: fx.sel.neighbor_objects.iter().map(|&i| cand_new[i]).collect(),
            neighbor_superpoints: fx.sel.neighbor_superpoints.iter().map(|&i| sp_new[i]).collect(),
            target_iou: None,
        };
        for (a, b) in base.iter().zip(gcm_outputs(&fx, &det, &sel, &h)?) {
            gcm_dev = gcm_dev.max(max_abs_diff(a, &b));
        }
    }
    let base = lcm_outputs(&fx, &fx.sel, &h)?;
    let mut lcm_dev = 0.0f64;
    for _ in 0..n {
        let mut sel = fx.sel.clone();
        sel.neighbor_objects.shuffle(&mut rng);
        sel.neighbor_superpoints.shuffle(&mut rng);
        for (a, b) in base.iter().zip(lcm_outputs(&fx, &sel, &h)?) {
            lcm_dev = lcm_dev.max(max_abs_diff(a, &b));
        }
    }
    Ok((gcm_dev, lcm_dev))
}

pub fn permutation_suite() -> SuiteResult {
    suite("permutation", || match permutation_deviations(20, 17) {
        Ok((g, l)) => vec![
            check("gcm:candidates+superpoints", g <= EXACT_TOL, format!("20 permutations, max deviation {g:.2e}")),
            check("lcm:neighbor lists", l <= EXACT_TOL, format!("20 permutations, max deviation {l:.2e}")),
        ],
        Err(e) => vec![errored("permutation", e)],
    })
}

/// Outcome of the causality cases: count of cases where an earlier logit
/// changed, and the worst incremental/full gap.
pub fn causality_cases(n: usize, seed: u64) -> Result<(usize, f64), String> {
    let fx = Fixture::tiny(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = fx.model.config().max_len;
    let mut violations = 0;
    let mut worst_gap = 0.0f64;
    let mut tape = Tape::inference(&fx.store);
    let prep = fx.model.prepare_target(&mut tape, &fx.det, &fx.sel).map_err(|e| e.to_string())?;
    for _ in 0..n {
        let len = rng.gen_range(3..=max_len);
        let a = fx.tokens(&mut rng, len);
        let t = rng.gen_range(0..len - 1);
        let mut b = a.clone();
        for tok in &mut b[t + 1..] {
            *tok = rng.gen_range(3..fx.vocab_size);
        }
        let la = fx.model.forward_teacher_forced(&mut tape, &prep, &a).map_err(|e| e.to_string())?;
        let lb = fx.model.forward_teacher_forced(&mut tape, &prep, &b).map_err(|e| e.to_string())?;
        let (va, vb) = (tape.value(la).clone(), tape.value(lb).clone());
        if (0..=t).any(|r| va.row(r) != vb.row(r)) {
            violations += 1;
        }
        let mut state = DecodeState::default();
        for (pos, &tok) in a.iter().enumerate() {
            let row = fx.model.step(&mut tape, &prep, &mut state, tok).map_err(|e| e.to_string())?;
            let gap = tape.value(row).data().iter().zip(va.row(pos)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            worst_gap = worst_gap.max(gap);
        }
    }
    Ok((violations, worst_gap))
}

pub fn causality_suite() -> SuiteResult {
    suite("causality", || match causality_cases(20, 29) {
        Ok((v, gap)) => vec![
            check("future edits", v == 0, format!("{v} of 20 cases changed an earlier logit")),
            check("incremental decode", gap <= INCREMENTAL_TOL, format!("max |incremental - full| {gap:.2e}")),
        ],
        Err(e) => vec![errored("causality", e)],
    })
}

const WORDS: [&str; 6] = ["a", "red", "chair", "the", "wall", "is"];

fn rand_sentence(rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.gen_range(1..=8);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
}

fn rand_grid_box(rng: &mut ChaCha8Rng) -> Box3D {
    let c = [0; 3].map(|_: i32| rng.gen_range(0..6) as f64 * 0.5);
    let s = [0; 3].map(|_: i32| rng.gen_range(2..5) as f64 * 0.5);
    Box3D::new(c, s)
}

/// Largest |implementation - oracle| per metric over `n` random instances
/// of at most five sentences or boxes.
pub fn metric_oracle_gaps(n: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaps = [("cider_d", 0.0f64), ("bleu4", 0.0), ("rouge_l", 0.0), ("meteor_exact", 0.0), ("gating", 0.0), ("map", 0.0)];
    let mut bump = |k: usize, a: f64, b: f64| gaps[k].1 = gaps[k].1.max((a - b).abs());
    for _ in 0..n {
        let docs = rng.gen_range(1..=3);
        let corpus: Vec<Vec<Vec<String>>> = (0..docs).map(|_| (0..rng.gen_range(1..=2)).map(|_| rand_sentence(&mut rng)).collect()).collect();
        let cand = rand_sentence(&mut rng);
        let cider = CiderD::new(&corpus).expect("non-empty corpus");
        for refs in &corpus {
            bump(0, cider.score(&cand, refs), oracle::cider_d(&cand, refs, &corpus));
            bump(1, metrics::bleu4(&cand, refs), oracle::bleu4(&cand, refs));
            bump(2, metrics::rouge_l(&cand, refs), oracle::rouge_l(&cand, refs));
            bump(3, metrics::meteor_exact(&cand, refs), oracle::meteor_exact(&cand, refs));
        }
        let records: Vec<EvalRecord> = corpus
            .iter()
            .enumerate()
            .map(|(i, refs)| {
                let iou = if rng.gen_bool(0.2) { None } else { Some(rng.gen_range(0.0..1.0)) };
                EvalRecord { gt_index: i, matched: iou.map(|v| (i, v)), generated: rand_sentence(&mut rng), references: refs.clone() }
            })
            .collect();
        let fast = metrics::gate_and_aggregate(&records, metrics::rouge_l);
        let items: Vec<(Option<f64>, f64)> = records.iter().map(|r| (r.matched.map(|m| m.1), oracle::rouge_l(&r.generated, &r.references))).collect();
        bump(4, fast, oracle::gated_mean(&items));
        let gt: Vec<Box3D> = (0..rng.gen_range(1..=5)).map(|_| rand_grid_box(&mut rng)).collect();
        let preds: Vec<(f64, Box3D)> = (0..rng.gen_range(0..=5)).map(|_| (rng.gen_range(0..4) as f64 * 0.25, rand_grid_box(&mut rng))).collect();
        let corners = |b: &Box3D| (b.min(), b.max());
        let slow = oracle::average_precision(&preds.iter().map(|(c, b)| (*c, corners(b))).collect::<Vec<_>>(), &gt.iter().map(corners).collect::<Vec<_>>());
        bump(5, metrics::average_precision(&preds, &gt), slow);
    }
    gaps.to_vec()
}

pub fn metric_suite() -> SuiteResult {
    suite("metric-oracle", || {
        let mut checks: Vec<CheckResult> = metric_oracle_gaps(200, 41)
            .into_iter()
            .map(|(name, gap)| check(name, gap <= EXACT_TOL, format!("max |fast - oracle| {gap:.2e} over 200 instances")))
            .collect();
        let s: Vec<String> = "this is a red chair it is next to the wall".split(' ').map(str::to_string).collect();
        let ten = CiderD::new(&[vec![s.clone()]]).expect("one document").score(&s, &[s.clone()]);
        checks.push(check("cider_d identical pair", ten == 10.0, format!("score {ten}")));
        checks
    })
}

fn rand_candidates(rng: &mut ChaCha8Rng, n: usize) -> Vec<Candidate> {
    (0..n)
        .map(|_| {
            let c = [0; 3].map(|_: i32| rng.gen_range(0..8) as f64 * 0.25);
            let s = [0; 3].map(|_: i32| rng.gen_range(1..6) as f64 * 0.25);
            Candidate {
                bbox: Box3D::new(c, s),
                category: None,
                confidence: 1.0,
                sources: Vec::new(),
                descriptor: [0.0; DESCRIPTOR_DIM],
                pad: rng.gen_bool(0.15),
            }
        })
        .collect()
}

/// Mismatch counts of target and neighbor selection against brute force
/// over `n` random geometries with coarse coordinates (so ties occur).
pub fn context_oracle_mismatches(n: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut target_bad, mut neighbor_bad) = (0, 0);
    for _ in 0..n {
        let n_cand = rng.gen_range(2..10);
        let mut cands = rand_candidates(&mut rng, n_cand);
        cands[0].pad = false;
        let sps: Vec<Superpoint> = (0..rng.gen_range(1..12))
            .map(|_| Superpoint {
                center: [0; 3].map(|_: i32| rng.gen_range(0..8) as f64 * 0.25),
                members: vec![0],
                descriptor: [0.0; DESCRIPTOR_DIM],
                pad: false,
            })
            .collect();
        let gt = rand_candidates(&mut rng, 1)[0].bbox;
        // brute force: first real index attaining the maximum IoU
        let real: Vec<usize> = (0..cands.len()).filter(|&i| !cands[i].pad).collect();
        let best = real.iter().map(|&i| iou3d(&cands[i].bbox, &gt)).fold(f64::NEG_INFINITY, f64::max);
        let want = real.iter().copied().find(|&i| iou3d(&cands[i].bbox, &gt) == best).map(|i| (i, best));
        if select_target_train(&cands, &gt) != want {
            target_bad += 1;
        }
        let target = real[rng.gen_range(0..real.len())];
        let others: Vec<usize> = real.iter().copied().filter(|&i| i != target).collect();
        let k_obj = rng.gen_range(0..=others.len());
        let k_sp = rng.gen_range(0..=sps.len());
        let dist = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
        let tc = cands[target].bbox.center;
        // selection sort by (distance, index)
        let pick = |mut pool: Vec<(f64, usize)>, k: usize| -> Vec<usize> {
            let mut out = Vec::new();
            while out.len() < k {
                let mut m = 0;
                for j in 1..pool.len() {
                    if pool[j].0 < pool[m].0 || (pool[j].0 == pool[m].0 && pool[j].1 < pool[m].1) {
                        m = j;
                    }
                }
                out.push(pool.remove(m).1);
            }
            out
        };
        let want_obj = pick(others.iter().map(|&i| (dist(tc, cands[i].bbox.center), i)).collect(), k_obj);
        let want_sp = pick(sps.iter().enumerate().map(|(i, s)| (dist(tc, s.center), i)).collect(), k_sp);
        match select_neighbors(target, &cands, &sps, k_obj, k_sp) {
            Ok(sel) if sel.neighbor_objects == want_obj && sel.neighbor_superpoints == want_sp => {}
            _ => neighbor_bad += 1,
        }
    }
    (target_bad, neighbor_bad)
}

pub fn context_suite() -> SuiteResult {
    suite("context-oracle", || {
        let (t, nb) = context_oracle_mismatches(200, 53);
        let offset: f64 = iou3d(&Box3D::from_min_max([0.0; 3], [1.0; 3]), &Box3D::from_min_max([0.5, 0.0, 0.0], [1.5, 1.0, 1.0]));
        vec![
            check("target selection", t == 0, format!("{t} of 200 geometries disagree with brute force")),
            check("neighbor selection", nb == 0, format!("{nb} of 200 geometries disagree with brute force")),
            check("iou unit-cube offset", (offset - 1.0f64 / 3.0).abs() <= 1e-12, format!("iou {offset}")),
        ]
    })
}

/// Runs every suite; `fault` flips a backward rule for the gradient suite.
pub fn run_all(fault: Option<OpKind>) -> VerifySummary {
    let suites = vec![gradient_suite(fault), permutation_suite(), causality_suite(), metric_suite(), context_suite()];
    VerifySummary { passed: suites.iter().all(|s| s.passed), injected_fault: fault.map(|k| k.name().to_string()), suites }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_without_faults() {
        let summary = run_all(None);
        assert!(summary.passed, "{:?}", summary.failures());
        assert!(summary.suites.len() >= 3);
    }

    #[test]
    fn each_injected_fault_is_named() {
        for kind in OpKind::ALL {
            let s = gradient_suite(Some(kind));
            assert!(!s.passed, "{kind}");
            let op = format!("op:{}", kind.name());
            assert!(s.checks.iter().any(|c| c.name == op && !c.passed), "{kind}");
        }
    }
}
