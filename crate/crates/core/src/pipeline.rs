//! Detector, context selection and decoder bound together: the trainable
//! model bundle, checkpoint round trips, evaluation and scene captioning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore};
use crate::captioner::{Captioner, ModelError};
use crate::config::RunConfig;
use crate::context::{available_k, select_neighbors, ContextError, ContextSelection};
use crate::detector::{detect, Detection, DetectorError};
use crate::geometry::Box3D;
use crate::metrics::{
    bleu4, gate_and_aggregate, map_at_0_5iou, match_predictions, meteor_exact, rouge_l, CiderD, EvalRecord, ScoredBox,
};
use crate::scene::{tokenize, Scene, SceneError, Vocabulary};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("{path}: {source}")]
    Checkpoint { path: String, source: AutodiffError },
    #[error("{path}: {message}")]
    CheckpointContents { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Data(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// Everything needed to run the model: config, vocabulary, the decoder and
/// its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub captioner: Captioner,
    pub store: ParamStore<f64>,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &RunConfig, vocab: Vocabulary) -> Result<Self, PipelineError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let captioner =
            Captioner::new(&mut store, &config.model, config.detector.encoder_expansion, vocab.len(), &mut rng)?;
        Ok(Self { config: config.clone(), vocab, captioner, store })
    }

    pub fn metadata(&self, extra: serde_json::Value) -> serde_json::Value {
        json!({ "config": self.config, "vocab": self.vocab, "extra": extra })
    }

    pub fn checkpoint_bytes(&self, extra: serde_json::Value) -> Result<Vec<u8>, PipelineError> {
        Ok(self.store.to_bytes(&self.metadata(extra))?)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), PipelineError> {
        let bytes = self.checkpoint_bytes(extra)?;
        std::fs::write(path, bytes).map_err(io_err(path))
    }

    /// Loads a checkpoint written by [`Model::save`], rebuilding the decoder
    /// from the stored config and checking every parameter name and shape.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let shown = path.display().to_string();
        let (store, metadata) =
            ParamStore::<f64>::load(path).map_err(|source| PipelineError::Checkpoint { path: shown.clone(), source })?;
        let bad = |message: String| PipelineError::CheckpointContents { path: shown.clone(), message };
        let config: RunConfig =
            serde_json::from_value(metadata["config"].clone()).map_err(|e| bad(format!("config: {e}")))?;
        let vocab: Vocabulary =
            serde_json::from_value(metadata["vocab"].clone()).map_err(|e| bad(format!("vocab: {e}")))?;
        let fresh = Self::new(&config, vocab)?;
        if fresh.store.len() != store.len() {
            return Err(bad(format!("expected {} parameters, found {}", fresh.store.len(), store.len())));
        }
        for ((_, name, value), (_, got_name, got)) in fresh.store.iter().zip(store.iter()) {
            if name != got_name || value.shape() != got.shape() {
                return Err(bad(format!("expected {name} {:?}, found {got_name} {:?}", value.shape(), got.shape())));
            }
        }
        Ok(Self { store, ..fresh })
    }

    pub fn detect(&self, scene: &Scene) -> Result<Detection, PipelineError> {
        Ok(detect(scene, &self.config.detector)?)
    }

    /// Neighbor selection with `K` clipped to what the detection supplies.
    pub fn select(&self, det: &Detection, target: usize) -> Result<ContextSelection, PipelineError> {
        let (k_obj, k_sp) = available_k(det, self.config.model.k_obj, self.config.model.k_sp);
        Ok(select_neighbors(target, &det.candidates, &det.superpoints, k_obj, k_sp)?)
    }

    pub fn greedy_caption(&self, det: &Detection, sel: &ContextSelection) -> Result<Vec<String>, PipelineError> {
        let ids = self.captioner.greedy_decode(&self.store, det, sel)?;
        Ok(self.vocab.decode(&ids))
    }

    /// Captions every real candidate of the scene, one target at a time.
    pub fn caption_scene(&self, scene: &Scene) -> Result<SceneCaptions, PipelineError> {
        let det = self.detect(scene)?;
        let mut captions = Vec::new();
        for target in det.real_candidates() {
            let sel = self.select(&det, target)?;
            let tokens = self.greedy_caption(&det, &sel)?;
            let c = &det.candidates[target];
            captions.push(CandidateCaption {
                candidate: target,
                bbox: c.bbox,
                confidence: c.confidence,
                caption: tokens.join(" "),
                tokens,
            });
        }
        Ok(SceneCaptions { scene_id: scene.scene_id.clone(), captions })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateCaption {
    pub candidate: usize,
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub confidence: f64,
    pub tokens: Vec<String>,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneCaptions {
    pub scene_id: String,
    pub captions: Vec<CandidateCaption>,
}

/// The evaluation report; every metric on the ×100 scale.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(rename = "C@0.5IoU")]
    pub cider: f64,
    #[serde(rename = "B-4@0.5IoU")]
    pub bleu4: f64,
    #[serde(rename = "M@0.5IoU")]
    pub meteor: f64,
    #[serde(rename = "R@0.5IoU")]
    pub rouge_l: f64,
    #[serde(rename = "mAP@0.5IoU")]
    pub map: f64,
    pub n_gt_objects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneEval {
    pub scene_id: String,
    pub records: Vec<EvalRecord>,
}

/// Reference token lists of every ground-truth object, one document each.
pub fn reference_corpus<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Vec<Vec<Vec<String>>> {
    scenes
        .into_iter()
        .flat_map(|s| s.gt_objects.iter().map(|o| o.captions.iter().map(|c| tokenize(c)).collect()))
        .collect()
}

fn eval_scene(model: &Model, scene: &Scene, det: &Detection) -> Result<(SceneEval, Vec<ScoredBox>), PipelineError> {
    let gt: Vec<Box3D> = scene.gt_objects.iter().map(|o| o.bbox).collect();
    let matches = match_predictions(&gt, &det.candidates);
    // captions below the gate score 0 whatever they say, so they are not decoded
    let mut decoded: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut records = Vec::with_capacity(gt.len());
    for (i, (obj, m)) in scene.gt_objects.iter().zip(matches).enumerate() {
        let mut record = EvalRecord {
            gt_index: i,
            matched: m,
            generated: Vec::new(),
            references: obj.captions.iter().map(|c| tokenize(c)).collect(),
        };
        if record.passes_gate() {
            let (cand, _) = m.expect("gated records are matched");
            if !decoded.contains_key(&cand) {
                let sel = model.select(det, cand)?;
                decoded.insert(cand, model.greedy_caption(det, &sel)?);
            }
            record.generated = decoded[&cand].clone();
        }
        records.push(record);
    }
    let preds = det
        .candidates
        .iter()
        .filter(|c| !c.pad)
        .filter_map(|c| {
            c.category.as_ref().map(|cat| ScoredBox { category: cat.clone(), bbox: c.bbox, confidence: c.confidence })
        })
        .collect();
    Ok((SceneEval { scene_id: scene.scene_id.clone(), records }, preds))
}

/// Scores precomputed detections. `cider` supplies the idf statistics;
/// when absent they come from the references being evaluated.
pub fn evaluate_detections(
    model: &Model,
    items: &[(&Scene, &Detection)],
    cider: Option<&CiderD>,
) -> Result<(EvalReport, Vec<SceneEval>), PipelineError> {
    let per_scene: Vec<(SceneEval, Vec<ScoredBox>)> =
        items.par_iter().map(|(s, d)| eval_scene(model, s, d)).collect::<Result<_, _>>()?;
    let records: Vec<EvalRecord> = per_scene.iter().flat_map(|(e, _)| e.records.iter().cloned()).collect();
    let preds: Vec<ScoredBox> = per_scene.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
    let gt: Vec<(String, Box3D)> =
        items.iter().flat_map(|(s, _)| s.gt_objects.iter().map(|o| (o.category.clone(), o.bbox))).collect();
    let own;
    let cider = match cider {
        Some(c) => c,
        None => {
            let corpus: Vec<Vec<Vec<String>>> = records.iter().map(|r| r.references.clone()).collect();
            own = CiderD::new(&corpus).ok_or_else(|| PipelineError::Data("no ground-truth objects to evaluate".into()))?;
            &own
        }
    };
    let report = EvalReport {
        cider: gate_and_aggregate(&records, |c, r| cider.score(c, r)),
        bleu4: gate_and_aggregate(&records, bleu4),
        meteor: gate_and_aggregate(&records, meteor_exact),
        rouge_l: gate_and_aggregate(&records, rouge_l),
        map: 100.0 * map_at_0_5iou(&preds, &gt),
        n_gt_objects: records.len(),
    };
    let scenes = per_scene.into_iter().map(|(e, _)| e).collect();
    Ok((report, scenes))
}

/// Detects and scores every scene.
pub fn evaluate(model: &Model, scenes: &[Scene]) -> Result<(EvalReport, Vec<SceneEval>), PipelineError> {
    let dets: Vec<Detection> = scenes.par_iter().map(|s| model.detect(s)).collect::<Result<_, _>>()?;
    let items: Vec<(&Scene, &Detection)> = scenes.iter().zip(&dets).collect();
    evaluate_detections(model, &items, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_synthetic_scene;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 16;
        cfg.model.heads = 2;
        cfg.model.layers = 1;
        cfg.model.expansion = 2;
        cfg.model.max_len = 24;
        cfg.detector.encoder_expansion = 2;
        cfg.scene.num_points = 600;
        cfg
    }

    fn vocab_for(scenes: &[Scene]) -> Vocabulary {
        let captions: Vec<&str> =
            scenes.iter().flat_map(|s| s.gt_objects.iter().flat_map(|o| o.captions.iter().map(String::as_str))).collect();
        Vocabulary::build(captions)
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let cfg = tiny_config();
        let scene = generate_synthetic_scene(1, &cfg.scene).unwrap();
        let model = Model::new(&cfg, vocab_for(&[scene])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path, json!({"epoch": 0})).unwrap();
        let back = Model::load(&path).unwrap();
        assert!(back.store.bit_identical(&model.store));
        assert_eq!(back.vocab, model.vocab);
        assert_eq!(back.config, model.config);

        let mut other = cfg.clone();
        other.model.d_model = 8;
        let mut wrong = Model::new(&other, model.vocab.clone()).unwrap();
        wrong.config = cfg;
        wrong.save(&path, json!({})).unwrap();
        let err = Model::load(&path).unwrap_err();
        assert!(matches!(err, PipelineError::CheckpointContents { .. }), "{err}");
    }

    #[test]
    fn untrained_eval_is_finite_and_captions_cover_candidates() {
        let mut cfg = tiny_config();
        cfg.detector.distractors = false;
        let scenes: Vec<Scene> = (0..2).map(|s| generate_synthetic_scene(s, &cfg.scene).unwrap()).collect();
        let model = Model::new(&cfg, vocab_for(&scenes)).unwrap();
        let (report, per_scene) = evaluate(&model, &scenes).unwrap();
        let n: usize = scenes.iter().map(|s| s.gt_objects.len()).sum();
        assert_eq!(report.n_gt_objects, n);
        assert_eq!(per_scene.len(), 2);
        for v in [report.cider, report.bleu4, report.meteor, report.rouge_l, report.map] {
            assert!(v.is_finite());
        }
        // noise-free oracle boxes are the ground truth
        assert_eq!(report.map, 100.0);
        let caps = model.caption_scene(&scenes[0]).unwrap();
        assert_eq!(caps.captions.len(), scenes[0].gt_objects.len());
    }
}
