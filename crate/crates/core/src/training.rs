//! Cross-entropy and self-critical training over the two-stage schedule.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Adam, Gradients, Reduction, Tape, Var};
use crate::context::{select_target_train, ContextSelection};
use crate::detector::Detection;
use crate::metrics::CiderD;
use crate::pipeline::{evaluate_detections, io_err, reference_corpus, Model, PipelineError};
use crate::scene::{tokenize, Scene, Vocabulary, EOS, SOS};

/// Subtree frozen during the first stage.
pub const DETECTOR_PREFIX: &str = "detector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub scst_epochs: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_scst: f64,
    pub batch_size: usize,
    /// Samples whose target matches its ground truth below this IoU are dropped.
    pub skip_iou: f64,
    /// Sampling temperature of the SCST exploration caption.
    pub scst_temperature: f64,
    /// Greedy-decode the training set after every epoch to log train CIDEr.
    pub log_train_cider: bool,
    /// Keep one checkpoint per epoch instead of only stage ends and the latest.
    pub keep_epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 30,
            stage2_epochs: 10,
            scst_epochs: 10,
            lr_stage1: 1e-3,
            lr_stage2: 1e-4,
            lr_scst: 1e-5,
            batch_size: 8,
            skip_iou: 0.25,
            scst_temperature: 1.0,
            log_train_cider: true,
            keep_epoch_checkpoints: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Cross-entropy with the detector frozen.
    XeFrozen,
    /// Cross-entropy, detector and decoder together.
    XeJoint,
    Scst,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::XeFrozen => "xe_frozen",
            Stage::XeJoint => "xe_joint",
            Stage::Scst => "scst",
        }
    }
}

/// One ground-truth object that survived the IoU floor.
#[derive(Clone, Debug)]
pub struct TrainObject {
    pub gt_index: usize,
    pub selection: ContextSelection,
    pub references: Vec<Vec<String>>,
    /// Encoded captions trimmed to `SOS ... EOS`.
    pub sequences: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct TrainScene {
    pub scene: Scene,
    pub detection: Detection,
    pub objects: Vec<TrainObject>,
}

/// (scene, object, caption) indices into a [`Dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub scene: usize,
    pub object: usize,
    pub caption: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenes: Vec<TrainScene>,
    pub samples: Vec<Sample>,
    /// Ground-truth objects dropped by the IoU floor.
    pub skipped: usize,
    /// Reward statistics, fixed from the training references.
    pub cider: CiderD,
}

pub fn build_vocab(scenes: &[Scene]) -> Vocabulary {
    Vocabulary::build(scenes.iter().flat_map(|s| s.gt_objects.iter().flat_map(|o| o.captions.iter().map(String::as_str))))
}

impl Dataset {
    pub fn build(model: &Model, scenes: Vec<Scene>) -> Result<Self, PipelineError> {
        let max_len = model.config.model.max_len;
        let skip_iou = model.config.train.skip_iou;
        let cider = CiderD::new(&reference_corpus(&scenes))
            .ok_or_else(|| PipelineError::Data("training set has no ground-truth objects".into()))?;
        let mut out = Vec::with_capacity(scenes.len());
        let mut samples = Vec::new();
        let mut skipped = 0;
        for scene in scenes {
            let detection = model.detect(&scene)?;
            let mut objects = Vec::new();
            for (gt_index, obj) in scene.gt_objects.iter().enumerate() {
                let Some((target, iou)) = select_target_train(&detection.candidates, &obj.bbox) else {
                    skipped += 1;
                    continue;
                };
                if iou < skip_iou {
                    skipped += 1;
                    continue;
                }
                let mut selection = model.select(&detection, target)?;
                selection.target_iou = Some(iou);
                let references: Vec<Vec<String>> = obj.captions.iter().map(|c| tokenize(c)).collect();
                let sequences = references
                    .iter()
                    .map(|r| {
                        let mut ids = model.vocab.encode(r, max_len);
                        let end = ids.iter().position(|&t| t == EOS).expect("encode appends EOS");
                        ids.truncate(end + 1);
                        ids
                    })
                    .collect::<Vec<_>>();
                for caption in 0..sequences.len() {
                    samples.push(Sample { scene: out.len(), object: objects.len(), caption });
                }
                objects.push(TrainObject { gt_index, selection, references, sequences });
            }
            out.push(TrainScene { scene, detection, objects });
        }
        Ok(Self { scenes: out, samples, skipped, cider })
    }

    /// `(scene, object)` pairs in order.
    pub fn objects(&self) -> Vec<(usize, usize)> {
        self.scenes.iter().enumerate().flat_map(|(s, ts)| (0..ts.objects.len()).map(move |o| (s, o))).collect()
    }

    pub fn object(&self, scene: usize, object: usize) -> (&Detection, &TrainObject) {
        let ts = &self.scenes[scene];
        (&ts.detection, &ts.objects[object])
    }
}

/// Mean per-token cross-entropy of one `SOS ... EOS` sequence.
pub fn xe_loss(
    model: &Model,
    tape: &mut Tape<'_, f64>,
    det: &Detection,
    sel: &ContextSelection,
    sequence: &[usize],
) -> Result<Var, PipelineError> {
    if sequence.len() < 2 {
        return Err(PipelineError::Data("a training sequence needs at least SOS and one target".into()));
    }
    let prep = model.captioner.prepare_target(tape, det, sel)?;
    let logits = model.captioner.forward_teacher_forced(tape, &prep, &sequence[..sequence.len() - 1])?;
    Ok(tape.cross_entropy(logits, &sequence[1..], None, Reduction::Mean)?)
}

/// Mean per-sample XE over the whole dataset at the current parameters.
pub fn dataset_loss(model: &Model, data: &Dataset) -> Result<f64, PipelineError> {
    if data.samples.is_empty() {
        return Err(PipelineError::Data("no training samples".into()));
    }
    let mut total = 0.0;
    for s in &data.samples {
        let (det, obj) = data.object(s.scene, s.object);
        let mut tape = Tape::inference(&model.store);
        let loss = xe_loss(model, &mut tape, det, &obj.selection, &obj.sequences[s.caption])?;
        total += tape.value(loss).data()[0];
    }
    Ok(total / data.samples.len() as f64)
}

/// One optimizer step on the batch mean of per-sequence losses.
pub fn xe_step(model: &mut Model, adam: &mut Adam<f64>, data: &Dataset, batch: &[Sample]) -> Result<f64, PipelineError> {
    if batch.is_empty() {
        return Err(PipelineError::Data("empty batch".into()));
    }
    let mut grads = Gradients::zeros_like(&model.store);
    let mut total = 0.0;
    for s in batch {
        let (det, obj) = data.object(s.scene, s.object);
        let mut tape = Tape::new(&model.store);
        let loss = xe_loss(model, &mut tape, det, &obj.selection, &obj.sequences[s.caption])?;
        total += tape.value(loss).item();
        grads.add_assign(&tape.backward(loss)?.params);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    adam.step(&mut model.store, &grads);
    Ok(total / n)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScstStats {
    /// Batch mean of `-(r(sampled) - r(greedy)) * sum log p(sampled)`.
    pub loss: f64,
    pub mean_advantage: f64,
    /// Samples without usable references.
    pub skipped: usize,
    /// Whether any gradient reached the optimizer.
    pub stepped: bool,
}

/// Self-critical step over `(scene, object)` pairs with the greedy caption
/// as baseline. A batch whose every advantage is zero has an exactly zero
/// gradient and makes no optimizer step, so Adam's moments cannot move the
/// parameters on their own.
pub fn scst_step(
    model: &mut Model,
    adam: &mut Adam<f64>,
    data: &Dataset,
    batch: &[(usize, usize)],
    seeds: &[u64],
) -> Result<ScstStats, PipelineError> {
    if batch.is_empty() {
        return Err(PipelineError::Data("empty batch".into()));
    }
    let temperature = model.config.train.scst_temperature;
    let mut grads = Gradients::zeros_like(&model.store);
    let mut stats = ScstStats::default();
    let mut used = 0usize;
    for (&(s, o), &seed) in batch.iter().zip(seeds) {
        let (det, obj) = data.object(s, o);
        let refs: Vec<Vec<String>> = obj.references.iter().filter(|r| !r.is_empty()).cloned().collect();
        if refs.is_empty() {
            eprintln!("warning: skipping object {} of scene {s}: no usable reference caption", obj.gt_index);
            stats.skipped += 1;
            continue;
        }
        used += 1;
        let greedy = model.captioner.greedy_decode(&model.store, det, &obj.selection)?;
        let (sampled, logps) = model.captioner.sample_decode(&model.store, det, &obj.selection, temperature, seed)?;
        let reward = |ids: &[usize]| data.cider.score(&model.vocab.decode(ids), &refs);
        let advantage = reward(&sampled) - reward(&greedy);
        stats.mean_advantage += advantage;
        let sum_logp: f64 = logps.iter().sum();
        stats.loss += -advantage * sum_logp;
        if advantage == 0.0 {
            continue;
        }
        let ended = logps.len() > sampled.len();
        let mut targets = sampled.clone();
        if ended {
            targets.push(EOS);
        }
        let mut inputs = vec![SOS];
        inputs.extend_from_slice(&sampled[..targets.len() - 1]);
        let mut tape = Tape::new(&model.store);
        let prep = model.captioner.prepare_target(&mut tape, det, &obj.selection)?;
        let logits = model.captioner.forward_teacher_forced(&mut tape, &prep, &inputs)?;
        // summed cross-entropy is -sum log p, so this is the surrogate itself
        let nll = tape.cross_entropy(logits, &targets, None, Reduction::Sum)?;
        let surrogate = tape.scale(nll, advantage);
        grads.add_assign(&tape.backward(surrogate)?.params);
    }
    if used > 0 {
        stats.loss /= used as f64;
        stats.mean_advantage /= used as f64;
        grads.scale(1.0 / used as f64);
    }
    if !grads.is_all_zero() {
        adam.step(&mut model.store, &grads);
        stats.stepped = true;
    }
    Ok(stats)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    /// C@0.5IoU on the training set (×100), `null` when not logged.
    pub train_cider: Option<f64>,
}

/// Training-set C@0.5IoU using the fixed reward statistics.
pub fn train_cider(model: &Model, data: &Dataset) -> Result<f64, PipelineError> {
    let items: Vec<(&Scene, &Detection)> = data.scenes.iter().map(|s| (&s.scene, &s.detection)).collect();
    Ok(evaluate_detections(model, &items, Some(&data.cider))?.0.cider)
}

struct Output {
    dir: PathBuf,
    log: std::fs::File,
    keep_epochs: bool,
}

impl Output {
    fn create(dir: &Path, model: &Model) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, model.config.to_json_pretty() + "\n").map_err(io_err(&cfg_path))?;
        let log_path = dir.join("metrics.jsonl");
        let log = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
        Ok(Self { dir: dir.to_path_buf(), log, keep_epochs: model.config.train.keep_epoch_checkpoints })
    }

    fn epoch(&mut self, model: &Model, row: &EpochRow) -> Result<(), PipelineError> {
        let log_path = self.dir.join("metrics.jsonl");
        writeln!(self.log, "{}", serde_json::to_string(row).expect("row serializes")).map_err(io_err(&log_path))?;
        let meta = json!({ "stage": row.stage, "epoch": row.epoch });
        model.save(&self.dir.join("latest.ckpt"), meta.clone())?;
        if self.keep_epochs {
            model.save(&self.dir.join(format!("{}_epoch{:03}.ckpt", row.stage, row.epoch)), meta)?;
        }
        Ok(())
    }

    fn stage_end(&self, model: &Model, stage: Stage) -> Result<(), PipelineError> {
        model.save(&self.dir.join(format!("{}.ckpt", stage.name())), json!({ "stage": stage.name() }))
    }
}

fn batches<T: Copy>(items: &[T], size: usize) -> Vec<Vec<T>> {
    items.chunks(size.max(1)).map(<[T]>::to_vec).collect()
}

/// Runs stage 1 (detector frozen), stage 2 (joint) and SCST with a fresh
/// optimizer per stage. With `out`, writes `config.json`, `metrics.jsonl`,
/// `latest.ckpt`, one checkpoint per finished stage and `final.ckpt`.
/// `on_epoch` sees every logged row.
pub fn run_schedule(
    model: &mut Model,
    data: &Dataset,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<Vec<EpochRow>, PipelineError> {
    let cfg = model.config.train.clone();
    let mut output = out.map(|d| Output::create(d, model)).transpose()?;
    let mut rows = Vec::new();
    let mut finish_epoch = |model: &Model, output: &mut Option<Output>, stage: Stage, epoch: usize, loss: f64| {
        let train_cider = if cfg.log_train_cider { Some(train_cider(model, data)?) } else { None };
        let row = EpochRow { stage: stage.name().to_string(), epoch, loss, train_cider };
        if let Some(o) = output.as_mut() {
            o.epoch(model, &row)?;
        }
        on_epoch(&row);
        rows.push(row);
        Ok::<(), PipelineError>(())
    };
    let plan = [
        (Stage::XeFrozen, cfg.stage1_epochs, cfg.lr_stage1),
        (Stage::XeJoint, cfg.stage2_epochs, cfg.lr_stage2),
        (Stage::Scst, cfg.scst_epochs, cfg.lr_scst),
    ];
    for (k, (stage, epochs, lr)) in plan.into_iter().enumerate() {
        if epochs == 0 {
            continue;
        }
        model.store.unfreeze_all();
        if stage == Stage::XeFrozen {
            model.store.freeze(DETECTOR_PREFIX);
        }
        let mut adam = Adam::new(lr);
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ (0x5eed_0000 + k as u64));
        for epoch in 0..epochs {
            let loss = if stage == Stage::Scst {
                let mut order = data.objects();
                order.shuffle(&mut rng);
                let mut sum = 0.0;
                let all = batches(&order, cfg.batch_size);
                for batch in &all {
                    let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
                    sum += scst_step(model, &mut adam, data, batch, &seeds)?.loss;
                }
                sum / all.len().max(1) as f64
            } else {
                let mut order = data.samples.clone();
                order.shuffle(&mut rng);
                let mut sum = 0.0;
                let all = batches(&order, cfg.batch_size);
                for batch in &all {
                    sum += xe_step(model, &mut adam, data, batch)?;
                }
                sum / all.len().max(1) as f64
            };
            finish_epoch(model, &mut output, stage, epoch, loss)?;
        }
        if let Some(o) = &output {
            o.stage_end(model, stage)?;
        }
    }
    model.store.unfreeze_all();
    if let Some(o) = &output {
        model.save(&o.dir.join("final.ckpt"), json!({ "stage": "final" }))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::scene::generate_synthetic_scene;

    fn tiny() -> (Model, Dataset) {
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 16;
        cfg.model.heads = 2;
        cfg.model.layers = 1;
        cfg.model.expansion = 2;
        cfg.detector.encoder_expansion = 2;
        cfg.scene.num_points = 600;
        cfg.scene.objects_min = 3;
        cfg.scene.objects_max = 3;
        cfg.train.batch_size = 4;
        let scenes = vec![generate_synthetic_scene(3, &cfg.scene).unwrap()];
        let model = Model::new(&cfg, build_vocab(&scenes)).unwrap();
        let data = Dataset::build(&model, scenes).unwrap();
        (model, data)
    }

    #[test]
    fn loss_of_one_sequence_matches_hand_softmax() {
        let (model, data) = tiny();
        let s = data.samples[0];
        let (det, obj) = data.object(s.scene, s.object);
        let seq = &obj.sequences[s.caption];
        let mut tape = Tape::new(&model.store);
        let loss = xe_loss(&model, &mut tape, det, &obj.selection, seq).unwrap();
        let got = tape.value(loss).item();

        let mut tape = Tape::inference(&model.store);
        let prep = model.captioner.prepare_target(&mut tape, det, &obj.selection).unwrap();
        let logits = model.captioner.forward_teacher_forced(&mut tape, &prep, &seq[..seq.len() - 1]).unwrap();
        let v = tape.value(logits);
        let mut want = 0.0;
        for (t, &y) in seq[1..].iter().enumerate() {
            let row: Vec<f64> = v.row(t).to_vec();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            want += -(row[y] - max - z.ln());
        }
        want /= (seq.len() - 1) as f64;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn zero_lr_step_is_bitwise_noop() {
        let (mut model, data) = tiny();
        let before = model.store.clone();
        let mut adam = Adam::new(0.0);
        let batch = data.samples[..2].to_vec();
        for _ in 0..2 {
            xe_step(&mut model, &mut adam, &data, &batch).unwrap();
        }
        assert!(model.store.bit_identical(&before));
        assert!(xe_step(&mut model, &mut adam, &data, &[]).is_err());
    }

    #[test]
    fn greedy_sampling_gives_zero_scst_update() {
        let (mut model, data) = tiny();
        model.config.train.scst_temperature = 0.0;
        let before = model.store.clone();
        let mut adam = Adam::new(1e-2);
        let objs = data.objects();
        let stats = scst_step(&mut model, &mut adam, &data, &objs, &vec![7; objs.len()]).unwrap();
        assert_eq!(stats.mean_advantage, 0.0);
        assert!(!stats.stepped);
        assert!(model.store.bit_identical(&before));
    }

    #[test]
    fn positive_advantage_raises_sample_log_prob() {
        let (mut model, data) = tiny();
        model.config.train.scst_temperature = 1.0;
        let (s, o) = data.objects()[0];
        let (det, obj) = data.object(s, o);
        let refs = obj.references.clone();
        let greedy_reward = data.cider.score(&model.vocab.decode(&model.captioner.greedy_decode(&model.store, det, &obj.selection).unwrap()), &refs);
        // find a seed whose sample beats the greedy caption
        let seed = (0..500u64)
            .find(|&seed| {
                let (ids, _) = model.captioner.sample_decode(&model.store, det, &obj.selection, 1.0, seed).unwrap();
                data.cider.score(&model.vocab.decode(&ids), &refs) > greedy_reward
            })
            .expect("some sample beats greedy");
        let (ids, logps) = model.captioner.sample_decode(&model.store, det, &obj.selection, 1.0, seed).unwrap();
        let before: f64 = logps.iter().sum();
        let mut adam = Adam::new(1e-4);
        let stats = scst_step(&mut model, &mut adam, &data, &[(s, o)], &[seed]).unwrap();
        assert!(stats.mean_advantage > 0.0 && stats.stepped);

        let mut tape = Tape::inference(&model.store);
        let prep = model.captioner.prepare_target(&mut tape, det, &obj.selection).unwrap();
        let mut inputs = vec![SOS];
        inputs.extend_from_slice(&ids);
        let mut targets = ids.clone();
        targets.push(EOS);
        let n = logps.len();
        let logits = model.captioner.forward_teacher_forced(&mut tape, &prep, &inputs[..n]).unwrap();
        let nll = tape.cross_entropy(logits, &targets[..n], None, Reduction::Sum).unwrap();
        let after = -tape.value(nll).item();
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn stage_one_freezes_detector_and_stage_two_moves_it() {
        let (mut model, data) = tiny();
        model.config.train = TrainConfig {
            stage1_epochs: 1,
            stage2_epochs: 0,
            scst_epochs: 0,
            log_train_cider: false,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let init = model.store.clone();
        let rows = run_schedule(&mut model, &data, None, |_| {}).unwrap();
        assert_eq!(rows.len(), 1);
        let detector = init.subtree(DETECTOR_PREFIX);
        assert!(!detector.is_empty());
        for &id in &detector {
            assert_eq!(init.value(id), model.store.value(id));
        }
        let decoder_moved = init.ids().any(|id| !detector.contains(&id) && init.value(id) != model.store.value(id));
        assert!(decoder_moved);

        let after_stage1 = model.store.clone();
        model.config.train.stage1_epochs = 0;
        model.config.train.stage2_epochs = 1;
        run_schedule(&mut model, &data, None, |_| {}).unwrap();
        assert!(detector.iter().any(|&id| after_stage1.value(id) != model.store.value(id)));
    }

    #[test]
    fn schedule_is_deterministic_and_logs_every_epoch() {
        let run = || {
            let (mut model, data) = tiny();
            model.config.train = TrainConfig {
                stage1_epochs: 1,
                stage2_epochs: 1,
                scst_epochs: 1,
                batch_size: 4,
                ..TrainConfig::default()
            };
            let dir = tempfile::tempdir().unwrap();
            let rows = run_schedule(&mut model, &data, Some(dir.path()), |_| {}).unwrap();
            let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
            let ckpt = std::fs::read(dir.path().join("final.ckpt")).unwrap();
            (rows, log, ckpt)
        };
        let (rows, log, ckpt) = run();
        assert_eq!(rows.iter().map(|r| r.stage.as_str()).collect::<Vec<_>>(), ["xe_frozen", "xe_joint", "scst"]);
        assert!(rows.iter().all(|r| r.loss.is_finite() && r.train_cider.is_some()));
        assert_eq!(log.lines().count(), 3);
        let again = run();
        assert_eq!(log, again.1);
        assert_eq!(ckpt, again.2);
    }
}
