//! Caption decoder: stacked layers of global and local context modeling,
//! fused by Add&Norm and an FFN, over learned token and position embeddings.
//!
//! Token mixing happens only in the causal self-attention at the start of
//! each layer; everything else is position-wise or attends to per-target
//! constants. Incremental decoding therefore caches the projected
//! self-attention keys/values per layer and feeds one row at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    AddNorm, Attention, AutodiffError, Embedding, Ffn, Linear, Mask, Mlp, ParamStore, ProjectedKv, Tape, Tensor, Var,
};
use crate::context::{ContextError, ContextSelection};
use crate::detector::{Detection, DetectionFeatures, DetectorError, FeatureEncoder};
use crate::scalar::Scalar;
use crate::scene::{EOS, PAD, SOS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("token sequences must start with SOS")]
    MissingSos,
    #[error("unsupported ablation: {0}")]
    Ablation(String),
}

/// The four branch combinations of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// GCM over objects only.
    A,
    /// GCM over objects and superpoints.
    B,
    /// GCM and LCM, both over objects only.
    C,
    /// All four branches.
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    /// `(gcm_superpoints, lcm, lcm_superpoints)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::A => (false, false, false),
            Variant::B => (true, false, false),
            Variant::C => (false, true, false),
            Variant::D => (true, true, true),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hidden width of every MLP/FFN is `expansion * d_model`.
    pub expansion: usize,
    /// Longest token sequence including SOS and EOS.
    pub max_len: usize,
    pub k_obj: usize,
    pub k_sp: usize,
    pub gcm_superpoints: bool,
    pub lcm: bool,
    pub lcm_superpoints: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            layers: 2,
            expansion: 4,
            max_len: 32,
            k_obj: 5,
            k_sp: 10,
            gcm_superpoints: true,
            lcm: true,
            lcm_superpoints: true,
        }
    }
}

impl ModelConfig {
    pub fn variant(&self) -> Result<Variant, ModelError> {
        let flags = (self.gcm_superpoints, self.lcm, self.lcm_superpoints);
        Variant::ALL.into_iter().find(|v| v.flags() == flags).ok_or_else(|| {
            ModelError::Ablation(format!(
                "gcm_superpoints={}, lcm={}, lcm_superpoints={} is not one of variants A-D",
                flags.0, flags.1, flags.2
            ))
        })
    }

    pub fn set_variant(&mut self, v: Variant) {
        (self.gcm_superpoints, self.lcm, self.lcm_superpoints) = v.flags();
    }
}

/// Per-target inputs shared by every layer.
#[derive(Clone, Debug)]
pub struct SceneContext {
    /// `[N_OBJ, 6]` center and size of each candidate box.
    pub obj_boxes: Var,
    /// `[N_OBJ, d]` appearance features `v_i`.
    pub obj_feats: Var,
    pub obj_keep: Vec<bool>,
    /// `[N_SP, 3]` superpoint centers.
    pub sp_centers: Var,
    /// `[N_SP, d]` superpoint features `f_i`.
    pub sp_feats: Var,
    pub sp_keep: Vec<bool>,
    /// `[1, d]` appearance of the target.
    pub target: Var,
    /// `[K_obj, d]` appearance of the neighbor objects.
    pub neighbor_objs: Var,
    /// `[K_sp, d]` features of the neighbor superpoints.
    pub neighbor_sps: Var,
}

impl SceneContext {
    pub fn new<S: Scalar>(
        tape: &mut Tape<'_, S>,
        det: &Detection,
        feats: DetectionFeatures,
        sel: &ContextSelection,
    ) -> Result<Self, ModelError> {
        let boxes: Vec<f64> = det.candidates.iter().flat_map(|c| c.bbox.to_array()).collect();
        let centers: Vec<f64> = det.superpoints.iter().flat_map(|s| s.center).collect();
        let obj_boxes = tape.constant(Tensor::from_f64(vec![det.candidates.len(), 6], &boxes)?);
        let sp_centers = tape.constant(Tensor::from_f64(vec![det.superpoints.len(), 3], &centers)?);
        let target = tape.gather_rows(feats.candidates, &[sel.target])?;
        let neighbor_objs = tape.gather_rows(feats.candidates, &sel.neighbor_objects)?;
        let neighbor_sps = tape.gather_rows(feats.superpoints, &sel.neighbor_superpoints)?;
        Ok(Self {
            obj_boxes,
            obj_feats: feats.candidates,
            obj_keep: det.candidate_keep(),
            sp_centers,
            sp_feats: feats.superpoints,
            sp_keep: det.superpoint_keep(),
            target,
            neighbor_objs,
            neighbor_sps,
        })
    }
}

#[derive(Clone, Debug)]
struct GlobalContext {
    in_fc: Linear,
    self_attn: Attention,
    self_norm: AddNorm,
    obj_box_fc: Linear,
    obj_attn: Attention,
    obj_mlp: Mlp,
    superpoints: Option<(Linear, Attention, Mlp, AddNorm)>,
    out_norm: AddNorm,
    out_mlp: Mlp,
}

#[derive(Clone, Debug)]
struct LocalContext {
    token_mlp: Mlp,
    target_mlp: Mlp,
    hat_norm: AddNorm,
    obj_attn: Attention,
    obj_mlp: Mlp,
    superpoints: Option<(Attention, Mlp, AddNorm)>,
    out_norm: AddNorm,
    out_mlp: Mlp,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    gcm: GlobalContext,
    lcm: Option<LocalContext>,
    fuse_norm: AddNorm,
    ffn: Ffn,
}

/// Key/value projections of one layer's cross-attentions for one target.
#[derive(Clone, Debug)]
pub struct LayerContext {
    gcm_obj: ProjectedKv,
    gcm_obj_mask: Mask,
    gcm_sp: Option<(ProjectedKv, Mask)>,
    lcm_target: Option<Var>,
    lcm_obj: Option<ProjectedKv>,
    lcm_sp: Option<ProjectedKv>,
}

/// Everything a decode needs that does not depend on the tokens.
#[derive(Clone, Debug)]
pub struct Prepared {
    layers: Vec<LayerContext>,
}

/// Incremental decoding cache: projected self-attention keys/values per layer.
#[derive(Clone, Debug, Default)]
pub struct DecodeState {
    pub tokens: Vec<usize>,
    cache: Vec<Option<ProjectedKv>>,
}

#[derive(Clone, Debug)]
pub struct Captioner {
    cfg: ModelConfig,
    vocab_size: usize,
    encoder: FeatureEncoder,
    token_emb: Embedding,
    pos_emb: Embedding,
    layers: Vec<DecoderLayer>,
    head: Linear,
}

impl GlobalContext {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        p: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, AutodiffError> {
        let (d, h, hid) = (cfg.d_model, cfg.heads, cfg.expansion * cfg.d_model);
        let superpoints = if cfg.gcm_superpoints {
            Some((
                Linear::new(store, &format!("{p}.sp_center_fc"), 3, d, rng)?,
                Attention::new(store, &format!("{p}.sp_attn"), d, h, rng)?,
                Mlp::new(store, &format!("{p}.sp_mlp"), d, hid, d, rng)?,
                AddNorm::new(store, &format!("{p}.visual_norm"), d)?,
            ))
        } else {
            None
        };
        Ok(Self {
            in_fc: Linear::new(store, &format!("{p}.in_fc"), d, d, rng)?,
            self_attn: Attention::new(store, &format!("{p}.self_attn"), d, h, rng)?,
            self_norm: AddNorm::new(store, &format!("{p}.self_norm"), d)?,
            obj_box_fc: Linear::new(store, &format!("{p}.obj_box_fc"), 6, d, rng)?,
            obj_attn: Attention::new(store, &format!("{p}.obj_attn"), d, h, rng)?,
            obj_mlp: Mlp::new(store, &format!("{p}.obj_mlp"), d, hid, d, rng)?,
            superpoints,
            out_norm: AddNorm::new(store, &format!("{p}.out_norm"), d)?,
            out_mlp: Mlp::new(store, &format!("{p}.out_mlp"), d, hid, d, rng)?,
        })
    }

    /// `h̄` from the projected rows `h'` and the self-attention keys/values.
    fn h_bar<S: Scalar>(&self, tape: &mut Tape<'_, S>, h: Var, kv: ProjectedKv, mask: &Mask) -> Result<Var, ModelError> {
        let mixed = self.self_attn.attend(tape, h, kv, mask)?;
        Ok(self.self_norm.forward(tape, h, mixed)?)
    }

    fn global<S: Scalar>(&self, tape: &mut Tape<'_, S>, h_bar: Var, lc: &LayerContext) -> Result<Var, ModelError> {
        let obj = self.obj_attn.attend(tape, h_bar, lc.gcm_obj, &lc.gcm_obj_mask)?;
        let enhanced_obj = self.obj_mlp.forward(tape, obj)?;
        let fused = match (&self.superpoints, &lc.gcm_sp) {
            (Some((_, attn, mlp, norm)), Some((kv, mask))) => {
                let sp = attn.attend(tape, h_bar, *kv, mask)?;
                let enhanced_sp = mlp.forward(tape, sp)?;
                norm.forward(tape, enhanced_obj, enhanced_sp)?
            }
            _ => enhanced_obj,
        };
        let pre = self.out_norm.forward(tape, h_bar, fused)?;
        Ok(self.out_mlp.forward(tape, pre)?)
    }
}

impl LocalContext {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        p: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, AutodiffError> {
        let (d, h, hid) = (cfg.d_model, cfg.heads, cfg.expansion * cfg.d_model);
        let superpoints = if cfg.lcm_superpoints {
            Some((
                Attention::new(store, &format!("{p}.sp_attn"), d, h, rng)?,
                Mlp::new(store, &format!("{p}.sp_mlp"), d, hid, d, rng)?,
                AddNorm::new(store, &format!("{p}.visual_norm"), d)?,
            ))
        } else {
            None
        };
        Ok(Self {
            token_mlp: Mlp::new(store, &format!("{p}.token_mlp"), d, hid, d, rng)?,
            target_mlp: Mlp::new(store, &format!("{p}.target_mlp"), d, hid, d, rng)?,
            hat_norm: AddNorm::new(store, &format!("{p}.hat_norm"), d)?,
            obj_attn: Attention::new(store, &format!("{p}.obj_attn"), d, h, rng)?,
            obj_mlp: Mlp::new(store, &format!("{p}.obj_mlp"), d, hid, d, rng)?,
            superpoints,
            out_norm: AddNorm::new(store, &format!("{p}.out_norm"), d)?,
            out_mlp: Mlp::new(store, &format!("{p}.out_mlp"), d, hid, d, rng)?,
        })
    }

    fn local<S: Scalar>(&self, tape: &mut Tape<'_, S>, h_bar: Var, lc: &LayerContext) -> Result<Var, ModelError> {
        let rows = tape.shape(h_bar)[0];
        let tokens = self.token_mlp.forward(tape, h_bar)?;
        let target = tape.repeat_rows(lc.lcm_target.expect("prepared with LCM"), rows)?;
        let h_hat = self.hat_norm.forward(tape, tokens, target)?;
        let obj = self.obj_attn.attend(tape, h_hat, lc.lcm_obj.expect("prepared with LCM"), &Mask::Full)?;
        let to_obj = self.obj_mlp.forward(tape, obj)?;
        let visual = match (&self.superpoints, lc.lcm_sp) {
            (Some((attn, mlp, norm)), Some(kv)) => {
                let sp = attn.attend(tape, h_hat, kv, &Mask::Full)?;
                let to_sp = mlp.forward(tape, sp)?;
                norm.forward(tape, to_obj, to_sp)?
            }
            _ => to_obj,
        };
        let pre = self.out_norm.forward(tape, h_hat, visual)?;
        Ok(self.out_mlp.forward(tape, pre)?)
    }
}

impl Captioner {
    /// Builds the model and registers its parameters. Ablated branches
    /// register nothing.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &ModelConfig,
        encoder_expansion: usize,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        cfg.variant()?;
        let d = cfg.d_model;
        let encoder = FeatureEncoder::new(store, d, encoder_expansion, rng)?;
        let token_emb = Embedding::new(store, "embed.tokens", vocab_size, d, rng)?;
        let pos_emb = Embedding::new(store, "embed.positions", cfg.max_len, d, rng)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("layer{l}");
            layers.push(DecoderLayer {
                gcm: GlobalContext::new(store, &format!("{p}.gcm"), cfg, rng)?,
                lcm: if cfg.lcm { Some(LocalContext::new(store, &format!("{p}.lcm"), cfg, rng)?) } else { None },
                fuse_norm: AddNorm::new(store, &format!("{p}.fuse.norm"), d)?,
                ffn: Mlp::new(store, &format!("{p}.fuse.ffn"), d, cfg.expansion * d, d, rng)?,
            });
        }
        let head = Linear::new(store, "head", d, vocab_size, rng)?;
        Ok(Self { cfg: cfg.clone(), vocab_size, encoder, token_emb, pos_emb, layers, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn encode<S: Scalar>(&self, tape: &mut Tape<'_, S>, det: &Detection) -> Result<DetectionFeatures, ModelError> {
        Ok(self.encoder.encode(tape, det)?)
    }

    /// Projects the cross-attention keys/values of every layer once.
    pub fn prepare<S: Scalar>(&self, tape: &mut Tape<'_, S>, sc: &SceneContext) -> Result<Prepared, ModelError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let g = &layer.gcm;
            let box_emb = g.obj_box_fc.forward(tape, sc.obj_boxes)?;
            let obj_keys = tape.add(box_emb, sc.obj_feats)?;
            let gcm_obj = g.obj_attn.project_kv(tape, obj_keys, sc.obj_feats)?;
            let gcm_sp = match &g.superpoints {
                Some((center_fc, attn, _, _)) => {
                    let center_emb = center_fc.forward(tape, sc.sp_centers)?;
                    let keys = tape.add(center_emb, sc.sp_feats)?;
                    Some((attn.project_kv(tape, keys, sc.sp_feats)?, mask_keys(&sc.sp_keep)))
                }
                None => None,
            };
            let (lcm_target, lcm_obj, lcm_sp) = match &layer.lcm {
                Some(l) => {
                    let target = l.target_mlp.forward(tape, sc.target)?;
                    let obj = l.obj_attn.project_kv(tape, sc.neighbor_objs, sc.neighbor_objs)?;
                    let sp = match &l.superpoints {
                        Some((attn, _, _)) => Some(attn.project_kv(tape, sc.neighbor_sps, sc.neighbor_sps)?),
                        None => None,
                    };
                    (Some(target), Some(obj), sp)
                }
                None => (None, None, None),
            };
            layers.push(LayerContext {
                gcm_obj,
                gcm_obj_mask: mask_keys(&sc.obj_keep),
                gcm_sp,
                lcm_target,
                lcm_obj,
                lcm_sp,
            });
        }
        Ok(Prepared { layers })
    }

    /// Encodes the detection, gathers the target's context and prepares it.
    pub fn prepare_target<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        det: &Detection,
        sel: &ContextSelection,
    ) -> Result<Prepared, ModelError> {
        let feats = self.encode(tape, det)?;
        let sc = SceneContext::new(tape, det, feats, sel)?;
        self.prepare(tape, &sc)
    }

    /// Global representation and `h̄` of layer `layer` for full rows `h_prev`
    /// under the causal mask.
    pub fn gcm_forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        layer: usize,
        h_prev: Var,
        prep: &Prepared,
    ) -> Result<(Var, Var), ModelError> {
        let g = &self.layers[layer].gcm;
        let h = g.in_fc.forward(tape, h_prev)?;
        let kv = g.self_attn.project_kv(tape, h, h)?;
        let h_bar = g.h_bar(tape, h, kv, &Mask::Causal)?;
        let global = g.global(tape, h_bar, &prep.layers[layer])?;
        Ok((global, h_bar))
    }

    /// Local representation of layer `layer` from `h̄`; `None` when the LCM
    /// is ablated.
    pub fn lcm_forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        layer: usize,
        h_bar: Var,
        prep: &Prepared,
    ) -> Result<Option<Var>, ModelError> {
        match &self.layers[layer].lcm {
            Some(l) => Ok(Some(l.local(tape, h_bar, &prep.layers[layer])?)),
            None => Ok(None),
        }
    }

    fn fuse<S: Scalar>(&self, tape: &mut Tape<'_, S>, layer: usize, global: Var, local: Option<Var>) -> Result<Var, ModelError> {
        let l = &self.layers[layer];
        let pre = l.fuse_norm.forward(tape, global, local.unwrap_or(global))?;
        // residual around the FFN; without it the stack of bare MLPs trains
        // far too slowly to memorize a small set
        let f = l.ffn.forward(tape, pre)?;
        Ok(tape.add(pre, f)?)
    }

    /// `h_ℓ` from `h_{ℓ-1}` for full rows.
    pub fn layer_forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        layer: usize,
        h_prev: Var,
        prep: &Prepared,
    ) -> Result<Var, ModelError> {
        let (global, h_bar) = self.gcm_forward(tape, layer, h_prev, prep)?;
        let local = self.lcm_forward(tape, layer, h_bar, prep)?;
        self.fuse(tape, layer, global, local)
    }

    fn embed<S: Scalar>(&self, tape: &mut Tape<'_, S>, tokens: &[usize], first_pos: usize) -> Result<Var, ModelError> {
        let tok = self.token_emb.lookup(tape, tokens)?;
        let positions: Vec<usize> = (first_pos..first_pos + tokens.len()).collect();
        let pos = self.pos_emb.lookup(tape, &positions)?;
        Ok(tape.add(tok, pos)?)
    }

    /// Logits `[T, V]`; row `t` predicts token `t + 1`.
    pub fn forward_teacher_forced<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        prep: &Prepared,
        tokens: &[usize],
    ) -> Result<Var, ModelError> {
        if tokens.len() > self.cfg.max_len {
            return Err(ModelError::TooLong { len: tokens.len(), max: self.cfg.max_len });
        }
        if tokens.first() != Some(&SOS) {
            return Err(ModelError::MissingSos);
        }
        let mut h = self.embed(tape, tokens, 0)?;
        for l in 0..self.layers.len() {
            h = self.layer_forward(tape, l, h, prep)?;
        }
        Ok(self.head.forward(tape, h)?)
    }

    /// Feeds one token and returns the `[1, V]` logits for the next one.
    pub fn step<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        prep: &Prepared,
        state: &mut DecodeState,
        token: usize,
    ) -> Result<Var, ModelError> {
        let pos = state.tokens.len();
        if pos >= self.cfg.max_len {
            return Err(ModelError::TooLong { len: pos + 1, max: self.cfg.max_len });
        }
        if pos == 0 && token != SOS {
            return Err(ModelError::MissingSos);
        }
        state.cache.resize(self.layers.len(), None);
        let mut h = self.embed(tape, &[token], pos)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let g = &layer.gcm;
            let row = g.in_fc.forward(tape, h)?;
            let fresh = g.self_attn.project_kv(tape, row, row)?;
            let kv = match state.cache[l] {
                Some(old) => ProjectedKv {
                    keys: tape.concat_rows(&[old.keys, fresh.keys])?,
                    values: tape.concat_rows(&[old.values, fresh.values])?,
                },
                None => fresh,
            };
            state.cache[l] = Some(kv);
            let h_bar = g.h_bar(tape, row, kv, &Mask::Full)?;
            let global = g.global(tape, h_bar, &prep.layers[l])?;
            let local = self.lcm_forward(tape, l, h_bar, prep)?;
            h = self.fuse(tape, l, global, local)?;
        }
        state.tokens.push(token);
        Ok(self.head.forward(tape, h)?)
    }

    /// Argmax decoding from SOS until EOS or `max_len` total tokens. Returns
    /// the generated ids without SOS and EOS.
    pub fn greedy_decode<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        det: &Detection,
        sel: &ContextSelection,
    ) -> Result<Vec<usize>, ModelError> {
        Ok(self.sample_decode(store, det, sel, 0.0, 0)?.0)
    }

    /// Multinomial decoding at `temperature` with a seeded RNG; temperatures
    /// at or below 1e-6 decode greedily. Also returns the model's log-prob
    /// (temperature 1) of every emitted token, EOS included.
    pub fn sample_decode<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        det: &Detection,
        sel: &ContextSelection,
        temperature: f64,
        seed: u64,
    ) -> Result<(Vec<usize>, Vec<f64>), ModelError> {
        let mut tape = Tape::inference(store);
        let prep = self.prepare_target(&mut tape, det, sel)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = DecodeState::default();
        let (mut out, mut logps) = (Vec::new(), Vec::new());
        let mut token = SOS;
        while state.tokens.len() < self.cfg.max_len - 1 {
            let logits = self.step(&mut tape, &prep, &mut state, token)?;
            let row: Vec<f64> = tape.value(logits).data().iter().map(|v| v.as_f64()).collect();
            token = choose(&row, temperature, &mut rng);
            logps.push(log_softmax_at(&row, token));
            if token == EOS {
                break;
            }
            out.push(token);
        }
        Ok((out, logps))
    }
}

fn mask_keys(keep: &[bool]) -> Mask {
    if keep.iter().all(|&k| k) {
        Mask::Full
    } else {
        Mask::Keys(keep.to_vec())
    }
}

/// Ids the decoder may emit: everything except PAD and SOS.
fn emittable(id: usize) -> bool {
    id != PAD && id != SOS
}

fn choose(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let allowed = (0..logits.len()).filter(|&i| emittable(i));
    if temperature <= 1e-6 {
        // strict comparison keeps the lowest id on ties
        let mut best = usize::MAX;
        for i in allowed {
            if best == usize::MAX || logits[i] > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let ids: Vec<usize> = allowed.collect();
    let max = ids.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = ids.iter().map(|&i| ((logits[i] - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return ids[k];
        }
        u -= w;
    }
    *ids.last().expect("vocabulary has emittable ids")
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[i] - lse
}
