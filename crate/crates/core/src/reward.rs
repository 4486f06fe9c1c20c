//! The reward model: fuses visual and text cues into a semantic gaze
//! representation, scores a candidate label against it (initial
//! confidence), then combines that with the student/label cosine similarity
//! into the final confidence.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cues::{CueDims, CueProvider, PromptTemplate, TextCue, VisualCue};
use crate::data::Sample;
use crate::diff::{Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{cosine_sim, direction_unchecked, SphericalGaze};
use crate::nets::{
    prefixed, BoundParams, CrossAttention, CrossAttentionVars, GazeEstimator, LayerNorm, LayerNormVars, Linear,
    LinearVars, Mlp, MlpVars, Module, HIDDEN_WIDTH,
};

pub const MODEL_WIDTH: usize = 32;
pub const SCORER_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardDims {
    pub patches: usize,
    pub visual_width: usize,
    pub text_tokens: usize,
    pub text_width: usize,
    pub width: usize,
    pub hidden_width: usize,
    pub scorer_hidden: usize,
    /// Adds the attention input back onto both cross-attention outputs.
    pub residual: bool,
}

impl Default for RewardDims {
    fn default() -> Self {
        Self::from_cues(CueDims {
            patches: 8,
            visual_width: 16,
            text_tokens: 4,
            text_width: 16,
        })
    }
}

impl RewardDims {
    pub fn from_cues(c: CueDims) -> Self {
        Self {
            patches: c.patches,
            visual_width: c.visual_width,
            text_tokens: c.text_tokens,
            text_width: c.text_width,
            width: MODEL_WIDTH,
            hidden_width: HIDDEN_WIDTH,
            scorer_hidden: SCORER_HIDDEN,
            residual: true,
        }
    }

    pub fn cue_dims(&self) -> CueDims {
        CueDims {
            patches: self.patches,
            visual_width: self.visual_width,
            text_tokens: self.text_tokens,
            text_width: self.text_width,
        }
    }
}

/// Initial (`r̂`) and final (`r`) confidence for one candidate label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub initial: f32,
    #[serde(rename = "final")]
    pub final_score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub dims: RewardDims,
    pub visual_proj: Mlp,
    pub text_proj: Linear,
    pub cue_attn: CrossAttention,
    pub cue_norm: LayerNorm,
    pub dir_proj: Linear,
    pub label_attn: CrossAttention,
    pub conf_head: Mlp,
    pub scorer: Mlp,
}

#[derive(Debug, Clone)]
pub struct RewardVars {
    residual: bool,
    visual_proj: MlpVars,
    text_proj: LinearVars,
    cue_attn: CrossAttentionVars,
    cue_norm: LayerNormVars,
    dir_proj: LinearVars,
    label_attn: CrossAttentionVars,
    conf_head: MlpVars,
    scorer: MlpVars,
}

/// Tape outputs of one batched reward forward pass.
#[derive(Debug, Clone, Copy)]
pub struct RewardOutputs {
    pub semantic: Var,
    pub initial: Var,
    pub final_score: Var,
}

impl RewardModel {
    pub fn init(seed: u64, dims: RewardDims) -> Result<Self> {
        if dims.width < 2 || dims.hidden_width == 0 || dims.scorer_hidden == 0 {
            return Err(Error::invalid(
                "reward widths must be positive (model width at least 2)",
            ));
        }
        if dims.patches == 0 || dims.visual_width == 0 || dims.text_tokens == 0 || dims.text_width == 0 {
            return Err(Error::invalid("cue dims must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.width;
        Ok(Self {
            dims,
            visual_proj: Mlp::init(&mut rng, &[dims.visual_width, dims.hidden_width, d])?,
            text_proj: Linear::init(&mut rng, dims.text_width, d),
            cue_attn: CrossAttention::init(&mut rng, d, d, d),
            cue_norm: LayerNorm::new(d),
            dir_proj: Linear::init(&mut rng, 3, d),
            label_attn: CrossAttention::init(&mut rng, d, d, d),
            conf_head: Mlp::init(&mut rng, &[d, dims.hidden_width, 1])?,
            scorer: Mlp::init(&mut rng, &[2, dims.scorer_hidden, 1])?,
        })
    }

    /// `f̂` for one sample.
    pub fn semantic_representation(&self, visual: &VisualCue, text: &TextCue) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let v = tape.constant(&visual.tokens.reshaped(&prepend1(visual.tokens.shape()))?);
        let t = tape.constant(&text.tokens.reshaped(&prepend1(text.tokens.shape()))?);
        let f = vars.semantic(&mut tape, v, t)?;
        Ok(tape.value(f).to_vec())
    }

    /// `r̂` for one semantic representation and candidate label.
    pub fn initial_confidence(&self, semantic: &[f32], label: SphericalGaze) -> Result<f32> {
        if !label.is_finite() || semantic.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite reward input"));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let f = tape.constant_from(&[1, semantic.len()], semantic.to_vec())?;
        let dirs = directions(&mut tape, &[label])?;
        let r = vars.initial(&mut tape, f, dirs)?;
        Ok(tape.value(r)[0])
    }

    /// `r` from `r̂` and the student/label cosine similarity.
    pub fn final_confidence(&self, initial: f32, sim: f32) -> Result<f32> {
        if !(0.0..=1.0).contains(&initial) || !(-1.0..=1.0).contains(&sim) {
            return Err(Error::invalid("final_confidence inputs out of range"));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let rhat = tape.constant_from(&[1, 1], alloc::vec![initial])?;
        let s = tape.constant_from(&[1, 1], alloc::vec![sim])?;
        let r = vars.final_score(&mut tape, rhat, s)?;
        Ok(tape.value(r)[0])
    }

    /// Scores a batch from raw cue banks (`[B·(M+1)·d_v]`, `[B·n_t·d_t]`),
    /// candidate labels and precomputed similarities.
    pub fn score_batch(
        &self,
        visual: &[f32],
        text: &[f32],
        labels: &[SphericalGaze],
        sims: &[f32],
    ) -> Result<Vec<ConfidenceScore>> {
        if labels.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = vars.forward_raw(&mut tape, &self.dims, visual, text, labels, sims)?;
        Ok(collect_scores(&tape, out))
    }
}

fn prepend1(shape: &[usize]) -> Vec<usize> {
    let mut s = alloc::vec![1];
    s.extend_from_slice(shape);
    s
}

pub fn collect_scores(tape: &Tape, out: RewardOutputs) -> Vec<ConfidenceScore> {
    tape.value(out.initial)
        .iter()
        .zip(tape.value(out.final_score))
        .map(|(&initial, &final_score)| ConfidenceScore { initial, final_score })
        .collect()
}

/// `[B × 3]` constant unit direction vectors of `labels`.
pub fn directions(tape: &mut Tape, labels: &[SphericalGaze]) -> Result<Var> {
    let mut data = Vec::with_capacity(labels.len() * 3);
    for g in labels {
        if !g.is_finite() {
            return Err(Error::invalid("non-finite candidate label"));
        }
        let v = direction_unchecked(*g);
        data.extend_from_slice(&[v.x as f32, v.y as f32, v.z as f32]);
    }
    tape.constant_from(&[labels.len(), 3], data)
}

/// Cosine similarity of each student prediction with its candidate label.
pub fn label_similarities(predictions: &[SphericalGaze], labels: &[SphericalGaze]) -> Result<Vec<f32>> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "label_similarities",
            &[predictions.len()],
            &[labels.len()],
        ));
    }
    predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| cosine_sim(*p, *l).map(|s| s as f32))
        .collect()
}

impl Module for RewardModel {
    type Bound = RewardVars;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> RewardVars {
        RewardVars {
            residual: self.dims.residual,
            visual_proj: self.visual_proj.bind(tape, trainable),
            text_proj: self.text_proj.bind(tape, trainable),
            cue_attn: self.cue_attn.bind(tape, trainable),
            cue_norm: self.cue_norm.bind(tape, trainable),
            dir_proj: self.dir_proj.bind(tape, trainable),
            label_attn: self.label_attn.bind(tape, trainable),
            conf_head: self.conf_head.bind(tape, trainable),
            scorer: self.scorer.bind(tape, trainable),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.visual_proj.params();
        p.extend(self.text_proj.params());
        p.extend(self.cue_attn.params());
        p.extend(self.cue_norm.params());
        p.extend(self.dir_proj.params());
        p.extend(self.label_attn.params());
        p.extend(self.conf_head.params());
        p.extend(self.scorer.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.visual_proj.params_mut();
        p.extend(self.text_proj.params_mut());
        p.extend(self.cue_attn.params_mut());
        p.extend(self.cue_norm.params_mut());
        p.extend(self.dir_proj.params_mut());
        p.extend(self.label_attn.params_mut());
        p.extend(self.conf_head.params_mut());
        p.extend(self.scorer.params_mut());
        p
    }

    fn param_names(&self) -> Vec<String> {
        let mut n = prefixed("visual_proj", self.visual_proj.param_names());
        n.extend(prefixed("text_proj", self.text_proj.param_names()));
        n.extend(prefixed("cue_attn", self.cue_attn.param_names()));
        n.extend(prefixed("cue_norm", self.cue_norm.param_names()));
        n.extend(prefixed("dir_proj", self.dir_proj.param_names()));
        n.extend(prefixed("label_attn", self.label_attn.param_names()));
        n.extend(prefixed("conf_head", self.conf_head.param_names()));
        n.extend(prefixed("scorer", self.scorer.param_names()));
        n
    }
}

impl BoundParams for RewardVars {
    fn vars(&self) -> Vec<Var> {
        let mut v = self.visual_proj.vars();
        v.extend(self.text_proj.vars());
        v.extend(self.cue_attn.vars());
        v.extend(self.cue_norm.vars());
        v.extend(self.dir_proj.vars());
        v.extend(self.label_attn.vars());
        v.extend(self.conf_head.vars());
        v.extend(self.scorer.vars());
        v
    }
}

impl RewardVars {
    /// `visual: [B × (M+1) × d_v]`, `text: [B × n_t × d_t]` → `[B × d]`.
    pub fn semantic(&self, tape: &mut Tape, visual: Var, text: Var) -> Result<Var> {
        let (vs, ts) = (tape.shape(visual).to_vec(), tape.shape(text).to_vec());
        if vs.len() != 3 || ts.len() != 3 || vs[0] != ts[0] {
            return Err(Error::shape("semantic_representation", &vs, &ts));
        }
        let q = self.visual_proj.forward(tape, visual)?;
        let kv = self.text_proj.forward(tape, text)?;
        let mut a = self.cue_attn.forward(tape, q, kv)?;
        if self.residual {
            a = tape.add(q, a)?;
        }
        let n = self.cue_norm.forward(tape, a)?;
        tape.mean_pool(n, 1)
    }

    /// `semantic: [B × d]`, `dirs: [B × 3]` → `r̂: [B × 1]`.
    pub fn initial(&self, tape: &mut Tape, semantic: Var, dirs: Var) -> Result<Var> {
        let (fs, ds) = (tape.shape(semantic).to_vec(), tape.shape(dirs).to_vec());
        if fs.len() != 2 || ds.len() != 2 || fs[0] != ds[0] || ds[1] != 3 {
            return Err(Error::shape("initial_confidence", &fs, &ds));
        }
        let (b, d) = (fs[0], fs[1]);
        let token = self.dir_proj.forward(tape, dirs)?;
        let token = tape.reshape(token, &[b, 1, d])?;
        let query = tape.reshape(semantic, &[b, 1, d])?;
        let a = self.label_attn.forward(tape, query, token)?;
        let mut a = tape.reshape(a, &[b, d])?;
        if self.residual {
            a = tape.add(semantic, a)?;
        }
        let logit = self.conf_head.forward(tape, a)?;
        Ok(tape.sigmoid(logit))
    }

    /// `r̂: [B × 1]`, `sim: [B × 1]` → `r: [B × 1]`.
    pub fn final_score(&self, tape: &mut Tape, initial: Var, sim: Var) -> Result<Var> {
        let x = tape.concat(&[initial, sim], 1)?;
        let logit = self.scorer.forward(tape, x)?;
        Ok(tape.sigmoid(logit))
    }

    /// Full forward pass on tape-resident cue tensors.
    pub fn forward(&self, tape: &mut Tape, visual: Var, text: Var, dirs: Var, sims: Var) -> Result<RewardOutputs> {
        let semantic = self.semantic(tape, visual, text)?;
        let initial = self.initial(tape, semantic, dirs)?;
        let final_score = self.final_score(tape, initial, sims)?;
        Ok(RewardOutputs {
            semantic,
            initial,
            final_score,
        })
    }

    /// Full forward pass from raw buffers, loading them onto `tape` as constants.
    pub fn forward_raw(
        &self,
        tape: &mut Tape,
        dims: &RewardDims,
        visual: &[f32],
        text: &[f32],
        labels: &[SphericalGaze],
        sims: &[f32],
    ) -> Result<RewardOutputs> {
        let b = labels.len();
        let c = dims.cue_dims();
        if visual.len() != b * c.visual_len() || text.len() != b * c.text_len() || sims.len() != b {
            return Err(Error::shape(
                "score_samples",
                &[visual.len(), text.len(), sims.len()],
                &[b * c.visual_len(), b * c.text_len(), b],
            ));
        }
        let v = tape.constant_from(&[b, c.visual_tokens(), c.visual_width], visual.to_vec())?;
        let t = tape.constant_from(&[b, c.text_tokens, c.text_width], text.to_vec())?;
        let d = directions(tape, labels)?;
        let s = tape.constant_from(&[b, 1], sims.to_vec())?;
        self.forward(tape, v, t, d, s)
    }
}

/// BCE between scores and observability masks (1 = ground truth, 0 = pseudo).
pub fn reward_loss(tape: &mut Tape, scores: Var, masks: &[f32], reduction: Reduction) -> Result<Var> {
    if masks.iter().any(|c| *c != 0.0 && *c != 1.0) {
        return Err(Error::invalid("observability mask must be binary"));
    }
    tape.bce(scores, masks, reduction)
}

/// Scores `samples` against candidate `labels`, querying cues from
/// `provider` and predictions from `student`.
pub fn score_samples<P: CueProvider + ?Sized>(
    model: &RewardModel,
    provider: &P,
    prompt: &PromptTemplate,
    samples: &[&Sample],
    labels: &[SphericalGaze],
    student: &GazeEstimator,
) -> Result<Vec<ConfidenceScore>> {
    if samples.len() != labels.len() {
        return Err(Error::shape("score_samples", &[samples.len()], &[labels.len()]));
    }
    if provider.dims() != model.dims.cue_dims() {
        return Err(Error::invalid("cue provider dims differ from reward model dims"));
    }
    let mut visual = Vec::new();
    let mut text = Vec::new();
    let mut features = Vec::new();
    for s in samples {
        visual.extend_from_slice(provider.visual_cue(s)?.tokens.data());
        text.extend_from_slice(provider.text_cue(s, prompt)?.tokens.data());
        features.extend_from_slice(&s.features);
    }
    let preds = student.predict(&features)?;
    let sims = label_similarities(&preds, labels)?;
    model.score_batch(&visual, &text, labels, &sims)
}
