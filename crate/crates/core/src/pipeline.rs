//! Teacher training, pseudo-labeling, and joint student/reward self-training
//! with confidence filtering, reweighting and periodic teacher refresh.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cues::CueBank;
use crate::data::{corrupt_labels, hex, shuffled_batches, BalancedBatches, Dataset, PairedBatch};
use crate::diff::{Adam, Reduction, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{gaze_error_deg, SphericalGaze};
use crate::nets::{
    accumulate_grads, copy_params, param_hash, zero_grads, BoundParams, EstimatorDims, GazeEstimator, Module,
};
use crate::reward::{collect_scores, label_similarities, reward_loss, ConfidenceScore, RewardDims, RewardModel};

pub use crate::data::PseudoLabelSet;

/// Which reward output gates the unsupervised loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// Initial confidence from cues and label only.
    Initial,
    /// Final confidence including student/label similarity.
    #[default]
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Selection {
    /// Drop pseudo-labels scoring below the threshold.
    pub filter: bool,
    /// Weight the remaining pseudo-labels by their score.
    pub reweight: bool,
}

impl Default for Selection {
    fn default() -> Self {
        Self {
            filter: true,
            reweight: true,
        }
    }
}

/// Optional synthetic corruption of every pseudo-label generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoCorruption {
    pub fraction: f32,
    pub magnitude_deg: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub tau: f32,
    /// Epochs between teacher refreshes; `None` keeps the first teacher.
    pub refresh_interval: Option<u32>,
    pub teacher_epochs: u32,
    pub ssl_epochs: u32,
    pub lr_teacher: f32,
    pub lr_student: f32,
    pub lr_reward: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub unsup_reduction: Reduction,
    pub reward_reduction: Reduction,
    /// Weights of the supervised and unsupervised terms.
    pub objective_weights: (f32, f32),
    pub selection: Selection,
    pub score: ScoreKind,
    pub residual: bool,
    pub pseudo_corruption: Option<PseudoCorruption>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            refresh_interval: Some(10),
            teacher_epochs: 30,
            ssl_epochs: 30,
            lr_teacher: 0.005,
            lr_student: 0.001,
            lr_reward: 0.0001,
            weight_decay: 0.05,
            batch_size: 64,
            seed: 0,
            unsup_reduction: Reduction::Mean,
            reward_reduction: Reduction::Mean,
            objective_weights: (0.5, 0.5),
            selection: Selection::default(),
            score: ScoreKind::Final,
            residual: true,
            pseudo_corruption: None,
        }
    }
}

impl TrainConfig {
    /// Checks every invariant, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::InvalidArgument(alloc::format!("{key}: {why}")));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau", "must lie in [0, 1]");
        }
        if self.refresh_interval == Some(0) {
            return bad("refresh_interval", "must be at least 1 (or null for no refresh)");
        }
        if self.teacher_epochs == 0 {
            return bad("teacher_epochs", "must be positive");
        }
        if self.ssl_epochs == 0 {
            return bad("ssl_epochs", "must be positive");
        }
        for (key, v) in [
            ("lr_teacher", self.lr_teacher),
            ("lr_student", self.lr_student),
            ("lr_reward", self.lr_reward),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(key, "must be positive");
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        let (a, b) = self.objective_weights;
        if !(a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0) {
            return bad("objective_weights", "must be finite and non-negative");
        }
        if let Some(c) = self.pseudo_corruption {
            if !(0.0..=1.0).contains(&c.fraction) || !(0.0..=180.0).contains(&c.magnitude_deg) {
                return bad("pseudo_corruption", "fraction in [0, 1], magnitude_deg in [0, 180]");
            }
        }
        Ok(())
    }

    /// Hex digest of the configuration.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(alloc::format!("{self:?}").as_bytes());
        hex(&h.finalize()[..8])
    }
}

/// Independent seed for a named consumer of the run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Teacher,
    Ssl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: u32,
    pub supervised_loss: f32,
    pub unsupervised_loss: Option<f32>,
    pub reward_loss: Option<f32>,
    pub retained_fraction: Option<f32>,
    /// Mean angular error on the labeled training set.
    pub train_error_deg: f64,
    /// Mean angular error on the validation set, when one is supplied.
    pub val_error_deg: Option<f64>,
    pub teacher_refreshed: Option<bool>,
    pub teacher_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

// ---- losses -----------------------------------------------------------------

fn label_constant(tape: &mut Tape, labels: &[SphericalGaze]) -> Result<Var> {
    let data = labels.iter().flat_map(|g| [g.yaw, g.pitch]).collect();
    tape.constant_from(&[labels.len(), 2], data)
}

/// Mean L2 norm of the (yaw, pitch) residuals; `predictions` is `[B × 2]`.
pub fn supervised_loss(tape: &mut Tape, predictions: Var, labels: &[SphericalGaze]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::invalid("supervised_loss on an empty batch"));
    }
    if tape.shape(predictions) != [labels.len(), 2] {
        return Err(Error::shape(
            "supervised_loss",
            tape.shape(predictions),
            &[labels.len(), 2],
        ));
    }
    let y = label_constant(tape, labels)?;
    let r = tape.sub(predictions, y)?;
    let n = tape.l2_norm_rowwise(r);
    Ok(tape.mean(n))
}

/// Per-sample weight of a pseudo-label with score `r`.
pub fn selection_weight(r: f32, cfg: &TrainConfig) -> f32 {
    if cfg.selection.filter && r < cfg.tau {
        return 0.0;
    }
    if cfg.selection.reweight {
        r
    } else {
        1.0
    }
}

/// Score-gated residual norms; scores enter as constants. Mean reduction
/// divides by the full batch size.
pub fn unsupervised_loss(
    tape: &mut Tape,
    predictions: Var,
    pseudo: &[SphericalGaze],
    scores: &[f32],
    cfg: &TrainConfig,
) -> Result<Var> {
    if pseudo.len() != scores.len() || tape.shape(predictions) != [pseudo.len(), 2] {
        return Err(Error::shape(
            "unsupervised_loss",
            tape.shape(predictions),
            &[pseudo.len(), scores.len()],
        ));
    }
    if pseudo.is_empty() {
        return Err(Error::invalid("unsupervised_loss on an empty batch"));
    }
    let y = label_constant(tape, pseudo)?;
    let r = tape.sub(predictions, y)?;
    let n = tape.l2_norm_rowwise(r);
    let w = tape.constant_from(
        &[scores.len()],
        scores.iter().map(|s| selection_weight(*s, cfg)).collect(),
    )?;
    let weighted = tape.mul(n, w)?;
    let total = tape.sum(weighted);
    Ok(match cfg.unsup_reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.scale(total, 1.0 / scores.len() as f32),
    })
}

pub fn total_objective(tape: &mut Tape, supervised: Var, unsupervised: Var, weights: (f32, f32)) -> Result<Var> {
    let a = tape.scale(supervised, weights.0);
    let b = tape.scale(unsupervised, weights.1);
    tape.add(a, b)
}

// ---- teacher ----------------------------------------------------------------

pub fn mean_angular_error(model: &GazeEstimator, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("mean_angular_error on an empty dataset"));
    }
    let preds = model.predict(&ds.feature_matrix())?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(ds.samples()) {
        let y = s
            .label
            .ok_or_else(|| Error::invalid(alloc::format!("sample {} has no label", s.id)))?;
        total += gaze_error_deg(*p, y)?;
    }
    Ok(total / ds.len() as f64)
}

fn labels_of(ds: &Dataset) -> Result<Vec<SphericalGaze>> {
    ds.samples()
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::invalid(alloc::format!("sample {} has no label", s.id)))
        })
        .collect()
}

fn diverged(phase: &'static str, epoch: u32, e: Error) -> Error {
    match e {
        Error::Diverged { .. } => e,
        other => Error::Diverged {
            phase,
            epoch,
            detail: alloc::format!("{other}"),
        },
    }
}

/// Supervised training of a freshly initialized estimator on `labeled`.
pub fn train_teacher(labeled: &Dataset, cfg: &TrainConfig) -> Result<(GazeEstimator, TrainHistory)> {
    if labeled.is_empty() {
        return Err(Error::invalid("train_teacher needs labeled samples"));
    }
    let labels = labels_of(labeled)?;
    let mut model = GazeEstimator::init(
        derive_seed(cfg.seed, "teacher-init"),
        EstimatorDims::new(labeled.feature_width),
    )?;
    let mut opt = Adam::new(cfg.lr_teacher, cfg.weight_decay);
    let mut history = TrainHistory::default();
    let batch_seed = derive_seed(cfg.seed, "teacher-batches");
    for epoch in 1..=cfg.teacher_epochs {
        let mut loss_sum = 0.0f64;
        let batches = shuffled_batches(labeled.len(), cfg.batch_size, batch_seed, epoch)?;
        for idx in &batches {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let x = tape.constant_from(&[idx.len(), labeled.feature_width], labeled.gather_features(idx))?;
            let pred = vars.forward(&mut tape, x)?;
            let y: Vec<SphericalGaze> = idx.iter().map(|&i| labels[i]).collect();
            let loss = supervised_loss(&mut tape, pred, &y)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    phase: "teacher",
                    epoch,
                    detail: alloc::format!("supervised loss {value}"),
                });
            }
            let grads = tape.backward(loss).map_err(|e| diverged("teacher", epoch, e))?;
            zero_grads(&mut model);
            accumulate_grads(&mut model, &vars, &grads)?;
            opt.step(&mut model.params_mut())?;
            loss_sum += value as f64;
        }
        history.records.push(EpochRecord {
            phase: Phase::Teacher,
            epoch,
            supervised_loss: (loss_sum / batches.len() as f64) as f32,
            unsupervised_loss: None,
            reward_loss: None,
            retained_fraction: None,
            train_error_deg: mean_angular_error(&model, labeled)?,
            val_error_deg: None,
            teacher_refreshed: None,
            teacher_hash: None,
        });
    }
    Ok((model, history))
}

/// Teacher predictions for every unlabeled sample, in dataset order.
pub fn generate_pseudo_labels(model: &GazeEstimator, unlabeled: &Dataset, epoch: u32) -> Result<PseudoLabelSet> {
    if unlabeled.is_empty() {
        return Err(Error::invalid("generate_pseudo_labels needs unlabeled samples"));
    }
    let labels = model.predict(&unlabeled.feature_matrix())?;
    PseudoLabelSet::new(unlabeled.ids().map(String::from).collect(), labels, epoch)
}

/// Copies the student into the teacher when `epoch` is a multiple of the
/// refresh interval. Returns whether a refresh happened.
pub fn refresh_teacher(
    teacher: &mut GazeEstimator,
    student: &GazeEstimator,
    epoch: u32,
    interval: Option<u32>,
) -> Result<bool> {
    if epoch == 0 {
        return Err(Error::invalid("refresh_teacher epochs start at 1"));
    }
    match interval {
        Some(k) if k > 0 && epoch.is_multiple_of(k) => {
            copy_params(teacher, student)?;
            Ok(true)
        }
        _ => Ok(false),
    }
}

// ---- self-training ----------------------------------------------------------

/// Data needed by the self-training phase.
#[derive(Debug, Clone, Copy)]
pub struct SslData<'a> {
    pub labeled: &'a Dataset,
    pub unlabeled: &'a Dataset,
    pub labeled_cues: &'a CueBank,
    pub unlabeled_cues: &'a CueBank,
    /// Optional labeled set tracked per epoch; never used for updates.
    pub validation: Option<&'a Dataset>,
}

impl SslData<'_> {
    fn check(&self) -> Result<()> {
        if self.labeled.is_empty() || self.unlabeled.is_empty() {
            return Err(Error::invalid("self-training needs labeled and unlabeled samples"));
        }
        if self.labeled_cues.len() != self.labeled.len() || self.unlabeled_cues.len() != self.unlabeled.len() {
            return Err(Error::invalid("cue banks must align with their datasets"));
        }
        if self.labeled.feature_width != self.unlabeled.feature_width {
            return Err(Error::shape(
                "self_training",
                &[self.labeled.feature_width],
                &[self.unlabeled.feature_width],
            ));
        }
        Ok(())
    }
}

/// Models and optimizer state of the self-training phase.
#[derive(Debug, Clone)]
pub struct SslState {
    pub teacher: GazeEstimator,
    pub student: GazeEstimator,
    pub reward: RewardModel,
    pub student_opt: Adam,
    pub reward_opt: Adam,
}

impl SslState {
    /// Student starts as a copy of the teacher; reward model is fresh.
    pub fn new(teacher: GazeEstimator, reward_dims: RewardDims, cfg: &TrainConfig) -> Result<Self> {
        let reward = RewardModel::init(
            derive_seed(cfg.seed, "reward-init"),
            RewardDims {
                residual: cfg.residual,
                ..reward_dims
            },
        )?;
        Ok(Self {
            student: teacher.clone(),
            teacher,
            reward,
            student_opt: Adam::new(cfg.lr_student, cfg.weight_decay),
            reward_opt: Adam::new(cfg.lr_reward, cfg.weight_decay),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub supervised_loss: f32,
    pub unsupervised_loss: f32,
    pub reward_loss: f32,
    pub total: f32,
    pub retained: usize,
    pub unlabeled: usize,
}

fn gradient_leak(vars: &[Var], grads: &crate::diff::Gradients) -> bool {
    vars.iter()
        .any(|v| grads.get(*v).is_some_and(|g| g.iter().any(|x| *x != 0.0)))
}

fn gate_scores(scores: &[ConfidenceScore], kind: ScoreKind) -> Vec<f32> {
    scores
        .iter()
        .map(|s| match kind {
            ScoreKind::Initial => s.initial,
            ScoreKind::Final => s.final_score,
        })
        .collect()
}

/// One reward update followed by one student update.
pub fn ssl_step(
    state: &mut SslState,
    data: &SslData<'_>,
    labeled_gaze: &[SphericalGaze],
    pseudo: &PseudoLabelSet,
    batch: &PairedBatch,
    cfg: &TrainConfig,
    epoch: u32,
) -> Result<StepRecord> {
    let fw = data.labeled.feature_width;
    let (nl, nu) = (batch.labeled.len(), batch.unlabeled.len());
    let xl = data.labeled.gather_features(&batch.labeled);
    let xu = data.unlabeled.gather_features(&batch.unlabeled);
    let yl: Vec<SphericalGaze> = batch.labeled.iter().map(|&i| labeled_gaze[i]).collect();
    let yu: Vec<SphericalGaze> = batch.unlabeled.iter().map(|&i| pseudo.label_at(i)).collect();
    let (vl, tl) = data.labeled_cues.gather(&batch.labeled);
    let (vu, tu) = data.unlabeled_cues.gather(&batch.unlabeled);
    let div = |e: Error| diverged("ssl", epoch, e);

    // reward update on labeled (c = 1) ∪ pseudo-labeled (c = 0)
    let reward_loss_value = {
        let mut tape = Tape::new();
        let sv = state.student.bind(&mut tape, true);
        let rv = state.reward.bind(&mut tape, true);
        let x = tape.constant_from(&[nl + nu, fw], [xl.as_slice(), xu.as_slice()].concat())?;
        let pred = sv.forward(&mut tape, x)?;
        let pred = tape.detach(pred);
        let preds: Vec<SphericalGaze> = tape
            .value(pred)
            .chunks_exact(2)
            .map(|p| SphericalGaze::new(p[0], p[1]))
            .collect();
        let labels: Vec<SphericalGaze> = yl.iter().chain(&yu).copied().collect();
        let sims = label_similarities(&preds, &labels)?;
        let visual = [vl.as_slice(), vu.as_slice()].concat();
        let text = [tl.as_slice(), tu.as_slice()].concat();
        let out = rv.forward_raw(&mut tape, &state.reward.dims, &visual, &text, &labels, &sims)?;
        let masks: Vec<f32> = (0..nl + nu).map(|k| if k < nl { 1.0 } else { 0.0 }).collect();
        let loss = reward_loss(&mut tape, out.final_score, &masks, cfg.reward_reduction)?;
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss).map_err(div)?;
        if gradient_leak(&sv.vars(), &grads) {
            return Err(Error::Validation("reward loss leaked gradient into the student".into()));
        }
        zero_grads(&mut state.reward);
        accumulate_grads(&mut state.reward, &rv, &grads)?;
        state.reward_opt.step(&mut state.reward.params_mut())?;
        value
    };

    // student update on fresh scores
    let mut tape = Tape::new();
    let sv = state.student.bind(&mut tape, true);
    let rv = state.reward.bind(&mut tape, true);
    let x_l = tape.constant_from(&[nl, fw], xl)?;
    let x_u = tape.constant_from(&[nu, fw], xu)?;
    let pred_l = sv.forward(&mut tape, x_l)?;
    let pred_u = sv.forward(&mut tape, x_u)?;
    let frozen = tape.detach(pred_u);
    let preds_u: Vec<SphericalGaze> = tape
        .value(frozen)
        .chunks_exact(2)
        .map(|p| SphericalGaze::new(p[0], p[1]))
        .collect();
    let sims = label_similarities(&preds_u, &yu)?;
    let out = rv.forward_raw(&mut tape, &state.reward.dims, &vu, &tu, &yu, &sims)?;
    let scores = gate_scores(&collect_scores(&tape, out), cfg.score);
    let ls = supervised_loss(&mut tape, pred_l, &yl)?;
    let lu = unsupervised_loss(&mut tape, pred_u, &yu, &scores, cfg)?;
    let total = total_objective(&mut tape, ls, lu, cfg.objective_weights)?;
    let grads = tape.backward(total).map_err(div)?;
    if gradient_leak(&rv.vars(), &grads) {
        return Err(Error::Validation(
            "student loss leaked gradient into the reward model".into(),
        ));
    }
    zero_grads(&mut state.student);
    accumulate_grads(&mut state.student, &sv, &grads)?;
    state.student_opt.step(&mut state.student.params_mut())?;
    Ok(StepRecord {
        supervised_loss: tape.value(ls)[0],
        unsupervised_loss: tape.value(lu)[0],
        reward_loss: reward_loss_value,
        total: tape.value(total)[0],
        retained: scores.iter().filter(|s| selection_weight(**s, cfg) > 0.0).count(),
        unlabeled: nu,
    })
}

/// Receives models at phase boundaries and refreshes.
pub trait TrainObserver {
    fn on_teacher_trained(&mut self, _teacher: &GazeEstimator) -> Result<()> {
        Ok(())
    }
    fn on_refresh(&mut self, _epoch: u32, _teacher: &GazeEstimator, _pseudo: &PseudoLabelSet) -> Result<()> {
        Ok(())
    }
    fn on_ssl_finished(&mut self, _state: &SslState) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Result of a full self-training run.
#[derive(Debug, Clone)]
pub struct SelfTrainingOutput {
    pub state: SslState,
    pub history: TrainHistory,
    /// Pseudo-labels in use at the end of training.
    pub pseudo: PseudoLabelSet,
    /// Corruption mask of `pseudo` when corruption is configured.
    pub corruption_mask: Option<Vec<bool>>,
}

fn make_pseudo(
    teacher: &GazeEstimator,
    unlabeled: &Dataset,
    epoch: u32,
    cfg: &TrainConfig,
) -> Result<(PseudoLabelSet, Option<Vec<bool>>)> {
    let pseudo = generate_pseudo_labels(teacher, unlabeled, epoch)?;
    match cfg.pseudo_corruption {
        Some(c) => {
            let (p, mask) = corrupt_labels(
                &pseudo,
                c.fraction,
                c.magnitude_deg,
                derive_seed(cfg.seed, "corruption"),
            )?;
            Ok((p, Some(mask)))
        }
        None => Ok((pseudo, None)),
    }
}

/// Phase iii starting from a trained teacher. `teacher_history` is
/// prepended to the returned history.
pub fn self_train(
    teacher: GazeEstimator,
    teacher_history: TrainHistory,
    data: &SslData<'_>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<SelfTrainingOutput> {
    data.check()?;
    let labeled_gaze = labels_of(data.labeled)?;
    let reward_dims = RewardDims::from_cues(data.labeled_cues.dims());
    let mut state = SslState::new(teacher, reward_dims, cfg)?;
    let (mut pseudo, mut mask) = make_pseudo(&state.teacher, data.unlabeled, 0, cfg)?;
    let mut history = teacher_history;
    let batch_seed = derive_seed(cfg.seed, "ssl-batches");
    for epoch in 1..=cfg.ssl_epochs {
        let batches = BalancedBatches::new(
            data.labeled.len(),
            data.unlabeled.len(),
            cfg.batch_size,
            batch_seed,
            epoch,
        )?;
        let steps = batches.steps();
        let (mut ls, mut lu, mut lg) = (0.0f64, 0.0f64, 0.0f64);
        let (mut retained, mut seen) = (0usize, 0usize);
        for batch in batches {
            let rec = ssl_step(&mut state, data, &labeled_gaze, &pseudo, &batch, cfg, epoch)?;
            for v in [rec.supervised_loss, rec.unsupervised_loss, rec.reward_loss] {
                if !v.is_finite() {
                    return Err(Error::Diverged {
                        phase: "ssl",
                        epoch,
                        detail: alloc::format!("non-finite loss {v}"),
                    });
                }
            }
            ls += rec.supervised_loss as f64;
            lu += rec.unsupervised_loss as f64;
            lg += rec.reward_loss as f64;
            retained += rec.retained;
            seen += rec.unlabeled;
        }
        let refreshed = refresh_teacher(&mut state.teacher, &state.student, epoch, cfg.refresh_interval)?;
        if refreshed {
            (pseudo, mask) = make_pseudo(&state.teacher, data.unlabeled, epoch, cfg)?;
            observer.on_refresh(epoch, &state.teacher, &pseudo)?;
        }
        let n = steps.max(1) as f64;
        history.records.push(EpochRecord {
            phase: Phase::Ssl,
            epoch,
            supervised_loss: (ls / n) as f32,
            unsupervised_loss: Some((lu / n) as f32),
            reward_loss: Some((lg / n) as f32),
            retained_fraction: Some(retained as f32 / seen.max(1) as f32),
            train_error_deg: mean_angular_error(&state.student, data.labeled)?,
            val_error_deg: data
                .validation
                .map(|v| mean_angular_error(&state.student, v))
                .transpose()?,
            teacher_refreshed: Some(refreshed),
            teacher_hash: Some(hex(&param_hash(&state.teacher)[..8])),
        });
    }
    observer.on_ssl_finished(&state)?;
    Ok(SelfTrainingOutput {
        state,
        history,
        pseudo,
        corruption_mask: mask,
    })
}

/// All three phases: teacher training, pseudo-labeling, self-training.
pub fn run_selftraining(
    data: &SslData<'_>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<SelfTrainingOutput> {
    cfg.validate()?;
    data.check()?;
    let (teacher, history) = train_teacher(data.labeled, cfg)?;
    observer.on_teacher_trained(&teacher)?;
    self_train(teacher, history, data, cfg, observer)
}

/// Scores every sample of `ds` against `labels` with the given models.
pub fn score_pool(
    reward: &RewardModel,
    student: &GazeEstimator,
    ds: &Dataset,
    cues: &CueBank,
    labels: &[SphericalGaze],
) -> Result<Vec<ConfidenceScore>> {
    if labels.len() != ds.len() || cues.len() != ds.len() {
        return Err(Error::shape("score_pool", &[ds.len()], &[labels.len(), cues.len()]));
    }
    let preds = student.predict(&ds.feature_matrix())?;
    let sims = label_similarities(&preds, labels)?;
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(256) {
        let (v, t) = cues.gather(chunk);
        let (a, b) = (chunk[0], chunk[chunk.len() - 1] + 1);
        out.extend(reward.score_batch(&v, &t, &labels[a..b], &sims[a..b])?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cues::{CueProviderConfig, PromptTemplate, SyntheticCueProvider};
    use crate::data::{generate_synthetic, SyntheticSpec};
    use alloc::vec;

    #[test]
    fn supervised_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.constant_from(&[1, 2], vec![0.3, 0.4]).unwrap();
        let l = supervised_loss(&mut tape, p, &[SphericalGaze::new(0.0, 0.0)]).unwrap();
        assert_eq!(tape.value(l)[0], 0.5);
        let p = tape.constant_from(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let l = supervised_loss(&mut tape, p, &[SphericalGaze::default(); 2]).unwrap();
        assert_eq!(tape.value(l)[0], 1.5);
        let p = tape.constant_from(&[1, 2], vec![0.2, -0.1]).unwrap();
        let l = supervised_loss(&mut tape, p, &[SphericalGaze::new(0.2, -0.1)]).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);
        assert!(supervised_loss(&mut tape, p, &[]).is_err());
    }

    #[test]
    fn unsupervised_loss_examples() {
        let sum_cfg = TrainConfig {
            unsup_reduction: Reduction::Sum,
            ..TrainConfig::default()
        };
        let mut tape = Tape::new();
        let p = tape.constant_from(&[1, 2], vec![2.0, 0.0]).unwrap();
        let l = unsupervised_loss(&mut tape, p, &[SphericalGaze::default()], &[0.8], &sum_cfg).unwrap();
        assert!((tape.value(l)[0] - 1.6).abs() < 1e-6);
        let p = tape.constant_from(&[2, 2], vec![9.9, 0.0, 0.0, 2.0]).unwrap();
        let l = unsupervised_loss(
            &mut tape,
            p,
            &[SphericalGaze::default(); 2],
            &[0.4, 0.8],
            &TrainConfig::default(),
        )
        .unwrap();
        assert!((tape.value(l)[0] - 0.8).abs() < 1e-6);
        assert!(unsupervised_loss(&mut tape, p, &[SphericalGaze::default(); 2], &[0.4], &sum_cfg).is_err());
    }

    #[test]
    fn filtered_sample_has_exactly_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(&crate::diff::Tensor::new(&[3, 2], vec![0.3, 0.1, -0.5, 0.2, 1.0, 1.0]).unwrap());
        let l = unsupervised_loss(
            &mut tape,
            p,
            &[SphericalGaze::default(); 3],
            &[0.4, 0.9, 0.49999],
            &TrainConfig::default(),
        )
        .unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.get(p).unwrap();
        assert_eq!(&g[0..2], &[0.0, 0.0]);
        assert_eq!(&g[4..6], &[0.0, 0.0]);
        assert!(g[2] != 0.0 && g[3] != 0.0);
    }

    #[test]
    fn selection_modes() {
        let mut cfg = TrainConfig::default();
        assert_eq!(selection_weight(0.4, &cfg), 0.0);
        assert_eq!(selection_weight(0.7, &cfg), 0.7);
        cfg.selection = Selection {
            filter: true,
            reweight: false,
        };
        assert_eq!(selection_weight(0.7, &cfg), 1.0);
        cfg.selection = Selection {
            filter: false,
            reweight: true,
        };
        assert_eq!(selection_weight(0.4, &cfg), 0.4);
        cfg.selection = Selection {
            filter: false,
            reweight: false,
        };
        assert_eq!(selection_weight(0.01, &cfg), 1.0);
    }

    #[test]
    fn objective_combination() {
        let mut tape = Tape::new();
        let a = tape.constant_from(&[1], vec![2.0]).unwrap();
        let b = tape.constant_from(&[1], vec![4.0]).unwrap();
        let t = total_objective(&mut tape, a, b, (0.5, 0.5)).unwrap();
        assert_eq!(tape.value(t)[0], 3.0);
        let t = total_objective(&mut tape, a, b, (1.0, 0.0)).unwrap();
        assert_eq!(tape.value(t)[0], 2.0);
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = TrainConfig {
            tau: 1.5,
            ..TrainConfig::default()
        };
        let msg = alloc::format!("{}", cfg.validate().unwrap_err());
        assert!(msg.contains("tau"));
        assert!(TrainConfig {
            refresh_interval: Some(0),
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn refresh_schedule() {
        let t0 = GazeEstimator::init(1, EstimatorDims::new(4)).unwrap();
        let s = GazeEstimator::init(2, EstimatorDims::new(4)).unwrap();
        let mut t = t0.clone();
        for e in 1..10 {
            assert!(!refresh_teacher(&mut t, &s, e, Some(10)).unwrap());
            assert_eq!(t, t0);
        }
        assert!(refresh_teacher(&mut t, &s, 10, Some(10)).unwrap());
        assert_eq!(t, s);
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(t.predict(&x).unwrap(), s.predict(&x).unwrap());
        let mut t = t0.clone();
        assert!(refresh_teacher(&mut t, &s, 1, Some(1)).unwrap());
        assert!(!refresh_teacher(&mut t, &s, 10, None).unwrap());
        assert!(refresh_teacher(&mut t, &s, 0, Some(1)).is_err());
    }

    #[test]
    fn zero_teacher_pseudo_labels() {
        let d = generate_synthetic(&SyntheticSpec::default(), 0, 7, 1).unwrap();
        let t = GazeEstimator::zeros(EstimatorDims::new(24)).unwrap();
        let p = generate_pseudo_labels(&t, &d.unlabeled, 0).unwrap();
        assert_eq!(p.len(), 7);
        assert!(p.labels().iter().all(|g| *g == SphericalGaze::new(0.0, 0.0)));
        assert!(p.covers(&d.unlabeled));
    }

    #[test]
    fn pseudo_labels_equal_direct_forward() {
        let d = generate_synthetic(&SyntheticSpec::default(), 0, 9, 1).unwrap();
        let t = GazeEstimator::init(3, EstimatorDims::new(24)).unwrap();
        let p = generate_pseudo_labels(&t, &d.unlabeled, 0).unwrap();
        let x = crate::diff::Tensor::new(&[9, 24], d.unlabeled.feature_matrix()).unwrap();
        assert_eq!(p.labels(), crate::nets::estimator_forward(&t, &x).unwrap().as_slice());
    }

    #[test]
    fn zero_teacher_epochs_keep_init() {
        let d = generate_synthetic(&SyntheticSpec::default(), 20, 0, 1).unwrap();
        let cfg = TrainConfig {
            teacher_epochs: 0,
            ..TrainConfig::default()
        };
        let (t, h) = train_teacher(&d.labeled, &cfg).unwrap();
        assert!(h.records.is_empty());
        assert_eq!(
            t,
            GazeEstimator::init(derive_seed(0, "teacher-init"), EstimatorDims::new(24)).unwrap()
        );
    }

    struct Fixture {
        labeled: Dataset,
        unlabeled: Dataset,
        lc: CueBank,
        uc: CueBank,
    }

    fn fixture(n_l: usize, n_u: usize) -> Fixture {
        let d = generate_synthetic(&SyntheticSpec::default(), n_l, n_u, 3).unwrap();
        let mut p = SyntheticCueProvider::new(CueProviderConfig::default(), 24, 3).unwrap();
        p.add_dataset_view(&d.labeled);
        p.add_dataset_view(&d.oracle);
        let prompt = PromptTemplate::default();
        Fixture {
            lc: CueBank::build(&p, &d.labeled, &prompt).unwrap(),
            uc: CueBank::build(&p, &d.unlabeled, &prompt).unwrap(),
            labeled: d.labeled,
            unlabeled: d.unlabeled,
        }
    }

    impl Fixture {
        fn data(&self) -> SslData<'_> {
            SslData {
                labeled: &self.labeled,
                unlabeled: &self.unlabeled,
                labeled_cues: &self.lc,
                unlabeled_cues: &self.uc,
                validation: None,
            }
        }
    }

    #[test]
    fn filter_all_reduces_to_supervised_step() {
        let f = fixture(16, 16);
        let data = f.data();
        let teacher = GazeEstimator::init(1, EstimatorDims::new(24)).unwrap();
        let pseudo = generate_pseudo_labels(&teacher, &f.unlabeled, 0).unwrap();
        let gaze = labels_of(&f.labeled).unwrap();
        let batch = PairedBatch {
            labeled: (0..8).collect(),
            unlabeled: (0..8).collect(),
        };
        let cfg = TrainConfig {
            tau: 1.0 + f32::EPSILON,
            ..TrainConfig::default()
        };
        let mut state = SslState::new(teacher.clone(), RewardDims::default(), &cfg).unwrap();
        let rec = ssl_step(&mut state, &data, &gaze, &pseudo, &batch, &cfg, 1).unwrap();
        assert_eq!(rec.unsupervised_loss, 0.0);
        assert_eq!(rec.retained, 0);
        // same student update as weights (1, 0)
        let sup = TrainConfig {
            objective_weights: (0.5, 0.0),
            ..cfg.clone()
        };
        let mut other = SslState::new(teacher, RewardDims::default(), &sup).unwrap();
        ssl_step(&mut other, &data, &gaze, &pseudo, &batch, &sup, 1).unwrap();
        assert_eq!(param_hash(&state.student), param_hash(&other.student));
    }

    #[test]
    fn zero_learning_rates_freeze_params() {
        let f = fixture(16, 16);
        let teacher = GazeEstimator::init(1, EstimatorDims::new(24)).unwrap();
        let pseudo = generate_pseudo_labels(&teacher, &f.unlabeled, 0).unwrap();
        let gaze = labels_of(&f.labeled).unwrap();
        let cfg = TrainConfig {
            lr_student: 0.0,
            lr_reward: 0.0,
            ..TrainConfig::default()
        };
        let mut state = SslState::new(teacher, RewardDims::default(), &cfg).unwrap();
        let before = (param_hash(&state.student), param_hash(&state.reward));
        let batch = PairedBatch {
            labeled: vec![0, 1, 2],
            unlabeled: vec![3, 4, 5],
        };
        let rec = ssl_step(&mut state, &f.data(), &gaze, &pseudo, &batch, &cfg, 1).unwrap();
        assert_eq!((param_hash(&state.student), param_hash(&state.reward)), before);
        assert!(rec.supervised_loss > 0.0 && rec.reward_loss > 0.0);
    }

    #[test]
    fn supervised_only_ignores_unlabeled_content() {
        let a = fixture(24, 40);
        let mut b = fixture(24, 40);
        let d2 = generate_synthetic(&SyntheticSpec::default(), 0, 40, 99).unwrap();
        b.unlabeled = d2.unlabeled.clone();
        let cfg = TrainConfig {
            teacher_epochs: 2,
            ssl_epochs: 3,
            objective_weights: (1.0, 0.0),
            batch_size: 8,
            ..TrainConfig::default()
        };
        let ra = run_selftraining(&a.data(), &cfg, &mut NoObserver).unwrap();
        let rb = run_selftraining(&b.data(), &cfg, &mut NoObserver).unwrap();
        assert_eq!(param_hash(&ra.state.student), param_hash(&rb.state.student));
    }

    #[test]
    fn run_is_deterministic_and_records_each_epoch() {
        let f = fixture(24, 40);
        let cfg = TrainConfig {
            teacher_epochs: 2,
            ssl_epochs: 4,
            refresh_interval: Some(2),
            batch_size: 8,
            ..TrainConfig::default()
        };
        let a = run_selftraining(&f.data(), &cfg, &mut NoObserver).unwrap();
        let b = run_selftraining(&f.data(), &cfg, &mut NoObserver).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(param_hash(&a.state.student), param_hash(&b.state.student));
        let ssl: Vec<_> = a.history.phase(Phase::Ssl).collect();
        assert_eq!(ssl.len(), 4);
        assert_eq!(a.history.phase(Phase::Teacher).count(), 2);
        let refreshed: Vec<bool> = ssl.iter().map(|r| r.teacher_refreshed.unwrap()).collect();
        assert_eq!(refreshed, [false, true, false, true]);
        // teacher hash changes only at refresh epochs
        assert_eq!(ssl[0].teacher_hash, ssl.first().unwrap().teacher_hash);
        assert_ne!(ssl[1].teacher_hash, ssl[0].teacher_hash);
        assert_eq!(ssl[2].teacher_hash, ssl[1].teacher_hash);
        assert!(ssl.iter().all(|r| (0.0..=1.0).contains(&r.retained_fraction.unwrap())));
    }

    #[test]
    fn empty_pools_rejected() {
        let f = fixture(8, 8);
        let empty = Dataset::default();
        let data = SslData {
            unlabeled: &empty,
            ..f.data()
        };
        assert!(run_selftraining(&data, &TrainConfig::default(), &mut NoObserver).is_err());
    }
}
