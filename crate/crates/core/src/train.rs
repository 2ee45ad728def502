//! Noam schedule, Adam, the training loop for the four objectives, and the
//! pretrain → fine-tune recipe.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{spec_augment, speed_perturb, FeatureMatrix, SpecAugmentPolicy, Utterance};
use crate::decode::{evaluate, tagged_target, DecodeConfig};
use crate::losses::{self, LossBreakdown, LossConfig};
use crate::model::{FeatureBatch, Head, Model, ModelConfig, SharingConfig, TokenBatch};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{math, rng, Error, Result};

/// `factor · d_model^−0.5 · min(step^−0.5, step · warmup^−1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup_steps: u64, factor: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup_steps as f64;
    factor * math::powf(d_model as f64, -0.5) * math::powf(s, -0.5).min(s * math::powf(w, -1.5))
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct NoamSchedule {
    pub factor: f64,
    pub warmup_steps: u64,
    pub d_model: usize,
}

impl NoamSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        noam_lr(step, self.d_model, self.warmup_steps, self.factor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.d_model == 0 || !(self.factor > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update using the gradients stored in `params`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer state for {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - math::powf(ADAM_BETA1, t);
    let c2 = 1.0 - math::powf(ADAM_BETA2, t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch(format!("optimizer state for {}", p.name)));
        }
        let (x, g) = (p.value.data_mut(), p.grad.data());
        for (((x, &g), m), v) in x.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *x -= lr * (*m / c1) / (math::sqrt(*v / c2) + ADAM_EPS);
        }
    }
    Ok(())
}

/// Where the accent tag goes in a tag-appending target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum TagPosition {
    #[default]
    Append,
    Prepend,
}

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// CTC/attention speech recognition only.
    MonoAsr,
    /// Accent classification only (encoder and accent head).
    MonoAr,
    /// Speech recognition with the accent tag as an extra output token.
    Stjr(TagPosition),
    /// Speech recognition plus the pooled accent classifier.
    Mtjr,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::MonoAsr => "mono_asr",
            Mode::MonoAr => "mono_ar",
            Mode::Stjr(_) => "stjr",
            Mode::Mtjr => "mtjr",
        }
    }

    pub fn trains_asr(self) -> bool {
        self != Mode::MonoAr
    }

    pub fn trains_accent_head(self) -> bool {
        matches!(self, Mode::MonoAr | Mode::Mtjr)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct AugmentConfig {
    pub spec_augment: Option<SpecAugmentPolicy>,
    /// Each factor adds one time-resampled copy of the training set (1.0
    /// keeps the original).
    pub speed_factors: Vec<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { spec_augment: Some(SpecAugmentPolicy::default()), speed_factors: vec![0.9, 1.0, 1.1] }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self { spec_augment: None, speed_factors: vec![1.0] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub sharing: SharingConfig,
    pub schedule: NoamSchedule,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub augment: AugmentConfig,
    /// Dev decoding after each epoch; `None` reports head accuracy only.
    pub dev_decode: Option<DecodeConfig>,
    pub seed: u64,
}

impl TrainerConfig {
    pub fn new(mode: Mode, model: &ModelConfig) -> Self {
        Self {
            mode,
            epochs: 10,
            batch_size: 16,
            loss: LossConfig::default(),
            sharing: SharingConfig::full(model),
            schedule: NoamSchedule { factor: 1.0, warmup_steps: 400, d_model: model.d_model },
            clip_norm: 5.0,
            augment: AugmentConfig::default(),
            dev_decode: None,
            seed: 1,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.loss.validate()?;
        self.sharing.validate(model)?;
        self.schedule.validate()?;
        if let Some(d) = &self.dev_decode {
            d.validate()?;
        }
        if self.batch_size == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig("batch_size and clip_norm must be positive".into()));
        }
        if self.augment.speed_factors.is_empty() || self.augment.speed_factors.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::InvalidConfig("speed factors must be positive and non-empty".into()));
        }
        Ok(())
    }
}

/// A trained model with the settings needed to resume or evaluate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub mode: Mode,
    pub sharing: SharingConfig,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }
}

/// Epoch averages of the loss components (`None` where the mode has no
/// such term) and the dev metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ctc: Option<f64>,
    pub att: Option<f64>,
    pub asr: Option<f64>,
    pub accent: Option<f64>,
    pub total: f64,
    pub dev_wer: Option<f64>,
    pub dev_acc: Option<f64>,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

fn check_corpus(corpus: &[Utterance], config: &ModelConfig) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let symbols = config.symbols();
    for u in corpus {
        if u.accent_id >= config.accent_count {
            return Err(Error::LabelOutOfRange { label: u.accent_id, classes: config.accent_count });
        }
        if let Some(&t) = u.tokens.iter().find(|&&t| t == 0 || t > symbols) {
            return Err(Error::LabelOutOfRange { label: t, classes: symbols + 1 });
        }
        if u.features.cols != config.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "{}: feature dim {} != {}",
                u.utt_id, u.features.cols, config.feature_dim
            )));
        }
    }
    Ok(())
}

/// Training set after speed perturbation: one copy per factor.
fn expand(corpus: &[Utterance], factors: &[f64]) -> Result<Vec<Utterance>> {
    let mut out = Vec::with_capacity(corpus.len() * factors.len());
    for &f in factors {
        for u in corpus {
            let features = if f == 1.0 { u.features.clone() } else { speed_perturb(&u.features, f)? };
            out.push(Utterance { features, ..u.clone() });
        }
    }
    Ok(out)
}

/// Batches of utterance indices over length-sorted data.
fn length_buckets(corpus: &[Utterance], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|&i| (corpus[i].features.rows, i));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn labels(k: &str) -> u64 {
    rng::label(k)
}

/// Loss components of one batch, left on the tape.
struct BatchLoss {
    total: crate::Var,
    parts: LossBreakdown,
}

fn batch_loss(
    model: &Model,
    tape: &mut crate::Tape<'_>,
    cfg: &TrainerConfig,
    utts: &[&Utterance],
    features: &[FeatureMatrix],
    rng: &mut rng::Rng,
) -> Result<BatchLoss> {
    let feats =
        FeatureBatch::from_utterances(model.config.feature_dim, features.iter().map(|f| (f.data.as_slice(), f.rows)))?;
    let enc = model.encode_features(tape, &feats, Some(rng))?;
    let mut parts = LossBreakdown::default();
    let asr = if cfg.mode.trains_asr() {
        let targets: Vec<Vec<usize>> = utts
            .iter()
            .map(|u| match cfg.mode {
                Mode::Stjr(pos) => tagged_target(&u.tokens, u.accent_id, pos, &model.config),
                _ => u.tokens.clone(),
            })
            .collect();
        let ctc_logits = model.ctc_logits(tape, &enc)?;
        let (ctc, _) = losses::ctc_loss(tape, ctc_logits, &enc.mask, &targets)?;
        let sos = model.config.sos_eos();
        let dec_in: Vec<Vec<usize>> =
            targets.iter().map(|t| core::iter::once(sos).chain(t.iter().copied()).collect()).collect();
        let dec_out: Vec<Vec<usize>> =
            targets.iter().map(|t| t.iter().copied().chain(core::iter::once(sos)).collect()).collect();
        let logits = model.decode_logits(tape, &TokenBatch::new(&dec_in), &enc, Some(rng))?;
        let att = losses::attention_ce(tape, logits, &TokenBatch::new(&dec_out), cfg.loss.label_smoothing)?;
        parts.ctc = tape.value(ctc).item()?;
        parts.att = tape.value(att).item()?;
        Some((ctc, att))
    } else {
        None
    };
    let accent = if cfg.mode.trains_accent_head() {
        let logits = model.accent_branch(tape, &enc, cfg.sharing)?;
        let labels: Vec<usize> = utts.iter().map(|u| u.accent_id).collect();
        let acc = losses::accent_ce(tape, logits, &labels)?;
        parts.accent = tape.value(acc).item()?;
        Some(acc)
    } else {
        None
    };
    let total = losses::combine(tape, asr, accent, &cfg.loss)?;
    parts.asr = cfg.loss.gamma * parts.ctc + (1.0 - cfg.loss.gamma) * parts.att;
    parts.total = tape.value(total).item()?;
    Ok(BatchLoss { total, parts })
}

/// Trains `model` in place of a fresh initialization; see [`train`].
pub fn train_model(
    cfg: &TrainerConfig,
    mut model: Model,
    corpus: &[Utterance],
    dev: &[Utterance],
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate(&model.config)?;
    check_corpus(corpus, &model.config)?;
    if !dev.is_empty() {
        check_corpus(dev, &model.config)?;
    }
    let data = expand(corpus, &cfg.augment.speed_factors)?;
    let buckets = length_buckets(&data, cfg.batch_size);
    let mut optimizer = AdamState::new(&model.params);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mode = cfg.mode;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..buckets.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[labels("shuffle"), epoch as u64]));
        let mut sums = LossBreakdown::default();
        let mut lr = 0.0;
        for (position, &b) in order.iter().enumerate() {
            let batch_id = (epoch as u64) << 32 | b as u64;
            let mut r = rng::stream(cfg.seed, &[labels("batch"), batch_id]);
            let utts: Vec<&Utterance> = buckets[b].iter().map(|&i| &data[i]).collect();
            let features: Vec<FeatureMatrix> = match &cfg.augment.spec_augment {
                Some(policy) => utts.iter().map(|u| spec_augment(&u.features, policy, &mut r)).collect(),
                None => utts.iter().map(|u| u.features.clone()).collect(),
            };
            let grads = {
                let mut tape = model.tape(true);
                let loss = batch_loss(&model, &mut tape, cfg, &utts, &features, &mut r)?;
                if !loss.parts.total.is_finite() {
                    return Err(Error::NonFinite(format!("loss of batch {b} in epoch {epoch}")));
                }
                sums.ctc += loss.parts.ctc;
                sums.att += loss.parts.att;
                sums.asr += loss.parts.asr;
                sums.accent += loss.parts.accent;
                sums.total += loss.parts.total;
                tape.backward(loss.total)?
            };
            model.params.zero_grad();
            model.params.accumulate(&grads);
            let norm = model.params.grad_norm();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient of batch {b} in epoch {epoch}")));
            }
            if norm > cfg.clip_norm {
                log::info!("epoch {epoch} batch {position}: gradient norm {norm:.3} clipped to {}", cfg.clip_norm);
                model.params.scale_grads(cfg.clip_norm / norm);
            }
            lr = cfg.schedule.lr(optimizer.step + 1);
            adam_step(&mut model.params, &mut optimizer, lr)?;
        }
        let n = buckets.len() as f64;
        let (dev_wer, dev_acc) = if dev.is_empty() {
            (None, None)
        } else {
            let report = evaluate(&model, mode, cfg.sharing, dev, cfg.dev_decode.as_ref())?;
            (report.wer.map(|w| w.wer), report.accent_accuracy)
        };
        let m = EpochMetrics {
            epoch,
            ctc: mode.trains_asr().then(|| sums.ctc / n),
            att: mode.trains_asr().then(|| sums.att / n),
            asr: mode.trains_asr().then(|| sums.asr / n),
            accent: mode.trains_accent_head().then(|| sums.accent / n),
            total: sums.total / n,
            dev_wer,
            dev_acc,
            lr,
        };
        log::debug!("{} epoch {epoch}: total {:.4}", mode.name(), m.total);
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome { checkpoint: Checkpoint { model, mode, sharing: cfg.sharing, optimizer }, metrics })
}

/// Trains a freshly initialized model (parameters seeded by `cfg.seed`).
pub fn train(
    cfg: &TrainerConfig,
    model_config: &ModelConfig,
    corpus: &[Utterance],
    dev: &[Utterance],
) -> Result<TrainOutcome> {
    let model = Model::new(model_config.clone(), cfg.seed)?;
    train_model(cfg, model, corpus, dev, &mut |_| {})
}

/// Builds the fine-tuning starting point from a pretrained checkpoint: every
/// encoder and decoder body weight is copied, while the decoder embedding,
/// the decoder output projection, the CTC projection and the accent
/// classifier are freshly initialized. The step counter and optimizer state
/// start over.
pub fn finetune_init(pretrained: &Checkpoint, target: &ModelConfig, seed: u64) -> Result<Model> {
    let src = &pretrained.model.config;
    let same_body = src.d_model == target.d_model
        && src.heads == target.heads
        && src.enc_layers == target.enc_layers
        && src.dec_layers == target.dec_layers
        && src.ffn_dim == target.ffn_dim
        && src.feature_dim == target.feature_dim
        && src.subsample_factor == target.subsample_factor;
    if !same_body {
        return Err(Error::IncompatibleCheckpoint(format!("pretrained body {src:?} does not match target {target:?}")));
    }
    let fresh_seed = rng::derive_seed(seed, &[labels("finetune")]);
    let mut model = Model::new(target.clone(), fresh_seed)?;
    let heads: Vec<_> =
        [Head::OutputLayers, Head::Ctc, Head::Accent].into_iter().flat_map(|h| model.head_params(h)).collect();
    let body: Vec<_> = model.params.iter().map(|(id, _)| id).filter(|id| !heads.contains(id)).collect();
    for id in body {
        let name = model.params.get(id).name.clone();
        let src_id = pretrained
            .model
            .params
            .id(&name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing parameter {name}")))?;
        let value = pretrained.model.params.value(src_id);
        if value.shape() != model.params.value(id).shape() {
            return Err(Error::IncompatibleCheckpoint(format!("shape of {name}")));
        }
        *model.params.value_mut(id) = value.clone();
    }
    Ok(model)
}

/// Pretrains speech recognition on `pretrain`, then fine-tunes the target
/// mode of `finetune` on `corpus` from [`finetune_init`].
pub fn pretrain_then_finetune(
    pretrain_cfg: &TrainerConfig,
    finetune_cfg: &TrainerConfig,
    model_config: &ModelConfig,
    pretrain: &[Utterance],
    corpus: &[Utterance],
    dev: &[Utterance],
) -> Result<(TrainOutcome, TrainOutcome)> {
    let phase1_cfg = TrainerConfig { mode: Mode::MonoAsr, ..pretrain_cfg.clone() };
    let phase1 =
        train_model(&phase1_cfg, Model::new(model_config.clone(), pretrain_cfg.seed)?, pretrain, &[], &mut |_| {})?;
    let model = finetune_init(&phase1.checkpoint, model_config, finetune_cfg.seed)?;
    let phase2 = train_model(finetune_cfg, model, corpus, dev, &mut |_| {})?;
    Ok((phase1, phase2))
}
