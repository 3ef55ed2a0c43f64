//! Staged training: per-stage epoch budgets, adaptive-moment optimization
//! with global-norm clipping, gradient accumulation with mean-loss
//! semantics, Eden learning-rate decay, per-component freezing, and the
//! pretrain/stage1/stage2/direct procedures.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    forward_lattice, save_checkpoint, CheckpointError, Component, ModelError, ModelParams,
    StageTag, Utterance,
};
use crate::numerics::{GradTape, NumericsError, Tensor};
use crate::tokenizer::BpeModel;
use crate::transducer::{transducer_nll, JointLogProbLattice, TransducerError};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("tokenizer vocab {tokenizer} does not match model vocab {model}")]
    VocabMismatch { model: usize, tokenizer: usize },
    #[error("dataset is empty after the {max_frames}-frame cap")]
    EmptyDataset { max_frames: usize },
    #[error("non-finite loss in batch {batch} (utterance '{utterance}')")]
    NonFiniteLoss { batch: usize, utterance: String },
    #[error("non-finite gradient norm")]
    NonFiniteGradient,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transducer(#[from] TransducerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Eden schedule shape parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EdenConfig {
    pub lr_batches: f64,
    pub lr_epochs: f64,
}

impl Default for EdenConfig {
    fn default() -> Self {
        EdenConfig {
            lr_batches: 5000.0,
            lr_epochs: 6.0,
        }
    }
}

/// Epoch budgets per stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageEpochs {
    pub pretrain: usize,
    pub stage1: usize,
    pub stage2: usize,
    pub direct: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        StageEpochs {
            pretrain: 15,
            stage1: 20,
            stage2: 40,
            direct: 60,
        }
    }
}

/// Components excluded from updates (meaningful during stage 1).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FreezeSet {
    pub encoder: bool,
    pub prediction: bool,
    pub joint: bool,
}

impl FreezeSet {
    pub fn none() -> Self {
        FreezeSet::default()
    }

    pub fn is_frozen(&self, component: Component) -> bool {
        match component {
            Component::Encoder => self.encoder,
            Component::Prediction => self.prediction,
            Component::Joint => self.joint,
        }
    }

    pub fn any(&self) -> bool {
        self.encoder || self.prediction || self.joint
    }

    /// Parses a comma list of `encoder`, `prediction`, `joint`.
    pub fn parse(list: &str) -> Result<Self, String> {
        let mut set = FreezeSet::none();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "encoder" => set.encoder = true,
                "prediction" => set.prediction = true,
                "joint" => set.joint = true,
                other => return Err(format!("unknown component '{other}'")),
            }
        }
        Ok(set)
    }
}

impl std::fmt::Display for FreezeSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.encoder {
            parts.push("encoder");
        }
        if self.prediction {
            parts.push("prediction");
        }
        if self.joint {
            parts.push("joint");
        }
        write!(f, "{}", if parts.is_empty() { "none".into() } else { parts.join(",") })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub clip_norm: f64,
    pub accum_steps: usize,
    pub epochs: StageEpochs,
    /// Utterances longer than this many frames are excluded up front.
    pub max_frames: usize,
    pub freeze: FreezeSet,
    pub seed: u64,
    pub batch_size: usize,
    pub eden: EdenConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.0005,
            clip_norm: 2.0,
            accum_steps: 4,
            epochs: StageEpochs::default(),
            max_frames: 600,
            freeze: FreezeSet::none(),
            seed: 0,
            batch_size: 8,
            eden: EdenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2,
    Direct,
}

impl Stage {
    pub fn tag(self) -> StageTag {
        match self {
            Stage::Pretrain => StageTag::Pretrain,
            Stage::Stage1 => StageTag::Stage1,
            Stage::Stage2 => StageTag::Stage2,
            Stage::Direct => StageTag::Direct,
        }
    }

    /// Transcript field the stage trains on: phonetic first, characters later.
    pub fn label_field(self) -> LabelField {
        match self {
            Stage::Pretrain | Stage::Stage1 => LabelField::Tailo,
            Stage::Stage2 | Stage::Direct => LabelField::Han,
        }
    }

    pub fn epochs(self, config: &TrainConfig) -> usize {
        match self {
            Stage::Pretrain => config.epochs.pretrain,
            Stage::Stage1 => config.epochs.stage1,
            Stage::Stage2 => config.epochs.stage2,
            Stage::Direct => config.epochs.direct,
        }
    }

    pub fn name(self) -> &'static str {
        self.tag().name()
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "direct" => Ok(Stage::Direct),
            other => Err(format!("unknown stage '{other}' (pretrain|stage1|stage2|direct)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelField {
    Tailo,
    Han,
}

/// Training view over utterances with a transcript selector and the frame
/// cap applied (excluded count retained for logging).
pub struct Dataset {
    utterances: Vec<Utterance>,
    label: LabelField,
    excluded: usize,
}

impl Dataset {
    pub fn new(
        utterances: Vec<Utterance>,
        label: LabelField,
        max_frames: usize,
    ) -> Result<Self, TrainingError> {
        let before = utterances.len();
        let kept: Vec<Utterance> = utterances
            .into_iter()
            .filter(|u| u.duration_frames() <= max_frames)
            .collect();
        if kept.is_empty() {
            return Err(TrainingError::EmptyDataset { max_frames });
        }
        Ok(Dataset {
            excluded: before - kept.len(),
            utterances: kept,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn excluded(&self) -> usize {
        self.excluded
    }

    pub fn label(&self) -> LabelField {
        self.label
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn label_text(&self, idx: usize) -> &str {
        match self.label {
            LabelField::Tailo => &self.utterances[idx].tailo_text,
            LabelField::Han => &self.utterances[idx].han_text,
        }
    }
}

/// One epoch record of the JSON-lines training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub optimizer_steps: u64,
}

/// Eden decay in both step and epoch counts:
/// `base · ((step² + B²)/B²)^(-1/4) · ((epoch² + E²)/E²)^(-1/4)`.
pub fn eden_lr(step: u64, epoch: usize, config: &TrainConfig) -> f64 {
    let b = config.eden.lr_batches;
    let e = config.eden.lr_epochs;
    let s = step as f64;
    let ep = epoch as f64;
    let step_factor = ((s * s + b * b) / (b * b)).powf(-0.25);
    let epoch_factor = ((ep * ep + e * e) / (e * e)).powf(-0.25);
    config.base_lr * step_factor * epoch_factor
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> Result<f64, TrainingError> {
    let sq_sum: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum();
    let norm = sq_sum.sqrt();
    if !norm.is_finite() {
        return Err(TrainingError::NonFiniteGradient);
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(norm)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-9;

/// Bias-corrected first/second moment optimizer state, parallel to
/// [`ModelParams::param_tensors`].
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.param_tensors().iter().map(|t| t.len()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; tensors with `frozen[i]` set are untouched (parameters
    /// and moments alike).
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64, frozen: &[bool]) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, tensor) in params.param_tensors_mut().into_iter().enumerate() {
            if frozen[i] {
                continue;
            }
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, value) in tensor.data_mut().iter_mut().enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *value -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Forward and backward for one utterance; returns the loss and parameter
/// gradients in checkpoint order.
fn forward_backward(
    params: &ModelParams,
    utterance: &Utterance,
    targets: &[usize],
) -> Result<(f64, Vec<Tensor>), TrainingError> {
    let mut tape = GradTape::new();
    let ids = params.register(&mut tape);
    let lat_id = forward_lattice(&mut tape, &ids, &params.dims, &utterance.features, targets)?;
    let lattice = JointLogProbLattice::new(tape.value(lat_id).clone()).expect("lattice dims");
    let loss = transducer_nll(&lattice, targets)?;
    let Some(grad) = loss.grad else {
        return Err(TrainingError::NonFiniteLoss {
            batch: 0,
            utterance: utterance.id.clone(),
        });
    };
    let root = tape.custom_grad(lat_id, loss.nll, grad)?;
    tape.backward(root)?;
    let grads: Vec<Tensor> = ids.all().iter().map(|&id| tape.grad_tensor(id)).collect();
    Ok((loss.nll, grads))
}

/// Mean per-utterance nll of a dataset under fixed parameters.
pub fn dataset_loss(
    params: &ModelParams,
    dataset: &Dataset,
    tokenizer: &BpeModel,
) -> Result<f64, TrainingError> {
    let mut total = 0.0;
    for (idx, utt) in dataset.utterances().iter().enumerate() {
        let targets: Vec<usize> = tokenizer
            .encode(dataset.label_text(idx))
            .iter()
            .map(|&t| t as usize)
            .collect();
        let lattice = params.forward_lattice(&utt.features, &targets)?;
        let loss = transducer_nll(&lattice, &targets)?;
        if !loss.nll.is_finite() {
            return Err(TrainingError::NonFiniteLoss {
                batch: 0,
                utterance: utt.id.clone(),
            });
        }
        total += loss.nll;
    }
    Ok(total / dataset.len() as f64)
}

/// Runs the stage's epochs of shuffled mini-batches. Per accumulation
/// window: mean utterance nll per batch, gradients averaged over the window,
/// frozen components zeroed, global-norm clipping, one optimizer step at the
/// Eden rate. Batch loss is the mean over utterances, so accumulation over k
/// equal batches equals one k-times-larger batch.
pub fn train_stage(
    params: ModelParams,
    dataset: &Dataset,
    tokenizer: &BpeModel,
    config: &TrainConfig,
    stage: Stage,
) -> Result<TrainOutcome, TrainingError> {
    let mut params = params;
    if tokenizer.vocab_size() != params.dims.vocab_size {
        return Err(TrainingError::VocabMismatch {
            model: params.dims.vocab_size,
            tokenizer: tokenizer.vocab_size(),
        });
    }
    let labels: Vec<Vec<usize>> = (0..dataset.len())
        .map(|i| {
            tokenizer
                .encode(dataset.label_text(i))
                .iter()
                .map(|&t| t as usize)
                .collect()
        })
        .collect();

    let frozen: Vec<bool> = (0..params.param_tensors().len())
        .map(|i| config.freeze.is_frozen(params.param_component(i)))
        .collect();
    let mut adam = AdamState::new(&params);
    let mut log = Vec::with_capacity(stage.epochs(config));

    for epoch in 0..stage.epochs(config) {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut last_lr = eden_lr(adam.steps(), epoch, config);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size.max(1)).collect();
        for (window_idx, window) in batches.chunks(config.accum_steps.max(1)).enumerate() {
            let mut accum: Vec<Tensor> = params
                .param_tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect();
            for (batch_in_window, batch) in window.iter().enumerate() {
                let batch_idx = window_idx * config.accum_steps + batch_in_window;
                let results: Vec<Result<(f64, Vec<Tensor>), TrainingError>> = batch
                    .par_iter()
                    .map(|&utt_idx| {
                        forward_backward(&params, &dataset.utterances()[utt_idx], &labels[utt_idx])
                    })
                    .collect();
                let weight = 1.0 / (batch.len() * window.len()) as f64;
                for (result, &utt_idx) in results.into_iter().zip(batch.iter()) {
                    let (nll, grads) = result.map_err(|e| match e {
                        TrainingError::NonFiniteLoss { .. } => TrainingError::NonFiniteLoss {
                            batch: batch_idx,
                            utterance: dataset.utterances()[utt_idx].id.clone(),
                        },
                        other => other,
                    })?;
                    if !nll.is_finite() {
                        return Err(TrainingError::NonFiniteLoss {
                            batch: batch_idx,
                            utterance: dataset.utterances()[utt_idx].id.clone(),
                        });
                    }
                    epoch_loss += nll;
                    for (acc, g) in accum.iter_mut().zip(&grads) {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v * weight;
                        }
                    }
                }
            }
            for (i, acc) in accum.iter_mut().enumerate() {
                if frozen[i] {
                    acc.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
            clip_gradients(&mut accum, config.clip_norm)?;
            last_lr = eden_lr(adam.steps(), epoch, config);
            adam.step(&mut params, &accum, last_lr, &frozen);
        }

        log.push(EpochLog {
            stage: stage.name().to_string(),
            epoch,
            mean_loss: epoch_loss / dataset.len() as f64,
            lr: last_lr,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    params.stage = stage.tag();
    Ok(TrainOutcome {
        params,
        log,
        optimizer_steps: adam.steps(),
    })
}

#[derive(Debug)]
pub struct TwoStageOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub total_steps: u64,
    pub stage1_path: PathBuf,
    pub stage2_path: PathBuf,
}

/// Stage 1 on the phonetic transcripts, then stage 2 on the character
/// transcripts starting from the stage-1 parameters. Any freeze set applies
/// to stage 1 only; both checkpoints are persisted with their stage tags.
pub fn two_stage_train(
    init_params: ModelParams,
    utterances: &[Utterance],
    tokenizer: &BpeModel,
    config: &TrainConfig,
    ckpt_dir: &Path,
) -> Result<TwoStageOutcome, TrainingError> {
    std::fs::create_dir_all(ckpt_dir).map_err(CheckpointError::Io)?;
    let stage1_data = Dataset::new(utterances.to_vec(), LabelField::Tailo, config.max_frames)?;
    let stage1 = train_stage(init_params, &stage1_data, tokenizer, config, Stage::Stage1)?;
    let stage1_path = ckpt_dir.join("stage1.clft");
    save_checkpoint(&stage1.params, &stage1_path)?;

    let mut stage2_config = config.clone();
    stage2_config.freeze = FreezeSet::none();
    let stage2_data = Dataset::new(utterances.to_vec(), LabelField::Han, config.max_frames)?;
    let stage2 = train_stage(
        stage1.params,
        &stage2_data,
        tokenizer,
        &stage2_config,
        Stage::Stage2,
    )?;
    let stage2_path = ckpt_dir.join("stage2.clft");
    save_checkpoint(&stage2.params, &stage2_path)?;

    let mut log = stage1.log;
    log.extend(stage2.log);
    Ok(TwoStageOutcome {
        params: stage2.params,
        log,
        total_steps: stage1.optimizer_steps + stage2.optimizer_steps,
        stage1_path,
        stage2_path,
    })
}

/// Emulated cross-lingual initialization: supervised transducer training on
/// the source language, keeping the encoder and re-initializing the
/// prediction and joint networks for the target runs.
pub fn pretrain_encoder(
    params: ModelParams,
    source_utterances: &[Utterance],
    tokenizer: &BpeModel,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainingError> {
    let dataset = Dataset::new(
        source_utterances.to_vec(),
        LabelField::Tailo,
        config.max_frames,
    )?;
    let mut outcome = train_stage(params, &dataset, tokenizer, config, Stage::Pretrain)?;
    // Fresh heads: only the encoder carries over to the target language.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0x4845_4144); // distinct stream for head re-init
    let fresh = ModelParams::init(outcome.params.dims.clone(), &mut rng);
    outcome.params.embedding = fresh.embedding;
    outcome.params.pred_proj = fresh.pred_proj;
    outcome.params.joint_out = fresh.joint_out;
    outcome.params.stage = StageTag::Pretrain;
    Ok(outcome)
}

/// Writes the epoch log as JSON-lines.
pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<(), std::io::Error> {
    let mut out = String::new();
    for entry in log {
        out.push_str(&serde_json::to_string(entry).expect("log serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, ModelDims, Nonlinearity};
    use rand::Rng;

    fn dims(vocab: usize) -> ModelDims {
        ModelDims {
            d_model: 8,
            vocab_size: vocab,
            embed_dim: 6,
            encoder: EncoderConfig {
                input_dim: 4,
                subsample: 2,
                num_layers: 2,
                hidden_dim: 8,
                nonlinearity: Nonlinearity::Tanh,
            },
        }
    }

    fn toy_utterances(n: usize, seed: u64) -> Vec<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let frames = rng.gen_range(4..9);
                Utterance {
                    id: format!("utt{i}"),
                    features: Tensor::uniform(vec![frames, 4], 1.0, &mut rng),
                    tailo_text: ["ba1", "ba1-bi2", "bo3 bu5"][i % 3].to_string(),
                    han_text: ["甲", "乙丙", "丁戊"][i % 3].to_string(),
                }
            })
            .collect()
    }

    fn toy_tokenizer() -> BpeModel {
        BpeModel::train(&["ba1 ba1-bi2 bo3 bu5 甲 乙丙 丁戊"], 260).unwrap()
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: StageEpochs {
                pretrain: 2,
                stage1: 2,
                stage2: 2,
                direct: 2,
            },
            batch_size: 3,
            accum_steps: 2,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn eden_schedule_values() {
        let config = TrainConfig::default();
        assert_eq!(eden_lr(0, 0, &config), config.base_lr);
        // step = B, epoch = 0: factor 2^(-1/4), from a high-precision eval.
        let got = eden_lr(5000, 0, &config);
        let expect = config.base_lr * 0.8408964152537145;
        assert!((got - expect).abs() < 1e-18, "got {got}");
        // Non-increasing in both arguments.
        for s in [0u64, 10, 100, 1000, 10_000] {
            assert!(eden_lr(s + 1, 0, &config) <= eden_lr(s, 0, &config));
            assert!(eden_lr(s, 1, &config) <= eden_lr(s, 0, &config));
        }
        for e in 0..30 {
            assert!(eden_lr(0, e + 1, &config) <= eden_lr(0, e, &config));
            assert!(eden_lr(0, e, &config) > 0.0);
        }
    }

    #[test]
    fn clipping_cases() {
        // Norm 4 scales to exactly 2.
        let mut grads = vec![Tensor::new(vec![4], vec![2.0, 2.0, 2.0, 2.0]).unwrap()];
        let before = clip_gradients(&mut grads, 2.0).unwrap();
        assert!((before - 4.0).abs() < 1e-12);
        let norm: f64 = grads[0].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 2.0).abs() <= 1e-12);

        // Norm 1 is untouched.
        let mut grads = vec![Tensor::new(vec![2], vec![0.6, 0.8]).unwrap()];
        clip_gradients(&mut grads, 2.0).unwrap();
        assert_eq!(grads[0].data(), &[0.6, 0.8]);

        // Direction preserved (cosine 1).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let original = Tensor::uniform(vec![16], 5.0, &mut rng);
        let mut grads = vec![original.clone()];
        clip_gradients(&mut grads, 2.0).unwrap();
        let dot: f64 = original.data().iter().zip(grads[0].data()).map(|(a, b)| a * b).sum();
        let na: f64 = original.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = grads[0].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((dot / (na * nb) - 1.0).abs() <= 1e-12);

        let mut grads = vec![Tensor::new(vec![1], vec![f64::NAN]).unwrap()];
        assert!(matches!(
            clip_gradients(&mut grads, 2.0),
            Err(TrainingError::NonFiniteGradient)
        ));
    }

    #[test]
    fn fully_frozen_training_is_identity() {
        let tokenizer = toy_tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::init(dims(tokenizer.vocab_size()), &mut rng);
        let dataset = Dataset::new(toy_utterances(6, 2), LabelField::Tailo, 600).unwrap();
        let mut config = quick_config(0);
        config.freeze = FreezeSet {
            encoder: true,
            prediction: true,
            joint: true,
        };
        let before = params.clone();
        let outcome = train_stage(params, &dataset, &tokenizer, &config, Stage::Stage1).unwrap();
        for (a, b) in before.param_tensors().iter().zip(outcome.params.param_tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn partial_freeze_only_touches_trainable_components() {
        let tokenizer = toy_tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::init(dims(tokenizer.vocab_size()), &mut rng);
        let dataset = Dataset::new(toy_utterances(6, 5), LabelField::Tailo, 600).unwrap();
        let mut config = quick_config(0);
        config.freeze = FreezeSet {
            encoder: true,
            ..FreezeSet::none()
        };
        let before = params.clone();
        let outcome = train_stage(params, &dataset, &tokenizer, &config, Stage::Stage1).unwrap();
        assert_eq!(
            before.encoder_layers, outcome.params.encoder_layers,
            "frozen encoder must be bit-identical"
        );
        assert_ne!(before.embedding.data(), outcome.params.embedding.data());
        assert_ne!(
            before.joint_out.weight.data(),
            outcome.params.joint_out.weight.data()
        );
    }

    #[test]
    fn single_step_decreases_fixed_batch_loss() {
        let tokenizer = toy_tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = ModelParams::init(dims(tokenizer.vocab_size()), &mut rng);
        let dataset = Dataset::new(toy_utterances(2, 0), LabelField::Tailo, 600).unwrap();
        let mut config = quick_config(0);
        config.batch_size = 2;
        config.accum_steps = 1;
        config.epochs.stage1 = 1;
        let before = dataset_loss(&params, &dataset, &tokenizer).unwrap();
        let outcome = train_stage(params, &dataset, &tokenizer, &config, Stage::Stage1).unwrap();
        let after = dataset_loss(&outcome.params, &dataset, &tokenizer).unwrap();
        assert!(
            after < before,
            "one step should reduce the batch loss: {before} -> {after}"
        );
    }

    #[test]
    fn accumulation_matches_single_large_batch() {
        let tokenizer = toy_tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ModelParams::init(dims(tokenizer.vocab_size()), &mut rng);
        let utts = toy_utterances(8, 9);
        let dataset = Dataset::new(utts, LabelField::Tailo, 600).unwrap();

        let mut small = quick_config(123);
        small.batch_size = 2;
        small.accum_steps = 4;
        small.epochs.stage1 = 1;
        let mut large = quick_config(123);
        large.batch_size = 8;
        large.accum_steps = 1;
        large.epochs.stage1 = 1;

        let a = train_stage(params.clone(), &dataset, &tokenizer, &small, Stage::Stage1).unwrap();
        let b = train_stage(params.clone(), &dataset, &tokenizer, &large, Stage::Stage1).unwrap();
        assert_eq!(a.optimizer_steps, 1);
        assert_eq!(b.optimizer_steps, 1);
        for ((ta, tb), t0) in a
            .params
            .param_tensors()
            .iter()
            .zip(b.params.param_tensors())
            .zip(params.param_tensors())
        {
            for ((va, vb), v0) in ta.data().iter().zip(tb.data()).zip(t0.data()) {
                let (da, db) = (va - v0, vb - v0);
                assert!(
                    (da - db).abs() <= 1e-9,
                    "parameter deltas diverge: {da} vs {db}"
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let tokenizer = toy_tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = ModelParams::init(dims(tokenizer.vocab_size()), &mut rng);
        let dataset = Dataset::new(toy_utterances(6, 3), LabelField::Han, 600).unwrap();
        let config = quick_config(7);
        let a = train_stage(params.clone(), &dataset, &tokenizer, &config, Stage::Direct).unwrap();
        let b = train_stage(params, &dataset, &tokenizer, &config, Stage::Direct).unwrap();
        for (ta, tb) in a.params.param_tensors().iter().zip(b.params.param_tensors()) {
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn two_stage_persists_tagged_checkpoints() {
        let tokenizer = toy_tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ModelParams::init(dims(tokenizer.vocab_size()), &mut rng);
        let utts = toy_utterances(6, 7);
        let config = quick_config(1);
        let dir = tempfile::tempdir().unwrap();
        let outcome = two_stage_train(params, &utts, &tokenizer, &config, dir.path()).unwrap();

        let stage1 = crate::model::load_checkpoint(&outcome.stage1_path).unwrap();
        let stage2 = crate::model::load_checkpoint(&outcome.stage2_path).unwrap();
        assert_eq!(stage1.stage, StageTag::Stage1);
        assert_eq!(stage2.stage, StageTag::Stage2);
        assert_eq!(stage2, outcome.params);

        // Stage 2 resumed from the persisted stage-1 parameters: a fresh
        // stage-2 run from the loaded checkpoint reproduces it.
        let stage2_data = Dataset::new(utts.to_vec(), LabelField::Han, 600).unwrap();
        let redo = train_stage(stage1, &stage2_data, &tokenizer, &config, Stage::Stage2).unwrap();
        assert_eq!(redo.params, outcome.params);

        // Total steps add up across the stages.
        let per_epoch = (6usize.div_ceil(config.batch_size)).div_ceil(config.accum_steps) as u64;
        assert_eq!(
            outcome.total_steps,
            per_epoch * (config.epochs.stage1 + config.epochs.stage2) as u64
        );
    }

    #[test]
    fn pretrain_moves_encoder_and_reinitializes_heads() {
        let tokenizer = toy_tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let init = ModelParams::init(dims(tokenizer.vocab_size()), &mut rng);
        let source = toy_utterances(6, 11);
        let config = quick_config(2);
        let outcome = pretrain_encoder(init.clone(), &source, &tokenizer, &config).unwrap();
        assert_eq!(outcome.params.stage, StageTag::Pretrain);

        let moved = init.encoder_layers[0]
            .weight
            .max_abs_diff(&outcome.params.encoder_layers[0].weight);
        assert!(moved > 1e-6, "encoder did not move: {moved}");

        // Heads differ from both the init and the trained-without-reinit run.
        let trained = train_stage(
            init.clone(),
            &Dataset::new(source.clone(), LabelField::Tailo, 600).unwrap(),
            &tokenizer,
            &config,
            Stage::Pretrain,
        )
        .unwrap();
        assert_eq!(
            trained.params.encoder_layers, outcome.params.encoder_layers,
            "encoder must be the trained one"
        );
        assert_ne!(trained.params.embedding.data(), outcome.params.embedding.data());
        assert_ne!(init.embedding.data(), outcome.params.embedding.data());
    }

    #[test]
    fn source_labels_beat_shuffled_labels() {
        // Sanity check that the synthetic source corpus is learnable: true
        // transcripts reach a lower loss than a shuffled-label control.
        let spec = crate::corpus::ToyLanguageSpec {
            lexicon_size: 12,
            feature_dim: 8,
            ..crate::corpus::ToyLanguageSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let sizes = crate::corpus::SplitSizes { train: 24, dev: 1, test: 1 };
        let summary = crate::corpus::gen_source_corpus(&spec, 0.6, &sizes, dir.path()).unwrap();
        let utts = crate::corpus::load_utterances(&summary.manifests[0].1).unwrap();

        let corpus_text: Vec<String> = utts.iter().map(|u| u.tailo_text.clone()).collect();
        let tokenizer = BpeModel::train(&corpus_text, 300).unwrap();

        let mut shuffled = utts.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut texts: Vec<String> = shuffled.iter().map(|u| u.tailo_text.clone()).collect();
        texts.shuffle(&mut rng);
        // Derangement-ish: rotate once more if the shuffle fixed everything.
        for (u, t) in shuffled.iter_mut().zip(texts) {
            u.tailo_text = t;
        }

        let mut d = dims(tokenizer.vocab_size());
        d.encoder.input_dim = spec.feature_dim;
        let mut config = quick_config(0);
        config.epochs.pretrain = 6;
        config.base_lr = 0.002;
        let init = ModelParams::init(d, &mut rng);

        let real = train_stage(
            init.clone(),
            &Dataset::new(utts, LabelField::Tailo, 600).unwrap(),
            &tokenizer,
            &config,
            Stage::Pretrain,
        )
        .unwrap();
        let control = train_stage(
            init,
            &Dataset::new(shuffled, LabelField::Tailo, 600).unwrap(),
            &tokenizer,
            &config,
            Stage::Pretrain,
        )
        .unwrap();
        let real_loss = real.log.last().unwrap().mean_loss;
        let control_loss = control.log.last().unwrap().mean_loss;
        assert!(
            real_loss < control_loss,
            "true labels {real_loss} should train below shuffled labels {control_loss}"
        );
    }

    #[test]
    fn vocab_mismatch_and_frame_cap() {
        let tokenizer = toy_tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::init(dims(tokenizer.vocab_size() + 5), &mut rng);
        let dataset = Dataset::new(toy_utterances(3, 1), LabelField::Tailo, 600).unwrap();
        assert!(matches!(
            train_stage(params, &dataset, &tokenizer, &quick_config(0), Stage::Stage1),
            Err(TrainingError::VocabMismatch { .. })
        ));

        let (kept, dropped): (usize, usize) = {
            let ds = Dataset::new(toy_utterances(10, 2), LabelField::Tailo, 6).unwrap();
            (ds.len(), ds.excluded())
        };
        assert_eq!(kept + dropped, 10);
        assert!(dropped > 0, "cap at 6 frames should drop something");
        assert!(matches!(
            Dataset::new(toy_utterances(4, 2), LabelField::Tailo, 1),
            Err(TrainingError::EmptyDataset { max_frames: 1 })
        ));
    }

    #[test]
    fn non_finite_features_abort_with_utterance_id() {
        let tokenizer = toy_tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::init(dims(tokenizer.vocab_size()), &mut rng);
        let mut utts = toy_utterances(2, 1);
        utts[1].features.data_mut()[0] = f64::NAN;
        let dataset = Dataset::new(utts, LabelField::Tailo, 600).unwrap();
        let err = train_stage(params, &dataset, &tokenizer, &quick_config(0), Stage::Stage1)
            .unwrap_err();
        assert!(
            matches!(
                err,
                TrainingError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))
            ),
            "got {err:?}"
        );
    }
}
