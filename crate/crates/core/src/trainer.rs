//! Two-stage episodic training.
//!
//! Stage 1 trains the classification network against the inter-class loss
//! on freshly sampled episodes, always with the *initial* support
//! prototypes — purification never runs during training. Stage 2 freezes
//! the classifier (it is taken by shared reference and only sanity-checked)
//! and trains the relation network against the intra-class pair loss.
//!
//! Training episodes may use more support shots than evaluation will
//! ("higher-shot"): prototypes built from more shots are less noisy, which
//! gives the classifier a cleaner learning signal than the 1-shot episodes
//! it will face at test time.
//!
//! Every stage derives all of its randomness from `(seed, fixed stream id)`
//! pairs, so a `(config, seed)` combination reproduces checkpoints
//! bit-for-bit. Validation runs re-create their generator from scratch each
//! time, meaning every checkpoint is scored on the *same* episode sequence
//! and the best-checkpoint selection is a paired comparison.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{sample_episode, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::pcp::{classify, compute_prototypes};
use crate::simnet::{adam_step, loss_inter, loss_intra, AdamState, SimilarityNet};

// Independent RNG streams per purpose; one seed never feeds two consumers.
const STREAM_STAGE1_SAMPLING: u64 = 1;
const STREAM_STAGE1_INIT: u64 = 2;
const STREAM_STAGE1_VALIDATION: u64 = 3;
const STREAM_STAGE2_SAMPLING: u64 = 4;
const STREAM_STAGE2_INIT: u64 = 5;
const STREAM_STAGE2_VALIDATION: u64 = 6;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Hyper-parameters for both training stages.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub ways: usize,
    /// Support shots per class in *training* episodes.
    pub train_shots: usize,
    /// Support shots the model will see at evaluation time; validation
    /// episodes use this so checkpoint selection matches deployment.
    pub eval_shots: usize,
    /// Query samples per class per episode.
    pub queries: usize,
    pub episodes_stage1: usize,
    pub episodes_stage2: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Episodes between validation passes; 0 disables checkpoint selection.
    pub validation_interval: usize,
    /// Episodes per validation pass; 0 disables checkpoint selection.
    pub validation_episodes: usize,
    pub hidden_dims: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            train_shots: 5,
            eval_shots: 1,
            queries: 15,
            episodes_stage1: 20_000,
            episodes_stage2: 10_000,
            learning_rate: 1e-3,
            seed: 0,
            validation_interval: 2_000,
            validation_episodes: 200,
            hidden_dims: [64, 64],
        }
    }
}

impl TrainConfig {
    /// Higher-shot convention: train with 5 shots when evaluation is
    /// 1-shot, with 10 when it is 5-shot, otherwise match the target.
    pub fn higher_shot_for(eval_shots: usize) -> usize {
        match eval_shots {
            1 => 5,
            5 => 10,
            k => k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways == 0 || self.train_shots == 0 || self.eval_shots == 0 || self.queries == 0 {
            return Err(Error::Config(
                "ways, shots, and queries must all be at least 1".into(),
            ));
        }
        if self.train_shots < self.eval_shots {
            return Err(Error::Config(format!(
                "training shots ({}) must be at least the evaluation shots ({})",
                self.train_shots, self.eval_shots
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden widths must be at least 1".into()));
        }
        Ok(())
    }

    fn selection_enabled(&self) -> bool {
        self.validation_interval > 0 && self.validation_episodes > 0
    }
}

/// One per-episode loss observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub episode: usize,
    pub stage: u8,
    pub loss: f64,
}

/// One validation pass. `metric` is stage-dependent: episode accuracy in
/// stage 1 (higher is better), mean pair loss in stage 2 (lower is better).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationRecord {
    pub episode: usize,
    pub stage: u8,
    pub metric: f64,
}

/// Complete loss trace of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    losses: Vec<LossRecord>,
    validations: Vec<ValidationRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> &[LossRecord] {
        &self.losses
    }

    pub fn validations(&self) -> &[ValidationRecord] {
        &self.validations
    }

    /// Concatenates another stage's log (used by callers that train both
    /// stages back to back).
    pub fn extend(&mut self, other: TrainLog) {
        self.losses.extend(other.losses);
        self.validations.extend(other.validations);
    }

    /// Losses of one stage in episode order.
    pub fn stage_losses(&self, stage: u8) -> Vec<f64> {
        self.losses
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.loss)
            .collect()
    }

    /// `episode,stage,loss` CSV with a header row. f64 values use
    /// shortest-round-trip formatting, so the text is deterministic.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,stage,loss\n");
        for r in &self.losses {
            out.push_str(&format!("{},{},{}\n", r.episode, r.stage, r.loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Fraction of validation episodes' queries the classifier gets right at
/// evaluation shape, without purification. The RNG is rebuilt from scratch
/// so every call scores the same episodes.
fn stage1_validation_accuracy(
    dataset: &EmbeddingDataset,
    net: &SimilarityNet,
    config: &TrainConfig,
) -> Result<f64> {
    let mut rng = stream_rng(config.seed, STREAM_STAGE1_VALIDATION);
    let mut correct = 0usize;
    let mut total = 0usize;
    for _ in 0..config.validation_episodes {
        let episode = sample_episode(dataset, config.ways, config.eval_shots, config.queries, &mut rng)?;
        let prototypes = compute_prototypes(episode.support(), episode.class_map())?;
        let (_, assignment) = classify(episode.query(), &prototypes, net)?;
        let truth = episode.query_local_labels();
        correct += assignment
            .predicted()
            .iter()
            .zip(&truth)
            .filter(|(p, t)| p == t)
            .count();
        total += truth.len();
    }
    Ok(correct as f64 / total as f64)
}

/// Mean pair loss over validation episodes, same pairing guarantee as the
/// stage-1 metric.
fn stage2_validation_loss(
    dataset: &EmbeddingDataset,
    net: &SimilarityNet,
    config: &TrainConfig,
) -> Result<f64> {
    let mut rng = stream_rng(config.seed, STREAM_STAGE2_VALIDATION);
    let mut sum = 0.0;
    for _ in 0..config.validation_episodes {
        let episode = sample_episode(dataset, config.ways, config.train_shots, config.queries, &mut rng)?;
        let (loss, _) = loss_intra(net, &episode)?;
        sum += loss;
    }
    Ok(sum / config.validation_episodes as f64)
}

/// Trains the classification network: per episode, initial prototypes →
/// inter-class loss → one Adam step. Returns the best-validation checkpoint
/// (or the final network when selection is disabled) and the loss trace.
pub fn train_stage1(dataset: &EmbeddingDataset, config: &TrainConfig) -> Result<(SimilarityNet, TrainLog)> {
    config.validate()?;
    let dim = dataset
        .dimension()
        .ok_or_else(|| Error::Config("training dataset is empty".into()))?;

    let mut init_rng = stream_rng(config.seed, STREAM_STAGE1_INIT);
    let mut net = SimilarityNet::init(dim, config.hidden_dims, &mut init_rng)?;
    let mut adam = AdamState::new(&net, config.learning_rate);
    let mut sample_rng = stream_rng(config.seed, STREAM_STAGE1_SAMPLING);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, SimilarityNet)> = None;

    for episode_idx in 0..config.episodes_stage1 {
        let episode = sample_episode(
            dataset,
            config.ways,
            config.train_shots,
            config.queries,
            &mut sample_rng,
        )?;
        let prototypes = compute_prototypes(episode.support(), episode.class_map())?;
        let (loss, grads) = loss_inter(&net, &episode, &prototypes)?;
        adam_step(&mut net, &grads, &mut adam)?;
        log.losses.push(LossRecord {
            episode: episode_idx,
            stage: 1,
            loss,
        });

        if config.selection_enabled() && (episode_idx + 1) % config.validation_interval == 0 {
            let metric = stage1_validation_accuracy(dataset, &net, config)?;
            log.validations.push(ValidationRecord {
                episode: episode_idx,
                stage: 1,
                metric,
            });
            if best.as_ref().is_none_or(|(m, _)| metric > *m) {
                best = Some((metric, net.clone()));
            }
        }
    }

    if config.selection_enabled() {
        // Let the final state compete even when the budget is not a
        // multiple of the validation interval.
        let metric = stage1_validation_accuracy(dataset, &net, config)?;
        log.validations.push(ValidationRecord {
            episode: config.episodes_stage1,
            stage: 1,
            metric,
        });
        if best.as_ref().is_none_or(|(m, _)| metric > *m) {
            best = Some((metric, net.clone()));
        }
    }

    let chosen = best.map(|(_, n)| n).unwrap_or(net);
    Ok((chosen, log))
}

/// Trains the relation network against the intra-class pair loss; the
/// classifier is frozen and only consulted for a width sanity check.
pub fn train_stage2(
    dataset: &EmbeddingDataset,
    classifier: &SimilarityNet,
    config: &TrainConfig,
) -> Result<(SimilarityNet, TrainLog)> {
    config.validate()?;
    let dim = dataset
        .dimension()
        .ok_or_else(|| Error::Config("training dataset is empty".into()))?;
    if classifier.input_dim() != dim {
        return Err(Error::Shape(format!(
            "classifier expects width {}, dataset has {}",
            classifier.input_dim(),
            dim
        )));
    }

    let mut init_rng = stream_rng(config.seed, STREAM_STAGE2_INIT);
    let mut net = SimilarityNet::init(dim, config.hidden_dims, &mut init_rng)?;
    let mut adam = AdamState::new(&net, config.learning_rate);
    let mut sample_rng = stream_rng(config.seed, STREAM_STAGE2_SAMPLING);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, SimilarityNet)> = None;

    for episode_idx in 0..config.episodes_stage2 {
        let episode = sample_episode(
            dataset,
            config.ways,
            config.train_shots,
            config.queries,
            &mut sample_rng,
        )?;
        let (loss, grads) = loss_intra(&net, &episode)?;
        adam_step(&mut net, &grads, &mut adam)?;
        log.losses.push(LossRecord {
            episode: episode_idx,
            stage: 2,
            loss,
        });

        if config.selection_enabled() && (episode_idx + 1) % config.validation_interval == 0 {
            let metric = stage2_validation_loss(dataset, &net, config)?;
            log.validations.push(ValidationRecord {
                episode: episode_idx,
                stage: 2,
                metric,
            });
            if best.as_ref().is_none_or(|(m, _)| metric < *m) {
                best = Some((metric, net.clone()));
            }
        }
    }

    if config.selection_enabled() {
        let metric = stage2_validation_loss(dataset, &net, config)?;
        log.validations.push(ValidationRecord {
            episode: config.episodes_stage2,
            stage: 2,
            metric,
        });
        if best.as_ref().is_none_or(|(m, _)| metric < *m) {
            best = Some((metric, net.clone()));
        }
    }

    let chosen = best.map(|(_, n)| n).unwrap_or(net);
    Ok((chosen, log))
}
