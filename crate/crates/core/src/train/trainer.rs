use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{global_grad_norm, kl_consistency, perturb_embeddings, AdamW, AdvConfig, Stage, TrainConfig};
use crate::data::SceneSample;
use crate::input::{
    build_finetune_sample, build_pretrain_sample, collate, EncoderRow, MlmConfig, MultimodalBatch,
    Vocab,
};
use crate::model::{
    checkpoint_bytes, forward_from_embeddings, save_checkpoint, BatchTensors, Checkpoint, Dropout,
    ModelState, Objective,
};
use crate::{Error, Result};

const PERMUTATION_SALT: u64 = 0x7065_726d_7574_6531;
const ROW_SALT: u64 = 0x726f_7773_6565_6431;
const ADV_SALT: u64 = 0x6164_7665_7273_6131;
const DROPOUT_SALT: u64 = 0x6472_6f70_6f75_7431;

fn keyed_rng(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(stream);
    rng
}

/// One JSONL metrics record. `mlm` and `rpp` are `None` when fine-tuning;
/// `skipped` counts skipped steps so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: Stage,
    pub gen: f64,
    pub mlm: Option<f64>,
    pub rpp: Option<f64>,
    pub adv: f64,
    pub kl: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub skipped: u64,
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainingSession {
    pub state: ModelState,
    pub optimizer: AdamW,
    /// Steps taken so far, skipped ones included.
    pub step: u64,
    pub skipped: u64,
}

impl TrainingSession {
    pub fn new(state: ModelState) -> Result<Self> {
        Ok(Self {
            optimizer: AdamW::new(&state)?,
            state,
            step: 0,
            skipped: 0,
        })
    }

    /// Continues from a checkpoint; fresh moments if it carries none.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, Vocab)> {
        let optimizer = match ck.optimizer {
            Some(m) => AdamW::from_moments(&ck.state, m)?,
            None => AdamW::new(&ck.state)?,
        };
        Ok((
            Self {
                state: ck.state,
                optimizer,
                step: ck.step,
                skipped: ck.skipped,
            },
            ck.vocab,
        ))
    }

    pub fn to_checkpoint(&self, vocab: &Vocab) -> Checkpoint {
        Checkpoint {
            state: self.state.clone(),
            vocab: vocab.clone(),
            step: self.step,
            skipped: self.skipped,
            optimizer: Some(self.optimizer.moments()),
        }
    }
}

fn objective(cfg: &TrainConfig) -> Objective {
    match cfg.stage {
        Stage::Pretrain => Objective::Pretrain(cfg.loss_weights()),
        Stage::Finetune => Objective::Finetune,
    }
}

/// One optimizer update on `L_clean + L_adv + λ_kl·KL`, or on `L_clean`
/// alone when the adversary is disabled.
///
/// A non-finite loss, adversarial gradient or parameter gradient skips the
/// update: parameters and moments stay as they were, the step counter still
/// advances and the skip counter increments.
pub fn train_step(
    session: &mut TrainingSession,
    batch: &MultimodalBatch,
    cfg: &TrainConfig,
    adv: &AdvConfig,
) -> Result<StepMetrics> {
    let step = session.step;
    let state = &session.state;
    let bt = BatchTensors::new(batch, state)?;
    let objective = objective(cfg);
    let rate = state.config().dropout;
    let drop_seed = cfg.seed ^ DROPOUT_SALT ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let new_drop = || Dropout::new(rate, drop_seed);

    let emb = state.embed(&bt)?;
    let clean = forward_from_embeddings(state, &emb, &bt, objective, Some(&new_drop()))?;
    let comps = clean.components()?;
    let mut metrics = StepMetrics {
        step: step + 1,
        stage: cfg.stage,
        gen: comps.gen,
        mlm: comps.mlm,
        rpp: comps.rpp,
        adv: 0.0,
        kl: 0.0,
        total: comps.total,
        grad_norm: f64::NAN,
        skipped: session.skipped,
    };

    let total = if adv.enabled() {
        let eligible = bt.modality_mask(adv.target_modality.at(step), state.dtype())?;
        let mut rng = keyed_rng(cfg.seed, ADV_SALT, step);
        let delta = perturb_embeddings(&emb, &eligible, adv, &mut rng, |e| {
            Ok(forward_from_embeddings(state, e, &bt, objective, Some(&new_drop()))?.total)
        });
        let delta = match delta {
            Ok(d) => d,
            Err(Error::Numerical(_)) => return Ok(skip(session, metrics)),
            Err(e) => return Err(e),
        };
        let perturbed =
            forward_from_embeddings(state, &(&emb + &delta)?, &bt, objective, Some(&new_drop()))?;
        let kl = kl_consistency(&clean.gen_logits, &perturbed.gen_logits, &bt.decoder_targets)?;
        metrics.adv = crate::model::scalar(&perturbed.total)?;
        metrics.kl = crate::model::scalar(&kl)?;
        ((&clean.total + &perturbed.total)? + kl.affine(adv.lambda_kl, 0.0)?)?
    } else {
        clean.total.clone()
    };
    metrics.total = crate::model::scalar(&total)?;
    if !metrics.total.is_finite() {
        return Ok(skip(session, metrics));
    }

    let grads = total.backward()?;
    let grad_norm = global_grad_norm(state, &grads)?;
    metrics.grad_norm = grad_norm;
    if !grad_norm.is_finite() {
        return Ok(skip(session, metrics));
    }
    let scale = if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
        cfg.clip_norm / grad_norm
    } else {
        1.0
    };
    session.optimizer.step(&session.state, &grads, scale, cfg)?;
    session.step += 1;
    Ok(metrics)
}

fn skip(session: &mut TrainingSession, mut metrics: StepMetrics) -> StepMetrics {
    session.step += 1;
    session.skipped += 1;
    metrics.skipped = session.skipped;
    metrics
}

/// Maps a step to dataset indices: the `k`-th sample drawn overall is entry
/// `k mod n` of the seeded permutation for epoch `k / n`.
#[derive(Debug, Clone)]
pub struct BatchPlanner {
    n: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchPlanner {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            n,
            batch_size: batch_size.max(1),
            seed,
            cached: None,
        })
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut keyed_rng(self.seed, PERMUTATION_SALT, epoch));
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    /// `(draw number, dataset index)` pairs for `step`.
    pub fn draws(&mut self, step: u64) -> Vec<(u64, usize)> {
        let start = step * self.batch_size as u64;
        (start..start + self.batch_size as u64)
            .map(|k| {
                let n = self.n as u64;
                (k, self.permutation(k / n)[(k % n) as usize])
            })
            .collect()
    }
}

/// Samples a stage can train on: pre-training needs objects and scene tokens.
pub fn trainable_samples(samples: &[SceneSample], stage: Stage) -> Vec<&SceneSample> {
    samples
        .iter()
        .filter(|s| stage == Stage::Finetune || (!s.objects.is_empty() && !s.scene_tokens.is_empty()))
        .collect()
}

/// Encoder rows for `step`. Pre-training draws the reconstruction target and
/// the MLM corruption from a stream keyed on the draw number.
pub fn rows_for_step(
    samples: &[&SceneSample],
    vocab: &Vocab,
    planner: &mut BatchPlanner,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<EncoderRow>> {
    let mlm = MlmConfig::default();
    planner
        .draws(step)
        .into_iter()
        .map(|(k, i)| {
            let s = samples[i];
            match cfg.stage {
                Stage::Finetune => build_finetune_sample(s, vocab),
                Stage::Pretrain => {
                    let mut rng = keyed_rng(cfg.seed, ROW_SALT, k);
                    let target = rng.random_range(0..s.scene_tokens.len());
                    build_pretrain_sample(s, target, vocab, &mut rng, Some(&mlm))
                }
            }
        })
        .collect()
}

/// Destination for periodic checkpoints.
pub trait CheckpointSink {
    fn save(&mut self, ck: &Checkpoint) -> Result<()>;
}

/// Discards checkpoints.
pub struct NoCheckpoints;

impl CheckpointSink for NoCheckpoints {
    fn save(&mut self, _: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Keeps serialized checkpoints in memory, keyed by step.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub saved: Vec<(u64, Vec<u8>)>,
}

impl CheckpointSink for MemorySink {
    fn save(&mut self, ck: &Checkpoint) -> Result<()> {
        self.saved.push((ck.step, checkpoint_bytes(ck)?));
        Ok(())
    }
}

/// Writes `step-NNNNNN.safetensors` and overwrites `last.safetensors`.
#[derive(Debug, Clone)]
pub struct DirectorySink {
    dir: PathBuf,
}

impl DirectorySink {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }

    pub fn last_path(&self) -> PathBuf {
        self.dir.join("last.safetensors")
    }
}

impl CheckpointSink for DirectorySink {
    fn save(&mut self, ck: &Checkpoint) -> Result<()> {
        save_checkpoint(&self.dir.join(format!("step-{:06}.safetensors", ck.step)), ck)?;
        save_checkpoint(&self.last_path(), ck)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub session: TrainingSession,
    pub history: Vec<StepMetrics>,
}

/// Trains from `session.step` up to `cfg.total_steps`, checkpointing every
/// `cfg.checkpoint_every` steps and once at the end. Deterministic given
/// the seed, so a run resumed from a checkpoint reproduces the metrics of an
/// uninterrupted one.
pub fn run_training(
    samples: &[SceneSample],
    vocab: &Vocab,
    session: TrainingSession,
    cfg: &TrainConfig,
    adv: &AdvConfig,
    sink: &mut dyn CheckpointSink,
    on_step: &mut dyn FnMut(&StepMetrics) -> Result<()>,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    adv.validate()?;
    let usable = trainable_samples(samples, cfg.stage);
    let mut planner = BatchPlanner::new(usable.len(), cfg.batch_size, cfg.seed)?;
    let mut session = session;
    let mut history = Vec::new();
    let mut saved_at = None;
    while session.step < cfg.total_steps {
        let rows = rows_for_step(&usable, vocab, &mut planner, cfg, session.step)?;
        let batch = collate(&rows)?;
        let metrics = train_step(&mut session, &batch, cfg, adv)?;
        on_step(&metrics)?;
        history.push(metrics);
        if cfg.checkpoint_every > 0 && session.step % cfg.checkpoint_every == 0 {
            sink.save(&session.to_checkpoint(vocab))?;
            saved_at = Some(session.step);
        }
    }
    if saved_at != Some(session.step) {
        sink.save(&session.to_checkpoint(vocab))?;
    }
    Ok(TrainingOutcome { session, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planner_covers_each_epoch_once() {
        let mut p = BatchPlanner::new(10, 4, 3).unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|s| p.draws(s)).map(|(_, i)| i).collect();
        assert_eq!(seen.len(), 20);
        let (first, second) = seen.split_at_mut(10);
        first.sort();
        second.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>().as_slice());
        assert_eq!(second, first);
    }

    #[test]
    fn planner_is_random_access() {
        let mut a = BatchPlanner::new(7, 3, 9).unwrap();
        let mut b = BatchPlanner::new(7, 3, 9).unwrap();
        let forward: Vec<_> = (0..6).map(|s| a.draws(s)).collect();
        let backward: Vec<_> = (0..6).rev().map(|s| b.draws(s)).collect();
        let mut backward = backward;
        backward.reverse();
        assert_eq!(forward, backward);
    }
}
