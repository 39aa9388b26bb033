//! Objective, optimiser and training loop.

mod checkpoint;

#[cfg(test)]
mod tests;

use std::io::Write;
use std::sync::mpsc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use crate::autodiff::Var;
use crate::data::augment::{augment, permute_channels, AugmentConfig, CHANNEL_PERMUTATIONS};
use crate::data::{sample_episode, DatasetHandle, Episode, Partition, SplitConfig};
use crate::error::{Error, Result};
use crate::model::{LatentSource, Model, ParameterSet, Session, TrainForward};
use crate::rng::{self, NoiseSource, ZeroNoise};

const EPISODE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Default weight on each KL term. The cross-entropy is averaged over the
/// 64x64 query pixels, so this puts the KL on a per-pixel scale.
pub const DEFAULT_KL_WEIGHT: f64 = 1.0 / 4096.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Episodes per optimiser step.
    pub batch_size: usize,
    pub k_shot: usize,
    pub learning_rate: f64,
    pub beta_z: f64,
    pub beta_m: f64,
    /// Ramp both KL weights linearly from 0 over the first 10% of steps.
    pub kl_warmup: bool,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    /// Decode from prior means and drop the KL terms.
    pub deterministic: bool,
    pub latent_source: LatentSource,
    /// Replace latent noise by zeros.
    pub zero_noise: bool,
    pub augment: Option<AugmentConfig>,
    pub clip_norm: f64,
    /// Prototype and attention samples per training episode; only 1 is
    /// supported.
    pub samples_l: usize,
    pub samples_m: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 4,
            k_shot: 1,
            learning_rate: 1e-4,
            beta_z: DEFAULT_KL_WEIGHT,
            beta_m: DEFAULT_KL_WEIGHT,
            kl_warmup: false,
            seed: 0,
            checkpoint_interval: 0,
            deterministic: false,
            latent_source: LatentSource::Posterior,
            zero_noise: false,
            augment: Some(AugmentConfig::default()),
            clip_norm: 10.0,
            samples_l: 1,
            samples_m: 1,
        }
    }
}

/// Settings that actually drive a step once the deterministic flag is folded in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub beta_z: f64,
    pub beta_m: f64,
    pub source: LatentSource,
    pub zero_noise: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.batch_size == 0 || self.k_shot == 0 {
            return bad("batch_size and k_shot must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta_z >= 0.0 && self.beta_m >= 0.0) {
            return bad("KL weights must be non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.samples_l != 1 || self.samples_m != 1 {
            return bad("training draws exactly one prototype and one attention sample (L = M = 1)");
        }
        Ok(())
    }

    /// Effective settings at step `iteration` (0-based).
    pub fn settings(&self, iteration: usize) -> StepSettings {
        if self.deterministic {
            return StepSettings {
                beta_z: 0.0,
                beta_m: 0.0,
                source: LatentSource::Prior,
                zero_noise: true,
            };
        }
        let ramp = if self.kl_warmup {
            let span = (self.iterations as f64 * 0.1).max(1.0);
            ((iteration + 1) as f64 / span).min(1.0)
        } else {
            1.0
        };
        StepSettings {
            beta_z: self.beta_z * ramp,
            beta_m: self.beta_m * ramp,
            source: self.latent_source,
            zero_noise: self.zero_noise,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub kl_prototype: f64,
    pub kl_attention: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.cross_entropy += other.cross_entropy;
        self.kl_prototype += other.kl_prototype;
        self.kl_attention += other.kl_attention;
    }

    fn scaled(mut self, f: f64) -> Self {
        self.total *= f;
        self.cross_entropy *= f;
        self.kl_prototype *= f;
        self.kl_attention *= f;
        self
    }
}

/// Builds `ce + beta_z * kl_z + beta_m * kl_m` on the session's tape. The KL
/// of the attention latent is omitted when attention is disabled.
pub fn elbo_loss(
    session: &mut Session<'_>,
    forward: &TrainForward,
    query_mask: &crate::math::BinaryMask,
    beta_z: f64,
    beta_m: f64,
) -> (Var, LossBreakdown) {
    let attention = session.model().config.attention_enabled;
    let tape = &mut session.tape;
    let ce = tape.cross_entropy(forward.logits, query_mask.data().to_vec());
    let (q, p) = (forward.prototype_posterior, forward.prototype_prior);
    let kz = tape.kl_diag(q.mean, q.log_var, p.mean, p.log_var);
    let weighted = tape.scale(kz, beta_z);
    let mut total = tape.add(ce, weighted);
    let mut kl_attention = 0.0;
    if attention {
        let (q, p) = (forward.attention_posterior, forward.attention_prior);
        let km = tape.kl_diag(q.mean, q.log_var, p.mean, p.log_var);
        let weighted = tape.scale(km, beta_m);
        total = tape.add(total, weighted);
        kl_attention = tape.value(km).item();
    }
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        cross_entropy: tape.value(ce).item(),
        kl_prototype: tape.value(kz).item(),
        kl_attention,
    };
    (total, breakdown)
}

/// Adaptive-moment optimiser state. Moments are kept at `f32` precision so a
/// checkpoint captures them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: ParameterSet,
    pub v: ParameterSet,
}

impl Adam {
    pub fn new(params: &ParameterSet) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Applies one update; parameters are rounded to `f32` afterwards.
    pub fn update(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let iter = params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for (((name, p), (gname, g)), ((_, m), (_, v))) in iter {
            debug_assert_eq!(name, gname);
            let (p, g) = (p.data_mut(), g.data());
            for (i, gi) in g.iter().enumerate() {
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + self.epsilon);
            }
        }
        for (_, t) in params.iter_mut().chain(self.m.iter_mut()).chain(self.v.iter_mut()) {
            t.round_to_f32();
        }
    }
}

/// An episode with the seed its latent noise is derived from.
#[derive(Clone, Debug)]
pub struct SeededEpisode {
    pub seed: u64,
    pub episode: Episode,
}

/// Loss and parameter gradients for one episode.
pub fn episode_gradients(
    model: &Model,
    episode: &Episode,
    settings: StepSettings,
    noise: &mut dyn NoiseSource,
) -> Result<(LossBreakdown, ParameterSet)> {
    let cfg = &model.config;
    let nz = noise.draw(cfg.prototype_dim);
    let nm = noise.draw(cfg.attention_dim);
    let mut s = model.session();
    let fwd = s.forward_train(episode, settings.source, nz, nm)?;
    let (total, breakdown) = elbo_loss(&mut s, &fwd, &episode.query.mask, settings.beta_z, settings.beta_m);
    let mut grads = s.tape.backward(total);
    Ok((breakdown, s.parameter_gradients(&mut grads)))
}

/// One optimiser step on the mean loss of `batch`. Episodes are processed in
/// parallel and their gradients summed in batch order.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[SeededEpisode],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let settings = cfg.settings(iteration);
    let results: Vec<Result<(LossBreakdown, ParameterSet)>> = batch
        .par_iter()
        .map(|item| {
            let out = if settings.zero_noise {
                episode_gradients(model, &item.episode, settings, &mut ZeroNoise)
            } else {
                let mut noise = rng::stream(item.seed, NOISE_STREAM);
                episode_gradients(model, &item.episode, settings, &mut noise)
            }?;
            if !out.0.total.is_finite() || !out.1.is_finite() {
                return Err(Error::NonFiniteLoss {
                    seed: item.seed,
                    detail: format!("{:?}", out.0),
                });
            }
            Ok(out)
        })
        .collect();
    let mut sum = LossBreakdown::default();
    let mut grads = model.params.zeros_like();
    for r in results {
        let (loss, g) = r?;
        sum.accumulate(&loss);
        grads.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    let norm = grads.global_norm();
    if norm > cfg.clip_norm {
        grads.scale(cfg.clip_norm / norm);
    }
    adam.update(&mut model.params, &grads, cfg.learning_rate);
    Ok(sum.scaled(inv))
}

/// Seed of the `index`-th training episode of a run.
pub fn episode_seed(run_seed: u64, index: u64) -> u64 {
    rng::mix(run_seed, index)
}

/// Draws and augments training episode `index` of a run.
pub fn training_episode(
    ds: &DatasetHandle,
    split: &SplitConfig,
    cfg: &TrainConfig,
    index: u64,
) -> Result<SeededEpisode> {
    let seed = episode_seed(cfg.seed, index);
    let mut r = rng::stream(seed, EPISODE_STREAM);
    let mut episode = sample_episode(ds, split, Partition::Train, cfg.k_shot, &mut r)?;
    if let Some(aug) = &cfg.augment {
        for s in episode.support.iter_mut().chain(std::iter::once(&mut episode.query)) {
            *s = augment(s, aug, &mut r);
        }
        if aug.episode_channel_permutation {
            let perm = CHANNEL_PERMUTATIONS[r.random_range(0..CHANNEL_PERMUTATIONS.len())];
            for s in episode.support.iter_mut().chain(std::iter::once(&mut episode.query)) {
                s.image = permute_channels(&s.image, perm);
            }
        }
    }
    Ok(SeededEpisode { seed, episode })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub total: f64,
    pub cross_entropy: f64,
    pub kl_prototype: f64,
    pub kl_attention: f64,
    pub wall_clock_s: f64,
}

/// Where and how often to checkpoint, and where to log.
#[derive(Default)]
pub struct TrainIo<'a> {
    pub log: Option<&'a mut dyn Write>,
    /// Checkpoints are written as `<dir>/checkpoint-<iteration>.apic` plus
    /// `<dir>/latest.apic`.
    pub checkpoint_dir: Option<std::path::PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub adam: Adam,
    pub history: Vec<LossBreakdown>,
}

/// Trains `model` from a fresh optimiser state.
pub fn train(
    model: Model,
    ds: &DatasetHandle,
    split: &SplitConfig,
    cfg: &TrainConfig,
    io: TrainIo<'_>,
) -> Result<TrainOutcome> {
    let adam = Adam::new(&model.params);
    resume(model, adam, 0, ds, split, cfg, io)
}

/// Continues training from step `start` with the given optimiser state.
/// Episode `i * batch + j` of the run is a pure function of the seed, so a
/// resumed run sees the same data as an uninterrupted one.
pub fn resume(
    mut model: Model,
    mut adam: Adam,
    start: usize,
    ds: &DatasetHandle,
    split: &SplitConfig,
    cfg: &TrainConfig,
    mut io: TrainIo<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.deterministic = cfg.deterministic;
    if let Some(dir) = &io.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let clock = Instant::now();
    let mut history = Vec::with_capacity(cfg.iterations.saturating_sub(start));
    let (tx, rx) = mpsc::sync_channel::<Result<Vec<SeededEpisode>>>(2);
    std::thread::scope(|scope| -> Result<()> {
        // Owned by this closure so an early error unblocks the producer.
        let rx = rx;
        scope.spawn(move || {
            for it in start..cfg.iterations {
                let batch = (0..cfg.batch_size)
                    .map(|j| training_episode(ds, split, cfg, (it * cfg.batch_size + j) as u64))
                    .collect::<Result<Vec<_>>>();
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        for it in start..cfg.iterations {
            let batch = rx.recv().expect("episode producer stopped early")?;
            let loss = train_step(&mut model, &mut adam, &batch, cfg, it)?;
            history.push(loss);
            if let Some(log) = io.log.as_mut() {
                let rec = StepRecord {
                    iteration: it + 1,
                    total: loss.total,
                    cross_entropy: loss.cross_entropy,
                    kl_prototype: loss.kl_prototype,
                    kl_attention: loss.kl_attention,
                    wall_clock_s: clock.elapsed().as_secs_f64(),
                };
                serde_json::to_writer(&mut **log, &rec)?;
                writeln!(log).map_err(|e| Error::io("<training log>", e))?;
            }
            let done = it + 1;
            if let Some(dir) = &io.checkpoint_dir {
                if cfg.checkpoint_interval > 0 && (done % cfg.checkpoint_interval == 0 || done == cfg.iterations) {
                    let ck = Checkpoint::capture(&model, &adam, done, cfg);
                    save_checkpoint(&ck, &dir.join(format!("checkpoint-{done}.apic")))?;
                    save_checkpoint(&ck, &dir.join("latest.apic"))?;
                }
            }
        }
        Ok(())
    })?;
    Ok(TrainOutcome { model, adam, history })
}
