//! Policy-gradient fine-tuning of a denoising policy.
//!
//! Each epoch samples trajectories with the current policy, scores their final
//! images, turns rewards into per-prompt advantages and ascends the clipped
//! importance-ratio objective over every step of every trajectory.

mod lora;
pub mod toy;

use std::path::Path;
use std::sync::Arc;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    batch_log_prob, sample_batch, stack_step, LatentCodec, NoisePredictor, NoiseSchedule, SampleRequest,
    SamplerConfig, Trajectory,
};
use crate::nn::{global_norm, ParamStore};
use crate::reward::{PromptStatTracker, RewardLogEntry, RewardStack};
use crate::rng::{derive_seed, seeded, StreamRng};
use crate::{Error, Image, Result};

pub use lora::{
    apply_adapter, lora_linear, matrix_rank, randomize, sd2_unet_lora_params, LoraLinear, LowRankAdapter,
    SD2_CROSS_ATTENTION_DIM, SD2_UNET_BLOCK_WIDTHS, SD2_UNET_TOTAL_WITH_ADAPTERS, SD2_UNET_TRAINABLE,
};

/// The three prompts used for fine-tuning.
pub const DEFAULT_PROMPTS: [&str; 3] = ["painting", "drawing", "art"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub effective_batch: usize,
    pub batches_per_epoch: usize,
    pub inference_steps: usize,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub clip_range: f64,
    /// Optimization passes over each sampled round.
    pub inner_epochs: usize,
    pub eta: f64,
    pub prompts: Vec<String>,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            effective_batch: 8,
            batches_per_epoch: 32,
            inference_steps: 30,
            adapter_rank: 4,
            adapter_alpha: 4.0,
            lr: 0.0015,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-4,
            adam_eps: 1e-8,
            clip_range: 0.2,
            inner_epochs: 1,
            eta: 1.0,
            prompts: DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("effective_batch", self.effective_batch),
            ("batches_per_epoch", self.batches_per_epoch),
            ("inference_steps", self.inference_steps),
            ("adapter_rank", self.adapter_rank),
            ("inner_epochs", self.inner_epochs),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("trainer.{k} must be positive")));
        }
        let reals = [
            ("adapter_alpha", self.adapter_alpha),
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
            ("eta", self.eta),
        ];
        if let Some((k, v)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("trainer.{k} must be positive, got {v}")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("trainer.weight_decay must be >= 0".into()));
        }
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return Err(Error::Config(format!("trainer.clip_range {} outside (0, 1)", self.clip_range)));
        }
        if self.eta > 1.0 {
            return Err(Error::Config("trainer.eta must be in (0, 1]".into()));
        }
        if self.prompts.is_empty() || self.prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::Config("trainer.prompts must be nonempty strings".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> ParamsAdamW {
        ParamsAdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)` with `r = exp(new - old)`.
pub fn clipped_objective(logp_new: f64, logp_old: f64, advantage: f64, clip_range: f64) -> f64 {
    let r = (logp_new - logp_old).exp();
    let clipped = r.clamp(1.0 - clip_range, 1.0 + clip_range);
    (r * advantage).min(clipped * advantage)
}

/// Derivative of [`clipped_objective`] with respect to `logp_new`.
///
/// The unclipped branch contributes `r A`; when the clipped branch is the
/// minimum the objective is flat in `logp_new`.
pub fn clipped_objective_grad(logp_new: f64, logp_old: f64, advantage: f64, clip_range: f64) -> f64 {
    let r = (logp_new - logp_old).exp();
    let clipped = r.clamp(1.0 - clip_range, 1.0 + clip_range);
    if r * advantage <= clipped * advantage {
        r * advantage
    } else {
        0.0
    }
}

/// A noise predictor with a designated trainable subset.
pub trait TrainablePolicy: NoisePredictor {
    fn trainable_vars(&self) -> Vec<Var>;
    fn params(&self) -> &ParamStore;
}

impl TrainablePolicy for toy::ToyDenoiser {
    fn trainable_vars(&self) -> Vec<Var> {
        self.adapter_vars()
    }

    fn params(&self) -> &ParamStore {
        self.store()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_novelty: f64,
    pub mean_utility: f64,
    pub mean_advantage: f64,
    /// Fraction of (sample, step) ratios outside `1 +- clip_range`.
    pub clip_fraction: f64,
    /// Clip fraction of the first update after sampling.
    pub first_clip_fraction: f64,
    /// Mean gradient norm over updates.
    pub grad_norm: f64,
    pub updates: usize,
    /// Updates skipped because the gradient was exactly zero.
    pub skipped_updates: usize,
}

pub struct DdpoTrainer<'a, P: TrainablePolicy> {
    policy: &'a P,
    config: TrainerConfig,
    schedule: NoiseSchedule,
    reward: RewardStack,
    codec: Arc<dyn LatentCodec>,
    context_of: Box<dyn Fn(&str) -> Vec<f64> + 'a>,
    tracker: PromptStatTracker,
    optimizer: AdamW,
    trainable: Vec<Var>,
    rng: StreamRng,
    epoch: usize,
    last_log: Vec<RewardLogEntry>,
}

impl<'a, P: TrainablePolicy> DdpoTrainer<'a, P> {
    pub fn new(
        policy: &'a P,
        config: TrainerConfig,
        schedule: NoiseSchedule,
        reward: RewardStack,
        codec: Arc<dyn LatentCodec>,
        context_of: Box<dyn Fn(&str) -> Vec<f64> + 'a>,
    ) -> Result<Self> {
        config.validate()?;
        let trainable = policy.trainable_vars();
        if trainable.is_empty() {
            return Err(Error::invalid("policy exposes no trainable parameters"));
        }
        let optimizer = AdamW::new(trainable.clone(), config.adamw())?;
        let rng = seeded(derive_seed(config.seed, &[0x7261_6e64]));
        Ok(Self {
            policy,
            config,
            schedule,
            reward,
            codec,
            context_of,
            tracker: PromptStatTracker::default(),
            optimizer,
            trainable,
            rng,
            epoch: 0,
            last_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Reward rows of the most recent epoch.
    pub fn last_log(&self) -> &[RewardLogEntry] {
        &self.last_log
    }

    pub fn decode(&self, trajectory: &Trajectory) -> Result<Image> {
        let t = trajectory.final_tensor(self.policy.device())?;
        self.codec.decode_image(&t)
    }

    fn sample_round(&mut self) -> Result<Vec<Trajectory>> {
        let n = self.config.batches_per_epoch * self.config.effective_batch;
        let requests: Vec<SampleRequest> = (0..n)
            .map(|i| {
                let prompt = self.config.prompts[self.rng.random_range(0..self.config.prompts.len())].clone();
                SampleRequest {
                    context: (self.context_of)(&prompt),
                    prompt,
                    seed: derive_seed(self.config.seed, &[self.epoch as u64, i as u64]),
                }
            })
            .collect();
        let sampler = SamplerConfig {
            n_steps: self.config.inference_steps,
            eta: self.config.eta,
        };
        let mut out = Vec::with_capacity(n);
        for chunk in requests.chunks(self.config.effective_batch) {
            out.extend(sample_batch(self.policy, &self.schedule, &sampler, chunk)?);
        }
        Ok(out)
    }

    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let trajectories = self.sample_round()?;
        let mut records = Vec::with_capacity(trajectories.len());
        for (i, tr) in trajectories.iter().enumerate() {
            let image = self.decode(tr)?;
            records.push(self.reward.score(&image, &tr.prompt, i as u64)?);
        }
        let prompts: Vec<String> = records.iter().map(|r| r.prompt.clone()).collect();
        let rewards: Vec<f64> = records.iter().map(|r| r.total).collect();
        let advantages = self.tracker.update_batch(&prompts, &rewards)?;
        self.last_log = records
            .iter()
            .zip(&advantages)
            .map(|(r, a)| RewardLogEntry::new(r, *a))
            .collect();

        let n = records.len() as f64;
        let mut stats = EpochStats {
            epoch: self.epoch,
            mean_reward: rewards.iter().sum::<f64>() / n,
            mean_novelty: records.iter().map(|r| r.novelty_term).sum::<f64>() / n,
            mean_utility: records.iter().map(|r| r.utility_term).sum::<f64>() / n,
            mean_advantage: advantages.iter().sum::<f64>() / n,
            clip_fraction: 0.0,
            first_clip_fraction: 0.0,
            grad_norm: 0.0,
            updates: 0,
            skipped_updates: 0,
        };
        let mut clipped = 0usize;
        let mut ratios = 0usize;
        let mut norm_sum = 0.0;
        let b = self.config.effective_batch;
        for _ in 0..self.config.inner_epochs {
            for (chunk, adv) in trajectories.chunks(b).zip(advantages.chunks(b)) {
                let (c, total, norm, applied) = self.update(chunk, adv)?;
                if stats.updates + stats.skipped_updates == 0 {
                    stats.first_clip_fraction = c as f64 / total as f64;
                }
                clipped += c;
                ratios += total;
                norm_sum += norm;
                if applied {
                    stats.updates += 1;
                } else {
                    stats.skipped_updates += 1;
                }
            }
        }
        let rounds = (stats.updates + stats.skipped_updates).max(1) as f64;
        stats.clip_fraction = clipped as f64 / ratios.max(1) as f64;
        stats.grad_norm = norm_sum / rounds;
        self.epoch += 1;
        Ok(stats)
    }

    /// One gradient step on a batch. Returns (clipped ratios, ratios, grad norm, applied).
    fn update(&mut self, batch: &[Trajectory], advantages: &[f64]) -> Result<(usize, usize, f64, bool)> {
        let dev = self.policy.device().clone();
        let steps = batch[0].steps.len();
        let scale = 1.0 / (batch.len() * steps) as f64;
        let eps = self.config.clip_range;
        let mut clipped = 0;
        let mut loss: Option<Tensor> = None;
        for k in 0..steps {
            let (xt, xp, ctx) = stack_step(batch, k, &dev)?;
            let s = &batch[0].steps[k];
            let logp = batch_log_prob(self.policy, &self.schedule, &xt, &xp, s.t, s.t_prev, &ctx, self.config.eta)?;
            let new: Vec<f64> = logp.to_vec1()?;
            let mut weights = Vec::with_capacity(batch.len());
            for ((tr, lp), a) in batch.iter().zip(&new).zip(advantages) {
                let old = tr.steps[k].log_prob;
                if !lp.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "log-prob at step {k} (t = {}) for prompt `{}`",
                        s.t, tr.prompt
                    )));
                }
                if ((lp - old).exp() - 1.0).abs() > eps {
                    clipped += 1;
                }
                weights.push(-clipped_objective_grad(*lp, old, *a, eps) * scale);
            }
            // d(sum_i w_i logp_i)/d theta reproduces the clipped-objective gradient.
            let w = Tensor::from_vec(weights, batch.len(), &dev)?;
            let term = (logp * w)?.sum_all()?;
            loss = Some(match loss {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
        let loss = loss.ok_or_else(|| Error::invalid("empty trajectories"))?;
        let grads = loss.backward()?;
        let gs: Vec<&Tensor> = self.trainable.iter().filter_map(|v| grads.get(v.as_tensor())).collect();
        let norm = global_norm(gs)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at epoch {}", self.epoch)));
        }
        // AdamW decays every parameter that has a gradient, even an all-zero one.
        let applied = norm > 0.0;
        if applied {
            self.optimizer.step(&grads)?;
        }
        Ok((clipped, batch.len() * steps, norm, applied))
    }

    /// Mean style-ambiguity and reward on fresh samples; does not train.
    pub fn evaluate(&self, n: usize, seed: u64) -> Result<Vec<crate::reward::RewardRecord>> {
        evaluate_policy(
            self.policy,
            &self.schedule,
            &self.config,
            &self.reward,
            self.codec.as_ref(),
            &*self.context_of,
            n,
            seed,
        )
    }

    /// Writes adapter tensors and a JSON sidecar carrying the config hash.
    pub fn save_checkpoint(&self, dir: &Path, config_hash: &str) -> Result<()> {
        save_adapter_checkpoint(self.policy.params(), dir, config_hash, self.epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: usize,
    pub tensors: Vec<String>,
}

pub fn save_adapter_checkpoint(params: &ParamStore, dir: &Path, config_hash: &str, epoch: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    params.save_prefix(&dir.join("adapters.safetensors"), "lora.")?;
    let meta = CheckpointMeta {
        config_hash: config_hash.to_string(),
        epoch,
        tensors: params.names().filter(|n| n.starts_with("lora.")).map(String::from).collect(),
    };
    std::fs::write(dir.join("checkpoint.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Scores `n` fresh samples whose seeds derive from `seed`; prompts cycle.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    policy: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &TrainerConfig,
    reward: &RewardStack,
    codec: &dyn LatentCodec,
    context_of: &dyn Fn(&str) -> Vec<f64>,
    n: usize,
    seed: u64,
) -> Result<Vec<crate::reward::RewardRecord>> {
    let requests: Vec<SampleRequest> = (0..n)
        .map(|i| {
            let prompt = config.prompts[i % config.prompts.len()].clone();
            SampleRequest {
                context: context_of(&prompt),
                prompt,
                seed: derive_seed(seed, &[i as u64]),
            }
        })
        .collect();
    let sampler = SamplerConfig {
        n_steps: config.inference_steps,
        eta: config.eta,
    };
    let mut out = Vec::with_capacity(n);
    for (c, chunk) in requests.chunks(64).enumerate() {
        for (j, tr) in sample_batch(policy, schedule, &sampler, chunk)?.iter().enumerate() {
            let image = codec.decode_image(&tr.final_tensor(policy.device())?)?;
            out.push(reward.score(&image, &tr.prompt, (c * 64 + j) as u64)?);
        }
    }
    Ok(out)
}
