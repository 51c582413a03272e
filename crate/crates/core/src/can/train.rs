//! CAN training loop, the ablation grid and the toy stripe data.

use std::path::Path;

use candle_core::{Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use super::{can_losses, gradient_penalty, gradient_penalty_surrogate, StyleLossWeights};
use crate::nn::scalar;
use crate::data::DatasetName;
use crate::rng::{derive_seed, seeded, StreamRng};
use crate::{Error, Image, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CanTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub gradient_penalty: bool,
    pub gp_lambda: f64,
    /// Central-difference step of the penalty's training surrogate.
    pub gp_step: f64,
    pub image_dim: usize,
    pub dataset: DatasetName,
    pub style_weights: StyleLossWeights,
    /// Supervised style-head passes over the data before adversarial training.
    pub style_pretrain_epochs: usize,
    pub seed: u64,
}

impl Default for CanTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 128,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
            adam_eps: 1e-8,
            gradient_penalty: true,
            gp_lambda: 10.0,
            gp_step: 1e-2,
            image_dim: 256,
            dataset: DatasetName::Full,
            style_weights: StyleLossWeights::default(),
            style_pretrain_epochs: 0,
            seed: 0,
        }
    }
}

impl CanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("can.epochs and can.batch must be positive".into()));
        }
        for (k, v) in [("lr", self.lr), ("adam_eps", self.adam_eps), ("gp_step", self.gp_step)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("can.{k} must be positive, got {v}")));
            }
        }
        if self.gp_lambda < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("can.gp_lambda and can.weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    fn adam(&self) -> ParamsAdamW {
        ParamsAdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanGridEntry {
    pub image_dim: usize,
    pub dataset: DatasetName,
    pub batch: usize,
    pub gradient_penalty: bool,
}

impl CanGridEntry {
    pub fn name(&self) -> String {
        format!(
            "can-{}-{}-b{}-{}",
            self.image_dim,
            self.dataset.name(),
            self.batch,
            if self.gradient_penalty { "gp" } else { "nogp" }
        )
    }

    pub fn apply(&self, base: &CanTrainConfig) -> CanTrainConfig {
        CanTrainConfig {
            image_dim: self.image_dim,
            dataset: self.dataset,
            batch: self.batch,
            gradient_penalty: self.gradient_penalty,
            ..base.clone()
        }
    }
}

/// {256, 512} x {full, mediums} x {128, 256} x {GP, no GP}.
pub fn can_grid() -> Vec<CanGridEntry> {
    let mut out = Vec::with_capacity(16);
    for image_dim in [256, 512] {
        for dataset in [DatasetName::Full, DatasetName::Mediums] {
            for batch in [128, 256] {
                for gradient_penalty in [true, false] {
                    out.push(CanGridEntry {
                        image_dim,
                        dataset,
                        batch,
                        gradient_penalty,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanArch {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl CanArch {
    pub fn published(image_dim: usize, n_styles: usize) -> Result<Self> {
        Ok(Self {
            generator: GeneratorSpec::published(image_dim)?,
            discriminator: DiscriminatorSpec::published(image_dim, n_styles)?,
        })
    }

    /// 16×16 grayscale, two styles.
    pub fn toy() -> Self {
        Self {
            generator: GeneratorSpec {
                noise_dim: 16,
                image_dim: 16,
                out_channels: 1,
                last_width: 16,
            },
            discriminator: DiscriminatorSpec {
                image_dim: 16,
                in_channels: 1,
                first_width: 16,
                n_double: 1,
                n_const: 1,
                style_hidden: vec![64, 32],
                n_styles: 2,
                dropout: 0.2,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanStepStats {
    pub loss_d: f64,
    pub loss_g: f64,
    pub d_adversarial: f64,
    pub style_classification: f64,
    pub g_adversarial: f64,
    pub style_ambiguity: f64,
    pub gradient_penalty: f64,
}

pub struct CanTrainer {
    pub generator: Generator,
    pub discriminator: Discriminator,
    config: CanTrainConfig,
    opt_g: AdamW,
    opt_d: AdamW,
    rng: StreamRng,
}

impl CanTrainer {
    pub fn new(arch: &CanArch, config: CanTrainConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        if arch.generator.image_dim != arch.discriminator.image_dim
            || arch.generator.out_channels != arch.discriminator.in_channels
        {
            return Err(Error::Config("generator output does not fit the discriminator input".into()));
        }
        let generator = Generator::new(arch.generator.clone(), derive_seed(config.seed, &[1]), device)?;
        let discriminator = Discriminator::new(arch.discriminator.clone(), derive_seed(config.seed, &[2]), device)?;
        let opt_g = AdamW::new(generator.params().vars(), config.adam())?;
        let opt_d = AdamW::new(discriminator.params().vars(), config.adam())?;
        let rng = seeded(derive_seed(config.seed, &[3]));
        Ok(Self {
            generator,
            discriminator,
            config,
            opt_g,
            opt_d,
            rng,
        })
    }

    pub fn config(&self) -> &CanTrainConfig {
        &self.config
    }

    /// Supervised style-head training on real images only.
    pub fn pretrain_style_step(&mut self, real: &Tensor, labels: &[usize]) -> Result<f64> {
        let loss = style_nll(&self.discriminator, real, labels)?;
        self.opt_d.backward_step(&loss)?;
        scalar(&loss)
    }

    /// One alternating discriminator/generator update.
    pub fn step(&mut self, real: &Tensor, labels: &[usize]) -> Result<CanStepStats> {
        let b = real.dim(0)?;
        let z = self.generator.sample_noise(b, &mut self.rng)?;
        let fake = self.generator.forward(&z, true)?;
        let weights = self.config.style_weights;

        let d_real = self.discriminator.forward(real, true)?;
        let d_fake = self.discriminator.forward(&fake.detach(), true)?;
        let l = can_losses(
            &candle_nn::ops::sigmoid(&d_real.binary)?,
            &candle_nn::ops::sigmoid(&d_fake.binary)?,
            &candle_nn::ops::softmax(&d_real.style, D::Minus1)?,
            labels,
            &candle_nn::ops::softmax(&d_fake.style, D::Minus1)?,
            weights,
        )?;
        let mut loss_d = l.loss_d.clone();
        let mut gp_value = 0.0;
        if self.config.gradient_penalty {
            let disc = &self.discriminator;
            let critic = |x: &Tensor| disc.critic(x, true);
            let gp = gradient_penalty(&critic, real, &fake.detach(), self.config.gp_lambda, &mut self.rng)?;
            gp_value = gp.value;
            loss_d = (loss_d + gradient_penalty_surrogate(&critic, &gp, self.config.gp_step)?)?;
        }
        let d_loss_value = scalar(&l.loss_d)? + gp_value;
        if !d_loss_value.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss {d_loss_value}")));
        }
        self.opt_d.backward_step(&loss_d)?;

        let g_out = self.discriminator.forward(&fake, true)?;
        let p_fake = candle_nn::ops::sigmoid(&g_out.binary)?;
        let c_fake = candle_nn::ops::softmax(&g_out.style, D::Minus1)?;
        let g_adv = (p_fake.clamp(super::PROB_EPS, 1.0)?.log()?.mean_all()? * -1.0)?;
        let g_amb = (c_fake.clamp(super::PROB_EPS, 1.0)?.log()?.mean_all()? * -1.0)?;
        let loss_g = (&g_adv + (&g_amb * weights.ambiguity)?)?;
        let g_value = scalar(&loss_g)?;
        if !g_value.is_finite() {
            return Err(Error::NonFinite(format!("generator loss {g_value}")));
        }
        // only generator variables are registered with opt_g
        self.opt_g.backward_step(&loss_g)?;

        Ok(CanStepStats {
            loss_d: d_loss_value,
            loss_g: g_value,
            d_adversarial: scalar(&l.d_adversarial)?,
            style_classification: scalar(&l.style_classification)?,
            g_adversarial: scalar(&g_adv)?,
            style_ambiguity: scalar(&g_amb)?,
            gradient_penalty: gp_value,
        })
    }

    /// Eval-mode style accuracy of the discriminator head.
    pub fn style_accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.discriminator.forward(images, false)?.style;
        let pred: Vec<u32> = logits.argmax(1)?.to_vec1()?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| **p as usize == **l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// Mean style ambiguity of fresh eval-mode samples under the current head.
    pub fn sample_ambiguity(&self, n: usize, seed: u64) -> Result<f64> {
        let z = self.generator.sample_noise(n, &mut seeded(seed))?;
        let fake = self.generator.forward(&z, false)?;
        let c = candle_nn::ops::softmax(&self.discriminator.forward(&fake, false)?.style, D::Minus1)?;
        scalar(&(c.clamp(super::PROB_EPS, 1.0)?.log()?.mean_all()? * -1.0)?)
    }

    pub fn sample_images(&self, n: usize, seed: u64) -> Result<Vec<Image>> {
        let z = self.generator.sample_noise(n, &mut seeded(seed))?;
        let fake = self.generator.forward(&z, false)?;
        (0..n).map(|i| Image::from_signed_chw(&fake.get(i)?)).collect()
    }
}

/// Mean negative log-likelihood of `labels` under the train-mode style head.
fn style_nll(disc: &Discriminator, real: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let out = disc.forward(real, true)?;
    let probs = candle_nn::ops::softmax(&out.style, D::Minus1)?;
    let idx = Tensor::from_vec(
        labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
        (labels.len(), 1),
        real.device(),
    )?;
    Ok((probs.gather(&idx, 1)?.clamp(super::PROB_EPS, 1.0)?.log()?.mean_all()? * -1.0)?)
}

fn check_labels(images: &Tensor, labels: &[usize], n_styles: usize) -> Result<usize> {
    let n = images.dim(0)?;
    if n != labels.len() || n == 0 {
        return Err(Error::Dataset(format!("{n} images for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_styles) {
        return Err(Error::LabelOutOfRange {
            index: bad,
            n_classes: n_styles,
        });
    }
    Ok(n)
}

/// Shuffled minibatches of at least two rows (batch norm needs two).
fn minibatches(order: &[usize], batch: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch).filter(|c| c.len() >= 2)
}

fn gather_batch(images: &Tensor, labels: &[usize], chunk: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), images.device())?;
    Ok((images.index_select(&idx, 0)?, chunk.iter().map(|&i| labels[i]).collect()))
}

/// Trains a discriminator's style head alone, as a standalone classifier.
/// Returns the network and the mean loss of every epoch.
pub fn train_style_head(
    spec: DiscriminatorSpec,
    config: &CanTrainConfig,
    images: &Tensor,
    labels: &[usize],
) -> Result<(Discriminator, Vec<f64>)> {
    config.validate()?;
    let n = check_labels(images, labels, spec.n_styles)?;
    let disc = Discriminator::new(spec, derive_seed(config.seed, &[2]), images.device())?;
    let mut opt = AdamW::new(disc.params().vars(), config.adam())?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded(derive_seed(config.seed, &[4]));
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0usize);
        for chunk in minibatches(&order, config.batch) {
            let (x, y) = gather_batch(images, labels, chunk)?;
            let loss = style_nll(&disc, &x, &y)?;
            opt.backward_step(&loss)?;
            sum += scalar(&loss)?;
            steps += 1;
        }
        losses.push(sum / steps.max(1) as f64);
    }
    Ok((disc, losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub d_adversarial: f64,
    pub style_classification: f64,
    pub g_adversarial: f64,
    pub style_ambiguity: f64,
    pub gradient_penalty: f64,
}

/// Full training run over `(images, labels)`, with per-epoch CSV, sample
/// grids and final checkpoints written under `out_dir`.
pub fn train_can(
    arch: &CanArch,
    config: CanTrainConfig,
    images: &Tensor,
    labels: &[usize],
    out_dir: Option<&Path>,
    config_hash: &str,
) -> Result<(CanTrainer, Vec<EpochRecord>)> {
    let n = check_labels(images, labels, arch.discriminator.n_styles)?;
    let device = images.device().clone();
    let mut trainer = CanTrainer::new(arch, config.clone(), &device)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = seeded(derive_seed(config.seed, &[4]));
    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(csv::Writer::from_path(dir.join("losses.csv"))?)
        }
        None => None,
    };
    for _ in 0..config.style_pretrain_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in minibatches(&order, config.batch) {
            let (real, lab) = gather_batch(images, labels, chunk)?;
            trainer.pretrain_style_step(&real, &lab)?;
        }
    }
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = EpochRecord {
            epoch,
            loss_d: 0.0,
            loss_g: 0.0,
            d_adversarial: 0.0,
            style_classification: 0.0,
            g_adversarial: 0.0,
            style_ambiguity: 0.0,
            gradient_penalty: 0.0,
        };
        let mut steps = 0.0;
        for chunk in minibatches(&order, config.batch) {
            let (real, lab) = gather_batch(images, labels, chunk)?;
            let s = trainer.step(&real, &lab)?;
            acc.loss_d += s.loss_d;
            acc.loss_g += s.loss_g;
            acc.d_adversarial += s.d_adversarial;
            acc.style_classification += s.style_classification;
            acc.g_adversarial += s.g_adversarial;
            acc.style_ambiguity += s.style_ambiguity;
            acc.gradient_penalty += s.gradient_penalty;
            steps += 1.0;
        }
        if steps > 0.0 {
            for v in [
                &mut acc.loss_d,
                &mut acc.loss_g,
                &mut acc.d_adversarial,
                &mut acc.style_classification,
                &mut acc.g_adversarial,
                &mut acc.style_ambiguity,
                &mut acc.gradient_penalty,
            ] {
                *v /= steps;
            }
        }
        if let Some(w) = writer.as_mut() {
            w.serialize(acc)?;
            w.flush()?;
        }
        if let Some(dir) = out_dir {
            let grid = Image::grid(&trainer.sample_images(16, config.seed)?, 4)?;
            grid.save_png(&dir.join(format!("samples_epoch{epoch:03}.png")))?;
        }
        records.push(acc);
    }
    if let Some(dir) = out_dir {
        trainer.generator.params().save_safetensors(&dir.join(format!("generator-{config_hash}.safetensors")))?;
        trainer
            .discriminator
            .params()
            .save_safetensors(&dir.join(format!("discriminator-{config_hash}.safetensors")))?;
    }
    Ok((trainer, records))
}

/// A 16×16-style stripe image in `[-1, 1]`: class 0 horizontal, class 1 vertical.
pub fn stripe_image(class: usize, side: usize, rng: &mut StreamRng) -> Vec<f64> {
    let period = 4;
    let phase = rng.random_range(0..period);
    let contrast: f64 = rng.random_range(0.6..0.9);
    let mut v = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let coord = if class == 0 { y } else { x };
            let on = (coord + phase) % period < period / 2;
            let noise: f64 = rng.random_range(-0.1..0.1);
            v.push((if on { contrast } else { -contrast } + noise).clamp(-1.0, 1.0));
        }
    }
    v
}

/// `(B, 1, side, side)` stripe images with alternating labels.
pub fn stripe_batch(n: usize, side: usize, rng: &mut StreamRng, device: &Device) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        data.extend(stripe_image(class, side, rng).into_iter().map(|v| v as f32));
        labels.push(class);
    }
    Ok((Tensor::from_vec(data, (n, 1, side, side), device)?, labels))
}
