//! A pixel-space toy policy: an MLP noise predictor built from adapted
//! linear layers, plus the two-class "left/right bright" image family.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lora::{LoraLinear, LowRankAdapter};
use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::nn::{scalar, ParamStore};
use crate::classifiers::{DiscriminatorClassifier, LinearStyleHead};
use crate::rng::{derive_seed, seeded, StreamRng};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDenoiserConfig {
    pub side: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub context_dim: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            side: 8,
            hidden: 128,
            time_dim: 16,
            context_dim: 8,
            rank: 4,
            alpha: 4.0,
        }
    }
}

/// `x (side^2) ++ time ++ context -> hidden -> SiLU -> hidden -> SiLU -> side^2`.
pub struct ToyDenoiser {
    config: ToyDenoiserConfig,
    store: ParamStore,
    layers: Vec<LoraLinear>,
    t_max: usize,
    shape: Vec<usize>,
}

impl ToyDenoiser {
    pub fn new(config: ToyDenoiserConfig, t_max: usize, seed: u64) -> Result<Self> {
        let device = Device::Cpu;
        let mut store = ParamStore::new(DType::F64, &device);
        let mut rng = seeded(seed);
        let d = config.side * config.side;
        let dims = [
            (d + config.time_dim + config.context_dim, config.hidden),
            (config.hidden, config.hidden),
            (config.hidden, d),
        ];
        let mut layers = Vec::new();
        for (i, (in_dim, out_dim)) in dims.into_iter().enumerate() {
            let bound = 1.0 / (in_dim as f64).sqrt();
            let weight = store.uniform(&format!("base.l{i}.weight"), &[out_dim, in_dim], bound, &mut rng)?;
            let bias = store.zeros(&format!("base.l{i}.bias"), &[out_dim])?;
            let adapter = LowRankAdapter::init(
                &mut store,
                &format!("lora.l{i}"),
                in_dim,
                out_dim,
                config.rank,
                config.alpha,
                &mut rng,
            )?;
            layers.push(LoraLinear {
                weight,
                bias: Some(bias),
                adapter: Some(adapter),
                train_base: false,
            });
        }
        Ok(Self {
            config,
            store,
            layers,
            t_max,
            shape: vec![1, config.side, config.side],
        })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn adapter_vars(&self) -> Vec<Var> {
        self.store.vars_with_prefix("lora.")
    }

    pub fn base_vars(&self) -> Vec<Var> {
        self.store.vars_with_prefix("base.")
    }

    pub fn set_adapters_enabled(&mut self, on: bool) {
        for l in &mut self.layers {
            if let Some(a) = &mut l.adapter {
                a.enabled = on;
            }
        }
    }

    fn set_train_base(&mut self, on: bool) {
        for l in &mut self.layers {
            l.train_base = on;
        }
    }

    fn time_embedding(&self, t: usize, batch: usize) -> Result<Tensor> {
        let half = self.config.time_dim / 2;
        let s = t as f64 / self.t_max as f64;
        let mut row = Vec::with_capacity(self.config.time_dim);
        for k in 0..half {
            let freq = std::f64::consts::PI * (1u64 << k.min(20)) as f64 / 2.0;
            row.push((s * freq).sin());
        }
        for k in 0..half {
            let freq = std::f64::consts::PI * (1u64 << k.min(20)) as f64 / 2.0;
            row.push((s * freq).cos());
        }
        let row = Tensor::from_vec(row, (1, self.config.time_dim), self.store.device())?;
        Ok(row.broadcast_as((batch, self.config.time_dim))?.contiguous()?)
    }

    /// Supervised noise-prediction pretraining of the base weights on
    /// `sample_data`. Returns the mean loss of the first and last 10% of steps.
    pub fn pretrain(
        &mut self,
        schedule: &NoiseSchedule,
        sample_data: &dyn Fn(&mut StreamRng, usize) -> Result<Tensor>,
        steps: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<(f64, f64)> {
        self.set_adapters_enabled(false);
        self.set_train_base(true);
        let params = ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(self.base_vars(), params)?;
        let mut rng = seeded(seed);
        let window = (steps / 10).max(1);
        let (mut head, mut tail) = (0.0, 0.0);
        for step in 0..steps {
            let x0 = sample_data(&mut rng, batch)?;
            let loss = self.denoising_loss(schedule, &x0, &mut rng)?;
            opt.backward_step(&loss)?;
            let v = scalar(&loss)?;
            if step < window {
                head += v / window as f64;
            }
            if step >= steps - window {
                tail += v / window as f64;
            }
        }
        self.set_train_base(false);
        self.set_adapters_enabled(true);
        Ok((head, tail))
    }

    /// Mean squared noise-prediction error at uniformly drawn timesteps.
    pub fn denoising_loss(&self, schedule: &NoiseSchedule, x0: &Tensor, rng: &mut StreamRng) -> Result<Tensor> {
        let b = x0.dim(0)?;
        let dev = self.store.device();
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.num_timesteps())).collect();
        let ab = ts.iter().map(|&t| schedule.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
        let sa = Tensor::from_vec(ab.iter().map(|a| a.sqrt()).collect::<Vec<_>>(), (b, 1, 1, 1), dev)?;
        let sn = Tensor::from_vec(ab.iter().map(|a| (1.0 - a).sqrt()).collect::<Vec<_>>(), (b, 1, 1, 1), dev)?;
        let eps = crate::rng::normal_tensor(rng, x0.dims(), dev)?;
        let xt = (x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sn)?)?;
        let ctx = Tensor::zeros((b, self.config.context_dim), DType::F64, dev)?;
        let temb = Tensor::cat(
            &ts.iter().map(|&t| self.time_embedding(t, 1)).collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let pred = self.forward_rows(&xt, &temb, &ctx)?;
        Ok((pred - eps)?.sqr()?.mean_all()?)
    }

    fn forward_rows(&self, x_t: &Tensor, temb: &Tensor, context: &Tensor) -> Result<Tensor> {
        let b = x_t.dim(0)?;
        let d = self.config.side * self.config.side;
        let h = Tensor::cat(&[&x_t.reshape((b, d))?, temb, context], 1)?;
        let h = self.layers[0].forward(&h)?.silu()?;
        let h = self.layers[1].forward(&h)?.silu()?;
        let out = self.layers[2].forward(&h)?;
        Ok(out.reshape(x_t.dims())?)
    }
}

impl NoisePredictor for ToyDenoiser {
    fn sample_shape(&self) -> &[usize] {
        &self.shape
    }

    fn context_dim(&self) -> usize {
        self.config.context_dim
    }

    fn predict_noise(&self, x_t: &Tensor, t: usize, context: &Tensor) -> Result<Tensor> {
        let b = x_t.dim(0)?;
        self.forward_rows(x_t, &self.time_embedding(t, b)?, context)
    }
}

/// Labels of the frozen toy style head.
pub const TOY_STYLE_LABELS: [&str; 2] = ["left-bright", "right-bright"];

/// Sharpness of the frozen left/right head used as the toy classifier.
pub const TOY_HEAD_SHARPNESS: f64 = 4.0;

/// The frozen two-class toy classifier for `side x side` images.
pub fn toy_classifier(side: usize) -> Result<DiscriminatorClassifier> {
    DiscriminatorClassifier::new(
        Arc::new(LinearStyleHead::left_right(side, TOY_HEAD_SHARPNESS)),
        TOY_STYLE_LABELS.iter().map(|s| s.to_string()).collect(),
    )
}

/// A toy denoiser whose base weights were pretrained on [`toy_batch`] images.
pub fn pretrained_toy_policy(
    config: ToyDenoiserConfig,
    schedule: &NoiseSchedule,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<(ToyDenoiser, (f64, f64))> {
    let mut policy = ToyDenoiser::new(config, schedule.num_timesteps(), seed)?;
    let side = config.side;
    let losses = policy.pretrain(
        schedule,
        &|rng: &mut StreamRng, b: usize| toy_batch(rng, b, side),
        steps,
        batch,
        lr,
        derive_seed(seed, &[1]),
    )?;
    Ok((policy, losses))
}

/// One toy image in `[-1, 1]`: class 0 is bright on the left half, class 1
/// on the right half, with random contrast and pixel noise.
pub fn toy_image(class: usize, side: usize, rng: &mut StreamRng) -> Vec<f64> {
    let contrast: f64 = rng.random_range(0.5..0.9);
    let mut v = Vec::with_capacity(side * side);
    for _y in 0..side {
        for x in 0..side {
            let left = x < side / 2;
            let sign = if left == (class == 0) { 1.0 } else { -1.0 };
            let noise: f64 = rng.random_range(-0.1..0.1);
            v.push((sign * contrast + noise).clamp(-1.0, 1.0));
        }
    }
    v
}

/// A batch `(B, 1, side, side)` with classes drawn uniformly.
pub fn toy_batch(rng: &mut StreamRng, batch: usize, side: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(batch * side * side);
    for _ in 0..batch {
        let class = rng.random_range(0..2);
        data.extend(toy_image(class, side, rng));
    }
    Ok(Tensor::from_vec(data, (batch, 1, side, side), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adapters_start_as_identity() {
        let mut net = ToyDenoiser::new(ToyDenoiserConfig::default(), 1000, 0).unwrap();
        let x = toy_batch(&mut seeded(1), 3, 8).unwrap();
        let ctx = Tensor::zeros((3, 8), DType::F64, &Device::Cpu).unwrap();
        let a = net.predict_noise(&x, 10, &ctx).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        net.set_adapters_enabled(false);
        let b = net.predict_noise(&x, 10, &ctx).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn toy_classes_are_mirrored() {
        let img = toy_image(0, 8, &mut seeded(0));
        assert!(img[0] > 0.0 && img[7] < 0.0);
        let img = toy_image(1, 8, &mut seeded(0));
        assert!(img[0] < 0.0 && img[7] > 0.0);
    }
}
