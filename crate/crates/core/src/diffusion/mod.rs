//! Noise schedules, the forward process and the stochastic DDIM sampler.
//!
//! Sampling a trajectory logs every reverse step together with its Gaussian
//! log-density, which is what the policy-gradient trainer optimizes.

mod archive;
mod codec;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::rng::{normal_tensor, seeded, stable_hash, StreamRng};
use crate::{Error, Result};

pub use archive::{read_archive, save_final_images, write_archive, RunArchive};
pub use codec::{codec_from_name, ExternalCodec, IdentityCodec, LatentCodec, SpaceToDepthCodec};

/// Floor applied to the per-step variance.
pub const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bar[0] = 1`, `alpha_bar[t] = prod_{s<=t} (1 - beta_s)`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("noise schedule needs at least one beta"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let betas = match t_max {
            0 => Vec::new(),
            1 => vec![beta_start],
            _ => (0..t_max)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
                .collect(),
        };
        Self::new(betas)
    }

    /// 1000 steps from 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        if t == 0 {
            return Err(Error::TimestepOutOfRange { t, max: self.num_timesteps() });
        }
        Ok(self.betas[t - 1])
    }

    /// Cumulative product up to `t`; `t = 0` gives exactly 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.num_timesteps() {
            return Err(Error::TimestepOutOfRange { t, max: self.num_timesteps() });
        }
        Ok(())
    }
}

/// Closed-form marginal `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`. Returns `(x_t, eps)`.
pub fn forward_noise(x0: &Tensor, t: usize, schedule: &NoiseSchedule, rng: &mut StreamRng) -> Result<(Tensor, Tensor)> {
    let ab = schedule.alpha_bar(t)?;
    let eps = normal_tensor(rng, x0.dims(), x0.device())?.to_dtype(x0.dtype())?;
    let xt = ((x0 * ab.sqrt())? + (&eps * (1.0 - ab).sqrt())?)?;
    Ok((xt, eps))
}

/// Uniformly spaced `(t, t_prev)` pairs, from high noise down to `t_prev = 1`.
///
/// The chain stops at `t = 1` rather than 0: with `alpha_bar_0 = 1` the last
/// step's variance would vanish and its density would not exist.
pub fn timestep_pairs(n_steps: usize, t_max: usize) -> Result<Vec<(usize, usize)>> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be >= 1"));
    }
    if t_max < n_steps + 1 {
        return Err(Error::invalid(format!("{n_steps} steps do not fit a {t_max}-step schedule")));
    }
    let stride = (t_max - 1) / n_steps;
    Ok((1..=n_steps).rev().map(|k| (1 + k * stride, 1 + (k - 1) * stride)).collect())
}

/// Anything that predicts the noise in `x_t`.
///
/// `x_t` has shape `(B, ..sample_shape)` and `context` shape `(B, context_dim)`.
pub trait NoisePredictor {
    fn sample_shape(&self) -> &[usize];
    fn context_dim(&self) -> usize;
    fn predict_noise(&self, x_t: &Tensor, t: usize, context: &Tensor) -> Result<Tensor>;
    fn device(&self) -> &Device {
        &Device::Cpu
    }
}

/// Deterministic prompt conditioning vector for toy policies.
pub fn prompt_context(prompt: &str, dim: usize) -> Vec<f64> {
    let mut rng = seeded(stable_hash(prompt.as_bytes()));
    crate::rng::normal_vec(&mut rng, dim)
}

/// DDIM standard deviation for a `t -> t_prev` step.
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let var = eta * eta * (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
    Ok(var.max(MIN_VARIANCE).sqrt())
}

/// Mean of `p(x_prev | x_t)` given the predicted noise, and its std.
pub fn ddim_mean(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    eta: f64,
) -> Result<(Tensor, f64)> {
    if t <= t_prev {
        return Err(Error::invalid(format!("reverse step needs t > t_prev, got {t} -> {t_prev}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let sigma = if eta == 0.0 { 0.0 } else { ddim_sigma(schedule, t, t_prev, eta)? };
    let x0_hat = ((x_t - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mean = ((x0_hat * ab_prev.sqrt())? + (eps_hat * dir)?)?;
    Ok((mean, sigma))
}

/// Predicted clean sample from `x_t` and predicted noise.
pub fn predict_x0(schedule: &NoiseSchedule, x_t: &Tensor, eps_hat: &Tensor, t: usize) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    Ok(((x_t - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
}

/// Per-sample isotropic Gaussian log-density, summed over non-batch dims.
pub fn gaussian_log_prob(x: &Tensor, mean: &Tensor, sigma: f64) -> Result<Tensor> {
    let b = x.dim(0)?;
    let d = x.elem_count() / b.max(1);
    let sq = (x - mean)?.sqr()?.reshape((b, d))?.sum(1)?;
    let norm = d as f64 * (sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
    Ok(((sq * (-0.5 / (sigma * sigma)))? - norm)?)
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub x_prev: Tensor,
    pub mean: Tensor,
    pub sigma: f64,
    /// Present when log-prob tracking was requested.
    pub log_prob: Option<Tensor>,
}

/// One DDIM reverse step. `noise` supplies the Gaussian draw (shape of `x_t`).
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_with_noise(
    policy: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    context: &Tensor,
    eta: f64,
    noise: &Tensor,
    track_log_prob: bool,
) -> Result<StepOutput> {
    if track_log_prob && eta == 0.0 {
        return Err(Error::Contract(
            "eta = 0 is deterministic and has no density; log-prob tracking needs eta > 0".into(),
        ));
    }
    let eps_hat = policy.predict_noise(x_t, t, context)?;
    let (mean, sigma) = ddim_mean(schedule, x_t, &eps_hat, t, t_prev, eta)?;
    let x_prev = if eta == 0.0 {
        mean.clone()
    } else {
        (&mean + (noise * sigma)?)?
    }
    .detach();
    let log_prob = if track_log_prob {
        Some(gaussian_log_prob(&x_prev, &mean, sigma)?)
    } else {
        None
    };
    Ok(StepOutput {
        x_prev,
        mean,
        sigma,
        log_prob,
    })
}

/// One DDIM reverse step drawing its noise from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    policy: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    context: &Tensor,
    eta: f64,
    rng: &mut StreamRng,
    track_log_prob: bool,
) -> Result<StepOutput> {
    let noise = normal_tensor(rng, x_t.dims(), x_t.device())?.to_dtype(x_t.dtype())?;
    reverse_step_with_noise(policy, schedule, x_t, t, t_prev, context, eta, &noise, track_log_prob)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    pub t_prev: usize,
    pub x_t: Vec<f64>,
    pub x_prev: Vec<f64>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: String,
    pub seed: u64,
    pub eta: f64,
    pub sample_shape: Vec<usize>,
    pub context: Vec<f64>,
    pub steps: Vec<TrajectoryStep>,
    pub final_sample: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.log_prob).sum()
    }

    /// Checks the logged-path invariants.
    pub fn validate(&self) -> Result<()> {
        for w in self.steps.windows(2) {
            if w[1].t >= w[0].t || w[1].t != w[0].t_prev {
                return Err(Error::Contract("trajectory timesteps are not a decreasing chain".into()));
            }
        }
        if let Some(s) = self.steps.iter().find(|s| !s.log_prob.is_finite()) {
            return Err(Error::NonFinite(format!("log-prob at t = {}", s.t)));
        }
        Ok(())
    }

    pub fn final_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.final_sample.clone(), self.sample_shape.as_slice(), device)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub prompt: String,
    pub context: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 30, eta: 1.0 }
    }
}

fn stack_rows(rows: Vec<Tensor>) -> Result<Tensor> {
    Ok(Tensor::stack(&rows, 0)?)
}

/// Samples one trajectory per request in a single batched pass.
///
/// Each request owns an RNG stream seeded from `request.seed`, which draws
/// `x_T` and then every step's noise, so results do not depend on which
/// other requests share the batch.
pub fn sample_batch(
    policy: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    requests: &[SampleRequest],
) -> Result<Vec<Trajectory>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let track = config.eta > 0.0;
    let pairs = timestep_pairs(config.n_steps, schedule.num_timesteps())?;
    let shape = policy.sample_shape().to_vec();
    let dev = policy.device().clone();
    let cdim = policy.context_dim();
    for r in requests {
        if r.context.len() != cdim {
            return Err(Error::DimensionMismatch { expected: cdim, got: r.context.len() });
        }
    }
    let mut rngs: Vec<StreamRng> = requests.iter().map(|r| seeded(r.seed)).collect();
    let ctx_flat: Vec<f64> = requests.iter().flat_map(|r| r.context.iter().copied()).collect();
    let context = Tensor::from_vec(ctx_flat, (requests.len(), cdim), &dev)?;
    let mut x = stack_rows(
        rngs.iter_mut()
            .map(|rng| normal_tensor(rng, &shape, &dev))
            .collect::<candle_core::Result<Vec<_>>>()?,
    )?;
    let mut steps: Vec<Vec<TrajectoryStep>> = vec![Vec::with_capacity(pairs.len()); requests.len()];
    for &(t, t_prev) in &pairs {
        let noise = stack_rows(
            rngs.iter_mut()
                .map(|rng| normal_tensor(rng, &shape, &dev))
                .collect::<candle_core::Result<Vec<_>>>()?,
        )?;
        let out = reverse_step_with_noise(policy, schedule, &x, t, t_prev, &context, config.eta, &noise, track)?;
        let lp: Vec<f64> = match &out.log_prob {
            Some(lp) => lp.to_dtype(DType::F64)?.to_vec1()?,
            None => vec![0.0; requests.len()],
        };
        for (i, s) in steps.iter_mut().enumerate() {
            s.push(TrajectoryStep {
                t,
                t_prev,
                x_t: flat_row(&x, i)?,
                x_prev: flat_row(&out.x_prev, i)?,
                log_prob: lp[i],
            });
        }
        x = out.x_prev;
    }
    let trajectories = requests
        .iter()
        .zip(steps)
        .enumerate()
        .map(|(i, (r, steps))| {
            Ok(Trajectory {
                prompt: r.prompt.clone(),
                seed: r.seed,
                eta: config.eta,
                sample_shape: shape.clone(),
                context: r.context.clone(),
                steps,
                final_sample: flat_row(&x, i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for tr in &trajectories {
        if track {
            tr.validate()?;
        }
    }
    Ok(trajectories)
}

fn flat_row(x: &Tensor, i: usize) -> Result<Vec<f64>> {
    Ok(x.get(i)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
}

pub fn sample_trajectory(
    policy: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    request: &SampleRequest,
) -> Result<Trajectory> {
    Ok(sample_batch(policy, schedule, config, std::slice::from_ref(request))?.remove(0))
}

/// Stacks step `k` of every trajectory into batched `(x_t, x_prev, context)`.
pub fn stack_step(trajectories: &[Trajectory], k: usize, device: &Device) -> Result<(Tensor, Tensor, Tensor)> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::invalid("no trajectories to stack"))?;
    let mut dims = vec![trajectories.len()];
    dims.extend_from_slice(&first.sample_shape);
    let mut xt = Vec::new();
    let mut xp = Vec::new();
    let mut ctx = Vec::new();
    for tr in trajectories {
        let s = tr
            .steps
            .get(k)
            .ok_or_else(|| Error::Contract(format!("trajectory has no stored step {k}")))?;
        if s.t != first.steps[k].t {
            return Err(Error::Contract("trajectories use different timestep grids".into()));
        }
        xt.extend_from_slice(&s.x_t);
        xp.extend_from_slice(&s.x_prev);
        ctx.extend_from_slice(&tr.context);
    }
    Ok((
        Tensor::from_vec(xt, dims.as_slice(), device)?,
        Tensor::from_vec(xp, dims.as_slice(), device)?,
        Tensor::from_vec(ctx, (trajectories.len(), first.context.len()), device)?,
    ))
}

/// Log-density of stored actions under the current policy, keeping the graph.
pub fn batch_log_prob(
    policy: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    x_prev: &Tensor,
    t: usize,
    t_prev: usize,
    context: &Tensor,
    eta: f64,
) -> Result<Tensor> {
    if eta == 0.0 {
        return Err(Error::Contract("log-prob needs eta > 0".into()));
    }
    let eps_hat = policy.predict_noise(x_t, t, context)?;
    let (mean, sigma) = ddim_mean(schedule, x_t, &eps_hat, t, t_prev, eta)?;
    gaussian_log_prob(x_prev, &mean, sigma)
}

/// Log-density of one stored step under the policy's current parameters.
pub fn recompute_logprob(
    policy: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    trajectory: &Trajectory,
    k: usize,
) -> Result<f64> {
    let dev = policy.device().clone();
    let (xt, xp, ctx) = stack_step(std::slice::from_ref(trajectory), k, &dev)?;
    let s = &trajectory.steps[k];
    let lp = batch_log_prob(policy, schedule, &xt, &xp, s.t, s.t_prev, &ctx, trajectory.eta)?;
    Ok(lp.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// eps_hat = w * x_t with a single scalar weight.
    struct Scaled {
        w: f64,
        shape: Vec<usize>,
    }

    impl NoisePredictor for Scaled {
        fn sample_shape(&self) -> &[usize] {
            &self.shape
        }
        fn context_dim(&self) -> usize {
            2
        }
        fn predict_noise(&self, x_t: &Tensor, _t: usize, _c: &Tensor) -> Result<Tensor> {
            Ok((x_t * self.w)?)
        }
    }

    /// Returns a fixed noise tensor (broadcast over the batch).
    struct Oracle(Tensor);

    impl NoisePredictor for Oracle {
        fn sample_shape(&self) -> &[usize] {
            &self.0.dims()[1..]
        }
        fn context_dim(&self) -> usize {
            1
        }
        fn predict_noise(&self, _x: &Tensor, _t: usize, _c: &Tensor) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    fn scaled(w: f64) -> Scaled {
        Scaled { w, shape: vec![4] }
    }

    fn req(seed: u64) -> SampleRequest {
        SampleRequest {
            prompt: "art".into(),
            context: vec![0.0, 1.0],
            seed,
        }
    }

    #[test]
    fn alpha_bar_products() {
        let s = NoiseSchedule::new(vec![0.1, 0.1]).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!((s.alpha_bar(2).unwrap() - 0.81).abs() < 1e-15);
        assert!(s.alpha_bar(3).is_err());
        assert!(NoiseSchedule::new(vec![0.0]).is_err());
        assert!(NoiseSchedule::new(vec![1.0]).is_err());
    }

    #[test]
    fn default_schedule_strictly_decreasing() {
        let s = NoiseSchedule::default_linear();
        for t in 1..=s.num_timesteps() {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
    }

    #[test]
    fn t_zero_is_identity() {
        let s = NoiseSchedule::default_linear();
        let x0 = Tensor::new(&[0.3f64, -0.7], &Device::Cpu).unwrap();
        let (xt, _) = forward_noise(&x0, 0, &s, &mut seeded(0)).unwrap();
        assert_eq!(xt.to_vec1::<f64>().unwrap(), vec![0.3, -0.7]);
        assert!(forward_noise(&x0, 1001, &s, &mut seeded(0)).is_err());
    }

    #[test]
    fn timestep_grid_shape() {
        for n in [30, 10, 1] {
            let p = timestep_pairs(n, 1000).unwrap();
            assert_eq!(p.len(), n);
            assert_eq!(p.last().unwrap().1, 1);
            assert!(p.windows(2).all(|w| w[1].0 == w[0].1 && w[1].0 < w[0].0));
        }
        assert!(timestep_pairs(0, 1000).is_err());
    }

    #[test]
    fn eta_zero_inverts_forward_noise() {
        let s = NoiseSchedule::default_linear();
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[[0.5f64, -0.25, 0.0, 0.9]], &dev).unwrap();
        let (xt, eps) = forward_noise(&x0, 700, &s, &mut seeded(1)).unwrap();
        let policy = Oracle(eps);
        let ctx = Tensor::zeros((1, 1), DType::F64, &dev).unwrap();
        let out = reverse_step(&policy, &s, &xt, 700, 0, &ctx, 0.0, &mut seeded(2), false).unwrap();
        let got = out.x_prev.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (g, w) in got.iter().zip([0.5, -0.25, 0.0, 0.9]) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn eta_zero_with_tracking_is_a_contract_error() {
        let s = NoiseSchedule::default_linear();
        let dev = Device::Cpu;
        let x = Tensor::zeros((1, 4), DType::F64, &dev).unwrap();
        let ctx = Tensor::zeros((1, 2), DType::F64, &dev).unwrap();
        let r = reverse_step(&scaled(0.1), &s, &x, 10, 1, &ctx, 0.0, &mut seeded(0), true);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn log_prob_of_mean_action_is_normalizer() {
        let s = NoiseSchedule::default_linear();
        let dev = Device::Cpu;
        let x = Tensor::new(&[[0.1f64, 0.2, 0.3, 0.4]], &dev).unwrap();
        let ctx = Tensor::zeros((1, 2), DType::F64, &dev).unwrap();
        let zero = Tensor::zeros((1, 4), DType::F64, &dev).unwrap();
        let out = reverse_step_with_noise(&scaled(0.3), &s, &x, 500, 467, &ctx, 1.0, &zero, true).unwrap();
        let lp = out.log_prob.unwrap().to_vec1::<f64>().unwrap()[0];
        let want = -0.5 * 4.0 * (2.0 * std::f64::consts::PI * out.sigma * out.sigma).ln();
        assert!((lp - want).abs() < 1e-9);
        // Doubling sigma drops the density of the mean action by D ln 2.
        let lp2 = gaussian_log_prob(&out.mean, &out.mean, 2.0 * out.sigma).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((lp - lp2 - 4.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic_and_has_requested_length() {
        let s = NoiseSchedule::default_linear();
        for n in [30, 10] {
            let cfg = SamplerConfig { n_steps: n, eta: 1.0 };
            let a = sample_trajectory(&scaled(0.2), &s, &cfg, &req(9)).unwrap();
            let b = sample_trajectory(&scaled(0.2), &s, &cfg, &req(9)).unwrap();
            assert_eq!(a.len(), n);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn batch_members_are_independent_of_their_neighbours() {
        let s = NoiseSchedule::default_linear();
        let cfg = SamplerConfig { n_steps: 5, eta: 1.0 };
        let solo = sample_trajectory(&scaled(0.2), &s, &cfg, &req(4)).unwrap();
        let batch = sample_batch(&scaled(0.2), &s, &cfg, &[req(3), req(4)]).unwrap();
        for (a, b) in solo.final_sample.iter().zip(&batch[1].final_sample) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn recompute_matches_stored_and_moves_with_parameters() {
        let s = NoiseSchedule::default_linear();
        let cfg = SamplerConfig { n_steps: 4, eta: 1.0 };
        let tr = sample_trajectory(&scaled(0.2), &s, &cfg, &req(5)).unwrap();
        for k in 0..tr.len() {
            let lp = recompute_logprob(&scaled(0.2), &s, &tr, k).unwrap();
            assert!((lp - tr.steps[k].log_prob).abs() < 1e-6);
            let moved = recompute_logprob(&scaled(0.2 + 1e-3), &s, &tr, k).unwrap();
            assert_ne!(moved, lp);
            assert!((moved - lp).exp().is_finite());
        }
    }

    #[test]
    fn two_step_chain_matches_joint_density() {
        // Brute force: the joint density of (x_1, x_0) given x_2 is the product
        // of two Gaussians whose means are computed independently here.
        let s = NoiseSchedule::linear(20, 0.01, 0.2).unwrap();
        let p = scaled(0.5);
        let cfg = SamplerConfig { n_steps: 2, eta: 0.7 };
        let tr = sample_trajectory(&p, &s, &cfg, &req(11)).unwrap();
        let mut joint = 0.0;
        for st in &tr.steps {
            let ab = s.alpha_bar(st.t).unwrap();
            let abp = s.alpha_bar(st.t_prev).unwrap();
            let var = 0.49 * (1.0 - abp) / (1.0 - ab) * (1.0 - ab / abp);
            for (xt, xp) in st.x_t.iter().zip(&st.x_prev) {
                let e = 0.5 * xt;
                let x0 = (xt - (1.0 - ab).sqrt() * e) / ab.sqrt();
                let mu = abp.sqrt() * x0 + (1.0 - abp - var).sqrt() * e;
                joint += -0.5 * (xp - mu).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
            }
        }
        assert!((tr.total_log_prob() - joint).abs() < 1e-6);
    }

    #[test]
    fn prompt_context_is_stable() {
        assert_eq!(prompt_context("art", 8), prompt_context("art", 8));
        assert_ne!(prompt_context("art", 8), prompt_context("drawing", 8));
    }
}
