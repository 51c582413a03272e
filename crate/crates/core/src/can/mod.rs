//! Creative Adversarial Network baseline.
//!
//! The discriminator judges real versus fake and classifies the style of real
//! images; the generator is rewarded both for fooling it and for producing
//! images whose style distribution is as close to uniform as possible.

mod arch;
mod train;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;
use crate::{Error, Result};

pub use arch::{
    dropout, published_count_report, Discriminator, DiscriminatorOutput, DiscriminatorSpec, Generator, GeneratorSpec,
    LayerKind, LayerShape, ParamCountReport, KERNEL, LEAKY_SLOPE, PADDING, PUBLISHED_DISCRIMINATOR_PARAMS,
    PUBLISHED_GENERATOR_PARAMS, STRIDE,
};
pub use train::{
    can_grid, stripe_batch, stripe_image, train_can, train_style_head, CanArch, CanGridEntry, CanStepStats, CanTrainConfig, CanTrainer,
    EpochRecord,
};
pub use crate::data::DatasetName;

/// Probability floor inside every log.
pub const PROB_EPS: f64 = 1e-12;

fn safe_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0)?.log()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleLossWeights {
    pub classification: f64,
    pub ambiguity: f64,
}

impl Default for StyleLossWeights {
    fn default() -> Self {
        Self {
            classification: 1.0,
            ambiguity: 1.0,
        }
    }
}

/// Every term of the two objectives, each a scalar tensor.
#[derive(Debug, Clone)]
pub struct CanLosses {
    /// `-E log D(x) - E log(1 - D(G(z)))`.
    pub d_adversarial: Tensor,
    /// Cross-entropy of the style head on real images.
    pub style_classification: Tensor,
    /// Non-saturating `-E log D(G(z))`.
    pub g_adversarial: Tensor,
    /// Cross-entropy of the fake style distribution to uniform.
    pub style_ambiguity: Tensor,
    pub loss_d: Tensor,
    pub loss_g: Tensor,
}

/// Losses from discriminator probabilities.
///
/// `d_real_bin`/`d_fake_bin` are real-probabilities `(B,)`; `d_real_style`
/// and `c_fake_style` are style distributions `(B, N)`; `real_labels` holds
/// class indices.
pub fn can_losses(
    d_real_bin: &Tensor,
    d_fake_bin: &Tensor,
    d_real_style: &Tensor,
    real_labels: &[usize],
    c_fake_style: &Tensor,
    weights: StyleLossWeights,
) -> Result<CanLosses> {
    let (b, n) = d_real_style.dims2()?;
    if d_real_bin.dims() != [b] || real_labels.len() != b {
        return Err(Error::Shape(format!(
            "real batch: {:?} binary, {:?} style, {} labels",
            d_real_bin.dims(),
            d_real_style.dims(),
            real_labels.len()
        )));
    }
    let (bf, nf) = c_fake_style.dims2()?;
    if d_fake_bin.dims() != [bf] || nf != n {
        return Err(Error::Shape(format!(
            "fake batch: {:?} binary, {:?} style",
            d_fake_bin.dims(),
            c_fake_style.dims()
        )));
    }
    if let Some(&bad) = real_labels.iter().find(|&&l| l >= n) {
        return Err(Error::LabelOutOfRange { index: bad, n_classes: n });
    }
    let d_adversarial = ((safe_log(d_real_bin)?.mean_all()? + safe_log(&(1.0 - d_fake_bin)?)?.mean_all()?)? * -1.0)?;
    let g_adversarial = (safe_log(d_fake_bin)?.mean_all()? * -1.0)?;
    let idx = Tensor::from_vec(
        real_labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
        (b, 1),
        d_real_style.device(),
    )?;
    let picked = d_real_style.gather(&idx, 1)?;
    let style_classification = (safe_log(&picked)?.mean_all()? * -1.0)?;
    // -(1/N) sum_i log c_i, averaged over the batch
    let style_ambiguity = (safe_log(c_fake_style)?.mean_all()? * -1.0)?;
    let loss_d = (&d_adversarial + (&style_classification * weights.classification)?)?;
    let loss_g = (&g_adversarial + (&style_ambiguity * weights.ambiguity)?)?;
    Ok(CanLosses {
        d_adversarial,
        style_classification,
        g_adversarial,
        style_ambiguity,
        loss_d,
        loss_g,
    })
}

/// Exact gradient-penalty value and the per-sample input gradients it used.
#[derive(Debug, Clone)]
pub struct GradientPenalty {
    pub value: f64,
    pub interpolates: Tensor,
    pub input_grads: Tensor,
    pub grad_norms: Vec<f64>,
    pub lambda: f64,
}

/// `lambda * E[(||grad_x critic(x_hat)|| - 1)^2]` over random interpolates
/// `x_hat = a x_real + (1 - a) x_fake`, one `a ~ U(0, 1)` per sample.
pub fn gradient_penalty(
    critic: &dyn Fn(&Tensor) -> Result<Tensor>,
    real: &Tensor,
    fake: &Tensor,
    lambda: f64,
    rng: &mut StreamRng,
) -> Result<GradientPenalty> {
    if real.dims() != fake.dims() {
        return Err(Error::Shape(format!("real {:?} vs fake {:?}", real.dims(), fake.dims())));
    }
    let b = real.dim(0)?;
    let mut bshape = vec![1usize; real.rank()];
    bshape[0] = b;
    let alpha: Vec<f64> = (0..b).map(|_| rand::Rng::random::<f64>(rng)).collect();
    let alpha = Tensor::from_vec(alpha, bshape.as_slice(), real.device())?.to_dtype(real.dtype())?;
    let mix = (real.detach().broadcast_mul(&alpha)? + fake.detach().broadcast_mul(&(1.0 - &alpha)?)?)?;
    let x = Var::from_tensor(&mix)?;
    let out = critic(x.as_tensor())?;
    let grads = out.sum_all()?.backward()?;
    let g = grads
        .get(x.as_tensor())
        .cloned()
        .unwrap_or(x.as_tensor().zeros_like()?);
    let norms: Vec<f64> = g
        .sqr()?
        .flatten_from(1)?
        .sum(1)?
        .sqrt()?
        .to_dtype(DType::F64)?
        .to_vec1()?;
    let value = lambda * norms.iter().map(|n| (n - 1.0).powi(2)).sum::<f64>() / b as f64;
    Ok(GradientPenalty {
        value,
        interpolates: mix,
        input_grads: g.detach(),
        grad_norms: norms,
        lambda,
    })
}

/// A scalar whose parameter-gradient approximates that of the penalty.
///
/// The penalty's parameter-gradient is the derivative of the summed critic
/// along `V = sum_i c_i u_i` (with `c_i = 2 lambda (||g_i|| - 1) / B` and
/// `u_i` the unit input gradient), which a central difference of two
/// ordinary forward passes recovers without second-order autodiff.
pub fn gradient_penalty_surrogate(
    critic: &dyn Fn(&Tensor) -> Result<Tensor>,
    gp: &GradientPenalty,
    step: f64,
) -> Result<Tensor> {
    let b = gp.grad_norms.len();
    let coeffs: Vec<f64> = gp
        .grad_norms
        .iter()
        .map(|&n| if n > 0.0 { 2.0 * gp.lambda * (n - 1.0) / (b as f64 * n) } else { 0.0 })
        .collect();
    let mut bshape = vec![1usize; gp.input_grads.rank()];
    bshape[0] = b;
    let c = Tensor::from_vec(coeffs, bshape.as_slice(), gp.input_grads.device())?.to_dtype(gp.input_grads.dtype())?;
    let v = gp.input_grads.broadcast_mul(&c)?;
    let v_norm = v.sqr()?.sum_all()?.sqrt()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if v_norm == 0.0 {
        return Ok(critic(&gp.interpolates)?.sum_all()?.zeros_like()?);
    }
    let dir = (v * (step / v_norm))?;
    let plus = critic(&(&gp.interpolates + &dir)?)?.sum_all()?;
    let minus = critic(&(&gp.interpolates - &dir)?)?.sum_all()?;
    Ok(((plus - minus)? * (v_norm / (2.0 * step)))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use candle_core::Device;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn t2(v: &[[f64; 2]]) -> Tensor {
        let flat: Vec<f64> = v.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (v.len(), 2), &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn maximal_confusion_fixed_point() {
        let half = t1(&[0.5, 0.5]);
        let uni = t2(&[[0.5, 0.5], [0.5, 0.5]]);
        let l = can_losses(&half, &half, &uni, &[0, 1], &uni, StyleLossWeights::default()).unwrap();
        let ln2 = 2f64.ln();
        assert!((val(&l.g_adversarial) - ln2).abs() < 1e-12);
        assert!((val(&l.d_adversarial) - 2.0 * ln2).abs() < 1e-12);
        assert!((val(&l.style_ambiguity) - ln2).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_saturates() {
        let l = can_losses(
            &t1(&[1.0, 1.0]),
            &t1(&[0.0, 0.0]),
            &t2(&[[1.0, 0.0], [0.0, 1.0]]),
            &[0, 1],
            &t2(&[[0.5, 0.5], [0.5, 0.5]]),
            StyleLossWeights::default(),
        )
        .unwrap();
        assert!(val(&l.d_adversarial).abs() < 1e-9);
        assert!((val(&l.g_adversarial) + PROB_EPS.ln()).abs() < 1e-9);
        assert!(val(&l.style_classification).abs() < 1e-12);
    }

    #[test]
    fn shape_and_label_errors() {
        let p = t1(&[0.5, 0.5]);
        let s = t2(&[[0.5, 0.5], [0.5, 0.5]]);
        assert!(can_losses(&p, &p, &s, &[0], &s, StyleLossWeights::default()).is_err());
        assert!(matches!(
            can_losses(&p, &p, &s, &[0, 2], &s, StyleLossWeights::default()),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn penalty_closed_forms() {
        let dev = Device::Cpu;
        let real = crate::rng::normal_tensor(&mut seeded(0), &[3, 2, 2, 2], &dev).unwrap();
        let fake = crate::rng::normal_tensor(&mut seeded(1), &[3, 2, 2, 2], &dev).unwrap();
        let d = 8.0;
        // unit-norm gradient: the first coordinate
        let unit = |x: &Tensor| -> Result<Tensor> { Ok(x.flatten_from(1)?.narrow(1, 0, 1)?.squeeze(1)?) };
        let gp = gradient_penalty(&unit, &real, &fake, 10.0, &mut seeded(2)).unwrap();
        assert!(gp.value.abs() < 1e-12);
        let twice_sum = |x: &Tensor| -> Result<Tensor> { Ok((x.flatten_from(1)?.sum(1)? * 2.0)?) };
        let gp = gradient_penalty(&twice_sum, &real, &fake, 10.0, &mut seeded(2)).unwrap();
        let want = 10.0 * (2.0 * f64::sqrt(d) - 1.0).powi(2);
        assert!((gp.value - want).abs() < 1e-9);
    }

    #[test]
    fn surrogate_gradient_matches_analytic() {
        // critic(x) = sum_j w_j x_j^2 per sample: g = 2 w x and
        // dGP/dw_j = (2 lambda / B) sum_i (||g_i|| - 1) / ||g_i|| * 4 w_j x_ij^2.
        let dev = Device::Cpu;
        let w = Var::new(&[0.7f64, -0.3, 1.1], &dev).unwrap();
        let critic = |x: &Tensor| -> Result<Tensor> { Ok(x.sqr()?.broadcast_mul(w.as_tensor())?.sum(1)?) };
        let real = crate::rng::normal_tensor(&mut seeded(3), &[4, 3], &dev).unwrap();
        let fake = crate::rng::normal_tensor(&mut seeded(4), &[4, 3], &dev).unwrap();
        let lambda = 10.0;
        let gp = gradient_penalty(&critic, &real, &fake, lambda, &mut seeded(5)).unwrap();
        let sur = gradient_penalty_surrogate(&critic, &gp, 1e-4).unwrap();
        let got = sur.backward().unwrap().get(w.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let x: Vec<Vec<f64>> = gp.interpolates.to_vec2().unwrap();
        let wv = w.as_tensor().to_vec1::<f64>().unwrap();
        for j in 0..3 {
            let mut want = 0.0;
            for xi in &x {
                let n = xi.iter().zip(&wv).map(|(a, b)| (2.0 * b * a).powi(2)).sum::<f64>().sqrt();
                want += 2.0 * lambda / 4.0 * (n - 1.0) / n * 4.0 * wv[j] * xi[j] * xi[j];
            }
            assert!((got[j] - want).abs() < 1e-5 * (1.0 + want.abs()), "{j}: {} vs {want}", got[j]);
        }
    }
}
