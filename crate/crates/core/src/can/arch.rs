//! Generator and discriminator layer plans and their candle networks.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{BatchNorm, Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::StyleHead;
use crate::nn::ParamStore;
use crate::rng::{normal_tensor_f32, seeded, StreamRng};
use crate::{Error, Image, Result};

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
/// Published parameter totals for the 512 networks.
pub const PUBLISHED_GENERATOR_PARAMS: usize = 48_014_784;
pub const PUBLISHED_DISCRIMINATOR_PARAMS: usize = 20_115_932;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    ConvTranspose,
    Conv,
    Linear,
}

/// One layer of a plan. Spatial sizes are square; linear layers use 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_size: usize,
    pub out_size: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub batch_norm: bool,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        let w = match self.kind {
            LayerKind::Linear => self.in_channels * self.out_channels,
            _ => self.in_channels * self.out_channels * self.kernel * self.kernel,
        };
        w + if self.bias { self.out_channels } else { 0 } + if self.batch_norm { 2 * self.out_channels } else { 0 }
    }
}

fn conv_out(size: usize, k: usize, s: usize, p: usize) -> usize {
    (size + 2 * p - k) / s + 1
}

fn conv_t_out(size: usize, k: usize, s: usize, p: usize) -> usize {
    (size - 1) * s + k - 2 * p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    pub image_dim: usize,
    pub out_channels: usize,
    /// Channel width of the last hidden layer; widths double toward the input.
    pub last_width: usize,
}

impl GeneratorSpec {
    /// The published architecture; only 256 and 512 are defined.
    pub fn published(image_dim: usize) -> Result<Self> {
        if image_dim != 256 && image_dim != 512 {
            return Err(Error::UnsupportedImageDim(image_dim));
        }
        Ok(Self {
            noise_dim: 100,
            image_dim,
            out_channels: 3,
            last_width: 32,
        })
    }

    /// Number of ×2 upsampling layers between the 4×4 seed and the output layer.
    pub fn n_up(&self) -> Result<usize> {
        if !self.image_dim.is_power_of_two() || self.image_dim < 8 {
            return Err(Error::invalid(format!("generator image_dim {} must be a power of two >= 8", self.image_dim)));
        }
        Ok(self.image_dim.trailing_zeros() as usize - 3)
    }

    pub fn plan(&self) -> Result<Vec<LayerShape>> {
        let n_up = self.n_up()?;
        let mut width = self.last_width << n_up;
        let mut plan = vec![LayerShape {
            kind: LayerKind::ConvTranspose,
            in_channels: self.noise_dim,
            out_channels: width,
            in_size: 1,
            out_size: conv_t_out(1, KERNEL, 1, 0),
            kernel: KERNEL,
            stride: 1,
            padding: 0,
            bias: false,
            batch_norm: true,
        }];
        let mut size = 4;
        for _ in 0..n_up {
            let out = conv_t_out(size, KERNEL, STRIDE, PADDING);
            plan.push(LayerShape {
                kind: LayerKind::ConvTranspose,
                in_channels: width,
                out_channels: width / 2,
                in_size: size,
                out_size: out,
                kernel: KERNEL,
                stride: STRIDE,
                padding: PADDING,
                bias: false,
                batch_norm: true,
            });
            width /= 2;
            size = out;
        }
        plan.push(LayerShape {
            kind: LayerKind::ConvTranspose,
            in_channels: width,
            out_channels: self.out_channels,
            in_size: size,
            out_size: conv_t_out(size, KERNEL, STRIDE, PADDING),
            kernel: KERNEL,
            stride: STRIDE,
            padding: PADDING,
            bias: false,
            batch_norm: false,
        });
        Ok(plan)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.plan()?.iter().map(LayerShape::param_count).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub image_dim: usize,
    pub in_channels: usize,
    pub first_width: usize,
    /// Channel-doubling downsampling convs after the first.
    pub n_double: usize,
    /// Width-preserving downsampling convs after those.
    pub n_const: usize,
    pub style_hidden: Vec<usize>,
    pub n_styles: usize,
    pub dropout: f64,
}

impl DiscriminatorSpec {
    pub fn published(image_dim: usize, n_styles: usize) -> Result<Self> {
        if image_dim != 256 && image_dim != 512 {
            return Err(Error::UnsupportedImageDim(image_dim));
        }
        Self {
            image_dim,
            in_channels: 3,
            first_width: 32,
            n_double: 5,
            n_const: 2,
            style_hidden: vec![1024, 512],
            n_styles,
            dropout: 0.5,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.n_styles < 2 {
            return Err(Error::invalid("discriminator needs at least two styles"));
        }
        let downs = 1 + self.n_double + self.n_const;
        if !self.image_dim.is_power_of_two() || self.image_dim >> downs == 0 {
            return Err(Error::invalid(format!(
                "image_dim {} cannot be halved {downs} times",
                self.image_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(self)
    }

    pub fn conv_plan(&self) -> Vec<LayerShape> {
        let mut plan = Vec::new();
        let mut size = self.image_dim;
        let mut width = self.first_width;
        let down = |in_c, out_c, size, bias, bn| LayerShape {
            kind: LayerKind::Conv,
            in_channels: in_c,
            out_channels: out_c,
            in_size: size,
            out_size: conv_out(size, KERNEL, STRIDE, PADDING),
            kernel: KERNEL,
            stride: STRIDE,
            padding: PADDING,
            bias,
            batch_norm: bn,
        };
        plan.push(down(self.in_channels, width, size, true, false));
        size /= 2;
        for _ in 0..self.n_double {
            plan.push(down(width, width * 2, size, false, true));
            width *= 2;
            size /= 2;
        }
        for _ in 0..self.n_const {
            plan.push(down(width, width, size, false, true));
            size /= 2;
        }
        plan
    }

    pub fn flatten_dim(&self) -> usize {
        let last = *self.conv_plan().last().expect("nonempty plan");
        last.out_size * last.out_size * last.out_channels
    }

    fn linear(in_dim: usize, out_dim: usize) -> LayerShape {
        LayerShape {
            kind: LayerKind::Linear,
            in_channels: in_dim,
            out_channels: out_dim,
            in_size: 1,
            out_size: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
            bias: true,
            batch_norm: false,
        }
    }

    pub fn binary_head_plan(&self) -> Vec<LayerShape> {
        vec![Self::linear(self.flatten_dim(), 1)]
    }

    pub fn style_head_plan(&self) -> Vec<LayerShape> {
        let mut dims = vec![self.flatten_dim()];
        dims.extend(&self.style_hidden);
        dims.push(self.n_styles);
        dims.windows(2).map(|w| Self::linear(w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.conv_plan()
            .iter()
            .chain(&self.binary_head_plan())
            .chain(&self.style_head_plan())
            .map(LayerShape::param_count)
            .sum()
    }
}

/// Derived count set against a published one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub derived: usize,
    pub published: usize,
}

impl ParamCountReport {
    pub fn delta(&self) -> i64 {
        self.derived as i64 - self.published as i64
    }

    pub fn exact(&self) -> bool {
        self.derived == self.published
    }
}

pub fn published_count_report(n_styles: usize) -> Result<(ParamCountReport, ParamCountReport)> {
    Ok((
        ParamCountReport {
            derived: GeneratorSpec::published(512)?.param_count()?,
            published: PUBLISHED_GENERATOR_PARAMS,
        },
        ParamCountReport {
            derived: DiscriminatorSpec::published(512, n_styles)?.param_count(),
            published: PUBLISHED_DISCRIMINATOR_PARAMS,
        },
    ))
}

/// N(0, 0.02) conv weights, N(1, 0.02) batch-norm scales, zero biases.
fn init_layer(store: &mut ParamStore, name: &str, l: &LayerShape, rng: &mut StreamRng) -> Result<(Tensor, Option<Tensor>)> {
    let shape: Vec<usize> = match l.kind {
        LayerKind::ConvTranspose => vec![l.in_channels, l.out_channels, l.kernel, l.kernel],
        LayerKind::Conv => vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
        LayerKind::Linear => vec![l.out_channels, l.in_channels],
    };
    let std = match l.kind {
        LayerKind::Linear => 1.0 / (l.in_channels as f64).sqrt(),
        _ => 0.02,
    };
    let w = store.normal(&format!("{name}.weight"), &shape, std, rng)?;
    let b = if l.bias {
        Some(store.zeros(&format!("{name}.bias"), &[l.out_channels])?)
    } else {
        None
    };
    Ok((w, b))
}

fn init_bn(store: &mut ParamStore, name: &str, c: usize, rng: &mut StreamRng) -> Result<BatchNorm> {
    let gamma: Vec<f64> = (0..c).map(|_| 1.0 + 0.02 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let weight = store.from_values(&format!("{name}.bn.weight"), &[c], gamma)?;
    let bias = store.zeros(&format!("{name}.bn.bias"), &[c])?;
    // running statistics live in the store so checkpoints carry them
    let mean = store.zeros(&format!("{name}.bn.running_mean"), &[c])?;
    let var = store.ones(&format!("{name}.bn.running_var"), &[c])?;
    Ok(BatchNorm::new(
        c,
        mean,
        var,
        weight,
        bias,
        BN_EPS,
    )?)
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut StreamRng) -> Result<Tensor> {
    if p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

fn leaky(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, LEAKY_SLOPE)?)
}

pub struct Generator {
    spec: GeneratorSpec,
    plan: Vec<LayerShape>,
    store: ParamStore,
    layers: Vec<(ConvTranspose2d, Option<BatchNorm>)>,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, seed: u64, device: &Device) -> Result<Self> {
        let plan = spec.plan()?;
        let mut store = ParamStore::new(DType::F32, device);
        let mut rng = seeded(seed);
        let mut layers = Vec::new();
        for (i, l) in plan.iter().enumerate() {
            let name = format!("g.{i}");
            let (w, b) = init_layer(&mut store, &name, l, &mut rng)?;
            let cfg = ConvTranspose2dConfig {
                padding: l.padding,
                stride: l.stride,
                ..Default::default()
            };
            let bn = if l.batch_norm {
                Some(init_bn(&mut store, &name, l.out_channels, &mut rng)?)
            } else {
                None
            };
            layers.push((ConvTranspose2d::new(w, b, cfg), bn));
        }
        Ok(Self { spec, plan, store, layers })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn plan(&self) -> &[LayerShape] {
        &self.plan
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn sample_noise(&self, batch: usize, rng: &mut StreamRng) -> Result<Tensor> {
        Ok(normal_tensor_f32(rng, &[batch, self.spec.noise_dim, 1, 1], 1.0, self.store.device())?)
    }

    /// Output `(B, C, H, W)` in `(-1, 1)` plus every intermediate shape.
    pub fn forward_with_shapes(&self, z: &Tensor, train: bool) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let mut x = z.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, (conv, bn)) in self.layers.iter().enumerate() {
            x = conv.forward(&x)?;
            if let Some(bn) = bn {
                x = candle_nn::ModuleT::forward_t(bn, &x, train)?;
            }
            x = if i == last { x.tanh()? } else { leaky(&x)? };
            shapes.push(x.dims().to_vec());
        }
        Ok((x, shapes))
    }

    pub fn forward(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_with_shapes(z, train)?.0)
    }
}

pub struct DiscriminatorOutput {
    /// Real/fake logits, `(B,)`.
    pub binary: Tensor,
    /// Style logits, `(B, n_styles)`.
    pub style: Tensor,
    pub shapes: Vec<Vec<usize>>,
}

pub struct Discriminator {
    spec: DiscriminatorSpec,
    store: ParamStore,
    convs: Vec<(Conv2d, Option<BatchNorm>)>,
    binary_head: candle_nn::Linear,
    style_head: Vec<candle_nn::Linear>,
    dropout_rng: std::sync::Mutex<StreamRng>,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, seed: u64, device: &Device) -> Result<Self> {
        let spec = spec.validated()?;
        let mut store = ParamStore::new(DType::F32, device);
        let mut rng = seeded(seed);
        let mut convs = Vec::new();
        for (i, l) in spec.conv_plan().iter().enumerate() {
            let name = format!("d.conv{i}");
            let (w, b) = init_layer(&mut store, &name, l, &mut rng)?;
            let cfg = Conv2dConfig {
                padding: l.padding,
                stride: l.stride,
                ..Default::default()
            };
            let bn = if l.batch_norm {
                Some(init_bn(&mut store, &name, l.out_channels, &mut rng)?)
            } else {
                None
            };
            convs.push((Conv2d::new(w, b, cfg), bn));
        }
        let mut linear = |name: &str, l: &LayerShape| -> Result<candle_nn::Linear> {
            let (w, b) = init_layer(&mut store, name, l, &mut rng)?;
            Ok(candle_nn::Linear::new(w, b))
        };
        let binary_head = linear("d.binary", &spec.binary_head_plan()[0])?;
        let style_head = spec
            .style_head_plan()
            .iter()
            .enumerate()
            .map(|(i, l)| linear(&format!("d.style{i}"), l))
            .collect::<Result<Vec<_>>>()?;
        let dropout_rng = std::sync::Mutex::new(seeded(seed ^ 0xd50f));
        Ok(Self {
            spec,
            store,
            convs,
            binary_head,
            style_head,
            dropout_rng,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Conv trunk output, flattened to `(B, flatten_dim)`.
    pub fn features(&self, x: &Tensor, train: bool) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let mut h = x.clone();
        let mut shapes = Vec::new();
        for (conv, bn) in &self.convs {
            h = conv.forward(&h)?;
            if let Some(bn) = bn {
                h = candle_nn::ModuleT::forward_t(bn, &h, train)?;
            }
            h = leaky(&h)?;
            shapes.push(h.dims().to_vec());
        }
        let flat = h.flatten_from(1)?;
        shapes.push(flat.dims().to_vec());
        Ok((flat, shapes))
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<DiscriminatorOutput> {
        let (flat, shapes) = self.features(x, train)?;
        let binary = self.binary_head.forward(&flat)?.squeeze(1)?;
        let mut s = flat;
        let last = self.style_head.len() - 1;
        for (i, l) in self.style_head.iter().enumerate() {
            s = l.forward(&s)?;
            if i < last {
                s = leaky(&s)?;
                if train {
                    let mut rng = self.dropout_rng.lock().expect("dropout rng poisoned");
                    s = dropout(&s, self.spec.dropout, &mut rng)?;
                }
            }
        }
        Ok(DiscriminatorOutput {
            binary,
            style: s,
            shapes,
        })
    }

    /// Critic value used by the gradient penalty: the real/fake logit.
    pub fn critic(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward(x, train)?.binary)
    }
}

impl StyleHead for Discriminator {
    fn image_dim(&self) -> usize {
        self.spec.image_dim
    }

    fn n_styles(&self) -> usize {
        self.spec.n_styles
    }

    fn style_logits(&self, image: &Image) -> Result<Vec<f64>> {
        let mut x = image.to_signed_chw(self.store.device())?;
        if self.spec.in_channels == 1 {
            x = x.mean_keepdim(0)?;
        }
        let out = self.forward(&x.unsqueeze(0)?, false)?;
        Ok(out.style.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_plan_512() {
        let plan = GeneratorSpec::published(512).unwrap().plan().unwrap();
        let sizes: Vec<usize> = plan.iter().map(|l| l.out_size).collect();
        let chans: Vec<usize> = plan.iter().map(|l| l.out_channels).collect();
        assert_eq!(sizes, vec![4, 8, 16, 32, 64, 128, 256, 512]);
        assert_eq!(chans, vec![2048, 1024, 512, 256, 128, 64, 32, 3]);
    }

    #[test]
    fn generator_count_matches_published() {
        let (g, d) = published_count_report(27).unwrap();
        assert!(g.exact(), "generator {g:?}");
        assert_eq!(d.derived, 49_476_028);
        assert_eq!(d.delta(), 29_360_096);
    }

    #[test]
    fn discriminator_flatten() {
        assert_eq!(DiscriminatorSpec::published(512, 27).unwrap().flatten_dim(), 2 * 2 * 1024);
        assert_eq!(DiscriminatorSpec::published(256, 10).unwrap().flatten_dim(), 1024);
        assert!(DiscriminatorSpec::published(128, 10).is_err());
        assert!(GeneratorSpec::published(300).is_err());
    }

    #[test]
    fn small_networks_follow_their_plans() {
        let dev = Device::Cpu;
        let gs = GeneratorSpec {
            noise_dim: 8,
            image_dim: 16,
            out_channels: 1,
            last_width: 4,
        };
        let g = Generator::new(gs.clone(), 0, &dev).unwrap();
        let z = g.sample_noise(2, &mut seeded(1)).unwrap();
        let (x, shapes) = g.forward_with_shapes(&z, true).unwrap();
        for (s, l) in shapes.iter().zip(gs.plan().unwrap()) {
            assert_eq!(s, &vec![2, l.out_channels, l.out_size, l.out_size]);
        }
        assert_eq!(g.params().num_params(), gs.param_count().unwrap());
        let ds = DiscriminatorSpec {
            image_dim: 16,
            in_channels: 1,
            first_width: 4,
            n_double: 1,
            n_const: 1,
            style_hidden: vec![16],
            n_styles: 2,
            dropout: 0.5,
        };
        let d = Discriminator::new(ds.clone(), 0, &dev).unwrap();
        let out = d.forward(&x, true).unwrap();
        assert_eq!(out.binary.dims(), &[2]);
        assert_eq!(out.style.dims(), &[2, 2]);
        assert_eq!(out.shapes.last().unwrap(), &vec![2, ds.flatten_dim()]);
        assert_eq!(d.params().num_params(), ds.param_count());
    }
}
