//! Low-rank adapters on frozen linear layers.

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::DMatrix;

use crate::nn::ParamStore;
use crate::rng::StreamRng;
use crate::{Error, Result};

/// `delta = scale * A B` with `A: out x r` (zero at init) and `B: r x in`.
#[derive(Clone)]
pub struct LowRankAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
    pub enabled: bool,
}

impl LowRankAdapter {
    /// Registers `{prefix}.a` (zeros) and `{prefix}.b` (Gaussian, std `1/r`).
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        alpha: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("adapter rank must be >= 1"));
        }
        let a = store.zeros(&format!("{prefix}.a"), &[out_dim, rank])?;
        let b = store.normal(&format!("{prefix}.b"), &[rank, in_dim], 1.0 / rank as f64, rng)?;
        Ok(Self {
            a,
            b,
            scale: alpha / rank as f64,
            enabled: true,
        })
    }

    pub fn rank(&self) -> usize {
        self.b.dims()[0]
    }

    /// The dense `out x in` weight update this adapter represents.
    pub fn delta(&self) -> Result<Tensor> {
        Ok((self.a.matmul(&self.b)? * self.scale)?)
    }
}

/// `base(x) + scale * (x B^T) A^T`; the base weight is `out x in`.
pub fn apply_adapter(
    base_weight: &Tensor,
    base_bias: Option<&Tensor>,
    adapter: Option<&LowRankAdapter>,
    input: &Tensor,
) -> Result<Tensor> {
    let (out_dim, in_dim) = base_weight.dims2()?;
    let got = *input.dims().last().unwrap_or(&0);
    if got != in_dim {
        return Err(Error::DimensionMismatch { expected: in_dim, got });
    }
    let mut y = input.matmul(&base_weight.t()?)?;
    if let Some(b) = base_bias {
        y = y.broadcast_add(b)?;
    }
    match adapter {
        Some(ad) if ad.enabled => {
            if ad.a.dims2()?.0 != out_dim || ad.b.dims2()?.1 != in_dim {
                return Err(Error::Shape(format!(
                    "adapter {:?}x{:?} does not fit a {out_dim}x{in_dim} layer",
                    ad.a.dims(),
                    ad.b.dims()
                )));
            }
            let low = input.matmul(&ad.b.t()?)?.matmul(&ad.a.t()?)?;
            Ok((y + (low * ad.scale)?)?)
        }
        _ => Ok(y),
    }
}

/// A frozen linear layer with an optional adapter.
#[derive(Clone)]
pub struct LoraLinear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub adapter: Option<LowRankAdapter>,
    pub train_base: bool,
}

impl LoraLinear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (w, b) = if self.train_base {
            (self.weight.clone(), self.bias.clone())
        } else {
            (self.weight.detach(), self.bias.as_ref().map(Tensor::detach))
        };
        apply_adapter(&w, b.as_ref(), self.adapter.as_ref(), x)
    }
}

/// Numerical rank via SVD, with singular values below `tol * s_max` dropped.
pub fn matrix_rank(m: &Tensor, tol: f64) -> Result<usize> {
    let (r, c) = m.dims2()?;
    let data: Vec<f64> = m.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let svd = DMatrix::from_row_slice(r, c, &data).svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(svd.singular_values.iter().filter(|s| **s > tol * smax).count())
}

/// Attention widths of the transformer blocks in the 2.x-base UNet:
/// two per down level, one in the middle, three per up level.
pub const SD2_UNET_BLOCK_WIDTHS: [usize; 16] = [
    320, 320, 640, 640, 1280, 1280, 1280, 1280, 1280, 1280, 640, 640, 640, 320, 320, 320,
];
/// Text-encoder hidden size feeding cross-attention keys and values.
pub const SD2_CROSS_ATTENTION_DIM: usize = 1024;

/// Published UNet totals: parameters including adapters, and the trainable part.
pub const SD2_UNET_TOTAL_WITH_ADAPTERS: usize = 866_740_676;
pub const SD2_UNET_TRAINABLE: usize = 829_952;

/// Trainable parameters from adapters on every attention projection
/// (`to_q`, `to_k`, `to_v`, `to_out`) of both attention layers per block.
pub fn sd2_unet_lora_params(rank: usize) -> usize {
    SD2_UNET_BLOCK_WIDTHS
        .iter()
        .map(|&d| {
            let self_attn = 4 * (d + d);
            let cross = (d + d) + 2 * (SD2_CROSS_ATTENTION_DIM + d) + (d + d);
            rank * (self_attn + cross)
        })
        .sum()
}

/// Convenience for building a standalone adapted layer in tests and tools.
pub fn lora_linear(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    alpha: f64,
    rng: &mut StreamRng,
) -> Result<LoraLinear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let weight = store.uniform(&format!("base.{name}.weight"), &[out_dim, in_dim], bound, rng)?;
    let bias = store.uniform(&format!("base.{name}.bias"), &[out_dim], bound, rng)?;
    let adapter = LowRankAdapter::init(store, &format!("lora.{name}"), in_dim, out_dim, rank, alpha, rng)?;
    Ok(LoraLinear {
        weight,
        bias: Some(bias),
        adapter: Some(adapter),
        train_base: false,
    })
}

/// Fills an adapter's `A` factor with Gaussian values (for rank tests).
pub fn randomize(var: &Var, rng: &mut StreamRng, device: &Device) -> Result<()> {
    let t = crate::rng::normal_tensor(rng, var.dims(), device)?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn layer(rank: usize, alpha: f64) -> (ParamStore, LoraLinear) {
        let mut store = ParamStore::new(DType::F64, &Device::Cpu);
        let l = lora_linear(&mut store, "l", 8, 8, rank, alpha, &mut seeded(0)).unwrap();
        (store, l)
    }

    #[test]
    fn zero_a_is_bit_identical_to_base() {
        let (_, l) = layer(4, 4.0);
        let x = crate::rng::normal_tensor(&mut seeded(1), &[5, 8], &Device::Cpu).unwrap();
        let with = l.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = apply_adapter(&l.weight, l.bias.as_ref(), None, &x).unwrap();
        assert_eq!(with, base.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        assert_eq!(l.adapter.as_ref().unwrap().scale, 1.0);
    }

    #[test]
    fn delta_rank_is_bounded() {
        let (store, l) = layer(2, 2.0);
        randomize(store.get("lora.l.a").unwrap(), &mut seeded(2), &Device::Cpu).unwrap();
        let delta = l.adapter.as_ref().unwrap().delta().unwrap();
        assert_eq!(matrix_rank(&delta, 1e-10).unwrap(), 2);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (_, l) = layer(2, 2.0);
        let x = Tensor::zeros((1, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(l.forward(&x), Err(Error::DimensionMismatch { expected: 8, got: 5 })));
    }

    #[test]
    fn unet_layout_reproduces_published_count() {
        assert_eq!(sd2_unet_lora_params(4), SD2_UNET_TRAINABLE);
        let frac = SD2_UNET_TRAINABLE as f64 / SD2_UNET_TOTAL_WITH_ADAPTERS as f64;
        assert!((frac * 100.0 - 0.1).abs() < 0.01);
    }
}
