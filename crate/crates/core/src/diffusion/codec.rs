//! Boundary between pixel images and the space the sampler runs in.

use candle_core::Tensor;

use crate::{Error, Image, Result};

/// Maps signed CHW images to the sampler's space and back.
pub trait LatentCodec: Send + Sync {
    fn name(&self) -> String;
    /// Latent `(c, h, w)` for an image of `(c, h, w)`.
    fn latent_shape(&self, image_shape: [usize; 3]) -> Result<[usize; 3]>;
    fn encode(&self, image: &Tensor) -> Result<Tensor>;
    fn decode(&self, latent: &Tensor) -> Result<Tensor>;

    fn decode_image(&self, latent: &Tensor) -> Result<Image> {
        Image::from_signed_chw(&self.decode(latent)?)
    }
}

/// Pixel-space sampling: the latent is the image.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn name(&self) -> String {
        "identity".into()
    }

    fn latent_shape(&self, image_shape: [usize; 3]) -> Result<[usize; 3]> {
        Ok(image_shape)
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        Ok(image.clone())
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        Ok(latent.clone())
    }
}

/// Lossless rearrangement of `f x f` pixel blocks into channels.
///
/// Has the latent geometry of an autoencoder (smaller spatial extent, more
/// than three channels) without any learned weights.
#[derive(Debug, Clone, Copy)]
pub struct SpaceToDepthCodec {
    pub factor: usize,
}

impl LatentCodec for SpaceToDepthCodec {
    fn name(&self) -> String {
        format!("space_to_depth:{}", self.factor)
    }

    fn latent_shape(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        let f = self.factor;
        if f < 2 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible into {f}x{f} blocks")));
        }
        Ok([c * f * f, h / f, w / f])
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = image.dims3()?;
        let [lc, lh, lw] = self.latent_shape([c, h, w])?;
        let f = self.factor;
        Ok(image
            .reshape((c, lh, f, lw, f))?
            .permute((0, 2, 4, 1, 3))?
            .reshape((lc, lh, lw))?)
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let (lc, lh, lw) = latent.dims3()?;
        let f = self.factor;
        if lc % (f * f) != 0 {
            return Err(Error::Shape(format!("{lc} channels do not split into {f}x{f} blocks")));
        }
        let c = lc / (f * f);
        Ok(latent
            .reshape((c, f, f, lh, lw))?
            .permute((0, 3, 1, 4, 2))?
            .reshape((c, lh * f, lw * f))?)
    }
}

/// Placeholder for a frozen pretrained autoencoder; weights are not bundled.
#[derive(Debug, Clone)]
pub struct ExternalCodec {
    pub id: String,
}

impl ExternalCodec {
    fn unavailable(&self) -> Error {
        Error::BackendUnavailable(format!("latent codec `{}` has no local weights", self.id))
    }
}

impl LatentCodec for ExternalCodec {
    fn name(&self) -> String {
        format!("external:{}", self.id)
    }

    fn latent_shape(&self, _: [usize; 3]) -> Result<[usize; 3]> {
        Err(self.unavailable())
    }

    fn encode(&self, _: &Tensor) -> Result<Tensor> {
        Err(self.unavailable())
    }

    fn decode(&self, _: &Tensor) -> Result<Tensor> {
        Err(self.unavailable())
    }
}

/// `identity`, `space_to_depth:<f>` or `external:<id>`.
pub fn codec_from_name(name: &str) -> Result<Box<dyn LatentCodec>> {
    match name.split_once(':') {
        None if name == "identity" => Ok(Box::new(IdentityCodec)),
        Some(("space_to_depth", f)) => {
            let factor = f
                .parse()
                .map_err(|_| Error::Config(format!("bad space_to_depth factor `{f}`")))?;
            Ok(Box::new(SpaceToDepthCodec { factor }))
        }
        Some(("external", id)) => Ok(Box::new(ExternalCodec { id: id.to_string() })),
        _ => Err(Error::Config(format!("unknown codec `{name}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn space_to_depth_round_trips_exactly() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f64, 48.0, &dev).unwrap().reshape((3, 4, 4)).unwrap();
        let codec = SpaceToDepthCodec { factor: 2 };
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.dims(), &[12, 2, 2]);
        let [c, h, w] = codec.latent_shape([3, 4, 4]).unwrap();
        assert!(h < 4 && w < 4 && c > 3);
        let back = codec.decode(&z).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn names_resolve() {
        assert_eq!(codec_from_name("identity").unwrap().name(), "identity");
        assert_eq!(codec_from_name("space_to_depth:4").unwrap().name(), "space_to_depth:4");
        let ext = codec_from_name("external:sd2-vae").unwrap();
        assert!(matches!(ext.latent_shape([3, 8, 8]), Err(Error::BackendUnavailable(_))));
        assert!(codec_from_name("vae").is_err());
    }
}
