//! Encoder/decoder between the sampler's latent space and pixel space.
//!
//! Both codecs are exactly invertible. A lossy codec can be simulated by
//! setting `decode_noise`, which adds `N(0, ς²)` on every noisy decode.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    /// Orthonormal Haar transform of each 2×2 patch: `[C, H, W]` becomes
    /// `[4C, H/2, W/2]` with channels ordered (average, horizontal,
    /// vertical, diagonal) per input channel.
    HaarPatch2x2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    kind: CodecKind,
    pixel_dims: Vec<usize>,
    latent_dims: Vec<usize>,
    decode_noise: f64,
}

impl LatentCodec {
    pub fn new(kind: CodecKind, pixel_dims: &[usize]) -> Result<Self> {
        let latent_dims = match kind {
            CodecKind::Identity => pixel_dims.to_vec(),
            CodecKind::HaarPatch2x2 => match *pixel_dims {
                [c, h, w] if h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0 => vec![4 * c, h / 2, w / 2],
                _ => {
                    return Err(Error::shape(format!(
                        "Haar patch codec needs [C, H, W] with even H and W, got {pixel_dims:?}"
                    )))
                }
            },
        };
        Ok(Self {
            kind,
            pixel_dims: pixel_dims.to_vec(),
            latent_dims,
            decode_noise: 0.0,
        })
    }

    pub fn identity(pixel_dims: &[usize]) -> Self {
        Self::new(CodecKind::Identity, pixel_dims).expect("identity codec accepts any dims")
    }

    pub fn with_decode_noise(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::param(format!("decode noise must be ≥ 0, got {sigma}")));
        }
        self.decode_noise = sigma;
        Ok(self)
    }

    pub fn kind(&self) -> CodecKind {
        self.kind
    }

    pub fn pixel_dims(&self) -> &[usize] {
        &self.pixel_dims
    }

    pub fn latent_dims(&self) -> &[usize] {
        &self.latent_dims
    }

    pub fn decode_noise(&self) -> f64 {
        self.decode_noise
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_dims(&self.pixel_dims, "encode")?;
        match self.kind {
            CodecKind::Identity => Ok(x.clone()),
            CodecKind::HaarPatch2x2 => Ok(haar_forward(x, &self.latent_dims)),
        }
    }

    /// Exact inverse of [`encode`](Self::encode), ignoring `decode_noise`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        z.expect_dims(&self.latent_dims, "decode")?;
        match self.kind {
            CodecKind::Identity => Ok(z.clone()),
            CodecKind::HaarPatch2x2 => Ok(haar_inverse(z, &self.pixel_dims)),
        }
    }

    /// Decode, then add `N(0, ς²)` when the codec simulates loss.
    pub fn decode_noisy<R: Rng + ?Sized>(&self, z: &Tensor, rng: &mut R) -> Result<Tensor> {
        let mut x = self.decode(z)?;
        if self.decode_noise > 0.0 {
            for v in x.data_mut() {
                *v += self.decode_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(x)
    }
}

fn haar_forward(x: &Tensor, latent_dims: &[usize]) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (lh, lw) = (h / 2, w / 2);
    let mut z = Tensor::zeros(latent_dims);
    let out = z.data_mut();
    for ch in 0..c {
        for u in 0..lh {
            for v in 0..lw {
                let a = x.at3(ch, 2 * u, 2 * v);
                let b = x.at3(ch, 2 * u, 2 * v + 1);
                let cc = x.at3(ch, 2 * u + 1, 2 * v);
                let d = x.at3(ch, 2 * u + 1, 2 * v + 1);
                let coeffs = [
                    0.5 * (a + b + cc + d),
                    0.5 * (a - b + cc - d),
                    0.5 * (a + b - cc - d),
                    0.5 * (a - b - cc + d),
                ];
                for (q, coef) in coeffs.into_iter().enumerate() {
                    out[((4 * ch + q) * lh + u) * lw + v] = coef;
                }
            }
        }
    }
    z
}

fn haar_inverse(z: &Tensor, pixel_dims: &[usize]) -> Tensor {
    let (c, h, w) = (pixel_dims[0], pixel_dims[1], pixel_dims[2]);
    let (lh, lw) = (h / 2, w / 2);
    let mut x = Tensor::zeros(pixel_dims);
    let out = x.data_mut();
    for ch in 0..c {
        for u in 0..lh {
            for v in 0..lw {
                let s = z.at3(4 * ch, u, v);
                let hz = z.at3(4 * ch + 1, u, v);
                let vt = z.at3(4 * ch + 2, u, v);
                let dg = z.at3(4 * ch + 3, u, v);
                let base = (ch * h + 2 * u) * w + 2 * v;
                out[base] = 0.5 * (s + hz + vt + dg);
                out[base + 1] = 0.5 * (s - hz + vt - dg);
                out[base + w] = 0.5 * (s + hz - vt - dg);
                out[base + w + 1] = 0.5 * (s - hz - vt + dg);
            }
        }
    }
    x
}
