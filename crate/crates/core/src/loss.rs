//! Rate-distortion objectives.
//!
//! The human-vision objective charges distortion on every pixel,
//! `rate + λ·k·MSE(x, x̂)`. The object-region objective replaces the MSE by
//! the MSE between mask-blackened images, so pixels outside the object mask
//! carry no distortion pressure at all and only the rate term acts on them.
//! Distortion is measured on 0–255 pixels (`k = 255²`) while images live in
//! `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Squared 8-bit peak; converts MSE on `[0,1]` pixels to MSE on 0–255 pixels.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

/// `[B,1,H,W]` mask of zeros and ones, 1 marking object pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    tensor: Tensor,
}

impl BinaryMask {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, c, _, _) = tensor.dims4()?;
        if c != 1 {
            return Err(Error::invalid(format!(
                "a mask has one channel, got shape {:?}",
                tensor.shape()
            )));
        }
        if let Some(v) = tensor.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("mask values must be 0 or 1, found {v}")));
        }
        Ok(Self { tensor })
    }

    pub fn ones(batch: usize, height: usize, width: usize) -> Self {
        Self {
            tensor: Tensor::ones(&[batch, 1, height, width]),
        }
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        Self {
            tensor: Tensor::zeros(&[batch, 1, height, width]),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn object_pixels(&self) -> usize {
        self.tensor.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Fraction of pixels marked as object.
    pub fn coverage(&self) -> f64 {
        self.object_pixels() as f64 / self.tensor.len() as f64
    }

    /// The mask repeated over `channels` channels, shape `[B,channels,H,W]`.
    pub fn expand(&self, channels: usize) -> Tensor {
        let (b, _, h, w) = self.tensor.dims4().expect("rank-4 mask");
        let plane = h * w;
        let mut data = Vec::with_capacity(b * channels * plane);
        for item in self.tensor.data().chunks(plane) {
            for _ in 0..channels {
                data.extend_from_slice(item);
            }
        }
        Tensor::new(&[b, channels, h, w], data).expect("shape")
    }

    /// Masks of a batch concatenated along the batch axis.
    pub fn stack(masks: &[BinaryMask]) -> Result<Self> {
        let tensors: Vec<Tensor> = masks.iter().map(|m| m.tensor.clone()).collect();
        Ok(Self {
            tensor: Tensor::stack_batch(&tensors)?,
        })
    }

    /// Elementwise OR.
    pub fn union(&self, other: &BinaryMask) -> Result<Self> {
        Ok(Self {
            tensor: self.tensor.zip_map(&other.tensor, "mask union", f64::max)?,
        })
    }
}

/// Denominator of the object-region MSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectMseNorm {
    /// Divide by every pixel of the image (the MSE of the masked images).
    #[default]
    TotalPixels,
    /// Divide by the object pixels only (union of both masks).
    ObjectPixels,
}

/// Blackens non-object pixels: `a ⊙ m`, the mask broadcast over channels.
pub fn mask_apply<'t>(image: Var<'t>, mask: &BinaryMask) -> Result<Var<'t>> {
    let shape = image.shape();
    let (b, _, h, w) = mask.tensor.dims4()?;
    if shape.len() != 4 || (shape[0], shape[2], shape[3]) != (b, h, w) {
        return Err(Error::shape("mask_apply", &shape, mask.tensor.shape()));
    }
    let expanded = image.tape().constant(mask.expand(shape[1]));
    image.mul(expanded)
}

/// MSE between the mask-blackened images `b ⊙ m_b` and `c ⊙ m_c`.
pub fn object_mse<'t>(
    b: Var<'t>,
    c: Var<'t>,
    mask_b: &BinaryMask,
    mask_c: &BinaryMask,
    norm: ObjectMseNorm,
) -> Result<Var<'t>> {
    let mse = mask_apply(b, mask_b)?.mean_square_diff(mask_apply(c, mask_c)?)?;
    match norm {
        ObjectMseNorm::TotalPixels => Ok(mse),
        ObjectMseNorm::ObjectPixels => {
            let object = mask_b.union(mask_c)?.object_pixels();
            if object == 0 {
                return Ok(mse.scale(0.0));
            }
            let shape = b.shape();
            let total = (shape[0] * shape[2] * shape[3]) as f64;
            Ok(mse.scale(total / object as f64))
        }
    }
}

/// The terms of one objective evaluation, all scalars on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    /// Bits per pixel.
    pub rate: Var<'t>,
    /// Distortion on 0–255 pixels (`k·MSE`).
    pub distortion: Var<'t>,
    /// `rate + λ·distortion`.
    pub total: Var<'t>,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive and finite, got {lambda}")));
    }
    Ok(())
}

fn combine<'t>(bits: Var<'t>, mse: Var<'t>, lambda: f64, num_pixels: usize) -> Result<LossTerms<'t>> {
    check_lambda(lambda)?;
    if num_pixels == 0 {
        return Err(Error::invalid("num_pixels must be positive"));
    }
    let rate = bits.scale(1.0 / num_pixels as f64);
    let distortion = mse.scale(DISTORTION_SCALE);
    let total = rate.add(distortion.scale(lambda))?;
    Ok(LossTerms {
        rate,
        distortion,
        total,
    })
}

/// `bits/num_pixels + λ·k·MSE(x, x̂)`.
pub fn loss_human<'t>(
    x: Var<'t>,
    x_hat: Var<'t>,
    bits: Var<'t>,
    lambda: f64,
    num_pixels: usize,
) -> Result<LossTerms<'t>> {
    let mse = x.mean_square_diff(x_hat)?;
    combine(bits, mse, lambda, num_pixels)
}

/// `bits/num_pixels + λ·k·ObjectMSE(x, x̂)` with one mask shared by both images.
pub fn loss_proposed<'t>(
    x: Var<'t>,
    x_hat: Var<'t>,
    mask: &BinaryMask,
    bits: Var<'t>,
    lambda: f64,
    num_pixels: usize,
    norm: ObjectMseNorm,
) -> Result<LossTerms<'t>> {
    let mse = object_mse(x, x_hat, mask, mask, norm)?;
    combine(bits, mse, lambda, num_pixels)
}
