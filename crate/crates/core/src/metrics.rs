//! Image quality metrics.

use crate::error::{Error, Result};
use crate::loss::BinaryMask;
use crate::tensor::Tensor;

/// Reported PSNR when the error vanishes.
pub const PSNR_CAP_DB: f64 = 100.0;
/// MSE below which PSNR is capped and flagged.
pub const PSNR_MSE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// The error was below [`PSNR_MSE_FLOOR`]; `db` is the cap.
    pub saturated: bool,
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse < PSNR_MSE_FLOOR {
            Psnr {
                db: PSNR_CAP_DB,
                saturated: true,
            }
        } else {
            Psnr {
                db: 10.0 * (1.0 / mse).log10(),
                saturated: false,
            }
        }
    }
}

fn image_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(format!("expected one image, got shape {:?}", t.shape()))),
    }
}

/// PSNR of `[0,1]` images, optionally restricted to the object pixels of `mask`.
///
/// The masked variant averages squared error over object pixels only.
pub fn psnr(a: &Tensor, b: &Tensor, mask: Option<&BinaryMask>) -> Result<Psnr> {
    let (c, h, w) = image_dims(a)?;
    if image_dims(b)? != (c, h, w) {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let plane = h * w;
    let (sum, count) = match mask {
        None => {
            let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            (s, a.len())
        }
        Some(m) => {
            let md = m.tensor();
            if md.shape() != [1, 1, h, w] {
                return Err(Error::shape("psnr mask", md.shape(), &[1, 1, h, w]));
            }
            let object = m.object_pixels();
            if object == 0 {
                return Err(Error::invalid("object PSNR needs a mask with at least one object pixel"));
            }
            let mut s = 0.0;
            for ch in 0..c {
                for (i, &mv) in md.data().iter().enumerate() {
                    if mv == 1.0 {
                        let d = a.data()[ch * plane + i] - b.data()[ch * plane + i];
                        s += d * d;
                    }
                }
            }
            (s, object * c)
        }
    };
    Ok(Psnr::from_mse(sum / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_saturate() {
        let a = Tensor::full(&[3, 4, 4], 0.3);
        let p = psnr(&a, &a, None).unwrap();
        assert!(p.saturated);
        assert_eq!(p.db, 100.0);
    }

    #[test]
    fn mse_one_hundredth_is_twenty_db() {
        let a = Tensor::zeros(&[3, 2, 2]);
        let b = Tensor::full(&[3, 2, 2], 0.1);
        let p = psnr(&a, &b, None).unwrap();
        assert!((p.db - 20.0).abs() < 1e-12);
        assert!(!p.saturated);
    }

    #[test]
    fn masked_variants() {
        let a = Tensor::zeros(&[1, 3, 2, 2]);
        let b = Tensor::new(&[1, 3, 2, 2], (0..12).map(|i| i as f64 / 20.0).collect()).unwrap();
        let full = psnr(&a, &b, None).unwrap();
        let ones = BinaryMask::ones(1, 2, 2);
        assert_eq!(psnr(&a, &b, Some(&ones)).unwrap(), full);
        assert!(psnr(&a, &b, Some(&BinaryMask::zeros(1, 2, 2))).is_err());
        // only pixel 0 is object: errors 0, 0.2, 0.4 over 3 values
        let m = BinaryMask::new(Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let expected = 10.0 * (3.0 / (0.04 + 0.16f64)).log10();
        assert!((psnr(&a, &b, Some(&m)).unwrap().db - expected).abs() < 1e-12);
    }
}
