//! Convolution kernels: im2col/col2im lowering onto a blocked matrix product.
//!
//! Every reduction runs in a fixed order and no fused multiply-add is used, so
//! results are bit-identical whether the vectorized or scalar path runs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const COL_BLOCK: usize = 256;

#[inline(always)]
fn gemm_body(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut j0 = 0;
    while j0 < n {
        let jn = COL_BLOCK.min(n - j0);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * n..].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, rest) = rest.split_at_mut(n);
            let c3 = &mut rest[..n];
            let (c0, c1, c2, c3) = (
                &mut c0[j0..j0 + jn],
                &mut c1[j0..j0 + jn],
                &mut c2[j0..j0 + jn],
                &mut c3[j0..j0 + jn],
            );
            for p in 0..k {
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                let row = &b[p * n + j0..p * n + j0 + jn];
                for j in 0..jn {
                    let v = row[j];
                    c0[j] += a0 * v;
                    c1[j] += a1 * v;
                    c2[j] += a2 * v;
                    c3[j] += a3 * v;
                }
            }
            i += 4;
        }
        while i < m {
            let ci = &mut c[i * n + j0..i * n + j0 + jn];
            for p in 0..k {
                let a0 = a[i * k + p];
                let row = &b[p * n + j0..p * n + j0 + jn];
                for j in 0..jn {
                    ci[j] += a0 * row[j];
                }
            }
            i += 1;
        }
        j0 += jn;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn gemm_avx(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_body(m, n, k, a, b, c)
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_avx(m, n, k, a, b, c) };
            return;
        }
    }
    gemm_body(m, n, k, a, b, c)
}

/// Row-major transpose of a `rows×cols` matrix.
pub fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2-D convolution window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds `[C, H, W]` into `[C·K·K, H'·W']` patches with zero padding.
pub fn im2col(g: &ConvGeometry, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patches back into `[C, H, W]`.
pub fn col2im_add(g: &ConvGeometry, cols: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(bias: &Tensor, out_channels: usize) -> Result<()> {
    if bias.shape() != [out_channels] {
        return Err(Error::shape("conv bias", bias.shape(), &[out_channels]));
    }
    Ok(())
}

/// Cross-correlation of `input [B,C,H,W]` with `weight [O,C,K,K]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::shape("conv2d (input vs weight channels)", input.shape(), weight.shape()));
    }
    if kh != kw {
        return Err(Error::invalid(format!("conv2d expects square kernels, got {kh}x{kw}")));
    }
    check_bias(bias, o)?;
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let g = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel: kh,
        stride,
        pad,
    };
    let (oh, ow) = (g.out_height(), g.out_width());
    let n = oh * ow;
    let mut out = vec![0.0; b * o * n];
    for bi in 0..b {
        let cols = im2col(&g, &input.data()[bi * c * h * w..(bi + 1) * c * h * w]);
        let dst = &mut out[bi * o * n..(bi + 1) * o * n];
        for (oc, &bv) in bias.data().iter().enumerate() {
            dst[oc * n..(oc + 1) * n].fill(bv);
        }
        gemm(o, n, g.rows(), weight.data(), &cols, dst);
    }
    Tensor::new(&[b, o, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (b, c, h, w) = input.dims4().expect("rank-4 input");
    let (o, _, k, _) = weight.dims4().expect("rank-4 weight");
    let g = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad,
    };
    let n = g.cols();
    let rows = g.rows();
    let weight_t = transpose(o, rows, weight.data());
    let mut gin = vec![0.0; b * c * h * w];
    let mut gw = vec![0.0; o * rows];
    let mut gb = vec![0.0; o];
    for bi in 0..b {
        let gout = &grad_out.data()[bi * o * n..(bi + 1) * o * n];
        for oc in 0..o {
            gb[oc] += gout[oc * n..(oc + 1) * n].iter().sum::<f64>();
        }
        let cols = im2col(&g, &input.data()[bi * c * h * w..(bi + 1) * c * h * w]);
        let cols_t = transpose(rows, n, &cols);
        gemm(o, rows, n, gout, &cols_t, &mut gw);
        let mut gcols = vec![0.0; rows * n];
        gemm(rows, n, o, &weight_t, gout, &mut gcols);
        col2im_add(&g, &gcols, &mut gin[bi * c * h * w..(bi + 1) * c * h * w]);
    }
    (
        Tensor::new(input.shape(), gin).expect("input grad"),
        Tensor::new(weight.shape(), gw).expect("weight grad"),
        Tensor::new(&[o], gb).expect("bias grad"),
    )
}

/// Output extent of a transposed convolution, if positive.
pub fn conv_transpose_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (input as isize - 1) * stride as isize + kernel as isize - 2 * pad as isize;
    (full > 0).then_some(full as usize)
}

/// Transposed convolution of `input [B,C,H,W]` with `weight [C,O,K,K]`.
pub fn conv2d_transpose(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let (wc, o, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::shape(
            "conv2d_transpose (input vs weight channels)",
            input.shape(),
            weight.shape(),
        ));
    }
    if kh != kw {
        return Err(Error::invalid(format!("conv2d_transpose expects square kernels, got {kh}x{kw}")));
    }
    check_bias(bias, o)?;
    if stride == 0 {
        return Err(Error::invalid("conv2d_transpose stride must be positive"));
    }
    let (oh, ow) = match (
        conv_transpose_extent(h, kh, stride, pad),
        conv_transpose_extent(w, kw, stride, pad),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::invalid(format!(
                "conv2d_transpose output extent is not positive for input {h}x{w}, kernel {kh}, stride {stride}, pad {pad}"
            )))
        }
    };
    let g = ConvGeometry {
        channels: o,
        height: oh,
        width: ow,
        kernel: kh,
        stride,
        pad,
    };
    debug_assert_eq!((g.out_height(), g.out_width()), (h, w));
    let rows = g.rows();
    let n = h * w;
    let weight_t = transpose(c, rows, weight.data());
    let plane = oh * ow;
    let mut out = vec![0.0; b * o * plane];
    for bi in 0..b {
        let dst = &mut out[bi * o * plane..(bi + 1) * o * plane];
        for (oc, &bv) in bias.data().iter().enumerate() {
            dst[oc * plane..(oc + 1) * plane].fill(bv);
        }
        let mut cols = vec![0.0; rows * n];
        gemm(rows, n, c, &weight_t, &input.data()[bi * c * n..(bi + 1) * c * n], &mut cols);
        col2im_add(&g, &cols, dst);
    }
    Tensor::new(&[b, o, oh, ow], out)
}

/// Gradients of [`conv2d_transpose`] with respect to input, weight and bias.
pub fn conv2d_transpose_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (b, c, h, w) = input.dims4().expect("rank-4 input");
    let (_, o, k, _) = weight.dims4().expect("rank-4 weight");
    let (_, _, oh, ow) = grad_out.dims4().expect("rank-4 grad");
    let g = ConvGeometry {
        channels: o,
        height: oh,
        width: ow,
        kernel: k,
        stride,
        pad,
    };
    let rows = g.rows();
    let n = h * w;
    let plane = oh * ow;
    let mut gin = vec![0.0; b * c * n];
    let mut gw = vec![0.0; c * rows];
    let mut gb = vec![0.0; o];
    for bi in 0..b {
        let gout = &grad_out.data()[bi * o * plane..(bi + 1) * o * plane];
        for oc in 0..o {
            gb[oc] += gout[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
        }
        let gcols = im2col(&g, gout);
        gemm(c, n, rows, weight.data(), &gcols, &mut gin[bi * c * n..(bi + 1) * c * n]);
        let gcols_t = transpose(rows, n, &gcols);
        gemm(c, rows, n, &input.data()[bi * c * n..(bi + 1) * c * n], &gcols_t, &mut gw);
    }
    (
        Tensor::new(input.shape(), gin).expect("input grad"),
        Tensor::new(weight.shape(), gw).expect("weight grad"),
        Tensor::new(&[o], gb).expect("bias grad"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        for &(m, n, k) in &[(1, 1, 1), (5, 7, 3), (9, 300, 11), (4, 513, 2)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut c = vec![0.0; m * n];
            gemm(m, n, k, &a, &b, &mut c);
            // same accumulation order per element, so equality is exact
            assert_eq!(c, naive_gemm(m, n, k, &a, &b));
        }
    }

    #[test]
    fn transpose_round_trips() {
        let src: Vec<f64> = (0..12).map(f64::from).collect();
        let t = transpose(3, 4, &src);
        assert_eq!(t[1], 4.0);
        assert_eq!(transpose(4, 3, &t), src);
    }
}
