use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub struct Conv2dGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Valid output range along one axis for a fixed kernel offset, so the
/// patch-matrix fill never tests bounds: iy = oy*stride + k - pad must land
/// in [0, extent).
#[inline]
fn valid_range(out_extent: usize, in_extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // smallest oy with oy*stride + k - pad >= 0
    let lo = if k >= pad { 0 } else { (pad - k + stride - 1) / stride };
    // largest oy with oy*stride + k - pad < in_extent
    let hi_excl = if in_extent + pad > k {
        ((in_extent + pad - k - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

fn check_shapes(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize) -> Result<()> {
    if input.shape().len() != 4 || weights.shape().len() != 4 {
        return Err(CoreError::ShapeMismatch {
            context: "conv2d",
            expected: "4-D input and weights (NCHW / OIHW)".into(),
            got: format!("input {:?}, weights {:?}", input.shape(), weights.shape()),
        });
    }
    if input.shape()[1] != weights.shape()[1] {
        return Err(CoreError::ShapeMismatch {
            context: "conv2d",
            expected: format!("input channel axis = {}", weights.shape()[1]),
            got: format!("input channel axis = {}", input.shape()[1]),
        });
    }
    if bias.shape() != [weights.shape()[0]] {
        return Err(CoreError::ShapeMismatch {
            context: "conv2d",
            expected: format!("bias shape [{}]", weights.shape()[0]),
            got: format!("{:?}", bias.shape()),
        });
    }
    if stride == 0 {
        return Err(CoreError::invalid("conv2d", "stride must be >= 1"));
    }
    Ok(())
}

struct ConvDims {
    n_batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvDims {
    fn of(input: &Tensor, weights: &Tensor, stride: usize, pad: usize) -> Self {
        let (kh, kw) = (weights.shape()[2], weights.shape()[3]);
        let (h, w) = (input.shape()[2], input.shape()[3]);
        ConvDims {
            n_batch: input.shape()[0],
            c_in: input.shape()[1],
            h,
            w,
            c_out: weights.shape()[0],
            kh,
            kw,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        }
    }

    /// Rows of the patch matrix: one per (input channel, kernel offset).
    fn patch_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Columns of the patch matrix: one per output pixel.
    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Gather the receptive fields of one image into a dense matrix
/// (`patch_rows x out_pixels`, row-major) so the convolution becomes a single
/// matrix product. Out-of-bounds taps stay zero, which realises the implicit
/// zero padding.
fn fill_patch_matrix(col: &mut [f64], image: &[f64], d: &ConvDims, stride: usize, pad: usize) {
    col.iter_mut().for_each(|v| *v = 0.0);
    let m = d.out_pixels();
    for ci in 0..d.c_in {
        let in_base = ci * d.h * d.w;
        for ky in 0..d.kh {
            let (oy_lo, oy_hi) = valid_range(d.h_out, d.h, ky, stride, pad);
            for kx in 0..d.kw {
                let row = ((ci * d.kh + ky) * d.kw + kx) * m;
                let (ox_lo, ox_hi) = valid_range(d.w_out, d.w, kx, stride, pad);
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let row_in = in_base + iy * d.w;
                    let row_col = row + oy * d.w_out;
                    if stride == 1 {
                        let ix0 = ox_lo + kx - pad;
                        col[row_col + ox_lo..row_col + ox_hi]
                            .copy_from_slice(&image[row_in + ix0..row_in + ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - pad;
                            col[row_col + ox] = image[row_in + ix];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the image layout; the exact
/// transpose of `fill_patch_matrix`.
fn scatter_patch_matrix(col: &[f64], grad_image: &mut [f64], d: &ConvDims, stride: usize, pad: usize) {
    let m = d.out_pixels();
    for ci in 0..d.c_in {
        let in_base = ci * d.h * d.w;
        for ky in 0..d.kh {
            let (oy_lo, oy_hi) = valid_range(d.h_out, d.h, ky, stride, pad);
            for kx in 0..d.kw {
                let row = ((ci * d.kh + ky) * d.kw + kx) * m;
                let (ox_lo, ox_hi) = valid_range(d.w_out, d.w, kx, stride, pad);
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let row_in = in_base + iy * d.w;
                    let row_col = row + oy * d.w_out;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * stride + kx - pad;
                        grad_image[row_in + ix] += col[row_col + ox];
                    }
                }
            }
        }
    }
}

/// Row-major matrix product `c (+)= alpha * a * b` with the given dimensions.
fn gemm_rowmajor(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same product but with `a` read transposed (`a` stored k-major as `k x m`).
fn gemm_rowmajor_at(m: usize, k: usize, n: usize, a_t: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a_t.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a_t.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same product but with `b` read transposed (`b` stored as `n x k`).
fn gemm_rowmajor_bt(m: usize, k: usize, n: usize, a: &[f64], b_t: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b_t.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b_t.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    check_shapes(input, weights, bias, stride)?;
    let d = ConvDims::of(input, weights, stride, pad);
    if d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw {
        return Err(CoreError::ShapeMismatch {
            context: "conv2d",
            expected: format!("spatial extent >= kernel {}x{} after padding", d.kh, d.kw),
            got: format!("{}x{} with pad {}", d.h, d.w, pad),
        });
    }

    let mut out = Tensor::zeros(&[d.n_batch, d.c_out, d.h_out, d.w_out]);
    let iv = input.values();
    let wv = weights.values();
    let bv = bias.values();
    let ov = out.values_mut();

    let k = d.patch_rows();
    let m = d.out_pixels();
    let mut col = vec![0.0; k * m];
    let image_len = d.c_in * d.h * d.w;
    let out_len = d.c_out * m;

    for n in 0..d.n_batch {
        fill_patch_matrix(&mut col, &iv[n * image_len..(n + 1) * image_len], &d, stride, pad);
        let out_n = &mut ov[n * out_len..(n + 1) * out_len];
        for co in 0..d.c_out {
            out_n[co * m..(co + 1) * m].iter_mut().for_each(|v| *v = bv[co]);
        }
        gemm_rowmajor(d.c_out, k, m, wv, &col, 1.0, out_n);
    }
    Ok(out)
}

pub fn conv2d_backward(
    grad_out: &[f64],
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    pad: usize,
) -> Conv2dGrads {
    let d = ConvDims::of(input, weights, stride, pad);
    debug_assert_eq!(grad_out.len(), d.n_batch * d.c_out * d.out_pixels());

    let mut g_in = Tensor::zeros(input.shape());
    let mut g_w = Tensor::zeros(weights.shape());
    let mut g_b = Tensor::zeros(&[d.c_out]);

    let iv = input.values();
    let wv = weights.values();
    let giv = g_in.values_mut();

    let k = d.patch_rows();
    let m = d.out_pixels();
    let image_len = d.c_in * d.h * d.w;
    let out_len = d.c_out * m;

    // bias grad: plain sum over spatial and batch
    {
        let gbv = g_b.values_mut();
        for n in 0..d.n_batch {
            for co in 0..d.c_out {
                let base = (n * d.c_out + co) * m;
                gbv[co] += grad_out[base..base + m].iter().sum::<f64>();
            }
        }
    }

    let gwv = g_w.values_mut();
    let mut col = vec![0.0; k * m];
    let mut g_col = vec![0.0; k * m];
    for n in 0..d.n_batch {
        let g_out_n = &grad_out[n * out_len..(n + 1) * out_len];
        // weight grad: grad_out (c_out x m) times patches^T (m x k)
        fill_patch_matrix(&mut col, &iv[n * image_len..(n + 1) * image_len], &d, stride, pad);
        gemm_rowmajor_bt(d.c_out, m, k, g_out_n, &col, 1.0, gwv);
        // input grad: weights^T (k x c_out) times grad_out (c_out x m),
        // scattered back through the patch layout
        gemm_rowmajor_at(k, d.c_out, m, wv, g_out_n, 0.0, &mut g_col);
        scatter_patch_matrix(&g_col, &mut giv[n * image_len..(n + 1) * image_len], &d, stride, pad);
    }

    Conv2dGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    }
}
