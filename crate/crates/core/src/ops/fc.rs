use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub struct FcGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Affine map per batch row, row-vector convention: y = x . W^T + b.
/// Input may be 4-D; it is flattened per batch row. Weights are (out, in).
pub fn fully_connected_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n_batch = input.shape()[0];
    let d_in: usize = input.shape()[1..].iter().product();
    let (d_out, d_w) = (weights.shape()[0], weights.shape()[1]);
    if d_in != d_w {
        return Err(CoreError::ShapeMismatch {
            context: "fully_connected",
            expected: format!("flattened input row length {}", d_w),
            got: format!("{} (input shape {:?})", d_in, input.shape()),
        });
    }
    if bias.shape() != [d_out] {
        return Err(CoreError::ShapeMismatch {
            context: "fully_connected",
            expected: format!("bias shape [{}]", d_out),
            got: format!("{:?}", bias.shape()),
        });
    }
    let mut out = Tensor::zeros(&[n_batch, d_out]);
    let iv = input.values();
    let wv = weights.values();
    let bv = bias.values();
    let ov = out.values_mut();
    for n in 0..n_batch {
        let row = &iv[n * d_in..(n + 1) * d_in];
        for o in 0..d_out {
            let wrow = &wv[o * d_in..(o + 1) * d_in];
            let mut acc = bv[o];
            for (x, w) in row.iter().zip(wrow) {
                acc += x * w;
            }
            ov[n * d_out + o] = acc;
        }
    }
    Ok(out)
}

pub fn fully_connected_backward(grad_out: &[f64], input: &Tensor, weights: &Tensor) -> FcGrads {
    let n_batch = input.shape()[0];
    let d_in: usize = input.shape()[1..].iter().product();
    let d_out = weights.shape()[0];
    let mut g_in = Tensor::zeros(input.shape());
    let mut g_w = Tensor::zeros(weights.shape());
    let mut g_b = Tensor::zeros(&[d_out]);
    let iv = input.values();
    let wv = weights.values();
    {
        let giv = g_in.values_mut();
        let gwv = g_w.values_mut();
        let gbv = g_b.values_mut();
        for n in 0..n_batch {
            let x = &iv[n * d_in..(n + 1) * d_in];
            let gx = &mut giv[n * d_in..(n + 1) * d_in];
            for o in 0..d_out {
                let g = grad_out[n * d_out + o];
                gbv[o] += g;
                let wrow = &wv[o * d_in..(o + 1) * d_in];
                let gwrow = &mut gwv[o * d_in..(o + 1) * d_in];
                for i in 0..d_in {
                    gx[i] += g * wrow[i];
                    gwrow[i] += g * x[i];
                }
            }
        }
    }
    FcGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    }
}
