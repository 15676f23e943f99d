use crate::tensor::Tensor;

/// 2x2 max-pool with stride 2. Odd extents are treated as padded with -inf on
/// the bottom/right edge. Returns the pooled map and the flat argmax index per
/// output cell (first index in row-major order wins ties).
pub fn maxpool2_forward(input: &Tensor) -> (Tensor, Vec<usize>) {
    let (n_batch, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let h_out = (h + 1) / 2;
    let w_out = (w + 1) / 2;
    let mut out = Tensor::zeros(&[n_batch, c, h_out, w_out]);
    let mut argmax = vec![0usize; out.len()];
    let iv = input.values();
    let ov = out.values_mut();

    let mut o = 0;
    for n in 0..n_batch {
        for ch in 0..c {
            let base = (n * c + ch) * h * w;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        let iy = oy * 2 + dy;
                        if iy >= h {
                            continue;
                        }
                        for dx in 0..2 {
                            let ix = ox * 2 + dx;
                            if ix >= w {
                                continue;
                            }
                            let idx = base + iy * w + ix;
                            if iv[idx] > best {
                                best = iv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    ov[o] = best;
                    argmax[o] = best_idx;
                    o += 1;
                }
            }
        }
    }
    (out, argmax)
}

/// Routes each output gradient to its recorded argmax cell.
pub fn maxpool2_backward(grad_out: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut g_in = vec![0.0; input_len];
    for (g, &idx) in grad_out.iter().zip(argmax) {
        g_in[idx] += g;
    }
    g_in
}
