use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub struct SoftmaxXent {
    pub loss: f64,
    /// Softmax probabilities, saved for backward.
    pub probs: Tensor,
}

/// Mean cross-entropy over the batch with max-subtraction stabilization.
/// Labels must be one-hot rows.
pub fn softmax_cross_entropy_forward(logits: &Tensor, labels: &Tensor) -> Result<SoftmaxXent> {
    if logits.shape() != labels.shape() || logits.shape().len() != 2 {
        return Err(CoreError::ShapeMismatch {
            context: "softmax_cross_entropy",
            expected: format!("labels matching 2-D logits {:?}", logits.shape()),
            got: format!("{:?}", labels.shape()),
        });
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut probs = Tensor::zeros(&[n, k]);
    let lv = logits.values();
    let tv = labels.values();
    let pv = probs.values_mut();
    let mut loss = 0.0;
    for i in 0..n {
        let row = &lv[i * k..(i + 1) * k];
        let lab = &tv[i * k..(i + 1) * k];
        let ones = lab.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || lab.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(CoreError::invalid(
                "softmax_cross_entropy",
                format!("label row {} is not one-hot: {:?}", i, lab),
            ));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            let e = (row[j] - max).exp();
            pv[i * k + j] = e;
            z += e;
        }
        for j in 0..k {
            pv[i * k + j] /= z;
            if lab[j] == 1.0 {
                // log(p) = (x - max) - log z, computed without re-exponentiating
                loss -= (row[j] - max) - z.ln();
            }
        }
    }
    Ok(SoftmaxXent {
        loss: loss / n as f64,
        probs,
    })
}

/// Gradient on logits: (softmax - onehot) / n, scaled by the upstream scalar.
pub fn softmax_cross_entropy_backward(upstream: f64, probs: &Tensor, labels: &Tensor) -> Vec<f64> {
    let n = probs.shape()[0] as f64;
    probs
        .values()
        .iter()
        .zip(labels.values())
        .map(|(&p, &t)| upstream * (p - t) / n)
        .collect()
}
