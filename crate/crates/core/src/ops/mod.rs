//! Forward/backward kernels for the layer set used by the model: 2-D
//! convolution, relu, 2x2 max-pool, fully connected, softmax cross-entropy.
//!
//! Kernels are pure functions over [`Tensor`]s; the compute graph in
//! [`crate::graph`] wires them into reverse-mode autodiff.

mod conv;
mod fc;
mod pool;
mod softmax;

pub use conv::{conv2d_backward, conv2d_forward, Conv2dGrads};
pub use fc::{fully_connected_backward, fully_connected_forward, FcGrads};
pub use pool::{maxpool2_backward, maxpool2_forward};
pub use softmax::{softmax_cross_entropy_backward, softmax_cross_entropy_forward, SoftmaxXent};

use crate::tensor::Tensor;

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.clear_grad();
    for v in out.values_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient gated by the saved input; subgradient at exactly 0 is 0.
pub fn relu_backward(grad_out: &[f64], saved_input: &Tensor) -> Vec<f64> {
    saved_input
        .values()
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::from_values(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&t).values(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_identity_on_positive() {
        let t = Tensor::from_values(&[4], vec![0.5, 1.0, 2.0, 3.5]).unwrap();
        assert_eq!(relu_forward(&t).values(), t.values());
    }

    #[test]
    fn relu_backward_gates_by_sign() {
        let t = Tensor::from_values(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let g = relu_backward(&[1.0, 1.0, 1.0], &t);
        assert_eq!(g, vec![0.0, 0.0, 1.0]);
    }
}
