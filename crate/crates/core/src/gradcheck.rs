//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::derotation::RotationVector;
use crate::error::{CoreError, Result};
use crate::graph::{ComputeGraph, NodeRef};
use crate::tensor::Tensor;

/// Relative error between analytic and numeric derivative with the usual
/// guarded denominator.
#[inline]
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max relative error between `analytic` and central differences of `f` at x.
pub fn fd_check_fn<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut buf = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        buf[i] = x[i] + eps;
        let fp = f(&buf);
        buf[i] = x[i] - eps;
        let fm = f(&buf);
        buf[i] = x[i];
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Checks a graph's analytic gradient at a leaf against central differences
/// of the scalar `output` node. Returns the max relative error over the
/// leaf's coordinates. The graph is left recomputed at its original values.
pub fn grad_check(
    graph: &mut ComputeGraph,
    output: NodeRef,
    wrt: NodeRef,
    eps: f64,
) -> Result<f64> {
    if graph.value(output).len() != 1 {
        return Err(CoreError::invalid(
            "grad_check",
            format!("output must be scalar, got {:?}", graph.value(output).shape()),
        ));
    }
    graph.recompute()?;
    graph.backward(output)?;
    let analytic = graph.grad(wrt).to_vec();
    let x0 = graph.value(wrt).values().to_vec();

    let mut worst = 0.0f64;
    let mut buf = x0.clone();
    for i in 0..x0.len() {
        buf[i] = x0[i] + eps;
        graph.set_leaf_value(wrt, &buf);
        graph.recompute()?;
        let fp = graph.value(output).item();
        buf[i] = x0[i] - eps;
        graph.set_leaf_value(wrt, &buf);
        graph.recompute()?;
        let fm = graph.value(output).item();
        buf[i] = x0[i];
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    graph.set_leaf_value(wrt, &x0);
    graph.recompute()?;
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_relative_error: f64,
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    // keep values away from 0 so relu/maxpool stay locally smooth
    let values = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_values(shape, values).unwrap()
}

/// Runs FD checks for every registered differentiable op on small random
/// instances. Used by the gradcheck CLI command and the acceptance suite.
pub fn standard_report(seed: u64, eps: f64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // conv2d: random 2x3x8x8 input, 4 kernels 3x3, stride 2, pad 1
    {
        let mut g = ComputeGraph::new();
        let x = g.leaf(rand_tensor(&[2, 3, 8, 8], &mut rng));
        let w = g.leaf(rand_tensor(&[4, 3, 3, 3], &mut rng));
        let b = g.leaf(rand_tensor(&[4], &mut rng));
        let y = g.conv2d(x, w, b, 2, 1)?;
        let loss = reduce(&mut g, y)?;
        for (name, leaf) in [
            ("conv2d/input", x),
            ("conv2d/weights", w),
            ("conv2d/bias", b),
        ] {
            out.push(OpCheck {
                name,
                max_relative_error: grad_check(&mut g, loss, leaf, eps)?,
            });
        }
    }

    // relu away from 0
    {
        let mut g = ComputeGraph::new();
        let x = g.leaf(rand_tensor(&[3, 5], &mut rng));
        let y = g.relu(x);
        let loss = reduce(&mut g, y)?;
        out.push(OpCheck {
            name: "relu",
            max_relative_error: grad_check(&mut g, loss, x, eps)?,
        });
    }

    // maxpool2 away from ties
    {
        let mut g = ComputeGraph::new();
        let x = g.leaf(rand_tensor(&[1, 1, 6, 6], &mut rng));
        let y = g.maxpool2(x);
        let loss = reduce(&mut g, y)?;
        out.push(OpCheck {
            name: "maxpool2",
            max_relative_error: grad_check(&mut g, loss, x, eps)?,
        });
    }

    // fully connected
    {
        let mut g = ComputeGraph::new();
        let x = g.leaf(rand_tensor(&[3, 7], &mut rng));
        let w = g.leaf(rand_tensor(&[4, 7], &mut rng));
        let b = g.leaf(rand_tensor(&[4], &mut rng));
        let y = g.fully_connected(x, w, b)?;
        let loss = reduce(&mut g, y)?;
        for (name, leaf) in [("fc/input", x), ("fc/weights", w), ("fc/bias", b)] {
            out.push(OpCheck {
                name,
                max_relative_error: grad_check(&mut g, loss, leaf, eps)?,
            });
        }
    }

    // softmax cross-entropy on a batch of 5
    {
        let mut g = ComputeGraph::new();
        let x = g.leaf(rand_tensor(&[5, 2], &mut rng));
        let mut labels = Tensor::zeros(&[5, 2]);
        for i in 0..5 {
            let hot = rng.gen_range(0..2usize);
            labels.values_mut()[i * 2 + hot] = 1.0;
        }
        let loss = g.softmax_cross_entropy(x, labels)?;
        out.push(OpCheck {
            name: "softmax_cross_entropy",
            max_relative_error: grad_check(&mut g, loss, x, eps)?,
        });
    }

    // derotation w.r.t. the feature map
    {
        let mut g = ComputeGraph::new();
        let x = g.leaf(rand_tensor(&[2, 2, 5, 5], &mut rng));
        let poses = vec![
            RotationVector::from_angle_deg(37.0),
            RotationVector::from_angle_deg(-112.0),
        ];
        let y = g.derotate(x, &poses)?;
        let loss = reduce(&mut g, y)?;
        out.push(OpCheck {
            name: "derotate/feature",
            max_relative_error: grad_check(&mut g, loss, x, eps)?,
        });
    }

    // rotation loss w.r.t. raw (c, s)
    {
        let mut g = ComputeGraph::new();
        let x = g.leaf(rand_tensor(&[4, 2], &mut rng));
        let targets = (0..4)
            .map(|_| RotationVector::from_angle_deg(rng.gen_range(-180.0..180.0)))
            .collect();
        let loss = g.rotation_loss(x, targets, vec![true; 4])?;
        out.push(OpCheck {
            name: "rotation_loss/(c,s)",
            max_relative_error: grad_check(&mut g, loss, x, eps)?,
        });
    }

    Ok(out)
}

/// Contract an arbitrary tensor node to a scalar with fixed varied
/// coefficients so every coordinate influences the output.
fn reduce(g: &mut ComputeGraph, x: NodeRef) -> Result<NodeRef> {
    let n = g.value(x).len();
    let weights: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * ((i % 7) as f64)).collect();
    g.weighted_sum(x, weights)
}
