use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derotation::{normalize_pose, RotationVector};
use crate::error::{CoreError, Result};
use crate::graph::{ComputeGraph, NodeRef};
use crate::optim::{he_normal, ParamStore};
use crate::tensor::Tensor;

/// Desk-scale topology: 3 shared conv+relu+pool blocks, then two branches of
/// 2 conv + 3 fc layers each, mirroring the original four-part structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub shared_channels: [usize; 3],
    pub branch_channels: usize,
    pub fc_hidden: [usize; 2],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 48,
            input_channels: 1,
            shared_channels: [8, 16, 32],
            branch_channels: 32,
            fc_hidden: [64, 32],
        }
    }
}

impl NetworkConfig {
    /// Spatial extent of the shared feature map (three pool-2 stages).
    pub fn feature_size(&self) -> usize {
        self.input_size / 8
    }

    pub fn feature_channels(&self) -> usize {
        self.shared_channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size % 8 != 0 || self.feature_size() < 3 {
            return Err(CoreError::invalid(
                "NetworkConfig",
                format!(
                    "input size {} must be a multiple of 8 with feature map >= 3x3",
                    self.input_size
                ),
            ));
        }
        Ok(())
    }
}

/// Parameters plus topology. Parameter names are prefixed by sub-network
/// ("shared.", "rot.", "det."), which is what stage freezing keys on.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Per-sample pose override (ground-truth-rotation mode, dummy poses for
    /// negatives). `None` entries keep the predicted pose.
    pub override_pose: Option<Vec<Option<RotationVector>>>,
    /// Skip derotation and the detection branch (rotation-only stage).
    pub skip_detection: bool,
}

pub struct ForwardResult {
    pub graph: ComputeGraph,
    /// Raw (n, 2) rotation-head outputs (c, s).
    pub raw_pose: NodeRef,
    /// Poses fed to the derotation layer after normalization and overrides.
    pub poses: Vec<RotationVector>,
    /// Detection logits (n, 2); None when detection was skipped.
    pub logits: Option<NodeRef>,
    /// Parameter-name / leaf pairs for gradient harvesting.
    pub param_leaves: Vec<(String, NodeRef)>,
}

impl ForwardResult {
    /// Copy accumulated leaf gradients back into the parameter store.
    pub fn harvest_grads(&self, params: &mut ParamStore) -> Result<()> {
        for (name, leaf) in &self.param_leaves {
            params.accumulate_grad(name, self.graph.grad(*leaf))?;
        }
        Ok(())
    }
}

impl Model {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &config;

        fn conv(
            params: &mut ParamStore,
            rng: &mut ChaCha8Rng,
            name: &str,
            c_in: usize,
            c_out: usize,
        ) {
            let fan_in = c_in * 9;
            params.insert(
                format!("{name}.w"),
                he_normal(&[c_out, c_in, 3, 3], fan_in, rng),
            );
            params.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
        }

        conv(&mut params, &mut rng, "shared.conv1", c.input_channels, c.shared_channels[0]);
        conv(&mut params, &mut rng, "shared.conv2", c.shared_channels[0], c.shared_channels[1]);
        conv(&mut params, &mut rng, "shared.conv3", c.shared_channels[1], c.shared_channels[2]);

        let feat = c.feature_size();
        let fc_in = c.branch_channels * feat * feat;
        for branch in ["rot", "det"] {
            conv(&mut params, &mut rng, &format!("{branch}.conv1"), c.shared_channels[2], c.branch_channels);
            conv(&mut params, &mut rng, &format!("{branch}.conv2"), c.branch_channels, c.branch_channels);
            let dims = [fc_in, c.fc_hidden[0], c.fc_hidden[1], 2];
            for (i, w) in dims.windows(2).enumerate() {
                params.insert(
                    format!("{branch}.fc{}.w", i + 1),
                    he_normal(&[w[1], w[0]], w[0], &mut rng),
                );
                params.insert(format!("{branch}.fc{}.b", i + 1), Tensor::zeros(&[w[1]]));
            }
        }

        Ok(Model { config, params })
    }

    fn leaf_param(
        &self,
        graph: &mut ComputeGraph,
        leaves: &mut Vec<(String, NodeRef)>,
        name: &str,
    ) -> NodeRef {
        let tensor = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let leaf = graph.leaf(tensor);
        leaves.push((name.to_string(), leaf));
        leaf
    }

    fn conv_block(
        &self,
        graph: &mut ComputeGraph,
        leaves: &mut Vec<(String, NodeRef)>,
        input: NodeRef,
        name: &str,
        pool: bool,
    ) -> Result<NodeRef> {
        let w = self.leaf_param(graph, leaves, &format!("{name}.w"));
        let b = self.leaf_param(graph, leaves, &format!("{name}.b"));
        let conv = graph.conv2d(input, w, b, 1, 1)?;
        let act = graph.relu(conv);
        Ok(if pool { graph.maxpool2(act) } else { act })
    }

    fn branch(
        &self,
        graph: &mut ComputeGraph,
        leaves: &mut Vec<(String, NodeRef)>,
        feature: NodeRef,
        prefix: &str,
    ) -> Result<NodeRef> {
        let c1 = self.conv_block(graph, leaves, feature, &format!("{prefix}.conv1"), false)?;
        let c2 = self.conv_block(graph, leaves, c1, &format!("{prefix}.conv2"), false)?;
        let mut x = c2;
        for i in 1..=3 {
            let w = self.leaf_param(graph, leaves, &format!("{prefix}.fc{i}.w"));
            let b = self.leaf_param(graph, leaves, &format!("{prefix}.fc{i}.b"));
            x = graph.fully_connected(x, w, b)?;
            if i < 3 {
                x = graph.relu(x);
            }
        }
        Ok(x)
    }

    /// Shared stack only (used for proposal features): conv+relu+pool x3.
    pub fn shared_stack(
        &self,
        graph: &mut ComputeGraph,
        leaves: &mut Vec<(String, NodeRef)>,
        input: NodeRef,
    ) -> Result<NodeRef> {
        let b1 = self.conv_block(graph, leaves, input, "shared.conv1", true)?;
        let b2 = self.conv_block(graph, leaves, b1, "shared.conv2", true)?;
        self.conv_block(graph, leaves, b2, "shared.conv3", true)
    }

    /// Plain forward of the shared stack, returning the feature map values.
    pub fn shared_features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut graph = ComputeGraph::new();
        let mut leaves = Vec::new();
        let input = graph.leaf(batch.clone());
        let feat = self.shared_stack(&mut graph, &mut leaves, input)?;
        Ok(graph.value(feat).clone())
    }

    /// Full forward: shared stack, rotation branch, pose normalization,
    /// per-sample derotation of the shared features, detection branch.
    pub fn forward_joint(&self, batch: &Tensor, options: &ForwardOptions) -> Result<ForwardResult> {
        if batch.shape().len() != 4
            || batch.shape()[1] != self.config.input_channels
            || batch.shape()[2] != self.config.input_size
            || batch.shape()[3] != self.config.input_size
        {
            return Err(CoreError::ShapeMismatch {
                context: "forward_joint",
                expected: format!(
                    "(n, {}, {}, {}) batch",
                    self.config.input_channels, self.config.input_size, self.config.input_size
                ),
                got: format!("{:?}", batch.shape()),
            });
        }
        let n = batch.shape()[0];
        if let Some(ov) = &options.override_pose {
            if ov.len() != n {
                return Err(CoreError::ShapeMismatch {
                    context: "forward_joint",
                    expected: format!("{n} pose overrides"),
                    got: format!("{}", ov.len()),
                });
            }
        }

        let mut graph = ComputeGraph::new();
        let mut leaves = Vec::new();
        let input = graph.leaf(batch.clone());
        let feature = self.shared_stack(&mut graph, &mut leaves, input)?;
        let raw_pose = self.branch(&mut graph, &mut leaves, feature, "rot")?;

        // normalized poses; degenerate raw output falls back to identity
        let raw = graph.value(raw_pose).values().to_vec();
        let mut poses: Vec<RotationVector> = (0..n)
            .map(|i| {
                normalize_pose(raw[2 * i], raw[2 * i + 1])
                    .unwrap_or_else(|_| RotationVector::identity())
            })
            .collect();
        if let Some(overrides) = &options.override_pose {
            for (pose, ov) in poses.iter_mut().zip(overrides) {
                if let Some(p) = ov {
                    *pose = *p;
                }
            }
        }

        let logits = if options.skip_detection {
            None
        } else {
            let derotated = graph.derotate(feature, &poses)?;
            Some(self.branch(&mut graph, &mut leaves, derotated, "det")?)
        };

        Ok(ForwardResult {
            graph,
            raw_pose,
            poses,
            logits,
            param_leaves: leaves,
        })
    }

    /// Detection probability (positive class) and predicted angle per sample.
    pub fn score(&self, batch: &Tensor) -> Result<Vec<(f64, f64)>> {
        let fwd = self.forward_joint(batch, &ForwardOptions::default())?;
        let logits = fwd.graph.value(fwd.logits.expect("detection enabled"));
        let n = batch.shape()[0];
        let lv = logits.values();
        Ok((0..n)
            .map(|i| {
                let (z0, z1) = (lv[2 * i], lv[2 * i + 1]);
                // class 1 = positive
                let m = z0.max(z1);
                let p1 = (z1 - m).exp() / ((z0 - m).exp() + (z1 - m).exp());
                (p1, fwd.poses[i].angle_deg())
            })
            .collect())
    }
}
