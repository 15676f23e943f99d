use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::derotation::{derotate_forward, RotationVector};
use crate::error::{CoreError, Result};
use crate::netarch::model::{ForwardOptions, Model};
use crate::optim::{sgd_step, SgdConfig};
use crate::tensor::Tensor;

/// One training patch with its label and provenance.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// Planar (channels, size, size) patch.
    pub patch: Tensor,
    pub positive: bool,
    /// Ground-truth pose; defined only for positives.
    pub pose: Option<RotationVector>,
    pub image_id: String,
    pub bbox: BBox,
    /// True for rotation-synthesized copies of a crop. Such patches carry
    /// resampling artifacts real windows never have (zero-padded corner
    /// wedges, double interpolation), so detection-stage batches skip them:
    /// a classifier shown artifact-bearing positives against artifact-free
    /// negative windows learns the artifact, not the content.
    pub synthetic: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SamplePool {
    pub positives: Vec<TrainingSample>,
    pub negatives: Vec<TrainingSample>,
}

/// Without-replacement sampler: a shuffled index queue that refills (with a
/// fresh shuffle) once exhausted, so a pool smaller than the demand is
/// effectively resampled.
pub struct EpochSampler {
    len: usize,
    queue: Vec<usize>,
}

impl EpochSampler {
    pub fn new(len: usize) -> Self {
        EpochSampler { len, queue: vec![] }
    }

    pub fn draw(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.queue.is_empty() {
                self.queue = (0..self.len).collect();
                self.queue.shuffle(rng);
            }
            out.push(self.queue.pop().expect("non-empty pool"));
        }
        out
    }
}

/// 1:1 balanced minibatch: exactly size/2 positives and size/2 negatives.
pub fn sample_minibatch<'a>(
    pool: &'a SamplePool,
    size: usize,
    pos_sampler: &mut EpochSampler,
    neg_sampler: &mut EpochSampler,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a TrainingSample>> {
    if size % 2 != 0 {
        return Err(CoreError::invalid("sample_minibatch", "batch size must be even"));
    }
    if pool.positives.is_empty() || pool.negatives.is_empty() {
        return Err(CoreError::invalid(
            "sample_minibatch",
            "pool must contain both classes",
        ));
    }
    let half = size / 2;
    let mut batch: Vec<&TrainingSample> = pos_sampler
        .draw(half, rng)
        .into_iter()
        .map(|i| &pool.positives[i])
        .collect();
    batch.extend(neg_sampler.draw(half, rng).into_iter().map(|i| &pool.negatives[i]));
    Ok(batch)
}

/// Rotate a planar (C, H, W) patch by `delta_deg` about its center using the
/// derotation layer's sampling scheme.
pub fn rotate_patch(patch: &Tensor, delta_deg: f64) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(patch.shape());
    let batch = Tensor::from_values(&shape, patch.values().to_vec())?;
    // derotating by -delta applies a +delta rotation to the content's angle
    let (out, _) = derotate_forward(&batch, &[RotationVector::from_angle_deg(-delta_deg)])?;
    Tensor::from_values(patch.shape(), out.into_values())
}

/// Mirror a planar (C, H, W) patch horizontally.
pub fn flip_patch(patch: &Tensor) -> Tensor {
    let (c, h, w) = (patch.shape()[0], patch.shape()[1], patch.shape()[2]);
    let mut out = Tensor::zeros(patch.shape());
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let src = (ci * h + y) * w + (w - 1 - x);
                out.values_mut()[(ci * h + y) * w + x] = patch.values()[src];
            }
        }
    }
    out
}

/// Wrap an angle to [-180, 180).
pub fn wrap_deg(a: f64) -> f64 {
    let mut v = (a + 180.0).rem_euclid(360.0) - 180.0;
    if v >= 180.0 {
        v -= 360.0;
    }
    v
}

/// Rotation/flip augmentation of a positive sample: every `step_deg`
/// rotation of the original and of its horizontal flip. With the default 10
/// degree step this yields 72 samples. Flipping negates the angle.
pub fn augment(sample: &TrainingSample, step_deg: f64) -> Result<Vec<TrainingSample>> {
    let pose = sample.pose.ok_or_else(|| {
        CoreError::invalid("augment", "augmentation is defined for positives only")
    })?;
    let n_steps = (360.0 / step_deg).round() as usize;
    let base_angle = pose.angle_deg();
    let flipped = TrainingSample {
        patch: flip_patch(&sample.patch),
        pose: Some(RotationVector::from_angle_deg(-base_angle)),
        ..sample.clone()
    };

    let mut out = Vec::with_capacity(2 * n_steps);
    for source in [sample, &flipped] {
        let source_angle = source.pose.unwrap().angle_deg();
        for k in 0..n_steps {
            let delta = k as f64 * step_deg;
            let patch = if k == 0 {
                source.patch.clone()
            } else {
                rotate_patch(&source.patch, delta)?
            };
            out.push(TrainingSample {
                patch,
                pose: Some(RotationVector::from_angle_deg(wrap_deg(source_angle + delta))),
                // the k = 0 copies are the original crop and its exact
                // mirror; every other k is a resampled rotation
                synthetic: k != 0 || source.synthetic,
                ..source.clone()
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    RotationOnly,
    DetectionFrozen,
    Joint,
}

impl Stage {
    pub fn trainable(&self, param: &str) -> bool {
        match self {
            Stage::RotationOnly => param.starts_with("shared.") || param.starts_with("rot."),
            Stage::DetectionFrozen => param.starts_with("det."),
            Stage::Joint => true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::RotationOnly => "rotation_only",
            Stage::DetectionFrozen => "detection_frozen",
            Stage::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
    pub batch_size: usize,
    pub max_batches_per_epoch: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Feed ground-truth poses to the derotation layer instead of predicted
    /// ones (the upper-bound configuration).
    pub use_gt_pose: bool,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan {
            stages: vec![
                StageSpec {
                    stage: Stage::RotationOnly,
                    epochs: 20,
                    learning_rate: 1e-2,
                },
                StageSpec {
                    stage: Stage::DetectionFrozen,
                    epochs: 20,
                    learning_rate: 1e-2,
                },
                StageSpec {
                    stage: Stage::Joint,
                    epochs: 30,
                    learning_rate: 1e-3,
                },
            ],
            batch_size: 32,
            max_batches_per_epoch: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            use_gt_pose: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub rotation_loss: f64,
    pub detection_loss: f64,
    pub wall_ms: u128,
}

fn assemble_batch(
    samples: &[&TrainingSample],
    model: &Model,
    use_gt_pose: bool,
) -> Result<(Tensor, Vec<RotationVector>, Vec<bool>, Tensor, Vec<Option<RotationVector>>)> {
    let n = samples.len();
    let c = model.config.input_channels;
    let s = model.config.input_size;
    let mut batch = Tensor::zeros(&[n, c, s, s]);
    let mut labels = Tensor::zeros(&[n, 2]);
    let mut targets = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut overrides = Vec::with_capacity(n);
    let plane = c * s * s;
    for (i, sample) in samples.iter().enumerate() {
        if sample.patch.len() != plane {
            return Err(CoreError::ShapeMismatch {
                context: "assemble_batch",
                expected: format!("patch with {plane} values"),
                got: format!("{}", sample.patch.len()),
            });
        }
        batch.values_mut()[i * plane..(i + 1) * plane].copy_from_slice(sample.patch.values());
        let class = if sample.positive { 1 } else { 0 };
        labels.values_mut()[i * 2 + class] = 1.0;
        targets.push(sample.pose.unwrap_or_else(RotationVector::identity));
        mask.push(sample.positive);
        overrides.push(if !sample.positive {
            // negatives have no canonical orientation; identity pose
            Some(RotationVector::identity())
        } else if use_gt_pose {
            Some(sample.pose.unwrap_or_else(RotationVector::identity))
        } else {
            None
        });
    }
    Ok((batch, targets, mask, labels, overrides))
}

/// Run one training stage. Frozen parameter groups are bit-identical before
/// and after; a non-finite loss aborts with diagnostics.
pub fn run_stage(
    model: &mut Model,
    plan: &StagePlan,
    spec: &StageSpec,
    pool: &SamplePool,
    rng: &mut ChaCha8Rng,
    logs: &mut Vec<EpochLog>,
) -> Result<()> {
    let rotation_only = spec.stage == Stage::RotationOnly;
    if pool.positives.is_empty() {
        return Err(CoreError::invalid("run_stage", "no positive samples"));
    }
    if !rotation_only && pool.negatives.is_empty() {
        return Err(CoreError::invalid("run_stage", "no negative samples"));
    }

    let sgd = SgdConfig {
        learning_rate: spec.learning_rate,
        momentum: plan.momentum,
        weight_decay: plan.weight_decay,
        seed: 0,
    };
    sgd.validate()?;

    if !rotation_only && plan.batch_size % 2 != 0 {
        return Err(CoreError::invalid("run_stage", "batch size must be even"));
    }
    // Detection-bearing stages draw positives from the non-synthesized crops
    // only (see TrainingSample::synthetic); rotation-only training uses the
    // full augmented set.
    let pos_indices: Vec<usize> = if rotation_only {
        (0..pool.positives.len()).collect()
    } else {
        let real: Vec<usize> = pool
            .positives
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.synthetic)
            .map(|(i, _)| i)
            .collect();
        if real.is_empty() {
            (0..pool.positives.len()).collect()
        } else {
            real
        }
    };
    let mut pos_sampler = EpochSampler::new(pos_indices.len());
    let mut neg_sampler = EpochSampler::new(pool.negatives.len());
    let half = plan.batch_size / 2;
    let per_epoch = if rotation_only {
        pos_indices.len().div_ceil(plan.batch_size)
    } else {
        pos_indices.len().div_ceil(half)
    };
    let per_epoch = plan
        .max_batches_per_epoch
        .map_or(per_epoch, |cap| per_epoch.min(cap))
        .max(1);

    for epoch in 0..spec.epochs {
        let start = Instant::now();
        let mut rot_sum = 0.0;
        let mut det_sum = 0.0;
        for batch_idx in 0..per_epoch {
            let samples: Vec<&TrainingSample> = if rotation_only {
                pos_sampler
                    .draw(plan.batch_size, rng)
                    .into_iter()
                    .map(|i| &pool.positives[pos_indices[i]])
                    .collect()
            } else {
                // 1:1 balanced batch over the stage's positive subset
                let mut batch: Vec<&TrainingSample> = pos_sampler
                    .draw(half, rng)
                    .into_iter()
                    .map(|i| &pool.positives[pos_indices[i]])
                    .collect();
                batch.extend(
                    neg_sampler
                        .draw(half, rng)
                        .into_iter()
                        .map(|i| &pool.negatives[i]),
                );
                batch
            };
            let (batch, targets, mask, labels, overrides) =
                assemble_batch(&samples, model, plan.use_gt_pose)?;
            let options = ForwardOptions {
                override_pose: Some(overrides),
                skip_detection: rotation_only,
            };
            let mut fwd = model.forward_joint(&batch, &options)?;
            let rot_loss = fwd.graph.rotation_loss(fwd.raw_pose, targets, mask)?;
            let det_loss = match fwd.logits {
                Some(logits) => Some(fwd.graph.softmax_cross_entropy(logits, labels)?),
                None => None,
            };

            let rot_value = fwd.graph.value(rot_loss).item();
            let det_value = det_loss.map(|n| fwd.graph.value(n).item()).unwrap_or(0.0);
            if !rot_value.is_finite() || !det_value.is_finite() {
                return Err(CoreError::NanLoss {
                    stage: spec.stage.name().to_string(),
                    epoch,
                    batch: batch_idx,
                    rotation_loss: rot_value,
                    detection_loss: det_value,
                });
            }
            rot_sum += rot_value;
            det_sum += det_value;

            let roots: Vec<_> = match (spec.stage, det_loss) {
                (Stage::RotationOnly, _) => vec![rot_loss],
                (Stage::DetectionFrozen, Some(d)) => vec![d],
                (Stage::Joint, Some(d)) => vec![rot_loss, d],
                _ => unreachable!("detection loss exists unless rotation-only"),
            };
            fwd.graph.backward_multi(&roots)?;
            model.params.zero_grads();
            fwd.harvest_grads(&mut model.params)?;
            sgd_step(&mut model.params, &sgd, |name| spec.stage.trainable(name));
        }
        logs.push(EpochLog {
            stage: spec.stage.name().to_string(),
            epoch,
            rotation_loss: rot_sum / per_epoch as f64,
            detection_loss: det_sum / per_epoch as f64,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    Ok(())
}

fn sample_key(s: &TrainingSample) -> (String, i64, i64, i64, i64) {
    (
        s.image_id.clone(),
        (s.bbox.x * 4.0).round() as i64,
        (s.bbox.y * 4.0).round() as i64,
        (s.bbox.w * 4.0).round() as i64,
        (s.bbox.h * 4.0).round() as i64,
    )
}

/// Score every candidate negative; append those whose detection probability
/// reaches `threshold` (deduplicated by image and box) and retrain via the
/// supplied closure. Returns the number of negatives added in total.
pub fn mine_hard_negatives<F>(
    model: &mut Model,
    pool: &mut SamplePool,
    candidates: &[TrainingSample],
    threshold: f64,
    rounds: usize,
    mut retrain: F,
) -> Result<usize>
where
    F: FnMut(&mut Model, &SamplePool) -> Result<()>,
{
    let mut seen: HashSet<_> = pool.negatives.iter().map(sample_key).collect();
    let mut added_total = 0;
    for _ in 0..rounds {
        let mut added = 0;
        for chunk in candidates.chunks(64) {
            let refs: Vec<&TrainingSample> = chunk.iter().collect();
            let (batch, ..) = assemble_batch(&refs, model, false)?;
            let scores = model.score(&batch)?;
            for (sample, (p, _)) in chunk.iter().zip(scores) {
                if p >= threshold && seen.insert(sample_key(sample)) {
                    pool.negatives.push(sample.clone());
                    added += 1;
                }
            }
        }
        if added == 0 {
            break;
        }
        added_total += added;
        retrain(model, pool)?;
    }
    Ok(added_total)
}
