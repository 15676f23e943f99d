//! End-to-end glue: sample pools from a dataset on disk, the three training
//! modes (separated / joint / ground-truth rotation), detection over
//! proposals, and metric summaries. Both the command-line front end and the
//! acceptance suite drive the system through this module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, Detection, GroundTruth};
use crate::derotation::RotationVector;
use crate::error::{CoreError, Result};
use crate::eval::{
    self, angular_distance_deg, average_precision, iou, mabo, match_detections, recall_at_iou,
    PRCurve,
};
use crate::netarch::{
    augment, flip_patch, run_stage, EpochLog, Model, NetworkConfig, SamplePool,
    Stage, StagePlan, StageSpec, TrainingSample,
};
use crate::proposals::{candidate_windows, cluster_aspects, AspectClusterModel, ProposalConfig};
use crate::synthdata::Dataset;
use crate::tensor::Tensor;

/// Knobs for the staged training schedule and the sample pools.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_batches_per_epoch: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Augmentation rotation step for positives; 360 disables extra copies.
    pub augment_step_deg: f64,
    /// Random background windows drawn per training image.
    pub negatives_per_image: usize,
    /// Extra positive crops per annotation with perturbed position and
    /// scale, so branches tolerate the imperfect localization of proposal
    /// windows.
    pub positive_jitter: usize,
    /// Minimum overlap a jittered crop must keep with its annotation.
    pub jitter_min_iou: f64,
    /// Rotation-only phases run back to back. The rate must step down over
    /// training: the loss is noisy under a constant rate once jittered crops
    /// enter the pool, and only converges under a decayed tail.
    pub rotation_schedule: Vec<RotationPhase>,
    pub detection_epochs: usize,
    pub joint_epochs: usize,
    pub detection_lr: f64,
    pub joint_lr: f64,
}

/// One constant-rate phase of rotation-only training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationPhase {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_batches_per_epoch: Some(90),
            momentum: 0.9,
            weight_decay: 1e-4,
            augment_step_deg: 10.0,
            negatives_per_image: 24,
            positive_jitter: 3,
            jitter_min_iou: 0.5,
            rotation_schedule: vec![
                RotationPhase { epochs: 40, lr: 2e-3 },
                RotationPhase { epochs: 40, lr: 1e-3 },
                RotationPhase { epochs: 30, lr: 5e-4 },
                RotationPhase { epochs: 30, lr: 2e-4 },
                RotationPhase { epochs: 20, lr: 1e-4 },
            ],
            detection_epochs: 8,
            joint_epochs: 6,
            detection_lr: 2e-3,
            joint_lr: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Stages 1-2 only; the shared stack stays as stage 1 left it.
    Separated,
    /// All three stages; stage 3 trains everything end to end.
    Joint,
    /// Derotation driven by annotated angles (upper bound).
    GtRotation,
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "separated" => Ok(TrainMode::Separated),
            "joint" => Ok(TrainMode::Joint),
            "gt-rotation" => Ok(TrainMode::GtRotation),
            other => Err(format!(
                "unknown mode {other:?} (expected separated, joint or gt-rotation)"
            )),
        }
    }
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Separated => "separated",
            TrainMode::Joint => "joint",
            TrainMode::GtRotation => "gt-rotation",
        }
    }
}

fn patch_to_sample(
    patch: Tensor,
    positive: bool,
    angle_deg: Option<f64>,
    image_id: &str,
    bbox: BBox,
) -> TrainingSample {
    TrainingSample {
        patch,
        positive,
        pose: angle_deg.map(RotationVector::from_angle_deg),
        image_id: image_id.to_string(),
        bbox,
        synthetic: false,
    }
}

/// Crop annotated boxes as positives (optionally rotation/flip augmented)
/// and random low-overlap background windows as negatives.
pub fn build_sample_pool(
    dataset: &Dataset,
    ids: &[String],
    net: &NetworkConfig,
    config: &TrainConfig,
    pconfig: &ProposalConfig,
    seed: u64,
) -> Result<SamplePool> {
    let mut pool = SamplePool::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x706f6f6c);
    // separate stream so the positive crops don't depend on how many
    // negatives are drawn
    let mut neg_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6567);

    // the same window grid the proposal stage will search, so positive
    // crops match the misalignment the branches will see at test time
    let mut ratios: Vec<f64> = ids
        .iter()
        .filter_map(|id| dataset.entry(id))
        .flat_map(|e| e.annotations.iter().map(|a| a.bbox().aspect_ratio()))
        .collect();
    if ratios.is_empty() {
        return Err(CoreError::invalid("build_sample_pool", "no annotations"));
    }
    let distinct = {
        let mut sorted = ratios.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        sorted.len()
    };
    ratios.sort_by(f64::total_cmp);
    let centers = cluster_aspects(&ratios, pconfig.clusters.min(distinct).max(1))?;

    for id in ids {
        let entry = dataset
            .entry(id)
            .ok_or_else(|| CoreError::invalid("build_sample_pool", format!("unknown image {id}")))?;
        let image = dataset.load_image(entry)?;
        let gt_boxes: Vec<BBox> = entry.annotations.iter().map(|a| a.bbox()).collect();
        let windows = candidate_windows(image.width, image.height, &centers, &pconfig.windows);

        for ann in &entry.annotations {
            let bbox = ann.bbox();
            let mut crops = vec![bbox];
            let mut overlapping: Vec<BBox> = windows
                .iter()
                .filter(|(w, _)| iou(w, &bbox) >= pconfig.positive_iou)
                .map(|(w, _)| *w)
                .collect();
            while !overlapping.is_empty() && crops.len() < 1 + config.positive_jitter {
                let i = rng.gen_range(0..overlapping.len());
                crops.push(overlapping.swap_remove(i));
            }
            // fall back to random perturbations when the grid misses this
            // annotation entirely
            let mut attempts = 0;
            while crops.len() < 1 + config.positive_jitter && attempts < 20 * (1 + config.positive_jitter) {
                attempts += 1;
                let w = bbox.w * rng.gen_range(0.7..1.5);
                let h = bbox.h * rng.gen_range(0.7..1.5);
                let x = bbox.x + rng.gen_range(-0.18..0.18) * bbox.w;
                let y = bbox.y + rng.gen_range(-0.18..0.18) * bbox.h;
                let jittered = BBox::new(
                    x.clamp(0.0, (image.width as f64 - w).max(0.0)),
                    y.clamp(0.0, (image.height as f64 - h).max(0.0)),
                    w.min(image.width as f64),
                    h.min(image.height as f64),
                );
                if iou(&jittered, &bbox) >= config.jitter_min_iou {
                    crops.push(jittered);
                }
            }
            for crop in crops {
                let base = patch_to_sample(
                    image.crop_resize_square(&crop, net.input_size),
                    true,
                    Some(ann.angle_deg),
                    id,
                    crop,
                );
                if config.augment_step_deg < 360.0 {
                    pool.positives.extend(augment(&base, config.augment_step_deg)?);
                } else {
                    pool.positives.push(base);
                }
            }
        }

        let mut drawn = 0;
        let mut attempts = 0;
        while drawn < config.negatives_per_image && attempts < 50 * config.negatives_per_image {
            attempts += 1;
            let w = neg_rng.gen_range(16.0..(image.width as f64 * 0.6));
            let h = neg_rng.gen_range(16.0..(image.height as f64 * 0.6));
            if w > image.width as f64 || h > image.height as f64 {
                continue;
            }
            let x = neg_rng.gen_range(0.0..=(image.width as f64 - w));
            let y = neg_rng.gen_range(0.0..=(image.height as f64 - h));
            let bbox = BBox::new(x, y, w, h);
            let overlap = gt_boxes.iter().map(|g| iou(&bbox, g)).fold(0.0f64, f64::max);
            if overlap >= 0.2 {
                continue;
            }
            pool.negatives.push(patch_to_sample(
                image.crop_resize_square(&bbox, net.input_size),
                false,
                None,
                id,
                bbox,
            ));
            drawn += 1;
        }
    }
    if pool.positives.is_empty() || pool.negatives.is_empty() {
        return Err(CoreError::invalid(
            "build_sample_pool",
            "split produced an empty class",
        ));
    }
    Ok(pool)
}

pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
}

fn spec(stage: Stage, epochs: usize, lr: f64) -> StageSpec {
    StageSpec {
        stage,
        epochs,
        learning_rate: lr,
    }
}

fn plan(config: &TrainConfig, use_gt_pose: bool) -> StagePlan {
    StagePlan {
        stages: vec![],
        batch_size: config.batch_size,
        max_batches_per_epoch: config.max_batches_per_epoch,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        use_gt_pose,
    }
}

/// Train one mode from scratch. `separated` stops after the frozen-detection
/// stage; `joint` adds end-to-end fine-tuning; `gt-rotation` trains with the
/// derotation layer driven by annotated angles throughout.
/// Rotation-only stages, one per configured phase.
pub fn rotation_stages(config: &TrainConfig) -> Vec<StageSpec> {
    config
        .rotation_schedule
        .iter()
        .filter(|p| p.epochs > 0)
        .map(|p| spec(Stage::RotationOnly, p.epochs, p.lr))
        .collect()
}

pub fn train_mode(
    pool: &SamplePool,
    net: &NetworkConfig,
    config: &TrainConfig,
    mode: TrainMode,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut model = Model::new(net.clone(), seed)?;
    let mut logs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x747261696e);
    let p = plan(config, mode == TrainMode::GtRotation);
    let mut stages = rotation_stages(config);
    stages.push(spec(Stage::DetectionFrozen, config.detection_epochs, config.detection_lr));
    if mode != TrainMode::Separated {
        stages.push(spec(Stage::Joint, config.joint_epochs, config.joint_lr));
    }
    for s in &stages {
        run_stage(&mut model, &p, s, pool, &mut rng, &mut logs)?;
    }
    Ok(TrainOutcome { model, logs })
}

/// Train all three modes with a shared stage-1/stage-2 prefix, so a
/// three-way comparison costs one prefix plus two continuations.
pub struct ModeModels {
    pub separated: Model,
    pub joint: Model,
    pub gt_rotation: Model,
    pub logs: Vec<EpochLog>,
}

pub fn train_all_modes(
    pool: &SamplePool,
    net: &NetworkConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<ModeModels> {
    let mut model = Model::new(net.clone(), seed)?;
    let mut logs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x747261696e);
    let p = plan(config, false);
    for s in rotation_stages(config) {
        run_stage(&mut model, &p, &s, pool, &mut rng, &mut logs)?;
    }
    run_stage(
        &mut model,
        &p,
        &spec(Stage::DetectionFrozen, config.detection_epochs, config.detection_lr),
        pool,
        &mut rng,
        &mut logs,
    )?;
    let separated = model.clone();

    let mut joint = model.clone();
    let mut joint_rng = rng.clone();
    run_stage(
        &mut joint,
        &p,
        &spec(Stage::Joint, config.joint_epochs, config.joint_lr),
        pool,
        &mut joint_rng,
        &mut logs,
    )?;

    let mut gt_rotation = model;
    let p_gt = plan(config, true);
    run_stage(
        &mut gt_rotation,
        &p_gt,
        &spec(Stage::Joint, config.joint_epochs, config.joint_lr),
        pool,
        &mut rng,
        &mut logs,
    )?;

    Ok(ModeModels {
        separated,
        joint,
        gt_rotation,
        logs,
    })
}

/// All surviving proposal windows over a list of images.
pub fn propose_split(
    feature_model: &Model,
    dataset: &Dataset,
    ids: &[String],
    proposal_model: &AspectClusterModel,
) -> Result<Vec<crate::boxes::Proposal>> {
    let mut out = Vec::new();
    for id in ids {
        let entry = dataset
            .entry(id)
            .ok_or_else(|| CoreError::invalid("propose_split", format!("unknown image {id}")))?;
        let image = dataset.load_image(entry)?;
        out.extend(proposal_model.propose(feature_model, &image, id)?);
    }
    Ok(out)
}

/// Classify precomputed proposal boxes with the detection network. When
/// `gt_pose` is set the derotation layer is driven by the nearest
/// annotation's angle (the upper-bound evaluation); otherwise the predicted
/// pose is used.
pub fn score_proposals(
    model: &Model,
    dataset: &Dataset,
    ids: &[String],
    proposals: &[crate::boxes::Proposal],
    gt_pose: bool,
) -> Result<Vec<Detection>> {
    use crate::netarch::ForwardOptions;

    let mut detections = Vec::new();
    for id in ids {
        let entry = dataset
            .entry(id)
            .ok_or_else(|| CoreError::invalid("score_proposals", format!("unknown image {id}")))?;
        let image = dataset.load_image(entry)?;
        let proposals: Vec<&crate::boxes::Proposal> =
            proposals.iter().filter(|p| &p.image_id == id).collect();
        let s = model.config.input_size;
        let c = model.config.input_channels;
        let plane = c * s * s;
        for chunk in proposals.chunks(32) {
            let mut batch = Tensor::zeros(&[chunk.len(), c, s, s]);
            for (i, p) in chunk.iter().enumerate() {
                let patch = image.crop_resize_square(&p.bbox, s);
                batch.values_mut()[i * plane..(i + 1) * plane].copy_from_slice(patch.values());
            }
            let scored: Vec<(f64, f64)> = if gt_pose {
                // ground truth defines a pose only for windows that actually
                // cover an annotation; background windows take the identity
                // pose, matching how negatives traverse derotation in training
                let overrides: Vec<Option<RotationVector>> = chunk
                    .iter()
                    .map(|p| {
                        Some(
                            entry
                                .annotations
                                .iter()
                                .map(|a| (iou(&p.bbox, &a.bbox()), a.angle_deg))
                                .max_by(|a, b| a.0.total_cmp(&b.0))
                                .filter(|(overlap, _)| *overlap >= 0.5)
                                .map(|(_, angle)| RotationVector::from_angle_deg(angle))
                                .unwrap_or_else(RotationVector::identity),
                        )
                    })
                    .collect();
                let options = ForwardOptions {
                    override_pose: Some(overrides.clone()),
                    skip_detection: false,
                };
                let fwd = model.forward_joint(&batch, &options)?;
                let logits = fwd.graph.value(fwd.logits.expect("detection enabled"));
                let lv = logits.values();
                (0..chunk.len())
                    .map(|i| {
                        let m = lv[2 * i].max(lv[2 * i + 1]);
                        let p1 = (lv[2 * i + 1] - m).exp()
                            / ((lv[2 * i] - m).exp() + (lv[2 * i + 1] - m).exp());
                        (p1, fwd.poses[i].angle_deg())
                    })
                    .collect()
            } else {
                // detection probability from the single-view forward (the
                // derotation the detector was trained with); reported angle
                // from the multi-view average
                let scored = model.score(&batch)?;
                let boxes: Vec<BBox> = chunk.iter().map(|p| p.bbox).collect();
                let angles = predict_pose_angles(model, &image, &boxes, &POSE_VIEW_SCALES)?;
                scored
                    .into_iter()
                    .zip(angles)
                    .map(|((score, _), angle)| (score, angle))
                    .collect()
            };
            for (p, (score, angle)) in chunk.iter().zip(scored) {
                detections.push(Detection {
                    image_id: id.clone(),
                    bbox: p.bbox,
                    score,
                    angle_deg: angle,
                });
            }
        }
    }
    Ok(detections)
}

/// Generate proposals with `feature_model` and classify them with `model`.
pub fn detect(
    model: &Model,
    feature_model: &Model,
    dataset: &Dataset,
    ids: &[String],
    proposal_model: &AspectClusterModel,
    gt_pose: bool,
) -> Result<(Vec<crate::boxes::Proposal>, Vec<Detection>)> {
    let proposals = propose_split(feature_model, dataset, ids, proposal_model)?;
    let detections = score_proposals(model, dataset, ids, &proposals, gt_pose)?;
    Ok((proposals, detections))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RotationAccuracy {
    pub within_10: f64,
    pub within_20: f64,
    pub within_30: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub proposal_recall_at_05: f64,
    pub mabo: f64,
    pub rotation: Option<RotationAccuracy>,
    pub n_detections: usize,
    pub n_ground_truths: usize,
}

/// Detection metrics plus rotation accuracy on the true-positive matches.
pub fn evaluate(
    detections: &[Detection],
    proposals: &[crate::boxes::Proposal],
    gts: &[GroundTruth],
    tau: f64,
) -> Result<(Metrics, PRCurve)> {
    let curve = average_precision(detections, gts, tau)?;
    let matches = match_detections(detections, gts, tau);
    let pairs: Vec<(f64, f64)> = matches
        .order
        .iter()
        .zip(&matches.matched_gt)
        .filter_map(|(&di, gi)| {
            gi.map(|g| (detections[di].angle_deg, gts[g].angle_deg))
        })
        .collect();
    let rotation = if pairs.is_empty() {
        None
    } else {
        let fr = eval::rotation_accuracy(&pairs, &[10.0, 20.0, 30.0])?;
        Some(RotationAccuracy {
            within_10: fr[0],
            within_20: fr[1],
            within_30: fr[2],
            pairs: pairs.len(),
        })
    };
    let metrics = Metrics {
        ap: curve.ap,
        proposal_recall_at_05: recall_at_iou(proposals, gts, 0.5)?,
        mabo: mabo(proposals, gts)?,
        rotation,
        n_detections: detections.len(),
        n_ground_truths: gts.len(),
    };
    Ok((metrics, curve))
}

/// Pose predictions for a set of boxes in one image, averaged over symmetric
/// test-time views. Each box is scored as-is and horizontally flipped (the
/// flip maps content angle a to -a, so the flipped prediction is negated
/// before averaging), optionally at several window scales around the same
/// center. Estimates are combined as unit vectors so the average is circular.
pub fn predict_pose_angles(
    model: &Model,
    image: &crate::synthdata::Image,
    boxes: &[BBox],
    scales: &[f64],
) -> Result<Vec<f64>> {
    let s = model.config.input_size;
    let c = model.config.input_channels;
    let plane = c * s * s;
    let mut vx = vec![0.0f64; boxes.len()];
    let mut vy = vec![0.0f64; boxes.len()];
    for &scale in scales {
        for flip in [false, true] {
            for (offset, chunk) in boxes.chunks(32).enumerate() {
                let mut batch = Tensor::zeros(&[chunk.len(), c, s, s]);
                for (i, b) in chunk.iter().enumerate() {
                    let scaled = BBox::new(
                        b.x + b.w * (1.0 - scale) * 0.5,
                        b.y + b.h * (1.0 - scale) * 0.5,
                        b.w * scale,
                        b.h * scale,
                    );
                    let mut patch = image.crop_resize_square(&scaled, s);
                    if flip {
                        patch = flip_patch(&patch);
                    }
                    batch.values_mut()[i * plane..(i + 1) * plane]
                        .copy_from_slice(patch.values());
                }
                let fwd = model.forward_joint(
                    &batch,
                    &crate::netarch::ForwardOptions {
                        override_pose: None,
                        skip_detection: true,
                    },
                )?;
                for (i, pose) in fwd.poses.iter().enumerate() {
                    let a = if flip { -pose.angle_deg() } else { pose.angle_deg() }.to_radians();
                    vx[offset * 32 + i] += a.cos();
                    vy[offset * 32 + i] += a.sin();
                }
            }
        }
    }
    Ok(vx
        .into_iter()
        .zip(vy)
        .map(|(x, y)| y.atan2(x).to_degrees())
        .collect())
}

/// Window scales used when reporting a proposal's pose: the window itself
/// plus a slightly expanded view, each with its mirror image.
pub const POSE_VIEW_SCALES: [f64; 2] = [1.0, 1.15];

/// Rotation-branch quality in isolation: predict the angle of each annotated
/// box crop and report angular errors against the annotation.
pub fn rotation_branch_accuracy(
    model: &Model,
    dataset: &Dataset,
    ids: &[String],
) -> Result<RotationAccuracy> {
    let mut pairs = Vec::new();
    for id in ids {
        let entry = dataset
            .entry(id)
            .ok_or_else(|| CoreError::invalid("rotation_branch_accuracy", format!("unknown image {id}")))?;
        let image = dataset.load_image(entry)?;
        if entry.annotations.is_empty() {
            continue;
        }
        let boxes: Vec<BBox> = entry.annotations.iter().map(|a| a.bbox()).collect();
        let angles = predict_pose_angles(model, &image, &boxes, &POSE_VIEW_SCALES)?;
        for (ann, angle) in entry.annotations.iter().zip(angles) {
            pairs.push((angle, ann.angle_deg));
        }
    }
    if pairs.is_empty() {
        return Err(CoreError::invalid("rotation_branch_accuracy", "no annotated boxes"));
    }
    let fr = eval::rotation_accuracy(&pairs, &[10.0, 20.0, 30.0])?;
    Ok(RotationAccuracy {
        within_10: fr[0],
        within_20: fr[1],
        within_30: fr[2],
        pairs: pairs.len(),
    })
}

/// Rotation-branch quality over positive proposals: every proposal with
/// IOU >= tau against some annotation contributes a (predicted, annotated)
/// angle pair, the annotation being its best-overlap match.
pub fn rotation_accuracy_on_proposals(
    model: &Model,
    dataset: &Dataset,
    ids: &[String],
    proposals: &[crate::boxes::Proposal],
    tau: f64,
) -> Result<RotationAccuracy> {
    let mut pairs = Vec::new();
    for id in ids {
        let entry = dataset
            .entry(id)
            .ok_or_else(|| CoreError::invalid("rotation_accuracy_on_proposals", format!("unknown image {id}")))?;
        let image = dataset.load_image(entry)?;
        let positives: Vec<(&crate::boxes::Proposal, f64)> = proposals
            .iter()
            .filter(|p| &p.image_id == id)
            .filter_map(|p| {
                entry
                    .annotations
                    .iter()
                    .map(|a| (iou(&p.bbox, &a.bbox()), a.angle_deg))
                    .max_by(|a, b| a.0.total_cmp(&b.0))
                    .filter(|(overlap, _)| *overlap >= tau)
                    .map(|(_, angle)| (p, angle))
            })
            .collect();
        let boxes: Vec<BBox> = positives.iter().map(|(p, _)| p.bbox).collect();
        let angles = predict_pose_angles(model, &image, &boxes, &POSE_VIEW_SCALES)?;
        for ((_, gt_angle), angle) in positives.iter().zip(angles) {
            pairs.push((angle, *gt_angle));
        }
    }
    if pairs.is_empty() {
        return Err(CoreError::invalid(
            "rotation_accuracy_on_proposals",
            "no positive proposals",
        ));
    }
    let fr = eval::rotation_accuracy(&pairs, &[10.0, 20.0, 30.0])?;
    Ok(RotationAccuracy {
        within_10: fr[0],
        within_20: fr[1],
        within_30: fr[2],
        pairs: pairs.len(),
    })
}

/// False positives at the score threshold reaching the requested recall;
/// used to verify mining does not make the detector worse.
pub fn false_positives_at_recall(
    detections: &[Detection],
    gts: &[GroundTruth],
    tau: f64,
    target_recall: f64,
) -> Result<usize> {
    if gts.is_empty() {
        return Err(CoreError::invalid("false_positives_at_recall", "no ground truths"));
    }
    let matches = match_detections(detections, gts, tau);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let needed = (target_recall * gts.len() as f64).ceil() as usize;
    for gi in &matches.matched_gt {
        if gi.is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
        if tp >= needed {
            return Ok(fp);
        }
    }
    // recall never reached: every miss counts as if the whole list was kept
    Ok(fp + (needed - tp) * detections.len().max(1))
}

/// Angular distance helper re-exported for summaries.
pub fn angle_error(a: f64, b: f64) -> f64 {
    angular_distance_deg(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, SceneConfig};
    use tempfile::TempDir;

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            input_size: 24,
            shared_channels: [2, 3, 4],
            branch_channels: 4,
            fc_hidden: [8, 8],
            ..NetworkConfig::default()
        }
    }

    fn tiny_pconfig() -> ProposalConfig {
        ProposalConfig {
            clusters: 2,
            ..ProposalConfig::default()
        }
    }

    #[test]
    fn pool_from_disk_dataset_has_both_classes_and_is_deterministic() {
        let dir = TempDir::new().unwrap();
        let config = SceneConfig {
            width: 64,
            height: 64,
            seed: 9,
            ..SceneConfig::default()
        };
        let dataset = generate_dataset(&config, 6, dir.path()).unwrap();
        let train = TrainConfig {
            augment_step_deg: 360.0,
            negatives_per_image: 3,
            ..TrainConfig::default()
        };
        let ids = dataset.splits.train.clone();
        let a = build_sample_pool(&dataset, &ids, &tiny_net(), &train, &tiny_pconfig(), 7).unwrap();
        let b = build_sample_pool(&dataset, &ids, &tiny_net(), &train, &tiny_pconfig(), 7).unwrap();
        assert!(!a.positives.is_empty() && !a.negatives.is_empty());
        assert_eq!(a.positives.len(), b.positives.len());
        for (x, y) in a.negatives.iter().zip(&b.negatives) {
            assert_eq!(x.patch.values(), y.patch.values());
        }
        // negatives overlap no annotation by more than the cap
        for n in &a.negatives {
            let entry = dataset.entry(&n.image_id).unwrap();
            for ann in &entry.annotations {
                assert!(iou(&n.bbox, &ann.bbox()) < 0.2);
            }
        }
    }

    #[test]
    fn separated_mode_is_a_prefix_of_joint_mode() {
        let dir = TempDir::new().unwrap();
        let config = SceneConfig {
            width: 64,
            height: 64,
            seed: 3,
            ..SceneConfig::default()
        };
        let dataset = generate_dataset(&config, 4, dir.path()).unwrap();
        let train = TrainConfig {
            augment_step_deg: 360.0,
            negatives_per_image: 2,
            rotation_schedule: vec![RotationPhase { epochs: 1, lr: 1e-3 }],
            detection_epochs: 1,
            joint_epochs: 1,
            max_batches_per_epoch: Some(2),
            batch_size: 4,
            ..TrainConfig::default()
        };
        let ids = dataset.splits.train.clone();
        let pool = build_sample_pool(&dataset, &ids, &tiny_net(), &train, &tiny_pconfig(), 1).unwrap();
        let modes = train_all_modes(&pool, &tiny_net(), &train, 11).unwrap();
        // separated keeps the stage-1 shared weights; joint moves them
        assert_ne!(
            modes.separated.params.content_hash("shared."),
            modes.joint.params.content_hash("shared.")
        );
        // log contains all four stage blocks (two shared + two continuations)
        let stages: Vec<&str> = modes.logs.iter().map(|l| l.stage.as_str()).collect();
        assert!(stages.contains(&"rotation_only"));
        assert!(stages.contains(&"detection_frozen"));
        assert_eq!(stages.iter().filter(|s| **s == "joint").count(), 2);
    }

    #[test]
    fn false_positive_count_drops_with_better_scores() {
        let gt = |id: &str, x: f64| GroundTruth {
            image_id: id.into(),
            bbox: BBox::new(x, 0.0, 10.0, 10.0),
            angle_deg: 0.0,
        };
        let det = |id: &str, x: f64, score: f64| Detection {
            image_id: id.into(),
            bbox: BBox::new(x, 0.0, 10.0, 10.0),
            score,
            angle_deg: 0.0,
        };
        let gts = vec![gt("a", 0.0), gt("a", 50.0)];
        // clean detector: both hits first
        let clean = vec![det("a", 0.0, 0.9), det("a", 50.0, 0.8), det("a", 100.0, 0.2)];
        // noisy detector: an FP outranks a hit
        let noisy = vec![det("a", 0.0, 0.9), det("a", 100.0, 0.85), det("a", 50.0, 0.8)];
        assert_eq!(false_positives_at_recall(&clean, &gts, 0.5, 1.0).unwrap(), 0);
        assert_eq!(false_positives_at_recall(&noisy, &gts, 0.5, 1.0).unwrap(), 1);
    }
}
