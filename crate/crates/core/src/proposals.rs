//! Discriminative region proposals: aspect-ratio clustering, one linear SVM
//! per cluster over pooled shared-stack features, a sliding-window scale
//! pyramid, and threshold calibration that keeps every annotated object.

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruth, Proposal};
use crate::error::{CoreError, Result};
use crate::eval::iou;
use crate::netarch::Model;
use crate::ops::maxpool2_forward;
use crate::synthdata::Image;
use crate::tensor::Tensor;

/// 1-D k-means over aspect ratios. Distance is measured between log-ratios so
/// that 2:1 and 1:2 sit symmetrically around square. Centers are seeded
/// deterministically by evenly spaced quantiles of the sorted distinct
/// log-ratios, then refined by Lloyd iterations until assignments stabilize.
/// Returned centers are plain ratios, sorted ascending.
pub fn cluster_aspects(ratios: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(CoreError::invalid("cluster_aspects", "k must be positive"));
    }
    for &r in ratios {
        if !(r.is_finite() && r > 0.0) {
            return Err(CoreError::invalid(
                "cluster_aspects",
                format!("aspect ratio must be finite and positive, got {r}"),
            ));
        }
    }
    let mut logs: Vec<f64> = ratios.iter().map(|r| r.ln()).collect();
    logs.sort_by(|a, b| a.total_cmp(b));
    let mut distinct = logs.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(CoreError::invalid(
            "cluster_aspects",
            format!("need at least {k} distinct ratios, got {}", distinct.len()),
        ));
    }

    // quantile seeding over distinct values guarantees k distinct centers
    let mut centers: Vec<f64> = (0..k)
        .map(|i| {
            let q = (i as f64 + 0.5) / k as f64;
            distinct[((q * distinct.len() as f64) as usize).min(distinct.len() - 1)]
        })
        .collect();
    centers.dedup();
    while centers.len() < k {
        // duplicates can only arise from quantile collisions; fill from
        // unused distinct values
        for &v in &distinct {
            if !centers.contains(&v) {
                centers.push(v);
                break;
            }
        }
        centers.sort_by(|a, b| a.total_cmp(b));
        centers.dedup();
    }

    let mut assignment = vec![usize::MAX; logs.len()];
    for _ in 0..200 {
        let mut changed = false;
        for (i, &v) in logs.iter().enumerate() {
            let best = nearest_center(&centers, v);
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (i, &v) in logs.iter().enumerate() {
            sums[assignment[i]] += v;
            counts[assignment[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            }
        }
        centers.sort_by(|a, b| a.total_cmp(b));
    }
    Ok(centers.into_iter().map(f64::exp).collect())
}

fn nearest_center(centers: &[f64], v: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in centers.iter().enumerate() {
        let d = (v - c).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Index of the cluster whose center is nearest in log space.
pub fn assign_cluster(centers: &[f64], ratio: f64) -> usize {
    let log_centers: Vec<f64> = centers.iter().map(|c| c.ln()).collect();
    nearest_center(&log_centers, ratio.ln())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 regularization strength.
    pub lambda: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            epochs: 100,
            learning_rate: 1e-2,
            lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn decision(&self, feature: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(feature)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias
    }
}

/// Deterministic full-batch subgradient descent on the L2-regularized hinge
/// loss, returning the average of the per-epoch iterates. Both classes must
/// be present.
pub fn train_svm(features: &[Vec<f64>], labels: &[bool], config: &SvmConfig) -> Result<LinearSvm> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(CoreError::invalid(
            "train_svm",
            "features and labels must be non-empty and of equal length",
        ));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(CoreError::invalid("train_svm", "inconsistent feature dimension"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(CoreError::invalid(
            "train_svm",
            "training set must contain both classes",
        ));
    }

    let n = features.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut w_avg = vec![0.0; dim];
    let mut b_avg = 0.0;
    for _ in 0..config.epochs {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, &label) in features.iter().zip(labels) {
            let y = if label { 1.0 } else { -1.0 };
            let margin = y * (w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b);
            if margin < 1.0 {
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g -= y * xi;
                }
                gb -= y;
            }
        }
        for ((wi, g), ga) in w.iter_mut().zip(&gw).zip(&mut w_avg) {
            *wi -= config.learning_rate * (g / n + config.lambda * *wi);
            *ga += *wi;
        }
        b -= config.learning_rate * gb / n;
        b_avg += b;
    }
    let e = config.epochs as f64;
    Ok(LinearSvm {
        weights: w_avg.into_iter().map(|v| v / e).collect(),
        bias: b_avg / e,
    })
}

/// Crop `bbox`, run the shared conv stack, max-pool the feature map down by
/// two and flatten: a fixed-length descriptor regardless of window shape.
pub fn pooled_feature(model: &Model, image: &Image, bbox: &BBox) -> Result<Vec<f64>> {
    let patch = image.crop_resize_square(bbox, model.config.input_size);
    let mut shape = vec![1];
    shape.extend_from_slice(patch.shape());
    let batch = Tensor::from_values(&shape, patch.into_values())?;
    let features = model.shared_features(&batch)?;
    let (pooled, _) = maxpool2_forward(&features);
    Ok(pooled.into_values())
}

/// Batched variant of [`pooled_feature`]: one shared-stack forward for many
/// windows of the same image.
pub fn pooled_features(model: &Model, image: &Image, boxes: &[BBox]) -> Result<Vec<Vec<f64>>> {
    if boxes.is_empty() {
        return Ok(vec![]);
    }
    let s = model.config.input_size;
    let c = model.config.input_channels;
    let plane = c * s * s;
    let mut batch = Tensor::zeros(&[boxes.len(), c, s, s]);
    for (i, bbox) in boxes.iter().enumerate() {
        let patch = image.crop_resize_square(bbox, s);
        batch.values_mut()[i * plane..(i + 1) * plane].copy_from_slice(patch.values());
    }
    let features = model.shared_features(&batch)?;
    let (pooled, _) = maxpool2_forward(&features);
    let dim = pooled.len() / boxes.len();
    Ok(pooled
        .values()
        .chunks(dim)
        .map(|c| c.to_vec())
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// Smallest window reference side, in pixels.
    pub min_scale: f64,
    /// Largest window reference side; the pyramid grows by sqrt(2) steps.
    pub max_scale: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            min_scale: 28.0,
            max_scale: 56.0,
        }
    }
}

/// Multi-scale sliding-window grid. Every scale `s` in a geometric sqrt(2)
/// pyramid is crossed with every cluster ratio `r`, giving windows of size
/// (s*sqrt(r), s/sqrt(r)) at stride s/4; only windows fully inside the image
/// are kept. Returns (window, cluster index) pairs.
pub fn candidate_windows(
    width: usize,
    height: usize,
    centers: &[f64],
    config: &WindowConfig,
) -> Vec<(BBox, usize)> {
    let mut out = Vec::new();
    let mut scale = config.min_scale;
    while scale <= config.max_scale * 1.0001 {
        for (cluster, &r) in centers.iter().enumerate() {
            let w = scale * r.sqrt();
            let h = scale / r.sqrt();
            if w > width as f64 || h > height as f64 {
                continue;
            }
            let stride = (scale / 4.0).max(1.0);
            let mut y = 0.0;
            loop {
                let mut x = 0.0;
                loop {
                    out.push((BBox::new(x, y, w, h), cluster));
                    if x + w >= width as f64 {
                        break;
                    }
                    x = (x + stride).min(width as f64 - w);
                }
                if y + h >= height as f64 {
                    break;
                }
                y = (y + stride).min(height as f64 - h);
            }
        }
        scale *= std::f64::consts::SQRT_2;
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct ScoredWindow {
    pub bbox: BBox,
    pub cluster: usize,
    pub score: f64,
    /// Index of the image this window was scored on.
    pub image: usize,
}

/// Per-cluster acceptance thresholds guaranteeing every ground truth keeps at
/// least one window with IOU >= `min_iou`. Candidates are visited in
/// descending score order; a candidate is activated only if it is the first
/// to cover some still-uncovered ground truth. Each cluster's threshold is
/// the lowest activated score in that cluster, or +inf for clusters that
/// never had to fire. Errors if some ground truth cannot be covered at all.
pub fn calibrate_thresholds(
    candidates: &[ScoredWindow],
    ground_truths: &[(usize, BBox)],
    n_clusters: usize,
    min_iou: f64,
) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .score
            .total_cmp(&candidates[a].score)
            .then(a.cmp(&b))
    });

    let mut covered = vec![false; ground_truths.len()];
    let mut thresholds = vec![f64::INFINITY; n_clusters];
    let mut remaining = ground_truths.len();
    for &ci in &order {
        if remaining == 0 {
            break;
        }
        let cand = &candidates[ci];
        let mut fires = false;
        for (gi, (img, gt)) in ground_truths.iter().enumerate() {
            if !covered[gi] && *img == cand.image && iou(&cand.bbox, gt) >= min_iou {
                covered[gi] = true;
                remaining -= 1;
                fires = true;
            }
        }
        if fires {
            thresholds[cand.cluster] = thresholds[cand.cluster].min(cand.score);
        }
    }
    if remaining > 0 {
        let missed: Vec<String> = ground_truths
            .iter()
            .zip(&covered)
            .filter(|(_, &c)| !c)
            .map(|((img, gt), _)| format!("image {img} box {gt:?}"))
            .collect();
        return Err(CoreError::invalid(
            "calibrate_thresholds",
            format!("no candidate covers: {}", missed.join("; ")),
        ));
    }
    Ok(thresholds)
}

/// The full proposal model: cluster centers, one SVM per cluster, calibrated
/// per-cluster thresholds, and the window grid parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AspectClusterModel {
    pub centers: Vec<f64>,
    pub svms: Vec<LinearSvm>,
    /// +inf marks clusters that never fire; encoded as null in JSON.
    #[serde(with = "inf_as_null")]
    pub thresholds: Vec<f64>,
    pub windows: WindowConfig,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opts: Vec<Option<f64>> = v.iter().map(|&x| x.is_finite().then_some(x)).collect();
        opts.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opts: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(opts.into_iter().map(|o| o.unwrap_or(f64::INFINITY)).collect())
    }
}

impl AspectClusterModel {
    /// Score every window on `image` and keep those at or above their
    /// cluster's threshold. No non-maximum suppression.
    pub fn propose(&self, model: &Model, image: &Image, image_id: &str) -> Result<Vec<Proposal>> {
        let windows = candidate_windows(image.width, image.height, &self.centers, &self.windows);
        let boxes: Vec<BBox> = windows.iter().map(|(b, _)| *b).collect();
        let mut out = Vec::new();
        for (chunk, window_chunk) in boxes.chunks(64).zip(windows.chunks(64)) {
            let feats = pooled_features(model, image, chunk)?;
            for (feat, (bbox, cluster)) in feats.iter().zip(window_chunk) {
                let score = self.svms[*cluster].decision(feat);
                if score >= self.thresholds[*cluster] {
                    out.push(Proposal {
                        image_id: image_id.to_string(),
                        bbox: *bbox,
                        score,
                        cluster: *cluster,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Score every window without applying thresholds (used for calibration).
    pub fn score_windows(
        &self,
        model: &Model,
        image: &Image,
        image_index: usize,
    ) -> Result<Vec<ScoredWindow>> {
        let windows = candidate_windows(image.width, image.height, &self.centers, &self.windows);
        let boxes: Vec<BBox> = windows.iter().map(|(b, _)| *b).collect();
        let mut out = Vec::new();
        for (chunk, window_chunk) in boxes.chunks(64).zip(windows.chunks(64)) {
            let feats = pooled_features(model, image, chunk)?;
            for (feat, (bbox, cluster)) in feats.iter().zip(window_chunk) {
                out.push(ScoredWindow {
                    bbox: *bbox,
                    cluster: *cluster,
                    score: self.svms[*cluster].decision(feat),
                    image: image_index,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub clusters: usize,
    pub windows: WindowConfig,
    pub svm: SvmConfig,
    /// IOU above which a window counts as a positive SVM example.
    pub positive_iou: f64,
    /// IOU below which a window counts as a negative SVM example.
    pub negative_iou: f64,
    /// Cap on negative SVM examples per cluster (earliest kept).
    pub max_negatives_per_cluster: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            clusters: 8,
            windows: WindowConfig::default(),
            svm: SvmConfig::default(),
            positive_iou: 0.5,
            negative_iou: 0.2,
            max_negatives_per_cluster: 400,
        }
    }
}

/// Train the proposal model on `train` and calibrate its thresholds on
/// `calib`, each a list of images with their annotated boxes. The shared
/// conv stack of `model` supplies the features and is not modified.
pub fn train_proposal_model(
    model: &Model,
    train: &[(&Image, Vec<GroundTruth>)],
    calib: &[(&Image, Vec<GroundTruth>)],
    config: &ProposalConfig,
) -> Result<AspectClusterModel> {
    let ratios: Vec<f64> = train
        .iter()
        .flat_map(|(_, gts)| gts.iter().map(|g| g.bbox.aspect_ratio()))
        .collect();
    if ratios.is_empty() {
        return Err(CoreError::invalid("train_proposal_model", "no annotated boxes"));
    }
    let centers = cluster_aspects(&ratios, config.clusters)?;

    // gather per-cluster SVM training sets from the window grid
    let mut features: Vec<Vec<Vec<f64>>> = vec![vec![]; config.clusters];
    let mut labels: Vec<Vec<bool>> = vec![vec![]; config.clusters];
    let mut neg_counts = vec![0usize; config.clusters];
    for (image, gts) in train {
        let windows = candidate_windows(image.width, image.height, &centers, &config.windows);
        let mut keep: Vec<(BBox, usize, bool)> = Vec::new();
        for (bbox, cluster) in windows {
            let best = gts
                .iter()
                .map(|g| iou(&bbox, &g.bbox))
                .fold(0.0f64, f64::max);
            if best >= config.positive_iou {
                keep.push((bbox, cluster, true));
            } else if best < config.negative_iou
                && neg_counts[cluster] < config.max_negatives_per_cluster
            {
                neg_counts[cluster] += 1;
                keep.push((bbox, cluster, false));
            }
        }
        // annotated boxes themselves are ideal positives
        for g in gts.iter() {
            keep.push((g.bbox, assign_cluster(&centers, g.bbox.aspect_ratio()), true));
        }
        let boxes: Vec<BBox> = keep.iter().map(|(b, ..)| *b).collect();
        for (chunk, keep_chunk) in boxes.chunks(64).zip(keep.chunks(64)) {
            let feats = pooled_features(model, image, chunk)?;
            for (feat, (_, cluster, positive)) in feats.into_iter().zip(keep_chunk) {
                features[*cluster].push(feat);
                labels[*cluster].push(*positive);
            }
        }
    }

    let mut svms = Vec::with_capacity(config.clusters);
    for c in 0..config.clusters {
        if features[c].is_empty()
            || labels[c].iter().all(|&l| l)
            || labels[c].iter().all(|&l| !l)
        {
            // clusters with no usable training pairs get an always-negative
            // scorer; calibration leaves their threshold at +inf
            let dim = features
                .iter()
                .find_map(|f| f.first().map(Vec::len))
                .unwrap_or(1);
            svms.push(LinearSvm {
                weights: vec![0.0; dim],
                bias: -1.0,
            });
            continue;
        }
        svms.push(train_svm(&features[c], &labels[c], &config.svm)?);
    }

    let mut proposal_model = AspectClusterModel {
        centers,
        svms,
        thresholds: vec![f64::INFINITY; config.clusters],
        windows: config.windows.clone(),
    };

    let mut scored = Vec::new();
    let mut gts = Vec::new();
    for (i, (image, image_gts)) in calib.iter().enumerate() {
        scored.extend(proposal_model.score_windows(model, image, i)?);
        gts.extend(image_gts.iter().map(|g| (i, g.bbox)));
    }
    proposal_model.thresholds =
        calibrate_thresholds(&scored, &gts, config.clusters, config.positive_iou)?;
    Ok(proposal_model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kmeans_recovers_separated_groups() {
        let ratios = [0.5, 0.52, 0.48, 1.0, 1.02, 0.98, 2.0, 2.04, 1.96];
        let centers = cluster_aspects(&ratios, 3).unwrap();
        assert_eq!(centers.len(), 3);
        // each group's members map to their own center
        assert_eq!(assign_cluster(&centers, 0.5), 0);
        assert_eq!(assign_cluster(&centers, 1.0), 1);
        assert_eq!(assign_cluster(&centers, 2.0), 2);
        assert_relative_eq!(centers[1], 1.0, epsilon = 0.05);
    }

    #[test]
    fn kmeans_matches_exhaustive_partition_oracle() {
        // with k=2 on a sorted 1-D set the optimal clustering is a split
        // point; compare against brute force over all splits
        let ratios = [0.4, 0.5, 0.6, 1.8, 2.0, 2.2, 2.4];
        let logs: Vec<f64> = ratios.iter().map(|r: &f64| r.ln()).collect();
        let mut best = (f64::INFINITY, 0);
        for split in 1..logs.len() {
            let (a, b) = logs.split_at(split);
            let cost = |xs: &[f64]| {
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                xs.iter().map(|x| (x - m).powi(2)).sum::<f64>()
            };
            let c = cost(a) + cost(b);
            if c < best.0 {
                best = (c, split);
            }
        }
        let centers = cluster_aspects(&ratios, 2).unwrap();
        let split = best.1;
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        assert_relative_eq!(centers[0].ln(), mean(&logs[..split]), epsilon = 1e-9);
        assert_relative_eq!(centers[1].ln(), mean(&logs[split..]), epsilon = 1e-9);
    }

    #[test]
    fn kmeans_rejects_too_few_distinct_ratios() {
        assert!(cluster_aspects(&[1.0, 1.0, 1.0], 2).is_err());
        assert!(cluster_aspects(&[1.0, -1.0], 1).is_err());
    }

    #[test]
    fn log_distance_is_reciprocal_symmetric() {
        let centers = [0.5, 1.0, 2.0];
        assert_eq!(assign_cluster(&centers, 0.7), 2 - assign_cluster(&centers, 1.0 / 0.7));
    }

    #[test]
    fn svm_separates_symmetric_data_with_symmetric_weights() {
        let features = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![2.0, 0.0], vec![-2.0, 0.0]];
        let labels = vec![true, false, true, false];
        let svm = train_svm(&features, &labels, &SvmConfig::default()).unwrap();
        assert!(svm.weights[0] > 0.0);
        assert_relative_eq!(svm.bias, 0.0, epsilon = 1e-9);
        assert!(svm.decision(&[1.5, 0.0]) > 0.0);
        assert!(svm.decision(&[-1.5, 0.0]) < 0.0);
    }

    #[test]
    fn svm_converges_towards_longer_training() {
        let features = vec![
            vec![1.0, 0.3],
            vec![0.8, -0.1],
            vec![-1.0, 0.2],
            vec![-0.7, -0.4],
        ];
        let labels = vec![true, true, false, false];
        let short = train_svm(&features, &labels, &SvmConfig { epochs: 200, ..SvmConfig::default() }).unwrap();
        let long = train_svm(&features, &labels, &SvmConfig { epochs: 2000, ..SvmConfig::default() }).unwrap();
        // both fit the data; the long run is the reference
        for (f, &l) in features.iter().zip(&labels) {
            assert_eq!(short.decision(f) > 0.0, l);
            assert_eq!(long.decision(f) > 0.0, l);
        }
    }

    #[test]
    fn svm_rejects_single_class() {
        let features = vec![vec![1.0], vec![2.0]];
        assert!(train_svm(&features, &[true, true], &SvmConfig::default()).is_err());
    }

    #[test]
    fn window_grid_matches_closed_form_count_for_one_scale() {
        // square ratio, single scale equal to min=max: positions per axis =
        // number of stride steps until the window touches the far edge, plus
        // the final clamped position
        let centers = [1.0];
        let config = WindowConfig {
            min_scale: 16.0,
            max_scale: 16.0,
        };
        let windows = candidate_windows(64, 64, &centers, &config);
        // stride 4, span 64-16=48: x = 0,4,...,48 -> 13 positions per axis
        assert_eq!(windows.len(), 13 * 13);
        for (b, c) in &windows {
            assert_eq!(*c, 0);
            assert!(b.x >= 0.0 && b.x + b.w <= 64.0 + 1e-9);
            assert!(b.y >= 0.0 && b.y + b.h <= 64.0 + 1e-9);
        }
    }

    #[test]
    fn window_grid_skips_scales_larger_than_image() {
        let centers = [1.0];
        let config = WindowConfig {
            min_scale: 16.0,
            max_scale: 64.0,
        };
        let windows = candidate_windows(20, 20, &centers, &config);
        assert!(windows.iter().all(|(b, _)| b.w <= 20.0 && b.h <= 20.0));
        assert!(!windows.is_empty());
    }

    #[test]
    fn calibration_single_candidate_sets_its_score() {
        let gt = BBox::new(10.0, 10.0, 20.0, 20.0);
        let cands = [ScoredWindow {
            bbox: gt,
            cluster: 0,
            score: 0.7,
            image: 0,
        }];
        let t = calibrate_thresholds(&cands, &[(0, gt)], 2, 0.5).unwrap();
        assert_eq!(t, vec![0.7, f64::INFINITY]);
    }

    #[test]
    fn calibration_takes_min_activated_score_per_cluster() {
        let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let g2 = BBox::new(50.0, 50.0, 10.0, 10.0);
        let cands = [
            ScoredWindow { bbox: g1, cluster: 0, score: 0.3, image: 0 },
            ScoredWindow { bbox: g2, cluster: 0, score: 0.9, image: 0 },
        ];
        let t = calibrate_thresholds(&cands, &[(0, g1), (0, g2)], 1, 0.5).unwrap();
        assert_eq!(t, vec![0.3]);
    }

    #[test]
    fn calibration_ignores_redundant_high_scores() {
        // a high-scoring second window on an already-covered object must not
        // raise the threshold, and a low-scoring irrelevant window must not
        // lower it
        let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let far = BBox::new(80.0, 80.0, 10.0, 10.0);
        let cands = [
            ScoredWindow { bbox: g1, cluster: 0, score: 0.9, image: 0 },
            ScoredWindow { bbox: g1, cluster: 0, score: 0.6, image: 0 },
            ScoredWindow { bbox: far, cluster: 0, score: 0.1, image: 0 },
        ];
        let t = calibrate_thresholds(&cands, &[(0, g1)], 1, 0.5).unwrap();
        assert_eq!(t, vec![0.9]);
    }

    #[test]
    fn calibration_matches_exhaustive_sweep_oracle() {
        // oracle: lowest per-cluster thresholds (over candidate scores +inf)
        // such that every gt keeps a qualifying window, found by brute force
        let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let g2 = BBox::new(40.0, 0.0, 10.0, 10.0);
        let cands = [
            ScoredWindow { bbox: BBox::new(1.0, 0.0, 10.0, 10.0), cluster: 0, score: 0.5, image: 0 },
            ScoredWindow { bbox: g1, cluster: 1, score: 0.2, image: 0 },
            ScoredWindow { bbox: g2, cluster: 1, score: 0.8, image: 0 },
            ScoredWindow { bbox: BBox::new(41.0, 0.0, 10.0, 10.0), cluster: 0, score: 0.4, image: 0 },
        ];
        let gts = [(0usize, g1), (0usize, g2)];
        let t = calibrate_thresholds(&cands, &gts, 2, 0.5).unwrap();

        // verify coverage under the returned thresholds
        for (img, gt) in &gts {
            assert!(cands.iter().any(|c| c.image == *img
                && c.score >= t[c.cluster]
                && iou(&c.bbox, gt) >= 0.5));
        }
        // greedy picks the 0.8 then the 0.5 window; cluster 1's 0.2 window
        // never fires
        assert_eq!(t, vec![0.5, 0.8]);
    }

    #[test]
    fn calibration_reports_uncoverable_objects() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let cands = [ScoredWindow {
            bbox: BBox::new(50.0, 50.0, 10.0, 10.0),
            cluster: 0,
            score: 0.9,
            image: 0,
        }];
        let err = calibrate_thresholds(&cands, &[(0, gt)], 1, 0.5).unwrap_err();
        assert!(err.to_string().contains("no candidate covers"));
    }

    #[test]
    fn cluster_model_json_round_trips_infinite_thresholds() {
        let model = AspectClusterModel {
            centers: vec![0.8, 1.25],
            svms: vec![
                LinearSvm { weights: vec![0.5], bias: -0.1 },
                LinearSvm { weights: vec![-0.5], bias: 0.2 },
            ],
            thresholds: vec![0.4, f64::INFINITY],
            windows: WindowConfig::default(),
        };
        let text = serde_json::to_string(&model).unwrap();
        let back: AspectClusterModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back.thresholds[0], 0.4);
        assert!(back.thresholds[1].is_infinite());
    }

    #[test]
    fn calibration_empty_validation_gives_infinite_thresholds() {
        let t = calibrate_thresholds(&[], &[], 3, 0.5).unwrap();
        assert_eq!(t, vec![f64::INFINITY; 3]);
    }
}
