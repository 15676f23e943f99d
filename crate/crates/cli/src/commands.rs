use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use derotnet_core::boxes::{Detection, GroundTruth, Proposal};
use derotnet_core::checkpoint::{load_checkpoint, save_checkpoint};
use derotnet_core::eval::{mabo, nms, recall_at_iou, PRCurve};
use derotnet_core::gradcheck::standard_report;
use derotnet_core::netarch::{
    mine_hard_negatives, run_stage, Model, Stage, StagePlan, StageSpec, TrainingSample,
};
use derotnet_core::pipeline::{
    build_sample_pool, evaluate, propose_split, score_proposals, train_mode, TrainMode,
};
use derotnet_core::proposals::{train_proposal_model, AspectClusterModel};
use derotnet_core::synthdata::{generate_dataset, load_dataset, Dataset};
use derotnet_core::eval::iou;

use crate::config::RunConfig;
use crate::CliError;

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
    pub hash: String,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf, force: bool) -> Result<Context, CliError> {
        let hash = config.hash()?;
        Ok(Context {
            config,
            out,
            force,
            hash,
        })
    }

    fn dataset_dir(&self) -> PathBuf {
        self.out.join("dataset")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ensure_out(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::data(format!("creating {}: {e}", self.out.display())))?;
        let resolved = self.config.resolved_toml()?;
        fs::write(self.path("config.toml"), resolved)
            .map_err(|e| CliError::data(format!("writing resolved config: {e}")))?;
        Ok(())
    }

    fn load_dataset(&self) -> Result<Dataset, CliError> {
        load_dataset(&self.dataset_dir()).map_err(|e| {
            CliError::data(format!(
                "no dataset under {} (run `derotnet synth` first): {e}",
                self.dataset_dir().display()
            ))
        })
    }

    fn check_hash(&self, found: Option<&String>, what: &str) -> Result<(), CliError> {
        match found {
            Some(h) if *h == self.hash => Ok(()),
            _ if self.force => Ok(()),
            Some(h) => Err(CliError::data(format!(
                "{what} was produced by config {h}, current config is {} (use --force to ignore)",
                self.hash
            ))),
            None => Err(CliError::data(format!(
                "{what} carries no provenance hash (use --force to ignore)"
            ))),
        }
    }

    fn split_ids<'a>(&self, dataset: &'a Dataset, split: &str) -> Result<&'a [String], CliError> {
        match split {
            "train" => Ok(&dataset.splits.train),
            "val" => Ok(&dataset.splits.val),
            "test" => Ok(&dataset.splits.test),
            other => Err(CliError::usage(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

fn write_json<T: Serialize>(path: &PathBuf, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::data(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::data(format!("writing {}: {e}", path.display())))
}

fn save_model(
    path: &PathBuf,
    model: &Model,
    hash: &str,
    extra: &[(&str, String)],
) -> Result<(), CliError> {
    let mut metadata = BTreeMap::new();
    metadata.insert("config_hash".to_string(), hash.to_string());
    metadata.insert(
        "network".to_string(),
        serde_json::to_string(&model.config).map_err(|e| CliError::data(e.to_string()))?,
    );
    for (k, v) in extra {
        metadata.insert(k.to_string(), v.clone());
    }
    save_checkpoint(path, &model.params, &metadata)?;
    Ok(())
}

fn load_model(ctx: &Context, path: &PathBuf, what: &str) -> Result<Model, CliError> {
    let (params, metadata) = load_checkpoint(path).map_err(|e| {
        CliError::data(format!("loading {what} from {}: {e}", path.display()))
    })?;
    ctx.check_hash(metadata.get("config_hash"), what)?;
    let config = match metadata.get("network") {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| CliError::data(format!("bad network metadata in {what}: {e}")))?,
        None => ctx.config.network.clone(),
    };
    Ok(Model { config, params })
}

pub fn synth(ctx: &Context) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let dataset = generate_dataset(&ctx.config.scene, ctx.config.images, &ctx.dataset_dir())?;
    write_json(
        &ctx.dataset_dir().join("provenance.json"),
        &json!({ "config_hash": ctx.hash, "images": ctx.config.images }),
    )?;
    println!(
        "dataset: {} images ({} train / {} val / {} test) under {}",
        dataset.entries.len(),
        dataset.splits.train.len(),
        dataset.splits.val.len(),
        dataset.splits.test.len(),
        ctx.dataset_dir().display()
    );
    Ok(())
}

/// The frozen feature network used for proposal scoring: the model after
/// rotation-only training on annotated crops. Created on first use and
/// cached as a checkpoint.
fn feature_model(ctx: &Context, dataset: &Dataset) -> Result<Model, CliError> {
    let path = ctx.path("rotation.ckpt");
    if path.exists() {
        return load_model(ctx, &path, "rotation checkpoint");
    }
    let pool = build_sample_pool(
        dataset,
        &dataset.splits.train,
        &ctx.config.network,
        &ctx.config.training,
        &ctx.config.proposals,
        ctx.config.seed,
    )?;
    let mut model = Model::new(ctx.config.network.clone(), ctx.config.seed)?;
    let mut logs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.seed ^ 0x726f74);
    let t = &ctx.config.training;
    let plan = StagePlan {
        stages: vec![],
        batch_size: t.batch_size,
        max_batches_per_epoch: t.max_batches_per_epoch,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
        use_gt_pose: false,
    };
    for stage in derotnet_core::pipeline::rotation_stages(t) {
        run_stage(&mut model, &plan, &stage, &pool, &mut rng, &mut logs)?;
    }
    save_model(&path, &model, &ctx.hash, &[("stage", "rotation_only".into())])?;
    Ok(model)
}

fn with_gts<'a>(
    dataset: &'a Dataset,
    ids: &[String],
) -> Result<Vec<(derotnet_core::synthdata::Image, Vec<GroundTruth>)>, CliError> {
    let mut out = Vec::new();
    for id in ids {
        let entry = dataset
            .entry(id)
            .ok_or_else(|| CliError::data(format!("unknown image {id}")))?;
        out.push((
            dataset.load_image(entry)?,
            dataset.ground_truths(std::slice::from_ref(id)),
        ));
    }
    Ok(out)
}

pub fn calibrate(ctx: &Context) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let dataset = ctx.load_dataset()?;
    let model = feature_model(ctx, &dataset)?;

    let train = with_gts(&dataset, &dataset.splits.train)?;
    let calib = with_gts(&dataset, &dataset.splits.val)?;
    let train_refs: Vec<_> = train.iter().map(|(i, g)| (i, g.clone())).collect();
    let calib_refs: Vec<_> = calib.iter().map(|(i, g)| (i, g.clone())).collect();
    let proposal_model =
        train_proposal_model(&model, &train_refs, &calib_refs, &ctx.config.proposals)?;

    write_json(
        &ctx.path("proposal_model.json"),
        &json!({ "config_hash": ctx.hash, "model": proposal_model }),
    )?;

    // the calibration contract: every validation object keeps a proposal
    let proposals = propose_split(&model, &dataset, &dataset.splits.val, &proposal_model)?;
    let gts = dataset.ground_truths(&dataset.splits.val);
    let recall = recall_at_iou(&proposals, &gts, 0.5)?;
    println!(
        "calibrated {} clusters; thresholds {:?}",
        proposal_model.centers.len(),
        proposal_model.thresholds
    );
    println!("calibration-split recall@0.5 = {:.1}%", recall * 100.0);
    Ok(())
}

fn load_proposal_model(ctx: &Context) -> Result<AspectClusterModel, CliError> {
    let path = ctx.path("proposal_model.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        CliError::data(format!(
            "no proposal model at {} (run `derotnet calibrate` first): {e}",
            path.display()
        ))
    })?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::data(e.to_string()))?;
    let found = doc
        .get("config_hash")
        .and_then(|v| v.as_str())
        .map(str::to_string);
    ctx.check_hash(found.as_ref(), "proposal model")?;
    serde_json::from_value(
        doc.get("model")
            .cloned()
            .ok_or_else(|| CliError::data("proposal model file missing `model` field"))?,
    )
    .map_err(|e| CliError::data(e.to_string()))
}

pub fn propose(ctx: &Context, split: &str) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let dataset = ctx.load_dataset()?;
    let model = feature_model(ctx, &dataset)?;
    let proposal_model = load_proposal_model(ctx)?;
    let ids = ctx.split_ids(&dataset, split)?;
    let proposals = propose_split(&model, &dataset, ids, &proposal_model)?;

    let path = ctx.path(&format!("proposals-{split}.jsonl"));
    let mut file = fs::File::create(&path)
        .map_err(|e| CliError::data(format!("writing {}: {e}", path.display())))?;
    for p in &proposals {
        let line = serde_json::to_string(p).map_err(|e| CliError::data(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| CliError::data(e.to_string()))?;
    }

    let gts = dataset.ground_truths(ids);
    println!(
        "{split}: {} proposals over {} images; recall@0.5 = {:.1}%, MABO = {:.3}",
        proposals.len(),
        ids.len(),
        recall_at_iou(&proposals, &gts, 0.5)? * 100.0,
        mabo(&proposals, &gts)?
    );
    Ok(())
}

fn parse_mode(mode: &str) -> Result<TrainMode, CliError> {
    TrainMode::from_str(mode).map_err(CliError::usage)
}

pub fn train(ctx: &Context, mode: &str) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let mode = parse_mode(mode)?;
    let dataset = ctx.load_dataset()?;
    let pool = build_sample_pool(
        &dataset,
        &dataset.splits.train,
        &ctx.config.network,
        &ctx.config.training,
        &ctx.config.proposals,
        ctx.config.seed,
    )?;
    let outcome = train_mode(
        &pool,
        &ctx.config.network,
        &ctx.config.training,
        mode,
        ctx.config.seed,
    )?;

    let log_path = ctx.path(&format!("train_log-{}.jsonl", mode.name()));
    let mut file = fs::File::create(&log_path)
        .map_err(|e| CliError::data(format!("writing {}: {e}", log_path.display())))?;
    for entry in &outcome.logs {
        let line = serde_json::to_string(entry).map_err(|e| CliError::data(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| CliError::data(e.to_string()))?;
    }

    save_model(
        &ctx.path(&format!("model-{}.ckpt", mode.name())),
        &outcome.model,
        &ctx.hash,
        &[
            ("mode", mode.name().to_string()),
            ("seed", ctx.config.seed.to_string()),
        ],
    )?;
    for entry in &outcome.logs {
        println!(
            "{:>16} epoch {:>2}: rotation {:.4}, detection {:.4} ({} ms)",
            entry.stage, entry.epoch, entry.rotation_loss, entry.detection_loss, entry.wall_ms
        );
    }
    Ok(())
}

pub fn mine(ctx: &Context, mode: &str) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let mode = parse_mode(mode)?;
    let dataset = ctx.load_dataset()?;
    let features = feature_model(ctx, &dataset)?;
    let proposal_model = load_proposal_model(ctx)?;
    let mut model = load_model(
        ctx,
        &ctx.path(&format!("model-{}.ckpt", mode.name())),
        "detector checkpoint",
    )?;

    // candidate hard negatives: surviving proposal windows that miss every
    // annotation
    let mut candidates: Vec<TrainingSample> = Vec::new();
    for id in &dataset.splits.train {
        let entry = dataset.entry(id).expect("split id in manifest");
        let image = dataset.load_image(entry)?;
        for p in proposal_model.propose(&features, &image, id)? {
            let hit = entry
                .annotations
                .iter()
                .any(|a| iou(&p.bbox, &a.bbox()) >= 0.5);
            if !hit {
                candidates.push(TrainingSample {
                    patch: image.crop_resize_square(&p.bbox, ctx.config.network.input_size),
                    positive: false,
                    pose: None,
                    image_id: id.clone(),
                    bbox: p.bbox,
                    synthetic: false,
                });
            }
        }
    }

    let mut pool = build_sample_pool(
        &dataset,
        &dataset.splits.train,
        &ctx.config.network,
        &ctx.config.training,
        &ctx.config.proposals,
        ctx.config.seed,
    )?;
    let t = &ctx.config.training;
    let plan = StagePlan {
        stages: vec![],
        batch_size: t.batch_size,
        max_batches_per_epoch: t.max_batches_per_epoch,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
        use_gt_pose: mode == TrainMode::GtRotation,
    };
    let retrain_spec = StageSpec {
        stage: Stage::DetectionFrozen,
        epochs: ctx.config.mining.retrain_epochs,
        learning_rate: ctx.config.mining.retrain_lr,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.seed ^ 0x6d696e65);
    let mut logs = Vec::new();
    let added = mine_hard_negatives(
        &mut model,
        &mut pool,
        &candidates,
        ctx.config.mining.threshold,
        ctx.config.mining.rounds,
        |m, p| run_stage(m, &plan, &retrain_spec, p, &mut rng, &mut logs),
    )?;

    save_model(
        &ctx.path(&format!("model-{}-mined.ckpt", mode.name())),
        &model,
        &ctx.hash,
        &[
            ("mode", mode.name().to_string()),
            ("mined", "true".to_string()),
        ],
    )?;
    write_json(
        &ctx.path(&format!("mining-{}.json", mode.name())),
        &json!({
            "config_hash": ctx.hash,
            "candidates": candidates.len(),
            "added": added,
            "rounds": ctx.config.mining.rounds,
        }),
    )?;
    println!(
        "mining: {} candidates, {} hard negatives added over {} round(s)",
        candidates.len(),
        added,
        ctx.config.mining.rounds
    );
    Ok(())
}

fn write_pr_csv(path: &PathBuf, curve: &PRCurve) -> Result<(), CliError> {
    let mut text = String::from("score_threshold,precision,recall\n");
    for p in &curve.points {
        text.push_str(&format!("{},{},{}\n", p.score, p.precision, p.recall));
    }
    fs::write(path, text).map_err(|e| CliError::data(format!("writing {}: {e}", path.display())))
}

fn write_pr_svg(path: &PathBuf, curve: &PRCurve) -> Result<(), CliError> {
    let (w, h, m) = (420.0, 320.0, 40.0);
    let x = |recall: f64| m + recall * (w - 2.0 * m);
    let y = |precision: f64| h - m - precision * (h - 2.0 * m);
    let mut points = String::new();
    for p in &curve.points {
        points.push_str(&format!("{:.2},{:.2} ", x(p.recall), y(p.precision)));
    }
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{m}\" y1=\"{ybase}\" x2=\"{xmax}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<text x=\"{xmid}\" y=\"{h2}\" text-anchor=\"middle\" font-size=\"12\">recall</text>\n",
            "<text x=\"12\" y=\"{ymid}\" font-size=\"12\" ",
            "transform=\"rotate(-90 12 {ymid})\" text-anchor=\"middle\">precision</text>\n",
            "<text x=\"{xmax}\" y=\"16\" text-anchor=\"end\" font-size=\"12\">AP = {ap:.3}</text>\n",
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{points}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        m = m,
        ybase = h - m,
        xmax = w - m,
        xmid = w / 2.0,
        h2 = h - 12.0,
        ymid = h / 2.0,
        ap = curve.ap,
        points = points.trim_end(),
    );
    fs::write(path, svg).map_err(|e| CliError::data(format!("writing {}: {e}", path.display())))
}

pub fn eval(ctx: &Context, mode: &str, mined: bool) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let mode = parse_mode(mode)?;
    let dataset = ctx.load_dataset()?;
    let features = feature_model(ctx, &dataset)?;
    let proposal_model = load_proposal_model(ctx)?;
    let suffix = if mined { "-mined" } else { "" };
    let model = load_model(
        ctx,
        &ctx.path(&format!("model-{}{suffix}.ckpt", mode.name())),
        "detector checkpoint",
    )?;

    let ids = dataset.splits.test.clone();
    let proposals: Vec<Proposal> = propose_split(&features, &dataset, &ids, &proposal_model)?;
    let raw = score_proposals(
        &model,
        &dataset,
        &ids,
        &proposals,
        mode == TrainMode::GtRotation,
    )?;
    let detections: Vec<Detection> = match ctx.config.eval.nms {
        Some(overlap) => ids
            .iter()
            .flat_map(|id| {
                let per_image: Vec<Detection> = raw
                    .iter()
                    .filter(|d| &d.image_id == id)
                    .cloned()
                    .collect();
                nms(&per_image, overlap)
            })
            .collect(),
        None => raw,
    };
    let gts = dataset.ground_truths(&ids);
    let (metrics, curve) = evaluate(&detections, &proposals, &gts, ctx.config.eval.iou)?;

    let dir = ctx.path(&format!("eval-{}{suffix}", mode.name()));
    fs::create_dir_all(&dir).map_err(|e| CliError::data(format!("creating {}: {e}", dir.display())))?;
    write_json(
        &dir.join("metrics.json"),
        &json!({ "config_hash": ctx.hash, "mode": mode.name(), "mined": mined, "metrics": metrics }),
    )?;
    write_pr_csv(&dir.join("pr_curve.csv"), &curve)?;
    write_pr_svg(&dir.join("pr_curve.svg"), &curve)?;
    {
        let path = dir.join("detections.jsonl");
        let mut file = fs::File::create(&path)
            .map_err(|e| CliError::data(format!("writing {}: {e}", path.display())))?;
        for d in &detections {
            let line = serde_json::to_string(d).map_err(|e| CliError::data(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| CliError::data(e.to_string()))?;
        }
    }

    println!(
        "{} ({}): AP = {:.3}, proposal recall@0.5 = {:.1}%, MABO = {:.3}",
        mode.name(),
        if mined { "mined" } else { "base" },
        metrics.ap,
        metrics.proposal_recall_at_05 * 100.0,
        metrics.mabo
    );
    if let Some(rot) = &metrics.rotation {
        println!(
            "rotation accuracy on {} matches: <=10deg {:.1}%, <=20deg {:.1}%, <=30deg {:.1}%",
            rot.pairs,
            rot.within_10 * 100.0,
            rot.within_20 * 100.0,
            rot.within_30 * 100.0
        );
    }
    Ok(())
}

pub fn gradcheck(ctx: &Context) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let checks = standard_report(ctx.config.seed, 1e-5)?;
    let mut worst: Option<&str> = None;
    for check in &checks {
        println!("{:<28} max relative error {:.3e}", check.name, check.max_relative_error);
        if check.max_relative_error >= 1e-5 {
            worst = Some(check.name);
        }
    }
    write_json(
        &ctx.path("gradcheck.json"),
        &json!({
            "config_hash": ctx.hash,
            "tolerance": 1e-5,
            "checks": checks
                .iter()
                .map(|c| json!({ "op": c.name, "max_relative_error": c.max_relative_error }))
                .collect::<Vec<_>>(),
        }),
    )?;
    match worst {
        Some(name) => Err(CliError::numerical(format!(
            "gradient check failed for {name} (>= 1e-5 relative error)"
        ))),
        None => Ok(()),
    }
}
