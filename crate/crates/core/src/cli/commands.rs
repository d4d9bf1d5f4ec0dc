use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use super::{AvatarArgs, DriveArgs, EvalArgs, Preset, ProfileArgs, RunConfig, SynthArgs, TrainArgs};
use crate::data::{
    generate_synthetic_dataset, load_dataset, read_keypoints_jsonl, write_dataset, DatasetSchema, VideoSample,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, plot_from_csv, write_summary, EvalTools, SummaryRow};
use crate::infer::container::Storage;
use crate::infer::{
    count_macs, create_avatar, fingerprint, AvatarState, CreateOptions, DriveOutput, MacReport, SourceInfo,
    REFERENCE_MEDIUM_GMACS,
};
use crate::nets::ModelConfig;
use crate::tensor::tensor_to_rgb;
use crate::train::{run_training, Checkpoint, Stage, Trainer};

fn set<T: serde::Serialize>(m: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        m.insert(key.into(), json!(v));
    }
}

pub(super) fn synth_overrides(a: &SynthArgs) -> Value {
    let mut m = Map::new();
    set(&mut m, "identities", a.identities);
    set(&mut m, "frames", a.frames);
    set(&mut m, "image_size", a.size);
    set(&mut m, "first_identity", a.first_identity);
    set(&mut m, "fps", a.fps);
    if a.no_masks {
        m.insert("masks".into(), json!(false));
    }
    Value::Object(m)
}

pub(super) fn train_overrides(a: &TrainArgs) -> Value {
    let mut m = Map::new();
    set(&mut m, "iterations", a.iterations);
    set(&mut m, "updater_iterations", a.updater_iterations);
    set(&mut m, "batch_size", a.batch_size);
    set(&mut m, "updater_batch_size", a.updater_batch_size);
    set(&mut m, "lr", a.lr);
    set(&mut m, "checkpoint_every", a.checkpoint_every);
    set(&mut m, "standing_batches", a.standing_batches);
    Value::Object(m)
}

fn load_data(dir: &Path) -> Result<(DatasetSchema, Vec<VideoSample>)> {
    let schema = DatasetSchema::read(&dir.join("dataset.toml"))?;
    let videos = load_dataset(dir, &schema)?;
    if videos.is_empty() {
        return Err(Error::Config(format!("{} holds no videos", dir.display())));
    }
    Ok((schema, videos))
}

fn check_frames(cfg: &ModelConfig, schema: &DatasetSchema) -> Result<()> {
    let s = cfg.image_size as u32;
    if schema.height != s || schema.width != s || schema.n_points != cfg.n_points {
        return Err(Error::Config(format!(
            "dataset has {}x{} frames with {} points, the model expects {s}x{s} with {}",
            schema.width, schema.height, schema.n_points, cfg.n_points
        )));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(super) fn synth(run: &RunConfig) -> Result<()> {
    let cfg = &run.synth;
    let videos = generate_synthetic_dataset(cfg, &mut ChaCha8Rng::seed_from_u64(run.seed))?;
    let schema = DatasetSchema::new(cfg.n_points, cfg.image_size, cfg.image_size, cfg.fps)?;
    write_dataset(&run.out, &schema, &videos)?;
    run.write(&run.out)?;
    log::info!("wrote {} videos to {}", videos.len(), run.out.display());
    Ok(())
}

pub(super) fn train(run: &RunConfig, a: &TrainArgs) -> Result<()> {
    let (schema, videos) = load_data(&a.data)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Trainer::load_checkpoint(p)?;
            // only explicit flags change a resumed run's schedule
            if let Some(n) = a.iterations {
                t.cfg.iterations = n;
                if t.stage == Stage::Base && t.iteration < n {
                    t.standing_done = false;
                }
            }
            if let Some(n) = a.updater_iterations {
                t.cfg.updater_iterations = n;
            }
            if let Some(n) = a.checkpoint_every {
                t.cfg.checkpoint_every = n;
            }
            t.cfg.validate()?;
            t
        }
        None => Trainer::new(&run.model, &run.train)?,
    };
    check_frames(&trainer.model.cfg, &schema)?;
    trainer.provenance = run.to_json();
    run.write(&run.out)?;
    let summary = run_training(&mut trainer, &videos, a.stage.into(), &run.out)?;
    for p in &summary.checkpoints {
        log::info!("checkpoint {}", p.display());
    }
    Ok(())
}

fn find_video<'a>(videos: &'a [VideoSample], id: &str) -> Result<&'a VideoSample> {
    videos
        .iter()
        .find(|v| v.video_id() == id)
        .ok_or_else(|| Error::Config(format!("no video {id} in the dataset")))
}

pub(super) fn avatar(run: &RunConfig, a: &AvatarArgs) -> Result<()> {
    let (model, ck) = Checkpoint::load_model(&a.checkpoint)?;
    let (schema, videos) = load_data(&a.data)?;
    check_frames(&model.cfg, &schema)?;
    let v = find_video(&videos, &a.video)?;
    if a.frame >= v.len() {
        return Err(Error::Config(format!("video {} has {} frames", a.video, v.len())));
    }
    let default_steps = if ck.stage == Stage::Updater { ck.train.unroll_steps } else { 0 };
    let opts = CreateOptions {
        enhance_steps: a.enhance_steps.unwrap_or(default_steps),
        masked_output: ck.train.masks_enabled,
        source: SourceInfo {
            video_id: Some(a.video.clone()),
            frame: Some(a.frame),
        },
        run: run.to_json(),
    };
    let f = v.frame(a.frame);
    let avatar = create_avatar(&model, f.image, f.keypoints, &opts)?;
    create_dir(&run.out)?;
    let storage = if a.fp16 { Storage::F16 } else { Storage::F32 };
    avatar.save(&run.out.join(&a.name), storage)?;
    run.write(&run.out)
}

/// Frame, low-frequency layer, high-frequency layer, mask and warp field
/// side by side.
fn panel(out: &DriveOutput) -> Result<Tensor> {
    let l = out
        .layers
        .as_ref()
        .ok_or_else(|| Error::Config("layers were not requested".into()))?;
    let mask = ((out.mask.repeat((3, 1, 1))? * 2.0)? - 1.0)?;
    let (_, h, w) = l.warp.dims3()?;
    let blank = Tensor::full(-1f32, (1, h, w), l.warp.device())?.to_dtype(l.warp.dtype())?;
    let warp = Tensor::cat(&[&l.warp, &blank], 0)?;
    Ok(Tensor::cat(&[&out.frame, &l.low_frequency, &l.high_frequency, &mask, &warp], 2)?)
}

pub(super) fn drive(run: &RunConfig, a: &DriveArgs) -> Result<()> {
    let avatar = AvatarState::load(&a.avatar)?;
    let seq = read_keypoints_jsonl(&a.keypoints)?;
    if seq.is_empty() {
        return Err(Error::Config(format!("{} has no keypoint records", a.keypoints.display())));
    }
    create_dir(&run.out)?;
    let panels = run.out.join("panels");
    if a.layers {
        create_dir(&panels)?;
    }
    for (i, kps) in seq.iter().enumerate() {
        let out = avatar.drive(kps, a.layers)?;
        tensor_to_rgb(&out.frame)?.save(run.out.join(format!("{i:05}.png")))?;
        if a.layers {
            tensor_to_rgb(&panel(&out)?)?.save(panels.join(format!("{i:05}.png")))?;
        }
    }
    run.write(&run.out)?;
    log::info!("wrote {} frames to {}", seq.len(), run.out.display());
    Ok(())
}

pub(super) fn profile(run: &RunConfig, a: &ProfileArgs) -> Result<()> {
    let (source, cfg, report): (String, ModelConfig, MacReport) = if let Some(p) = &a.avatar {
        let avatar = AvatarState::load(p)?;
        (format!("avatar {}", p.display()), avatar.meta().model.clone(), avatar.count_macs()?)
    } else if let Some(p) = &a.checkpoint {
        let (model, _) = Checkpoint::load_model(p)?;
        let r = count_macs(&model.cfg);
        (format!("checkpoint {}", p.display()), model.cfg.clone(), r)
    } else {
        (format!("preset {}", json!(run.preset).as_str().unwrap_or("?")), run.model.clone(), count_macs(&run.model))
    };
    let reference = if cfg == Preset::Medium.model() {
        json!({
            "config": "medium",
            "gmacs": REFERENCE_MEDIUM_GMACS,
            "ratio": report.gmacs() / REFERENCE_MEDIUM_GMACS,
            "note": "informational comparison; block tables are reconstructed",
        })
    } else {
        Value::Null
    };
    let v = json!({
        "source": source,
        "fingerprint": fingerprint(&cfg),
        "model": cfg,
        "gmacs": report.gmacs(),
        "report": report,
        "reference": reference,
        "run": run.to_json(),
    });
    create_dir(&run.out)?;
    write_json(&run.out.join("profile.json"), &v)?;
    run.write(&run.out)
}

fn unique_label(stem: String, used: &mut BTreeSet<String>) -> String {
    let mut label = stem.clone();
    let mut k = 1;
    while !used.insert(label.clone()) {
        k += 1;
        label = format!("{stem}_{k}");
    }
    label
}

pub(super) fn eval(run: &RunConfig, a: &EvalArgs) -> Result<()> {
    let (schema, test) = load_data(&a.data)?;
    let (_, fit) = load_data(&a.fit_data)?;
    let tools = EvalTools::fit(&fit, schema.landmarks())?;
    create_dir(&run.out)?;
    let mut used = BTreeSet::new();
    let mut summary = Vec::new();
    for ck in &a.checkpoint {
        let (model, meta) = Checkpoint::load_model(ck)?;
        check_frames(&model.cfg, &schema)?;
        let stem = ck
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("checkpoint")
            .to_string();
        let mut variants = vec![(stem.clone(), 0)];
        if meta.stage == Stage::Updater {
            variants.push((format!("{stem}+updater"), meta.train.unroll_steps));
        }
        for (label, steps) in variants {
            let label = unique_label(label, &mut used);
            let opts = CreateOptions {
                enhance_steps: steps,
                masked_output: meta.train.masks_enabled,
                run: run.to_json(),
                ..CreateOptions::default()
            };
            let report = evaluate(&model, &opts, &test, &tools, run.eval.stride, &label)?;
            report.write_csv(&run.out.join(format!("{label}.csv")))?;
            report.write_json(&run.out.join(format!("{label}.json")))?;
            log::info!(
                "{label}: lpips {:.4} ssim {:.4} csim {:.4} nme {:.4}",
                report.median.lpips,
                report.median.ssim,
                report.median.csim,
                report.median.nme
            );
            summary.push(SummaryRow::from_report(&report));
        }
    }
    let summary_path: PathBuf = run.out.join("summary.csv");
    write_summary(&summary, &summary_path)?;
    plot_from_csv(&summary_path, &run.out.join("quality_vs_gmacs.svg"))?;
    run.write(&run.out)
}
