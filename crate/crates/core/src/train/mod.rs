//! Two-stage training: the base networks with the discriminator first, then
//! the texture updater on top of the frozen base.

mod adam;
mod batch;
mod metrics;

pub use adam::Adam;
pub use batch::{Batch, Encoder};
pub use metrics::{read_metrics, term_series, MetricRow, MetricsLog};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::geometry::warp;
use crate::infer::container::{self, Storage, CHECKPOINT_MAGIC};
use crate::lgd::{enhance_texture, EnhancementTrace, GuideContext, DEFAULT_UNROLL};
use crate::losses::{
    feature_matching, first_non_finite, hinge_d, hinge_g, nonsaturating_g, perceptual_loss, pixelwise_l1,
    relativistic_scores, seg_bce, stopgrad_composite, total_generator_loss, warp_regularizer, LossReport,
    LossWeights, RandomConvExtractor,
};
use crate::nets::{compute_standing_stats, BiLayerOutput, Mode, Model, ModelConfig, ParamStore};
use crate::tensor::{scalar, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub batch_size: usize,
    pub updater_batch_size: usize,
    /// Iterations of the base stage.
    pub iterations: u64,
    /// Iterations of the updater stage.
    pub updater_iterations: u64,
    pub seed: u64,
    pub standing_batches: usize,
    /// Unrolled updater steps.
    pub unroll_steps: usize,
    pub weights: LossWeights,
    pub masks_enabled: bool,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            betas: (0.5, 0.999),
            batch_size: 8,
            updater_batch_size: 8,
            iterations: 1000,
            updater_iterations: 200,
            seed: 0,
            standing_batches: 50,
            unroll_steps: DEFAULT_UNROLL,
            weights: LossWeights::default(),
            masks_enabled: true,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Batch sizes of the full-scale setup.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 48,
            updater_batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.updater_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.standing_batches == 0 {
            return bad("standing statistics need at least one batch");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint interval must be at least 1");
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Updater,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Updater => "updater",
        }
    }
}

/// Detached mask factor applied to both discriminator inputs: the real frame
/// and the generated frame are multiplied by `SG(sigmoid(logits))`, so the
/// mask head only learns from its own segmentation loss.
pub fn apply_mask_protocol(real: &Tensor, generated: &Tensor, mask_logits: &Tensor) -> Result<(Tensor, Tensor)> {
    let m = sigmoid(&mask_logits.detach())?;
    Ok((real.broadcast_mul(&m)?, generated.broadcast_mul(&m)?))
}

/// Unweighted generator loss terms and the discriminator inputs they used.
pub struct LossTerms {
    pub parts: BTreeMap<&'static str, Tensor>,
    /// Real frames as shown to the discriminator.
    pub real: Tensor,
    /// Generated frames as shown to the discriminator.
    pub fake: Tensor,
}

/// Networks, optimizers and the position in the schedule.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub encoder: Encoder,
    general: RandomConvExtractor,
    face: RandomConvExtractor,
    opt_g: Adam,
    opt_d: Adam,
    opt_u: Adam,
    pub stage: Stage,
    /// Completed iterations of the current stage.
    pub iteration: u64,
    pub standing_done: bool,
    /// Resolved run configuration stored in every checkpoint.
    pub provenance: serde_json::Value,
}

fn trainable(stores: &[(&str, &ParamStore)]) -> Vec<(String, candle_core::Var)> {
    stores
        .iter()
        .flat_map(|(net, s)| s.params().into_iter().map(move |(k, v)| (format!("{net}/{k}"), v)))
        .collect()
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, cfg.seed, DType::F32)?;
        Self::with_model(model, cfg)
    }

    pub fn with_model(model: Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let s = &model.stores;
        let opt = |stores: &[(&str, &ParamStore)]| Adam::new(trainable(stores), cfg.lr, cfg.betas);
        let opt_g = opt(&[("embedder", &s.embedder), ("texture", &s.texture), ("inference", &s.inference)])?;
        let opt_d = opt(&[("discriminator", &s.discriminator)])?;
        let opt_u = opt(&[("updater", &s.updater)])?;
        let dtype = model.dtype();
        Ok(Trainer {
            encoder: Encoder::new(model.cfg.n_points, model.cfg.image_size, dtype),
            general: RandomConvExtractor::general(dtype)?,
            face: RandomConvExtractor::face(dtype)?,
            model,
            cfg: cfg.clone(),
            opt_g,
            opt_d,
            opt_u,
            stage: Stage::Base,
            iteration: 0,
            standing_done: false,
            provenance: serde_json::Value::Null,
        })
    }

    /// Deterministic generator for one iteration of one stage.
    pub fn rng(&self, stage_tag: u64, iteration: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream((stage_tag << 48) | iteration);
        rng
    }

    /// Batch of the current iteration.
    pub fn batch(&self, videos: &[VideoSample]) -> Result<Batch> {
        let (tag, size) = match self.stage {
            Stage::Base => (0, self.cfg.batch_size),
            Stage::Updater => (1, self.cfg.updater_batch_size),
        };
        self.encoder
            .sample(videos, size, self.cfg.masks_enabled, &mut self.rng(tag, self.iteration))
    }

    /// Every generator loss term of an output for the batch targets.
    pub fn loss_terms(&self, batch: &Batch, out: &BiLayerOutput) -> Result<LossTerms> {
        let w = &self.cfg.weights;
        let x_tilde = stopgrad_composite(&out.x_lf, &out.x_hf)?;
        let (real, fake, lf) = if self.cfg.masks_enabled {
            let (real, fake) = apply_mask_protocol(&batch.target, &x_tilde, &out.mask_logits)?;
            let (_, lf) = apply_mask_protocol(&batch.target, &out.x_lf, &out.mask_logits)?;
            (real, fake, lf)
        } else {
            (batch.target.clone(), x_tilde, out.x_lf.clone())
        };
        let n = batch.size();
        let lm = Tensor::cat(&[&batch.target_landmarks, &batch.target_landmarks], 0)?;
        let d = self
            .model
            .discriminator
            .forward(&Tensor::cat(&[&real, &fake], 0)?, &lm, Mode::Train)?;
        let (d_real, d_fake) = d.split(n)?;
        let (s_real, s_fake) = relativistic_scores(&d_real.scores, &d_fake.scores)?;
        let adv = if w.nonsaturating_g {
            nonsaturating_g(&s_fake)?
        } else {
            hinge_g(&s_real, &s_fake)?
        };
        let mut parts: BTreeMap<&'static str, Tensor> = BTreeMap::new();
        parts.insert("adv", adv);
        parts.insert("fm", feature_matching(&d_real.features, &d_fake.features)?);
        parts.insert("pix", pixelwise_l1(&lf, &real)?);
        parts.insert("perc_in", perceptual_loss(&self.general, &fake, &real)?);
        parts.insert("perc_face", perceptual_loss(&self.face, &fake, &real)?);
        parts.insert("reg", warp_regularizer(out.warp.delta())?);
        if self.cfg.masks_enabled {
            let gt = batch
                .target_mask
                .as_ref()
                .ok_or_else(|| Error::Config("masking is enabled but the batch has no masks".into()))?;
            parts.insert("seg", seg_bce(&out.mask_logits, gt)?);
        }
        Ok(LossTerms { parts, real, fake })
    }

    /// Discriminator update on detached inputs; returns its loss.
    fn discriminator_step(&mut self, batch: &Batch, real: &Tensor, fake: &Tensor) -> Result<f64> {
        let lm = Tensor::cat(&[&batch.target_landmarks, &batch.target_landmarks], 0)?;
        let input = Tensor::cat(&[&real.detach(), &fake.detach()], 0)?;
        let d = self.model.discriminator.forward(&input, &lm, Mode::Train)?;
        let (d_real, d_fake) = d.split(batch.size())?;
        let (s_real, s_fake) = relativistic_scores(&d_real.scores, &d_fake.scores)?;
        let loss = hinge_d(&s_real, &s_fake)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(numerical("disc", self.iteration));
        }
        self.opt_d.step(&loss.backward()?)?;
        Ok(value)
    }

    /// One generator and one discriminator update of the base stage.
    pub fn stage1_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let out = self.stage1_forward(batch)?;
        let terms = self.loss_terms(batch, &out)?;
        let (total, mut report) = total_generator_loss(&terms.parts, &self.cfg.weights, self.iteration)?;
        check_finite(&report, self.iteration)?;
        self.opt_g.step(&total.backward()?)?;
        report.insert("disc".into(), self.discriminator_step(batch, &terms.real, &terms.fake)?);
        Ok(report)
    }

    /// Base-stage generator output for the batch targets.
    pub fn stage1_forward(&self, batch: &Batch) -> Result<BiLayerOutput> {
        let init = self
            .model
            .init_avatar(&batch.source, &batch.source_landmarks, Mode::Train)?;
        self.model
            .inference
            .forward(&batch.target_pose, &init.bundle, &init.texture, Mode::Train)
    }

    /// Frozen base outputs for the updater stage: the target-pose output with
    /// every tensor detached, the guide context and the generated texture.
    pub fn frozen_base(&self, batch: &Batch) -> Result<(BiLayerOutput, GuideContext, Tensor)> {
        let init = self.model.init_avatar(&batch.source, &batch.source_landmarks, Mode::Eval)?;
        let texture = init.texture.detach();
        let bundle = init.bundle.detach();
        let inf = &self.model.inference;
        let src = inf.forward(&batch.source_pose, &bundle, &texture, Mode::Eval)?;
        let ctx = GuideContext::new(&src, &batch.source)?;
        let out = inf.forward(&batch.target_pose, &bundle, &texture, Mode::Eval)?;
        let out = BiLayerOutput {
            x_lf: out.x_lf.detach(),
            x_hf: out.x_hf.detach(),
            warp: out.warp.detach(),
            mask_logits: out.mask_logits.detach(),
        };
        Ok((out, ctx, texture))
    }

    /// One updater and one discriminator update of the second stage.
    pub fn stage2_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let (out, trace) = self.stage2_forward(batch)?;
        let terms = self.loss_terms(batch, &out)?;
        // the warp regularizer is a constant here; its schedule continues
        // from the end of the base stage
        let it = self.cfg.iterations + self.iteration;
        let (total, mut report) = total_generator_loss(&terms.parts, &self.cfg.weights, it)?;
        check_finite(&report, self.iteration)?;
        self.opt_u.step(&total.backward()?)?;
        report.insert("guide_first".into(), trace.guide_losses[0]);
        report.insert("guide_last".into(), *trace.guide_losses.last().expect("nonempty"));
        report.insert("disc".into(), self.discriminator_step(batch, &terms.real, &terms.fake)?);
        Ok(report)
    }

    /// Output with the enhanced texture; only the updater is differentiable.
    pub fn stage2_forward(&self, batch: &Batch) -> Result<(BiLayerOutput, EnhancementTrace)> {
        let (base, ctx, texture) = self.frozen_base(batch)?;
        let trace = enhance_texture(&self.model.updater, &ctx, &texture, self.cfg.unroll_steps, Mode::Train)?;
        let out = BiLayerOutput {
            x_hf: warp(trace.last(), &base.warp)?,
            ..base
        };
        Ok((out, trace))
    }

    /// Sample the batch of the current iteration, update, advance.
    pub fn step(&mut self, videos: &[VideoSample]) -> Result<LossReport> {
        let batch = self.batch(videos)?;
        let report = match self.stage {
            Stage::Base => self.stage1_step(&batch)?,
            Stage::Updater => self.stage2_step(&batch)?,
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Freeze batch statistics of the generators over fresh batches.
    pub fn compute_standing_stats(&mut self, videos: &[VideoSample]) -> Result<()> {
        let s = &self.model.stores;
        let stores = [&s.embedder, &s.texture, &s.inference];
        let model = &self.model;
        let enc = &self.encoder;
        let size = self.cfg.batch_size;
        compute_standing_stats(&stores, self.cfg.standing_batches, |i| {
            let batch = enc.sample(videos, size, false, &mut self.rng(2, i as u64))?;
            let init = model.init_avatar(&batch.source, &batch.source_landmarks, Mode::Standing)?;
            model
                .inference
                .forward(&batch.target_pose, &init.bundle, &init.texture, Mode::Standing)?;
            Ok(())
        })?;
        self.standing_done = true;
        Ok(())
    }

    pub fn checkpoint_meta(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "kind": "checkpoint",
            "stage": self.stage,
            "iteration": self.iteration,
            "standing_done": self.standing_done,
            "model": self.model.cfg,
            "train": self.cfg,
            "run": self.provenance,
        }))
    }

    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (net, store) in self.model.stores.named() {
            out.extend(store.named_tensors().into_iter().map(|(k, t)| (format!("{net}/{k}"), t)));
        }
        out.extend(self.opt_g.state("opt_g"));
        out.extend(self.opt_d.state("opt_d"));
        out.extend(self.opt_u.state("opt_u"));
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        container::write_file(
            path,
            CHECKPOINT_MAGIC,
            &self.checkpoint_meta()?,
            &self.checkpoint_tensors(),
            Storage::F32,
        )
    }

    /// Restore a trainer exactly as it was when the checkpoint was written.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let d = container::read_file(path, CHECKPOINT_MAGIC)?;
        let meta = Checkpoint::parse_meta(&d.meta)?;
        let model = Model::new(&meta.model, meta.train.seed, DType::F32)?;
        load_stores(&model, &d.tensors)?;
        let mut t = Trainer::with_model(model, &meta.train)?;
        t.opt_g.load_state("opt_g", &d.tensors)?;
        t.opt_d.load_state("opt_d", &d.tensors)?;
        t.opt_u.load_state("opt_u", &d.tensors)?;
        t.stage = meta.stage;
        t.iteration = meta.iteration;
        t.standing_done = meta.standing_done;
        t.provenance = meta.run;
        Ok(t)
    }
}

/// Fields of a checkpoint's metadata block.
#[derive(Debug, Clone, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    pub iteration: u64,
    pub standing_done: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub run: serde_json::Value,
}

impl Checkpoint {
    fn parse_meta(meta: &serde_json::Value) -> Result<Self> {
        if meta.get("kind").and_then(|k| k.as_str()) != Some("checkpoint") {
            return Err(Error::Format("metadata does not describe a checkpoint".into()));
        }
        serde_json::from_value(meta.clone()).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))
    }

    /// Model with the weights of a checkpoint, without optimizer state.
    pub fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
        let d = container::read_file(path, CHECKPOINT_MAGIC)?;
        let meta = Self::parse_meta(&d.meta)?;
        let model = Model::new(&meta.model, meta.train.seed, DType::F32)?;
        load_stores(&model, &d.tensors)?;
        Ok((model, meta))
    }
}

fn load_stores(model: &Model, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    for (net, store) in model.stores.named() {
        let prefix = format!("{net}/");
        let own: BTreeMap<String, Tensor> = tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&prefix).map(|k| (k.to_string(), t.clone())))
            .collect();
        store.load_named(&own)?;
    }
    Ok(())
}

fn numerical(term: &str, iteration: u64) -> Error {
    Error::Numerical(format!("loss term {term} is not finite at iteration {iteration}"))
}

fn check_finite(report: &LossReport, iteration: u64) -> Result<()> {
    match first_non_finite(report) {
        Some(term) => Err(numerical(term, iteration)),
        None => Ok(()),
    }
}

/// Which stages a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageSelect {
    Base,
    Updater,
    Both,
}

impl StageSelect {
    fn includes(self, s: Stage) -> bool {
        matches!((self, s), (StageSelect::Both, _) | (StageSelect::Base, Stage::Base) | (StageSelect::Updater, Stage::Updater))
    }
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub last_reports: BTreeMap<&'static str, LossReport>,
}

pub fn checkpoint_path(dir: &Path, stage: Stage, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint_{}_{iteration:06}.blck", stage.name()))
}

pub fn metrics_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("metrics_{}.csv", stage.name()))
}

/// Run the selected stages from the trainer's current position, writing
/// periodic checkpoints and per-iteration metrics to `out_dir`.
pub fn run_training(
    trainer: &mut Trainer,
    videos: &[VideoSample],
    stages: StageSelect,
    out_dir: &Path,
) -> Result<TrainSummary> {
    if videos.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut summary = TrainSummary {
        checkpoints: Vec::new(),
        last_reports: BTreeMap::new(),
    };
    if trainer.stage == Stage::Base && stages.includes(Stage::Base) {
        run_stage(trainer, videos, out_dir, &mut summary)?;
    }
    if stages.includes(Stage::Updater) {
        if trainer.stage == Stage::Base {
            if !(trainer.iteration >= trainer.cfg.iterations && trainer.standing_done) {
                return Err(Error::Config(
                    "the updater stage starts from a completed base-stage checkpoint".into(),
                ));
            }
            trainer.stage = Stage::Updater;
            trainer.iteration = 0;
        }
        run_stage(trainer, videos, out_dir, &mut summary)?;
    }
    Ok(summary)
}

fn run_stage(trainer: &mut Trainer, videos: &[VideoSample], out_dir: &Path, summary: &mut TrainSummary) -> Result<()> {
    let stage = trainer.stage;
    let total = match stage {
        Stage::Base => trainer.cfg.iterations,
        Stage::Updater => trainer.cfg.updater_iterations,
    };
    let mut log = MetricsLog::open(&metrics_path(out_dir, stage), trainer.iteration)?;
    while trainer.iteration < total {
        let it = trainer.iteration;
        let report = trainer.step(videos)?;
        log.append(it, &report)?;
        if it % 50 == 0 || it + 1 == total {
            log::info!(
                "{} {it}: total {:.4} pix {:.4} disc {:.4}",
                stage.name(),
                report["total"],
                report["pix"],
                report["disc"]
            );
        }
        summary.last_reports.insert(stage.name(), report);
        if trainer.iteration % trainer.cfg.checkpoint_every == 0 && trainer.iteration < total {
            let p = checkpoint_path(out_dir, stage, trainer.iteration);
            trainer.save_checkpoint(&p)?;
            summary.checkpoints.push(p);
        }
    }
    if stage == Stage::Base && !trainer.standing_done {
        trainer.compute_standing_stats(videos)?;
    }
    let p = checkpoint_path(out_dir, stage, trainer.iteration);
    trainer.save_checkpoint(&p)?;
    summary.checkpoints.push(p);
    Ok(())
}

#[cfg(test)]
mod tests;
