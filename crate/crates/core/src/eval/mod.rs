//! Reenactment metrics, the evaluation protocol and report emission.
//!
//! Each test video is turned into an avatar from its first frame and driven
//! with the keypoints of targets taken at a fixed stride. Generated frames
//! are scored against the ground truth with a perceptual distance, SSIM,
//! identity cosine similarity and the landmark error of a fitted detector
//! (applied to both images, so a perfect reconstruction scores exactly 0).

pub mod metrics;
pub mod models;
pub mod report;

pub use metrics::{cosine, lpips_proxy, nme, ssim};
pub use models::{IdentityEncoder, LandmarkDetector, LdaEncoder, RidgeDetector};
pub use report::{
    plot_from_csv, read_rows, read_summary, render_plot, write_summary, EvalReport, MetricValues, ProtocolInfo,
    SummaryRow, VideoRow, METRICS, NME_CONVENTION,
};

use std::collections::BTreeSet;

use candle_core::DType;
use image::{GrayImage, RgbImage};

use crate::data::{LandmarkSchema, VideoSample};
use crate::error::{Error, Result};
use crate::infer::{count_macs, create_avatar, fingerprint, AvatarState, CreateOptions, SourceInfo};
use crate::losses::{FeatureExtractor, RandomConvExtractor};
use crate::nets::Model;
use crate::tensor::{rgb_to_tensor, tensor_to_rgb};

/// Ridge strength of the default landmark detector.
pub const DETECTOR_RIDGE: f64 = 1.0;

/// Scoring models fitted on training identities.
pub struct EvalTools {
    pub extractor: Box<dyn FeatureExtractor>,
    pub encoder: Box<dyn IdentityEncoder>,
    pub detector: Box<dyn LandmarkDetector>,
    pub schema: LandmarkSchema,
    /// Identities the encoder and detector were fitted on; test videos must
    /// not be among them.
    pub fitted_ids: BTreeSet<String>,
}

impl EvalTools {
    pub fn fit(train: &[VideoSample], schema: LandmarkSchema) -> Result<Self> {
        Ok(EvalTools {
            extractor: Box::new(RandomConvExtractor::general(DType::F32)?),
            encoder: Box::new(LdaEncoder::fit_videos(train)?),
            detector: Box::new(RidgeDetector::fit_videos(train, DETECTOR_RIDGE)?),
            schema,
            fitted_ids: train.iter().map(|v| v.video_id().to_string()).collect(),
        })
    }

    /// All four metrics for one generated frame.
    pub fn score(&self, generated: &RgbImage, target: &RgbImage) -> Result<MetricValues> {
        let g = rgb_to_tensor(generated, DType::F32)?;
        let t = rgb_to_tensor(target, DType::F32)?;
        Ok(MetricValues {
            lpips: lpips_proxy(self.extractor.as_ref(), &g.unsqueeze(0)?, &t.unsqueeze(0)?)?,
            ssim: ssim(&g, &t, 2.0)?,
            csim: cosine(&self.encoder.embed(generated)?, &self.encoder.embed(target)?)?,
            nme: nme(
                &self.detector.detect(generated)?,
                &self.detector.detect(target)?,
                &self.schema,
            )?,
        })
    }
}

/// Source frame and target stride.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Protocol {
    /// Frames between targets; `None` uses one second at the video's rate.
    pub stride: Option<usize>,
    /// Multiply targets by their ground-truth mask before scoring.
    pub mask_targets: bool,
}

impl Protocol {
    pub fn stride_for(&self, video: &VideoSample) -> usize {
        self.stride.unwrap_or_else(|| video.fps().round() as usize).max(1)
    }

    /// Target frame indices; the source is frame 0.
    pub fn targets(&self, video: &VideoSample) -> Vec<usize> {
        let s = self.stride_for(video);
        (s..video.len()).step_by(s).collect()
    }

    fn info(&self) -> ProtocolInfo {
        ProtocolInfo {
            source_frame: 0,
            stride: self.stride,
            masked_targets: self.mask_targets,
        }
    }
}

/// Target as the masked generator sees it: background pixels become 0, the
/// middle of the value range.
fn apply_mask(img: &RgbImage, mask: &GrayImage) -> Result<RgbImage> {
    let t = rgb_to_tensor(img, DType::F32)?;
    let m = crate::tensor::gray_to_tensor(mask, DType::F32)?;
    tensor_to_rgb(&t.broadcast_mul(&m)?)
}

/// Score frames produced by `render(video, targets)` against the ground truth.
pub fn evaluate_frames<F>(
    videos: &[VideoSample],
    protocol: &Protocol,
    tools: &EvalTools,
    label: &str,
    mut render: F,
) -> Result<EvalReport>
where
    F: FnMut(&VideoSample, &[usize]) -> Result<Vec<RgbImage>>,
{
    if videos.is_empty() {
        return Err(Error::Config("the test set is empty".into()));
    }
    if let Some(v) = videos.iter().find(|v| tools.fitted_ids.contains(v.video_id())) {
        return Err(Error::Config(format!(
            "test video {} was used to fit the evaluation models",
            v.video_id()
        )));
    }
    let mut rows = Vec::with_capacity(videos.len());
    for v in videos {
        let targets = protocol.targets(v);
        if targets.is_empty() {
            return Err(Error::Config(format!(
                "video {} has {} frames, too short for stride {}",
                v.video_id(),
                v.len(),
                protocol.stride_for(v)
            )));
        }
        let frames = render(v, &targets)?;
        if frames.len() != targets.len() {
            return Err(Error::Shape(format!("{} frames rendered for {} targets", frames.len(), targets.len())));
        }
        let mut scores = Vec::with_capacity(targets.len());
        for (&t, generated) in targets.iter().zip(&frames) {
            let target = match (protocol.mask_targets, v.masks()) {
                (true, Some(m)) => apply_mask(&v.frames()[t], &m[t])?,
                (true, None) => {
                    return Err(Error::Config(format!("video {} has no masks to apply", v.video_id())));
                }
                (false, _) => v.frames()[t].clone(),
            };
            scores.push(tools.score(generated, &target)?);
        }
        rows.push(VideoRow {
            video_id: v.video_id().to_string(),
            frames: scores.len(),
            metrics: MetricValues::mean(&scores),
        });
    }
    EvalReport::new(label, protocol.info(), rows)
}

/// Avatar of a video's first frame.
pub fn source_avatar(model: &Model, video: &VideoSample, opts: &CreateOptions) -> Result<AvatarState> {
    let f = video.frame(0);
    let opts = CreateOptions {
        source: SourceInfo {
            video_id: Some(video.video_id().to_string()),
            frame: Some(0),
        },
        ..opts.clone()
    };
    create_avatar(model, f.image, f.keypoints, &opts)
}

/// Drive an avatar with the keypoints of the given frames.
pub fn drive_frames(avatar: &AvatarState, video: &VideoSample, targets: &[usize]) -> Result<Vec<RgbImage>> {
    targets
        .iter()
        .map(|&t| tensor_to_rgb(&avatar.drive(&video.keypoints()[t], false)?.frame))
        .collect()
}

/// Full protocol for a trained model. Targets are masked exactly when the
/// avatars output masked frames.
pub fn evaluate(
    model: &Model,
    opts: &CreateOptions,
    videos: &[VideoSample],
    tools: &EvalTools,
    stride: Option<usize>,
    label: &str,
) -> Result<EvalReport> {
    let protocol = Protocol {
        stride,
        mask_targets: opts.masked_output,
    };
    let mut report = evaluate_frames(videos, &protocol, tools, label, |v, targets| {
        drive_frames(&source_avatar(model, v, opts)?, v, targets)
    })?;
    report.fingerprint = Some(fingerprint(&model.cfg));
    report.gmacs = Some(count_macs(&model.cfg).gmacs());
    report.run = opts.run.clone();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthConfig};
    use crate::nets::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn split(first: usize, n: usize, size: u32) -> Vec<VideoSample> {
        let cfg = SynthConfig {
            identities: n,
            frames: 9,
            image_size: size,
            first_identity: first,
            ..SynthConfig::default()
        };
        generate_synthetic_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let tools = EvalTools::fit(&split(0, 4, 32), LandmarkSchema::ibug68()).unwrap();
        let test = split(4, 2, 32);
        let r = evaluate_frames(&test, &Protocol::default(), &tools, "gt", |v, t| {
            Ok(t.iter().map(|&i| v.frames()[i].clone()).collect())
        })
        .unwrap();
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            assert_eq!(row.frames, 2);
            assert_eq!(row.metrics.lpips, 0.0);
            assert!((row.metrics.ssim - 1.0).abs() < 1e-12);
            assert!((row.metrics.csim - 1.0).abs() < 1e-12);
            assert_eq!(row.metrics.nme, 0.0);
        }
        for m in METRICS {
            let mean = r.rows.iter().map(|x| x.metrics.get(m).unwrap()).sum::<f64>() / 2.0;
            assert_eq!(r.mean.get(m).unwrap(), mean);
        }
    }

    #[test]
    fn protocol_and_input_checks() {
        let train = split(0, 3, 32);
        let tools = EvalTools::fit(&train, LandmarkSchema::ibug68()).unwrap();
        let v = &split(3, 1, 32)[0];
        assert_eq!(Protocol::default().targets(v), vec![4, 8]);
        assert_eq!(Protocol { stride: Some(3), mask_targets: false }.targets(v), vec![3, 6]);
        let gt = |v: &VideoSample, t: &[usize]| Ok(t.iter().map(|&i| v.frames()[i].clone()).collect());
        assert!(matches!(
            evaluate_frames(&[], &Protocol::default(), &tools, "x", gt),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            evaluate_frames(&train, &Protocol::default(), &tools, "x", gt),
            Err(Error::Config(_))
        ));
        let long = Protocol { stride: Some(20), mask_targets: false };
        assert!(matches!(evaluate_frames(std::slice::from_ref(v), &long, &tools, "x", gt), Err(Error::Config(_))));
    }

    #[test]
    fn model_evaluation_has_one_row_per_video() {
        let tools = EvalTools::fit(&split(0, 3, 16), LandmarkSchema::ibug68()).unwrap();
        let test = split(3, 2, 16);
        let model = Model::new(&ModelConfig::tiny(), 0, DType::F32).unwrap();
        let opts = CreateOptions {
            masked_output: true,
            ..CreateOptions::default()
        };
        let r = evaluate(&model, &opts, &test, &tools, None, "tiny").unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.protocol.masked_targets);
        assert_eq!(r.fingerprint.as_deref(), Some(fingerprint(&ModelConfig::tiny()).as_str()));
        assert!(r.rows.iter().all(|row| row.metrics.lpips > 0.0 && row.metrics.ssim < 1.0));
    }
}
