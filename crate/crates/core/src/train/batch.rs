use candle_core::{DType, Tensor};
use rand::Rng;

use crate::data::{sample_pair, FrameRef, KeypointSet, LandmarkSchema, VideoSample};
use crate::error::{Error, Result};
use crate::geometry::{landmark_tensor, Palette};
use crate::tensor::{gray_to_tensor, rgb_to_tensor, DEVICE};

/// Stacked source/target frames of one training step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source: Tensor,
    pub source_landmarks: Tensor,
    pub source_pose: Tensor,
    pub target: Tensor,
    pub target_landmarks: Tensor,
    pub target_pose: Tensor,
    /// Ground-truth foreground masks of the targets, when the data has them.
    pub target_mask: Option<Tensor>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.source.dim(0).unwrap_or(0)
    }
}

/// Converts frames to network inputs.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub palette: Palette,
    pub size: u32,
    pub dtype: DType,
}

impl Encoder {
    pub fn new(n_points: usize, size: usize, dtype: DType) -> Self {
        Encoder {
            palette: Palette::for_schema(&LandmarkSchema::for_points(n_points)),
            size: size as u32,
            dtype,
        }
    }

    fn check(&self, f: &FrameRef<'_>) -> Result<()> {
        let (w, h) = f.image.dimensions();
        if w != self.size || h != self.size {
            return Err(Error::Config(format!(
                "frames are {w}x{h}, the model expects {0}x{0}",
                self.size
            )));
        }
        Ok(())
    }

    pub fn frame(&self, f: &FrameRef<'_>) -> Result<Tensor> {
        self.check(f)?;
        rgb_to_tensor(f.image, self.dtype)
    }

    pub fn landmarks(&self, kps: &KeypointSet) -> Result<Tensor> {
        landmark_tensor(kps, self.size, self.size, &self.palette, self.dtype)
    }

    /// `(B, 2N)` pose vectors.
    pub fn poses(&self, kps: &[&KeypointSet]) -> Result<Tensor> {
        let n = kps.first().map(|k| k.len()).unwrap_or(0);
        let data: Vec<f32> = kps.iter().flat_map(|k| k.pose_vector()).collect();
        Ok(Tensor::from_vec(data, (kps.len(), 2 * n), &DEVICE)?.to_dtype(self.dtype)?)
    }

    /// Batch from explicit pairs.
    pub fn batch(&self, pairs: &[(FrameRef<'_>, FrameRef<'_>)], need_masks: bool) -> Result<Batch> {
        if pairs.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let stack = |f: &dyn Fn(&(FrameRef<'_>, FrameRef<'_>)) -> Result<Tensor>| -> Result<Tensor> {
            let v = pairs.iter().map(f).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&v, 0)?)
        };
        let target_mask = if need_masks {
            Some(stack(&|(_, t)| {
                let m = t.mask.ok_or_else(|| {
                    Error::Config(format!("masking is enabled but frame {} has no ground-truth mask", t.index))
                })?;
                gray_to_tensor(m, self.dtype)
            })?)
        } else {
            None
        };
        let src_kps: Vec<&KeypointSet> = pairs.iter().map(|(s, _)| s.keypoints).collect();
        let tgt_kps: Vec<&KeypointSet> = pairs.iter().map(|(_, t)| t.keypoints).collect();
        Ok(Batch {
            source: stack(&|(s, _)| self.frame(s))?,
            source_landmarks: stack(&|(s, _)| self.landmarks(s.keypoints))?,
            source_pose: self.poses(&src_kps)?,
            target: stack(&|(_, t)| self.frame(t))?,
            target_landmarks: stack(&|(_, t)| self.landmarks(t.keypoints))?,
            target_pose: self.poses(&tgt_kps)?,
            target_mask,
        })
    }

    /// `size` pairs, each from a uniformly drawn video.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        videos: &[VideoSample],
        size: usize,
        need_masks: bool,
        rng: &mut R,
    ) -> Result<Batch> {
        let usable: Vec<&VideoSample> = videos.iter().filter(|v| !v.is_empty()).collect();
        if usable.is_empty() {
            return Err(Error::Config("training set has no frames".into()));
        }
        let pairs: Vec<_> = (0..size)
            .map(|_| {
                let v = usable[rng.gen_range(0..usable.len())];
                let p = sample_pair(v, rng);
                (p.source, p.target)
            })
            .collect();
        self.batch(&pairs, need_masks)
    }
}
