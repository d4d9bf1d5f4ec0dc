//! Video samples, keypoints, on-disk dataset layout, source/target pair
//! sampling and a procedural face generator for desk-scale experiments.

mod io;
mod sampling;
mod schema;
pub mod synth;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, read_keypoints_jsonl, write_dataset, write_keypoints_jsonl};
pub use sampling::{sample_pair, PairSample};
pub use schema::{DatasetSchema, LandmarkGroup, LandmarkSchema, DEFAULT_POINTS};
pub use synth::{generate_synthetic_dataset, SynthConfig};

/// Ordered facial landmarks of one frame, normalized to `[0, 1]` of the frame
/// size (x to the right, y down).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    points: Vec<[f32; 2]>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f32; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Integrity("empty keypoint set".into()));
        }
        if let Some(i) = points.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Integrity(format!("keypoint {i} is not finite")));
        }
        Ok(KeypointSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.points
    }

    pub fn expect_len(&self, n: usize) -> Result<()> {
        if self.points.len() != n {
            return Err(Error::Shape(format!(
                "keypoint count {} does not match schema {n}",
                self.points.len()
            )));
        }
        Ok(())
    }

    /// Flattened `[x0, y0, x1, y1, ...]` mapped to `[-1, 1]`: the input of the
    /// inference generator.
    pub fn pose_vector(&self) -> Vec<f32> {
        self.points
            .iter()
            .flat_map(|p| [2.0 * p[0] - 1.0, 2.0 * p[1] - 1.0])
            .collect()
    }

    pub fn translated(&self, dx: f32, dy: f32) -> Self {
        KeypointSet {
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
        }
    }
}

/// One annotated video: frames, per-frame keypoints and optional masks.
#[derive(Debug, Clone)]
pub struct VideoSample {
    video_id: String,
    frames: Vec<RgbImage>,
    keypoints: Vec<KeypointSet>,
    masks: Option<Vec<GrayImage>>,
    fps: f32,
}

impl VideoSample {
    pub fn new(
        video_id: impl Into<String>,
        frames: Vec<RgbImage>,
        keypoints: Vec<KeypointSet>,
        masks: Option<Vec<GrayImage>>,
        fps: f32,
        n_points: usize,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if frames.len() != keypoints.len() {
            return Err(Error::Integrity(format!(
                "{video_id}: {} frames but {} keypoint records",
                frames.len(),
                keypoints.len()
            )));
        }
        if let Some(m) = &masks {
            if m.len() != frames.len() {
                return Err(Error::Integrity(format!(
                    "{video_id}: {} frames but {} masks",
                    frames.len(),
                    m.len()
                )));
            }
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Integrity(format!("{video_id}: fps must be positive")));
        }
        if let Some(first) = frames.first() {
            let dims = first.dimensions();
            if let Some(i) = frames.iter().position(|f| f.dimensions() != dims) {
                return Err(Error::Integrity(format!("{video_id}: frame {i} has a different size")));
            }
            if let Some(m) = &masks {
                if let Some(i) = m.iter().position(|f| f.dimensions() != dims) {
                    return Err(Error::Integrity(format!("{video_id}: mask {i} has a different size")));
                }
            }
        }
        if let Some(i) = keypoints.iter().position(|k| k.len() != n_points) {
            return Err(Error::Integrity(format!(
                "{video_id}: keypoint record {i} has {} points, schema says {n_points}",
                keypoints[i].len()
            )));
        }
        Ok(VideoSample {
            video_id,
            frames,
            keypoints,
            masks,
            fps,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn keypoints(&self) -> &[KeypointSet] {
        &self.keypoints
    }

    pub fn masks(&self) -> Option<&[GrayImage]> {
        self.masks.as_deref()
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    /// `(height, width)` of the frames.
    pub fn frame_size(&self) -> Option<(u32, u32)> {
        self.frames.first().map(|f| (f.height(), f.width()))
    }

    pub fn frame(&self, index: usize) -> FrameRef<'_> {
        FrameRef {
            index,
            image: &self.frames[index],
            keypoints: &self.keypoints[index],
            mask: self.masks.as_ref().map(|m| &m[index]),
        }
    }
}

/// Borrowed view of one annotated frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameRef<'a> {
    pub index: usize,
    pub image: &'a RgbImage,
    pub keypoints: &'a KeypointSet,
    pub mask: Option<&'a GrayImage>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kps(n: usize) -> KeypointSet {
        KeypointSet::new(vec![[0.5, 0.5]; n]).unwrap()
    }

    #[test]
    fn rejects_nonfinite_points() {
        assert!(KeypointSet::new(vec![[f32::NAN, 0.0]]).is_err());
    }

    #[test]
    fn video_sample_invariants() {
        let f = || RgbImage::new(4, 4);
        assert!(VideoSample::new("v", vec![f(), f()], vec![kps(3), kps(3)], None, 25.0, 3).is_ok());
        assert!(matches!(
            VideoSample::new("v", vec![f(), f(), f()], vec![kps(3), kps(3)], None, 25.0, 3),
            Err(Error::Integrity(_))
        ));
        assert!(VideoSample::new("v", vec![f()], vec![kps(2)], None, 25.0, 3).is_err());
        assert!(VideoSample::new("v", vec![f(), RgbImage::new(5, 4)], vec![kps(3), kps(3)], None, 25.0, 3)
            .is_err());
    }

    #[test]
    fn pose_vector_maps_to_symmetric_range() {
        let k = KeypointSet::new(vec![[0.0, 1.0], [0.5, 0.25]]).unwrap();
        assert_eq!(k.pose_vector(), vec![-1.0, 1.0, 0.0, -0.5]);
    }
}
