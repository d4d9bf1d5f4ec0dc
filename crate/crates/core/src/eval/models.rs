//! Small fitted models used only for scoring: an identity encoder for the
//! cosine-similarity metric and a landmark detector for NME.

use candle_core::{DType, Tensor};
use image::{imageops, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::{KeypointSet, VideoSample};
use crate::error::{Error, Result};
use crate::losses::{FeatureExtractor, RandomConvExtractor};
use crate::tensor::rgb_to_tensor;

/// Maps a face image to an identity embedding.
pub trait IdentityEncoder: Send + Sync {
    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// Predicts keypoints from an image.
pub trait LandmarkDetector: Send + Sync {
    fn detect(&self, image: &RgbImage) -> Result<KeypointSet>;
}

/// Upper bound on the embedding size of [`LdaEncoder`].
pub const MAX_IDENTITY_DIMS: usize = 32;

/// Linear discriminant projection of pooled face-extractor activations,
/// fitted on labelled training identities.
pub struct LdaEncoder {
    extractor: RandomConvExtractor,
    mean: DVector<f64>,
    projection: DMatrix<f64>,
}

impl std::fmt::Debug for LdaEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LdaEncoder")
            .field("features", &self.projection.nrows())
            .field("dims", &self.projection.ncols())
            .finish()
    }
}

fn pooled(extractor: &dyn FeatureExtractor, image: &RgbImage) -> Result<Vec<f64>> {
    let x = rgb_to_tensor(image, DType::F32)?.unsqueeze(0)?;
    let mut out = Vec::new();
    for map in extractor.features(&x)? {
        let m: Tensor = map.mean((2, 3))?.flatten_all()?.to_dtype(DType::F64)?;
        out.extend(m.to_vec1::<f64>()?);
    }
    Ok(out)
}

impl LdaEncoder {
    /// `samples` holds one group of images per identity.
    pub fn fit(samples: &[Vec<&RgbImage>]) -> Result<Self> {
        let extractor = RandomConvExtractor::face(DType::F32)?;
        let groups: Vec<Vec<Vec<f64>>> = samples
            .iter()
            .filter(|g| !g.is_empty())
            .map(|g| g.iter().map(|img| pooled(&extractor, img)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        if groups.len() < 2 {
            return Err(Error::Config("the identity encoder needs at least two identities".into()));
        }
        let d = groups[0][0].len();
        let n: usize = groups.iter().map(|g| g.len()).sum();
        let mut mean = DVector::zeros(d);
        for f in groups.iter().flatten() {
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;

        let mut within = DMatrix::zeros(d, d);
        let mut between = DMatrix::zeros(d, d);
        for g in &groups {
            let mut mu = DVector::zeros(d);
            for f in g {
                mu += DVector::from_column_slice(f);
            }
            mu /= g.len() as f64;
            for f in g {
                let c = DVector::from_column_slice(f) - &mu;
                within += &c * c.transpose();
            }
            let c = &mu - &mean;
            between += (&c * c.transpose()) * g.len() as f64;
        }
        within /= n as f64;
        between /= n as f64;
        let ridge = 1e-3 * within.trace() / d as f64 + 1e-12;
        for i in 0..d {
            within[(i, i)] += ridge;
        }

        // whiten the within-class scatter, then take the leading directions
        // of the whitened between-class scatter
        let w = SymmetricEigen::new(within);
        let scale = DMatrix::from_diagonal(&w.eigenvalues.map(|l| 1.0 / l.max(ridge).sqrt()));
        let whiten = &w.eigenvectors * scale;
        let b = whiten.transpose() * between * &whiten;
        let b = SymmetricEigen::new((&b + b.transpose()) * 0.5);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| b.eigenvalues[j].total_cmp(&b.eigenvalues[i]));
        let k = (groups.len() - 1).min(d).min(MAX_IDENTITY_DIMS);
        let cols: Vec<DVector<f64>> = order[..k].iter().map(|&i| b.eigenvectors.column(i).into_owned()).collect();
        let projection = whiten * DMatrix::from_columns(&cols);
        Ok(LdaEncoder {
            extractor,
            mean,
            projection,
        })
    }

    /// Fit on every frame of each video, one identity per video.
    pub fn fit_videos(videos: &[VideoSample]) -> Result<Self> {
        let groups: Vec<Vec<&RgbImage>> = videos.iter().map(|v| v.frames().iter().collect()).collect();
        Self::fit(&groups)
    }

    pub fn dims(&self) -> usize {
        self.projection.ncols()
    }
}

impl IdentityEncoder for LdaEncoder {
    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let f = DVector::from_vec(pooled(&self.extractor, image)?);
        if f.len() != self.mean.len() {
            return Err(Error::Shape(format!("{} pooled features, encoder expects {}", f.len(), self.mean.len())));
        }
        let e = self.projection.transpose() * (f - &self.mean);
        Ok(e.iter().copied().collect())
    }
}

/// Side of the downsampled image the detector reads.
pub const DETECTOR_INPUT: u32 = 16;

/// Ridge regression from a downsampled RGB image to keypoint coordinates.
#[derive(Debug, Clone)]
pub struct RidgeDetector {
    x_mean: DVector<f64>,
    y_mean: DVector<f64>,
    weights: DMatrix<f64>,
}

fn detector_features(image: &RgbImage) -> DVector<f64> {
    let small = imageops::resize(image, DETECTOR_INPUT, DETECTOR_INPUT, imageops::FilterType::Triangle);
    DVector::from_iterator(
        (3 * DETECTOR_INPUT * DETECTOR_INPUT) as usize,
        small.pixels().flat_map(|p| p.0).map(|v| v as f64 / 127.5 - 1.0),
    )
}

impl RidgeDetector {
    pub fn fit(samples: &[(&RgbImage, &KeypointSet)], lambda: f64) -> Result<Self> {
        let Some((_, first)) = samples.first() else {
            return Err(Error::Config("the landmark detector needs training frames".into()));
        };
        let n_out = 2 * first.len();
        if let Some((_, k)) = samples.iter().find(|(_, k)| k.len() != first.len()) {
            return Err(Error::Shape(format!("{} vs {} keypoints in detector data", k.len(), first.len())));
        }
        let xs: Vec<DVector<f64>> = samples.iter().map(|(img, _)| detector_features(img)).collect();
        let d = xs[0].len();
        let n = samples.len() as f64;
        let x_mean = xs.iter().fold(DVector::zeros(d), |a, x| a + x) / n;
        let ys: Vec<DVector<f64>> = samples
            .iter()
            .map(|(_, k)| DVector::from_iterator(n_out, k.points().iter().flat_map(|p| [p[0] as f64, p[1] as f64])))
            .collect();
        let y_mean = ys.iter().fold(DVector::zeros(n_out), |a, y| a + y) / n;
        let x = DMatrix::from_columns(&xs.iter().map(|x| x - &x_mean).collect::<Vec<_>>()).transpose();
        let y = DMatrix::from_columns(&ys.iter().map(|y| y - &y_mean).collect::<Vec<_>>()).transpose();
        let mut gram = x.transpose() * &x;
        for i in 0..d {
            gram[(i, i)] += lambda;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Numerical("detector normal equations are not positive definite".into()))?;
        let weights = chol.solve(&(x.transpose() * y));
        Ok(RidgeDetector {
            x_mean,
            y_mean,
            weights,
        })
    }

    pub fn fit_videos(videos: &[VideoSample], lambda: f64) -> Result<Self> {
        let samples: Vec<(&RgbImage, &KeypointSet)> = videos
            .iter()
            .flat_map(|v| v.frames().iter().zip(v.keypoints()))
            .collect();
        Self::fit(&samples, lambda)
    }
}

impl LandmarkDetector for RidgeDetector {
    fn detect(&self, image: &RgbImage) -> Result<KeypointSet> {
        let x = detector_features(image) - &self.x_mean;
        let y = self.weights.transpose() * x + &self.y_mean;
        KeypointSet::new(y.as_slice().chunks(2).map(|c| [c[0] as f32, c[1] as f32]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, LandmarkSchema, SynthConfig};
    use crate::eval::metrics::{cosine, nme};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn videos(first: usize, n: usize) -> Vec<VideoSample> {
        let cfg = SynthConfig {
            identities: n,
            frames: 8,
            image_size: 32,
            first_identity: first,
            ..SynthConfig::default()
        };
        generate_synthetic_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn encoder_separates_identities() {
        let train = videos(0, 6);
        let enc = LdaEncoder::fit_videos(&train).unwrap();
        assert_eq!(enc.dims(), 5);
        let e = |v: &VideoSample, i: usize| enc.embed(&v.frames()[i]).unwrap();
        let mut same = 0.0;
        let mut other = 0.0;
        for a in 0..6 {
            same += cosine(&e(&train[a], 1), &e(&train[a], 6)).unwrap();
            other += cosine(&e(&train[a], 1), &e(&train[(a + 1) % 6], 6)).unwrap();
        }
        assert!(same > other, "same {same} other {other}");
        let x = e(&train[0], 0);
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encoder_needs_two_identities() {
        assert!(matches!(LdaEncoder::fit_videos(&videos(0, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn detector_beats_the_mean_shape() {
        let train = videos(0, 8);
        let test = videos(8, 2);
        let det = RidgeDetector::fit_videos(&train, 1.0).unwrap();
        let schema = LandmarkSchema::ibug68();
        let mean_shape =
            KeypointSet::new(det.y_mean.as_slice().chunks(2).map(|c| [c[0] as f32, c[1] as f32]).collect()).unwrap();
        let (mut fitted, mut constant) = (0.0, 0.0);
        for v in &test {
            for (img, k) in v.frames().iter().zip(v.keypoints()) {
                fitted += nme(&det.detect(img).unwrap(), k, &schema).unwrap();
                constant += nme(&mean_shape, k, &schema).unwrap();
            }
        }
        assert!(fitted < constant, "fitted {fitted} constant {constant}");
        assert!(RidgeDetector::fit(&[], 1.0).is_err());
    }
}
