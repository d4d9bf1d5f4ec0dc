use std::ops::Range;

use candle_core::{DType, Tensor};

use crate::data::{KeypointSet, LandmarkSchema};
use crate::error::{shape_err, Error, Result};
use crate::losses::{perceptual_loss, FeatureExtractor};
use crate::tensor::{ensure_same_shape, scalar};

fn centre(points: &[[f32; 2]], r: &Range<usize>) -> [f64; 2] {
    let n = r.len() as f64;
    let mut c = [0.0; 2];
    for p in &points[r.clone()] {
        c[0] += p[0] as f64;
        c[1] += p[1] as f64;
    }
    [c[0] / n, c[1] / n]
}

/// Mean point distance over the target's inter-eye distance, times 10.
pub fn nme(pred: &KeypointSet, target: &KeypointSet, schema: &LandmarkSchema) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape_err!("{} predicted points vs {} target points", pred.len(), target.len()));
    }
    let (re, le) = schema
        .eyes
        .as_ref()
        .ok_or_else(|| Error::UndefinedMetric("the landmark schema has no eyes".into()))?;
    if re.end > target.len() || le.end > target.len() {
        return Err(shape_err!("eye indices exceed {} points", target.len()));
    }
    let (a, b) = (centre(target.points(), re), centre(target.points(), le));
    let d_eyes = (a[0] - b[0]).hypot(a[1] - b[1]);
    if d_eyes == 0.0 {
        return Err(Error::UndefinedMetric("target eye centres coincide".into()));
    }
    let mean = pred
        .points()
        .iter()
        .zip(target.points())
        .map(|(p, q)| (p[0] as f64 - q[0] as f64).hypot(p[1] as f64 - q[1] as f64))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(10.0 * mean / d_eyes)
}

/// Cosine of two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!("embeddings of length {} and {}", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedMetric("zero-norm identity embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Perceptual distance with the delivered extractor; 0 for identical images.
pub fn lpips_proxy(extractor: &dyn FeatureExtractor, generated: &Tensor, target: &Tensor) -> Result<f64> {
    scalar(&perceptual_loss(extractor, generated, target)?)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_1d() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Mean structural similarity of two `(C, H, W)` or `(1, C, H, W)` images
/// with values in a range of width `data_range`. The Gaussian window is
/// truncated at the borders and renormalized over the pixels it covers.
pub fn ssim(generated: &Tensor, target: &Tensor, data_range: f64) -> Result<f64> {
    ensure_same_shape(generated, target, "ssim")?;
    let dims = generated.dims();
    let (c, h, w) = match *dims {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => return Err(shape_err!("ssim expects a single image, got {dims:?}")),
    };
    let x = generated.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let y = target.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let g = gaussian_1d();
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    for ch in 0..c {
        let xs = &x[ch * h * w..(ch + 1) * h * w];
        let ys = &y[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let (mut sw, mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..SSIM_WINDOW {
                    let ii = i as isize + di as isize - r as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for dj in 0..SSIM_WINDOW {
                        let jj = j as isize + dj as isize - r as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let k = g[di] * g[dj];
                        let (a, b) = (xs[ii as usize * w + jj as usize], ys[ii as usize * w + jj as usize]);
                        sw += k;
                        mx += k * a;
                        my += k * b;
                        sxx += k * a * a;
                        syy += k * b * b;
                        sxy += k * a * b;
                    }
                }
                let (mx, my) = (mx / sw, my / sw);
                let vx = sxx / sw - mx * mx;
                let vy = syy / sw - my * my;
                let cov = sxy / sw - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (c * h * w) as f64)
}
