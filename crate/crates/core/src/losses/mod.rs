//! Training objectives.
//!
//! Image-space distances sum over channels and pixels, divide by the pixel
//! count of that map and average over the batch.

mod extractor;

pub use extractor::{FeatureExtractor, IdentityExtractor, RandomConvExtractor};

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ensure_same_shape, scalar};

/// `mean_b [ Σ_{c,h,w} |a - b| / (H W) ]` for `(B, C, H, W)` tensors.
pub fn normalized_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_same_shape(a, b, "l1")?;
    let (_, _, h, w) = a.dims4()?;
    Ok(((a - b)?.abs()?.sum_all()? / (a.dim(0)? * h * w) as f64)?)
}

/// Mean absolute distance of the low-frequency layer to the target.
pub fn pixelwise_l1(x_lf: &Tensor, target: &Tensor) -> Result<Tensor> {
    normalized_l1(x_lf, target)
}

/// Composite whose low-frequency part passes no gradient.
pub fn stopgrad_composite(x_lf: &Tensor, x_hf: &Tensor) -> Result<Tensor> {
    ensure_same_shape(x_lf, x_hf, "composite")?;
    Ok((x_lf.detach() + x_hf)?)
}

/// Average over the extractor's maps of their normalized L1 distance.
pub fn perceptual_loss(extractor: &dyn FeatureExtractor, generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    ensure_same_shape(generated, target, "perceptual")?;
    let fg = extractor.features(generated)?;
    let ft = extractor.features(&target.detach())?;
    mean_of_l1(&fg, &ft)
}

fn mean_of_l1(a: &[Tensor], b: &[Tensor]) -> Result<Tensor> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err!("feature lists of length {} and {}", a.len(), b.len()));
    }
    let mut acc = normalized_l1(&a[0], &b[0])?;
    for (x, y) in a.iter().zip(b).skip(1) {
        acc = (acc + normalized_l1(x, y)?)?;
    }
    Ok((acc / a.len() as f64)?)
}

/// Mean per-pixel L1 magnitude of the warp residual, both coordinates summed.
pub fn warp_regularizer(delta: &Tensor) -> Result<Tensor> {
    normalized_l1(delta, &delta.zeros_like()?)
}

/// Relativistic realism scores `D(real) - mean D(fake)` and
/// `D(fake) - mean D(real)`, means taken over the batch per score location.
pub fn relativistic_scores(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    ensure_same_shape(d_real, d_fake, "relativistic scores")?;
    let s_real = d_real.broadcast_sub(&d_fake.mean_keepdim(0)?)?;
    let s_fake = d_fake.broadcast_sub(&d_real.mean_keepdim(0)?)?;
    Ok((s_real, s_fake))
}

fn hinge(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

/// `mean[max(0, 1 - s) + max(0, 1 + ŝ)]`
pub fn hinge_d(s_real: &Tensor, s_fake: &Tensor) -> Result<Tensor> {
    let a = hinge(&(1.0 - s_real)?)?.mean_all()?;
    let b = hinge(&(s_fake + 1.0)?)?.mean_all()?;
    Ok((a + b)?)
}

/// `mean[max(0, 1 + s) + max(0, 1 - ŝ)]`
pub fn hinge_g(s_real: &Tensor, s_fake: &Tensor) -> Result<Tensor> {
    let a = hinge(&(s_real + 1.0)?)?.mean_all()?;
    let b = hinge(&(1.0 - s_fake)?)?.mean_all()?;
    Ok((a + b)?)
}

/// `-mean(ŝ)`
pub fn nonsaturating_g(s_fake: &Tensor) -> Result<Tensor> {
    Ok(s_fake.mean_all()?.neg()?)
}

/// Distance between discriminator activations on real and generated inputs;
/// the real side is a constant target.
pub fn feature_matching(real_feats: &[Tensor], fake_feats: &[Tensor]) -> Result<Tensor> {
    let real: Vec<Tensor> = real_feats.iter().map(Tensor::detach).collect();
    mean_of_l1(fake_feats, &real)
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `target` in `[0, 1]`,
/// in the form `max(x, 0) - x y + log(1 + exp(-|x|))`.
pub fn seg_bce(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    ensure_same_shape(logits, target, "segmentation")?;
    let pos = logits.relu()?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((pos - logits.mul(target)?)? + soft)?.mean_all()?)
}

pub const REG_INITIAL_WEIGHT: f64 = 10.0;
pub const REG_DECAY: f64 = 0.9;
pub const REG_DECAY_EVERY: u64 = 50;

/// Warp-regularizer weight at a training iteration.
pub fn reg_weight(iteration: u64) -> f64 {
    REG_INITIAL_WEIGHT * REG_DECAY.powi((iteration / REG_DECAY_EVERY) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adv: f64,
    pub pix: f64,
    pub perc_in: f64,
    pub perc_face: f64,
    pub fm: f64,
    pub seg: f64,
    /// Use `-mean(ŝ)` instead of the hinge for the generator.
    pub nonsaturating_g: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 0.5,
            pix: 10.0,
            perc_in: 10.0,
            perc_face: 0.01,
            fm: 10.0,
            seg: 10.0,
            nonsaturating_g: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adv, self.pix, self.perc_in, self.perc_face, self.fm, self.seg];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Weight of a named term at an iteration.
    pub fn weight(&self, term: &str, iteration: u64) -> Option<f64> {
        Some(match term {
            "adv" => self.adv,
            "pix" => self.pix,
            "perc_in" => self.perc_in,
            "perc_face" => self.perc_face,
            "fm" => self.fm,
            "seg" => self.seg,
            "reg" => reg_weight(iteration),
            _ => return None,
        })
    }
}

/// Terms every generator objective must contain; `seg` is optional.
pub const MANDATORY_TERMS: [&str; 6] = ["adv", "pix", "perc_in", "perc_face", "fm", "reg"];

/// Unweighted scalar value of every term, in name order.
pub type LossReport = BTreeMap<String, f64>;

/// Weighted generator objective and the unweighted terms.
pub fn total_generator_loss(
    parts: &BTreeMap<&'static str, Tensor>,
    weights: &LossWeights,
    iteration: u64,
) -> Result<(Tensor, LossReport)> {
    for t in MANDATORY_TERMS {
        if !parts.contains_key(t) {
            return Err(Error::Config(format!("generator objective lacks the {t} term")));
        }
    }
    let mut total: Option<Tensor> = None;
    let mut report = LossReport::new();
    for (name, t) in parts {
        let w = weights
            .weight(name, iteration)
            .ok_or_else(|| Error::Config(format!("unknown loss term {name}")))?;
        report.insert(name.to_string(), scalar(t)?);
        let term = (t * w)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    let total = total.expect("mandatory terms present");
    report.insert("total".into(), scalar(&total)?);
    Ok((total, report))
}

/// First non-finite term of a report.
pub fn first_non_finite(report: &LossReport) -> Option<&str> {
    report.iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k.as_str())
}
