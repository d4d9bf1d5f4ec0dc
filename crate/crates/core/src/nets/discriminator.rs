use candle_core::Tensor;

use super::blocks::{ResBlock, Resample};
use super::config::ModelConfig;
use super::layers::Conv2d;
use super::store::Scope;
use super::Mode;
use crate::error::{shape_err, Result};
use crate::tensor::leaky_relu;

/// Patch realism scores and the per-block activations used for feature matching.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    /// `(B, 1, 8, 8)`
    pub scores: Tensor,
    pub features: Vec<Tensor>,
}

impl ScoreMap {
    /// Split a pass over `[real; fake]` back into its two halves.
    pub fn split(&self, n: usize) -> Result<(ScoreMap, ScoreMap)> {
        let half = |start| -> Result<ScoreMap> {
            Ok(ScoreMap {
                scores: self.scores.narrow(0, start, n)?,
                features: self.features.iter().map(|f| f.narrow(0, start, n)).collect::<candle_core::Result<_>>()?,
            })
        };
        Ok((half(0)?, half(n)?))
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub down: Vec<ResBlock>,
    pub last: ResBlock,
    pub head: Conv2d,
    image_size: usize,
}

impl Discriminator {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let mut ch = 6;
        let mut down = Vec::new();
        for (i, out) in cfg.disc_down_channels().into_iter().enumerate() {
            down.push(ResBlock::new(&scope.sub(format!("down{i}")), ch, out, Resample::Down, true)?);
            ch = out;
        }
        Ok(Discriminator {
            down,
            last: ResBlock::new(&scope.sub("last"), ch, ch, Resample::Same, true)?,
            head: Conv2d::new(&scope.sub("head"), ch, 1, 1)?,
            image_size: cfg.image_size,
        })
    }

    pub fn forward(&self, frame: &Tensor, landmarks: &Tensor, mode: Mode) -> Result<ScoreMap> {
        let (_, _, h, w) = frame.dims4()?;
        if frame.dims() != landmarks.dims() || h != self.image_size || w != self.image_size {
            return Err(shape_err!(
                "discriminator expects two {0}x{0} inputs, got {1:?} and {2:?}",
                self.image_size,
                frame.dims(),
                landmarks.dims()
            ));
        }
        let mut x = Tensor::cat(&[frame, landmarks], 1)?;
        let mut features = Vec::with_capacity(self.down.len() + 1);
        for b in self.down.iter().chain(std::iter::once(&self.last)) {
            let (y, f) = b.forward_features(&x, mode)?;
            features.push(f);
            x = y;
        }
        let scores = self.head.forward(&leaky_relu(&x)?, mode)?;
        Ok(ScoreMap { scores, features })
    }
}
