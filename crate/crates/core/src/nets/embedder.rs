use candle_core::Tensor;

use super::blocks::{ResBlock, Resample};
use super::config::ModelConfig;
use super::layers::Conv2d;
use super::store::Scope;
use super::Mode;
use crate::error::{shape_err, Result};

/// Encodes a source frame and its landmark image into one 8×8 embedding per
/// generator block. Has no normalization layers.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub stem: Conv2d,
    pub down: Vec<ResBlock>,
    pub blocks: Vec<ResBlock>,
    image_size: usize,
}

impl Embedder {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let stem_ch = cfg.tex_channels.min;
        let stem = Conv2d::new(&scope.sub("stem"), 6, stem_ch, 3)?;
        let mut ch = stem_ch;
        let mut down = Vec::new();
        for (i, out) in cfg.emb_down_channels().into_iter().enumerate() {
            down.push(ResBlock::new(&scope.sub(format!("down{i}")), ch, out, Resample::Down, false)?);
            ch = out;
        }
        let mut blocks = Vec::new();
        for (k, out) in cfg.embedding_channels().into_iter().enumerate() {
            blocks.push(ResBlock::new(&scope.sub(format!("block{}", k + 1)), ch, out, Resample::Same, false)?);
            ch = out;
        }
        Ok(Embedder {
            stem,
            down,
            blocks,
            image_size: cfg.image_size,
        })
    }

    /// `frame` in `[-1, 1]` and `landmarks` in `[0, 1]`, both `(B, 3, H, W)`.
    pub fn forward(&self, frame: &Tensor, landmarks: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = frame.dims4()?;
        if frame.dims() != landmarks.dims() || h != self.image_size || w != self.image_size {
            return Err(shape_err!(
                "embedder expects two {0}x{0} inputs, got {1:?} and {2:?}",
                self.image_size,
                frame.dims(),
                landmarks.dims()
            ));
        }
        let mut x = self.stem.forward(&Tensor::cat(&[frame, landmarks], 1)?, mode)?;
        for b in &self.down {
            x = b.forward(&x, mode)?;
        }
        let mut stack = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(&x, mode)?;
            stack.push(x.clone());
        }
        Ok(stack)
    }
}
