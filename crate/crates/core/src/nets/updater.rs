use candle_core::Tensor;

use super::blocks::{ResBlock, Resample};
use super::config::ModelConfig;
use super::layers::Conv2d;
use super::store::Scope;
use super::Mode;
use crate::error::{shape_err, Result};
use crate::tensor::leaky_relu;

/// Encoder-decoder mapping a texture and the guide-loss gradient at that
/// texture to a texture increment. No normalization; the output convolution
/// starts at zero.
#[derive(Debug, Clone)]
pub struct TextureUpdater {
    pub stem: Conv2d,
    pub down: Vec<ResBlock>,
    pub up: Vec<ResBlock>,
    pub out: Conv2d,
}

impl TextureUpdater {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let lv = cfg.upd_levels();
        let stem = Conv2d::new(&scope.sub("stem"), 6, lv[0], 3)?;
        let mut down = Vec::new();
        let mut up = Vec::new();
        for j in 0..3 {
            down.push(ResBlock::new(&scope.sub(format!("down{j}")), lv[j], lv[j + 1], Resample::Down, false)?);
        }
        for j in (0..3).rev() {
            up.push(ResBlock::new(&scope.sub(format!("up{j}")), lv[j + 1], lv[j], Resample::Up, false)?);
        }
        Ok(TextureUpdater {
            stem,
            down,
            up,
            out: Conv2d::zeros(&scope.sub("out"), lv[0], 3, 3)?,
        })
    }

    pub fn forward(&self, texture: &Tensor, grad: &Tensor, mode: Mode) -> Result<Tensor> {
        if texture.dims() != grad.dims() {
            return Err(shape_err!("texture {:?} vs gradient {:?}", texture.dims(), grad.dims()));
        }
        let (_, _, h, _) = texture.dims4()?;
        if h % 8 != 0 {
            return Err(shape_err!("updater needs a texture side divisible by 8, got {h}"));
        }
        let mut x = self.stem.forward(&Tensor::cat(&[texture, grad], 1)?, mode)?;
        let mut skips = vec![x.clone()];
        for b in &self.down {
            x = b.forward(&x, mode)?;
            skips.push(x.clone());
        }
        skips.pop();
        for b in &self.up {
            x = (b.forward(&x, mode)? + skips.pop().expect("one skip per level"))?;
        }
        self.out.forward(&leaky_relu(&x)?, mode)
    }
}
