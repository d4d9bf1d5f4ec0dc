use candle_core::Tensor;

use super::layers::{avg_pool2, BatchNorm, Conv2d};
use super::store::Scope;
use super::Mode;
use crate::error::Result;
use crate::tensor::{leaky_relu, upsample_nearest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Same,
    Down,
    Up,
}

/// Pre-activation residual block: `[norm] → lrelu → conv3 → [norm] → lrelu →
/// conv3`, with resampling around the convolutions and a 1×1 skip projection
/// where the width changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: Option<BatchNorm>,
    pub conv1: Conv2d,
    pub norm2: Option<BatchNorm>,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub resample: Resample,
}

impl ResBlock {
    pub fn new(scope: &Scope, in_ch: usize, out_ch: usize, resample: Resample, batch_norm: bool) -> Result<Self> {
        let bn = |name: &str, c| -> Result<Option<BatchNorm>> {
            batch_norm.then(|| BatchNorm::new(&scope.sub(name), c)).transpose()
        };
        Ok(ResBlock {
            norm1: bn("norm1", in_ch)?,
            conv1: Conv2d::new(&scope.sub("conv1"), in_ch, out_ch, 3)?,
            norm2: bn("norm2", out_ch)?,
            conv2: Conv2d::new(&scope.sub("conv2"), out_ch, out_ch, 3)?,
            skip: (in_ch != out_ch)
                .then(|| Conv2d::new(&scope.sub("skip"), in_ch, out_ch, 1))
                .transpose()?,
            resample,
        })
    }

    /// Output and the activation after the second nonlinearity.
    pub fn forward_features(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut h = match &self.norm1 {
            Some(n) => n.forward(x, mode)?,
            None => x.clone(),
        };
        h = leaky_relu(&h)?;
        if self.resample == Resample::Up {
            h = upsample_nearest(&h, 2)?;
        }
        h = self.conv1.forward(&h, mode)?;
        if let Some(n) = &self.norm2 {
            h = n.forward(&h, mode)?;
        }
        let feat = leaky_relu(&h)?;
        h = self.conv2.forward(&feat, mode)?;

        let mut s = match &self.skip {
            Some(c) => c.forward(x, mode)?,
            None => x.clone(),
        };
        match self.resample {
            Resample::Down => {
                h = avg_pool2(&h)?;
                s = avg_pool2(&s)?;
            }
            Resample::Up => s = upsample_nearest(&s, 2)?,
            Resample::Same => {}
        }
        Ok(((h + s)?, feat))
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_features(x, mode)?.0)
    }
}
