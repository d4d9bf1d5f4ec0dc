//! Per-avatar layer parameters predicted from an embedding tensor.
//!
//! An embedding is nearest-resized, flattened into a `(rows, cols)` matrix and
//! pushed through three bias-carrying linear maps with nothing in between:
//! along the rows to the predictor rank, across rows to the target layer's
//! output channels, and along the rank to the target's per-channel width.

use candle_core::Tensor;

use super::layers::{BatchNorm, Linear};
use super::store::{Init, Scope};
use super::Mode;
use crate::error::{shape_err, Result};
use crate::tensor::resize_nearest;

#[derive(Debug, Clone)]
pub struct ParamPredictor {
    pub spatial: Linear,
    pub channel: Linear,
    pub output: Linear,
    pub embed_channels: usize,
    pub size: usize,
    rows: usize,
    cols: usize,
    pub out_rows: usize,
    pub out_cols: usize,
}

impl ParamPredictor {
    /// Predictor of an `(out_rows, out_cols)` parameter matrix from a
    /// `embed_channels`-channel embedding resized to `size`×`size` and
    /// flattened into rows of length `cols`.
    pub fn new(
        scope: &Scope,
        embed_channels: usize,
        size: usize,
        cols: usize,
        rank: usize,
        out_rows: usize,
        out_cols: usize,
    ) -> Result<Self> {
        let total = embed_channels * size * size;
        if total % cols != 0 {
            return Err(shape_err!("{total} embedding values do not split into rows of {cols}"));
        }
        let rows = total / cols;
        Ok(ParamPredictor {
            spatial: Linear::new(&scope.sub("spatial"), cols, rank)?,
            channel: Linear::new(&scope.sub("channel"), rows, out_rows)?,
            output: Linear::new(&scope.sub("output"), rank, out_cols)?,
            embed_channels,
            size,
            rows,
            cols,
            out_rows,
            out_cols,
        })
    }

    /// `(B, out_rows, out_cols)` parameters for a `(B, C, 8, 8)` embedding.
    pub fn forward(&self, embedding: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, _, _) = embedding.dims4()?;
        if c != self.embed_channels {
            return Err(shape_err!(
                "predictor owned by a {}-channel embedding got {c} channels",
                self.embed_channels
            ));
        }
        let m = resize_nearest(embedding, self.size)?.reshape((b, self.rows, self.cols))?;
        let m = self.spatial.forward(&m, mode)?; // (B, rows, rank)
        let m = self.channel.forward(&m.transpose(1, 2)?, mode)?; // (B, rank, out_rows)
        self.output.forward(&m.transpose(1, 2)?, mode) // (B, out_rows, out_cols)
    }
}

/// Per-sample 1×1 convolution weights and biases.
#[derive(Debug, Clone)]
pub struct ConvParams {
    /// `(B, out, in)`
    pub weight: Tensor,
    /// `(B, out)`
    pub bias: Tensor,
}

impl ConvParams {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let out = self.weight.dim(1)?;
        if self.weight.dim(2)? != c {
            return Err(shape_err!("adaptive conv expects {} channels, got {c}", self.weight.dim(2)?));
        }
        let y = self.weight.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
        let y = y.broadcast_add(&self.bias.unsqueeze(2)?)?;
        Ok(y.reshape((y.dim(0)?, out, h, w))?)
    }

    pub fn detach(&self) -> Self {
        ConvParams {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
        }
    }
}

/// 1×1 convolution whose weights come from an embedding.
#[derive(Debug, Clone)]
pub struct AdaptiveConv {
    pub predictor: ParamPredictor,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl AdaptiveConv {
    pub fn new(scope: &Scope, spec: PredictorSpec, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(AdaptiveConv {
            predictor: spec.build(scope, out_ch, in_ch + 1)?,
            in_ch,
            out_ch,
        })
    }

    pub fn predict(&self, embedding: &Tensor, mode: Mode) -> Result<ConvParams> {
        let p = self.predictor.forward(embedding, mode)?;
        let gain = 1.0 / (self.in_ch as f64).sqrt();
        Ok(ConvParams {
            weight: (p.narrow(2, 0, self.in_ch)? * gain)?,
            bias: p.narrow(2, self.in_ch, 1)?.squeeze(2)?,
        })
    }
}

/// Per-sample, per-channel modulation `x · (1 + gamma) + beta`.
#[derive(Debug, Clone)]
pub struct Modulation {
    /// `(B, C)`
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Modulation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let g = (self.gamma.unsqueeze(2)?.unsqueeze(3)? + 1.0)?;
        let b = self.beta.unsqueeze(2)?.unsqueeze(3)?;
        Ok(x.broadcast_mul(&g)?.broadcast_add(&b)?)
    }

    pub fn detach(&self) -> Self {
        Modulation {
            gamma: self.gamma.detach(),
            beta: self.beta.detach(),
        }
    }
}

/// Batch norm followed by a per-channel scale and shift predicted from an
/// embedding.
#[derive(Debug, Clone)]
pub struct AdaBatchNorm {
    pub bn: BatchNorm,
    pub predictor: ParamPredictor,
}

impl AdaBatchNorm {
    pub fn new(scope: &Scope, spec: PredictorSpec, channels: usize) -> Result<Self> {
        Ok(AdaBatchNorm {
            bn: BatchNorm::new(&scope.sub("bn"), channels)?,
            predictor: spec.build(&scope.sub("pred"), channels, 2)?,
        })
    }

    pub fn predict(&self, embedding: &Tensor, mode: Mode) -> Result<Modulation> {
        let p = self.predictor.forward(embedding, mode)?;
        Ok(Modulation {
            gamma: p.narrow(2, 0, 1)?.squeeze(2)?,
            beta: p.narrow(2, 1, 1)?.squeeze(2)?,
        })
    }
}

/// Batch norm modulated pixelwise: a trainable feature map is turned into
/// scale and bias maps by two adaptive 1×1 convolutions.
#[derive(Debug, Clone)]
pub struct AdaSpade {
    pub bn: BatchNorm,
    pub features: candle_core::Var,
    pub to_gamma: AdaptiveConv,
    pub to_beta: AdaptiveConv,
}

impl AdaSpade {
    pub fn new(scope: &Scope, spec: PredictorSpec, channels: usize, size: usize) -> Result<Self> {
        Ok(AdaSpade {
            bn: BatchNorm::new(&scope.sub("bn"), channels)?,
            features: scope.param("features", (1, channels, size, size), Init::Normal(1.0))?,
            to_gamma: AdaptiveConv::new(&scope.sub("gamma"), spec, channels, channels)?,
            to_beta: AdaptiveConv::new(&scope.sub("beta"), spec, channels, channels)?,
        })
    }

    /// Scale and bias maps, each `(B, C, H, W)`.
    pub fn maps(&self, embedding: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let f = self.features.as_tensor();
        let g = self.to_gamma.predict(embedding, mode)?.apply(f)?;
        let b = self.to_beta.predict(embedding, mode)?.apply(f)?;
        Ok((g, b))
    }

    pub fn forward(&self, x: &Tensor, embedding: &Tensor, mode: Mode) -> Result<Tensor> {
        let (g, b) = self.maps(embedding, mode)?;
        let y = self.bn.forward(x, mode)?;
        Ok(y.broadcast_mul(&(g + 1.0)?)?.broadcast_add(&b)?)
    }
}

/// Shape of the predictors of one generator.
#[derive(Debug, Clone, Copy)]
pub struct PredictorSpec {
    pub embed_channels: usize,
    pub size: usize,
    pub cols: usize,
    pub rank: usize,
}

impl PredictorSpec {
    pub fn build(&self, scope: &Scope, out_rows: usize, out_cols: usize) -> Result<ParamPredictor> {
        ParamPredictor::new(
            scope,
            self.embed_channels,
            self.size,
            self.cols,
            self.rank,
            out_rows,
            out_cols,
        )
    }
}
