use candle_core::Tensor;

use super::adaptive::{AdaBatchNorm, AdaptiveConv, ConvParams, Modulation, PredictorSpec};
use super::config::ModelConfig;
use super::layers::{BatchNorm, Conv2d, Linear};
use super::store::Scope;
use super::texture::check_stack;
use super::{BiLayerOutput, Mode};
use crate::error::{shape_err, Result};
use crate::geometry::{warp, WarpField};
use crate::tensor::{leaky_relu, upsample_nearest};

#[derive(Debug, Clone)]
pub enum InfNorm {
    Plain(BatchNorm),
    Ada(AdaBatchNorm),
}

impl InfNorm {
    pub fn bn(&self) -> &BatchNorm {
        match self {
            InfNorm::Plain(bn) => bn,
            InfNorm::Ada(a) => &a.bn,
        }
    }
}

/// Residual block that convolves at the lower resolution before upsampling.
#[derive(Debug, Clone)]
pub struct InfBlock {
    pub norm1: InfNorm,
    pub conv1: Conv2d,
    pub norm2: AdaBatchNorm,
    pub conv2: Conv2d,
    pub skip: AdaptiveConv,
}

/// Avatar-specific parameters of one block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub norm1: Option<Modulation>,
    pub norm2: Modulation,
    pub skip: ConvParams,
}

/// Every adaptive parameter of the inference generator for a batch of avatars.
#[derive(Debug, Clone)]
pub struct AdaptiveBundle {
    pub blocks: Vec<BlockParams>,
}

impl AdaptiveBundle {
    pub fn detach(&self) -> Self {
        AdaptiveBundle {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    norm1: b.norm1.as_ref().map(Modulation::detach),
                    norm2: b.norm2.detach(),
                    skip: b.skip.detach(),
                })
                .collect(),
        }
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.blocks[0].skip.weight.dim(0)?)
    }
}

impl InfBlock {
    fn forward(&self, x: &Tensor, p: &BlockParams, mode: Mode) -> Result<Tensor> {
        let h = match (&self.norm1, &p.norm1) {
            (InfNorm::Plain(bn), None) => bn.forward(x, mode)?,
            (InfNorm::Ada(a), Some(m)) => m.apply(&a.bn.forward(x, mode)?)?,
            _ => return Err(shape_err!("adaptive bundle does not match the block layout")),
        };
        let h = self.conv1.forward(&leaky_relu(&h)?, mode)?;
        let h = upsample_nearest(&h, 2)?;
        let h = p.norm2.apply(&self.norm2.bn.forward(&h, mode)?)?;
        let h = self.conv2.forward(&leaky_relu(&h)?, mode)?;
        let s = upsample_nearest(&p.skip.apply(x)?, 2)?;
        Ok((h + s)?)
    }
}

/// Maps a pose vector to the low-frequency layer, the warp residual and mask
/// logits, then warps the texture.
#[derive(Debug, Clone)]
pub struct InferenceGenerator {
    pub mlp: Vec<Linear>,
    pub blocks: Vec<InfBlock>,
    pub head_norm: BatchNorm,
    pub lf_head: Conv2d,
    pub mask_head: Conv2d,
    pub warp_head: Conv2d,
    pub input_channels: usize,
    embed_channels: Vec<usize>,
    pose_dim: usize,
}

impl InferenceGenerator {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let sched = cfg.inf_blocks();
        let c0 = sched[0].input;
        let mut mlp = Vec::new();
        let mut d = cfg.pose_dim();
        for i in 0..cfg.mlp_layers {
            let out = if i + 1 == cfg.mlp_layers { c0 * 16 } else { cfg.mlp_width };
            mlp.push(Linear::new(&scope.sub(format!("mlp{i}")), d, out)?);
            d = out;
        }
        let embed = cfg.embedding_channels();
        let mut blocks = Vec::new();
        for (i, b) in sched.iter().enumerate() {
            let s = scope.sub(format!("block{}", i + 1));
            let spec = PredictorSpec {
                embed_channels: embed[i],
                size: cfg.inf_predictor_size,
                cols: cfg.inf_predictor_cols,
                rank: cfg.predictor_rank,
            };
            let norm1 = if i == 0 {
                InfNorm::Plain(BatchNorm::new(&s.sub("norm1"), b.input)?)
            } else {
                InfNorm::Ada(AdaBatchNorm::new(&s.sub("norm1"), spec, b.input)?)
            };
            blocks.push(InfBlock {
                norm1,
                conv1: Conv2d::new(&s.sub("conv1"), b.input, b.output, 3)?,
                norm2: AdaBatchNorm::new(&s.sub("norm2"), spec, b.output)?,
                conv2: Conv2d::new(&s.sub("conv2"), b.output, b.output, 3)?,
                skip: AdaptiveConv::new(&s.sub("skip"), spec, b.input, b.output)?,
            });
        }
        let last = sched.last().expect("at least one block").output;
        Ok(InferenceGenerator {
            mlp,
            blocks,
            head_norm: BatchNorm::new(&scope.sub("head_norm"), last)?,
            lf_head: Conv2d::new(&scope.sub("lf_head"), last, 3, 3)?,
            mask_head: Conv2d::new(&scope.sub("mask_head"), last, 1, 3)?,
            warp_head: Conv2d::zeros(&scope.sub("warp_head"), last, 2, 3)?,
            input_channels: c0,
            embed_channels: embed,
            pose_dim: cfg.pose_dim(),
        })
    }

    pub fn predict(&self, stack: &[Tensor], mode: Mode) -> Result<AdaptiveBundle> {
        check_stack(stack, &self.embed_channels)?;
        let blocks = self
            .blocks
            .iter()
            .zip(stack)
            .map(|(b, e)| {
                Ok(BlockParams {
                    norm1: match &b.norm1 {
                        InfNorm::Plain(_) => None,
                        InfNorm::Ada(a) => Some(a.predict(e, mode)?),
                    },
                    norm2: b.norm2.predict(e, mode)?,
                    skip: b.skip.predict(e, mode)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdaptiveBundle { blocks })
    }

    /// `(B, 2N)` pose vectors to low-frequency image, warp and mask logits.
    /// The texture and bundle may have batch 1 and are then shared.
    pub fn forward(&self, pose: &Tensor, bundle: &AdaptiveBundle, texture: &Tensor, mode: Mode) -> Result<BiLayerOutput> {
        let (b, d) = pose.dims2()?;
        if d != self.pose_dim {
            return Err(shape_err!("pose vector has {d} values, generator expects {}", self.pose_dim));
        }
        let mut h = pose.clone();
        for (i, l) in self.mlp.iter().enumerate() {
            h = l.forward(&h, mode)?;
            if i + 1 < self.mlp.len() {
                h = leaky_relu(&h)?;
            }
        }
        let mut x = h.reshape((b, self.input_channels, 4, 4))?;
        for (blk, p) in self.blocks.iter().zip(&bundle.blocks) {
            x = blk.forward(&x, p, mode)?;
        }
        let x = leaky_relu(&self.head_norm.forward(&x, mode)?)?;
        let x_lf = self.lf_head.forward(&x, mode)?;
        let mask_logits = self.mask_head.forward(&x, mode)?;
        let field = WarpField::from_delta(self.warp_head.forward(&x, mode)?)?;
        let x_hf = warp(texture, &field)?;
        Ok(BiLayerOutput {
            x_lf,
            x_hf,
            warp: field,
            mask_logits,
        })
    }
}
