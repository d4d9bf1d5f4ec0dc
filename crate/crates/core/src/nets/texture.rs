use candle_core::{Tensor, Var};

use super::adaptive::{AdaSpade, AdaptiveConv, PredictorSpec};
use super::config::ModelConfig;
use super::layers::{BatchNorm, Conv2d};
use super::store::{Init, Scope};
use super::Mode;
use crate::error::{shape_err, Result};
use crate::tensor::{leaky_relu, upsample_nearest};

#[derive(Debug, Clone)]
pub enum TexNorm {
    Plain(BatchNorm),
    Spade(AdaSpade),
}

#[derive(Debug, Clone)]
pub struct TexBlock {
    pub norm1: TexNorm,
    pub conv1: Conv2d,
    pub norm2: AdaSpade,
    pub conv2: Conv2d,
    pub skip: AdaptiveConv,
}

impl TexBlock {
    fn forward(&self, x: &Tensor, e: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = match &self.norm1 {
            TexNorm::Plain(bn) => bn.forward(x, mode)?,
            TexNorm::Spade(s) => s.forward(x, e, mode)?,
        };
        let h = upsample_nearest(&leaky_relu(&h)?, 2)?;
        let h = self.conv1.forward(&h, mode)?;
        let h = leaky_relu(&self.norm2.forward(&h, e, mode)?)?;
        let h = self.conv2.forward(&h, mode)?;
        let s = upsample_nearest(&self.skip.predict(e, mode)?.apply(x)?, 2)?;
        Ok((h + s)?)
    }
}

/// Decodes the embeddings into a texture, starting from a learned 4×4 tensor.
#[derive(Debug, Clone)]
pub struct TextureGenerator {
    pub input: Var,
    pub blocks: Vec<TexBlock>,
    pub head_norm: BatchNorm,
    pub head: Conv2d,
    embed_channels: Vec<usize>,
}

impl TextureGenerator {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let sched = cfg.tex_blocks();
        let input = scope.param("input", (1, sched[0].input, 4, 4), Init::Normal(1.0))?;
        let mut blocks = Vec::new();
        for (i, b) in sched.iter().enumerate() {
            let s = scope.sub(format!("block{}", i + 1));
            let res = 4 << i;
            let spec = PredictorSpec {
                embed_channels: b.input,
                size: cfg.tex_predictor_size,
                cols: cfg.tex_predictor_cols,
                rank: cfg.predictor_rank,
            };
            let norm1 = if i == 0 {
                TexNorm::Plain(BatchNorm::new(&s.sub("norm1"), b.input)?)
            } else {
                TexNorm::Spade(AdaSpade::new(&s.sub("norm1"), spec, b.input, res)?)
            };
            blocks.push(TexBlock {
                norm1,
                conv1: Conv2d::new(&s.sub("conv1"), b.input, b.output, 3)?,
                norm2: AdaSpade::new(&s.sub("norm2"), spec, b.output, 2 * res)?,
                conv2: Conv2d::new(&s.sub("conv2"), b.output, b.output, 3)?,
                skip: AdaptiveConv::new(&s.sub("skip"), spec, b.input, b.output)?,
            });
        }
        let last = sched.last().expect("at least one block").output;
        Ok(TextureGenerator {
            input,
            blocks,
            head_norm: BatchNorm::new(&scope.sub("head_norm"), last)?,
            head: Conv2d::new(&scope.sub("head"), last, 3, 3)?,
            embed_channels: cfg.embedding_channels(),
        })
    }

    /// `(B, 3, T, T)` texture from a stack of `K` embeddings.
    pub fn forward(&self, stack: &[Tensor], mode: Mode) -> Result<Tensor> {
        check_stack(stack, &self.embed_channels)?;
        let b = stack[0].dim(0)?;
        let inp = self.input.as_tensor();
        let mut x = inp.broadcast_as((b, inp.dim(1)?, 4, 4))?.contiguous()?;
        for (blk, e) in self.blocks.iter().zip(stack) {
            x = blk.forward(&x, e, mode)?;
        }
        let x = leaky_relu(&self.head_norm.forward(&x, mode)?)?;
        self.head.forward(&x, mode)
    }
}

/// Every generator block is driven by exactly one embedding of the expected width.
pub fn check_stack(stack: &[Tensor], channels: &[usize]) -> Result<()> {
    if stack.len() != channels.len() {
        return Err(shape_err!("expected {} embeddings, got {}", channels.len(), stack.len()));
    }
    for (k, (e, c)) in stack.iter().zip(channels).enumerate() {
        let (_, ec, h, w) = e.dims4()?;
        if ec != *c || h != 8 || w != 8 {
            return Err(shape_err!("embedding {} is {:?}, expected ({c}, 8, 8)", k + 1, e.dims()));
        }
    }
    Ok(())
}
