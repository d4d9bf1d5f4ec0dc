//! Learned gradient descent on the texture: an updater network repeatedly
//! refines the texture from the gradient of a cheap source-reconstruction
//! loss.

use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::geometry::bilinear_sample;
use crate::nets::{BiLayerOutput, Mode, TextureUpdater};
use crate::tensor::{ensure_same_shape, scalar};

/// Default number of unrolled updater steps.
pub const DEFAULT_UNROLL: usize = 4;

/// Frozen pieces of the source reconstruction: the low-frequency layer and
/// the sampling grid predicted for the source pose, and the source frame.
#[derive(Debug, Clone)]
pub struct GuideContext {
    x_lf: Tensor,
    grid: Tensor,
    source: Tensor,
}

impl GuideContext {
    pub fn new(source_output: &BiLayerOutput, source: &Tensor) -> Result<Self> {
        ensure_same_shape(&source_output.x_lf, source, "guide source")?;
        Ok(GuideContext {
            x_lf: source_output.x_lf.detach(),
            grid: source_output.warp.grid()?.detach(),
            source: source.detach(),
        })
    }

    /// Source reconstruction with a given texture.
    pub fn reconstruct(&self, texture: &Tensor) -> Result<Tensor> {
        Ok((&self.x_lf + bilinear_sample(texture, &self.grid)?)?)
    }
}

/// Sum of squared errors of the source reconstruction and its gradient with
/// respect to the texture, both detached from any graph.
pub fn guide_loss(ctx: &GuideContext, texture: &Tensor) -> Result<(f64, Tensor)> {
    let var = Var::from_tensor(&texture.detach())?;
    let loss = (ctx.reconstruct(var.as_tensor())? - &ctx.source)?.sqr()?.sum_all()?;
    let grads = loss.backward()?;
    let grad = match grads.get(var.as_tensor()) {
        Some(g) => g.detach(),
        None => texture.zeros_like()?,
    };
    Ok((scalar(&loss)?, grad))
}

/// Textures and guide losses of one enhancement run; `textures[0]` is the
/// generator's texture.
#[derive(Debug, Clone)]
pub struct EnhancementTrace {
    pub textures: Vec<Tensor>,
    pub guide_losses: Vec<f64>,
}

impl EnhancementTrace {
    pub fn steps(&self) -> usize {
        self.textures.len() - 1
    }

    pub fn last(&self) -> &Tensor {
        self.textures.last().expect("trace holds the initial texture")
    }
}

/// Run `steps` updater iterations `X ← X + G(X, ∂L/∂X)`. The textures keep
/// their graph through the updater so a loss on the last one trains it.
pub fn enhance_texture(
    updater: &TextureUpdater,
    ctx: &GuideContext,
    texture: &Tensor,
    steps: usize,
    mode: Mode,
) -> Result<EnhancementTrace> {
    let mut textures = vec![texture.clone()];
    let mut guide_losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let x = textures.last().expect("nonempty");
        let (l, g) = guide_loss(ctx, x)?;
        guide_losses.push(l);
        let next = (x + updater.forward(x, &g, mode)?)?;
        textures.push(next);
    }
    guide_losses.push(guide_loss(ctx, textures.last().expect("nonempty"))?.0);
    Ok(EnhancementTrace {
        textures,
        guide_losses,
    })
}
