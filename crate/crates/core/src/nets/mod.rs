//! Embedder, texture generator, inference generator, discriminator and
//! texture updater.

pub mod adaptive;
pub mod blocks;
pub mod config;
pub mod discriminator;
pub mod embedder;
pub mod inference;
pub mod layers;
pub mod store;
pub mod texture;
pub mod updater;

pub use adaptive::{AdaBatchNorm, AdaSpade, AdaptiveConv, ConvParams, Modulation, ParamPredictor, PredictorSpec};
pub use config::{BlockChannels, Capacity, ChannelRange, ModelConfig};
pub use discriminator::{Discriminator, ScoreMap};
pub use embedder::Embedder;
pub use inference::{AdaptiveBundle, BlockParams, InferenceGenerator};
pub use layers::{BatchNorm, Conv2d, Linear, SpectralNorm};
pub use store::{Init, ParamStore, Scope};
pub use texture::TextureGenerator;
pub use updater::TextureUpdater;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::geometry::{composite, WarpField};

/// How layers with state behave in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages and spectral-norm iterations update.
    Train,
    /// Frozen: standing (or running) statistics, no state changes.
    Eval,
    /// Batch statistics, accumulated into the standing statistics.
    Standing,
}

/// Output of the inference generator for one batch.
#[derive(Debug, Clone)]
pub struct BiLayerOutput {
    pub x_lf: Tensor,
    pub x_hf: Tensor,
    pub warp: WarpField,
    pub mask_logits: Tensor,
}

impl BiLayerOutput {
    pub fn image(&self) -> Result<Tensor> {
        composite(&self.x_lf, &self.x_hf)
    }
}

/// Per-network parameter stores.
#[derive(Debug, Clone)]
pub struct NetStores {
    pub embedder: ParamStore,
    pub texture: ParamStore,
    pub inference: ParamStore,
    pub discriminator: ParamStore,
    pub updater: ParamStore,
}

impl NetStores {
    pub fn named(&self) -> [(&'static str, &ParamStore); 5] {
        [
            ("embedder", &self.embedder),
            ("texture", &self.texture),
            ("inference", &self.inference),
            ("discriminator", &self.discriminator),
            ("updater", &self.updater),
        ]
    }

    pub fn generators(&self) -> [&ParamStore; 3] {
        [&self.embedder, &self.texture, &self.inference]
    }
}

/// All networks of the system.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub stores: NetStores,
    pub embedder: Embedder,
    pub texture: TextureGenerator,
    pub inference: InferenceGenerator,
    pub discriminator: Discriminator,
    pub updater: TextureUpdater,
}

/// Per-avatar quantities produced once from a source frame.
#[derive(Debug, Clone)]
pub struct AvatarInit {
    pub embeddings: Vec<Tensor>,
    pub texture: Tensor,
    pub bundle: AdaptiveBundle,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mk = |i: u64| ParamStore::new(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i), dtype);
        let stores = NetStores {
            embedder: mk(1),
            texture: mk(2),
            inference: mk(3),
            discriminator: mk(4),
            updater: mk(5),
        };
        Ok(Model {
            cfg: cfg.clone(),
            embedder: Embedder::new(&stores.embedder.root(), cfg)?,
            texture: TextureGenerator::new(&stores.texture.root(), cfg)?,
            inference: InferenceGenerator::new(&stores.inference.root(), cfg)?,
            discriminator: Discriminator::new(&stores.discriminator.root(), cfg)?,
            updater: TextureUpdater::new(&stores.updater.root(), cfg)?,
            stores,
        })
    }

    pub fn dtype(&self) -> DType {
        self.stores.embedder.dtype()
    }

    /// Embeddings, texture and adaptive parameters of a batch of source frames.
    pub fn init_avatar(&self, frame: &Tensor, landmarks: &Tensor, mode: Mode) -> Result<AvatarInit> {
        let embeddings = self.embedder.forward(frame, landmarks, mode)?;
        let texture = self.texture.forward(&embeddings, mode)?;
        let bundle = self.inference.predict(&embeddings, mode)?;
        Ok(AvatarInit {
            embeddings,
            texture,
            bundle,
        })
    }
}

/// Replace the standing statistics of every batch norm in `stores` by the
/// average batch statistics over `n_batches` calls of `run`, which must
/// forward the networks in [`Mode::Standing`].
pub fn compute_standing_stats(
    stores: &[&ParamStore],
    n_batches: usize,
    mut run: impl FnMut(usize) -> Result<()>,
) -> Result<()> {
    if n_batches == 0 {
        return Err(Error::Config("standing statistics need at least one batch".into()));
    }
    for s in stores {
        for (name, var) in s.buffers() {
            if name.ends_with("standing_mean") || name.ends_with("standing_var") || name.ends_with("standing_count") {
                var.set(&var.zeros_like()?)?;
            }
        }
    }
    for i in 0..n_batches {
        run(i)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
