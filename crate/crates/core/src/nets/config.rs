use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub min: usize,
    pub max: usize,
}

impl ChannelRange {
    pub const fn new(min: usize, max: usize) -> Self {
        ChannelRange { min, max }
    }

    /// `min · 2^doublings`, clamped to the range.
    pub fn at(&self, doublings: usize) -> usize {
        let c = self.min.saturating_mul(1usize.checked_shl(doublings as u32).unwrap_or(usize::MAX));
        c.clamp(self.min, self.max)
    }
}

/// Size of the inference generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capacity {
    Small,
    Medium,
    Large,
}

impl Capacity {
    pub fn channels(self) -> ChannelRange {
        match self {
            Capacity::Small => ChannelRange::new(16, 128),
            Capacity::Medium => ChannelRange::new(32, 256),
            Capacity::Large => ChannelRange::new(64, 512),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output frame and texture side length, `4 · 2^n_blocks`.
    pub image_size: usize,
    pub n_blocks: usize,
    pub n_points: usize,
    pub tex_channels: ChannelRange,
    pub inf_channels: ChannelRange,
    pub disc_channels: ChannelRange,
    /// Updater channels; `max` is the bottleneck width.
    pub upd_channels: ChannelRange,
    pub mlp_width: usize,
    pub mlp_layers: usize,
    /// Inner dimension of the factorized adaptive-parameter predictors.
    pub predictor_rank: usize,
    /// Side the embeddings are resized to before prediction.
    pub tex_predictor_size: usize,
    pub inf_predictor_size: usize,
    /// Row length of the flattened embedding matrix.
    pub tex_predictor_cols: usize,
    pub inf_predictor_cols: usize,
}

/// Input and output channels of one upsampling block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockChannels {
    pub input: usize,
    pub output: usize,
}

impl ModelConfig {
    /// Full-width networks at 256×256 with the given inference capacity.
    pub fn paper(capacity: Capacity) -> Self {
        ModelConfig {
            image_size: 256,
            n_blocks: 6,
            n_points: 68,
            tex_channels: ChannelRange::new(64, 512),
            inf_channels: capacity.channels(),
            disc_channels: ChannelRange::new(64, 512),
            upd_channels: ChannelRange::new(64, 128),
            mlp_width: 256,
            mlp_layers: 3,
            predictor_rank: 64,
            tex_predictor_size: 32,
            inf_predictor_size: 16,
            tex_predictor_cols: 1024,
            inf_predictor_cols: 512,
        }
    }

    /// Full-width networks at 64×64.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            n_blocks: 4,
            ..Self::paper(Capacity::Medium)
        }
    }

    /// Narrow networks at 64×64 that train on a CPU in minutes.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 64,
            n_blocks: 4,
            n_points: 68,
            tex_channels: ChannelRange::new(8, 32),
            inf_channels: ChannelRange::new(8, 32),
            disc_channels: ChannelRange::new(8, 32),
            upd_channels: ChannelRange::new(8, 16),
            mlp_width: 64,
            mlp_layers: 3,
            predictor_rank: 8,
            tex_predictor_size: 32,
            inf_predictor_size: 16,
            tex_predictor_cols: 1024,
            inf_predictor_cols: 512,
        }
    }

    /// Even smaller networks at 16×16 for unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            n_blocks: 2,
            tex_channels: ChannelRange::new(4, 8),
            inf_channels: ChannelRange::new(4, 8),
            disc_channels: ChannelRange::new(4, 8),
            upd_channels: ChannelRange::new(4, 8),
            mlp_width: 16,
            predictor_rank: 4,
            tex_predictor_size: 16,
            inf_predictor_size: 8,
            tex_predictor_cols: 256,
            inf_predictor_cols: 128,
            ..Self::toy()
        }
    }

    pub fn pose_dim(&self) -> usize {
        2 * self.n_points
    }

    pub fn texture_size(&self) -> usize {
        self.image_size
    }

    /// Downsampling blocks needed to bring the input to 8×8.
    pub fn n_down(&self) -> usize {
        (self.image_size / 8).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_blocks < 1 || self.image_size != 4 << self.n_blocks {
            return bad(format!(
                "image size {} is not 4·2^K for K = {}",
                self.image_size, self.n_blocks
            ));
        }
        if self.image_size < 16 {
            return bad("image size must be at least 16".into());
        }
        for (name, r) in [
            ("texture", self.tex_channels),
            ("inference", self.inf_channels),
            ("discriminator", self.disc_channels),
            ("updater", self.upd_channels),
        ] {
            if r.min == 0 || r.min > r.max {
                return bad(format!("{name} channel range {}..{} is invalid", r.min, r.max));
            }
        }
        if self.mlp_layers < 1 || self.mlp_width == 0 || self.predictor_rank == 0 || self.n_points == 0 {
            return bad("layer widths must be positive".into());
        }
        for (c, (size, cols)) in self.embedding_channels().into_iter().flat_map(|c| {
            [
                (c, (self.tex_predictor_size, self.tex_predictor_cols)),
                (c, (self.inf_predictor_size, self.inf_predictor_cols)),
            ]
        }) {
            if size % 8 != 0 || (c * size * size) % cols != 0 {
                return bad(format!(
                    "embedding with {c} channels at {size}x{size} cannot be split into rows of {cols}"
                ));
            }
        }
        Ok(())
    }

    fn upsampling_schedule(&self, range: ChannelRange) -> Vec<BlockChannels> {
        let k = self.n_blocks;
        (1..=k)
            .map(|b| BlockChannels {
                input: range.at(k - b + 1),
                output: range.at(k - b),
            })
            .collect()
    }

    pub fn tex_blocks(&self) -> Vec<BlockChannels> {
        self.upsampling_schedule(self.tex_channels)
    }

    pub fn inf_blocks(&self) -> Vec<BlockChannels> {
        self.upsampling_schedule(self.inf_channels)
    }

    /// Channels of each embedding, equal to the matching texture block input.
    pub fn embedding_channels(&self) -> Vec<usize> {
        self.tex_blocks().iter().map(|b| b.input).collect()
    }

    /// Output channels of the embedder's downsampling blocks.
    pub fn emb_down_channels(&self) -> Vec<usize> {
        (1..=self.n_down()).map(|j| self.tex_channels.at(j)).collect()
    }

    /// Output channels of the discriminator's downsampling blocks; the final
    /// 8×8 block keeps the last width.
    pub fn disc_down_channels(&self) -> Vec<usize> {
        (0..self.n_down()).map(|j| self.disc_channels.at(j)).collect()
    }

    /// Updater encoder widths from full resolution to the bottleneck.
    pub fn upd_levels(&self) -> Vec<usize> {
        (0..=3).map(|j| self.upd_channels.at(j)).collect()
    }
}
