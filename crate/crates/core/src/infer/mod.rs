//! Avatar creation, folding, driving, profiling and serialization.

pub mod container;
mod folded;
mod macs;

pub use folded::{fold_adaptive, ConvW, FoldedBlock, FoldedGenerator, LinearW, ScaleShift};
pub use macs::{
    count_macs, count_macs_traced, untrained_generator, LayerKind, LayerMacs, MacCounter, MacReport,
    REFERENCE_MEDIUM_GMACS,
};

use std::path::Path;

use candle_core::{DType, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::KeypointSet;
use crate::error::{Error, Result};
use crate::lgd::{enhance_texture, GuideContext};
use crate::nets::{BiLayerOutput, Mode, Model, ModelConfig};
use crate::tensor::{sigmoid, DEVICE};
use crate::train::Encoder;
use container::{Storage, AVATAR_MAGIC};

/// Stable identifier of a model configuration.
pub fn fingerprint(cfg: &ModelConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Where an avatar came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub video_id: Option<String>,
    pub frame: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvatarMeta {
    pub model: ModelConfig,
    pub fingerprint: String,
    /// Updater steps applied to the texture.
    pub enhance_steps: usize,
    /// Output frames are multiplied by the predicted foreground mask.
    pub masked_output: bool,
    pub source: SourceInfo,
    #[serde(default)]
    pub run: serde_json::Value,
}

/// Everything needed to drive one person; immutable after creation.
#[derive(Debug, Clone)]
pub struct AvatarState {
    generator: FoldedGenerator,
    texture: Tensor,
    meta: AvatarMeta,
}

/// One driven frame.
#[derive(Debug, Clone)]
pub struct DriveOutput {
    /// `(3, H, W)` in `[-1, 1]` (unclamped).
    pub frame: Tensor,
    /// `(1, H, W)` foreground probability.
    pub mask: Tensor,
    pub layers: Option<Layers>,
}

/// Decomposition of a driven frame.
#[derive(Debug, Clone)]
pub struct Layers {
    pub low_frequency: Tensor,
    pub high_frequency: Tensor,
    /// `(2, H, W)` sampling coordinates in `[-1, 1]`.
    pub warp: Tensor,
}

/// Options of [`create_avatar`].
#[derive(Debug, Clone, Default)]
pub struct CreateOptions {
    /// Run the updater this many steps on the source frame; 0 disables it.
    pub enhance_steps: usize,
    pub masked_output: bool,
    pub source: SourceInfo,
    pub run: serde_json::Value,
}

/// Embed a source frame, generate and optionally enhance its texture, and
/// fold the avatar's parameters into the inference generator.
pub fn create_avatar(model: &Model, frame: &RgbImage, kps: &KeypointSet, opts: &CreateOptions) -> Result<AvatarState> {
    let cfg = &model.cfg;
    kps.expect_len(cfg.n_points)?;
    let enc = Encoder::new(cfg.n_points, cfg.image_size, model.dtype());
    let (w, h) = frame.dimensions();
    if w as usize != cfg.image_size || h as usize != cfg.image_size {
        return Err(Error::Shape(format!(
            "source frame is {w}x{h}, the model expects {0}x{0}",
            cfg.image_size
        )));
    }
    let source = crate::tensor::rgb_to_tensor(frame, model.dtype())?.unsqueeze(0)?;
    let lm = enc.landmarks(kps)?.unsqueeze(0)?;
    let init = model.init_avatar(&source, &lm, Mode::Eval)?;
    let mut texture = init.texture.detach();
    if opts.enhance_steps > 0 {
        let pose = enc.poses(&[kps])?;
        let out = model.inference.forward(&pose, &init.bundle, &texture, Mode::Eval)?;
        let ctx = GuideContext::new(&out, &source)?;
        let trace = enhance_texture(&model.updater, &ctx, &texture, opts.enhance_steps, Mode::Eval)?;
        texture = trace.last().detach();
    }
    Ok(AvatarState {
        generator: fold_adaptive(&model.inference, &init.bundle)?,
        texture,
        meta: AvatarMeta {
            model: cfg.clone(),
            fingerprint: fingerprint(cfg),
            enhance_steps: opts.enhance_steps,
            masked_output: opts.masked_output,
            source: opts.source.clone(),
            run: opts.run.clone(),
        },
    })
}

impl AvatarState {
    pub fn meta(&self) -> &AvatarMeta {
        &self.meta
    }

    pub fn generator(&self) -> &FoldedGenerator {
        &self.generator
    }

    /// `(1, 3, T, T)`
    pub fn texture(&self) -> &Tensor {
        &self.texture
    }

    /// Same generator with another texture; used for baselines.
    pub fn with_texture(&self, texture: Tensor) -> Result<Self> {
        if texture.dims() != self.texture.dims() {
            return Err(Error::Shape(format!(
                "texture {:?} does not match {:?}",
                texture.dims(),
                self.texture.dims()
            )));
        }
        Ok(AvatarState {
            texture,
            ..self.clone()
        })
    }

    /// Raw bi-layer output for a batch of keypoint sets.
    pub fn forward(&self, kps: &[&KeypointSet]) -> Result<BiLayerOutput> {
        for k in kps {
            k.expect_len(self.meta.model.n_points)?;
        }
        let data: Vec<f32> = kps.iter().flat_map(|k| k.pose_vector()).collect();
        let pose = Tensor::from_vec(data, (kps.len(), self.generator.pose_dim()), &DEVICE)?
            .to_dtype(self.texture.dtype())?;
        self.generator.forward(&pose, &self.texture)
    }

    /// Synthesize the frame for one keypoint set.
    pub fn drive(&self, kps: &KeypointSet, with_layers: bool) -> Result<DriveOutput> {
        let out = self.forward(&[kps])?;
        let mask = sigmoid(&out.mask_logits)?;
        let mut frame = out.image()?;
        if self.meta.masked_output {
            frame = frame.broadcast_mul(&mask)?;
        }
        let layers = if with_layers {
            Some(Layers {
                low_frequency: out.x_lf.get(0)?,
                high_frequency: out.x_hf.get(0)?,
                warp: out.warp.grid()?.get(0)?,
            })
        } else {
            None
        };
        Ok(DriveOutput {
            frame: frame.get(0)?,
            mask: mask.get(0)?,
            layers,
        })
    }

    pub fn count_macs(&self) -> Result<MacReport> {
        count_macs_traced(&self.generator, &self.texture)
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut t: Vec<(String, Tensor)> = self
            .generator
            .named_tensors()
            .into_iter()
            .map(|(k, v)| (format!("gen/{k}"), v))
            .collect();
        t.push(("texture".into(), self.texture.clone()));
        t
    }

    pub fn to_bytes(&self, storage: Storage) -> Result<Vec<u8>> {
        let meta = serde_json::json!({
            "kind": "avatar",
            "storage": match storage { Storage::F32 => "f32", Storage::F16 => "f16" },
            "avatar": self.meta,
        });
        container::encode(AVATAR_MAGIC, &meta, &self.tensors(), storage)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let d = container::decode(bytes, AVATAR_MAGIC)?;
        if d.meta.get("kind").and_then(|k| k.as_str()) != Some("avatar") {
            return Err(Error::Format("metadata does not describe an avatar".into()));
        }
        let meta: AvatarMeta = serde_json::from_value(d.meta["avatar"].clone())
            .map_err(|e| Error::Format(format!("avatar metadata: {e}")))?;
        if meta.fingerprint != fingerprint(&meta.model) {
            return Err(Error::Format("avatar fingerprint does not match its model configuration".into()));
        }
        let gen_tensors = d
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("gen/").map(|k| (k.to_string(), v.clone())))
            .collect();
        let generator = FoldedGenerator::from_named(&gen_tensors, meta.model.mlp_layers, meta.model.n_blocks)?;
        let texture = d
            .tensors
            .get("texture")
            .cloned()
            .ok_or_else(|| Error::Format("avatar lacks its texture".into()))?;
        let t = meta.model.texture_size();
        if texture.dims() != [1, 3, t, t] || generator.pose_dim() != meta.model.pose_dim() {
            return Err(Error::Format("avatar tensors do not match its model configuration".into()));
        }
        Ok(AvatarState {
            generator,
            texture: texture.to_dtype(DType::F32)?,
            meta,
        })
    }

    pub fn save(&self, path: &Path, storage: Storage) -> Result<()> {
        let bytes = self.to_bytes(storage)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests;
