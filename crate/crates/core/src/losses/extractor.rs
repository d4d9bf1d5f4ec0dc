//! Frozen feature pyramids for perceptual comparisons.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::nets::layers::avg_pool2;
use crate::tensor::{leaky_relu, DEVICE};

/// A network whose activations define a perceptual distance. Implementations
/// hold plain tensors, never trainable variables.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    /// Feature maps of a `(B, 3, H, W)` batch, coarsest last.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// The input itself as the only feature map.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

/// Randomly initialized convolution pyramid with a fixed seed: per level a
/// 3×3 convolution, LeakyReLU and (after the first level) 2×2 average pooling.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    name: String,
    layers: Vec<(Tensor, Tensor)>,
}

impl RandomConvExtractor {
    pub fn new(name: &str, seed: u64, widths: &[usize], dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut layers = Vec::new();
        for &cout in widths {
            let fan_in = cin * 9;
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let w: Vec<f64> = (0..cout * fan_in).map(|_| dist.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..cout).map(|_| 0.1 * dist.sample(&mut rng)).collect();
            layers.push((
                Tensor::from_vec(w, (cout, cin, 3, 3), &DEVICE)?.to_dtype(dtype)?,
                Tensor::from_vec(b, (1, cout, 1, 1), &DEVICE)?.to_dtype(dtype)?,
            ));
            cin = cout;
        }
        Ok(RandomConvExtractor {
            name: name.to_string(),
            layers,
        })
    }

    /// Stand-in for a generic image-classification network.
    pub fn general(dtype: DType) -> Result<Self> {
        Self::new("general", 0x5eed_0001, &[16, 32, 64], dtype)
    }

    /// Stand-in for a face-recognition network.
    pub fn face(dtype: DType) -> Result<Self> {
        Self::new("face", 0x5eed_0002, &[16, 24, 32, 48], dtype)
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = avg_pool2(&h)?;
            }
            h = leaky_relu(&h.conv2d(&w.to_dtype(h.dtype())?, 1, 1, 1, 1)?.broadcast_add(&b.to_dtype(h.dtype())?)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}
