//! Multiply-accumulate accounting of the per-frame path.
//!
//! Rules: a `k×k` convolution costs `k²·C_in·C_out·H_out·W_out`, a linear
//! layer `in·out`, a per-channel scale-and-shift one MAC per output element.
//! Activations, residual additions and nearest upsampling are free. Bilinear
//! texture sampling (4 taps per output value) is reported next to the total
//! but not in it. Everything done once per avatar (embedder, texture
//! generator, parameter prediction, enhancement) is excluded.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::Serialize;

use super::folded::FoldedGenerator;
use crate::error::Result;
use crate::nets::ModelConfig;
use crate::tensor::DEVICE;

/// Headline figure of the medium full-scale generator, for comparison only.
pub const REFERENCE_MEDIUM_GMACS: f64 = 4.32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Conv { kernel: usize },
    ScaleShift,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerMacs {
    pub name: String,
    pub kind: LayerKind,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacReport {
    pub layers: Vec<LayerMacs>,
    pub total: u64,
    pub by_block: BTreeMap<String, u64>,
    /// Bilinear texture sampling, outside `total`.
    pub sampling_macs: u64,
    pub init_excluded: bool,
    pub notes: Vec<String>,
}

fn block_of(name: &str) -> String {
    let head = name.split('.').next().unwrap_or(name);
    if head.starts_with("mlp") {
        "mlp".into()
    } else if head.starts_with("block") {
        head.into()
    } else {
        "heads".into()
    }
}

impl MacReport {
    pub fn new(layers: Vec<LayerMacs>, sampling_macs: u64) -> Self {
        let mut by_block = BTreeMap::new();
        for l in &layers {
            *by_block.entry(block_of(&l.name)).or_insert(0) += l.macs;
        }
        MacReport {
            total: layers.iter().map(|l| l.macs).sum(),
            layers,
            by_block,
            sampling_macs,
            init_excluded: true,
            notes: vec![
                "pose-vector MLP included in the total".into(),
                "bilinear texture sampling reported separately, not in the total".into(),
            ],
        }
    }

    pub fn gmacs(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

/// Records layer costs from the shapes seen during a forward pass.
#[derive(Debug, Default)]
pub struct MacCounter {
    layers: Vec<LayerMacs>,
    sampling: u64,
}

impl MacCounter {
    /// `input` and `output` are per-sample shapes (batch dimension removed).
    pub fn record(&mut self, name: &str, kind: LayerKind, input: &[usize], output: &[usize]) {
        let out: u64 = output.iter().map(|d| *d as u64).product();
        let macs = match kind {
            LayerKind::Linear => input[0] as u64 * out,
            LayerKind::Conv { kernel } => (kernel * kernel) as u64 * input[0] as u64 * out,
            LayerKind::ScaleShift => out,
        };
        self.layers.push(LayerMacs {
            name: name.to_string(),
            kind,
            macs,
        });
    }

    pub fn record_sampling(&mut self, _texture: &[usize], output: &[usize]) {
        self.sampling += 4 * output.iter().map(|d| *d as u64).product::<u64>();
    }

    pub fn report(self) -> MacReport {
        MacReport::new(self.layers, self.sampling)
    }
}

/// Cost of the per-frame path derived from the configuration alone.
pub fn count_macs(cfg: &ModelConfig) -> MacReport {
    let mut layers = Vec::new();
    let mut push = |name: String, kind, macs: u64| layers.push(LayerMacs { name, kind, macs });
    let sched = cfg.inf_blocks();
    let c0 = sched[0].input as u64;
    let mut d = cfg.pose_dim() as u64;
    for i in 0..cfg.mlp_layers {
        let out = if i + 1 == cfg.mlp_layers { c0 * 16 } else { cfg.mlp_width as u64 };
        push(format!("mlp{i}"), LayerKind::Linear, d * out);
        d = out;
    }
    let mut side = 4u64;
    for (i, b) in sched.iter().enumerate() {
        let (cin, cout) = (b.input as u64, b.output as u64);
        let p = format!("block{}", i + 1);
        let lo = side * side;
        let hi = 4 * lo;
        push(format!("{p}.norm1"), LayerKind::ScaleShift, cin * lo);
        push(format!("{p}.conv1"), LayerKind::Conv { kernel: 3 }, 9 * cin * cout * lo);
        push(format!("{p}.norm2"), LayerKind::ScaleShift, cout * hi);
        push(format!("{p}.conv2"), LayerKind::Conv { kernel: 3 }, 9 * cout * cout * hi);
        push(format!("{p}.skip"), LayerKind::Conv { kernel: 1 }, cin * cout * lo);
        side *= 2;
    }
    let last = sched.last().expect("at least one block").output as u64;
    let px = side * side;
    push("head_norm".into(), LayerKind::ScaleShift, last * px);
    for (name, out) in [("lf_head", 3), ("mask_head", 1), ("warp_head", 2)] {
        push(name.into(), LayerKind::Conv { kernel: 3 }, 9 * last * out * px);
    }
    MacReport::new(layers, 4 * 3 * px)
}

/// Cost measured by running one frame through a folded generator.
pub fn count_macs_traced(gen: &FoldedGenerator, texture: &Tensor) -> Result<MacReport> {
    let pose = Tensor::zeros((1, gen.pose_dim()), texture.dtype(), &DEVICE)?;
    let mut counter = MacCounter::default();
    gen.forward_counted(&pose, texture, Some(&mut counter))?;
    Ok(counter.report())
}

/// Folded generator of an untrained model with random avatar parameters, for
/// profiling configurations without a checkpoint. Embeddings are 8×8 maps.
pub fn untrained_generator(cfg: &ModelConfig, seed: u64) -> Result<(FoldedGenerator, Tensor)> {
    use crate::nets::{InferenceGenerator, Mode, ParamStore};
    cfg.validate()?;
    let store = ParamStore::new(seed, DType::F32);
    let gen = InferenceGenerator::new(&store.root(), cfg)?;
    let stack = cfg
        .embedding_channels()
        .into_iter()
        .map(|c| Ok(Tensor::randn(0f32, 1.0, (1, c, 8, 8), &DEVICE)?))
        .collect::<Result<Vec<_>>>()?;
    let bundle = gen.predict(&stack, Mode::Eval)?;
    let folded = super::folded::fold_adaptive(&gen, &bundle)?;
    let t = cfg.texture_size();
    let texture = Tensor::zeros((1, 3, t, t), DType::F32, &DEVICE)?;
    Ok((folded, texture))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Capacity;

    #[test]
    fn single_layer_rules() {
        let mut c = MacCounter::default();
        c.record("a", LayerKind::Conv { kernel: 1 }, &[32, 16, 16], &[32, 16, 16]);
        c.record("b", LayerKind::Conv { kernel: 3 }, &[4, 8, 8], &[5, 8, 8]);
        c.record("c", LayerKind::Linear, &[136], &[256]);
        c.record("d", LayerKind::ScaleShift, &[7, 4, 4], &[7, 4, 4]);
        c.record_sampling(&[3, 64, 64], &[3, 64, 64]);
        let r = c.report();
        let macs: Vec<u64> = r.layers.iter().map(|l| l.macs).collect();
        assert_eq!(macs, vec![262_144, 9 * 4 * 5 * 64, 136 * 256, 112]);
        assert_eq!(r.total, macs.iter().sum::<u64>());
        assert_eq!(r.sampling_macs, 4 * 3 * 64 * 64);
    }

    #[test]
    fn analytic_and_traced_agree() {
        for cfg in [ModelConfig::tiny(), ModelConfig::toy()] {
            let a = count_macs(&cfg);
            let (g, tex) = untrained_generator(&cfg, 3).unwrap();
            let b = count_macs_traced(&g, &tex).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.total, a.layers.iter().map(|l| l.macs).sum::<u64>());
            assert_eq!(a.total, a.by_block.values().sum::<u64>());
        }
    }

    #[test]
    fn capacities_are_ordered() {
        let t = |c| count_macs(&ModelConfig::paper(c)).total;
        assert!(t(Capacity::Small) < t(Capacity::Medium));
        assert!(t(Capacity::Medium) < t(Capacity::Large));
    }
}
