//! Inference generator with the avatar's adaptive parameters and the frozen
//! batch statistics merged into plain layers.

use std::collections::BTreeMap;

use candle_core::Tensor;

use super::macs::{LayerKind, MacCounter};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{warp, WarpField};
use crate::nets::inference::InfNorm;
use crate::nets::layers::{conv2d, linear, BN_EPS};
use crate::nets::{AdaptiveBundle, BatchNorm, BiLayerOutput, InferenceGenerator, Mode, Modulation};
use crate::tensor::{leaky_relu, upsample_nearest};

/// Per-channel `x · scale + shift`.
#[derive(Debug, Clone)]
pub struct ScaleShift {
    /// `(C)`
    pub scale: Tensor,
    pub shift: Tensor,
}

impl ScaleShift {
    /// Frozen batch norm, optionally followed by a modulation of avatar 0.
    fn fold(bn: &BatchNorm, modulation: Option<&Modulation>) -> Result<Self> {
        let (mean, var) = bn.eval_stats()?;
        let inv = (var + BN_EPS)?.sqrt()?.recip()?;
        let (scale, shift) = match modulation {
            Some(m) => {
                let g = (m.gamma.get(0)? + 1.0)?;
                let b = m.beta.get(0)?;
                let scale = (&inv * &g)?;
                let shift = (b - (&mean * &scale)?)?;
                (scale, shift)
            }
            None => {
                let shift = (&mean * &inv)?.neg()?;
                (inv, shift)
            }
        };
        Ok(ScaleShift {
            scale: scale.detach(),
            shift: shift.detach(),
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.dim(0).unwrap_or(0)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.scale.reshape((1, (), 1, 1))?;
        let b = self.shift.reshape((1, (), 1, 1))?;
        Ok(x.broadcast_mul(&s)?.broadcast_add(&b)?)
    }
}

/// Static convolution weights.
#[derive(Debug, Clone)]
pub struct ConvW {
    /// `(out, in, k, k)`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvW {
    pub fn kernel(&self) -> usize {
        self.weight.dim(3).unwrap_or(0)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, &self.bias, self.kernel() / 2)
    }
}

#[derive(Debug, Clone)]
pub struct LinearW {
    /// `(out, in)`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct FoldedBlock {
    pub norm1: ScaleShift,
    pub conv1: ConvW,
    pub norm2: ScaleShift,
    pub conv2: ConvW,
    pub skip: ConvW,
}

/// Inference generator of one avatar with nothing left to predict.
#[derive(Debug, Clone)]
pub struct FoldedGenerator {
    pub mlp: Vec<LinearW>,
    pub blocks: Vec<FoldedBlock>,
    pub head_norm: ScaleShift,
    pub lf_head: ConvW,
    pub mask_head: ConvW,
    pub warp_head: ConvW,
    pub input_channels: usize,
}

fn conv_w(c: &crate::nets::Conv2d) -> Result<ConvW> {
    Ok(ConvW {
        weight: c.effective_weight(Mode::Eval)?.detach(),
        bias: c.bias.as_tensor().detach(),
    })
}

/// Merge the first avatar of `bundle` into the generator's layers.
pub fn fold_adaptive(gen: &InferenceGenerator, bundle: &AdaptiveBundle) -> Result<FoldedGenerator> {
    if bundle.blocks.len() != gen.blocks.len() {
        return Err(Error::Shape(format!(
            "adaptive bundle has {} block entries, generator has {} blocks",
            bundle.blocks.len(),
            gen.blocks.len()
        )));
    }
    let mut blocks = Vec::with_capacity(gen.blocks.len());
    for (i, (b, p)) in gen.blocks.iter().zip(&bundle.blocks).enumerate() {
        let norm1 = match (&b.norm1, &p.norm1) {
            (InfNorm::Plain(bn), None) => ScaleShift::fold(bn, None)?,
            (InfNorm::Ada(a), Some(m)) => ScaleShift::fold(&a.bn, Some(m))?,
            (InfNorm::Ada(_), None) => {
                return Err(Error::Shape(format!("adaptive bundle lacks the first norm of block {i}")))
            }
            (InfNorm::Plain(_), Some(_)) => {
                return Err(Error::Shape(format!("block {i} has no adaptive first norm")))
            }
        };
        let (out, inp) = (p.skip.weight.dim(1)?, p.skip.weight.dim(2)?);
        blocks.push(FoldedBlock {
            norm1,
            conv1: conv_w(&b.conv1)?,
            norm2: ScaleShift::fold(&b.norm2.bn, Some(&p.norm2))?,
            conv2: conv_w(&b.conv2)?,
            skip: ConvW {
                weight: p.skip.weight.get(0)?.reshape((out, inp, 1, 1))?.detach(),
                bias: p.skip.bias.get(0)?.detach(),
            },
        });
    }
    let mlp = gen
        .mlp
        .iter()
        .map(|l| {
            Ok(LinearW {
                weight: l.effective_weight(Mode::Eval)?.detach(),
                bias: l.bias.as_tensor().detach(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldedGenerator {
        mlp,
        blocks,
        head_norm: ScaleShift::fold(&gen.head_norm, None)?,
        lf_head: conv_w(&gen.lf_head)?,
        mask_head: conv_w(&gen.mask_head)?,
        warp_head: conv_w(&gen.warp_head)?,
        input_channels: gen.input_channels,
    })
}

fn count(counter: &mut Option<&mut MacCounter>, name: &str, kind: LayerKind, shape_in: &[usize], shape_out: &[usize]) {
    if let Some(c) = counter.as_deref_mut() {
        c.record(name, kind, shape_in, shape_out);
    }
}

impl FoldedGenerator {
    pub fn pose_dim(&self) -> usize {
        self.mlp.first().and_then(|l| l.weight.dim(1).ok()).unwrap_or(0)
    }

    pub fn output_size(&self) -> usize {
        4 << self.blocks.len()
    }

    /// `(B, 2N)` poses to the bi-layer output with a `(1, 3, T, T)` texture.
    pub fn forward(&self, pose: &Tensor, texture: &Tensor) -> Result<BiLayerOutput> {
        self.forward_counted(pose, texture, None)
    }

    /// Forward pass that reports every layer it runs to `counter`.
    pub fn forward_counted(
        &self,
        pose: &Tensor,
        texture: &Tensor,
        mut counter: Option<&mut MacCounter>,
    ) -> Result<BiLayerOutput> {
        let (b, d) = pose.dims2()?;
        if d != self.pose_dim() {
            return Err(shape_err!("pose vector has {d} values, avatar expects {}", self.pose_dim()));
        }
        let mut h = pose.clone();
        for (i, l) in self.mlp.iter().enumerate() {
            let y = linear(&h, &l.weight, &l.bias)?;
            count(&mut counter, &format!("mlp{i}"), LayerKind::Linear, &h.dims()[1..], &y.dims()[1..]);
            h = if i + 1 < self.mlp.len() { leaky_relu(&y)? } else { y };
        }
        let mut x = h.reshape((b, self.input_channels, 4, 4))?;
        for (i, blk) in self.blocks.iter().enumerate() {
            let name = |part: &str| format!("block{}.{part}", i + 1);
            let h = blk.norm1.forward(&x)?;
            count(&mut counter, &name("norm1"), LayerKind::ScaleShift, &x.dims()[1..], &h.dims()[1..]);
            let a = leaky_relu(&h)?;
            let h = blk.conv1.forward(&a)?;
            count(&mut counter, &name("conv1"), conv_kind(&blk.conv1), &a.dims()[1..], &h.dims()[1..]);
            let u = upsample_nearest(&h, 2)?;
            let h = blk.norm2.forward(&u)?;
            count(&mut counter, &name("norm2"), LayerKind::ScaleShift, &u.dims()[1..], &h.dims()[1..]);
            let a = leaky_relu(&h)?;
            let h = blk.conv2.forward(&a)?;
            count(&mut counter, &name("conv2"), conv_kind(&blk.conv2), &a.dims()[1..], &h.dims()[1..]);
            let s = blk.skip.forward(&x)?;
            count(&mut counter, &name("skip"), conv_kind(&blk.skip), &x.dims()[1..], &s.dims()[1..]);
            x = (h + upsample_nearest(&s, 2)?)?;
        }
        let n = self.head_norm.forward(&x)?;
        count(&mut counter, "head_norm", LayerKind::ScaleShift, &x.dims()[1..], &n.dims()[1..]);
        let x = leaky_relu(&n)?;
        let mut head = |name: &str, c: &ConvW| -> Result<Tensor> {
            let y = c.forward(&x)?;
            count(&mut counter, name, conv_kind(c), &x.dims()[1..], &y.dims()[1..]);
            Ok(y)
        };
        let x_lf = head("lf_head", &self.lf_head)?;
        let mask_logits = head("mask_head", &self.mask_head)?;
        let field = WarpField::from_delta(head("warp_head", &self.warp_head)?)?;
        let x_hf = warp(texture, &field)?;
        if let Some(c) = counter.as_deref_mut() {
            c.record_sampling(&texture.dims()[1..], &x_hf.dims()[1..]);
        }
        Ok(BiLayerOutput {
            x_lf,
            x_hf,
            warp: field,
            mask_logits,
        })
    }

    /// Every tensor under a stable name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.mlp.iter().enumerate() {
            out.push((format!("mlp{i}.weight"), l.weight.clone()));
            out.push((format!("mlp{i}.bias"), l.bias.clone()));
        }
        let ss = |out: &mut Vec<(String, Tensor)>, p: &str, s: &ScaleShift| {
            out.push((format!("{p}.scale"), s.scale.clone()));
            out.push((format!("{p}.shift"), s.shift.clone()));
        };
        let cw = |out: &mut Vec<(String, Tensor)>, p: &str, c: &ConvW| {
            out.push((format!("{p}.weight"), c.weight.clone()));
            out.push((format!("{p}.bias"), c.bias.clone()));
        };
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{}", i + 1);
            ss(&mut out, &format!("{p}.norm1"), &b.norm1);
            cw(&mut out, &format!("{p}.conv1"), &b.conv1);
            ss(&mut out, &format!("{p}.norm2"), &b.norm2);
            cw(&mut out, &format!("{p}.conv2"), &b.conv2);
            cw(&mut out, &format!("{p}.skip"), &b.skip);
        }
        ss(&mut out, "head_norm", &self.head_norm);
        cw(&mut out, "lf_head", &self.lf_head);
        cw(&mut out, "mask_head", &self.mask_head);
        cw(&mut out, "warp_head", &self.warp_head);
        out
    }

    /// Rebuild from [`FoldedGenerator::named_tensors`] output.
    pub fn from_named(t: &BTreeMap<String, Tensor>, n_mlp: usize, n_blocks: usize) -> Result<Self> {
        let get = |k: &str| -> Result<Tensor> {
            t.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("avatar lacks tensor {k}")))
        };
        let ss = |p: &str| -> Result<ScaleShift> {
            Ok(ScaleShift {
                scale: get(&format!("{p}.scale"))?,
                shift: get(&format!("{p}.shift"))?,
            })
        };
        let cw = |p: &str| -> Result<ConvW> {
            let c = ConvW {
                weight: get(&format!("{p}.weight"))?,
                bias: get(&format!("{p}.bias"))?,
            };
            if c.weight.rank() != 4 || c.bias.dims() != [c.weight.dim(0)?] {
                return Err(Error::Format(format!("{p} has malformed convolution weights")));
            }
            Ok(c)
        };
        let mlp = (0..n_mlp)
            .map(|i| {
                Ok(LinearW {
                    weight: get(&format!("mlp{i}.weight"))?,
                    bias: get(&format!("mlp{i}.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let blocks = (1..=n_blocks)
            .map(|i| {
                let p = format!("block{i}");
                Ok(FoldedBlock {
                    norm1: ss(&format!("{p}.norm1"))?,
                    conv1: cw(&format!("{p}.conv1"))?,
                    norm2: ss(&format!("{p}.norm2"))?,
                    conv2: cw(&format!("{p}.conv2"))?,
                    skip: cw(&format!("{p}.skip"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let input_channels = blocks
            .first()
            .map(|b| b.norm1.channels())
            .ok_or_else(|| Error::Format("avatar has no generator blocks".into()))?;
        Ok(FoldedGenerator {
            mlp,
            blocks,
            head_norm: ss("head_norm")?,
            lf_head: cw("lf_head")?,
            mask_head: cw("mask_head")?,
            warp_head: cw("warp_head")?,
            input_channels,
        })
    }
}

fn conv_kind(c: &ConvW) -> LayerKind {
    LayerKind::Conv { kernel: c.kernel() }
}
