use candle_core::{DType, Tensor, Var};

use super::*;
use crate::geometry::{warp, WarpField};
use crate::tensor::{to_vec_f64, DEVICE};

fn randn(shape: &[usize]) -> Tensor {
    Tensor::randn(0f32, 1., shape, &DEVICE).unwrap()
}

fn max_abs(t: &Tensor) -> f64 {
    to_vec_f64(t).unwrap().into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn finite(t: &Tensor) -> bool {
    to_vec_f64(t).unwrap().iter().all(|v| v.is_finite())
}

#[test]
fn embedder_follows_schedule_and_is_pure() {
    let cfg = ModelConfig::toy();
    let m = Model::new(&cfg, 0, DType::F32).unwrap();
    let (f, l) = (randn(&[2, 3, 64, 64]), randn(&[2, 3, 64, 64]));
    let a = m.embedder.forward(&f, &l, Mode::Eval).unwrap();
    let b = m.embedder.forward(&f, &l, Mode::Eval).unwrap();
    assert_eq!(a.len(), 4);
    let want: Vec<usize> = {
        // texture block k input width: min·2^(K-k+1) clamped
        (1..=4).map(|k| (8usize << (4 - k + 1)).min(32)).collect()
    };
    for ((x, y), c) in a.iter().zip(&b).zip(&want) {
        assert_eq!(x.dims(), &[2, *c, 8, 8]);
        assert_eq!(to_vec_f64(x).unwrap(), to_vec_f64(y).unwrap());
    }
    let z = Tensor::zeros((1, 3, 64, 64), DType::F32, &DEVICE).unwrap();
    assert!(m.embedder.forward(&z, &z, Mode::Eval).unwrap().iter().all(finite));
    assert!(m.embedder.forward(&z, &randn(&[1, 3, 32, 32]), Mode::Eval).is_err());
}

#[test]
fn embedder_has_no_batch_norm() {
    let m = Model::new(&ModelConfig::tiny(), 0, DType::F32).unwrap();
    assert!(m.stores.embedder.buffers().iter().all(|(n, _)| !n.contains("mean")));
    assert!(m.stores.updater.buffers().iter().all(|(n, _)| !n.contains("mean")));
}

#[test]
fn texture_generator_shapes_and_gradients() {
    let cfg = ModelConfig::tiny();
    let m = Model::new(&cfg, 1, DType::F32).unwrap();
    let stack_a = m.embedder.forward(&randn(&[2, 3, 16, 16]), &randn(&[2, 3, 16, 16]), Mode::Train).unwrap();
    let tex = m.texture.forward(&stack_a, Mode::Train).unwrap();
    assert_eq!(tex.dims(), &[2, 3, 16, 16]);
    let grads = tex.sqr().unwrap().sum_all().unwrap().backward().unwrap();
    let g = grads.get(m.texture.input.as_tensor()).expect("input gets a gradient");
    assert!(max_abs(g) > 0.0);

    let stack_b = m.embedder.forward(&randn(&[2, 3, 16, 16]), &randn(&[2, 3, 16, 16]), Mode::Eval).unwrap();
    let ta = m.texture.forward(&stack_a, Mode::Eval).unwrap();
    let tb = m.texture.forward(&stack_b, Mode::Eval).unwrap();
    assert!(max_abs(&(ta - tb).unwrap()) > 1e-4);
    // stack of the wrong length
    assert!(m.texture.forward(&stack_a[..1], Mode::Eval).is_err());
}

#[test]
fn inference_generator_outputs() {
    let cfg = ModelConfig::tiny();
    let m = Model::new(&cfg, 2, DType::F32).unwrap();
    let (f, l) = (randn(&[2, 3, 16, 16]), randn(&[2, 3, 16, 16]));
    let init = m.init_avatar(&f, &l, Mode::Train).unwrap();
    let pose = Tensor::rand(-1f32, 1., (2, cfg.pose_dim()), &DEVICE).unwrap();
    let out = m.inference.forward(&pose, &init.bundle, &init.texture, Mode::Train).unwrap();
    assert_eq!(out.x_lf.dims(), &[2, 3, 16, 16]);
    assert_eq!(out.warp.delta().dims(), &[2, 2, 16, 16]);
    assert_eq!(out.mask_logits.dims(), &[2, 1, 16, 16]);
    // zero warp head: the detail layer is the texture sampled at the identity
    let ident = warp(&init.texture, &WarpField::identity(2, 16, 16, DType::F32).unwrap()).unwrap();
    assert_eq!(to_vec_f64(&out.x_hf).unwrap(), to_vec_f64(&ident).unwrap());
    assert_eq!(to_vec_f64(&out.x_hf).unwrap(), to_vec_f64(&init.texture).unwrap());

    let a = m.inference.forward(&pose, &init.bundle, &init.texture, Mode::Eval).unwrap();
    let b = m.inference.forward(&pose, &init.bundle, &init.texture, Mode::Eval).unwrap();
    assert_eq!(to_vec_f64(&a.image().unwrap()).unwrap(), to_vec_f64(&b.image().unwrap()).unwrap());
    assert!(finite(&a.x_lf) && finite(&a.mask_logits));

    let bad = Tensor::zeros((2, 10), DType::F32, &DEVICE).unwrap();
    assert!(m.inference.forward(&bad, &init.bundle, &init.texture, Mode::Eval).is_err());
}

#[test]
fn discriminator_layout_at_256() {
    let cfg = ModelConfig {
        disc_channels: ChannelRange::new(4, 8),
        ..ModelConfig::paper(Capacity::Medium)
    };
    let store = ParamStore::new(0, DType::F32);
    let d = Discriminator::new(&store.root(), &cfg).unwrap();
    let s = d.forward(&randn(&[1, 3, 256, 256]), &randn(&[1, 3, 256, 256]), Mode::Train).unwrap();
    assert_eq!(s.scores.dims(), &[1, 1, 8, 8]);
    assert_eq!(s.features.len(), 6);
    let widths: Vec<usize> = s.features.iter().map(|f| f.dim(1).unwrap()).collect();
    assert_eq!(widths, vec![4, 8, 8, 8, 8, 8]);
    assert!(d.forward(&randn(&[1, 3, 128, 128]), &randn(&[1, 3, 128, 128]), Mode::Eval).is_err());
}

#[test]
fn frozen_discriminator_is_permutation_equivariant() {
    let cfg = ModelConfig::tiny();
    let m = Model::new(&cfg, 3, DType::F64).unwrap();
    let f = Tensor::randn(0f64, 1., (3, 3, 16, 16), &DEVICE).unwrap();
    let l = Tensor::randn(0f64, 1., (3, 3, 16, 16), &DEVICE).unwrap();
    // populate statistics first
    m.discriminator.forward(&f, &l, Mode::Train).unwrap();
    let perm = Tensor::new(&[2u32, 0, 1], &DEVICE).unwrap();
    let a = m.discriminator.forward(&f, &l, Mode::Eval).unwrap();
    let b = m
        .discriminator
        .forward(&f.index_select(&perm, 0).unwrap(), &l.index_select(&perm, 0).unwrap(), Mode::Eval)
        .unwrap();
    let ap = a.scores.index_select(&perm, 0).unwrap();
    assert!(max_abs(&(ap - b.scores).unwrap()) < 1e-12);
}

#[test]
fn updater_starts_at_zero_and_connects_both_inputs() {
    let cfg = ModelConfig::tiny();
    let m = Model::new(&cfg, 4, DType::F32).unwrap();
    let tex = Var::from_tensor(&randn(&[2, 3, 16, 16])).unwrap();
    let grad = Var::from_tensor(&randn(&[2, 3, 16, 16])).unwrap();
    let d = m.updater.forward(tex.as_tensor(), grad.as_tensor(), Mode::Train).unwrap();
    assert_eq!(d.dims(), &[2, 3, 16, 16]);
    assert_eq!(max_abs(&d), 0.0);
    let w = &m.updater.out.weight;
    w.set(&(randn(w.dims()) * 0.1).unwrap()).unwrap();
    let d = m.updater.forward(tex.as_tensor(), grad.as_tensor(), Mode::Train).unwrap();
    let g = d.sum_all().unwrap().backward().unwrap();
    assert!(max_abs(g.get(tex.as_tensor()).unwrap()) > 0.0);
    assert!(max_abs(g.get(grad.as_tensor()).unwrap()) > 0.0);
}

#[test]
fn forwards_are_finite_on_random_inputs() {
    let cfg = ModelConfig::toy();
    let m = Model::new(&cfg, 5, DType::F32).unwrap();
    let (f, l) = (randn(&[2, 3, 64, 64]), randn(&[2, 3, 64, 64]));
    let init = m.init_avatar(&f, &l, Mode::Train).unwrap();
    assert!(finite(&init.texture));
    let out = m
        .inference
        .forward(&randn(&[2, cfg.pose_dim()]), &init.bundle, &init.texture, Mode::Train)
        .unwrap();
    assert!(finite(&out.image().unwrap()));
    let s = m.discriminator.forward(&f, &l, Mode::Train).unwrap();
    assert!(finite(&s.scores));
    assert!(finite(&m.updater.forward(&init.texture, &init.texture, Mode::Train).unwrap()));
}

#[test]
fn standing_stats_drive_eval() {
    let cfg = ModelConfig::tiny();
    let m = Model::new(&cfg, 6, DType::F64).unwrap();
    let f = Tensor::randn(0f64, 1., (2, 3, 16, 16), &DEVICE).unwrap();
    let l = Tensor::randn(0f64, 1., (2, 3, 16, 16), &DEVICE).unwrap();
    assert!(matches!(
        compute_standing_stats(&[&m.stores.texture], 0, |_| Ok(())),
        Err(crate::Error::Config(_))
    ));
    let stack = m.embedder.forward(&f, &l, Mode::Eval).unwrap();
    compute_standing_stats(&[&m.stores.texture], 3, |_| {
        m.texture.forward(&stack, Mode::Standing)?;
        Ok(())
    })
    .unwrap();
    assert_eq!(m.texture.head_norm.standing_batches().unwrap(), 3);
    // identical batches: standing statistics reproduce the batch forward
    let a = m.texture.forward(&stack, Mode::Standing).unwrap();
    let b = m.texture.forward(&stack, Mode::Eval).unwrap();
    assert!(max_abs(&(a - b).unwrap()) < 1e-9);
}
