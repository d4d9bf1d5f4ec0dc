use super::*;
use crate::data::{generate_synthetic_dataset, SynthConfig, VideoSample};
use crate::nets::{compute_standing_stats, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn video() -> VideoSample {
    let cfg = SynthConfig {
        identities: 1,
        frames: 4,
        image_size: 16,
        ..SynthConfig::default()
    };
    generate_synthetic_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(4))
        .unwrap()
        .remove(0)
}

/// Tiny model with non-trivial batch statistics and warp head.
fn model(seed: u64) -> Model {
    let m = Model::new(&ModelConfig::tiny(), seed, DType::F32).unwrap();
    let v = video();
    let enc = Encoder::new(68, 16, DType::F32);
    let s = &m.stores;
    compute_standing_stats(&[&s.embedder, &s.texture, &s.inference], 2, |i| {
        let f = v.frame(i);
        let g = v.frame(i + 1);
        let b = enc.batch(&[(f, g), (g, f)], false)?;
        let init = m.init_avatar(&b.source, &b.source_landmarks, Mode::Standing)?;
        m.inference.forward(&b.target_pose, &init.bundle, &init.texture, Mode::Standing)?;
        Ok(())
    })
    .unwrap();
    perturb(&s.inference, "warp_head", 0.05, seed);
    m
}

fn perturb(store: &ParamStore, prefix: &str, scale: f32, seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, v) in store.params() {
        if k.starts_with(prefix) {
            let noise: Vec<f32> = (0..v.elem_count()).map(|_| rng.gen_range(-scale..scale)).collect();
            let noise = Tensor::from_vec(noise, v.dims(), &DEVICE).unwrap();
            v.set(&(v.as_tensor() + noise).unwrap()).unwrap();
        }
    }
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    flat(a).iter().zip(flat(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn avatar(m: &Model, opts: &CreateOptions) -> AvatarState {
    let v = video();
    let f = v.frame(0);
    create_avatar(m, f.image, f.keypoints, opts).unwrap()
}

#[test]
fn folded_matches_adaptive_forward() {
    let m = model(1);
    let v = video();
    let enc = Encoder::new(68, 16, DType::F32);
    for src in 0..2 {
        let f = v.frame(src);
        let a = create_avatar(&m, f.image, f.keypoints, &CreateOptions::default()).unwrap();
        let source = enc.frame(&f).unwrap().unsqueeze(0).unwrap();
        let lm = enc.landmarks(f.keypoints).unwrap().unsqueeze(0).unwrap();
        let init = m.init_avatar(&source, &lm, Mode::Eval).unwrap();
        for t in 0..v.len() {
            let kps = v.frame(t).keypoints;
            let pose = enc.poses(&[kps]).unwrap();
            let reference = m.inference.forward(&pose, &init.bundle, &init.texture, Mode::Eval).unwrap();
            let folded = a.forward(&[kps]).unwrap();
            for (x, y) in [
                (&reference.x_lf, &folded.x_lf),
                (&reference.x_hf, &folded.x_hf),
                (&reference.mask_logits, &folded.mask_logits),
                (reference.warp.delta(), folded.warp.delta()),
            ] {
                assert!(max_abs_diff(x, y) <= 1e-5, "{}", max_abs_diff(x, y));
            }
            assert!(max_abs_diff(&reference.image().unwrap(), &folded.image().unwrap()) <= 1e-5);
        }
    }
}

#[test]
fn folding_is_deterministic_and_holds_no_embeddings() {
    let m = model(2);
    let a = avatar(&m, &CreateOptions::default());
    let b = avatar(&m, &CreateOptions::default());
    let (ta, tb) = (a.tensors(), b.tensors());
    assert_eq!(ta.len(), tb.len());
    for ((na, x), (nb, y)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        assert_eq!(flat(x), flat(y));
    }
    assert!(ta
        .iter()
        .all(|(k, _)| k == "texture" || k.starts_with("gen/")));
    assert!(!ta.iter().any(|(k, _)| k.contains("embed") || k.contains("predictor")));
}

#[test]
fn zero_updater_enhancement_changes_nothing() {
    let m = model(3);
    let plain = avatar(&m, &CreateOptions::default());
    let enhanced = avatar(
        &m,
        &CreateOptions {
            enhance_steps: 4,
            ..CreateOptions::default()
        },
    );
    assert_eq!(flat(plain.texture()), flat(enhanced.texture()));
    // a trained-looking updater does change it
    perturb(&m.stores.updater, "out", 0.1, 0);
    let moved = avatar(
        &m,
        &CreateOptions {
            enhance_steps: 2,
            ..CreateOptions::default()
        },
    );
    assert_ne!(flat(plain.texture()), flat(moved.texture()));
}

#[test]
fn container_roundtrip_is_exact_and_fp16_is_close() {
    let m = model(4);
    let a = avatar(
        &m,
        &CreateOptions {
            masked_output: true,
            source: SourceInfo {
                video_id: Some("id00000".into()),
                frame: Some(0),
            },
            ..CreateOptions::default()
        },
    );
    let v = video();
    let kps = v.frame(2).keypoints;
    let before = a.drive(kps, true).unwrap();

    let bytes = a.to_bytes(Storage::F32).unwrap();
    let b = AvatarState::from_bytes(&bytes).unwrap();
    assert_eq!(b.meta(), a.meta());
    assert_eq!(b.to_bytes(Storage::F32).unwrap(), bytes);
    let after = b.drive(kps, true).unwrap();
    assert_eq!(flat(&before.frame), flat(&after.frame));
    assert_eq!(flat(&before.mask), flat(&after.mask));

    let half = AvatarState::from_bytes(&a.to_bytes(Storage::F16).unwrap()).unwrap();
    let d = max_abs_diff(&before.frame, &half.drive(kps, false).unwrap().frame);
    assert!(d <= 1e-2, "fp16 drive differs by {d}");

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.blav");
    a.save(&p, Storage::F32).unwrap();
    assert_eq!(flat(&AvatarState::load(&p).unwrap().drive(kps, false).unwrap().frame), flat(&before.frame));
}

#[test]
fn corrupt_avatars_are_format_errors() {
    let a = avatar(&model(5), &CreateOptions::default());
    let bytes = a.to_bytes(Storage::F32).unwrap();
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"BLCK");
    assert!(matches!(AvatarState::from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(AvatarState::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Format(_))));
    // tamper with the configuration without updating the fingerprint
    let mut d = container::decode(&bytes, AVATAR_MAGIC).unwrap();
    d.meta["avatar"]["model"]["mlp_width"] = serde_json::json!(17);
    let tensors: Vec<(String, Tensor)> = d.order.iter().map(|k| (k.clone(), d.tensors[k].clone())).collect();
    let forged = container::encode(AVATAR_MAGIC, &d.meta, &tensors, Storage::F32).unwrap();
    assert!(matches!(AvatarState::from_bytes(&forged), Err(Error::Format(_))));
}

#[test]
fn drive_contracts() {
    let a = avatar(&model(6), &CreateOptions::default());
    let v = video();
    let kps = v.frame(1).keypoints;
    let x = a.drive(kps, true).unwrap();
    let y = a.drive(kps, false).unwrap();
    assert_eq!(flat(&x.frame), flat(&y.frame));
    assert_eq!(x.frame.dims(), &[3, 16, 16]);
    assert!(flat(&x.mask).iter().all(|m| (0.0..=1.0).contains(m)));
    let l = x.layers.unwrap();
    assert_eq!(l.warp.dims(), &[2, 16, 16]);
    let sum = (&l.low_frequency + &l.high_frequency).unwrap();
    assert_eq!(flat(&sum), flat(&x.frame));
    assert!(y.layers.is_none());

    let short = KeypointSet::new(vec![[0.5, 0.5]; 5]).unwrap();
    assert!(matches!(a.drive(&short, false), Err(Error::Shape(_))));
}

#[test]
fn concurrent_drives_match_serial() {
    let a = avatar(&model(7), &CreateOptions::default());
    let v = video();
    let serial: Vec<Vec<f32>> = (0..v.len()).map(|i| flat(&a.drive(v.frame(i).keypoints, false).unwrap().frame)).collect();
    let parallel: Vec<Vec<f32>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..v.len())
            .map(|i| {
                let (a, v) = (&a, &v);
                s.spawn(move || flat(&a.drive(v.frame(i).keypoints, false).unwrap().frame))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(serial, parallel);
}

#[test]
fn creation_checks_inputs() {
    let m = model(8);
    let v = video();
    let f = v.frame(0);
    let short = KeypointSet::new(vec![[0.5, 0.5]; 5]).unwrap();
    assert!(matches!(
        create_avatar(&m, f.image, &short, &CreateOptions::default()),
        Err(Error::Shape(_))
    ));
    let big = RgbImage::new(32, 32);
    assert!(matches!(
        create_avatar(&m, &big, f.keypoints, &CreateOptions::default()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn fold_rejects_incomplete_bundles() {
    let m = model(9);
    let v = video();
    let enc = Encoder::new(68, 16, DType::F32);
    let f = v.frame(0);
    let s = enc.frame(&f).unwrap().unsqueeze(0).unwrap();
    let lm = enc.landmarks(f.keypoints).unwrap().unsqueeze(0).unwrap();
    let mut init = m.init_avatar(&s, &lm, Mode::Eval).unwrap();
    init.bundle.blocks.pop();
    assert!(matches!(fold_adaptive(&m.inference, &init.bundle), Err(Error::Shape(_))));
    init.bundle.blocks.push(init.bundle.blocks[0].clone());
    assert!(matches!(fold_adaptive(&m.inference, &init.bundle), Err(Error::Shape(_))));
}

#[test]
fn avatar_macs_match_config() {
    let a = avatar(&model(10), &CreateOptions::default());
    assert_eq!(a.count_macs().unwrap(), count_macs(&ModelConfig::tiny()));
}
