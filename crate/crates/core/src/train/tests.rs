use super::*;
use crate::data::{generate_synthetic_dataset, SynthConfig};
use crate::nets::ParamStore;
use crate::tensor::{to_vec_f64, DEVICE};

fn videos(size: u32) -> Vec<VideoSample> {
    let cfg = SynthConfig {
        identities: 4,
        frames: 6,
        image_size: size,
        ..SynthConfig::default()
    };
    generate_synthetic_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        updater_batch_size: 2,
        iterations: 3,
        updater_iterations: 2,
        standing_batches: 2,
        unroll_steps: 2,
        checkpoint_every: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn trainer() -> Trainer {
    Trainer::new(&ModelConfig::tiny(), &small_cfg()).unwrap()
}

fn grad_is_zero(grads: &candle_core::backprop::GradStore, store: &ParamStore, filter: &str) -> (bool, usize) {
    let mut all_zero = true;
    let mut n = 0;
    for (name, v) in store.params() {
        if !name.starts_with(filter) {
            continue;
        }
        n += 1;
        if let Some(g) = grads.get(v.as_tensor()) {
            if to_vec_f64(g).unwrap().iter().any(|x| *x != 0.0) {
                all_zero = false;
            }
        }
    }
    (all_zero, n)
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(TrainConfig::paper().batch_size, 48);
    assert_eq!(TrainConfig::paper().updater_batch_size, 32);
    let bad = [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { lr: f64::NAN, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { updater_batch_size: 0, ..TrainConfig::default() },
        TrainConfig { betas: (1.0, 0.9), ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    let text = toml::to_string(&TrainConfig::default()).unwrap();
    let back: TrainConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, TrainConfig::default());
}

#[test]
fn saturated_mask_leaves_inputs_unchanged() {
    let real = Tensor::randn(0f32, 1., (2, 3, 8, 8), &DEVICE).unwrap();
    let fake = Tensor::randn(0f32, 1., (2, 3, 8, 8), &DEVICE).unwrap();
    let logits = Tensor::full(40f32, (2, 1, 8, 8), &DEVICE).unwrap();
    let (r, f) = apply_mask_protocol(&real, &fake, &logits).unwrap();
    for (a, b) in flat(&r).iter().zip(flat(&real)) {
        assert!((a - b).abs() < 1e-8);
    }
    for (a, b) in flat(&f).iter().zip(flat(&fake)) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn mask_head_learns_only_from_segmentation() {
    let t = trainer();
    let v = videos(16);
    let batch = t.batch(&v).unwrap();
    let out = t.stage1_forward(&batch).unwrap();
    let terms = t.loss_terms(&batch, &out).unwrap();
    let inf = &t.model.stores.inference;
    for term in ["adv", "fm", "perc_in", "perc_face", "pix", "reg"] {
        let g = terms.parts[term].backward().unwrap();
        let (zero, n) = grad_is_zero(&g, inf, "mask_head");
        assert!(n == 2 && zero, "{term} reaches the mask head");
    }
    let g = terms.parts["seg"].backward().unwrap();
    assert!(!grad_is_zero(&g, inf, "mask_head").0, "segmentation must train the mask head");
}

#[test]
fn perceptual_terms_do_not_reach_the_low_frequency_head() {
    let t = trainer();
    let v = videos(16);
    let batch = t.batch(&v).unwrap();
    let out = t.stage1_forward(&batch).unwrap();
    let terms = t.loss_terms(&batch, &out).unwrap();
    let inf = &t.model.stores.inference;
    for term in ["perc_in", "perc_face"] {
        let g = terms.parts[term].backward().unwrap();
        let (zero, n) = grad_is_zero(&g, inf, "lf_head");
        assert!(n == 2 && zero, "{term} reaches the low-frequency head");
        // but they do train the texture
        assert!(!grad_is_zero(&g, &t.model.stores.texture, "").0);
    }
    let g = terms.parts["pix"].backward().unwrap();
    assert!(!grad_is_zero(&g, inf, "lf_head").0);
}

#[test]
fn updater_stage_leaves_the_base_untouched() {
    let mut t = trainer();
    let v = videos(16);
    t.stage = Stage::Updater;
    let batch = t.batch(&v).unwrap();
    let (out, trace) = t.stage2_forward(&batch).unwrap();
    assert_eq!(trace.steps(), 2);
    let terms = t.loss_terms(&batch, &out).unwrap();
    let (total, _) = total_generator_loss(&terms.parts, &t.cfg.weights, 0).unwrap();
    let g = total.backward().unwrap();
    for store in t.model.stores.generators() {
        let (zero, n) = grad_is_zero(&g, store, "");
        assert!(n > 0 && zero);
    }
    assert!(!grad_is_zero(&g, &t.model.stores.updater, "").0);

    // and a full step changes only the updater and discriminator
    let before: Vec<Vec<(String, Tensor)>> = t
        .model
        .stores
        .generators()
        .iter()
        .map(|s| s.params().into_iter().map(|(k, v)| (k, v.as_tensor().copy().unwrap())).collect())
        .collect();
    t.stage2_step(&batch).unwrap();
    for (store, old) in t.model.stores.generators().iter().zip(before) {
        for ((_, v), (_, o)) in store.params().iter().zip(old) {
            assert_eq!(flat(v.as_tensor()), flat(&o));
        }
    }
}

#[test]
fn steps_are_reproducible() {
    let v = videos(16);
    let mut a = trainer();
    let mut b = trainer();
    for _ in 0..2 {
        assert_eq!(a.step(&v).unwrap(), b.step(&v).unwrap());
    }
    let r = a.step(&v).unwrap();
    for term in ["adv", "pix", "perc_in", "perc_face", "fm", "reg", "seg", "disc", "total"] {
        assert!(r[term].is_finite(), "{term}");
    }
}

#[test]
fn non_finite_input_aborts_with_the_term_name() {
    let mut t = trainer();
    let v = videos(16);
    let mut batch = t.batch(&v).unwrap();
    batch.target = (batch.target * f64::NAN).unwrap();
    match t.stage1_step(&batch) {
        Err(Error::Numerical(msg)) => {
            // the relu inside the hinge maps NaN to 0, so the first reported
            // term depends on the op; it must be one of the objective's terms
            let named = ["fm", "perc_face", "perc_in", "pix", "seg", "adv"].iter().any(|t| msg.contains(&format!("term {t} ")));
            assert!(named, "{msg}");
        }
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let v = videos(16);
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let mut full = trainer();
    run_training(&mut full, &v, StageSelect::Both, &full_dir).unwrap();

    // the intermediate checkpoint at iteration 2 of a 3-iteration run
    let ckpt = checkpoint_path(&full_dir, Stage::Base, 2);
    let mut resumed = Trainer::load_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.iteration, 2);
    assert!(!resumed.standing_done);
    let resumed_dir = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed_dir).unwrap();
    // seed the resumed log with the rows written before the checkpoint
    std::fs::copy(metrics_path(&full_dir, Stage::Base), metrics_path(&resumed_dir, Stage::Base)).unwrap();
    run_training(&mut resumed, &v, StageSelect::Both, &resumed_dir).unwrap();

    for stage in [Stage::Base, Stage::Updater] {
        let a = read_metrics(&metrics_path(&full_dir, stage)).unwrap();
        let b = read_metrics(&metrics_path(&resumed_dir, stage)).unwrap();
        assert_eq!(a, b, "{stage:?} metrics differ");
    }
    let a = full.checkpoint_tensors();
    let b = resumed.checkpoint_tensors();
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert_eq!(flat(ta), flat(tb), "{na}");
    }
}

#[test]
fn run_layout_and_checkpoint_contents() {
    let v = videos(16);
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer();
    let summary = run_training(&mut t, &v, StageSelect::Both, dir.path()).unwrap();
    let names: Vec<String> = summary
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names,
        [
            "checkpoint_base_000002.blck",
            "checkpoint_base_000003.blck",
            "checkpoint_updater_000002.blck"
        ]
    );
    let rows = read_metrics(&metrics_path(dir.path(), Stage::Base)).unwrap();
    let iters: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.iter).collect();
    assert_eq!(iters.len(), 3);
    assert_eq!(term_series(&rows, "pix").len(), 3);
    let upd = read_metrics(&metrics_path(dir.path(), Stage::Updater)).unwrap();
    assert_eq!(term_series(&upd, "guide_last").len(), 2);

    let (model, meta) = Checkpoint::load_model(summary.checkpoints.last().unwrap()).unwrap();
    assert_eq!(meta.stage, Stage::Updater);
    assert!(meta.standing_done);
    assert_eq!(model.cfg, ModelConfig::tiny());
    for (net, store) in model.stores.named() {
        let live: BTreeMap<String, Tensor> = t
            .model
            .stores
            .named()
            .iter()
            .find(|(n, _)| *n == net)
            .unwrap()
            .1
            .named_tensors()
            .into_iter()
            .collect();
        for (k, v) in store.named_tensors() {
            assert_eq!(flat(&v), flat(&live[&k]), "{net}/{k}");
        }
    }
    // standing statistics were collected into every generator batch norm
    let standing = model
        .stores
        .inference
        .buffers()
        .into_iter()
        .filter(|(k, _)| k.ends_with("standing_count"))
        .map(|(_, v)| scalar(v.as_tensor()).unwrap())
        .collect::<Vec<_>>();
    assert!(!standing.is_empty());
    assert!(standing.iter().all(|c| *c == 2.0));
}

#[test]
fn updater_stage_requires_a_finished_base() {
    let v = videos(16);
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer();
    assert!(matches!(
        run_training(&mut t, &v, StageSelect::Updater, dir.path()),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        Trainer::load_checkpoint(&dir.path().join("missing.blck")),
        Err(Error::Io { .. })
    ));
}
