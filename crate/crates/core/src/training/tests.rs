use std::path::Path;

use super::*;
use crate::data::split::build_splits;
use crate::data::synthetic::{default_catalog, Renderer};
use crate::model::ModelConfig;

fn small_config() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        ..ModelConfig::tiny()
    }
}

fn small_dataset() -> (DatasetHandle, SplitConfig) {
    let ds = DatasetHandle::synthetic(Renderer::new(16, 16, default_catalog()).unwrap());
    let split = build_splits(&ds.class_ids(), 4, 0).unwrap();
    (ds, split)
}

fn small_train_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 2,
        learning_rate: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn batch(n: usize, cfg: &TrainConfig) -> Vec<SeededEpisode> {
    let (ds, split) = small_dataset();
    (0..n as u64)
        .map(|i| training_episode(&ds, &split, cfg, i).unwrap())
        .collect()
}

#[test]
fn kl_vanishes_when_posterior_equals_prior() {
    let model = Model::init(small_config(), 1).unwrap();
    let cfg = small_train_config(1);
    let ep = &batch(1, &cfg)[0].episode;
    let mut s = model.session();
    let mut f = s.forward_train(ep, LatentSource::Prior, vec![0.0; 4], vec![0.0; 4]).unwrap();
    f.prototype_posterior = f.prototype_prior;
    f.attention_posterior = f.attention_prior;
    let (_, loss) = elbo_loss(&mut s, &f, &ep.query.mask, 1.0, 1.0);
    assert_eq!(loss.kl_prototype, 0.0);
    assert_eq!(loss.kl_attention, 0.0);
    assert_eq!(loss.total, loss.cross_entropy);
}

#[test]
fn total_is_reconstructed_exactly_from_its_parts() {
    let model = Model::init(small_config(), 2).unwrap();
    let cfg = small_train_config(1);
    for item in batch(4, &cfg) {
        let mut s = model.session();
        let f = s
            .forward_train(&item.episode, LatentSource::Posterior, vec![0.4; 4], vec![-0.3; 4])
            .unwrap();
        let (bz, bm) = (0.7, 1.3);
        let (_, l) = elbo_loss(&mut s, &f, &item.episode.query.mask, bz, bm);
        assert_eq!(l.total, l.cross_entropy + bz * l.kl_prototype + bm * l.kl_attention);
        assert!(l.kl_prototype >= 0.0 && l.kl_attention >= 0.0);
    }
}

#[test]
fn kl_free_zero_noise_training_is_the_deterministic_baseline() {
    let model = Model::init(small_config(), 3).unwrap();
    let relaxed = TrainConfig {
        beta_z: 0.0,
        beta_m: 0.0,
        zero_noise: true,
        latent_source: LatentSource::Prior,
        ..small_train_config(1)
    };
    let baseline = TrainConfig {
        deterministic: true,
        ..small_train_config(1)
    };
    let b = batch(2, &relaxed);
    let (mut m1, mut m2) = (model.clone(), model.clone());
    let (mut a1, mut a2) = (Adam::new(&model.params), Adam::new(&model.params));
    for it in 0..3 {
        let l1 = train_step(&mut m1, &mut a1, &b, &relaxed, it).unwrap();
        let l2 = train_step(&mut m2, &mut a2, &b, &baseline, it).unwrap();
        assert_eq!(l1.total, l2.total);
    }
    assert_eq!(m1.params, m2.params);
}

#[test]
fn kl_warmup_ramps_linearly() {
    let cfg = TrainConfig {
        iterations: 100,
        kl_warmup: true,
        beta_z: 1.0,
        beta_m: 1.0,
        ..TrainConfig::default()
    };
    assert!((cfg.settings(0).beta_z - 0.1).abs() < 1e-12);
    assert!((cfg.settings(4).beta_m - 0.5).abs() < 1e-12);
    assert_eq!(cfg.settings(9).beta_z, 1.0);
    assert_eq!(cfg.settings(50).beta_z, 1.0);
}

#[test]
fn config_rejects_multi_sample_training_and_bad_values() {
    let mut cfg = TrainConfig {
        samples_l: 2,
        ..TrainConfig::default()
    };
    assert!(cfg.validate().is_err());
    cfg.samples_l = 1;
    cfg.validate().unwrap();
    cfg.learning_rate = 0.0;
    assert!(cfg.validate().is_err());
    cfg.learning_rate = 1e-4;
    cfg.beta_z = -1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn adam_first_step_moves_each_weight_by_the_learning_rate() {
    let cfg = ModelConfig::tiny();
    let mut params = ParameterSet::init(&cfg, 0).unwrap();
    let before = params.clone();
    let mut grads = params.zeros_like();
    for (_, g) in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v = 0.25);
    }
    let mut adam = Adam::new(&params);
    adam.update(&mut params, &grads, 1e-2);
    for ((_, a), (_, b)) in params.iter().zip(before.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((y - x - 1e-2).abs() < 1e-6);
        }
    }
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let (ds, split) = small_dataset();
    let cfg = small_train_config(3);
    let run = || {
        train(Model::init(small_config(), 5).unwrap(), &ds, &split, &cfg, TrainIo::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.history, b.history);
}

#[test]
fn training_log_has_one_record_per_step() {
    let (ds, split) = small_dataset();
    let cfg = small_train_config(3);
    let mut log = Vec::new();
    let io = TrainIo {
        log: Some(&mut log),
        checkpoint_dir: None,
    };
    train(Model::init(small_config(), 5).unwrap(), &ds, &split, &cfg, io).unwrap();
    let records: Vec<StepRecord> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![1, 2, 3]);
}

#[test]
fn non_finite_loss_names_the_episode_seed() {
    let mut model = Model::init(small_config(), 6).unwrap();
    model.params.get_mut("encoder.0.bias").unwrap().data_mut()[0] = f64::NAN;
    let cfg = small_train_config(1);
    let b = batch(1, &cfg);
    let mut adam = Adam::new(&model.params);
    match train_step(&mut model, &mut adam, &b, &cfg, 0) {
        Err(Error::NonFiniteLoss { seed, .. }) => assert_eq!(seed, b[0].seed),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (ds, split) = small_dataset();
    let cfg = small_train_config(2);
    let out = train(Model::init(small_config(), 7).unwrap(), &ds, &split, &cfg, TrainIo::default()).unwrap();
    let ck = Checkpoint::capture(&out.model, &out.adam, 2, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.apic");
    save_checkpoint(&ck, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ck);
    let again = dir.path().join("b.apic");
    save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (ds, split) = small_dataset();
    let cfg = TrainConfig {
        checkpoint_interval: 2,
        ..small_train_config(4)
    };
    let dir = tempfile::tempdir().unwrap();
    let model = Model::init(small_config(), 8).unwrap();
    let full = train(model.clone(), &ds, &split, &cfg, TrainIo::default()).unwrap();
    let io = TrainIo {
        log: None,
        checkpoint_dir: Some(dir.path().to_path_buf()),
    };
    train(model, &ds, &split, &cfg, io).unwrap();
    let ck = load_checkpoint(&dir.path().join("checkpoint-2.apic")).unwrap();
    let resumed = resume(ck.model, ck.adam, ck.iteration, &ds, &split, &cfg, TrainIo::default()).unwrap();
    assert_eq!(resumed.model.params, full.model.params);
}

#[test]
fn corrupt_files_fail_with_distinct_errors() {
    let ck = Checkpoint::from_model(&Model::init(ModelConfig::tiny(), 0).unwrap());
    let bytes = ck.to_bytes().unwrap();
    let p = Path::new("mem");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::NotACheckpoint(_))));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&bad, p),
        Err(Error::VersionMismatch { found: 9, .. })
    ));

    let cut = &bytes[..bytes.len() - 10];
    assert!(matches!(Checkpoint::from_bytes(cut, p), Err(Error::Truncated(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..20], p), Err(Error::Truncated(_))));
}

#[test]
fn mismatched_config_names_the_first_offending_array() {
    let ck = Checkpoint::from_model(&Model::init(ModelConfig::tiny(), 0).unwrap());
    let requested = ModelConfig {
        encoder_channels: vec![3, 5, 4, 4],
        ..ModelConfig::tiny()
    };
    match ck.check_config(&requested) {
        Err(Error::ShapeMismatch { name, expected, found }) => {
            assert_eq!(name, "encoder.1.weight");
            assert_eq!(expected, vec![3, 3, 3, 5]);
            assert_eq!(found, vec![3, 3, 3, 4]);
        }
        other => panic!("unexpected {other:?}"),
    }
}
