mod common;

use std::sync::atomic::AtomicBool;

use common::*;
use stereoinr::autograd::Mat;
use stereoinr::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION};
use stereoinr::imaging::{bilinear_sample, load_dataset, sample_training_batch, synth_stereo_dataset, BatchConfig, StereoPair};
use stereoinr::model::{Model, ModelConfig};
use stereoinr::params::ParamGroup;
use stereoinr::training::{
    adam_update, cosine_lr, fit, l1_loss, read_log, train_step, FitOutput, ModelState, TrainConfig,
};
use stereoinr::Error;

fn small_cfg(total_steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps,
        eval_every: 0,
        checkpoint_every: 0,
        n_holdout: 1,
        batch: BatchConfig {
            lr_height: 12,
            lr_width: 16,
            n_queries: 128,
            min_scale: 1.0,
            max_scale: 4.0,
        },
        ..TrainConfig::default()
    }
}

fn data(n: usize, seed: u64) -> Vec<StereoPair> {
    let dir = tempfile::tempdir().unwrap();
    synth_stereo_dataset(n, (64, 96), seed, dir.path()).unwrap();
    load_dataset(dir.path()).unwrap().hr_pairs()
}

#[test]
fn l1_cases() {
    let a = Mat::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.05);
    assert_eq!(l1_loss((&a, &a), (&a, &a)).unwrap(), 0.0);
    let b = a.mapv(|v| v + 0.1);
    assert!((l1_loss((&b, &b), (&a, &a)).unwrap() - 0.1).abs() < 1e-12);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let (p, q, r, s) = (rand_mat(&mut rng, 5, 3), rand_mat(&mut rng, 5, 3), rand_mat(&mut rng, 5, 3), rand_mat(&mut rng, 5, 3));
    let mut acc = 0.0;
    for i in 0..5 {
        for j in 0..3 {
            acc += (p[[i, j]] - r[[i, j]]).abs() + (q[[i, j]] - s[[i, j]]).abs();
        }
    }
    assert!((l1_loss((&p, &q), (&r, &s)).unwrap() - acc / 30.0).abs() < 1e-12);
    assert!(matches!(l1_loss((&p, &q), (&r, &Mat::zeros((4, 3)))), Err(Error::Shape(_))));
}

#[test]
fn cosine_schedule() {
    let cfg = TrainConfig {
        total_steps: 1000,
        ..TrainConfig::default()
    };
    assert_eq!(cosine_lr(0, &cfg).unwrap(), 5e-4);
    assert!(cosine_lr(1000, &cfg).unwrap().abs() < 1e-18);
    assert!((cosine_lr(500, &cfg).unwrap() - 2.5e-4).abs() < 1e-15);
    assert!(matches!(cosine_lr(1001, &cfg), Err(Error::Argument(_))));
}

#[test]
fn adam_matches_scalar_reference() {
    let target = [0.3, -1.2, 2.0];
    let mut p = Mat::from_shape_vec((1, 3), vec![1.0, 1.0, -1.0]).unwrap();
    let (mut m, mut v) = (Mat::zeros((1, 3)), Mat::zeros((1, 3)));
    let mut rp = [1.0f64, 1.0, -1.0];
    let mut rm = [0.0f64; 3];
    let mut rv = [0.0f64; 3];
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    for t in 1..=50u64 {
        let g = Mat::from_shape_fn((1, 3), |(_, j)| 2.0 * (p[[0, j]] - target[j]));
        adam_update(&mut p, &g, &mut m, &mut v, t, lr, b1, b2, eps);
        for j in 0..3 {
            let g = 2.0 * (rp[j] - target[j]);
            rm[j] = b1 * rm[j] + (1.0 - b1) * g;
            rv[j] = b2 * rv[j] + (1.0 - b2) * g * g;
            let mh = rm[j] / (1.0 - b1.powi(t as i32));
            let vh = rv[j] / (1.0 - b2.powi(t as i32));
            rp[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    for j in 0..3 {
        assert!((p[[0, j]] - rp[j]).abs() <= 1e-10);
    }
}

#[test]
fn first_step_loss_is_bilinear_error_and_backbone_stays_frozen() {
    let pairs = data(2, 3);
    let cfg = small_cfg(10);
    let mut state = ModelState::new(Model::new(tiny_config(), 4).unwrap(), 5);
    let batch = sample_training_batch(&pairs, &mut state.rng, &cfg.batch).unwrap();
    let bl = bilinear_sample(&batch.lr_pair.left, &batch.queries.coords);
    let br = bilinear_sample(&batch.lr_pair.right, &batch.queries.coords);
    let expect = l1_loss((&bl, &br), (&batch.gt_left, &batch.gt_right)).unwrap();
    let frozen = state.model.params.group_hash(ParamGroup::Backbone);
    let before = state.model.params.clone();
    let loss = train_step(&mut state, &[batch], &cfg).unwrap();
    assert!(loss >= 0.0);
    assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    assert_eq!(frozen, state.model.params.group_hash(ParamGroup::Backbone));
    assert_eq!(state.step, 1);
    let moved = state.model.params.tunable_names().into_iter().any(|n| before.get(&n) != state.model.params.get(&n));
    assert!(moved);
    for (name, m) in state.model.params.group(ParamGroup::Backbone) {
        assert_eq!(Some(m), before.get(name));
    }
}

#[test]
fn non_finite_loss_aborts_with_batch_seed() {
    let pairs = data(1, 6);
    let cfg = small_cfg(10);
    let mut model = Model::new(tiny_config(), 7).unwrap();
    model.params.get_mut("upsampler.shared.mlp.l2.b").unwrap()[[0, 0]] = f64::NAN;
    let mut state = ModelState::new(model, 8);
    let batch = sample_training_batch(&pairs, &mut state.rng, &cfg.batch).unwrap();
    let seed = batch.seed;
    match train_step(&mut state, &[batch], &cfg) {
        Err(Error::TrainingAborted { step, batch_seed, .. }) => {
            assert_eq!((step, batch_seed), (0, seed));
        }
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn seeded_runs_are_identical_and_loss_falls() {
    let pairs = data(4, 9);
    let cfg = TrainConfig {
        batch: BatchConfig {
            lr_height: 16,
            lr_width: 24,
            n_queries: 384,
            ..small_cfg(1).batch
        },
        ..small_cfg(200)
    };
    let run = || {
        let state = ModelState::new(Model::new(ModelConfig::compact(), 10).unwrap(), 11);
        fit(state, &pairs, &[], &cfg, None, None).unwrap()
    };
    let a = run();
    let b = run();
    let la: Vec<f64> = a.log.iter().map(|e| e.loss).collect();
    let lb: Vec<f64> = b.log.iter().map(|e| e.loss).collect();
    assert_eq!(la, lb);
    assert_eq!(a.state, b.state);
    assert_eq!(la.len(), 200);
    let head: f64 = la[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = la[150..].iter().sum::<f64>() / 50.0;
    assert!(tail < head, "running loss {head} -> {tail}");
}

#[test]
fn checkpoint_round_trip_and_failures() {
    let mut state = ModelState::new(Model::new(tiny_config(), 12).unwrap(), 13);
    perturb_tunable(&mut state.model.params, 0.1, 14);
    state.step = 17;
    let _ = rand::RngCore::next_u64(&mut state.rng);
    let bytes = encode_checkpoint(&state).unwrap();
    assert_eq!(decode_checkpoint(&bytes).unwrap(), state);

    let mut corrupt = bytes.clone();
    corrupt[40] ^= 0x20;
    assert!(matches!(decode_checkpoint(&corrupt), Err(Error::Checkpoint(_))));

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        decode_checkpoint(&future),
        Err(Error::CheckpointVersion { found, .. }) if found == FORMAT_VERSION + 1
    ));
    assert!(matches!(decode_checkpoint(&bytes[..30]), Err(Error::Checkpoint(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&state, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), state);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let pairs = data(2, 15);
    let cfg = small_cfg(14);
    let fresh = || ModelState::new(Model::new(tiny_config(), 16).unwrap(), 17);
    let direct = fit(fresh(), &pairs, &[], &cfg, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let out = FitOutput { dir: dir.path().to_path_buf() };
    let part = TrainConfig { total_steps: 14, ..cfg.clone() };
    let stop = AtomicBool::new(false);
    // Run 4 steps, checkpoint, reload and finish.
    let mut state = fresh();
    for _ in 0..4 {
        let b = sample_training_batch(&pairs, &mut state.rng, &part.batch).unwrap();
        train_step(&mut state, &[b], &part).unwrap();
    }
    save_checkpoint(&state, &out.last()).unwrap();
    let resumed = load_checkpoint(&out.last()).unwrap();
    let rest = fit(resumed, &pairs, &[], &part, Some(&out), Some(&stop)).unwrap();
    assert_eq!(rest.log.len(), 10);
    assert_eq!(rest.state, direct.state);
    let direct_tail: Vec<f64> = direct.log[4..].iter().map(|e| e.loss).collect();
    let resumed_losses: Vec<f64> = rest.log.iter().map(|e| e.loss).collect();
    assert_eq!(direct_tail, resumed_losses);
    assert_eq!(read_log(&out.log()).unwrap().len(), 10);
    assert_eq!(load_checkpoint(&out.last()).unwrap(), direct.state);
}

#[test]
fn fit_validates_and_writes_artifacts() {
    let pairs = data(3, 18);
    let (train, val) = pairs.split_at(2);
    let cfg = TrainConfig {
        eval_every: 3,
        checkpoint_every: 3,
        ..small_cfg(6)
    };
    let dir = tempfile::tempdir().unwrap();
    let out = FitOutput { dir: dir.path().to_path_buf() };
    let state = ModelState::new(Model::new(tiny_config(), 19).unwrap(), 20);
    let res = fit(state, train, val, &cfg, Some(&out), None).unwrap();
    let log = read_log(&out.log()).unwrap();
    assert_eq!(log.len(), 6);
    assert_eq!(log, res.log);
    let evals: Vec<u64> = log.iter().filter(|e| e.psnr_x2.is_some() && e.psnr_x4.is_some()).map(|e| e.step).collect();
    assert_eq!(evals, vec![3, 6]);
    assert!(out.best().exists() && out.last().exists());
    assert_eq!(load_checkpoint(&out.last()).unwrap(), res.state);
    let (best_psnr, best) = res.best.unwrap();
    assert_eq!(load_checkpoint(&out.best()).unwrap(), best);
    assert!(best_psnr.is_finite());
    assert!(fit(ModelState::new(Model::new(tiny_config(), 1).unwrap(), 1), &[], val, &cfg, None, None).is_err());
}
