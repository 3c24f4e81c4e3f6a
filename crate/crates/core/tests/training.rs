mod common;

use std::collections::HashSet;

use ktformer::checkpoint::Checkpoint;
use ktformer::eval::evaluate;
use ktformer::features::{EncodedDataset, EncodedWindow, QuestionTable};
use ktformer::model::{init_params, ModelParams};
use ktformer::synthetic::{generate, SyntheticSpec};
use ktformer::train::{
    adamw_step, batch_gradients, split_dataset, split_train_val, train_on_dataset, AdamWConfig, OptimizerState,
    SplitMode, TrainConfig, TrainOptions,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_dataset(seed: u64) -> EncodedDataset {
    let log = generate(&SyntheticSpec {
        n_users: 24,
        n_questions: 15,
        min_events: 5,
        max_events: 30,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    EncodedDataset::build(&log.histories(), &QuestionTable::new(&log.question_map()), 12, 6).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        max_seq: 12,
        batch_size: 8,
        epochs: 3,
        lr: 3e-3,
        split_ratio: 0.75,
        record_wall_time: false,
        ..TrainConfig::default()
    }
}

fn random_batch(seed: u64, n: usize) -> (ModelParams<f64>, Vec<EncodedWindow>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = common::tiny_config(6, 0.0, seed);
    let params = common::random_params(&config, &mut rng);
    let windows = (0..n)
        .map(|u| {
            let valid = rng.random_range(1..=6);
            common::random_window(&mut rng, &config.vocab, 6, valid, u as u64)
        })
        .collect();
    (params, windows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_and_gradients_ignore_batch_order(seed in any::<u64>(), n in 1usize..20, shuffle_seed in any::<u64>()) {
        let (params, windows) = random_batch(seed, n);
        let batch: Vec<&EncodedWindow> = windows.iter().collect();
        let mut shuffled = batch.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let a = batch_gradients(&params, &batch, None).unwrap();
        let b = batch_gradients(&params, &shuffled, None).unwrap();
        prop_assert!((a.mean_loss() - b.mean_loss()).abs() <= 1e-12);
        prop_assert!(a.grads.max_abs_diff(&b.grads) <= 1e-12);
    }
}

#[test]
fn duplicating_a_batch_leaves_gradients_unchanged() {
    let (params, windows) = random_batch(4, 9);
    let batch: Vec<&EncodedWindow> = windows.iter().collect();
    let doubled: Vec<&EncodedWindow> = windows.iter().chain(&windows).collect();
    let a = batch_gradients(&params, &batch, None).unwrap();
    let b = batch_gradients(&params, &doubled, None).unwrap();
    assert_eq!(b.n_valid, 2 * a.n_valid);
    assert!((a.mean_loss() - b.mean_loss()).abs() < 1e-12);
    assert!(a.grads.max_abs_diff(&b.grads) < 1e-12);
}

#[test]
fn zero_head_bias_gradient_is_mean_residual() {
    let (mut params, windows) = random_batch(5, 7);
    params.head_w.fill(0.0);
    params.head_b.fill(0.0);
    let batch: Vec<&EncodedWindow> = windows.iter().collect();
    let g = batch_gradients(&params, &batch, None).unwrap();

    let (mut sum, mut count) = (0.0, 0usize);
    for w in &windows {
        for pos in w.valid_positions() {
            sum += 0.5 - f64::from(w.target[pos]);
            count += 1;
        }
    }
    assert!((g.grads.head_b[0] - sum / count as f64).abs() < 1e-12);
    assert!((g.mean_loss() - std::f64::consts::LN_2).abs() < 1e-12);
}

fn single_scalar_state(g: f64, config: AdamWConfig) -> (ModelParams<f64>, ModelParams<f64>, OptimizerState<f64>) {
    let model = common::tiny_config(4, 0.0, 0);
    let params = init_params::<f64>(&model).unwrap();
    let mut grads = params.zeros_like();
    grads.head_b[0] = g;
    let state = OptimizerState::new(&params, config);
    (params, grads, state)
}

#[test]
fn adamw_matches_hand_computation() {
    let config = AdamWConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.5,
    };
    let (mut params, grads, mut state) = single_scalar_state(0.2, config);
    params.head_b[0] = 1.0;
    let start = params.clone();

    // Step 1: m̂ = g, v̂ = g², so the Adam term is lr·g/(|g| + eps).
    adamw_step(&mut params, &grads, &mut state).unwrap();
    let after_one = 1.0 * (1.0 - 0.05) - 0.1 * 0.2 / (0.2 + 1e-8);
    assert!((params.head_b[0] - after_one).abs() < 1e-15);

    // Step 2 with the same gradient: both moments stay at g and g².
    adamw_step(&mut params, &grads, &mut state).unwrap();
    let m: f64 = 0.9 * 0.02 + 0.1 * 0.2;
    let v: f64 = 0.999 * 0.001 * 0.04 + 0.001 * 0.04;
    let m_hat = m / (1.0 - 0.81);
    let v_hat = v / (1.0 - 0.999f64.powi(2));
    let after_two = after_one * 0.95 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
    assert!((params.head_b[0] - after_two).abs() < 1e-12);
    assert_eq!(state.step, 2);

    // Zero-gradient tensors only decay.
    let w0 = start.head_w[0];
    assert!((params.head_w[0] - w0 * 0.95 * 0.95).abs() < 1e-15);
}

#[test]
fn opposite_gradients_move_symmetrically() {
    let config = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    for g in [1e-6, 0.3, -2.0, 50.0] {
        let (mut plus, grads_plus, mut s_plus) = single_scalar_state(g, config);
        let (mut minus, grads_minus, mut s_minus) = single_scalar_state(-g, config);
        let start = plus.head_b[0];
        for _ in 0..3 {
            adamw_step(&mut plus, &grads_plus, &mut s_plus).unwrap();
            adamw_step(&mut minus, &grads_minus, &mut s_minus).unwrap();
        }
        let up = plus.head_b[0] - start;
        let down = minus.head_b[0] - start;
        assert!(up != 0.0);
        assert_eq!(up, -down, "g = {g}");
    }
}

#[test]
fn evaluation_does_not_touch_parameters() {
    let ds = small_dataset(1);
    let config = small_config().model_config(ds.vocab);
    let params = init_params::<f32>(&config).unwrap();
    let before = params.clone();
    evaluate(&params, &ds).unwrap();
    assert_eq!(params, before);
}

#[test]
fn user_split_is_disjoint_and_reproducible() {
    let ds = small_dataset(2);
    let (train, val) = split_dataset(&ds, 0.75, 9, SplitMode::Users).unwrap();
    let a: HashSet<u64> = train.user_ids().into_iter().collect();
    let b: HashSet<u64> = val.user_ids().into_iter().collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(a.len() + b.len(), ds.user_ids().len());
    assert_eq!(train.windows.len() + val.windows.len(), ds.windows.len());
    let (train2, _) = split_dataset(&ds, 0.75, 9, SplitMode::Users).unwrap();
    assert_eq!(train, train2);

    let (rows_train, rows_val) = split_dataset(&ds, 0.75, 9, SplitMode::Rows).unwrap();
    assert_eq!(rows_train.windows.len() + rows_val.windows.len(), ds.windows.len());

    let users: Vec<u32> = (0..40).collect();
    let (t, v) = split_train_val(&users, 0.975, 0).unwrap();
    assert_eq!((t.len(), v.len()), (39, 1));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let ds = small_dataset(3);
    let config = small_config();
    let full = train_on_dataset(&config, &ds, TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let two = TrainConfig { epochs: 2, ..config.clone() };
    train_on_dataset(
        &two,
        &ds,
        TrainOptions {
            run_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let checkpoint = Checkpoint::load(&dir.path().join("epoch_2.ckpt")).unwrap();
    assert_eq!(checkpoint.epoch, 2);
    let resumed = train_on_dataset(
        &config,
        &ds,
        TrainOptions {
            resume: Some(checkpoint),
            ..TrainOptions::default()
        },
    )
    .unwrap();

    let epochs: Vec<usize> = resumed.run.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, [1, 2, 3]);
    assert_eq!(resumed.run.history_csv().unwrap(), full.run.history_csv().unwrap());
    assert_eq!(resumed.params, full.params);
}

#[test]
fn thread_count_does_not_change_results() {
    let ds = small_dataset(4);
    let config = small_config();
    let run = |threads| {
        train_on_dataset(
            &config,
            &ds,
            TrainOptions {
                threads: Some(threads),
                ..TrainOptions::default()
            },
        )
        .unwrap()
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.run.history_csv().unwrap(), four.run.history_csv().unwrap());
    assert_eq!(one.params, four.params);
}

#[test]
fn resume_rejects_a_different_model() {
    let ds = small_dataset(5);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig { epochs: 1, ..small_config() };
    train_on_dataset(
        &config,
        &ds,
        TrainOptions {
            run_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let checkpoint = Checkpoint::load(&dir.path().join("epoch_1.ckpt")).unwrap();
    let wider = TrainConfig { d_model: 12, ..config };
    let err = train_on_dataset(
        &wider,
        &ds,
        TrainOptions {
            resume: Some(checkpoint),
            ..TrainOptions::default()
        },
    )
    .err()
    .expect("mismatch rejected");
    assert!(err.to_string().contains("differs"), "{err}");
}
