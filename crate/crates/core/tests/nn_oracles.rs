use gradamp::data::{synth_blobs, Dataset};
use gradamp::nn::{apply_update, local_train, GradientSet, Layer, ModelParams, TrainParams};
use gradamp::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_batch(shape: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let len: usize = full.iter().product();
    Tensor::new(full, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn loss(model: &ModelParams<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    model.loss(&model.forward(x).unwrap(), y)
}

/// Largest relative error between analytic and central-difference
/// parameter gradients.
fn param_check(model: &ModelParams<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let analytic = model.backward(&model.forward(x).unwrap(), y, false).unwrap();
    let mut worst = 0.0f64;
    let n_tensors = model.params().len();
    for t in 0..n_tensors {
        for k in 0..model.params()[t].len() {
            let mut plus = model.clone();
            plus.params_mut()[t].data_mut()[k] += STEP;
            let mut minus = model.clone();
            minus.params_mut()[t].data_mut()[k] -= STEP;
            let numeric = (loss(&plus, x, y) - loss(&minus, x, y)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.tensors[t].data()[k], numeric));
        }
    }
    worst
}

fn feature_check(model: &ModelParams<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let trace = model.forward(x).unwrap();
    let g = model.backward(&trace, y, true).unwrap();
    let fm_grads = g.feature_map_grads.unwrap();
    let layer = model.last_conv().unwrap() + 1;
    let base = trace.activations[layer].clone();
    let score = |act: &Tensor<f64>| -> f64 {
        let logits = model.forward_from(layer, act);
        y.iter().enumerate().map(|(s, &c)| logits.row(s)[c]).sum()
    };
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let mut p = base.clone();
        p.data_mut()[k] += STEP;
        let mut m = base.clone();
        m.data_mut()[k] -= STEP;
        let numeric = (score(&p) - score(&m)) / (2.0 * STEP);
        worst = worst.max(rel_err(fm_grads.data()[k], numeric));
    }
    worst
}

fn small_cnn(seed: u64) -> ModelParams<f64> {
    // 2×6×6 input, 3 filters: 57 conv + 52 dense = 109 parameters.
    let mut m = ModelParams::cnn([2, 6, 6], 3, 3, 2, &[], 4, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    m
}

#[test]
fn conv_dense_gradients_match_finite_differences() {
    for seed in 0..20 {
        let model = small_cnn(seed);
        assert!(model.num_params() <= 200);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = random_batch(&[2, 6, 6], 3, &mut r);
        let y: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
        let pe = param_check(&model, &x, &y);
        let fe = feature_check(&model, &x, &y);
        assert!(pe <= 1e-4, "seed {seed}: parameter rel err {pe}");
        assert!(fe <= 1e-4, "seed {seed}: feature-map rel err {fe}");
    }
}

#[test]
fn fifty_parameter_mlp_gradients() {
    for seed in 0..20 {
        let model = ModelParams::<f64>::mlp(3, &[8], 2, seed).unwrap();
        assert_eq!(model.num_params(), 50);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = random_batch(&[3], 5, &mut r);
        let y: Vec<usize> = (0..5).map(|_| r.random_range(0..2)).collect();
        let e = param_check(&model, &x, &y);
        assert!(e <= 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn deep_mlp_with_two_hidden_layers() {
    let model = ModelParams::<f64>::mlp(4, &[5, 3], 3, 77).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = random_batch(&[4], 6, &mut r);
    let y = vec![0, 1, 2, 0, 1, 2];
    assert!(param_check(&model, &x, &y) <= 1e-4);
}

#[test]
fn mlp_logits_match_hand_matrix_product() {
    let model = ModelParams::<f64>::mlp(3, &[4], 2, 5).unwrap();
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
    let logits = model.forward(&x).unwrap().logits().clone();

    let (w1, b1, w2, b2) = match model.layers() {
        [Layer::Dense { weight: w1, bias: b1 }, Layer::Relu, Layer::Dense { weight: w2, bias: b2 }, Layer::Softmax] => {
            (w1.data(), b1.data(), w2.data(), b2.data())
        }
        other => panic!("unexpected layout {other:?}"),
    };
    for s in 0..2 {
        let xs = x.row(s);
        let mut h = [0.0; 4];
        for o in 0..4 {
            h[o] = (b1[o] + (0..3).map(|i| w1[o * 3 + i] * xs[i]).sum::<f64>()).max(0.0);
        }
        for c in 0..2 {
            let want = b2[c] + (0..4).map(|i| w2[c * 4 + i] * h[i]).sum::<f64>();
            assert!((logits.row(s)[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn feature_capture_does_not_change_parameter_gradients() {
    let model = small_cnn(3);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let x = random_batch(&[2, 6, 6], 4, &mut r);
    let y = vec![0, 1, 2, 3];
    let trace = model.forward(&x).unwrap();
    let with = model.backward(&trace, &y, true).unwrap();
    let without = model.backward(&trace, &y, false).unwrap();
    assert_eq!(with.tensors, without.tensors);
    assert!(with.feature_map_grads.is_some());
}

#[test]
fn forward_backward_are_pure_across_threads() {
    let model = small_cnn(11);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = random_batch(&[2, 6, 6], 3, &mut r);
    let y = vec![1, 2, 3];
    let reference = model.backward(&model.forward(&x).unwrap(), &y, true).unwrap();
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (m, x, y) = (model.clone(), x.clone(), y.clone());
            std::thread::spawn(move || m.backward(&m.forward(&x).unwrap(), &y, true).unwrap())
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), reference);
    }
}

fn shard() -> Dataset<f64> {
    synth_blobs(3, 8, 5, 0.5, 4).unwrap()
}

#[test]
fn zero_learning_rate_gives_zero_update() {
    let model = ModelParams::<f64>::mlp(5, &[4], 3, 1).unwrap();
    let p = TrainParams {
        epochs: 2,
        batch_size: 4,
        lr: 0.0,
    };
    let u = local_train(&model, &shard(), &p, 3).unwrap();
    assert!(u.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn single_step_update_is_lr_times_gradient() {
    let model = ModelParams::<f64>::mlp(5, &[], 3, 8).unwrap();
    let one = shard().subset(&[4]);
    let lr = 0.3;
    let p = TrainParams {
        epochs: 1,
        batch_size: 1,
        lr,
    };
    let u = local_train(&model, &one, &p, 0).unwrap();

    // Closed form for softmax regression: dW = (softmax(z) − e_y) xᵀ, db = softmax(z) − e_y.
    let x = one.sample(0);
    let y = one.labels()[0];
    let (w, b) = match model.layers() {
        [Layer::Dense { weight, bias }, Layer::Softmax] => (weight.data(), bias.data()),
        _ => unreachable!(),
    };
    let z: Vec<f64> = (0..3)
        .map(|c| b[c] + (0..5).map(|i| w[c * 5 + i] * x[i]).sum::<f64>())
        .collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = e.iter().sum();
    for c in 0..3 {
        let d = e[c] / sum - if c == y { 1.0 } else { 0.0 };
        for i in 0..5 {
            assert!((u.tensors[0].data()[c * 5 + i] - lr * d * x[i]).abs() < 1e-12);
        }
        assert!((u.tensors[1].data()[c] - lr * d).abs() < 1e-12);
    }
}

#[test]
fn local_training_is_deterministic() {
    let model = ModelParams::<f64>::cnn([1, 6, 6], 4, 3, 2, &[], 3, 2).unwrap();
    let data = gradamp::data::synth_images(3, 6, [1, 6, 6], 0.2, 1).unwrap();
    let p = TrainParams {
        epochs: 2,
        batch_size: 5,
        lr: 0.1,
    };
    let a = local_train(&model, &data, &p, 42).unwrap();
    let b = local_train(&model, &data, &p, 42).unwrap();
    assert_eq!(a, b);
    let bits = |g: &GradientSet<f64>| g.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn empty_shard_is_reported() {
    let model = ModelParams::<f64>::mlp(5, &[], 3, 8).unwrap();
    let empty = Dataset::<f64>::empty(&[5], 3);
    assert!(matches!(
        local_train(&model, &empty, &TrainParams::default(), 0),
        Err(gradamp::Error::EmptyShard)
    ));
}

#[test]
fn apply_update_laws() {
    let model = ModelParams::<f64>::mlp(4, &[3], 2, 6).unwrap();
    let u = local_train(
        &model,
        &synth_blobs(2, 5, 4, 1.0, 0).unwrap(),
        &TrainParams::default(),
        1,
    )
    .unwrap();
    assert_eq!(apply_update(&model, &u, 0.0).unwrap(), model);

    let own = GradientSet::from_params(&model);
    let zeroed = apply_update(&model, &own, 1.0).unwrap();
    assert!(zeroed.params().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));

    // Exact inverse on dyadic values.
    let dy = u
        .with_values(
            &u.flatten()
                .iter()
                .map(|v| (v * 1024.0).round() / 1024.0)
                .collect::<Vec<_>>(),
        )
        .unwrap();
    let grid = GradientSet::from_params(&model)
        .with_values(
            &model
                .params()
                .iter()
                .flat_map(|t| t.data().iter().map(|v| (v * 1024.0).round() / 1024.0))
                .collect::<Vec<_>>(),
        )
        .unwrap();
    let base = apply_update(&model, &GradientSet::from_params(&model), 1.0)
        .and_then(|z| apply_update(&z, &grid.scaled(-1.0), 1.0))
        .unwrap();
    let there = apply_update(&base, &dy, 1.0).unwrap();
    let back = apply_update(&there, &dy.scaled(-1.0), 1.0).unwrap();
    assert_eq!(back, base);

    let other = ModelParams::<f64>::mlp(4, &[2], 2, 6).unwrap();
    assert!(apply_update(&other, &u, 1.0).is_err());
}

#[test]
fn f32_engine_agrees_with_f64() {
    let m64 = ModelParams::<f64>::mlp(3, &[4], 2, 5).unwrap();
    let m32: ModelParams<f32> = m64.cast();
    let x64 = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let x32: Tensor<f32> = x64.cast();
    let l64 = m64.forward(&x64).unwrap().logits().clone();
    let l32 = m32.forward(&x32).unwrap().logits().clone();
    for (a, b) in l64.data().iter().zip(l32.data()) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}
