//! Hand-derived values checked against the library.

mod common;

use fedclf::client::ClientUpdateResult;
use fedclf::dataset::{make_synthetic, LabeledDataset};
use fedclf::model::{
    evaluate, grad_check, init_params, loss_and_gradient, sgd_epochs, EvalDetail, ModelParams, ShapeTag, TrainConfig,
};
use fedclf::server::{aggregate, moving_average};
use rand::Rng;

fn update(id: usize, values: Vec<f64>, n_k: usize) -> ClientUpdateResult {
    ClientUpdateResult {
        client_id: id,
        new_params: ModelParams::new(ShapeTag::softmax(1, 1).unwrap(), values).unwrap(),
        loss_utility: 0.0,
        mean_loss: 0.0,
        grad_norm_utility: None,
        n_k,
        post_train_loss: 0.0,
        weight_delta_norm: 0.0,
    }
}

#[test]
fn weighted_average_of_two_clients() {
    // (1*1 + 3*4) / 4 = 3.25
    let merged = aggregate(&[update(0, vec![1.0, 1.0], 1), update(1, vec![4.0, 4.0], 3)]).unwrap();
    assert_eq!(merged.values(), &[3.25, 3.25]);
}

#[test]
fn full_batch_step_matches_the_analytic_gradient() {
    // two features, two classes, two samples; gradient of mean cross-entropy
    // is mean_i (p_i - onehot_i) x_i^T for W and mean_i (p_i - onehot_i) for b
    let x = [[1.0, -2.0], [0.5, 3.0]];
    let y = [0usize, 1];
    let w = [0.2, -0.1, 0.4, 0.3, 0.05, -0.05];
    let data = LabeledDataset::new(x.concat(), y.to_vec(), 2, 2).unwrap();
    let params = ModelParams::new(ShapeTag::softmax(2, 2).unwrap(), w.to_vec()).unwrap();
    let lr = 0.7;

    let mut grad = [0.0; 6];
    for i in 0..2 {
        let z: Vec<f64> = (0..2).map(|c| w[c * 2] * x[i][0] + w[c * 2 + 1] * x[i][1] + w[4 + c]).collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        for c in 0..2 {
            let delta = z[c].exp() / denom - f64::from(u8::from(c == y[i]));
            grad[c * 2] += delta * x[i][0] / 2.0;
            grad[c * 2 + 1] += delta * x[i][1] / 2.0;
            grad[4 + c] += delta / 2.0;
        }
    }
    let (_, lib_grad) = loss_and_gradient(&params, &data).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate: lr,
        batch_size: 2,
        rng_seed: 11,
    };
    let stepped = sgd_epochs(&params, &data, &cfg).unwrap();
    for j in 0..6 {
        assert!((lib_grad[j] - grad[j]).abs() < 1e-9, "grad {j}");
        assert!((stepped.values()[j] - (w[j] - lr * grad[j])).abs() < 1e-9, "param {j}");
    }
}

#[test]
fn cross_entropy_matches_brute_force() {
    let mut rng = fedclf::seed::rng_from(5);
    for seed in 0..20 {
        let (f, c) = (rng.random_range(1..8), rng.random_range(2..7));
        let data = make_synthetic(rng.random_range(1..60), f, c, seed);
        let mut params = init_params(ShapeTag::softmax(f, c).unwrap(), seed);
        for v in params.values_mut() {
            *v += rng.random_range(-2.0..2.0);
        }
        let report = evaluate(&params, &data, EvalDetail::Losses).unwrap();
        let losses = report.per_sample_losses.unwrap();
        let mut total = 0.0;
        for (i, got) in losses.iter().enumerate() {
            let want = common::softmax_ce(params.values(), f, c, data.row(i), data.label(i));
            assert!((got - want).abs() < 1e-9);
            total += want;
        }
        assert!((report.mean_loss - total / data.len() as f64).abs() < 1e-9);
    }
}

#[test]
fn argmax_ties_resolve_to_the_lowest_class() {
    // all-zero parameters give equal logits, so every sample predicts class 0
    let data = make_synthetic(30, 3, 3, 1);
    let report = evaluate(&ModelParams::zeros(ShapeTag::softmax(3, 3).unwrap()), &data, EvalDetail::Summary).unwrap();
    assert!((report.accuracy - 1.0 / 3.0).abs() < 1e-12);
    assert!((report.mean_loss - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn gradients_pass_finite_differences() {
    let data = make_synthetic(12, 4, 3, 2);
    for shape in [ShapeTag::softmax(4, 3).unwrap(), ShapeTag::mlp(4, 6, 3).unwrap()] {
        let params = init_params(shape, 3);
        assert!(grad_check(&params, &data, 1e-5).unwrap() < 1e-4, "{shape}");
    }
}

#[test]
fn moving_average_of_the_last_thirty() {
    let mut rng = fedclf::seed::rng_from(77);
    let acc: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
    let tail: f64 = acc[70..].iter().sum::<f64>() / 30.0;
    assert!((moving_average(&acc, 100, 30) - tail).abs() < 1e-12);
    assert!((moving_average(&acc, 10, 30) - acc[..10].iter().sum::<f64>() / 10.0).abs() < 1e-12);
}
