// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use windtl::nnet::{
    self, grad_check, init_network, train_autoencoder, Activation, AutoencoderSpec, Samples, Standardizer,
    TrainConfig,
};
use windtl::util;

fn linear_data(n: usize, noise: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = util::rng(seed, 1);
    let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
    let y = x
        .iter()
        .map(|v| vec![2.0 * v[0] + 1.0 + noise * rng.gen_range(-1.0..1.0)])
        .collect();
    (x, y)
}

fn least_squares(x: &[Vec<f64>], y: &[Vec<f64>]) -> (f64, f64) {
    let xs: Vec<f64> = x.iter().map(|v| v[0]).collect();
    let ys: Vec<f64> = y.iter().map(|v| v[0]).collect();
    let (mx, my) = (util::mean(&xs), util::mean(&ys));
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = xs.iter().map(|a| (a - mx) * (a - mx)).sum();
    let w = sxy / sxx;
    (w, my - w * mx)
}

fn linear_net() -> nnet::DenseNetwork {
    let mut net = init_network(&[1, 1], &[Activation::Identity], 3).unwrap();
    net.standardizer = Some(Standardizer::identity(1));
    net
}

#[test]
fn linear_unit_recovers_least_squares_line() {
    let (x, y) = linear_data(200, 0.0, 11);
    let (w_ls, b_ls) = least_squares(&x, &y);
    assert!((w_ls - 2.0).abs() < 1e-12 && (b_ls - 1.0).abs() < 1e-12);
    let cfg = TrainConfig {
        epochs: 300,
        learning_rate: 0.05,
        validation_fraction: 0.0,
        ..TrainConfig::default()
    };
    let (net, history) = nnet::train_samples(&linear_net(), Samples::new(&x, &y), &cfg).unwrap();
    let (w, b) = (net.layers[0].weights[0], net.layers[0].bias[0]);
    assert!((w - 2.0).abs() <= 0.02 * 2.0, "w = {w}");
    assert!((b - 1.0).abs() <= 0.02, "b = {b}");
    let mut running = f64::INFINITY;
    for e in &history {
        assert!(e.train.is_finite());
        running = running.min(e.train);
    }
    assert!(running < 1e-6);
    assert!(history.last().unwrap().train <= history[0].train);
}

#[test]
fn finetuning_converged_net_barely_moves_validation_loss() {
    let (x, y) = linear_data(400, 0.2, 12);
    let cfg = TrainConfig {
        epochs: 200,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let (net, _) = nnet::train_samples(&linear_net(), Samples::new(&x, &y), &cfg).unwrap();
    let val_loss = |net: &nnet::DenseNetwork| {
        let pred = net.predict_many(&x[320..]).unwrap();
        let obs: Vec<f64> = y[320..].iter().map(|v| v[0]).collect();
        util::rmse(&pred, &obs).powi(2)
    };
    let before = val_loss(&net);
    let small = TrainConfig {
        epochs: 20,
        learning_rate: 0.001,
        seed: 5,
        ..cfg
    };
    let (tuned, _) = nnet::train_samples(&net, Samples::new(&x, &y), &small).unwrap();
    let after = val_loss(&tuned);
    assert!(((after - before) / before).abs() < 0.05, "{before} -> {after}");
}

#[test]
fn linear_autoencoder_recovers_planar_features() {
    let mut rng = util::rng(21, 2);
    let basis: Vec<[f64; 7]> = (0..2)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
        .collect();
    let rows: Vec<Vec<f64>> = (0..600)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            (0..7).map(|d| a * basis[0][d] + b * basis[1][d]).collect()
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 300,
        learning_rate: 0.01,
        early_stop_patience: 30,
        ..TrainConfig::default()
    };
    let ae = train_autoencoder(&rows, &AutoencoderSpec::linear(2), &cfg).unwrap();
    assert!(ae.reconstruction_mse < 1e-3, "mse = {}", ae.reconstruction_mse);
    let again = train_autoencoder(&rows, &AutoencoderSpec::linear(2), &cfg).unwrap();
    assert_eq!(
        nnet::encode(&ae.encoder, &rows[0]).unwrap(),
        nnet::encode(&again.encoder, &rows[0]).unwrap()
    );
}

#[test]
fn random_tanh_networks_pass_gradient_check() {
    let mut rng = util::rng(31, 3);
    for trial in 0..10 {
        let depth = rng.gen_range(1..=3);
        let mut dims = vec![rng.gen_range(1..=6)];
        for _ in 0..depth {
            dims.push(rng.gen_range(1..=6));
        }
        let acts = vec![Activation::Tanh; depth];
        let net = init_network(&dims, &acts, trial).unwrap();
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..dims[depth]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(&net, (&x, &y), 1e-5).unwrap();
        assert!(err < 1e-4, "trial {trial}: {dims:?} -> {err}");
    }
}
