//! He-Adjusted initialisation, minibatch SGD on a toy regression, then a few
//! online steps on fresh rows.
//!
//! cargo run --example neural_training

use ndarray::Array2;
use lowfreq::neural::{he_adjusted_bound, he_adjusted_init, ogd_step, train_sgd, Activation, OgdConfig, SgdConfig};

fn main() -> lowfreq::Result<()> {
    let sizes = [2, 8, 1];
    println!("init bounds: {:.4} {:.4}", he_adjusted_bound(2, 8), he_adjusted_bound(8, 1));
    let net = he_adjusted_init(&sizes, &[Activation::Sigmoid, Activation::Linear], 3)?;

    // y = sin(x0) · x1 on a grid
    let n = 400;
    let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { (i % 20) as f64 / 20.0 * 3.0 } else { (i / 20) as f64 / 20.0 });
    let y = Array2::from_shape_fn((n, 1), |(i, _)| x[[i, 0]].sin() * x[[i, 1]]);

    let cfg = SgdConfig { learning_rate: 0.5, epochs: 300, minibatch_size: 16, momentum: 0.5, rng_seed: 7, ..Default::default() };
    let out = train_sgd(&net, x.view(), y.view(), &cfg)?;
    let trace = &out.mse_trace;
    println!("mse epoch 1 {:.5}, epoch {} {:.5}", trace[0], trace.len(), trace[trace.len() - 1]);

    let mut online = out.network;
    let ogd = OgdConfig { learning_rate: 0.05 };
    for t in 0..5 {
        let input = [0.1 + 0.5 * t as f64, 0.9];
        let pred = ogd_step(&mut online, &input, &[input[0].sin() * input[1]], &ogd)?;
        println!("step {t}: predicted {:.4}, actual {:.4}", pred[0], input[0].sin() * input[1]);
    }
    Ok(())
}
