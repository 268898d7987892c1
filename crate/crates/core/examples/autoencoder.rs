//! Trains stacked autoencoders of two depths on aggregated features, keeps the
//! best by reconstruction error and encodes the dataset with it.
//!
//! cargo run --example autoencoder

use lowfreq::autoencoder::{encode, select_best_indices, train_sae, SaeSpec};
use lowfreq::market_data::{build_dataset, fit_scaler, HorizonTuple};
use lowfreq::neural::{Activation, SgdConfig};
use lowfreq::synth::{generate, SynthConfig};

fn main() -> lowfreq::Result<()> {
    let series = generate(&SynthConfig { n_days: 600, seed: 2, ..Default::default() })?;
    let raw = build_dataset(&series, &HorizonTuple::new(vec![1, 2, 5, 10], 5)?, 0.6)?;
    let ds = raw.scaled(&fit_scaler(&raw, [0.0, 1.0])?)?;
    let width = ds.input_width();

    let sgd = SgdConfig { learning_rate: 0.1, epochs: 100, minibatch_size: 16, rng_seed: 1, ..Default::default() };
    let specs = [
        SaeSpec::new(vec![width, width / 2], Activation::Sigmoid, sgd.clone()),
        SaeSpec::new(vec![width, width / 2, width / 4], Activation::Sigmoid, sgd),
    ];
    let models = specs.iter().map(|s| train_sae(&ds, s)).collect::<lowfreq::Result<Vec<_>>>()?;
    for m in &models {
        println!("encoder {:?}: training mse {:.6}", m.spec.encoder_sizes, m.training_mse);
    }
    let best = &models[select_best_indices(&models, 1)?[0]];
    let encoded = encode(best, &ds)?;
    println!("encoded width {} → {}, {} rows", width, encoded.input_width(), encoded.n_rows());
    Ok(())
}
