//! Batch-trains a predictor on the first part of the data, then walks the
//! remaining days predicting prices and learning online.
//!
//! cargo run --example online_predictor

use lowfreq::experiment::{prepare_data, DataConfig};
use lowfreq::neural::{Activation, OgdConfig, SgdConfig};
use lowfreq::predictor::{run_online, train_batch, PredictorConfig, TargetLag};
use lowfreq::synth::{generate, SynthConfig};

fn main() -> lowfreq::Result<()> {
    let series = generate(&SynthConfig { n_days: 800, seed: 4, ..Default::default() })?;
    let data = DataConfig { horizons: vec![1, 5, 10], forecast_horizon: 5, split_fraction: 0.6, scaling_range: [0.0, 1.0] };
    let prepared = prepare_data(&series, &data)?;

    let cfg = PredictorConfig {
        hidden_sizes: vec![8],
        activation: Activation::Sigmoid,
        output_activation: Activation::Linear,
        sgd: SgdConfig { learning_rate: 0.05, epochs: 100, minibatch_size: 16, rng_seed: 9, ..Default::default() },
        ogd: OgdConfig { learning_rate: 0.01 },
        training_fraction_used: 1.0,
        ogd_target_lag: TargetLag::Horizon,
    };
    let batch = train_batch(&prepared.scaled, &cfg, 9)?;
    println!("trained on {} rows, final IS mse {:.6}", batch.rows_used, batch.mse_trace.last().copied().unwrap_or(f64::NAN));

    let run = run_online(&batch.network, &prepared.scaled, &cfg, &prepared.scaler)?;
    let hits = run
        .records
        .iter()
        .filter(|r| (r.pred_price > r.price_t) == (r.price_t_plus_h > r.price_t))
        .count();
    println!("{} predictions, direction hit rate {:.3}", run.records.len(), hits as f64 / run.records.len() as f64);
    for r in run.records.iter().take(4) {
        println!(
            "t={} {}: now {:.3}, predicted {:.3}, realised {:.3}",
            r.t, run.asset_ids[r.asset], r.price_t, r.pred_price, r.price_t_plus_h
        );
    }
    Ok(())
}
