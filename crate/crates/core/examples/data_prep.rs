//! Aggregated log-fluctuation features for a small synthetic universe, the
//! train-fitted scaler, and a price reconstructed from a scaled target.
//!
//! cargo run --example data_prep

use lowfreq::market_data::{build_dataset, fit_scaler, reconstruct_price, HorizonTuple};
use lowfreq::synth::{generate, SynthConfig};

fn main() -> lowfreq::Result<()> {
    let series = generate(&SynthConfig { n_assets: 2, n_days: 300, seed: 1, ..Default::default() })?;
    let ht = HorizonTuple::new(vec![1, 5, 10], 5)?;
    let ds = build_dataset(&series, &ht, 0.6)?;
    println!("{} rows, {} training, inputs {:?}", ds.n_rows(), ds.split_index, ds.input_column_names());

    let scaler = fit_scaler(&ds, [0.0, 1.0])?;
    let scaled = ds.scaled(&scaler)?;
    let row = ds.split_index;
    for asset in 0..ds.n_assets() {
        let col = scaler.target_column(asset);
        let y = scaled.targets[[row, asset]];
        let price = reconstruct_price(y, col, ds.anchor_prices[[row, asset]], &scaler);
        println!(
            "{} t={}: scaled target {y:.4} → price {price:.4} (actual {:.4})",
            ds.asset_ids[asset], ds.time_index[row], ds.future_prices[[row, asset]]
        );
    }
    Ok(())
}
