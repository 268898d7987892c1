//! A complete two-stage campaign on synthetic prices: SAE selection, predictor
//! grid, trading simulation and the overfitting report, all in a temporary
//! store.
//!
//! cargo run --release --example campaign [store-dir]

use lowfreq::experiment::{run_campaign, CampaignStore, ReportOptions, StageGrid};
use lowfreq::synth::{generate, SynthConfig};

fn main() -> lowfreq::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("lowfreq-campaign").display().to_string());
    let store = CampaignStore::open(&dir)?;
    store.write_prices(&generate(&SynthConfig { n_days: 900, seed: 11, ..Default::default() })?)?;

    let grid: StageGrid = serde_json::from_value(serde_json::json!({
        "stage1": {
            "horizons": [[1, 5, 10], [1, 2, 3]],
            "forecast_horizon": [5],
            "encoder_fractions": [[0.5], [0.5, 0.25]],
            "learning_rate": [0.1],
            "epochs": [30],
            "minibatch_size": [16],
        },
        "stage2": {
            "hidden_sizes": [[8]],
            "learning_rate": [0.05],
            "epochs": [0, 20, 100],
            "minibatch_size": [16],
            "ogd_learning_rate": [0.01],
            "training_fraction_used": [0.5, 1.0],
        },
    }))?;
    let report = run_campaign(&store, &grid, 11, &ReportOptions::default())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("store: {dir}");
    Ok(())
}
