//! Turns price predictions into long-only trades with transaction and capital
//! costs, next to the perfect-foresight benchmark over the same days.
//!
//! cargo run --example trading_simulation

use lowfreq::mms::{benchmark, returns_series, simulate, CostModel};
use lowfreq::predictor::{PredictionRecord, PredictionRun};
use lowfreq::synth::{generate, SynthConfig};

fn main() -> lowfreq::Result<()> {
    let series = generate(&SynthConfig { n_assets: 2, n_days: 400, seed: 6, ..Default::default() })?;
    let h = 5;
    let entries = 100..300;

    // a noisy oracle: right about direction most of the time
    let mut records = Vec::new();
    for t in entries.clone() {
        for (a, s) in series.iter().enumerate() {
            let (now, later) = (s.prices()[t], s.prices()[t + h]);
            let tilt = if (t * 7 + a * 3) % 10 < 7 { later - now } else { now - later };
            records.push(PredictionRecord { t, asset: a, pred_logsum: 0.0, pred_price: now + tilt, price_t: now, price_t_plus_h: later });
        }
    }
    let ids = series.iter().map(|s| s.asset_id().to_string()).collect();
    let run = PredictionRun { asset_ids: ids, horizon: h, records, is_mse_trace: vec![], failed: false, failed_at: None };

    let costs = CostModel::default();
    println!("cost per {h}-day trade: {:.6}", costs.trade_cost(h));
    let ledger = simulate(&run, &costs)?;
    let best = benchmark(&series, h, &costs, entries)?;
    println!("strategy: {} trades, net P&L {:.4}", ledger.trades.len(), ledger.total_pnl);
    println!("benchmark: {} trades, net P&L {:.4}", best.trades.len(), best.total_pnl);

    let r = returns_series(&ledger, ledger.window(), ledger.peak_notional())?;
    println!("{} daily returns on capital {:.0}, sum {:.4}", r.len(), ledger.peak_notional(), r.iter().sum::<f64>());
    Ok(())
}
