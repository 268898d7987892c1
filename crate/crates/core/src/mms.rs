//! Money management: an arithmetic long-only rule on predicted prices, with
//! per-trade transaction and capital costs and a perfect-foresight benchmark.
//!
//! Each signal buys one unit of notional at `P_t` and sells at `P_{t+h}`
//! regardless of what happens in between. P&L is booked on the exit day.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::PriceSeries;
use crate::predictor::PredictionRun;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Annual borrowing rate, accrued pro rata over the holding period.
    pub capital_rate: f64,
    /// Charged once per round trip on entry notional.
    pub transaction_rate: f64,
    pub days_per_year: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            capital_rate: 0.10,
            transaction_rate: 0.0045,
            days_per_year: 252,
        }
    }
}

impl CostModel {
    pub fn zero() -> Self {
        Self {
            capital_rate: 0.0,
            transaction_rate: 0.0,
            days_per_year: 252,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.capital_rate >= 0.0 && self.transaction_rate >= 0.0) || self.days_per_year == 0 {
            return Err(Error::InvalidConfig(format!("invalid cost model {self:?}")));
        }
        Ok(())
    }

    /// Cost of one unit-notional trade held for `holding_days`.
    pub fn trade_cost(&self, holding_days: usize) -> f64 {
        self.transaction_rate + self.capital_rate * holding_days as f64 / self.days_per_year as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub asset: String,
    pub entry_t: usize,
    pub exit_t: usize,
    pub entry_px: f64,
    pub exit_px: f64,
    pub gross: f64,
    pub cost: f64,
    pub net: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeLedger {
    /// Sorted by entry time, then asset id.
    pub trades: Vec<Trade>,
    /// Price index of `daily_pnl[0]`.
    pub window_start: usize,
    pub daily_pnl: Vec<f64>,
    pub total_pnl: f64,
}

impl TradeLedger {
    pub fn empty() -> Self {
        Self {
            trades: Vec::new(),
            window_start: 0,
            daily_pnl: Vec::new(),
            total_pnl: 0.0,
        }
    }

    /// Builds the ledger over `window` (price indices). Trades are sorted so
    /// the result does not depend on candidate order.
    fn from_trades(mut trades: Vec<Trade>, window: Range<usize>) -> Self {
        trades.sort_by(|a, b| {
            (a.entry_t, &a.asset)
                .cmp(&(b.entry_t, &b.asset))
                .then(a.entry_px.total_cmp(&b.entry_px))
                .then(a.exit_px.total_cmp(&b.exit_px))
        });
        let mut daily_pnl = vec![0.0; window.len()];
        for tr in &trades {
            daily_pnl[tr.exit_t - window.start] += tr.net;
        }
        let total_pnl = trades.iter().map(|t| t.net).sum();
        Self {
            trades,
            window_start: window.start,
            daily_pnl,
            total_pnl,
        }
    }

    pub fn window(&self) -> Range<usize> {
        self.window_start..self.window_start + self.daily_pnl.len()
    }

    /// Largest number of simultaneously open unit positions; at least 1 so
    /// it can always serve as a capital base.
    pub fn peak_notional(&self) -> f64 {
        let mut events: Vec<(usize, i64)> = self
            .trades
            .iter()
            .flat_map(|t| [(t.entry_t, 1), (t.exit_t, -1)])
            .collect();
        // exits free capital before same-day entries
        events.sort();
        let (mut open, mut peak) = (0i64, 0i64);
        for (_, delta) in events {
            open += delta;
            peak = peak.max(open);
        }
        peak.max(1) as f64
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["asset", "entry_t", "exit_t", "entry_px", "exit_px", "gross", "cost", "net"])?;
        for t in &self.trades {
            w.write_record([
                t.asset.clone(),
                t.entry_t.to_string(),
                t.exit_t.to_string(),
                t.entry_px.to_string(),
                t.exit_px.to_string(),
                t.gross.to_string(),
                t.cost.to_string(),
                t.net.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn make_trade(asset: &str, t: usize, h: usize, entry: f64, exit: f64, costs: &CostModel) -> Trade {
    let gross = exit / entry - 1.0;
    let cost = costs.trade_cost(h);
    Trade {
        asset: asset.to_string(),
        entry_t: t,
        exit_t: t + h,
        entry_px: entry,
        exit_px: exit,
        gross,
        cost,
        net: gross - cost,
    }
}

fn run_window(run: &PredictionRun) -> Range<usize> {
    let lo = run.records.iter().map(|r| r.t).min().unwrap_or(0);
    let hi = run.records.iter().map(|r| r.t).max().map_or(lo, |t| t + run.horizon + 1);
    lo..hi
}

/// Buys every asset whose predicted price exceeds its current price. A
/// failed run trades nothing.
pub fn simulate(run: &PredictionRun, costs: &CostModel) -> Result<TradeLedger> {
    costs.validate()?;
    if run.failed {
        return Ok(TradeLedger::empty());
    }
    let h = run.horizon;
    let trades = run
        .records
        .iter()
        .filter(|r| r.pred_price > r.price_t && r.price_t_plus_h.is_finite())
        .map(|r| make_trade(&run.asset_ids[r.asset], r.t, h, r.price_t, r.price_t_plus_h, costs))
        .collect();
    Ok(TradeLedger::from_trades(trades, run_window(run)))
}

/// Perfect-foresight ledger over the same (t, asset) candidates as `run`.
/// Works for failed runs too, as long as they carry records.
pub fn benchmark_for_run(run: &PredictionRun, costs: &CostModel) -> Result<TradeLedger> {
    costs.validate()?;
    let h = run.horizon;
    let trades = run
        .records
        .iter()
        .filter(|r| r.price_t_plus_h.is_finite())
        .map(|r| make_trade(&run.asset_ids[r.asset], r.t, h, r.price_t, r.price_t_plus_h, costs))
        .filter(|t| t.net > 0.0)
        .collect();
    Ok(TradeLedger::from_trades(trades, run_window(run)))
}

/// Perfect-foresight ledger over entry days `entries`: trades exactly when the
/// realized move beats its costs. Entries without an exit price are skipped.
pub fn benchmark(series: &[PriceSeries], horizon: usize, costs: &CostModel, entries: Range<usize>) -> Result<TradeLedger> {
    costs.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be ≥ 1".into()));
    }
    let n = series.iter().map(PriceSeries::len).min().unwrap_or(0);
    let mut trades = Vec::new();
    for s in series {
        let p = s.prices();
        for t in entries.clone().filter(|t| t + horizon < n) {
            let trade = make_trade(s.asset_id(), t, horizon, p[t], p[t + horizon], costs);
            if trade.net > 0.0 {
                trades.push(trade);
            }
        }
    }
    let end = (entries.end + horizon).min(n).max(entries.start);
    Ok(TradeLedger::from_trades(trades, entries.start..end))
}

/// Daily returns over price indices `range`: `daily_pnl / capital_base`,
/// zero outside the ledger's window.
pub fn returns_series(ledger: &TradeLedger, range: Range<usize>, capital_base: f64) -> Result<Vec<f64>> {
    if !(capital_base > 0.0) {
        return Err(Error::InvalidConfig(format!("capital base {capital_base} must be > 0")));
    }
    let window = ledger.window();
    Ok(range
        .map(|t| {
            if window.contains(&t) {
                ledger.daily_pnl[t - window.start] / capital_base
            } else {
                0.0
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictionRecord;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn run_from(rows: &[(usize, usize, f64, f64, f64)], assets: &[&str], h: usize) -> PredictionRun {
        PredictionRun {
            asset_ids: assets.iter().map(|s| s.to_string()).collect(),
            horizon: h,
            records: rows
                .iter()
                .map(|&(t, asset, pred, now, later)| PredictionRecord {
                    t,
                    asset,
                    pred_logsum: (pred / now).ln(),
                    pred_price: pred,
                    price_t: now,
                    price_t_plus_h: later,
                })
                .collect(),
            is_mse_trace: vec![],
            failed: false,
            failed_at: None,
        }
    }

    #[test]
    fn flat_prices_cost_only() {
        let run = run_from(&[(10, 0, 101.0, 100.0, 100.0)], &["A"], 5);
        let ledger = simulate(&run, &CostModel::default()).unwrap();
        assert_eq!(ledger.trades.len(), 1);
        assert_relative_eq!(ledger.trades[0].net, -0.0064841, epsilon = 1e-7);
        assert_relative_eq!(ledger.trades[0].net, -0.0045 - 0.10 * 5.0 / 252.0, epsilon = 1e-15);
        assert_eq!(ledger.trades[0].exit_t, 15);
    }

    #[test]
    fn no_signal_no_trades() {
        let run = run_from(&[(0, 0, 99.0, 100.0, 120.0), (1, 0, 100.0, 100.0, 130.0)], &["A"], 5);
        let ledger = simulate(&run, &CostModel::default()).unwrap();
        assert!(ledger.trades.is_empty());
        assert_eq!(ledger.total_pnl, 0.0);
    }

    #[test]
    fn winning_trade_arithmetic() {
        let run = run_from(&[(3, 0, 105.0, 100.0, 110.0)], &["A"], 5);
        let ledger = simulate(&run, &CostModel::default()).unwrap();
        assert_relative_eq!(ledger.total_pnl, 0.0935159, epsilon = 1e-7);
        assert_eq!(ledger.window(), 3..9);
        assert_relative_eq!(ledger.daily_pnl[5], ledger.total_pnl);
    }

    #[test]
    fn failed_run_is_empty() {
        let mut run = run_from(&[(3, 0, 105.0, 100.0, 110.0)], &["A"], 5);
        run.failed = true;
        let ledger = simulate(&run, &CostModel::default()).unwrap();
        assert_eq!(ledger, TradeLedger::empty());
    }

    fn series(prices: Vec<f64>) -> PriceSeries {
        let start = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let dates = (0..prices.len()).map(|i| start + chrono::Days::new(i as u64)).collect();
        PriceSeries::new("A", dates, prices).unwrap()
    }

    #[test]
    fn benchmark_on_monotone_paths() {
        let down = series((0..40).map(|i| 100.0 * 0.99f64.powi(i)).collect());
        let ledger = benchmark(&[down], 5, &CostModel::default(), 0..40).unwrap();
        assert!(ledger.trades.is_empty());
        assert_eq!(ledger.total_pnl, 0.0);

        // +1% every 5 days, geometric
        let step = 1.01f64.powf(0.2);
        let up = series((0..40).map(|i| 100.0 * step.powi(i)).collect());
        let ledger = benchmark(&[up], 5, &CostModel::default(), 0..40).unwrap();
        assert_eq!(ledger.trades.len(), 35);
        for t in &ledger.trades {
            assert_relative_eq!(t.net, 0.01 - 0.0064841, epsilon = 1e-7);
        }
    }

    #[test]
    fn zero_cost_net_equals_gross() {
        let run = run_from(&[(0, 0, 2.0, 1.0, 1.5), (0, 1, 3.0, 2.0, 1.0)], &["A", "B"], 1);
        let ledger = simulate(&run, &CostModel::zero()).unwrap();
        for t in &ledger.trades {
            assert_eq!(t.net, t.gross);
        }
    }

    #[test]
    fn returns_series_examples() {
        let empty = TradeLedger::empty();
        assert_eq!(returns_series(&empty, 0..5, 1.0).unwrap(), vec![0.0; 5]);

        let run = run_from(&[(2, 0, 11.0, 10.0, 12.0)], &["A"], 2);
        let ledger = simulate(&run, &CostModel::zero()).unwrap();
        let r = returns_series(&ledger, 0..8, 2.0).unwrap();
        assert_eq!(r.iter().filter(|v| **v != 0.0).count(), 1);
        assert_relative_eq!(r[4], 0.1);
        assert_relative_eq!(r.iter().sum::<f64>(), ledger.total_pnl / 2.0);
        assert!(returns_series(&ledger, 0..8, 0.0).is_err());
    }

    #[test]
    fn peak_notional_counts_overlaps() {
        let run = run_from(
            &[(0, 0, 2.0, 1.0, 1.1), (1, 0, 2.0, 1.0, 1.1), (2, 0, 2.0, 1.0, 1.1), (5, 0, 2.0, 1.0, 1.1)],
            &["A"],
            2,
        );
        let ledger = simulate(&run, &CostModel::zero()).unwrap();
        // positions [0,2), [1,3), [2,4): the first closes as the third opens
        assert_eq!(ledger.peak_notional(), 2.0);
        assert_eq!(TradeLedger::empty().peak_notional(), 1.0);
    }

    #[test]
    fn ledger_csv_header() {
        let run = run_from(&[(0, 0, 2.0, 1.0, 1.5)], &["A"], 1);
        let ledger = simulate(&run, &CostModel::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ledger.csv");
        ledger.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("asset,entry_t,exit_t,entry_px,exit_px,gross,cost,net\n"));
    }

    fn arb_run() -> impl Strategy<Value = PredictionRun> {
        prop::collection::vec((0usize..30, 0usize..3, 50.0f64..150.0, 50.0f64..150.0, 50.0f64..150.0), 1..60)
            .prop_map(|rows| run_from(&rows, &["A", "B", "C"], 5))
    }

    proptest! {
        #[test]
        fn benchmark_dominates_any_strategy(
            run in arb_run(),
            cap in 0.0f64..0.3,
            tx in 0.0f64..0.02,
        ) {
            let costs = CostModel { capital_rate: cap, transaction_rate: tx, days_per_year: 252 };
            let sim = simulate(&run, &costs).unwrap();
            let bench = benchmark_for_run(&run, &costs).unwrap();
            prop_assert!(bench.total_pnl >= sim.total_pnl - 1e-12);
            prop_assert!((sim.daily_pnl.iter().sum::<f64>() - sim.total_pnl).abs() < 1e-9);
        }

        #[test]
        fn ledger_ignores_asset_order(run in arb_run()) {
            let mut permuted = run.clone();
            permuted.asset_ids = vec!["C".into(), "A".into(), "B".into()];
            for r in &mut permuted.records {
                r.asset = (r.asset + 1) % 3;
            }
            permuted.records.reverse();
            let costs = CostModel::default();
            prop_assert_eq!(simulate(&run, &costs).unwrap(), simulate(&permuted, &costs).unwrap());
        }
    }

    #[test]
    fn benchmark_matches_run_candidates() {
        let prices: Vec<f64> = (0..30).map(|i| 100.0 + (i as f64 * 0.9).sin() * 5.0).collect();
        let s = series(prices.clone());
        let rows: Vec<_> = (10..25).map(|t| (t, 0, 0.0, prices[t], prices[t + 5])).collect();
        let run = run_from(&rows, &["A"], 5);
        let a = benchmark(&[s], 5, &CostModel::default(), 10..25).unwrap();
        let b = benchmark_for_run(&run, &CostModel::default()).unwrap();
        assert_eq!(a.trades, b.trades);
        assert_eq!(a.total_pnl, b.total_pnl);
    }
}
